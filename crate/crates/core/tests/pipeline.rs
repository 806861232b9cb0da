//! Synthetic data through training, model files and encoding.

#![allow(clippy::needless_range_loop)]

use iphash_core::dataio::{generate_synthetic, Dataset, SynthSpec};
use iphash_core::trainer::{encode_dataset, train, ModelFile, TrainConfig};

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 4,
        samples_per_class: 30,
        dim: 8,
        token_dim: 5,
        tokens: 4,
        teacher_classes: 12,
        query_per_class: 5,
        train_size: 60,
        ..SynthSpec::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        bits: 12,
        epochs: 3,
        batch_size: 16,
        hidden: 10,
        ..TrainConfig::default()
    }
}

fn dataset(dir: &std::path::Path) -> Dataset {
    Dataset::load(&generate_synthetic(&small_spec(), dir).unwrap()).unwrap()
}

/// Straight-line copy of the encoder forward pass on complete inputs.
fn naive_logits(ds: &Dataset, m: &ModelFile, i: usize) -> Vec<f64> {
    let e = &m.encoder;
    let (d_in, d_h, d) = (e.w_tok.rows(), e.w_tok.cols(), e.w_out.cols());
    let grid = ds.tokens.sample(i);
    let p = grid.num_tokens();
    let mut pooled = vec![0.0; d_h];
    for t in 0..p {
        let tok = grid.token(t);
        for j in 0..d_h {
            let mut a = e.b_tok[j];
            for q in 0..d_in {
                a += tok[q] * e.w_tok.get(q, j);
            }
            pooled[j] += a.max(0.0) / p as f64;
        }
    }
    let v: Vec<f64> = (0..d)
        .map(|r| e.b_out[r] + (0..d_h).map(|j| pooled[j] * e.w_out.get(j, r)).sum::<f64>())
        .collect();
    let phi = m.hash.phi();
    (0..phi.cols())
        .map(|c| (0..d).map(|r| v[r] * phi.get(r, c)).sum())
        .collect()
}

#[test]
fn encoding_matches_a_direct_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let model = train(&ds, &small_config()).unwrap();
    let codes = encode_dataset(&ds, &model).unwrap();
    for i in 0..ds.len() {
        for (j, h) in naive_logits(&ds, &model, i).into_iter().enumerate() {
            if h.abs() > 1e-9 {
                assert_eq!(
                    codes.get(i, j),
                    if h > 0.0 { 1.0 } else { -1.0 },
                    "sample {i} bit {j}"
                );
            }
        }
    }
}

#[test]
fn training_is_deterministic_and_model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let a = train(&ds, &small_config()).unwrap();
    let b = train(&ds, &small_config()).unwrap();
    let (pa, pb) = (dir.path().join("a.model"), dir.path().join("b.model"));
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());

    let loaded = ModelFile::load(&pa).unwrap();
    assert_eq!(loaded.config, a.config);
    assert_eq!(loaded.log.len(), 3);
    assert_eq!(
        encode_dataset(&ds, &loaded).unwrap(),
        encode_dataset(&ds, &a).unwrap()
    );

    let other = train(
        &ds,
        &TrainConfig {
            seed: 9,
            ..small_config()
        },
    )
    .unwrap();
    assert_ne!(other.hash.phi(), a.hash.phi());
}

#[test]
fn zero_epochs_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let m0 = train(&ds, &cfg).unwrap();
    assert!(m0.log.is_empty());
    let m1 = train(
        &ds,
        &TrainConfig {
            epochs: 1,
            ..small_config()
        },
    )
    .unwrap();
    assert_ne!(m0.hash.phi(), m1.hash.phi());
}

#[test]
fn loss_log_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let cfg = TrainConfig {
        use_rec: false,
        ..small_config()
    };
    let m = train(&ds, &cfg).unwrap();
    for e in &m.log {
        let r = e.mean;
        assert_eq!(r.l_rec, 0.0);
        assert!((r.total - (r.l_kl + r.l_sim + r.l_quan)).abs() < 1e-9);
        assert!(r.l_kl >= 0.0 && r.l_sim >= 0.0 && r.l_quan >= 0.0);
    }
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path());
    let err = train(
        &ds,
        &TrainConfig {
            mask_ratio: 1.0,
            ..small_config()
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains("mask_ratio"), "{err}");
}
