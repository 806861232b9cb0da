//! Synthetic stand-in for features exported from a pre-trained backbone.
//!
//! Per class `c` a center `mu_c ~ N(0, center_scale^2 I)` in `R^d` is drawn.
//! Each sample gets a teacher feature `v = mu_c + feature_noise * eps` and
//! `P` tokens `t_p = A v + token_noise * eta_p`, where `A` (`d_in × d`,
//! entries `N(0, 1/d)`) is shared by the whole dataset. The teacher
//! classifier `W0` (`K × d`) has entries `N(0, 1/d)`. Labels are one-hot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use super::tensor::{write_tensor, DType, Tensor};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Teacher feature dimension `d`.
    pub dim: usize,
    /// Token dimension `d_in`.
    pub token_dim: usize,
    /// Tokens per sample `P`.
    pub tokens: usize,
    /// Output size `K` of the teacher classifier.
    pub teacher_classes: usize,
    pub center_scale: f64,
    pub feature_noise: f64,
    pub token_noise: f64,
    pub query_per_class: usize,
    /// Training samples drawn from the database split.
    pub train_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            samples_per_class: 220,
            dim: 32,
            token_dim: 16,
            tokens: 8,
            teacher_classes: 100,
            center_scale: 1.0,
            feature_noise: 0.6,
            token_noise: 1.0,
            query_per_class: 20,
            train_size: 1000,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("samples_per_class", self.samples_per_class),
            ("dim", self.dim),
            ("token_dim", self.token_dim),
            ("tokens", self.tokens),
            ("teacher_classes", self.teacher_classes),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        for (name, value) in [
            ("center_scale", self.center_scale),
            ("feature_noise", self.feature_noise),
            ("token_noise", self.token_noise),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::invalid(
                    name,
                    format!("must be finite and >= 0, got {value}"),
                ));
            }
        }
        if self.query_per_class >= self.samples_per_class {
            return Err(Error::invalid(
                "query_per_class",
                format!(
                    "must leave database samples ({} >= {})",
                    self.query_per_class, self.samples_per_class
                ),
            ));
        }
        let database = self.num_classes * (self.samples_per_class - self.query_per_class);
        if self.train_size > database {
            return Err(Error::invalid(
                "train_size",
                format!("{} exceeds database size {database}", self.train_size),
            ));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_classes * self.samples_per_class
    }
}

/// In-memory synthetic dataset, before it is written out.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub tokens: Tensor,
    pub teacher_features: Matrix,
    pub classifier: Matrix,
    pub labels: Matrix,
    pub mixing: Matrix,
    pub classes: Vec<usize>,
    pub split: Split,
}

pub fn synthesize(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let n = spec.num_samples();
    let (d, d_in, p) = (spec.dim, spec.token_dim, spec.tokens);
    let mut root = Rng::new(spec.seed);
    let mut center_rng = root.fork(1);
    let mut mixing_rng = root.fork(2);
    let mut classifier_rng = root.fork(3);
    let mut order_rng = root.fork(4);
    let mut sample_rng = root.fork(5);
    let mut split_rng = root.fork(6);

    let centers = Matrix::random_normal(spec.num_classes, d, spec.center_scale, &mut center_rng);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mixing = Matrix::random_normal(d_in, d, inv_sqrt_d, &mut mixing_rng);
    let classifier =
        Matrix::random_normal(spec.teacher_classes, d, inv_sqrt_d, &mut classifier_rng);

    let mut classes: Vec<usize> = (0..n).map(|i| i / spec.samples_per_class).collect();
    order_rng.shuffle(&mut classes);

    let mut features = Matrix::zeros(n, d);
    let mut tokens = vec![0.0; n * p * d_in];
    let mut labels = Matrix::zeros(n, spec.num_classes);
    for (i, &c) in classes.iter().enumerate() {
        let v = features.row_mut(i);
        for (x, &mu) in v.iter_mut().zip(centers.row(c)) {
            *x = mu + spec.feature_noise * sample_rng.normal();
        }
        let clean = mixing.mul_vec(features.row(i))?;
        let grid = &mut tokens[i * p * d_in..(i + 1) * p * d_in];
        for token in grid.chunks_exact_mut(d_in) {
            for (t, &a) in token.iter_mut().zip(&clean) {
                *t = a + spec.token_noise * sample_rng.normal();
            }
        }
        labels.set(i, c, 1.0);
    }

    let mut query = Vec::new();
    let mut database = Vec::new();
    for c in 0..spec.num_classes {
        let members: Vec<usize> = (0..n).filter(|&i| classes[i] == c).collect();
        let picked = split_rng.sample_indices(members.len(), spec.query_per_class);
        let mut next = picked.iter().peekable();
        for (pos, &i) in members.iter().enumerate() {
            if next.peek() == Some(&&pos) {
                next.next();
                query.push(i);
            } else {
                database.push(i);
            }
        }
    }
    query.sort_unstable();
    database.sort_unstable();
    let train: Vec<usize> = split_rng
        .sample_indices(database.len(), spec.train_size)
        .into_iter()
        .map(|pos| database[pos])
        .collect();

    Ok(SynthData {
        tokens: Tensor::new(vec![n, p, d_in], tokens)?,
        teacher_features: features,
        classifier,
        labels,
        mixing,
        classes,
        split: Split {
            query,
            database,
            train,
        },
    })
}

/// Writes a synthetic dataset into `out_dir` and returns the manifest path.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let data = synthesize(spec)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let manifest = DatasetManifest {
        tokens_path: "tokens.iph".into(),
        teacher_features_path: "teacher_features.iph".into(),
        classifier_path: "classifier.iph".into(),
        labels_path: "labels.iph".into(),
        mixing_path: Some("mixing.iph".into()),
        split: data.split,
    };
    write_tensor(
        &out_dir.join(&manifest.tokens_path),
        &data.tokens,
        DType::F64,
    )?;
    let matrices = [
        (&manifest.teacher_features_path, &data.teacher_features),
        (&manifest.classifier_path, &data.classifier),
        (&manifest.labels_path, &data.labels),
        (manifest.mixing_path.as_ref().unwrap(), &data.mixing),
    ];
    for (name, m) in matrices {
        write_tensor(&out_dir.join(name), &Tensor::from(m), DType::F64)?;
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Dataset;

    fn small() -> SynthSpec {
        SynthSpec {
            num_classes: 3,
            samples_per_class: 12,
            dim: 6,
            token_dim: 4,
            tokens: 5,
            teacher_classes: 7,
            query_per_class: 2,
            train_size: 15,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_noise_gives_identical_class_features() {
        let spec = SynthSpec {
            feature_noise: 0.0,
            token_noise: 0.0,
            ..small()
        };
        let data = synthesize(&spec).unwrap();
        for i in 0..data.classes.len() {
            for j in 0..data.classes.len() {
                if data.classes[i] == data.classes[j] {
                    assert_eq!(data.teacher_features.row(i), data.teacher_features.row(j));
                }
            }
        }
    }

    #[test]
    fn noiseless_token_mean_equals_mixed_feature() {
        let spec = SynthSpec {
            token_noise: 0.0,
            ..small()
        };
        let data = synthesize(&spec).unwrap();
        let (p, d_in) = (spec.tokens, spec.token_dim);
        for i in 0..spec.num_samples() {
            let expected = data.mixing.mul_vec(data.teacher_features.row(i)).unwrap();
            let grid = &data.tokens.data()[i * p * d_in..(i + 1) * p * d_in];
            for k in 0..d_in {
                let mean = (0..p).map(|t| grid[t * d_in + k]).sum::<f64>() / p as f64;
                assert!((mean - expected[k]).abs() <= 1e-12 * expected[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn split_sizes_and_integrity() {
        let spec = small();
        let data = synthesize(&spec).unwrap();
        assert_eq!(data.split.query.len(), 6);
        assert_eq!(data.split.database.len(), 30);
        assert_eq!(data.split.train.len(), 15);
        data.split.validate(Some(36)).unwrap();
        for c in 0..3 {
            let q = data
                .split
                .query
                .iter()
                .filter(|&&i| data.classes[i] == c)
                .count();
            assert_eq!(q, 2);
        }
    }

    #[test]
    fn written_dataset_loads_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(&small(), a.path()).unwrap();
        generate_synthetic(&small(), b.path()).unwrap();
        for f in [
            "manifest.json",
            "tokens.iph",
            "teacher_features.iph",
            "classifier.iph",
            "labels.iph",
            "mixing.iph",
        ] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f} differs");
        }
        let ds = Dataset::load(&ma).unwrap();
        assert_eq!(ds.tokens.shape(), [36, 5, 4]);
        assert_eq!(ds.classifier.shape(), [7, 6]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(synthesize(&SynthSpec { dim: 0, ..small() }).is_err());
        assert!(synthesize(&SynthSpec {
            token_noise: -1.0,
            ..small()
        })
        .is_err());
        assert!(synthesize(&SynthSpec {
            train_size: 1000,
            ..small()
        })
        .is_err());
    }
}
