//! Optimisation: Adam over two parameter groups, the epoch loop, model
//! files, dataset encoding and the finite-difference gradient check.

mod adam;
mod config;
mod gradcheck;
mod model_file;

pub use adam::{adam_step, AdamState};
pub use config::{AdamParams, EncoderInit, TrainConfig};
pub use gradcheck::{
    check_problem, gradcheck, relaxed_objective, GradProblem, GradcheckOptions, GradcheckReport,
    TrialReport,
};
pub use model_file::{EpochLog, ModelFile, MODEL_FORMAT};

use rayon::prelude::*;

use crate::dataio::{Dataset, TokenSample};
use crate::error::{Error, Result};
use crate::hashcore::{
    binarize, hash_project, total_loss, Batch, Gradients, HashLayer, LossReport,
};
use crate::numkit::{Matrix, Rng};
use crate::student::{random_mask, MaskPattern, StudentEncoder};
use crate::teacher::TeacherBank;

/// Adam moments for the encoder group and the hash-layer group.
#[derive(Debug, Clone)]
struct Optimizer {
    encoder: Vec<AdamState>,
    hash: AdamState,
    step: u64,
}

impl Optimizer {
    fn new(encoder: &StudentEncoder, hash: &HashLayer) -> Self {
        Optimizer {
            encoder: encoder
                .tensors()
                .iter()
                .map(|t| AdamState::new(t.len()))
                .collect(),
            hash: AdamState::new(hash.phi().as_slice().len()),
            step: 0,
        }
    }

    fn apply(
        &mut self,
        cfg: &TrainConfig,
        encoder: &mut StudentEncoder,
        hash: &mut HashLayer,
        grads: &Gradients,
    ) -> Result<()> {
        self.step += 1;
        for ((param, grad), state) in encoder
            .tensors_mut()
            .into_iter()
            .zip(grads.encoder.tensors())
            .zip(&mut self.encoder)
        {
            adam_step(param, grad, state, &cfg.adam, cfg.lr_encoder, self.step)?;
        }
        adam_step(
            hash.phi_mut().as_mut_slice(),
            grads.phi.as_slice(),
            &mut self.hash,
            &cfg.adam,
            cfg.lr_hash,
            self.step,
        )
    }
}

fn first_non_finite(report: &LossReport) -> Option<&'static str> {
    [
        ("l_kl", report.l_kl),
        ("l_sim", report.l_sim),
        ("l_quan", report.l_quan),
        ("l_rec", report.l_rec),
        ("total", report.total),
    ]
    .into_iter()
    .find(|(_, x)| !x.is_finite())
    .map(|(name, _)| name)
}

/// Splits `order` into batches of `batch_size`; a final short batch is kept
/// only if it still has a pair.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Initial parameters for a dataset, before any optimisation step.
pub fn initial_parameters(
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<(StudentEncoder, HashLayer)> {
    let d = dataset.feature_dim();
    let mut encoder = StudentEncoder::random(dataset.tokens.dim(), config.hidden, d, rng);
    if config.encoder_init == EncoderInit::WarmStart {
        let train = &dataset.manifest.split.train;
        let samples: Vec<TokenSample<'_>> =
            train.iter().map(|&i| dataset.tokens.sample(i)).collect();
        let targets: Vec<&[f64]> = train
            .iter()
            .map(|&i| dataset.teacher_features.row(i))
            .collect();
        encoder.fit_readout(&samples, &targets, config.ridge)?;
    }
    let hash = HashLayer::random(d, config.bits, rng);
    Ok((encoder, hash))
}

/// Trains encoder and hash layer on the dataset's training split.
///
/// Each epoch shuffles the training indices, draws fresh masks for every
/// sample of every batch, evaluates the joint objective and takes one Adam
/// step on both parameter groups.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<ModelFile> {
    config.validate()?;
    let train_idx = &dataset.manifest.split.train;
    if train_idx.len() < 2 {
        return Err(Error::invalid(
            "train split",
            format!("needs at least 2 samples, has {}", train_idx.len()),
        ));
    }
    let teacher = TeacherBank::build(
        dataset.teacher_features.clone(),
        dataset.classifier.clone(),
        config.tau,
    )?;

    let mut root = Rng::new(config.seed);
    let mut init_rng = root.fork(1);
    let mut shuffle_rng = root.fork(2);
    let mut mask_rng = root.fork(3);

    let (mut encoder, mut hash) = initial_parameters(dataset, config, &mut init_rng)?;
    let mut optimizer = Optimizer::new(&encoder, &hash);
    let loss_cfg = config.loss_config();
    let tokens_per_sample = dataset.tokens.tokens_per_sample();
    let mut log = Vec::with_capacity(config.epochs);

    let mut order = train_idx.clone();
    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        for chunk in batches(&order, config.batch_size) {
            let masks = chunk
                .iter()
                .map(|_| random_mask(tokens_per_sample, config.mask_ratio, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch {
                tokens: chunk.iter().map(|&i| dataset.tokens.sample(i)).collect(),
                masks,
                teacher_features: chunk.iter().map(|&i| teacher.features().row(i)).collect(),
                soft_labels: chunk
                    .iter()
                    .map(|&i| teacher.soft_labels().row(i))
                    .collect(),
            };
            let (report, grads) =
                total_loss(&batch, &encoder, &hash, teacher.classifier(), &loss_cfg)?;
            if let Some(component) = first_non_finite(&report) {
                return Err(Error::Diverged {
                    component,
                    epoch,
                    step: steps + 1,
                });
            }
            optimizer.apply(config, &mut encoder, &mut hash, &grads)?;
            if !encoder.is_finite() || !hash.phi().is_finite() {
                return Err(Error::Diverged {
                    component: "parameters",
                    epoch,
                    step: steps + 1,
                });
            }
            sum.l_kl += report.l_kl;
            sum.l_sim += report.l_sim;
            sum.l_quan += report.l_quan;
            sum.l_rec += report.l_rec;
            sum.total += report.total;
            sum.pair_count += report.pair_count;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let mean = LossReport {
            l_kl: sum.l_kl / k,
            l_sim: sum.l_sim / k,
            l_quan: sum.l_quan / k,
            l_rec: sum.l_rec / k,
            total: sum.total / k,
            gamma: config.gamma,
            tau: config.tau,
            pair_count: sum.pair_count / steps.max(1),
        };
        log::info!(
            "epoch {epoch:>4}  total {:.6}  kl {:.6}  sim {:.6}  quan {:.6}  rec {:.6}",
            mean.total,
            mean.l_kl,
            mean.l_sim,
            mean.l_quan,
            mean.l_rec
        );
        log.push(EpochLog { epoch, steps, mean });
    }

    Ok(ModelFile {
        config: config.clone(),
        encoder,
        hash,
        log,
    })
}

/// Codes for every sample from complete (unmasked) inputs, `N × L` of `±1`.
pub fn encode_dataset(dataset: &Dataset, model: &ModelFile) -> Result<Matrix> {
    if dataset.tokens.dim() != model.encoder.token_dim() {
        return Err(Error::shape(
            "encode_dataset",
            &dataset.tokens.shape(),
            &model.encoder.w_tok.shape(),
        ));
    }
    encode_tokens(&dataset.tokens, &model.encoder, &model.hash)
}

pub fn encode_tokens(
    tokens: &crate::dataio::TokenBank,
    encoder: &StudentEncoder,
    hash: &HashLayer,
) -> Result<Matrix> {
    if encoder.out_dim() != hash.input_dim() {
        return Err(Error::shape(
            "encode",
            &[encoder.out_dim()],
            &hash.phi().shape(),
        ));
    }
    let full = MaskPattern::full(tokens.tokens_per_sample());
    let rows = (0..tokens.len())
        .into_par_iter()
        .map(|i| {
            let v = encoder.encode(tokens.sample(i), &full)?;
            let h = hash_project(&v, hash)?;
            Ok(binarize(&h).to_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    Matrix::new(tokens.len(), hash.bits(), rows.concat())
}
