//! Finite-difference check of every analytic parameter gradient.
//!
//! The reference objective is the joint loss with the sign relaxed at the
//! straight-through point: around base logits `h0` with signs `s0`, codes are
//! `b = s0 + (h − h0)` in the similarity term and `s0` stays fixed in the
//! quantization term. Its forward pass is written out independently of
//! `hashcore`/`student` so the two routes only share the problem data.

use serde::Serialize;

use crate::dataio::TokenSample;
use crate::error::Result;
use crate::hashcore::{
    binarize, hash_project, total_loss, Batch, Gradients, HashLayer, KlDirection, LossConfig,
};
use crate::numkit::{softmax, Matrix, Rng};
use crate::student::{random_mask, MaskPattern, StudentEncoder};

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not produce spurious failures.
pub const ABS_FLOOR: f64 = 1e-6;

/// Pre-activations closer than this to the ReLU kink trigger a redraw.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Adds this fraction of the KL term's gradient on top of the analytic
    /// gradient. Only used to show that the harness detects a wrong gradient.
    pub mutation: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            trials: 20,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            mutation: None,
        }
    }
}

/// A self-contained small instance of the joint objective.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub encoder: StudentEncoder,
    pub hash: HashLayer,
    pub classifier: Matrix,
    /// Flattened `P × d_in` grids.
    pub tokens: Vec<Vec<f64>>,
    pub masks: Vec<MaskPattern>,
    pub teacher_features: Vec<Vec<f64>>,
    pub soft_labels: Vec<Vec<f64>>,
    pub loss: LossConfig,
}

impl GradProblem {
    /// Random instance with `d_in, d_h, d ≤ 16`, `L ≤ 8`, `K ≤ 10`,
    /// batch `≤ 4`, `P ≤ 6`.
    pub fn random(rng: &mut Rng) -> Self {
        let token_dim = 1 + rng.below(16);
        let hidden = 1 + rng.below(16);
        let dim = 1 + rng.below(16);
        let bits = 1 + rng.below(8);
        let classes = 2 + rng.below(9);
        let batch = 2 + rng.below(3);
        let tokens_per_sample = 1 + rng.below(6);
        let tau = rng.uniform(0.5, 5.0);
        let gamma = rng.uniform(0.05, 1.0);
        let ratio = rng.uniform(0.0, 0.75);
        let kl_direction = if rng.below(2) == 0 {
            KlDirection::TeacherStudent
        } else {
            KlDirection::StudentTeacher
        };

        let mut encoder = StudentEncoder::random(token_dim, hidden, dim, rng);
        for b in encoder.b_tok.iter_mut().chain(encoder.b_out.iter_mut()) {
            *b = 0.5 * rng.normal();
        }
        let hash = HashLayer::new(Matrix::random_normal(
            dim,
            bits,
            1.0 / (dim as f64).sqrt(),
            rng,
        ))
        .expect("non-empty layer");
        let classifier = Matrix::random_normal(classes, dim, 1.0, rng);
        let tokens = (0..batch)
            .map(|_| {
                (0..tokens_per_sample * token_dim)
                    .map(|_| rng.normal())
                    .collect()
            })
            .collect();
        let masks = (0..batch)
            .map(|_| random_mask(tokens_per_sample, ratio, rng).expect("valid ratio"))
            .collect();
        let teacher_features: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..dim).map(|_| rng.normal()).collect())
            .collect();
        let soft_labels = teacher_features
            .iter()
            .map(|v| softmax(&classifier.mul_vec(v).expect("dims"), tau).expect("tau > 0"))
            .collect();
        GradProblem {
            encoder,
            hash,
            classifier,
            tokens,
            masks,
            teacher_features,
            soft_labels,
            loss: LossConfig {
                tau,
                gamma,
                use_kl: true,
                use_rec: true,
                kl_direction,
            },
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        let dim = self.encoder.token_dim();
        Batch {
            tokens: self
                .tokens
                .iter()
                .map(|t| TokenSample::new(t, dim).expect("grid shape"))
                .collect(),
            masks: self.masks.clone(),
            teacher_features: self.teacher_features.iter().map(Vec::as_slice).collect(),
            soft_labels: self.soft_labels.iter().map(Vec::as_slice).collect(),
        }
    }

    /// Smallest `|W_tokᵀ t_p + b_tok|` over kept tokens.
    pub fn min_preactivation(&self) -> f64 {
        let enc = &self.encoder;
        let d_in = enc.token_dim();
        let mut min = f64::INFINITY;
        for (grid, mask) in self.tokens.iter().zip(&self.masks) {
            for &p in mask.kept() {
                let t = &grid[p * d_in..(p + 1) * d_in];
                let pre = enc.w_tok.left_mul(t).expect("dims");
                for (a, b) in pre.iter().zip(&enc.b_tok) {
                    min = min.min((a + b).abs());
                }
            }
        }
        min
    }

    fn base_logits(&self) -> Vec<Vec<f64>> {
        self.batch()
            .tokens
            .iter()
            .zip(&self.masks)
            .map(|(t, m)| {
                let v = self.encoder.encode(*t, m).expect("dims");
                hash_project(&v, &self.hash).expect("dims")
            })
            .collect()
    }
}

/// Relaxed joint objective evaluated at (`encoder`, `phi`), with the sign
/// frozen to `signs` around base logits `h0`.
pub fn relaxed_objective(
    problem: &GradProblem,
    encoder: &StudentEncoder,
    phi: &Matrix,
    signs: &[Vec<f64>],
    h0: &[Vec<f64>],
) -> f64 {
    let cfg = &problem.loss;
    let n = problem.tokens.len();
    let d_in = encoder.w_tok.rows();
    let d_h = encoder.w_tok.cols();
    let d = encoder.w_out.cols();
    let bits = phi.cols();
    let k = problem.classifier.rows();

    let mut rec = 0.0;
    let mut kl = 0.0;
    let mut quan = 0.0;
    let mut codes = Vec::with_capacity(n);

    // Constructed classifier, K × L.
    let mut w = vec![0.0; k * bits];
    for c in 0..k {
        for j in 0..bits {
            let mut s = 0.0;
            for r in 0..d {
                s += problem.classifier.get(c, r) * phi.get(r, j);
            }
            w[c * bits + j] = s;
        }
    }

    for i in 0..n {
        let grid = &problem.tokens[i];
        let kept = problem.masks[i].kept();
        let mut pooled = vec![0.0; d_h];
        for &p in kept {
            for j in 0..d_h {
                let mut a = encoder.b_tok[j];
                for q in 0..d_in {
                    a += grid[p * d_in + q] * encoder.w_tok.get(q, j);
                }
                if a > 0.0 {
                    pooled[j] += a;
                }
            }
        }
        for x in &mut pooled {
            *x /= kept.len() as f64;
        }
        let mut v = vec![0.0; d];
        for r in 0..d {
            let mut s = encoder.b_out[r];
            for j in 0..d_h {
                s += pooled[j] * encoder.w_out.get(j, r);
            }
            v[r] = s;
        }
        let mut h = vec![0.0; bits];
        for j in 0..bits {
            for r in 0..d {
                h[j] += v[r] * phi.get(r, j);
            }
        }

        for r in 0..d {
            let e = v[r] - problem.teacher_features[i][r];
            rec += e * e / n as f64;
        }

        let logits: Vec<f64> = (0..k)
            .map(|c| (0..bits).map(|j| w[c * bits + j] * h[j]).sum::<f64>() / cfg.tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let zt = &problem.soft_labels[i];
        let mut sample_kl = 0.0;
        for c in 0..k {
            let log_q = logits[c] - lse;
            match cfg.kl_direction {
                KlDirection::TeacherStudent => {
                    if zt[c] > 0.0 {
                        sample_kl += zt[c] * (zt[c].ln() - log_q);
                    }
                }
                KlDirection::StudentTeacher => {
                    sample_kl += log_q.exp() * (log_q - zt[c].ln());
                }
            }
        }
        kl += sample_kl / n as f64;

        for j in 0..bits {
            let e = h[j] - signs[i][j];
            quan += e * e / n as f64;
        }
        codes.push(
            (0..bits)
                .map(|j| signs[i][j] + h[j] - h0[i][j])
                .collect::<Vec<f64>>(),
        );
    }

    let cos = |a: &[f64], b: &[f64]| {
        let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        let bb: f64 = b.iter().map(|x| x * x).sum();
        ab / (aa.sqrt() * bb.sqrt())
    };
    let pairs = (n * (n - 1) / 2) as f64;
    let mut sim = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let gap = cos(&problem.teacher_features[i], &problem.teacher_features[j])
                - cos(&codes[i], &codes[j]);
            sim += gap * gap / pairs;
        }
    }

    let mut total = sim + quan;
    if cfg.use_kl {
        total += kl;
    }
    if cfg.use_rec {
        total += cfg.gamma * rec;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub trial: usize,
    pub batch: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub bits: usize,
    pub classes: usize,
    pub kl_direction: KlDirection,
    pub max_rel_error: f64,
    /// Parameter and flat index where the largest error occurred.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub trials: Vec<TrialReport>,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn analytic_gradients(problem: &GradProblem, mutation: Option<f64>) -> Result<Gradients> {
    let batch = problem.batch();
    let (_, mut grads) = total_loss(
        &batch,
        &problem.encoder,
        &problem.hash,
        &problem.classifier,
        &problem.loss,
    )?;
    if let Some(fraction) = mutation {
        let without_kl = LossConfig {
            use_kl: false,
            ..problem.loss
        };
        let (_, other) = total_loss(
            &batch,
            &problem.encoder,
            &problem.hash,
            &problem.classifier,
            &without_kl,
        )?;
        for (g, o) in grads.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in g.iter_mut().zip(o) {
                *x += fraction * (*x - y);
            }
        }
    }
    Ok(grads)
}

/// Compares analytic and central-difference gradients for one problem.
pub fn check_problem(
    problem: &GradProblem,
    opts: &GradcheckOptions,
    trial: usize,
) -> Result<TrialReport> {
    let grads = analytic_gradients(problem, opts.mutation)?;
    let h0 = problem.base_logits();
    let signs: Vec<Vec<f64>> = h0.iter().map(|h| binarize(h).to_f64()).collect();

    let names = ["w_tok", "b_tok", "w_out", "b_out", "phi"];
    let mut max_err = 0.0f64;
    let mut worst = String::from("none");
    let mut encoder = problem.encoder.clone();
    let mut phi = problem.hash.phi().clone();
    let analytic = grads.tensors();

    for (slot, name) in names.iter().enumerate() {
        let len = analytic[slot].len();
        for idx in 0..len {
            let eval = |delta: f64, encoder: &mut StudentEncoder, phi: &mut Matrix| {
                let cell = if slot < 4 {
                    &mut encoder.tensors_mut()[slot][idx]
                } else {
                    &mut phi.as_mut_slice()[idx]
                };
                let orig = *cell;
                *cell = orig + delta;
                let f = relaxed_objective(problem, encoder, phi, &signs, &h0);
                let cell = if slot < 4 {
                    &mut encoder.tensors_mut()[slot][idx]
                } else {
                    &mut phi.as_mut_slice()[idx]
                };
                *cell = orig;
                f
            };
            let plus = eval(opts.step, &mut encoder, &mut phi);
            let minus = eval(-opts.step, &mut encoder, &mut phi);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[slot][idx], numeric);
            if err > max_err || err.is_nan() {
                max_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = format!("{name}[{idx}]");
            }
        }
    }

    let enc = &problem.encoder;
    Ok(TrialReport {
        trial,
        batch: problem.tokens.len(),
        tokens: problem.masks.first().map_or(0, MaskPattern::total),
        token_dim: enc.token_dim(),
        hidden: enc.hidden_dim(),
        dim: enc.out_dim(),
        bits: problem.hash.bits(),
        classes: problem.classifier.rows(),
        kl_direction: problem.loss.kl_direction,
        max_rel_error: max_err,
        worst,
        passed: max_err <= opts.tolerance,
    })
}

/// Runs `opts.trials` random problems. Problems with a pre-activation
/// within `1e-3` of the ReLU kink are redrawn, since a central difference
/// straddling the kink does not estimate either one-sided derivative.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = Rng::new(opts.seed);
    let mut trials = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let problem = loop {
            let p = GradProblem::random(&mut rng);
            if p.min_preactivation() >= KINK_MARGIN {
                break p;
            }
        };
        trials.push(check_problem(&problem, opts, trial)?);
    }
    let max_rel_error = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        max_rel_error,
        passed: trials.iter().all(|t| t.passed),
        trials,
    })
}
