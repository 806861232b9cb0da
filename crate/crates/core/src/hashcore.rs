//! Hashing-preserving stage.
//!
//! Student features `v` are projected to hash logits `h = v·φ` and binarized
//! to codes `b = sign(h)`. Three losses act on this stage:
//!
//! - `L_kl`: KL divergence between the teacher's soft labels and
//!   `softmax(W0 φ h / τ)`, the output of the classifier constructed from
//!   the frozen teacher head `W0` and the hash layer;
//! - `L_sim`: squared gap between teacher-feature cosines and code cosines
//!   over all unordered pairs of a batch, differentiated with a
//!   straight-through sign;
//! - `L_quan`: `‖h − sign(h)‖²`, with the sign held constant.
//!
//! [`total_loss`] combines them with the reconstruction loss as
//! `L_kl + L_sim + L_quan + γ L_rec`.

use serde::{Deserialize, Serialize};

use crate::dataio::TokenSample;
use crate::error::{Error, Result};
use crate::numkit::{cosine, dot, matmul, squared_distance, Matrix, Rng};
use crate::student::{MaskPattern, StudentEncoder};

pub const DEFAULT_GAMMA: f64 = 0.1;

/// Row tolerance for teacher distributions.
const DISTRIBUTION_TOL: f64 = 1e-6;

/// Linear hash layer `φ` of shape `d × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashLayer {
    phi: Matrix,
}

impl HashLayer {
    pub fn new(phi: Matrix) -> Result<Self> {
        if phi.cols() == 0 || phi.rows() == 0 {
            return Err(Error::invalid("bits", "hash layer needs d >= 1 and L >= 1"));
        }
        if !phi.is_finite() {
            return Err(Error::NonFinite("hash layer".into()));
        }
        Ok(HashLayer { phi })
    }

    /// Entries `N(0, 1/d)`.
    pub fn random(input_dim: usize, bits: usize, rng: &mut Rng) -> Self {
        HashLayer {
            phi: Matrix::random_normal(input_dim, bits, 1.0 / (input_dim as f64).sqrt(), rng),
        }
    }

    pub fn bits(&self) -> usize {
        self.phi.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.phi.rows()
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut Matrix {
        &mut self.phi
    }
}

/// A binary code with entries exactly `±1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeVector {
    signs: Vec<i8>,
}

impl CodeVector {
    pub fn from_signs(signs: Vec<i8>) -> Result<Self> {
        if let Some(pos) = signs.iter().position(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidCode {
                row: 0,
                col: pos,
                value: signs[pos] as f64,
            });
        }
        Ok(CodeVector { signs })
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| s as f64).collect()
    }

    /// Cosine between two codes; both have norm `√L`, so this is `b_i·b_j / L`.
    pub fn cosine(&self, other: &CodeVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        let agree: i64 = self
            .signs
            .iter()
            .zip(&other.signs)
            .map(|(&a, &b)| (a as i64) * (b as i64))
            .sum();
        agree as f64 / self.len() as f64
    }
}

/// `sign(x)` with `sign(0) = sign(-0) = +1`.
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `h = v·φ`.
pub fn hash_project(v: &[f64], layer: &HashLayer) -> Result<Vec<f64>> {
    layer.phi.left_mul(v)
}

pub fn binarize(h: &[f64]) -> CodeVector {
    CodeVector {
        signs: h.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect(),
    }
}

/// The constructed classifier `W = W0·φ` (`K × L`).
pub fn constructed_classifier(classifier: &Matrix, layer: &HashLayer) -> Result<Matrix> {
    matmul(classifier, &layer.phi)
}

/// `softmax(W0·φ·h / τ)`.
pub fn student_logits(
    h: &[f64],
    layer: &HashLayer,
    classifier: &Matrix,
    tau: f64,
) -> Result<Vec<f64>> {
    let w = constructed_classifier(classifier, layer)?;
    crate::numkit::softmax(&w.mul_vec(h)?, tau)
}

/// Argument order of the distillation divergence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(z_teacher ‖ z_student)`
    #[default]
    TeacherStudent,
    /// `KL(z_student ‖ z_teacher)`
    StudentTeacher,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

#[derive(Debug, Clone)]
pub struct KlOutput {
    pub loss: f64,
    /// `∂L_kl/∂h_i` per sample.
    pub grad_h: Vec<Vec<f64>>,
    /// `∂L_kl/∂φ` through the constructed classifier only; the path through
    /// `h = v·φ` is carried by `grad_h`.
    pub grad_phi: Matrix,
}

/// Mean KL divergence over the batch between teacher soft labels and the
/// constructed-classifier distribution, with analytic gradients.
pub fn kl_loss_and_grads(
    hs: &[Vec<f64>],
    layer: &HashLayer,
    classifier: &Matrix,
    teacher: &[&[f64]],
    tau: f64,
    direction: KlDirection,
) -> Result<KlOutput> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(
            "tau",
            format!("must be positive, got {tau}"),
        ));
    }
    if hs.is_empty() || hs.len() != teacher.len() {
        return Err(Error::shape("kl_loss", &[hs.len()], &[teacher.len()]));
    }
    let w = constructed_classifier(classifier, layer)?;
    let (k, bits) = (w.rows(), w.cols());
    let scale = 1.0 / hs.len() as f64;
    let mut loss = 0.0;
    let mut grad_h = Vec::with_capacity(hs.len());
    // ∂L/∂W accumulated over the batch, K × L.
    let mut grad_w = Matrix::zeros(k, bits);

    for (row, (h, zt)) in hs.iter().zip(teacher).enumerate() {
        if h.len() != bits || zt.len() != k {
            return Err(Error::shape(
                "kl_loss sample",
                &[h.len(), zt.len()],
                &[bits, k],
            ));
        }
        let sum: f64 = zt.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOL || zt.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidDistribution { row, sum });
        }
        let logits: Vec<f64> = w.mul_vec(h)?.into_iter().map(|x| x / tau).collect();
        let log_z = log_softmax(&logits);
        let z: Vec<f64> = log_z.iter().map(|x| x.exp()).collect();

        // ∂KL/∂logits.
        let dlogits: Vec<f64> = match direction {
            KlDirection::TeacherStudent => {
                for (&p, &lq) in zt.iter().zip(&log_z) {
                    if p > 0.0 {
                        loss += scale * p * (p.ln() - lq);
                    }
                }
                z.iter().zip(*zt).map(|(q, p)| q - p).collect()
            }
            KlDirection::StudentTeacher => {
                let mut g = Vec::with_capacity(k);
                let mut kl = 0.0;
                for (&q, (&lq, &p)) in z.iter().zip(log_z.iter().zip(*zt)) {
                    if q > 0.0 && p <= 0.0 {
                        return Err(Error::NonFinite(
                            "KL(student ‖ teacher) with zero teacher mass".into(),
                        ));
                    }
                    let r = if q > 0.0 { lq - p.ln() } else { 0.0 };
                    kl += q * r;
                    g.push(r);
                }
                loss += scale * kl;
                g.iter().zip(&z).map(|(r, q)| q * (r - kl)).collect()
            }
        };

        let ds: Vec<f64> = dlogits.iter().map(|g| scale * g / tau).collect();
        let mut dh = vec![0.0; bits];
        for c in 0..k {
            let wr = w.row(c);
            let gw = grad_w.row_mut(c);
            for j in 0..bits {
                dh[j] += ds[c] * wr[j];
                gw[j] += ds[c] * h[j];
            }
        }
        grad_h.push(dh);
    }
    let grad_phi = matmul(&classifier.transpose(), &grad_w)?;
    Ok(KlOutput {
        loss,
        grad_h,
        grad_phi,
    })
}

/// Pairwise cosine-preservation loss over the `M = N(N−1)/2` unordered pairs.
///
/// The forward pass uses the binary codes. The gradient is taken with
/// respect to the codes treated as continuous vectors at their `±1` values,
/// which under the straight-through estimator is the gradient with respect
/// to `h`.
pub fn sim_loss_and_grads(
    codes: &[CodeVector],
    teacher: &[&[f64]],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::NoPairs(n));
    }
    if teacher.len() != n {
        return Err(Error::shape("sim_loss", &[n], &[teacher.len()]));
    }
    let bits = codes[0].len();
    if codes.iter().any(|c| c.len() != bits) {
        return Err(Error::invalid("codes", "codes have different lengths"));
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let inv_bits = 1.0 / bits as f64;
    let signs: Vec<Vec<f64>> = codes.iter().map(CodeVector::to_f64).collect();
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; bits]; n];
    for i in 0..n {
        for j in i + 1..n {
            let target = cosine(teacher[i], teacher[j])?;
            let code_cos = codes[i].cosine(&codes[j]);
            let gap = target - code_cos;
            loss += gap * gap / pairs;
            // ∂/∂cos_b of the pair term.
            let g = -2.0 * gap / pairs;
            let (bi, bj) = (&signs[i], &signs[j]);
            for k in 0..bits {
                grads[i][k] += g * (bj[k] - code_cos * bi[k]) * inv_bits;
                grads[j][k] += g * (bi[k] - code_cos * bj[k]) * inv_bits;
            }
        }
    }
    Ok((loss, grads))
}

/// `(1/N) Σ ‖h_i − sign(h_i)‖²` and `(2/N)(h_i − sign(h_i))`.
pub fn quan_loss_and_grad(hs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if hs.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    let scale = 1.0 / hs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(hs.len());
    for h in hs {
        let diff: Vec<f64> = h.iter().map(|&x| x - sign(x)).collect();
        loss += scale * dot(&diff, &diff);
        grads.push(diff.into_iter().map(|x| 2.0 * scale * x).collect());
    }
    Ok((loss, grads))
}

/// Per-batch loss values. `total = l_kl + l_sim + l_quan + gamma * l_rec`;
/// disabled terms are reported as zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_kl: f64,
    pub l_sim: f64,
    pub l_quan: f64,
    pub l_rec: f64,
    pub total: f64,
    pub gamma: f64,
    pub tau: f64,
    pub pair_count: usize,
}

/// The subset of training options the objective depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub use_kl: bool,
    pub use_rec: bool,
    pub kl_direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: crate::teacher::DEFAULT_TAU,
            gamma: DEFAULT_GAMMA,
            use_kl: true,
            use_rec: true,
            kl_direction: KlDirection::TeacherStudent,
        }
    }
}

/// One minibatch: token grids, their masks and the cached teacher rows.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub tokens: Vec<TokenSample<'a>>,
    pub masks: Vec<MaskPattern>,
    pub teacher_features: Vec<&'a [f64]>,
    pub soft_labels: Vec<&'a [f64]>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Gradients for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: StudentEncoder,
    pub phi: Matrix,
}

impl Gradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.encoder.tensors().to_vec();
        t.push(self.phi.as_slice());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self.encoder.tensors_mut().into_iter().collect();
        t.push(self.phi.as_mut_slice());
        t
    }
}

/// The joint objective and the gradients of all parameters.
///
/// `θ` receives gradient from every term through `v`; `φ` receives it from
/// the KL term (through both `W0·φ` and `h = v·φ`), the similarity term and
/// the quantization term.
pub fn total_loss(
    batch: &Batch<'_>,
    encoder: &StudentEncoder,
    layer: &HashLayer,
    classifier: &Matrix,
    cfg: &LossConfig,
) -> Result<(LossReport, Gradients)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::NoPairs(n));
    }
    if batch.masks.len() != n || batch.teacher_features.len() != n || batch.soft_labels.len() != n {
        return Err(Error::shape(
            "total_loss batch",
            &[n],
            &[
                batch.masks.len(),
                batch.teacher_features.len(),
                batch.soft_labels.len(),
            ],
        ));
    }
    if encoder.out_dim() != layer.input_dim() {
        return Err(Error::shape(
            "encoder vs hash layer",
            &[encoder.out_dim()],
            &layer.phi.shape(),
        ));
    }
    let bits = layer.bits();
    let d = layer.input_dim();

    let mut vs = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut hs = Vec::with_capacity(n);
    for (tokens, mask) in batch.tokens.iter().zip(&batch.masks) {
        let (v, cache) = encoder.forward(*tokens, mask)?;
        hs.push(hash_project(&v, layer)?);
        vs.push(v);
        caches.push(cache);
    }
    let codes: Vec<CodeVector> = hs.iter().map(|h| binarize(h)).collect();

    let mut dv = vec![vec![0.0; d]; n];
    let mut dh = vec![vec![0.0; bits]; n];
    let mut grad_phi = Matrix::zeros(d, bits);
    let scale = 1.0 / n as f64;

    let mut l_rec = 0.0;
    if cfg.use_rec {
        for i in 0..n {
            let target = batch.teacher_features[i];
            if target.len() != d {
                return Err(Error::shape("teacher feature", &[target.len()], &[d]));
            }
            l_rec += scale * squared_distance(&vs[i], target);
            for (g, (a, b)) in dv[i].iter_mut().zip(vs[i].iter().zip(target)) {
                *g += cfg.gamma * 2.0 * scale * (a - b);
            }
        }
    }

    let mut l_kl = 0.0;
    if cfg.use_kl {
        let kl = kl_loss_and_grads(
            &hs,
            layer,
            classifier,
            &batch.soft_labels,
            cfg.tau,
            cfg.kl_direction,
        )?;
        l_kl = kl.loss;
        for (acc, g) in dh.iter_mut().zip(&kl.grad_h) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        for (a, b) in grad_phi
            .as_mut_slice()
            .iter_mut()
            .zip(kl.grad_phi.as_slice())
        {
            *a += b;
        }
    }

    let (l_sim, sim_grads) = sim_loss_and_grads(&codes, &batch.teacher_features)?;
    let (l_quan, quan_grads) = quan_loss_and_grad(&hs)?;
    for i in 0..n {
        for j in 0..bits {
            dh[i][j] += sim_grads[i][j] + quan_grads[i][j];
        }
    }

    // Chain through h = v·φ.
    let phi = layer.phi();
    for i in 0..n {
        for r in 0..d {
            let v_r = vs[i][r];
            let phi_row = phi.row(r);
            let g_row = grad_phi.row_mut(r);
            let mut acc = 0.0;
            for j in 0..bits {
                g_row[j] += v_r * dh[i][j];
                acc += phi_row[j] * dh[i][j];
            }
            dv[i][r] += acc;
        }
    }

    let mut grad_encoder = encoder.zeros_like();
    for i in 0..n {
        encoder.backward(
            batch.tokens[i],
            &batch.masks[i],
            &caches[i],
            &dv[i],
            &mut grad_encoder,
        );
    }

    let report = LossReport {
        l_kl,
        l_sim,
        l_quan,
        l_rec,
        total: l_kl + l_sim + l_quan + cfg.gamma * l_rec,
        gamma: cfg.gamma,
        tau: cfg.tau,
        pair_count: n * (n - 1) / 2,
    };
    Ok((
        report,
        Gradients {
            encoder: grad_encoder,
            phi: grad_phi,
        },
    ))
}
