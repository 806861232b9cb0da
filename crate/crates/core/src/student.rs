//! Feature-preserving stage: random token masking, the student encoder and
//! the reconstruction loss against teacher features.
//!
//! The encoder is a per-token affine map followed by ReLU, a mean over the
//! kept tokens and a final affine map:
//!
//! ```text
//! v = b_out + W_outᵀ · mean_{p ∈ kept} ReLU(W_tokᵀ t_p + b_tok)
//! ```
//!
//! Masked tokens are dropped from the mean rather than zero-filled.

use crate::dataio::TokenSample;
use crate::error::{Error, Result};
use crate::numkit::{solve_spd, squared_distance, Matrix, Rng};

/// Sorted indices of the tokens that survive masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    kept: Vec<usize>,
    total: usize,
    ratio: f64,
}

/// `P - floor(m P)`, never below one.
pub fn kept_count(total: usize, ratio: f64) -> usize {
    let masked = (ratio * total as f64).floor() as usize;
    total.saturating_sub(masked).max(1)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(
            "mask_ratio",
            format!("must lie in [0, 1), got {ratio}"),
        ));
    }
    Ok(())
}

impl MaskPattern {
    /// Keeps every token; this is the encoding path used at test time.
    pub fn full(total: usize) -> Self {
        MaskPattern {
            kept: (0..total).collect(),
            total,
            ratio: 0.0,
        }
    }

    pub fn from_kept(kept: Vec<usize>, total: usize) -> Result<Self> {
        if kept.is_empty() || kept.windows(2).any(|w| w[0] >= w[1]) || kept[kept.len() - 1] >= total
        {
            return Err(Error::invalid(
                "kept",
                format!("need strictly increasing indices below {total}, got {kept:?}"),
            ));
        }
        let ratio = 1.0 - kept.len() as f64 / total as f64;
        Ok(MaskPattern { kept, total, ratio })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// Uniformly samples which `P - floor(m P)` tokens are kept.
pub fn random_mask(total: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPattern> {
    check_ratio(ratio)?;
    if total == 0 {
        return Err(Error::invalid("tokens", "need at least one token"));
    }
    let kept = rng.sample_indices(total, kept_count(total, ratio));
    Ok(MaskPattern { kept, total, ratio })
}

/// Encoder parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEncoder {
    /// `d_in × d_h`
    pub w_tok: Matrix,
    pub b_tok: Vec<f64>,
    /// `d_h × d`
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl StudentEncoder {
    pub fn new(w_tok: Matrix, b_tok: Vec<f64>, w_out: Matrix, b_out: Vec<f64>) -> Result<Self> {
        if b_tok.len() != w_tok.cols()
            || w_out.rows() != w_tok.cols()
            || b_out.len() != w_out.cols()
        {
            return Err(Error::shape(
                "StudentEncoder::new",
                &[w_tok.rows(), w_tok.cols(), b_tok.len()],
                &[w_out.rows(), w_out.cols(), b_out.len()],
            ));
        }
        let enc = StudentEncoder {
            w_tok,
            b_tok,
            w_out,
            b_out,
        };
        if !enc.is_finite() {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(enc)
    }

    pub fn zeros(token_dim: usize, hidden: usize, out_dim: usize) -> Self {
        StudentEncoder {
            w_tok: Matrix::zeros(token_dim, hidden),
            b_tok: vec![0.0; hidden],
            w_out: Matrix::zeros(hidden, out_dim),
            b_out: vec![0.0; out_dim],
        }
    }

    /// He-scaled token weights, Glorot-scaled readout, zero biases.
    pub fn random(token_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng) -> Self {
        StudentEncoder {
            w_tok: Matrix::random_normal(token_dim, hidden, (2.0 / token_dim as f64).sqrt(), rng),
            b_tok: vec![0.0; hidden],
            w_out: Matrix::random_normal(hidden, out_dim, (1.0 / hidden as f64).sqrt(), rng),
            b_out: vec![0.0; out_dim],
        }
    }

    pub fn token_dim(&self) -> usize {
        self.w_tok.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_tok.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.cols()
    }

    pub fn zeros_like(&self) -> Self {
        StudentEncoder::zeros(self.token_dim(), self.hidden_dim(), self.out_dim())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w_tok.as_slice(),
            &self.b_tok,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_tok.as_mut_slice(),
            &mut self.b_tok,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Pooled hidden activation over the kept tokens.
    fn pool(
        &self,
        tokens: TokenSample<'_>,
        mask: &MaskPattern,
        mut pre_out: Option<&mut Vec<f64>>,
    ) -> Vec<f64> {
        let h = self.hidden_dim();
        let mut pooled = vec![0.0; h];
        for &p in mask.kept() {
            let mut pre = self.w_tok.left_mul(tokens.token(p)).expect("checked dims");
            for (a, b) in pre.iter_mut().zip(&self.b_tok) {
                *a += b;
            }
            for (acc, &a) in pooled.iter_mut().zip(&pre) {
                *acc += a.max(0.0);
            }
            if let Some(store) = pre_out.as_deref_mut() {
                store.extend_from_slice(&pre);
            }
        }
        let n = mask.kept().len() as f64;
        for x in &mut pooled {
            *x /= n;
        }
        pooled
    }

    fn check_input(&self, tokens: TokenSample<'_>, mask: &MaskPattern) -> Result<()> {
        if tokens.dim() != self.token_dim() {
            return Err(Error::shape(
                "encode",
                &[tokens.num_tokens(), tokens.dim()],
                &self.w_tok.shape(),
            ));
        }
        if mask.total() != tokens.num_tokens() || mask.kept().is_empty() {
            return Err(Error::shape(
                "encode mask",
                &[mask.total()],
                &[tokens.num_tokens()],
            ));
        }
        Ok(())
    }

    pub fn encode(&self, tokens: TokenSample<'_>, mask: &MaskPattern) -> Result<Vec<f64>> {
        self.check_input(tokens, mask)?;
        let pooled = self.pool(tokens, mask, None);
        let mut v = self.w_out.left_mul(&pooled)?;
        for (x, b) in v.iter_mut().zip(&self.b_out) {
            *x += b;
        }
        Ok(v)
    }

    pub(crate) fn forward(
        &self,
        tokens: TokenSample<'_>,
        mask: &MaskPattern,
    ) -> Result<(Vec<f64>, EncodeCache)> {
        self.check_input(tokens, mask)?;
        let mut pre = Vec::with_capacity(mask.kept().len() * self.hidden_dim());
        let pooled = self.pool(tokens, mask, Some(&mut pre));
        let mut v = self.w_out.left_mul(&pooled)?;
        for (x, b) in v.iter_mut().zip(&self.b_out) {
            *x += b;
        }
        Ok((v, EncodeCache { pooled, pre }))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂v` for one sample.
    pub(crate) fn backward(
        &self,
        tokens: TokenSample<'_>,
        mask: &MaskPattern,
        cache: &EncodeCache,
        dv: &[f64],
        grads: &mut StudentEncoder,
    ) {
        let h = self.hidden_dim();
        let d = self.out_dim();
        for (g, &x) in grads.b_out.iter_mut().zip(dv) {
            *g += x;
        }
        let mut dpooled = vec![0.0; h];
        for j in 0..h {
            let u = cache.pooled[j];
            let w_row = self.w_out.row(j);
            let g_row = grads.w_out.row_mut(j);
            let mut acc = 0.0;
            for k in 0..d {
                g_row[k] += u * dv[k];
                acc += w_row[k] * dv[k];
            }
            dpooled[j] = acc;
        }
        let inv_n = 1.0 / mask.kept().len() as f64;
        for (slot, &p) in mask.kept().iter().enumerate() {
            let pre = &cache.pre[slot * h..(slot + 1) * h];
            let da: Vec<f64> = pre
                .iter()
                .zip(&dpooled)
                .map(|(&a, &g)| if a > 0.0 { g * inv_n } else { 0.0 })
                .collect();
            for (g, &x) in grads.b_tok.iter_mut().zip(&da) {
                *g += x;
            }
            for (i, &t) in tokens.token(p).iter().enumerate() {
                for (g, &x) in grads.w_tok.row_mut(i).iter_mut().zip(&da) {
                    *g += t * x;
                }
            }
        }
    }

    /// Refits the readout (`W_out`, `b_out`) by ridge regression so that
    /// complete-input encodings reproduce `targets`. Gives the student a
    /// starting point that already agrees with the teacher, the analogue of
    /// initialising from pre-trained weights.
    pub fn fit_readout(
        &mut self,
        samples: &[TokenSample<'_>],
        targets: &[&[f64]],
        ridge: f64,
    ) -> Result<()> {
        if samples.len() != targets.len() || samples.is_empty() {
            return Err(Error::shape(
                "fit_readout",
                &[samples.len()],
                &[targets.len()],
            ));
        }
        let h = self.hidden_dim();
        let d = self.out_dim();
        // Design matrix columns: pooled activations, then a constant 1.
        let mut gram = Matrix::zeros(h + 1, h + 1);
        let mut rhs = Matrix::zeros(h + 1, d);
        for (s, t) in samples.iter().zip(targets) {
            if t.len() != d {
                return Err(Error::shape("fit_readout target", &[t.len()], &[d]));
            }
            let mask = MaskPattern::full(s.num_tokens());
            self.check_input(*s, &mask)?;
            let mut x = self.pool(*s, &mask, None);
            x.push(1.0);
            for i in 0..=h {
                for j in 0..=h {
                    gram.set(i, j, gram.get(i, j) + x[i] * x[j]);
                }
                for k in 0..d {
                    rhs.set(i, k, rhs.get(i, k) + x[i] * t[k]);
                }
            }
        }
        for i in 0..h {
            gram.set(i, i, gram.get(i, i) + ridge);
        }
        // Tiny jitter keeps the bias row solvable even for a zero design.
        gram.set(h, h, gram.get(h, h) + 1e-12);
        let solution = solve_spd(&gram, &rhs)?;
        for j in 0..h {
            self.w_out.row_mut(j).copy_from_slice(solution.row(j));
        }
        self.b_out.copy_from_slice(solution.row(h));
        Ok(())
    }
}

/// Intermediate values of one forward pass needed for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct EncodeCache {
    pooled: Vec<f64>,
    /// Pre-activations of kept tokens, `|kept| × d_h`, in kept order.
    pre: Vec<f64>,
}

/// `(1/N_b) Σ ‖f(x̃_i; θ) − v_i‖²` and its gradient with respect to θ.
pub fn rec_loss_and_grad(
    batch: &[TokenSample<'_>],
    masks: &[MaskPattern],
    enc: &StudentEncoder,
    targets: &[&[f64]],
) -> Result<(f64, StudentEncoder)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    if masks.len() != batch.len() || targets.len() != batch.len() {
        return Err(Error::shape(
            "rec_loss",
            &[batch.len()],
            &[masks.len(), targets.len()],
        ));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = enc.zeros_like();
    for ((tokens, mask), target) in batch.iter().zip(masks).zip(targets) {
        let (v, cache) = enc.forward(*tokens, mask)?;
        if target.len() != v.len() {
            return Err(Error::shape("rec_loss target", &[target.len()], &[v.len()]));
        }
        loss += scale * squared_distance(&v, target);
        let dv: Vec<f64> = v
            .iter()
            .zip(*target)
            .map(|(a, b)| 2.0 * scale * (a - b))
            .collect();
        enc.backward(*tokens, mask, &cache, &dv, &mut grads);
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_cardinality_examples() {
        let mut rng = Rng::new(1);
        assert_eq!(random_mask(196, 0.25, &mut rng).unwrap().kept().len(), 147);
        assert_eq!(
            random_mask(10, 0.0, &mut rng).unwrap().kept(),
            &(0..10).collect::<Vec<_>>()[..]
        );
        assert_eq!(random_mask(10, 0.99, &mut rng).unwrap().kept().len(), 1);
        assert_eq!(kept_count(8, 0.9), 1);
        assert_eq!(kept_count(8, 0.5), 4);
        assert_eq!(kept_count(3, 1.0 - f64::EPSILON), 1);
    }

    #[test]
    fn mask_rejects_bad_ratio() {
        let mut rng = Rng::new(1);
        assert!(random_mask(4, 1.0, &mut rng).is_err());
        assert!(random_mask(4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_is_deterministic_given_state() {
        let a = random_mask(50, 0.4, &mut Rng::new(77)).unwrap();
        let b = random_mask(50, 0.4, &mut Rng::new(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let enc = StudentEncoder::zeros(3, 4, 2);
        let data = [1.0, -2.0, 0.5, 3.0, 1.0, 1.0];
        let s = TokenSample::new(&data, 3).unwrap();
        assert_eq!(
            enc.encode(s, &MaskPattern::full(2)).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn single_nonnegative_token_passes_through() {
        let enc = StudentEncoder::new(
            Matrix::identity(3),
            vec![0.0; 3],
            Matrix::identity(3),
            vec![0.0; 3],
        )
        .unwrap();
        let data = [9.0, 9.0, 9.0, 1.0, 0.0, 2.5];
        let s = TokenSample::new(&data, 3).unwrap();
        let mask = MaskPattern::from_kept(vec![1], 2).unwrap();
        assert_eq!(enc.encode(s, &mask).unwrap(), vec![1.0, 0.0, 2.5]);
    }

    #[test]
    fn rec_loss_simple_value() {
        // One token, identity weights: v = (1, 0); target (0, 0).
        let enc = StudentEncoder::new(
            Matrix::identity(2),
            vec![0.0; 2],
            Matrix::identity(2),
            vec![0.0; 2],
        )
        .unwrap();
        let data = [1.0, 0.0];
        let s = TokenSample::new(&data, 2).unwrap();
        let (loss, _) =
            rec_loss_and_grad(&[s], &[MaskPattern::full(1)], &enc, &[&[0.0, 0.0]]).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn exact_reconstruction_has_zero_loss_and_grad() {
        let mut rng = Rng::new(3);
        let enc = StudentEncoder::random(4, 5, 3, &mut rng);
        let data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let s = TokenSample::new(&data, 4).unwrap();
        let mask = MaskPattern::full(3);
        let v = enc.encode(s, &mask).unwrap();
        let (loss, grads) = rec_loss_and_grad(&[s], &[mask], &enc, &[&v]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn empty_batch_rejected() {
        let enc = StudentEncoder::zeros(2, 2, 2);
        assert!(rec_loss_and_grad(&[], &[], &enc, &[]).is_err());
    }

    #[test]
    fn fit_readout_reproduces_linear_targets() {
        let mut rng = Rng::new(5);
        let mut enc = StudentEncoder::random(3, 12, 2, &mut rng);
        let grids: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.normal()).collect())
            .collect();
        let samples: Vec<TokenSample<'_>> = grids
            .iter()
            .map(|g| TokenSample::new(g, 3).unwrap())
            .collect();
        // Targets generated by a known readout are recovered.
        let truth = StudentEncoder::random(3, 12, 2, &mut rng);
        let truth = StudentEncoder {
            w_tok: enc.w_tok.clone(),
            b_tok: enc.b_tok.clone(),
            ..truth
        };
        let targets: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| truth.encode(*s, &MaskPattern::full(2)).unwrap())
            .collect();
        let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        enc.fit_readout(&samples, &refs, 1e-10).unwrap();
        for (s, t) in samples.iter().zip(&targets) {
            let v = enc.encode(*s, &MaskPattern::full(2)).unwrap();
            assert!(squared_distance(&v, t) < 1e-10);
        }
    }
}
