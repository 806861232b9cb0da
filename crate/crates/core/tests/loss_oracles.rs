//! Each analytic loss gradient against central finite differences of an
//! independently written loss.

#![allow(clippy::needless_range_loop)]

use iphash_core::dataio::TokenSample;
use iphash_core::hashcore::{
    binarize, kl_loss_and_grads, quan_loss_and_grad, sim_loss_and_grads, HashLayer, KlDirection,
};
use iphash_core::numkit::{Matrix, Rng};
use iphash_core::student::{random_mask, rec_loss_and_grad, StudentEncoder};

const STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn softmax_rows(m: &Matrix, feats: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    feats
        .iter()
        .map(|v| {
            let l: Vec<f64> = m.mul_vec(v).unwrap().iter().map(|x| x / tau).collect();
            let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

fn naive_kl(
    hs: &[Vec<f64>],
    phi: &Matrix,
    w0: &Matrix,
    zt: &[Vec<f64>],
    tau: f64,
    dir: KlDirection,
) -> f64 {
    let w = w0.matmul(phi).unwrap();
    let zs = softmax_rows(&w, hs, tau);
    let mut total = 0.0;
    for (p, q) in zt.iter().zip(&zs) {
        total += match dir {
            KlDirection::TeacherStudent => {
                p.iter().zip(q).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
            }
            KlDirection::StudentTeacher => {
                p.iter().zip(q).map(|(p, q)| q * (q / p).ln()).sum::<f64>()
            }
        };
    }
    total / hs.len() as f64
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    for trial in 0..10 {
        let (n, d, bits, k) = (3, 5, 4, 6);
        let tau = 0.7 + trial as f64 * 0.4;
        let dir = if trial % 2 == 0 {
            KlDirection::TeacherStudent
        } else {
            KlDirection::StudentTeacher
        };
        let w0 = Matrix::random_normal(k, d, 1.0, &mut rng);
        let mut phi = Matrix::random_normal(d, bits, 0.5, &mut rng);
        let mut hs: Vec<Vec<f64>> = (0..n).map(|_| normals(bits, &mut rng)).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| normals(d, &mut rng)).collect();
        let zt = softmax_rows(&w0, &feats, tau);
        let zt_ref: Vec<&[f64]> = zt.iter().map(Vec::as_slice).collect();

        let out = kl_loss_and_grads(
            &hs,
            &HashLayer::new(phi.clone()).unwrap(),
            &w0,
            &zt_ref,
            tau,
            dir,
        )
        .unwrap();
        assert!((out.loss - naive_kl(&hs, &phi, &w0, &zt, tau, dir)).abs() < 1e-12);

        for i in 0..n {
            for j in 0..bits {
                let base = hs[i][j];
                let num = central(|e| {
                    hs[i][j] = base + e;
                    let f = naive_kl(&hs, &phi, &w0, &zt, tau, dir);
                    hs[i][j] = base;
                    f
                });
                assert!(rel_err(out.grad_h[i][j], num) < 1e-6, "h[{i}][{j}]");
            }
        }
        for idx in 0..d * bits {
            let base = phi.as_slice()[idx];
            let num = central(|e| {
                phi.as_mut_slice()[idx] = base + e;
                let f = naive_kl(&hs, &phi, &w0, &zt, tau, dir);
                phi.as_mut_slice()[idx] = base;
                f
            });
            assert!(
                rel_err(out.grad_phi.as_slice()[idx], num) < 1e-6,
                "phi[{idx}]"
            );
        }
    }
}

fn naive_sim(b: &[Vec<f64>], feats: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], c: &[f64]| {
        let ab: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        ab / (na * nc)
    };
    let n = b.len();
    let m = (n * (n - 1) / 2) as f64;
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let g = cos(&feats[i], &feats[j]) - cos(&b[i], &b[j]);
            s += g * g / m;
        }
    }
    s
}

#[test]
fn sim_gradient_is_the_cosine_derivative_at_the_codes() {
    let mut rng = Rng::new(22);
    for n in 2..6 {
        let bits = 7;
        let hs: Vec<Vec<f64>> = (0..n).map(|_| normals(bits, &mut rng)).collect();
        let codes: Vec<_> = hs.iter().map(|h| binarize(h)).collect();
        let feats: Vec<Vec<f64>> = (0..n).map(|_| normals(4, &mut rng)).collect();
        let f_ref: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let (loss, grads) = sim_loss_and_grads(&codes, &f_ref).unwrap();

        let mut b: Vec<Vec<f64>> = codes.iter().map(|c| c.to_f64()).collect();
        assert!((loss - naive_sim(&b, &feats)).abs() < 1e-12);
        for i in 0..n {
            for j in 0..bits {
                let base = b[i][j];
                let num = central(|e| {
                    b[i][j] = base + e;
                    let f = naive_sim(&b, &feats);
                    b[i][j] = base;
                    f
                });
                assert!(rel_err(grads[i][j], num) < 1e-6, "b[{i}][{j}]");
            }
        }
    }
}

#[test]
fn quan_gradient_matches_finite_differences() {
    let mut rng = Rng::new(23);
    let mut hs: Vec<Vec<f64>> = (0..4).map(|_| normals(6, &mut rng)).collect();
    for h in &mut hs {
        for x in h.iter_mut() {
            if x.abs() < 1e-3 {
                *x = 0.5;
            }
        }
    }
    let (_, grads) = quan_loss_and_grad(&hs).unwrap();
    let f = |hs: &[Vec<f64>]| {
        hs.iter()
            .flat_map(|h| {
                h.iter()
                    .map(|&x| (x - if x >= 0.0 { 1.0 } else { -1.0 }).powi(2))
            })
            .sum::<f64>()
            / hs.len() as f64
    };
    for i in 0..4 {
        for j in 0..6 {
            let base = hs[i][j];
            let num = central(|e| {
                hs[i][j] = base + e;
                let v = f(&hs);
                hs[i][j] = base;
                v
            });
            assert!(rel_err(grads[i][j], num) < 1e-6);
        }
    }
}

#[test]
fn rec_gradient_matches_finite_differences() {
    let mut rng = Rng::new(24);
    let (n, p, d_in, d_h, d) = (3, 5, 4, 6, 3);
    let mut trials = 0;
    while trials < 5 {
        let enc = StudentEncoder::random(d_in, d_h, d, &mut rng);
        let grids: Vec<Vec<f64>> = (0..n).map(|_| normals(p * d_in, &mut rng)).collect();
        let masks: Vec<_> = (0..n)
            .map(|_| random_mask(p, 0.4, &mut rng).unwrap())
            .collect();
        let targets: Vec<Vec<f64>> = (0..n).map(|_| normals(d, &mut rng)).collect();
        let samples: Vec<TokenSample> = grids
            .iter()
            .map(|g| TokenSample::new(g, d_in).unwrap())
            .collect();
        let t_ref: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();

        // Skip draws with a pre-activation near the ReLU kink.
        let near_kink = samples.iter().zip(&masks).any(|(s, m)| {
            m.kept().iter().any(|&q| {
                let a = enc.w_tok.left_mul(s.token(q)).unwrap();
                a.iter().zip(&enc.b_tok).any(|(x, b)| (x + b).abs() < 1e-3)
            })
        });
        if near_kink {
            continue;
        }
        trials += 1;

        let (_, grads) = rec_loss_and_grad(&samples, &masks, &enc, &t_ref).unwrap();
        let loss = |e: &StudentEncoder| {
            samples
                .iter()
                .zip(&masks)
                .zip(&targets)
                .map(|((s, m), t)| {
                    let v = e.encode(*s, m).unwrap();
                    v.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                / n as f64
        };
        let mut probe = enc.clone();
        for slot in 0..4 {
            for idx in 0..grads.tensors()[slot].len() {
                let base = enc.tensors()[slot][idx];
                let num = central(|e| {
                    probe.tensors_mut()[slot][idx] = base + e;
                    let f = loss(&probe);
                    probe.tensors_mut()[slot][idx] = base;
                    f
                });
                assert!(
                    rel_err(grads.tensors()[slot][idx], num) < 1e-6,
                    "slot {slot} idx {idx}"
                );
            }
        }
    }
}
