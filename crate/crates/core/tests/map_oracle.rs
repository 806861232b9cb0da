//! Packed-search MAP against a brute-force evaluation.

#![allow(clippy::needless_range_loop)]

use iphash_core::evalkit::{evaluate, ApDenominator, EvalOptions};
use iphash_core::numkit::{Matrix, Rng};

fn random_codes(n: usize, bits: usize, rng: &mut Rng) -> Matrix {
    Matrix::new(
        n,
        bits,
        (0..n * bits)
            .map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 })
            .collect(),
    )
    .unwrap()
}

fn random_labels(n: usize, classes: usize, multi: bool, rng: &mut Rng) -> Matrix {
    let mut m = Matrix::zeros(n, classes);
    for i in 0..n {
        m.set(i, rng.below(classes), 1.0);
        if multi && rng.below(3) == 0 {
            m.set(i, rng.below(classes), 1.0);
        }
    }
    m
}

/// Naive distances, stable sort by (distance, index), direct AP sum.
fn brute_force_map(
    q: &Matrix,
    db: &Matrix,
    ql: &Matrix,
    dl: &Matrix,
    k: usize,
    denom: ApDenominator,
) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let mut order: Vec<(usize, usize)> = (0..db.rows())
            .map(|j| {
                (
                    q.row(i)
                        .iter()
                        .zip(db.row(j))
                        .filter(|(a, b)| a != b)
                        .count(),
                    j,
                )
            })
            .collect();
        order.sort();
        let rel: Vec<bool> = order
            .iter()
            .map(|&(_, j)| {
                ql.row(i)
                    .iter()
                    .zip(dl.row(j))
                    .any(|(a, b)| *a > 0.0 && *b > 0.0)
            })
            .collect();
        let top = k.min(rel.len());
        let mut hits = 0.0;
        let mut sum = 0.0;
        for r in 0..top {
            if rel[r] {
                hits += 1.0;
                sum += hits / (r + 1) as f64;
            }
        }
        let n_plus = match denom {
            ApDenominator::TopK => hits,
            ApDenominator::All => rel.iter().filter(|&&x| x).count() as f64,
        };
        total += if n_plus == 0.0 { 0.0 } else { sum / n_plus };
    }
    total / q.rows() as f64
}

#[test]
fn packed_map_equals_brute_force() {
    let mut rng = Rng::new(31);
    for case in 0..40 {
        let bits = [3, 8, 16, 64, 70][case % 5];
        let (nq, ndb) = (20, 200);
        let q = random_codes(nq, bits, &mut rng);
        let db = random_codes(ndb, bits, &mut rng);
        let multi = case % 2 == 1;
        let ql = random_labels(nq, 5, multi, &mut rng);
        let dl = random_labels(ndb, 5, multi, &mut rng);
        for k in [1, 17, 100, 500] {
            for denom in [ApDenominator::TopK, ApDenominator::All] {
                let opts = EvalOptions {
                    k,
                    ap_denominator: denom,
                    ..Default::default()
                };
                let got = evaluate(&q, &db, &ql, &dl, &opts).unwrap().map_at_k;
                let want = brute_force_map(&q, &db, &ql, &dl, k, denom);
                assert!(
                    (got - want).abs() < 1e-12,
                    "case {case} k {k}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn map_is_invariant_to_database_order_without_ties() {
    let mut rng = Rng::new(32);
    // Database codes at distinct distances from the single query.
    let bits = 40;
    let ndb = 30;
    let q = Matrix::from_rows(&[vec![1.0; bits]]).unwrap();
    let mut db = Matrix::from_rows(&vec![vec![1.0; bits]; ndb]).unwrap();
    for j in 0..ndb {
        for b in 0..j {
            db.set(j, b, -1.0);
        }
    }
    let ql = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let dl = random_labels(ndb, 2, false, &mut rng);
    let opts = EvalOptions {
        k: 10,
        ..Default::default()
    };
    let base = evaluate(&q, &db, &ql, &dl, &opts).unwrap().map_at_k;

    let mut perm: Vec<usize> = (0..ndb).collect();
    for _ in 0..5 {
        rng.shuffle(&mut perm);
        let pdb = Matrix::from_rows(&perm.iter().map(|&j| db.row(j).to_vec()).collect::<Vec<_>>())
            .unwrap();
        let pdl = Matrix::from_rows(&perm.iter().map(|&j| dl.row(j).to_vec()).collect::<Vec<_>>())
            .unwrap();
        assert_eq!(evaluate(&q, &pdb, &ql, &pdl, &opts).unwrap().map_at_k, base);
    }
}

#[test]
fn report_bounds_and_curve() {
    let mut rng = Rng::new(33);
    let q = random_codes(10, 16, &mut rng);
    let db = random_codes(50, 16, &mut rng);
    let ql = random_labels(10, 3, false, &mut rng);
    let dl = random_labels(50, 3, false, &mut rng);
    let r = evaluate(
        &q,
        &db,
        &ql,
        &dl,
        &EvalOptions {
            k: 20,
            ..Default::default()
        },
    )
    .unwrap();
    assert!((0.0..=1.0).contains(&r.map_at_k));
    assert_eq!(r.per_query_ap.len(), 10);
    assert_eq!(r.pr_curve.len(), 50);
    assert!(r.pr_curve.windows(2).all(|w| w[0].recall <= w[1].recall));
    assert!((r.pr_curve.last().unwrap().recall - 1.0).abs() < 1e-12);
}
