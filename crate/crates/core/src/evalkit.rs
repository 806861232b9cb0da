//! Retrieval metrics and report files.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::retrieval::{search, PackedCodes, RankedList};

/// MAP@1000, the single-label benchmark protocol.
pub const DEFAULT_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceRule {
    /// Relevant iff the multi-hot label vectors share a positive entry.
    #[default]
    ShareAnyLabel,
}

impl RelevanceRule {
    pub fn relevant(self, a: &[f64], b: &[f64]) -> bool {
        match self {
            RelevanceRule::ShareAnyLabel => a.iter().zip(b).any(|(x, y)| *x > 0.0 && *y > 0.0),
        }
    }
}

/// What `n_+` counts in the AP normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApDenominator {
    /// Relevant items among the returned top-k.
    #[default]
    TopK,
    /// All relevant items in the database.
    All,
}

impl std::str::FromStr for ApDenominator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "topk" => Ok(ApDenominator::TopK),
            "all" => Ok(ApDenominator::All),
            other => Err(format!(
                "unknown AP denominator `{other}` (expected topk or all)"
            )),
        }
    }
}

fn precision_sum(flags: &[bool], k: usize) -> Result<(f64, usize)> {
    if flags.is_empty() {
        return Err(Error::EmptyRanking);
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in flags.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok((sum, hits))
}

/// AP over the top-`min(k, n)` returns, normalized by the relevant count
/// within them. Zero when nothing relevant is returned.
pub fn average_precision(flags: &[bool], k: usize) -> Result<f64> {
    let (sum, hits) = precision_sum(flags, k)?;
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

/// AP over the top-`min(k, n)` returns, normalized by a fixed
/// `total_relevant`.
pub fn average_precision_fixed(flags: &[bool], k: usize, total_relevant: usize) -> Result<f64> {
    let (sum, _) = precision_sum(flags, k)?;
    Ok(if total_relevant == 0 {
        0.0
    } else {
        sum / total_relevant as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

/// One point per rank. Empty, with a warning, when nothing is relevant.
pub fn pr_curve(flags: &[bool], total_relevant: usize) -> Vec<PrPoint> {
    if total_relevant == 0 {
        log::warn!("precision-recall curve skipped: no relevant items");
        return Vec::new();
    }
    let mut hits = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(r, &rel)| {
            hits += rel as usize;
            PrPoint {
                rank: r + 1,
                recall: hits as f64 / total_relevant as f64,
                precision: hits as f64 / (r + 1) as f64,
            }
        })
        .collect()
}

/// Pointwise mean of equal-length curves; empty curves are skipped.
pub fn mean_pr_curve(curves: &[Vec<PrPoint>]) -> Vec<PrPoint> {
    let used: Vec<&Vec<PrPoint>> = curves.iter().filter(|c| !c.is_empty()).collect();
    let Some(len) = used.iter().map(|c| c.len()).min() else {
        return Vec::new();
    };
    let count = used.len() as f64;
    (0..len)
        .map(|r| PrPoint {
            rank: r + 1,
            recall: used.iter().map(|c| c[r].recall).sum::<f64>() / count,
            precision: used.iter().map(|c| c[r].precision).sum::<f64>() / count,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub k: usize,
    pub ap_denominator: ApDenominator,
    pub rule: RelevanceRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: DEFAULT_K,
            ap_denominator: ApDenominator::TopK,
            rule: RelevanceRule::ShareAnyLabel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_k: f64,
    pub k: usize,
    pub bits: usize,
    pub num_queries: usize,
    pub num_database: usize,
    pub ap_denominator: ApDenominator,
    pub relevance: RelevanceRule,
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub per_query_ap: Vec<f64>,
    pub pr_curve: Vec<PrPoint>,
}

fn check_rows(op: &'static str, codes: &Matrix, labels: &Matrix) -> Result<()> {
    if codes.rows() != labels.rows() {
        return Err(Error::shape(op, &codes.shape(), &labels.shape()));
    }
    Ok(())
}

/// Relevance of each ranked database item to the query.
pub fn relevance_flags(
    list: &RankedList,
    query_label: &[f64],
    db_labels: &Matrix,
    rule: RelevanceRule,
) -> Vec<bool> {
    list.indices
        .iter()
        .map(|&j| rule.relevant(query_label, db_labels.row(j)))
        .collect()
}

/// MAP@k of ±1 query codes against ±1 database codes. The PR curve is
/// traced over the full ranking so recall reaches 1.
pub fn evaluate(
    query_codes: &Matrix,
    db_codes: &Matrix,
    query_labels: &Matrix,
    db_labels: &Matrix,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_rows("query codes vs labels", query_codes, query_labels)?;
    check_rows("database codes vs labels", db_codes, db_labels)?;
    if query_labels.cols() != db_labels.cols() {
        return Err(Error::shape(
            "query vs database labels",
            &query_labels.shape(),
            &db_labels.shape(),
        ));
    }
    if opts.k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if query_codes.rows() == 0 {
        return Err(Error::invalid("queries", "at least one query is required"));
    }
    if db_codes.rows() == 0 {
        return Err(Error::EmptyRanking);
    }
    let q = PackedCodes::pack(query_codes)?;
    let db = PackedCodes::pack(db_codes)?;
    let rankings = search(&q, &db, db.len())?;

    let per_query: Vec<(f64, Vec<PrPoint>)> = rankings
        .par_iter()
        .map(|list| {
            let label = query_labels.row(list.query);
            let flags = relevance_flags(list, label, db_labels, opts.rule);
            let total = flags.iter().filter(|&&f| f).count();
            let ap = match opts.ap_denominator {
                ApDenominator::TopK => average_precision(&flags, opts.k),
                ApDenominator::All => average_precision_fixed(&flags, opts.k, total),
            }?;
            Ok((ap, pr_curve(&flags, total)))
        })
        .collect::<Result<_>>()?;

    let (per_query_ap, curves): (Vec<f64>, Vec<Vec<PrPoint>>) = per_query.into_iter().unzip();
    let map_at_k = per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64;
    Ok(EvalReport {
        map_at_k,
        k: opts.k,
        bits: q.bits(),
        num_queries: q.len(),
        num_database: db.len(),
        ap_denominator: opts.ap_denominator,
        relevance: opts.rule,
        seed: None,
        config: None,
        per_query_ap,
        pr_curve: mean_pr_curve(&curves),
    })
}

fn select(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        if i >= m.rows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: m.rows(),
            });
        }
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data)
}

/// MAP@k for a query/database split over dataset-wide codes and labels.
pub fn map_at_k(
    queries: &[usize],
    database: &[usize],
    codes: &Matrix,
    labels: &Matrix,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    check_rows("codes vs labels", codes, labels)?;
    evaluate(
        &select(codes, queries)?,
        &select(codes, database)?,
        &select(labels, queries)?,
        &select(labels, database)?,
        opts,
    )
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_pr_csv(path: &Path, points: &[PrPoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "rank,recall,precision").expect("in-memory write");
    for p in points {
        writeln!(out, "{},{},{}", p.rank, p.recall, p.precision).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true], 3).unwrap(), 1.0);
        let ap = average_precision(&[true, false, true, false], 4).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false, true], 2).unwrap(), 0.0);
        assert!(matches!(
            average_precision(&[], 3),
            Err(Error::EmptyRanking)
        ));
        assert!(average_precision(&[true], 0).is_err());
    }

    #[test]
    fn fixed_denominator() {
        let ap = average_precision_fixed(&[true, false, true, false], 2, 4).unwrap();
        assert!((ap - 0.25).abs() < 1e-12);
    }

    #[test]
    fn pr_examples() {
        let c = pr_curve(&[false, true], 1);
        assert_eq!(
            c[0],
            PrPoint {
                rank: 1,
                recall: 0.0,
                precision: 0.0
            }
        );
        assert_eq!(
            c[1],
            PrPoint {
                rank: 2,
                recall: 1.0,
                precision: 0.5
            }
        );

        let flags: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let c = pr_curve(&flags, 5);
        assert!(c[..5].iter().all(|p| p.precision == 1.0));
        assert_eq!(c[4].recall, 1.0);
        assert!(c[5..].windows(2).all(|w| w[1].precision < w[0].precision));
        assert!(pr_curve(&[false, false], 0).is_empty());
    }

    #[test]
    fn relevance_is_symmetric_and_reflexive() {
        let r = RelevanceRule::ShareAnyLabel;
        assert!(r.relevant(&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0]));
        assert!(r.relevant(&[0.0, 0.0, 1.0], &[1.0, 0.0, 1.0]));
        assert!(!r.relevant(&[1.0, 0.0], &[0.0, 1.0]));
        assert!(r.relevant(&[0.0, 1.0], &[0.0, 1.0]));
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = Rng::new(4);
        let n = 8;
        let codes = Matrix::new(
            n,
            16,
            (0..n * 16)
                .map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 })
                .collect(),
        )
        .unwrap();
        // Make codes distinct so each query's own entry ranks first.
        let mut codes = codes;
        for i in 0..n {
            for b in 0..3 {
                codes.set(i, b, if i >> b & 1 == 1 { 1.0 } else { -1.0 });
            }
        }
        let labels = Matrix::identity(n);
        let r = evaluate(
            &codes,
            &codes,
            &labels,
            &labels,
            &EvalOptions {
                k: 100,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.map_at_k, 1.0);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let codes = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let labels = Matrix::identity(3);
        assert!(map_at_k(&[0], &[1], &codes, &labels, &EvalOptions::default()).is_err());
    }

    #[test]
    fn denominator_parses() {
        assert_eq!(
            "topk".parse::<ApDenominator>().unwrap(),
            ApDenominator::TopK
        );
        assert_eq!("all".parse::<ApDenominator>().unwrap(), ApDenominator::All);
        assert!("some".parse::<ApDenominator>().is_err());
        assert_eq!(
            serde_json::to_string(&ApDenominator::TopK).unwrap(),
            "\"topk\""
        );
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pr.csv");
        write_pr_csv(&path, &pr_curve(&[false, true], 1)).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "rank,recall,precision\n1,0,0\n2,1,0.5\n"
        );
    }

    proptest! {
        #[test]
        fn pr_recall_non_decreasing(flags in proptest::collection::vec(any::<bool>(), 1..60)) {
            let total = flags.iter().filter(|&&f| f).count();
            let c = pr_curve(&flags, total);
            prop_assert!(c.windows(2).all(|w| w[0].recall <= w[1].recall));
        }

        #[test]
        fn fixed_ap_non_decreasing_in_k(flags in proptest::collection::vec(any::<bool>(), 1..60)) {
            let total = flags.iter().filter(|&&f| f).count();
            let mut prev = 0.0;
            for k in 1..=flags.len() {
                let ap = average_precision_fixed(&flags, k, total).unwrap();
                prop_assert!(ap >= prev);
                prop_assert!((0.0..=1.0).contains(&ap));
                prev = ap;
            }
        }
    }
}
