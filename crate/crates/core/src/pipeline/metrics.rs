use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Cold,
    Warm,
}

impl Subset {
    pub fn name(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Cold => "cold",
            Subset::Warm => "warm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub subset: Subset,
    /// Absent when the labels hold a single class.
    pub auc: Option<f64>,
    pub acc: f64,
    pub rmse: f64,
    pub n: usize,
}

pub const ACC_THRESHOLD: f64 = 0.5;

fn check_inputs(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            left: vec![scores.len()],
            right: vec![labels.len()],
        });
    }
    if let Some(l) = labels.iter().find(|l| **l != 0.0 && **l != 1.0) {
        return Err(Error::contract(format!("labels must be 0 or 1, got {l}")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::contract(format!("score {s} is not finite")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|l| **l == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut concordant: u64 = 0;
    let mut ties: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1.0 {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        concordant += p * neg_below;
        ties += p * q;
        neg_below += q;
        i = j;
    }
    Ok((concordant as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

pub fn compute_metrics(scores: &[f64], labels: &[f64], threshold: f64, subset: Subset) -> Result<Metrics> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::contract("metrics need at least one sample"));
    }
    let n = scores.len() as f64;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == (**l == 1.0))
        .count();
    let sq: f64 = scores.iter().zip(labels).map(|(s, l)| (s - l).powi(2)).sum();
    let auc = match auc(scores, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        subset,
        auc,
        acc: hits as f64 / n,
        rmse: (sq / n).sqrt(),
        n: scores.len(),
    })
}

/// CSV with header `subset,auc,acc,rmse,n`; an undefined AUC is left empty.
pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut out = String::from("subset,auc,acc,rmse,n\n");
    for m in rows {
        let auc = m.auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{auc},{:.6},{:.6},{}\n",
            m.subset.name(),
            m.acc,
            m.rmse,
            m.n
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.1], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.8, 0.2], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[0.6, 0.4], &[1.0, 0.0], ACC_THRESHOLD, Subset::All).unwrap();
        assert_eq!(m.acc, 1.0);
        let m = compute_metrics(&[1.0, 0.0], &[0.0, 1.0], ACC_THRESHOLD, Subset::All).unwrap();
        assert_eq!(m.rmse, 1.0);
        let m = compute_metrics(&[0.9, 0.2, 0.6], &[1.0, 0.0, 0.0], ACC_THRESHOLD, Subset::All).unwrap();
        assert!((m.acc - 2.0 / 3.0).abs() < 1e-15);
        let rmse = ((0.01 + 0.04 + 0.36) / 3.0f64).sqrt();
        assert!((m.rmse - rmse).abs() < 1e-15);
        assert!((m.rmse - 0.3697).abs() < 1e-4);
        assert!(compute_metrics(&[], &[], ACC_THRESHOLD, Subset::All).is_err());
        let single = compute_metrics(&[0.2], &[1.0], ACC_THRESHOLD, Subset::Cold).unwrap();
        assert_eq!(single.auc, None);
    }

    #[test]
    fn csv_layout() {
        let m = Metrics {
            subset: Subset::Cold,
            auc: None,
            acc: 0.5,
            rmse: 0.25,
            n: 4,
        };
        assert_eq!(metrics_csv(&[m]), "subset,auc,acc,rmse,n\ncold,,0.500000,0.250000,4\n");
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(
            pairs in proptest::collection::vec((0u8..6, proptest::bool::ANY), 2..60),
        ) {
            let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
            let labels: Vec<f64> = pairs.iter().map(|(_, l)| if *l { 1.0 } else { 0.0 }).collect();
            prop_assume!(labels.contains(&1.0) && labels.contains(&0.0));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }

        #[test]
        fn metrics_ignore_sample_order(
            pairs in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 2..40),
            rot in 0usize..40,
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<f64> = pairs.iter().map(|p| if p.1 { 1.0 } else { 0.0 }).collect();
            let k = rot % scores.len();
            let mut s2 = scores.clone();
            let mut l2 = labels.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            let a = compute_metrics(&scores, &labels, ACC_THRESHOLD, Subset::All).unwrap();
            let b = compute_metrics(&s2, &l2, ACC_THRESHOLD, Subset::All).unwrap();
            prop_assert_eq!(a.auc, b.auc);
            prop_assert_eq!(a.acc, b.acc);
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12);
        }
    }
}
