use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{argmax, softmax, Model};
use super::RoISample;
use crate::error::Result;
use crate::ingest::Region;

/// Row labels of the per-region report, overall first.
pub const REPORT_ROWS: [&str; 5] = ["All", "Centre", "Front", "Mucosa", "Stroma"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub roi_id: String,
    pub patient_id: String,
    pub region: Region,
    pub truth: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: String,
    pub n: usize,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    /// Rows in `REPORT_ROWS` order; regions without samples are left out.
    pub rows: Vec<RegionScore>,
}

impl Evaluation {
    pub fn row(&self, region: &str) -> Option<&RegionScore> {
        self.rows.iter().find(|r| r.region == region)
    }
}

/// Support-weighted mean of per-class F1. Classes with no true samples
/// contribute nothing; undefined precision or recall counts as zero.
pub fn weighted_f1(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    if truth.is_empty() {
        return 0.0;
    }
    let mut tp = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        if support[c] == 0 || tp[c] == 0 {
            continue;
        }
        let precision = tp[c] as f64 / predicted[c] as f64;
        let recall = tp[c] as f64 / support[c] as f64;
        total += support[c] as f64 * 2.0 * precision * recall / (precision + recall);
    }
    total / truth.len() as f64
}

/// Evaluation-mode predictions, computed in parallel, in input order.
pub fn predict(model: &Model, samples: &[RoISample]) -> Result<Vec<Prediction>> {
    samples
        .par_iter()
        .map(|s| {
            let z = model.logits(s)?;
            Ok(Prediction {
                roi_id: s.roi_id.clone(),
                patient_id: s.patient_id.clone(),
                region: s.region,
                truth: model.label(s),
                pred: argmax(&z),
                probs: softmax(&z),
            })
        })
        .collect()
}

/// Weighted F1 overall and per region on test graphs.
pub fn evaluate(model: &Model, samples: &[RoISample]) -> Result<Evaluation> {
    let predictions = predict(model, samples)?;
    let c = model.n_classes();
    let score = |name: &str, keep: &dyn Fn(&Prediction) -> bool| {
        let (t, p): (Vec<usize>, Vec<usize>) = predictions.iter().filter(|x| keep(x)).map(|x| (x.truth, x.pred)).unzip();
        if t.is_empty() {
            log::warn!("no test samples for region {name}; row omitted");
            return None;
        }
        Some(RegionScore {
            region: name.to_string(),
            n: t.len(),
            weighted_f1: weighted_f1(&t, &p, c),
        })
    };
    let mut rows = Vec::new();
    rows.extend(score(REPORT_ROWS[0], &|_| true));
    for r in Region::ALL {
        rows.extend(score(r.name(), &|x| x.region == r));
    }
    Ok(Evaluation { predictions, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_one() {
        let y = [0, 1, 2, 2, 1, 0];
        assert_eq!(weighted_f1(&y, &y, 3), 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_pair() {
        let t = [0, 0, 1, 1];
        let p = [0, 0, 0, 0];
        assert!((weighted_f1(&t, &p, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn known_confusion_matrix() {
        // rows = truth, cols = prediction
        let cm = [[5, 2, 1], [1, 6, 3], [0, 2, 4]];
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (i, row) in cm.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                t.extend(std::iter::repeat_n(i, n));
                p.extend(std::iter::repeat_n(j, n));
            }
        }
        // precision 5/6, 6/10, 4/8; recall 5/8, 6/10, 4/6
        let f1 = |pr: f64, re: f64| 2.0 * pr * re / (pr + re);
        let want = (8.0 * f1(5.0 / 6.0, 5.0 / 8.0) + 10.0 * f1(0.6, 0.6) + 6.0 * f1(0.5, 4.0 / 6.0)) / 24.0;
        assert!((weighted_f1(&t, &p, 3) - want).abs() < 1e-12);
    }

    fn f1_oracle(t: &[usize], p: &[usize], c: usize) -> f64 {
        let n = t.len() as f64;
        (0..c)
            .map(|k| {
                let tp = t.iter().zip(p).filter(|(a, b)| **a == k && **b == k).count() as f64;
                let fp = t.iter().zip(p).filter(|(a, b)| **a != k && **b == k).count() as f64;
                let fne = t.iter().zip(p).filter(|(a, b)| **a == k && **b != k).count() as f64;
                let support = tp + fne;
                // F1 = 2TP / (2TP + FP + FN)
                let f = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) };
                support * f
            })
            .sum::<f64>()
            / n
    }

    proptest! {
        #[test]
        fn matches_count_form(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
            let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let got = weighted_f1(&t, &p, 3);
            prop_assert!((got - f1_oracle(&t, &p, 3)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }
}
