//! Landmark error metrics, per-case robustness and aggregate reports.
//!
//! A landmark counts as successfully registered when its error after
//! registration is strictly below its error under the identity transform.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{map_landmark, DisplacementField, Frame, LandmarkSet, Point, Volume, DEFAULT_INVERSION_ITERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub errors_before: Vec<f64>,
    pub errors_after: Vec<f64>,
    pub mae_median: f64,
    pub mae_mean: f64,
    pub robustness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub median_of_median_ae: f64,
    pub mean_of_median_ae: f64,
    pub median_of_mean_ae: f64,
    pub mean_of_mean_ae: f64,
    pub mean_robustness: f64,
    pub median_robustness: f64,
    #[serde(skip)]
    pub n_cases: usize,
}

/// Row labels of the printed table, in report-key order.
pub const ROW_NAMES: [&str; 6] = [
    "Median of Median AE",
    "Mean of Median AE",
    "Median of Mean AE",
    "Mean of Mean AE",
    "Mean Robustness",
    "Median Robustness",
];

pub const AGGREGATE_KEYS: [&str; 6] = [
    "median_of_median_ae",
    "mean_of_median_ae",
    "median_of_mean_ae",
    "mean_of_mean_ae",
    "mean_robustness",
    "median_robustness",
];

impl AggregateReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.median_of_median_ae,
            self.mean_of_median_ae,
            self.median_of_mean_ae,
            self.mean_of_mean_ae,
            self.mean_robustness,
            self.median_robustness,
        ]
    }
}

/// Median with the even-length convention of averaging the central pair.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("median of an empty list");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return invalid("mean of an empty list");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Euclidean distances in millimetres between matching ids; both sets must
/// be voxel-frame and the output follows `truth`'s order.
pub fn landmark_errors(pred: &LandmarkSet, truth: &LandmarkSet, spacing: [f64; 3]) -> Result<Vec<f64>> {
    if pred.frame() != Frame::Voxel || truth.frame() != Frame::Voxel {
        return invalid("landmark_errors expects voxel-frame landmark sets");
    }
    if pred.len() != truth.len() {
        return invalid(format!("landmark id sets differ: {} predicted vs {} true", pred.len(), truth.len()));
    }
    let lookup: HashMap<u32, Point> = pred.entries().iter().copied().collect();
    truth
        .entries()
        .iter()
        .map(|(id, t)| {
            let Some(p) = lookup.get(id) else {
                return invalid(format!("landmark {id} missing from the predicted set"));
            };
            Ok((0..3).map(|a| ((p.coords[a] - t.coords[a]) * spacing[a]).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

pub fn case_metrics(case_id: &str, errors_before: Vec<f64>, errors_after: Vec<f64>) -> Result<CaseResult> {
    if errors_after.is_empty() || errors_before.len() != errors_after.len() {
        return invalid(format!(
            "case {case_id}: error lists must be nonempty and of equal length ({} vs {})",
            errors_before.len(),
            errors_after.len()
        ));
    }
    if errors_before.iter().chain(&errors_after).any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return invalid(format!("case {case_id}: landmark errors must be finite and nonnegative"));
    }
    let successes = errors_before.iter().zip(&errors_after).filter(|(b, a)| a < b).count();
    Ok(CaseResult {
        case_id: case_id.to_string(),
        mae_median: median(&errors_after)?,
        mae_mean: mean(&errors_after)?,
        robustness: successes as f64 / errors_after.len() as f64,
        errors_before,
        errors_after,
    })
}

pub fn aggregate(cases: &[CaseResult]) -> Result<AggregateReport> {
    if cases.is_empty() {
        return invalid("aggregate needs at least one case");
    }
    let med: Vec<f64> = cases.iter().map(|c| c.mae_median).collect();
    let avg: Vec<f64> = cases.iter().map(|c| c.mae_mean).collect();
    let rob: Vec<f64> = cases.iter().map(|c| c.robustness).collect();
    Ok(AggregateReport {
        median_of_median_ae: median(&med)?,
        mean_of_median_ae: mean(&med)?,
        median_of_mean_ae: median(&avg)?,
        mean_of_mean_ae: mean(&avg)?,
        mean_robustness: mean(&rob)?,
        median_robustness: median(&rob)?,
        n_cases: cases.len(),
    })
}

/// Scores one case. Moving landmarks are carried back to the fixed grid
/// through `field` with [`map_landmark`]; the identity baseline compares
/// them untransformed. Distances use the fixed volume's spacing.
pub fn evaluate_case(
    case_id: &str,
    fixed: &Volume,
    moving: &Volume,
    fixed_landmarks: &LandmarkSet,
    moving_landmarks: &LandmarkSet,
    field: &DisplacementField,
) -> Result<CaseResult> {
    if field.shape() != fixed.shape() {
        return invalid(format!(
            "case {case_id}: field shape {:?} differs from the fixed volume {:?}",
            field.shape(),
            fixed.shape()
        ));
    }
    let truth = fixed_landmarks.to_voxel(fixed);
    let follow = moving_landmarks.to_voxel(moving);
    let mapped = follow.map_points(|p| map_landmark(p, field, DEFAULT_INVERSION_ITERS))?;
    let spacing = fixed.spacing();
    let before = landmark_errors(&follow, &truth, spacing)?;
    let after = landmark_errors(&mapped, &truth, spacing)?;
    case_metrics(case_id, before, after)
}

/// One entry of the per-case array: a result or the reason it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaseOutcome {
    Ok(CaseResult),
    Failed { case_id: String, error: String },
}

impl CaseOutcome {
    pub fn case_id(&self) -> &str {
        match self {
            CaseOutcome::Ok(r) => &r.case_id,
            CaseOutcome::Failed { case_id, .. } => case_id,
        }
    }
}

/// Aggregates over the successful cases; `None` when every case failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub aggregate: Option<AggregateReport>,
    pub cases: Vec<CaseOutcome>,
}

impl EvaluationReport {
    /// Sorts outcomes by case id and aggregates the successful ones.
    pub fn from_outcomes(mut cases: Vec<CaseOutcome>) -> Result<Self> {
        cases.sort_by(|a, b| a.case_id().cmp(b.case_id()));
        let ok: Vec<CaseResult> = cases
            .iter()
            .filter_map(|c| match c {
                CaseOutcome::Ok(r) => Some(r.clone()),
                CaseOutcome::Failed { .. } => None,
            })
            .collect();
        let aggregate = if ok.is_empty() { None } else { Some(aggregate(&ok)?) };
        Ok(Self { aggregate, cases })
    }

    pub fn n_failed(&self) -> usize {
        self.cases.iter().filter(|c| matches!(c, CaseOutcome::Failed { .. })).count()
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serialises");
        text.push('\n');
        text
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let n_ok = self.cases.len() - self.n_failed();
        writeln!(s, "{:<22}{:>12}", "Metric", "Value").unwrap();
        match &self.aggregate {
            Some(a) => {
                for (name, v) in ROW_NAMES.iter().zip(a.values()) {
                    writeln!(s, "{name:<22}{v:>12.4}").unwrap();
                }
            }
            None => {
                for name in ROW_NAMES {
                    writeln!(s, "{name:<22}{:>12}", "n/a").unwrap();
                }
            }
        }
        write!(s, "cases evaluated: {n_ok}, failed: {}", self.n_failed()).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(id: u32, c: [f64; 3]) -> LandmarkSet {
        LandmarkSet::new("c", vec![(id, Point::voxel(c))]).unwrap()
    }

    #[test]
    fn distances_scale_per_axis() {
        let e = landmark_errors(&one(1, [3.0, 4.0, 0.0]), &one(1, [0.0; 3]), [1.0; 3]).unwrap();
        assert_eq!(e, vec![5.0]);
        let e = landmark_errors(&one(1, [3.0, 0.0, 0.0]), &one(1, [0.0; 3]), [2.0, 1.0, 1.0]).unwrap();
        assert_eq!(e, vec![6.0]);
        assert!(landmark_errors(&one(2, [0.0; 3]), &one(1, [0.0; 3]), [1.0; 3]).is_err());
    }

    #[test]
    fn medians_and_robustness() {
        let r = case_metrics("a", vec![9.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.mae_median, r.mae_mean), (2.0, 2.0));
        let r = case_metrics("a", vec![20.0; 4], vec![1.0, 2.0, 3.0, 10.0]).unwrap();
        assert_eq!((r.mae_median, r.mae_mean), (2.5, 4.0));
        let r = case_metrics("a", vec![5.0; 6], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        assert_eq!(r.robustness, 0.5);
        assert!(case_metrics("a", vec![], vec![]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = case_metrics("a", vec![9.0], vec![4.0]).unwrap();
        let b = case_metrics("b", vec![1.0], vec![6.0]).unwrap();
        let single = aggregate(std::slice::from_ref(&a)).unwrap();
        assert!(single.values()[..4].iter().all(|&v| v == 4.0));
        assert_eq!((single.mean_robustness, single.median_robustness), (1.0, 1.0));
        let two = aggregate(&[a, b]).unwrap();
        assert_eq!((two.median_of_median_ae, two.mean_of_median_ae), (5.0, 5.0));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_keys() {
        let a = case_metrics("a", vec![9.0], vec![4.0]).unwrap();
        let rep = EvaluationReport::from_outcomes(vec![
            CaseOutcome::Failed { case_id: "z".into(), error: "boom".into() },
            CaseOutcome::Ok(a),
        ])
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort();
        let mut want: Vec<&str> = AGGREGATE_KEYS.iter().copied().chain(["cases"]).collect();
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(rep.cases[0].case_id(), "a");
        assert!(rep.table().contains("Median of Median AE"));
    }

    fn errors() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..12)
    }

    proptest! {
        #[test]
        fn scale_equivariance(cases in prop::collection::vec(errors(), 1..5), c in 0.1f64..10.0) {
            let build = |k: f64| -> Vec<CaseResult> {
                cases.iter().enumerate().map(|(i, e)| {
                    let (b, a): (Vec<f64>, Vec<f64>) = e.iter().map(|&(b, a)| (b * k, a * k)).unzip();
                    case_metrics(&i.to_string(), b, a).unwrap()
                }).collect()
            };
            let base = aggregate(&build(1.0)).unwrap().values();
            let scaled = aggregate(&build(c)).unwrap().values();
            for i in 0..4 {
                prop_assert!((scaled[i] - c * base[i]).abs() <= 1e-9 * (1.0 + scaled[i].abs()));
            }
            prop_assert_eq!(scaled[4], base[4]);
            prop_assert_eq!(scaled[5], base[5]);
        }

        #[test]
        fn permutation_invariance(e in errors(), rot in 0usize..12) {
            let (b, a): (Vec<f64>, Vec<f64>) = e.iter().copied().unzip();
            let k = rot % b.len();
            let (mut b2, mut a2) = (b.clone(), a.clone());
            b2.rotate_left(k);
            a2.rotate_left(k);
            let r1 = case_metrics("x", b, a).unwrap();
            let r2 = case_metrics("x", b2, a2).unwrap();
            prop_assert_eq!(r1.mae_median, r2.mae_median);
            prop_assert!((r1.mae_mean - r2.mae_mean).abs() < 1e-12);
            prop_assert_eq!(r1.robustness, r2.robustness);
        }

        #[test]
        fn improving_never_lowers_robustness(e in errors(), idx in 0usize..12, f in 0.0f64..1.0) {
            let (b, a): (Vec<f64>, Vec<f64>) = e.iter().copied().unzip();
            let i = idx % a.len();
            let mut better = a.clone();
            better[i] *= f;
            let r0 = case_metrics("x", b.clone(), a).unwrap().robustness;
            let r1 = case_metrics("x", b, better).unwrap().robustness;
            prop_assert!((0.0..=1.0).contains(&r1));
            prop_assert!(r1 >= r0);
        }
    }
}
