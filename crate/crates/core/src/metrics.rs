//! Classification and localization metrics and cross-run aggregation.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::Serialize;

use crate::classifier::ClassLabel;
use crate::error::{Error, Result};
use crate::gaussian::VariableKey;
use crate::geometry::Pose2;
use crate::hybrid::PoseSummary;

pub const MSDE: &str = "msde";
pub const ROBOT_POSITION_ERROR: &str = "robot_position_error_m";
pub const OBJECT_POSITION_ERROR: &str = "object_position_error_m";
pub const ROBOT_SQRT_COV: &str = "robot_sqrt_cov_m";
pub const OBJECT_SQRT_COV: &str = "object_sqrt_cov_m";
pub const HYPOTHESES: &str = "hypotheses";

/// Mean square detection error of a class marginal against the true class:
/// `(1/m) Σ_i (1{i = true} - p_i)²`.
pub fn msde(marginal: &DVector<f64>, truth: ClassLabel) -> f64 {
    let m = marginal.len();
    marginal
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let gt = if i == truth.index() { 1.0 } else { 0.0 };
            (gt - p) * (gt - p)
        })
        .sum::<f64>()
        / m as f64
}

/// Weight-averaged Euclidean position error, averaged over the variables in
/// `truth`.
pub fn weighted_position_error(summary: &PoseSummary, truth: &BTreeMap<VariableKey, Pose2>) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::contract("no variables to score"));
    }
    let mut total = 0.0;
    for (key, gt) in truth {
        for h in &summary.hypotheses {
            let est = h
                .mean
                .get(key)
                .ok_or_else(|| Error::contract(format!("{key} is not in the belief")))?;
            total += h.weight * est.distance(gt);
        }
    }
    Ok(total / truth.len() as f64)
}

/// Square root of the weight-averaged position variance `(σx² + σy²) / 2`,
/// averaged over `keys`.
pub fn sqrt_position_covariance(summary: &PoseSummary, keys: &[VariableKey]) -> Result<f64> {
    if keys.is_empty() {
        return Err(Error::contract("no variables to score"));
    }
    let mut total = 0.0;
    for key in keys {
        for h in &summary.hypotheses {
            let c = h
                .covariance
                .get(key)
                .ok_or_else(|| Error::contract(format!("{key} is not in the belief")))?;
            total += h.weight * 0.5 * (c[(0, 0)] + c[(1, 1)]);
        }
    }
    Ok((total / keys.len() as f64).sqrt())
}

/// One metric value of one robot at one step of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub seed: u64,
    pub step: u64,
    pub robot: u32,
    pub mode: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryPoint {
    pub step: u64,
    pub mean: f64,
    pub stderr: f64,
    pub runs: usize,
}

/// `mode → metric → per-step statistics`.
pub type Summary = BTreeMap<String, BTreeMap<String, Vec<SummaryPoint>>>;

/// Cross-run mean and standard error per mode, step and metric. Robots are
/// averaged within a run first. `runs` pairs each run's scenario name with
/// its records.
pub fn aggregate_runs(runs: &[(String, Vec<MetricRecord>)]) -> Result<Summary> {
    if let Some((first, _)) = runs.first() {
        if let Some((other, _)) = runs.iter().find(|(name, _)| name != first) {
            return Err(Error::contract(format!(
                "cannot aggregate runs of different scenarios ({first} and {other})"
            )));
        }
    }
    // (mode, metric, step) → per-run robot average
    let mut per_run: BTreeMap<(String, String, u64), Vec<f64>> = BTreeMap::new();
    for (_, records) in runs {
        let mut sums: BTreeMap<(String, String, u64), (f64, usize)> = BTreeMap::new();
        for r in records {
            let e = sums.entry((r.mode.clone(), r.metric.clone(), r.step)).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        for (k, (s, n)) in sums {
            per_run.entry(k).or_default().push(s / n as f64);
        }
    }
    let mut out = Summary::new();
    for ((mode, metric, step), values) in per_run {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        out.entry(mode)
            .or_default()
            .entry(metric)
            .or_default()
            .push(SummaryPoint { step, mean, stderr, runs: n });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::HypothesisSummary;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    #[test]
    fn msde_examples() {
        let c1 = ClassLabel(1);
        assert_eq!(msde(&DVector::from_vec(vec![1.0, 0.0]), c1), 0.0);
        assert_eq!(msde(&DVector::from_vec(vec![0.0, 1.0]), c1), 1.0);
        assert_eq!(msde(&DVector::from_vec(vec![0.5, 0.5]), c1), 0.25);
        for m in 2..8 {
            let mut wrong = DVector::zeros(m);
            wrong[m - 1] = 1.0;
            assert_abs_diff_eq!(msde(&wrong, c1), 2.0 / m as f64);
        }
    }

    proptest::proptest! {
        #[test]
        fn msde_is_bounded(raw in proptest::collection::vec(0.0..1.0f64, 2..8), c in 0usize..8) {
            let total: f64 = raw.iter().sum::<f64>().max(1e-12);
            let p = DVector::from_iterator(raw.len(), raw.iter().map(|v| v / total));
            let v = msde(&p, ClassLabel::from_index(c % raw.len()));
            proptest::prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    fn summary(points: &[(f64, Pose2)]) -> PoseSummary {
        let key = VariableKey::robot(0, 1);
        PoseSummary {
            mean: BTreeMap::new(),
            hypotheses: points
                .iter()
                .map(|(w, p)| HypothesisSummary {
                    weight: *w,
                    mean: [(key, *p)].into(),
                    covariance: [(key, Matrix3::from_diagonal(&nalgebra::Vector3::new(0.04, 0.02, 1.0)))].into(),
                })
                .collect(),
        }
    }

    #[test]
    fn position_error_examples() {
        let key = VariableKey::robot(0, 1);
        let truth = [(key, Pose2::identity())].into();
        assert_eq!(weighted_position_error(&summary(&[(1.0, Pose2::identity())]), &truth).unwrap(), 0.0);
        assert_abs_diff_eq!(
            weighted_position_error(&summary(&[(1.0, Pose2::new(3.0, 4.0, 0.0))]), &truth).unwrap(),
            5.0
        );
        let two = summary(&[(0.5, Pose2::new(1.0, 0.0, 0.0)), (0.5, Pose2::new(0.0, 3.0, 0.0))]);
        assert_abs_diff_eq!(weighted_position_error(&two, &truth).unwrap(), 2.0);
        let other = [(VariableKey::object(1), Pose2::identity())].into();
        assert!(weighted_position_error(&two, &other).is_err());
        assert_abs_diff_eq!(sqrt_position_covariance(&two, &[key]).unwrap(), 0.03f64.sqrt(), epsilon = 1e-15);
    }

    fn records(seed: u64, values: &[(u64, f64)]) -> (String, Vec<MetricRecord>) {
        (
            "s".into(),
            values
                .iter()
                .map(|(step, v)| MetricRecord {
                    seed,
                    step: *step,
                    robot: 1,
                    mode: "local".into(),
                    metric: MSDE.into(),
                    value: *v,
                })
                .collect(),
        )
    }

    #[test]
    fn aggregation_examples() {
        let one = aggregate_runs(&[records(0, &[(1, 0.7)])]).unwrap();
        let p = &one["local"][MSDE][0];
        assert_eq!((p.mean, p.stderr, p.runs), (0.7, 0.0, 1));

        let two = aggregate_runs(&[records(0, &[(1, 0.2)]), records(1, &[(1, 0.4)])]).unwrap();
        assert_abs_diff_eq!(two["local"][MSDE][0].mean, 0.3, epsilon = 1e-15);

        let same = aggregate_runs(&[records(0, &[(1, 0.5)]), records(1, &[(1, 0.5)]), records(2, &[(1, 0.5)])]).unwrap();
        assert_eq!(same["local"][MSDE][0].stderr, 0.0);

        let mut other = records(3, &[(1, 0.5)]);
        other.0 = "t".into();
        assert!(aggregate_runs(&[records(0, &[(1, 0.5)]), other]).is_err());
    }
}
