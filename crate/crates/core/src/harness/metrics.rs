use serde::Serialize;

use super::HarnessError;
use crate::kinematics::{JointVector, DOF};

/// Wraps an angle in degrees into `(-180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let r = a.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Box-plot statistics of a sample. Quantiles interpolate linearly between
/// order statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Summary {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Largest datum within `Q3 + 1.5·IQR` (never below Q3).
    pub upper_whisker: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    /// Zeros for an empty sample. NaNs are not expected.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q25 = quantile(&v, 0.25);
        let q75 = quantile(&v, 0.75);
        let fence = q75 + 1.5 * (q75 - q25);
        let inside = v.iter().rev().find(|x| **x <= fence).copied().unwrap_or(q75);
        Self {
            n: v.len(),
            median: quantile(&v, 0.5),
            q25,
            q75,
            upper_whisker: inside.max(q75),
            max: v[v.len() - 1],
        }
    }
}

/// Absolute joint-angle deviations of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    /// `|wrap(q̂ - q)|` in degrees, one row per step.
    pub per_step: Vec<[f64; DOF]>,
    pub per_joint: [Summary; DOF],
    /// All joints and steps together.
    pub pooled: Summary,
}

/// Compares estimates with ground truth step by step (angles in radians).
pub fn evaluate(estimates: &[JointVector], truth: &[JointVector]) -> Result<DeviationReport, HarnessError> {
    if estimates.len() != truth.len() {
        return Err(HarnessError::LengthMismatch {
            estimates: estimates.len(),
            truth: truth.len(),
        });
    }
    let per_step: Vec<[f64; DOF]> = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| std::array::from_fn(|j| wrap_deg((e[j] - t[j]).to_degrees()).abs()))
        .collect();
    let per_joint = std::array::from_fn(|j| Summary::of(&per_step.iter().map(|r| r[j]).collect::<Vec<_>>()));
    let pooled = Summary::of(&per_step.iter().flatten().copied().collect::<Vec<_>>());
    Ok(DeviationReport {
        per_step,
        per_joint,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn summary_matches_hand_computation() {
        // 1..=9 and one outlier
        let mut v: Vec<f64> = (1..=9).map(f64::from).collect();
        v.push(100.0);
        let s = Summary::of(&v);
        assert_eq!(s.n, 10);
        assert!((s.median - 5.5).abs() < 1e-12);
        assert!((s.q25 - 3.25).abs() < 1e-12);
        assert!((s.q75 - 7.75).abs() < 1e-12);
        assert_eq!(s.upper_whisker, 9.0);
        assert_eq!(s.max, 100.0);
        assert_eq!(Summary::of(&[]), Summary::default());
        let one = Summary::of(&[4.0]);
        assert_eq!((one.median, one.upper_whisker, one.max), (4.0, 4.0, 4.0));
    }

    #[test]
    fn wrap_handles_branch_cut() {
        assert_eq!(wrap_deg(190.0), -170.0);
        assert_eq!(wrap_deg(-180.0), 180.0);
        assert_eq!(wrap_deg(540.0), 180.0);
        let est = vec![JointVector::from_element(179f64.to_radians())];
        let tru = vec![JointVector::from_element((-179f64).to_radians())];
        let r = evaluate(&est, &tru).unwrap();
        assert!((r.pooled.median - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let a = vec![JointVector::zeros(); 3];
        assert!(matches!(
            evaluate(&a, &a[..2]),
            Err(HarnessError::LengthMismatch { estimates: 3, truth: 2 })
        ));
    }

    proptest! {
        #[test]
        fn summary_is_ordered(v in proptest::collection::vec(0.0f64..1e3, 1..60)) {
            let s = Summary::of(&v);
            prop_assert!(s.q25 <= s.median && s.median <= s.q75);
            prop_assert!(s.q75 <= s.upper_whisker && s.upper_whisker <= s.max);
        }

        #[test]
        fn wrap_is_in_range_and_congruent(a in -1e4f64..1e4) {
            let w = wrap_deg(a);
            prop_assert!(w > -180.0 && w <= 180.0);
            let k = (a - w) / 360.0;
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
