//! Segment-length estimation from calibration motions with known postures.
//!
//! With the posture fixed, every point on the chain is affine in the
//! segment lengths, so the stylus fit is an ordinary linear least-squares
//! problem. The keypoint fit goes through the camera projection and is
//! solved with Levenberg–Marquardt.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{project_in_front, ProjectionMatrix};
use crate::kinematics::{JointState, KinematicModel, SegmentLengths};
use crate::lsq::{levenberg_marquardt, LeastSquaresProblem, LmConfig};
use crate::observation::{KeypointObservation, RobotObservation};

/// Fewer samples than this cannot be trusted to excite every segment.
pub const MIN_SAMPLES: usize = 20;

/// Relative singular-value floor below which a length is unidentifiable.
const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnthropometryError {
    #[error("calibration trace has {n} samples, at least {MIN_SAMPLES} are needed")]
    TooFewSamples { n: usize },
    #[error("sample {index} has no known posture")]
    MissingPosture { index: usize },
    #[error("calibration motion does not excite every segment (rank {rank} of {needed})")]
    RankDeficient { rank: usize, needed: usize },
    #[error("fitted {name} length {value} m is not positive")]
    NonPositiveLength { name: &'static str, value: f64 },
    #[error("landmark projects behind the camera in sample {index}")]
    DegenerateProjection { index: usize },
    #[error("sample {index} has no keypoints")]
    MissingKeypoints { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    /// Ground-truth or previously estimated posture; `None` if unknown.
    pub state: Option<JointState>,
    pub robot: RobotObservation,
    pub keypoints: Option<KeypointObservation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationTrace {
    pub samples: Vec<CalibrationSample>,
}

impl CalibrationTrace {
    fn check(&self) -> Result<(), AnthropometryError> {
        if self.samples.len() < MIN_SAMPLES {
            return Err(AnthropometryError::TooFewSamples {
                n: self.samples.len(),
            });
        }
        if let Some(index) = self.samples.iter().position(|s| s.state.is_none()) {
            return Err(AnthropometryError::MissingPosture { index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthFit {
    pub lengths: SegmentLengths,
    /// Root-mean-square residual (meters or pixels, per fit).
    pub rms: f64,
    /// Objective after each accepted solver step (one entry for the direct
    /// linear solve).
    pub cost_history: Vec<f64>,
}

const NAMES: [&str; 5] = ["torso", "shoulder", "upper_arm", "lower_arm", "hand"];

fn with_lengths(model: &KinematicModel, lengths: [f64; 5]) -> KinematicModel {
    KinematicModel {
        segment_lengths: SegmentLengths::from_array(lengths),
        ..model.clone()
    }
}

fn unit(i: usize) -> [f64; 5] {
    let mut a = [0.0; 5];
    a[i] = 1.0;
    a
}

fn check_positive(a: &[f64; 5]) -> Result<SegmentLengths, AnthropometryError> {
    for (name, &value) in NAMES.iter().zip(a) {
        if !(value > 0.0 && value.is_finite()) {
            return Err(AnthropometryError::NonPositiveLength { name, value });
        }
    }
    Ok(SegmentLengths::from_array(*a))
}

/// Fits all five lengths to the stylus positions of a trace with known
/// postures. The base pose and grasp transform come from `model`.
pub fn fit_lengths_robot(
    trace: &CalibrationTrace,
    model: &KinematicModel,
) -> Result<LengthFit, AnthropometryError> {
    trace.check()?;
    let zero = with_lengths(model, [0.0; 5]);
    let basis: Vec<KinematicModel> = (0..5).map(|i| with_lengths(model, unit(i))).collect();

    let rows = 3 * trace.samples.len();
    let mut a = DMatrix::zeros(rows, 5);
    let mut b = DVector::zeros(rows);
    for (k, sample) in trace.samples.iter().enumerate() {
        let q = sample.state.expect("checked").q;
        let p0 = zero.stylus_pose(&q).position;
        for (i, m) in basis.iter().enumerate() {
            let column = m.stylus_pose(&q).position - p0;
            a.fixed_view_mut::<3, 1>(3 * k, i).copy_from(&column);
        }
        b.fixed_rows_mut::<3>(3 * k)
            .copy_from(&(sample.robot.pose.position - p0));
    }

    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > RANK_TOLERANCE * max_sv)
        .count();
    if rank < 5 {
        return Err(AnthropometryError::RankDeficient { rank, needed: 5 });
    }
    let x = svd.solve(&b, 0.0).expect("U and V were computed");
    let residual = &a * &x - &b;
    let cost = 0.5 * residual.norm_squared();
    let lengths = check_positive(&[x[0], x[1], x[2], x[3], x[4]])?;
    Ok(LengthFit {
        lengths,
        rms: (residual.norm_squared() / rows as f64).sqrt(),
        cost_history: vec![cost],
    })
}

struct KeypointProblem<'a> {
    model: &'a KinematicModel,
    projection: &'a ProjectionMatrix,
    /// (posture, observed pixel, landmark slot)
    points: Vec<(nalgebra::SVector<f64, 10>, Vector2<f64>, usize)>,
}

impl KeypointProblem<'_> {
    fn lengths(&self, p: &DVector<f64>) -> [f64; 5] {
        [p[0], p[1], p[2], p[3], self.model.segment_lengths.hand]
    }
}

impl LeastSquaresProblem for KeypointProblem<'_> {
    fn residuals(&self, params: &DVector<f64>) -> Option<DVector<f64>> {
        let model = with_lengths(self.model, self.lengths(params));
        let mut r = DVector::zeros(2 * self.points.len());
        for (k, (q, pixel, slot)) in self.points.iter().enumerate() {
            let x: Vector3<f64> = model.landmark_positions(q)[*slot];
            let uv = project_in_front(self.projection, &x).ok()?;
            r.fixed_rows_mut::<2>(2 * k).copy_from(&(uv - pixel));
        }
        Some(r)
    }
}

/// Fits torso, shoulder, upper-arm and lower-arm lengths to keypoint pixels.
///
/// No keypoint lies beyond the wrist, so the hand length cannot be observed
/// and is carried over from `model`, which also supplies the starting guess.
pub fn fit_lengths_keypoints(
    trace: &CalibrationTrace,
    model: &KinematicModel,
    projection: &ProjectionMatrix,
) -> Result<LengthFit, AnthropometryError> {
    trace.check()?;
    let mut points = Vec::new();
    for (index, sample) in trace.samples.iter().enumerate() {
        let q = sample.state.expect("checked").q;
        let kp = sample
            .keypoints
            .as_ref()
            .ok_or(AnthropometryError::MissingKeypoints { index })?;
        let landmarks = model.landmark_positions(&q);
        for (slot, pixel) in kp.present() {
            if project_in_front(projection, &landmarks[slot]).is_err() {
                return Err(AnthropometryError::DegenerateProjection { index });
            }
            points.push((q, pixel, slot));
        }
    }
    let problem = KeypointProblem {
        model,
        projection,
        points,
    };

    // the four lengths act through the Jacobian; check identifiability first
    let l = model.segment_lengths;
    let initial = DVector::from_vec(vec![l.torso, l.shoulder, l.upper_arm, l.lower_arm]);
    let jac = problem
        .jacobian(&initial)
        .ok_or(AnthropometryError::DegenerateProjection { index: 0 })?;
    let sv = jac.singular_values();
    let max_sv = sv.max();
    let rank = sv.iter().filter(|s| **s > RANK_TOLERANCE * max_sv).count();
    if rank < 4 {
        return Err(AnthropometryError::RankDeficient { rank, needed: 4 });
    }

    let config = LmConfig {
        max_iterations: 100,
        gradient_tolerance: 1e-10,
        ..LmConfig::default()
    };
    let report = levenberg_marquardt(&problem, initial, &config)
        .ok_or(AnthropometryError::DegenerateProjection { index: 0 })?;
    let lengths = check_positive(&problem.lengths(&report.params))?;
    let n = 2 * problem.points.len();
    Ok(LengthFit {
        lengths,
        rms: (2.0 * report.cost / n as f64).sqrt(),
        cost_history: report.cost_history,
    })
}
