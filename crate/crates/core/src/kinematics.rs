//! Seated 10-DOF upper-body chain: forward kinematics to the stylus grasp
//! point and to the tracked anatomical landmarks, the constant-velocity
//! motion model, and posture validity.
//!
//! # Frame convention
//!
//! The base frame sits at the mid-hip with +X pointing forward (the direction
//! the person faces), +Y to the person's left and +Z up. At the zero posture
//! the torso is vertical, the right arm hangs down at the side and the palm
//! faces the body. Each joint is a revolute joint placed at `offset` (in the
//! parent frame) rotating about `axis`:
//!
//! | # | joint                     | offset in parent frame  | axis |
//! |---|---------------------------|-------------------------|------|
//! | 1 | torso flexion             | 0                       | +Y   |
//! | 2 | torso lateral bend        | 0                       | +X   |
//! | 3 | torso axial rotation      | 0                       | +Z   |
//! | 4 | shoulder abduction        | (0, -shoulder, torso)   | -X   |
//! | 5 | shoulder flexion          | 0                       | -Y   |
//! | 6 | humeral rotation          | 0                       | +Z   |
//! | 7 | elbow flexion             | (0, 0, -upper_arm)      | -Y   |
//! | 8 | forearm pronation         | (0, 0, -lower_arm)      | +Z   |
//! | 9 | wrist flexion             | 0                       | +X   |
//! |10 | wrist deviation           | 0                       | -Y   |
//!
//! The grasp point lies at (0, 0, -hand) in the last joint frame and the
//! stylus frame is that grasp frame composed with `hand_to_stylus`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Isometry3, SVector, Translation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Number of joints in the chain.
pub const DOF: usize = 10;

/// A vector with one entry per joint.
pub type JointVector = SVector<f64, DOF>;

/// BODY-25 keypoint ids tracked by the model, in the order returned by
/// [`KinematicModel::landmark_positions`].
pub const KEYPOINT_IDS: [u8; 5] = [1, 2, 3, 4, 8];

/// Human-readable joint names in chain order.
pub const JOINT_NAMES: [&str; DOF] = [
    "torso_flexion",
    "torso_lateral_bend",
    "torso_rotation",
    "shoulder_abduction",
    "shoulder_flexion",
    "humeral_rotation",
    "elbow_flexion",
    "forearm_pronation",
    "wrist_flexion",
    "wrist_deviation",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("segment length `{name}` must be strictly positive, got {value}")]
    NonPositiveLength { name: &'static str, value: f64 },
    #[error("joint {joint}: lower limit {min} is not below upper limit {max}")]
    InvalidLimits { joint: usize, min: f64, max: f64 },
    #[error("joint state contains a non-finite entry")]
    NonFinite,
}

/// Joint angles (rad) and angular velocities (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub q: JointVector,
    pub qdot: JointVector,
}

impl JointState {
    pub fn new(q: JointVector, qdot: JointVector) -> Result<Self, KinematicsError> {
        if q.iter().chain(qdot.iter()).all(|v| v.is_finite()) {
            Ok(Self { q, qdot })
        } else {
            Err(KinematicsError::NonFinite)
        }
    }

    pub fn at_rest(q: JointVector) -> Self {
        Self {
            q,
            qdot: JointVector::zeros(),
        }
    }

    pub fn zero() -> Self {
        Self::at_rest(JointVector::zeros())
    }
}

/// Anthropometric segment lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentLengths {
    pub torso: f64,
    pub shoulder: f64,
    pub upper_arm: f64,
    pub lower_arm: f64,
    pub hand: f64,
}

impl SegmentLengths {
    pub fn new(
        torso: f64,
        shoulder: f64,
        upper_arm: f64,
        lower_arm: f64,
        hand: f64,
    ) -> Result<Self, KinematicsError> {
        let lengths = Self {
            torso,
            shoulder,
            upper_arm,
            lower_arm,
            hand,
        };
        lengths.validate()?;
        Ok(lengths)
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        const NAMES: [&str; 5] = ["torso", "shoulder", "upper_arm", "lower_arm", "hand"];
        for (name, value) in NAMES.iter().zip(self.to_array()) {
            if !(value > 0.0 && value.is_finite()) {
                return Err(KinematicsError::NonPositiveLength { name, value });
            }
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.torso,
            self.shoulder,
            self.upper_arm,
            self.lower_arm,
            self.hand,
        ]
    }

    /// Builds lengths without validation; used by solvers that check later.
    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            torso: a[0],
            shoulder: a[1],
            upper_arm: a[2],
            lower_arm: a[3],
            hand: a[4],
        }
    }
}

impl Default for SegmentLengths {
    /// Adult 50th-percentile-ish proportions.
    fn default() -> Self {
        Self {
            torso: 0.50,
            shoulder: 0.19,
            upper_arm: 0.30,
            lower_arm: 0.26,
            hand: 0.08,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimits {
    pub q_min: JointVector,
    pub q_max: JointVector,
}

impl JointLimits {
    pub fn new(q_min: JointVector, q_max: JointVector) -> Result<Self, KinematicsError> {
        for j in 0..DOF {
            if !(q_min[j] < q_max[j]) {
                return Err(KinematicsError::InvalidLimits {
                    joint: j + 1,
                    min: q_min[j],
                    max: q_max[j],
                });
            }
        }
        Ok(Self { q_min, q_max })
    }

    pub fn from_degrees(min_deg: [f64; DOF], max_deg: [f64; DOF]) -> Result<Self, KinematicsError> {
        Self::new(
            JointVector::from_iterator(min_deg.iter().map(|d| d.to_radians())),
            JointVector::from_iterator(max_deg.iter().map(|d| d.to_radians())),
        )
    }

    pub fn contains(&self, q: &JointVector) -> bool {
        q.iter()
            .zip(self.q_min.iter().zip(self.q_max.iter()))
            .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    pub fn midpoint(&self) -> JointVector {
        (self.q_min + self.q_max) * 0.5
    }
}

impl Default for JointLimits {
    /// Seated range of motion from standard biomechanics tables.
    fn default() -> Self {
        Self::from_degrees(
            [-30.0, -35.0, -45.0, -30.0, -60.0, -90.0, 0.0, -90.0, -70.0, -30.0],
            [90.0, 35.0, 45.0, 150.0, 180.0, 90.0, 150.0, 90.0, 80.0, 20.0],
        )
        .expect("default limits are ordered")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn from_position(position: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct JointSpec {
    offset: Vector3<f64>,
    axis: Unit<Vector3<f64>>,
}

/// The seated subject: segment lengths, where the chair sits in the world,
/// how the stylus is held, and the range of motion.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub segment_lengths: SegmentLengths,
    pub base_pose: Pose,
    pub hand_to_stylus: Pose,
    pub joint_limits: JointLimits,
}

/// World-frame transforms of every joint frame (after its rotation).
#[derive(Debug, Clone)]
pub struct ChainFrames {
    pub base: Isometry3<f64>,
    pub joints: [Isometry3<f64>; DOF],
    /// World-frame rotation axis of each joint.
    pub axes: [Vector3<f64>; DOF],
    pub stylus: Isometry3<f64>,
}

impl KinematicModel {
    pub fn new(segment_lengths: SegmentLengths, base_pose: Pose) -> Self {
        Self {
            segment_lengths,
            base_pose,
            hand_to_stylus: Pose::identity(),
            joint_limits: JointLimits::default(),
        }
    }

    fn joint_specs(&self) -> [JointSpec; DOF] {
        let l = &self.segment_lengths;
        let x = Vector3::x_axis();
        let y = Vector3::y_axis();
        let z = Vector3::z_axis();
        let neg = |a: Unit<Vector3<f64>>| Unit::new_unchecked(-a.into_inner());
        let zero = Vector3::zeros();
        [
            JointSpec { offset: zero, axis: y },
            JointSpec { offset: zero, axis: x },
            JointSpec { offset: zero, axis: z },
            JointSpec {
                offset: Vector3::new(0.0, -l.shoulder, l.torso),
                axis: neg(x),
            },
            JointSpec { offset: zero, axis: neg(y) },
            JointSpec { offset: zero, axis: z },
            JointSpec {
                offset: Vector3::new(0.0, 0.0, -l.upper_arm),
                axis: neg(y),
            },
            JointSpec {
                offset: Vector3::new(0.0, 0.0, -l.lower_arm),
                axis: z,
            },
            JointSpec { offset: zero, axis: x },
            JointSpec { offset: zero, axis: neg(y) },
        ]
    }

    /// Composes the chain for posture `q`.
    pub fn frames(&self, q: &JointVector) -> ChainFrames {
        let base = self.base_pose.to_isometry();
        let specs = self.joint_specs();
        let mut joints = [Isometry3::identity(); DOF];
        let mut axes = [Vector3::zeros(); DOF];
        let mut current = base;
        for (j, spec) in specs.iter().enumerate() {
            current *= Translation3::from(spec.offset);
            axes[j] = current.rotation * spec.axis.into_inner();
            current *= UnitQuaternion::from_axis_angle(&spec.axis, q[j]);
            joints[j] = current;
        }
        let grasp = current * Translation3::new(0.0, 0.0, -self.segment_lengths.hand);
        let stylus = grasp * self.hand_to_stylus.to_isometry();
        ChainFrames {
            base,
            joints,
            axes,
            stylus,
        }
    }

    /// Stylus pose in the world frame and its twist `J(q)·q̇`.
    pub fn forward_kinematics(&self, state: &JointState) -> (Pose, Twist) {
        let frames = self.frames(&state.q);
        let pose = Pose::from_isometry(&frames.stylus);
        let twist = twist_from_frames(&frames, &state.qdot);
        (pose, twist)
    }

    pub fn stylus_pose(&self, q: &JointVector) -> Pose {
        Pose::from_isometry(&self.frames(q).stylus)
    }

    /// 6×10 geometric Jacobian of the stylus frame, linear rows first.
    pub fn jacobian(&self, q: &JointVector) -> nalgebra::SMatrix<f64, 6, DOF> {
        let frames = self.frames(q);
        let p_end = frames.stylus.translation.vector;
        let mut jac = nalgebra::SMatrix::<f64, 6, DOF>::zeros();
        for j in 0..DOF {
            let w = frames.axes[j];
            let lin = w.cross(&(p_end - frames.joints[j].translation.vector));
            jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, j).copy_from(&w);
        }
        jac
    }

    /// World positions of neck, right shoulder, right elbow, right wrist and
    /// mid-hip (BODY-25 ids 1, 2, 3, 4, 8).
    pub fn landmark_positions(&self, q: &JointVector) -> [Vector3<f64>; 5] {
        landmarks_from_frames(&self.frames(q), &self.segment_lengths)
    }
}

impl Default for KinematicModel {
    fn default() -> Self {
        Self::new(
            SegmentLengths::default(),
            Pose::from_position(Vector3::new(0.0, 0.0, 0.55)),
        )
    }
}

pub(crate) fn landmarks_from_frames(frames: &ChainFrames, l: &SegmentLengths) -> [Vector3<f64>; 5] {
    let torso = &frames.joints[2];
    let neck = torso * nalgebra::Point3::new(0.0, 0.0, l.torso);
    [
        neck.coords,
        frames.joints[3].translation.vector,
        frames.joints[6].translation.vector,
        frames.joints[7].translation.vector,
        frames.base.translation.vector,
    ]
}

pub(crate) fn twist_from_frames(frames: &ChainFrames, qdot: &JointVector) -> Twist {
    let p_end = frames.stylus.translation.vector;
    let mut twist = Twist::zero();
    for j in 0..DOF {
        if qdot[j] == 0.0 {
            continue;
        }
        let w = frames.axes[j];
        twist.angular += w * qdot[j];
        twist.linear += w.cross(&(p_end - frames.joints[j].translation.vector)) * qdot[j];
    }
    twist
}

/// Constant-velocity step: `q' = q + q̇·dt`, `q̇' = q̇ + q̈·dt`.
pub fn propagate(state: &JointState, qddot: &JointVector, dt: f64) -> JointState {
    debug_assert!(dt > 0.0);
    JointState {
        q: state.q + state.qdot * dt,
        qdot: state.qdot + qddot * dt,
    }
}

/// Draws joint accelerations from `N(0, diag(sigma²))`.
pub fn sample_acceleration<R: Rng + ?Sized>(sigma: &JointVector, rng: &mut R) -> JointVector {
    JointVector::from_fn(|j, _| {
        let z: f64 = rng.sample(StandardNormal);
        sigma[j] * z
    })
}

pub type ValidityFn = dyn Fn(&JointVector) -> f64 + Send + Sync;

/// Posture-validity multiplier applied to particle weights.
#[derive(Clone, Default)]
pub enum ValidityModel {
    /// 1 inside the joint box, 0 outside.
    #[default]
    BoxOnly,
    /// External scorer, e.g. a learned range-of-motion model.
    Custom(Arc<ValidityFn>),
}

impl fmt::Debug for ValidityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidityModel::BoxOnly => f.write_str("BoxOnly"),
            ValidityModel::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

pub fn check_validity(vm: &ValidityModel, limits: &JointLimits, q: &JointVector) -> f64 {
    match vm {
        ValidityModel::BoxOnly => {
            if limits.contains(q) {
                1.0
            } else {
                0.0
            }
        }
        ValidityModel::Custom(score) => {
            let v = score(q);
            if v.is_nan() {
                0.0
            } else {
                v.clamp(0.0, 1.0)
            }
        }
    }
}
