//! Synthetic ground truth: joint-space task trajectories, sensor synthesis
//! and keypoint occlusion.
//!
//! Trajectories are built in joint space around a seated desk posture and
//! pushed through forward kinematics, so the generating posture is always
//! known exactly. The task motion direction is the minimum-norm joint
//! direction whose stylus velocity (through the Jacobian at the centre
//! posture) points along the requested world direction; small independent
//! sinusoids on every joint emulate the natural sway of a real operator.

use std::f64::consts::TAU;

use nalgebra::{SMatrix, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::camera::{project, CameraError, CameraModel};
use crate::kinematics::{JointState, JointVector, KinematicModel, DOF, KEYPOINT_IDS};
use crate::observation::{Keypoint, KeypointObservation, NoiseConfig, RobotObservation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory leaves the joint limits at t = {t:.3}s (joint {joint})")]
    LimitsViolated { t: f64, joint: usize },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid occlusion: {0}")]
    InvalidOcclusion(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// The four desk tasks: sweeping along X, along Y, tracing a circle, and
/// moving between two blocks at different heights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    LineX,
    LineY,
    Circle,
    RandomBlocks,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::LineX, TaskKind::LineY, TaskKind::Circle, TaskKind::RandomBlocks];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::LineX => "line_x",
            TaskKind::LineY => "line_y",
            TaskKind::Circle => "circle",
            TaskKind::RandomBlocks => "random_blocks",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line_x" | "a" => Ok(TaskKind::LineX),
            "line_y" | "b" => Ok(TaskKind::LineY),
            "circle" | "c" => Ok(TaskKind::Circle),
            "random_blocks" | "d" => Ok(TaskKind::RandomBlocks),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Seconds.
    pub duration: f64,
    /// Samples per second.
    pub rate: f64,
    /// Half-amplitude of the hand motion in meters.
    pub amplitude_m: f64,
    /// Amplitude of the per-joint sway in degrees.
    pub sway_deg: f64,
    /// Playback speed of the task motion; 1 is the nominal pace.
    pub tempo: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, duration: f64, rate: f64, seed: u64) -> Self {
        Self {
            kind,
            duration,
            rate,
            amplitude_m: 0.12,
            sway_deg: 4.0,
            tempo: 1.0,
            seed,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.rate > 0.0 && self.duration > 0.0) {
            return Err(SimError::InvalidTask("duration and rate must be positive".into()));
        }
        if self.n_samples() < 2 {
            return Err(SimError::InvalidTask("duration·rate must give at least 2 samples".into()));
        }
        if !(self.tempo > 0.0 && self.tempo.is_finite()) {
            return Err(SimError::InvalidTask("tempo must be positive".into()));
        }
        if !(self.amplitude_m >= 0.0 && self.sway_deg >= 0.0) {
            return Err(SimError::InvalidTask("amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

/// Seated desk posture the tasks move around, in degrees.
pub const CENTER_POSTURE_DEG: [f64; DOF] = [8.0, 0.0, 0.0, 15.0, 35.0, 10.0, 75.0, 40.0, 0.0, 0.0];

/// Joints recruited for the task motion (abduction, flexion, humeral
/// rotation, elbow).
const TASK_JOINTS: [usize; 4] = [3, 4, 5, 6];

#[derive(Debug, Clone, Copy)]
struct Sway {
    amplitude: f64,
    omega: f64,
    phase: f64,
}

#[derive(Debug, Clone, Copy)]
struct Via {
    t: f64,
    /// Task-space offset coefficients along (x, y, z) directions.
    offset: Vector3<f64>,
    pronation: f64,
    wrist_flexion: f64,
}

/// A smooth joint-space trajectory that can be evaluated at any time.
#[derive(Debug, Clone)]
pub struct TaskTrajectory {
    spec: TaskSpec,
    center: JointVector,
    /// Joint directions producing unit stylus velocity along world X, Y, Z.
    directions: [JointVector; 3],
    sway: Vec<Sway>,
    vias: Vec<Via>,
}

/// Minimum-norm direction over `TASK_JOINTS` that moves the stylus along
/// `target` at unit speed (first order).
fn task_direction(model: &KinematicModel, center: &JointVector, target: &Vector3<f64>) -> JointVector {
    let jac = model.jacobian(center);
    let mut sub = SMatrix::<f64, 3, 4>::zeros();
    for (c, &j) in TASK_JOINTS.iter().enumerate() {
        sub.set_column(c, &jac.fixed_view::<3, 1>(0, j));
    }
    let gram = sub * sub.transpose();
    let coeffs = sub.transpose() * gram.try_inverse().expect("arm Jacobian has full row rank") * target;
    let mut d = JointVector::zeros();
    for (c, &j) in TASK_JOINTS.iter().enumerate() {
        d[j] = coeffs[c];
    }
    d
}

fn smoothstep(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
}

impl TaskTrajectory {
    pub fn new(spec: TaskSpec, model: &KinematicModel) -> Result<Self, SimError> {
        spec.validate()?;
        let center = JointVector::from_iterator(CENTER_POSTURE_DEG.iter().map(|d| d.to_radians()));
        let directions = [Vector3::x(), Vector3::y(), Vector3::z()].map(|e| task_direction(model, &center, &e));
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sway = (0..DOF)
            .map(|j| {
                // torso sways less than the arm
                let scale = if j < 3 { 0.5 } else { 1.0 };
                Sway {
                    amplitude: spec.sway_deg.to_radians() * scale * rng.random_range(0.5..1.0),
                    omega: TAU * rng.random_range(0.03..0.15),
                    phase: rng.random_range(0.0..TAU),
                }
            })
            .collect();

        let mut vias = Vec::new();
        if spec.kind == TaskKind::RandomBlocks {
            let mut t = 0.0;
            let mut high = false;
            while t <= spec.duration * spec.tempo + 4.0 {
                let offset = if high {
                    Vector3::new(rng.random_range(-0.3..0.3), -0.6, 0.6)
                } else {
                    Vector3::new(rng.random_range(-0.3..0.3), 0.6, -0.4)
                };
                vias.push(Via {
                    t,
                    offset: offset + Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15)),
                    pronation: rng.random_range(-50f64..40.0).to_radians(),
                    wrist_flexion: rng.random_range(-25f64..25.0).to_radians(),
                });
                t += rng.random_range(1.8..3.0);
                high = !high;
            }
        }
        Ok(Self {
            spec,
            center,
            directions,
            sway,
            vias,
        })
    }

    /// Task-space offset coefficients (unit amplitude) and their rate.
    fn task_offset(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, f64, f64, f64, f64) {
        match self.spec.kind {
            TaskKind::LineX | TaskKind::LineY => {
                let w = TAU * 0.2;
                let axis = if self.spec.kind == TaskKind::LineX { Vector3::x() } else { Vector3::y() };
                (axis * (w * t).sin(), axis * (w * (w * t).cos()), 0.0, 0.0, 0.0, 0.0)
            }
            TaskKind::Circle => {
                let w = TAU * 0.15;
                let (s, c) = (w * t).sin_cos();
                (Vector3::new(c, s, 0.0), Vector3::new(-w * s, w * c, 0.0), 0.0, 0.0, 0.0, 0.0)
            }
            TaskKind::RandomBlocks => {
                let k = self.vias.partition_point(|v| v.t <= t).clamp(1, self.vias.len() - 1);
                let (a, b) = (&self.vias[k - 1], &self.vias[k]);
                let span = b.t - a.t;
                let (h, dh) = smoothstep((t - a.t) / span);
                let rate = dh / span;
                (
                    a.offset + (b.offset - a.offset) * h,
                    (b.offset - a.offset) * rate,
                    a.pronation + (b.pronation - a.pronation) * h,
                    (b.pronation - a.pronation) * rate,
                    a.wrist_flexion + (b.wrist_flexion - a.wrist_flexion) * h,
                    (b.wrist_flexion - a.wrist_flexion) * rate,
                )
            }
        }
    }

    /// Joint state at time `t` with its analytic velocity.
    pub fn eval(&self, t: f64) -> JointState {
        let tempo = self.spec.tempo;
        let mut state = self.eval_nominal(t * tempo);
        state.qdot *= tempo;
        state
    }

    fn eval_nominal(&self, t: f64) -> JointState {
        let (offset, rate, pron, pron_rate, flex, flex_rate) = self.task_offset(t);
        let a = self.spec.amplitude_m;
        let mut q = self.center;
        let mut qdot = JointVector::zeros();
        for k in 0..3 {
            q += self.directions[k] * (a * offset[k]);
            qdot += self.directions[k] * (a * rate[k]);
        }
        q[7] += pron;
        qdot[7] += pron_rate;
        q[8] += flex;
        qdot[8] += flex_rate;
        for (j, s) in self.sway.iter().enumerate() {
            let arg = s.omega * t + s.phase;
            q[j] += s.amplitude * arg.sin();
            qdot[j] += s.amplitude * s.omega * arg.cos();
        }
        JointState { q, qdot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub state: JointState,
}

#[derive(Debug, Clone)]
pub struct GroundTruthTrace {
    pub samples: Vec<TruthSample>,
    pub model: KinematicModel,
    pub camera: CameraModel,
}

/// Samples a task trajectory at `spec.rate`, rejecting it if any sample
/// leaves the joint limits.
pub fn generate_task(
    spec: &TaskSpec,
    model: &KinematicModel,
    camera: &CameraModel,
) -> Result<GroundTruthTrace, SimError> {
    let trajectory = TaskTrajectory::new(*spec, model)?;
    let limits = &model.joint_limits;
    let samples = (0..spec.n_samples())
        .map(|i| {
            let t = i as f64 / spec.rate;
            let state = trajectory.eval(t);
            if let Some(j) = (0..DOF).find(|&j| !(limits.q_min[j] <= state.q[j] && state.q[j] <= limits.q_max[j])) {
                return Err(SimError::LimitsViolated { t, joint: j + 1 });
            }
            Ok(TruthSample { t, state })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundTruthTrace {
        samples,
        model: model.clone(),
        camera: *camera,
    })
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    sigma * z
}

/// Noisy stylus and keypoint traces for a ground-truth trace. Keypoints
/// falling outside the image are omitted.
pub fn synthesize_sensors(
    gt: &GroundTruthTrace,
    noise: &NoiseConfig,
    camera: &CameraModel,
    seed: u64,
) -> Result<(Vec<RobotObservation>, Vec<KeypointObservation>), SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sk = &noise.sigma_k;
    let mut robot = Vec::with_capacity(gt.samples.len());
    let mut keypoints = Vec::with_capacity(gt.samples.len());
    for sample in &gt.samples {
        let (mut pose, mut twist) = gt.model.forward_kinematics(&sample.state);
        let mut draw3 = |offset: usize| {
            Vector3::new(
                gaussian(&mut rng, sk[offset]),
                gaussian(&mut rng, sk[offset + 1]),
                gaussian(&mut rng, sk[offset + 2]),
            )
        };
        pose.position += draw3(0);
        let rot = draw3(3);
        twist.linear += draw3(6);
        twist.angular += draw3(9);
        pose.orientation = UnitQuaternion::from_scaled_axis(rot) * pose.orientation;
        robot.push(RobotObservation {
            t: sample.t,
            pose,
            twist,
        });

        let mut obs = KeypointObservation::new(sample.t);
        for (slot, x) in gt.model.landmark_positions(&sample.state.q).iter().enumerate() {
            let uv = project(&camera.projection, x)?;
            let s = noise.sigma_p[slot];
            let noisy = uv + Vector2::new(gaussian(&mut rng, s), gaussian(&mut rng, s));
            if camera.intrinsics.contains(&noisy) {
                obs.keypoints.insert(
                    KEYPOINT_IDS[slot],
                    Keypoint {
                        pixel: noisy,
                        confidence: 1.0,
                    },
                );
            }
        }
        keypoints.push(obs);
    }
    Ok((robot, keypoints))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcclusionMode {
    /// Affected keypoints disappear.
    Dropout,
    /// Affected keypoints stay confident but are shifted by a fixed offset
    /// of this many pixels for the whole window.
    Displace { magnitude_px: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionSpec {
    pub mode: OcclusionMode,
    pub keypoint_ids: Vec<u8>,
    /// Closed time windows in seconds.
    pub windows: Vec<(f64, f64)>,
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn validate(&self, duration: f64) -> Result<(), SimError> {
        for &(a, b) in &self.windows {
            if !(0.0 <= a && a <= b && b <= duration) {
                return Err(SimError::InvalidOcclusion(format!(
                    "window [{a}, {b}] is not inside [0, {duration}]"
                )));
            }
        }
        if let Some(id) = self.keypoint_ids.iter().find(|id| !KEYPOINT_IDS.contains(id)) {
            return Err(SimError::InvalidOcclusion(format!("keypoint id {id} is not tracked")));
        }
        if let OcclusionMode::Displace { magnitude_px } = self.mode {
            if !(magnitude_px >= 0.0 && magnitude_px.is_finite()) {
                return Err(SimError::InvalidOcclusion("displacement must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Removes or displaces the affected keypoints inside the occlusion windows.
/// Timestamps and unaffected keypoints are left untouched.
pub fn apply_occlusion(trace: &[KeypointObservation], spec: &OcclusionSpec) -> Vec<KeypointObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // one persistent direction per (window, keypoint)
    let angles: Vec<Vec<f64>> = spec
        .windows
        .iter()
        .map(|_| spec.keypoint_ids.iter().map(|_| rng.random_range(0.0..TAU)).collect())
        .collect();
    trace
        .iter()
        .map(|obs| {
            let mut out = obs.clone();
            for (w, &(start, end)) in spec.windows.iter().enumerate() {
                if !(start <= obs.t && obs.t <= end) {
                    continue;
                }
                for (k, id) in spec.keypoint_ids.iter().enumerate() {
                    match spec.mode {
                        OcclusionMode::Dropout => {
                            out.keypoints.remove(id);
                        }
                        OcclusionMode::Displace { magnitude_px } => {
                            if let Some(kp) = out.keypoints.get_mut(id) {
                                let (s, c) = angles[w][k].sin_cos();
                                kp.pixel += Vector2::new(c, s) * magnitude_px;
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}
