//! Sensor observations and the Gaussian likelihoods used to weight particles.
//!
//! All likelihoods are returned as log-densities, normalization constant
//! included. The robot term compares the stylus pose and twist predicted by
//! forward kinematics with the measured ones through a 12-entry residual
//! `[position, orientation, linear velocity, angular velocity]`; the
//! orientation slot is the rotation vector of `R_obs·R_pred⁻¹`. The keypoint
//! term compares projected landmarks with detected pixels, one isotropic 2D
//! Gaussian per present keypoint.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};

use crate::camera::{project, ProjectionMatrix};
use crate::kinematics::{
    landmarks_from_frames, twist_from_frames, ChainFrames, JointState, JointVector, KinematicModel, Pose, Twist,
    KEYPOINT_IDS,
};

/// Keypoints with a detector confidence below this are treated as absent.
pub const MIN_CONFIDENCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotObservation {
    pub t: f64,
    pub pose: Pose,
    pub twist: Twist,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointObservation {
    pub t: f64,
    /// BODY-25 id → detection.
    pub keypoints: BTreeMap<u8, Keypoint>,
}

impl KeypointObservation {
    pub fn new(t: f64) -> Self {
        Self {
            t,
            keypoints: BTreeMap::new(),
        }
    }

    /// Detections usable for weighting, as (landmark slot, pixel).
    pub fn present(&self) -> impl Iterator<Item = (usize, Vector2<f64>)> + '_ {
        self.keypoints.iter().filter_map(|(id, kp)| {
            if kp.confidence < MIN_CONFIDENCE {
                return None;
            }
            landmark_slot(*id).map(|slot| (slot, kp.pixel))
        })
    }
}

/// Position of a BODY-25 id in [`KEYPOINT_IDS`].
pub fn landmark_slot(id: u8) -> Option<usize> {
    KEYPOINT_IDS.iter().position(|k| *k == id)
}

/// Noise model, stored as standard deviations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Stylus residual std-devs: position (m) ×3, orientation (rad) ×3,
    /// linear velocity (m/s) ×3, angular velocity (rad/s) ×3.
    pub sigma_k: [f64; 12],
    /// Isotropic pixel std-dev per keypoint, in [`KEYPOINT_IDS`] order.
    pub sigma_p: [f64; 5],
    /// Process-noise std-devs per joint, in degrees per second.
    pub sigma_v_deg: [f64; 10],
}

impl NoiseConfig {
    /// Builds the config from diagonal covariances (variances).
    pub fn from_variances(var_k: [f64; 12], var_p: [f64; 5], sigma_v_deg: [f64; 10]) -> Self {
        Self {
            sigma_k: var_k.map(f64::sqrt),
            sigma_p: var_p.map(f64::sqrt),
            sigma_v_deg,
        }
    }

    /// The covariance diagonals tuned on human-subject data, read as
    /// variances (process noise read as a per-joint std-dev in deg/s).
    pub fn reference() -> Self {
        let var_k = [
            0.01, 0.01, 0.01, 0.01, 0.01, 0.05, 0.1, 0.1, 0.1, 10.0, 10.0, 10.0,
        ]
        .map(|v| 0.01 * v);
        let var_p = [3.0; 5].map(|v| 0.01 * v);
        Self::from_variances(var_k, var_p, [2.0, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0])
    }

    pub fn sigma_v(&self) -> JointVector {
        JointVector::from_iterator(self.sigma_v_deg.iter().map(|d| d.to_radians()))
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self
            .sigma_k
            .iter()
            .chain(&self.sigma_p)
            .chain(&self.sigma_v_deg)
            .all(|s| *s > 0.0 && s.is_finite());
        if ok {
            Ok(())
        } else {
            Err("all noise standard deviations must be positive and finite".into())
        }
    }

    /// `-½·log det(2πΣ_K)`.
    pub fn robot_log_normalizer(&self) -> f64 {
        -0.5 * self
            .sigma_k
            .iter()
            .map(|s| (2.0 * PI * s * s).ln())
            .sum::<f64>()
    }

    /// `-log(2π σ²)` for one 2D keypoint.
    pub fn keypoint_log_normalizer(&self, slot: usize) -> f64 {
        let s = self.sigma_p[slot];
        -(2.0 * PI * s * s).ln()
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::reference()
    }
}

/// 12-entry residual `observed − predicted`.
pub fn robot_residual(pred_pose: &Pose, pred_twist: &Twist, obs: &RobotObservation) -> [f64; 12] {
    let dp = obs.pose.position - pred_pose.position;
    let dr = (obs.pose.orientation * pred_pose.orientation.inverse()).scaled_axis();
    let dv = obs.twist.linear - pred_twist.linear;
    let dw = obs.twist.angular - pred_twist.angular;
    let mut r = [0.0; 12];
    for (k, v) in [dp, dr, dv, dw].iter().enumerate() {
        r[3 * k..3 * k + 3].copy_from_slice(v.as_slice());
    }
    r
}

fn robot_term_from_residual(r: &[f64; 12], noise: &NoiseConfig) -> f64 {
    let maha: f64 = r
        .iter()
        .zip(&noise.sigma_k)
        .map(|(ri, s)| (ri / s).powi(2))
        .sum();
    noise.robot_log_normalizer() - 0.5 * maha
}

/// Robot-only log-likelihood with diagonal covariance `diag(sigma_k²)`.
pub fn log_likelihood_robot(
    model: &KinematicModel,
    state: &JointState,
    obs: &RobotObservation,
    noise: &NoiseConfig,
) -> f64 {
    let (pose, twist) = model.forward_kinematics(state);
    robot_term_from_residual(&robot_residual(&pose, &twist, obs), noise)
}

fn keypoint_term(
    landmarks: &[Vector3<f64>; 5],
    projection: &ProjectionMatrix,
    obs: &KeypointObservation,
    noise: &NoiseConfig,
) -> f64 {
    let mut total = 0.0;
    for (slot, pixel) in obs.present() {
        let Ok(uv) = project(projection, &landmarks[slot]) else {
            return f64::NEG_INFINITY;
        };
        let s2 = noise.sigma_p[slot].powi(2);
        total += noise.keypoint_log_normalizer(slot) - 0.5 * (uv - pixel).norm_squared() / s2;
    }
    total
}

/// Keypoint-only log-likelihood; absent keypoints contribute nothing.
/// A landmark on the camera plane makes the posture impossible (`-∞`).
pub fn log_likelihood_keypoints(
    model: &KinematicModel,
    projection: &ProjectionMatrix,
    q: &JointVector,
    obs: &KeypointObservation,
    noise: &NoiseConfig,
) -> f64 {
    let landmarks = model.landmark_positions(q);
    keypoint_term(&landmarks, projection, obs, noise)
}

/// Sum of whichever of the two likelihoods has an observation.
pub fn log_likelihood_fused(
    model: &KinematicModel,
    projection: &ProjectionMatrix,
    state: &JointState,
    robot_obs: Option<&RobotObservation>,
    kp_obs: Option<&KeypointObservation>,
    noise: &NoiseConfig,
) -> f64 {
    let frames = model.frames(&state.q);
    log_likelihood_from_frames(model, &frames, state, projection, robot_obs, kp_obs, noise)
}

/// Shared evaluation path once the chain has been composed for a particle.
pub(crate) fn log_likelihood_from_frames(
    model: &KinematicModel,
    frames: &ChainFrames,
    state: &JointState,
    projection: &ProjectionMatrix,
    robot_obs: Option<&RobotObservation>,
    kp_obs: Option<&KeypointObservation>,
    noise: &NoiseConfig,
) -> f64 {
    let mut total = 0.0;
    if let Some(obs) = robot_obs {
        let pose = Pose::from_isometry(&frames.stylus);
        let twist = twist_from_frames(frames, &state.qdot);
        total += robot_term_from_residual(&robot_residual(&pose, &twist, obs), noise);
    }
    if let Some(obs) = kp_obs {
        let landmarks = landmarks_from_frames(frames, &model.segment_lengths);
        total += keypoint_term(&landmarks, projection, obs, noise);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use nalgebra::UnitQuaternion;

    fn setup() -> (KinematicModel, CameraModel, NoiseConfig, JointState) {
        let model = KinematicModel::default();
        let camera = CameraModel::default();
        let mut q = JointVector::zeros();
        q[4] = 0.6;
        q[6] = 1.2;
        q[7] = 0.4;
        let mut qdot = JointVector::zeros();
        qdot[4] = 0.2;
        qdot[6] = -0.3;
        (model, camera, NoiseConfig::reference(), JointState { q, qdot })
    }

    fn exact_robot(model: &KinematicModel, state: &JointState) -> RobotObservation {
        let (pose, twist) = model.forward_kinematics(state);
        RobotObservation { t: 0.0, pose, twist }
    }

    fn exact_keypoints(model: &KinematicModel, camera: &CameraModel, q: &JointVector) -> KeypointObservation {
        let mut obs = KeypointObservation::new(0.0);
        for (slot, x) in model.landmark_positions(q).iter().enumerate() {
            obs.keypoints.insert(
                KEYPOINT_IDS[slot],
                Keypoint {
                    pixel: camera.project(x).unwrap(),
                    confidence: 1.0,
                },
            );
        }
        obs
    }

    #[test]
    fn zero_residual_robot_is_normalizer() {
        let (model, _, noise, state) = setup();
        let obs = exact_robot(&model, &state);
        let ll = log_likelihood_robot(&model, &state, &obs, &noise);
        assert!((ll - noise.robot_log_normalizer()).abs() < 1e-9);
    }

    #[test]
    fn one_sigma_offsets_cost_one_half() {
        let (model, camera, noise, state) = setup();
        let base = noise.robot_log_normalizer();
        for i in [0usize, 4, 8, 11] {
            let mut obs = exact_robot(&model, &state);
            let s = noise.sigma_k[i];
            match i / 3 {
                0 => obs.pose.position[i % 3] += s,
                1 => {
                    let mut axis = Vector3::zeros();
                    axis[i % 3] = s;
                    obs.pose.orientation = UnitQuaternion::from_scaled_axis(axis) * obs.pose.orientation;
                }
                2 => obs.twist.linear[i % 3] += s,
                _ => obs.twist.angular[i % 3] += s,
            }
            let ll = log_likelihood_robot(&model, &state, &obs, &noise);
            assert!((ll - (base - 0.5)).abs() < 1e-9, "slot {i}: {ll} vs {}", base - 0.5);
        }

        let mut kp = exact_keypoints(&model, &camera, &state.q);
        let all = log_likelihood_keypoints(&model, &camera.projection, &state.q, &kp, &noise);
        let expected: f64 = (0..5).map(|s| noise.keypoint_log_normalizer(s)).sum();
        assert!((all - expected).abs() < 1e-9);
        kp.keypoints.get_mut(&3).unwrap().pixel.x += noise.sigma_p[2];
        let ll = log_likelihood_keypoints(&model, &camera.projection, &state.q, &kp, &noise);
        assert!((ll - (expected - 0.5)).abs() < 1e-9);
    }

    #[test]
    fn empty_keypoints_contribute_nothing() {
        let (model, camera, noise, state) = setup();
        let obs = KeypointObservation::new(0.0);
        assert_eq!(
            log_likelihood_keypoints(&model, &camera.projection, &state.q, &obs, &noise),
            0.0
        );
    }

    #[test]
    fn low_confidence_is_absent() {
        let (model, camera, noise, state) = setup();
        let mut obs = exact_keypoints(&model, &camera, &state.q);
        let full = log_likelihood_keypoints(&model, &camera.projection, &state.q, &obs, &noise);
        let wrist = obs.keypoints.get_mut(&4).unwrap();
        wrist.confidence = 0.0;
        wrist.pixel.x += 100.0;
        let dropped = log_likelihood_keypoints(&model, &camera.projection, &state.q, &obs, &noise);
        assert!((full - dropped - noise.keypoint_log_normalizer(3)).abs() < 1e-9);
    }

    #[test]
    fn fused_degenerates_to_single_sensors() {
        let (model, camera, noise, state) = setup();
        let robot = exact_robot(&model, &state);
        let kp = exact_keypoints(&model, &camera, &state.q);
        let p = &camera.projection;
        let r = log_likelihood_robot(&model, &state, &robot, &noise);
        let k = log_likelihood_keypoints(&model, p, &state.q, &kp, &noise);
        assert_eq!(
            log_likelihood_fused(&model, p, &state, Some(&robot), None, &noise),
            r
        );
        assert_eq!(
            log_likelihood_fused(&model, p, &state, None, Some(&kp), &noise),
            k
        );
        let both = log_likelihood_fused(&model, p, &state, Some(&robot), Some(&kp), &noise);
        assert_eq!(both, r + k);
    }

    #[test]
    fn reference_noise_values() {
        let n = NoiseConfig::reference();
        assert!((n.sigma_k[0] - 0.01).abs() < 1e-15);
        assert!((n.sigma_k[5] - 0.0005f64.sqrt()).abs() < 1e-15);
        assert!((n.sigma_k[9] - 0.1f64.sqrt()).abs() < 1e-15);
        assert!((n.sigma_p[0] - 0.03f64.sqrt()).abs() < 1e-15);
        assert_eq!(n.sigma_v_deg[3], 5.0);
    }
}
