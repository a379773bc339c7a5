//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's math: transforms are plain 4×4 matrices built from
//! Rodrigues' formula and densities are written out from the definition.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;

use posture_fusion::kinematics::{JointLimits, JointState, JointVector, KinematicModel, DOF};

pub fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

pub fn homogeneous(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    m
}

pub fn trans(x: f64, y: f64, z: f64) -> Matrix4<f64> {
    homogeneous(Matrix3::identity(), Vector3::new(x, y, z))
}

pub fn rot(axis: [f64; 3], angle: f64) -> Matrix4<f64> {
    homogeneous(rodrigues(Vector3::from(axis), angle), Vector3::zeros())
}

pub fn origin(m: &Matrix4<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 1>(0, 3).into()
}

/// Joint frames (after rotation) and the stylus frame, written out from the
/// joint table in the kinematics docs.
pub struct OracleChain {
    pub joints: Vec<Matrix4<f64>>,
    pub stylus: Matrix4<f64>,
    pub neck: Vector3<f64>,
    pub base: Vector3<f64>,
}

pub fn oracle_chain(model: &KinematicModel, q: &JointVector) -> OracleChain {
    let l = &model.segment_lengths;
    let base_r = model.base_pose.orientation.to_rotation_matrix().into_inner();
    let base = homogeneous(base_r, model.base_pose.position);
    let steps: [(Matrix4<f64>, [f64; 3]); DOF] = [
        (Matrix4::identity(), [0.0, 1.0, 0.0]),
        (Matrix4::identity(), [1.0, 0.0, 0.0]),
        (Matrix4::identity(), [0.0, 0.0, 1.0]),
        (trans(0.0, -l.shoulder, l.torso), [-1.0, 0.0, 0.0]),
        (Matrix4::identity(), [0.0, -1.0, 0.0]),
        (Matrix4::identity(), [0.0, 0.0, 1.0]),
        (trans(0.0, 0.0, -l.upper_arm), [0.0, -1.0, 0.0]),
        (trans(0.0, 0.0, -l.lower_arm), [0.0, 0.0, 1.0]),
        (Matrix4::identity(), [1.0, 0.0, 0.0]),
        (Matrix4::identity(), [0.0, -1.0, 0.0]),
    ];
    let mut m = base;
    let mut joints = Vec::with_capacity(DOF);
    for (j, (offset, axis)) in steps.iter().enumerate() {
        m = m * offset * rot(*axis, q[j]);
        joints.push(m);
    }
    let grasp = m * trans(0.0, 0.0, -l.hand);
    let hs = &model.hand_to_stylus;
    let stylus = grasp * homogeneous(hs.orientation.to_rotation_matrix().into_inner(), hs.position);
    let neck4 = joints[2] * Vector4::new(0.0, 0.0, l.torso, 1.0);
    OracleChain {
        stylus,
        neck: neck4.xyz(),
        base: origin(&base),
        joints,
    }
}

/// Landmarks in BODY-25 order 1, 2, 3, 4, 8.
pub fn oracle_landmarks(model: &KinematicModel, q: &JointVector) -> [Vector3<f64>; 5] {
    let c = oracle_chain(model, q);
    [c.neck, origin(&c.joints[3]), origin(&c.joints[6]), origin(&c.joints[7]), c.base]
}

pub fn random_q<R: Rng>(rng: &mut R, limits: &JointLimits) -> JointVector {
    JointVector::from_fn(|j, _| rng.random_range(limits.q_min[j]..=limits.q_max[j]))
}

pub fn random_state<R: Rng>(rng: &mut R, limits: &JointLimits) -> JointState {
    JointState {
        q: random_q(rng, limits),
        qdot: JointVector::from_fn(|_, _| rng.random_range(-1.0..1.0)),
    }
}

/// `log N(x; 0, Σ)` with a full covariance matrix, from the definition.
pub fn gaussian_logpdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let k = x.len() as f64;
    let det = cov.determinant();
    let inv = cov.clone().try_inverse().expect("covariance invertible");
    let maha = (x.transpose() * inv * x)[(0, 0)];
    -0.5 * (k * (2.0 * std::f64::consts::PI).ln() + det.ln() + maha)
}

/// Rotation vector of `R` (axis · angle) from the matrix logarithm, valid
/// away from π.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = w.norm() / 2.0;
    let angle = s.atan2((r.trace() - 1.0) / 2.0);
    if s < 1e-12 {
        return w / 2.0;
    }
    w * (angle / (2.0 * s))
}

/// Pinhole projection `K [R | t] X` written out directly.
pub fn oracle_project(p: &Matrix3x4<f64>, x: &Vector3<f64>) -> Vector2<f64> {
    let h = p * Vector4::new(x.x, x.y, x.z, 1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}
