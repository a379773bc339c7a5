//! Pinhole camera: projection and extrinsic calibration from known 3D–2D
//! correspondences.
//!
//! Extrinsics map world points into the camera frame, `x_c = R·x_w + t`, with
//! the camera looking down its +Z axis, +X to the right of the image and +Y
//! down. The composed projection is `P = K·[R | t]`.

use nalgebra::{
    DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3,
    Vector4,
};
use thiserror::Error;

use crate::lsq::{levenberg_marquardt, LeastSquaresProblem, LmConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point projects onto the camera plane (w = {w:e})")]
    DegenerateProjection { w: f64 },
    #[error("degenerate calibration configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>) -> bool {
        0.0 <= uv.x && uv.x < self.width as f64 && 0.0 <= uv.y && uv.y < self.height as f64
    }
}

impl Default for CameraIntrinsics {
    /// A VGA webcam.
    fn default() -> Self {
        Self {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// World → camera rotation.
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, image "up" roughly along `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // rows are the camera axes expressed in world coordinates
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn to_world(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn compose(intrinsics: &CameraIntrinsics, extrinsics: &CameraExtrinsics) -> Self {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(extrinsics.rotation.to_rotation_matrix().matrix());
        rt.set_column(3, &extrinsics.translation);
        Self(intrinsics.matrix() * rt)
    }

    /// Homogeneous image point of `x` (not dehomogenized).
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * Vector4::new(x.x, x.y, x.z, 1.0)
    }
}

/// Dehomogenized projection of a world point into pixels.
pub fn project(p: &ProjectionMatrix, x: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
    let h = p.apply(x);
    if h.z.abs() < 1e-12 {
        return Err(CameraError::DegenerateProjection { w: h.z });
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

/// Like [`project`] but also rejects points behind the camera.
pub fn project_in_front(p: &ProjectionMatrix, x: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
    let h = p.apply(x);
    if h.z < 1e-12 {
        return Err(CameraError::DegenerateProjection { w: h.z });
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub projection: ProjectionMatrix,
}

impl CameraModel {
    pub fn new(intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
            projection: ProjectionMatrix::compose(&intrinsics, &extrinsics),
        }
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        project(&self.projection, x)
    }
}

impl Default for CameraModel {
    /// Desk-side camera in front-left of the default seated subject.
    fn default() -> Self {
        Self::new(
            CameraIntrinsics::default(),
            CameraExtrinsics::look_at(
                Vector3::new(1.7, 1.0, 1.25),
                Vector3::new(0.25, -0.15, 0.85),
                Vector3::z(),
            ),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub world: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub extrinsics: CameraExtrinsics,
    /// Root-mean-square reprojection error in pixels.
    pub rms_px: f64,
    pub max_px: f64,
    /// False when the refinement hit its iteration budget.
    pub converged: bool,
}

pub const MIN_CORRESPONDENCES: usize = 6;

/// Recovers camera extrinsics from known world points and their pixels.
///
/// Linear DLT on Hartley-normalized coordinates seeds the pose; the rotation
/// is projected onto SO(3) and then the full pose is refined with
/// Levenberg–Marquardt on pixel residuals.
pub fn calibrate_extrinsics(
    intrinsics: &CameraIntrinsics,
    correspondences: &[Correspondence],
) -> Result<Calibration, CameraError> {
    intrinsics.validate()?;
    let n = correspondences.len();
    if n < MIN_CORRESPONDENCES {
        return Err(CameraError::DegenerateConfiguration(format!(
            "need at least {MIN_CORRESPONDENCES} correspondences, got {n}"
        )));
    }
    let initial = dlt_extrinsics(intrinsics, correspondences)?;
    refine(intrinsics, correspondences, initial)
}

fn normalization_3d(points: &[Vector3<f64>]) -> Matrix4<f64> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        3f64.sqrt() / mean_dist
    } else {
        1.0
    };
    let mut t = Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-centroid * s));
    t
}

fn normalization_2d(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        2f64.sqrt() / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0)
}

fn dlt_extrinsics(
    intrinsics: &CameraIntrinsics,
    correspondences: &[Correspondence],
) -> Result<CameraExtrinsics, CameraError> {
    let world: Vec<_> = correspondences.iter().map(|c| c.world).collect();
    let pixels: Vec<_> = correspondences.iter().map(|c| c.pixel).collect();
    let t3 = normalization_3d(&world);
    let t2 = normalization_2d(&pixels);

    let n = correspondences.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (x, uv)) in world.iter().zip(&pixels).enumerate() {
        let xh = t3 * Vector4::new(x.x, x.y, x.z, 1.0);
        let uh = t2 * Vector3::new(uv.x, uv.y, 1.0);
        let (u, v) = (uh.x / uh.z, uh.y / uh.z);
        for k in 0..4 {
            a[(2 * i, k)] = xh[k];
            a[(2 * i, 8 + k)] = -u * xh[k];
            a[(2 * i + 1, 4 + k)] = xh[k];
            a[(2 * i + 1, 8 + k)] = -v * xh[k];
        }
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sv = &svd.singular_values;
    let largest = sv[order[order.len() - 1]];
    if !(largest > 0.0) || sv[order[1]] / largest < 1e-9 {
        return Err(CameraError::DegenerateConfiguration(
            "DLT design matrix is rank deficient (coplanar or collinear points?)".into(),
        ));
    }
    let h = v_t.row(order[0]);
    let p_norm = Matrix3x4::from_row_slice(h.transpose().as_slice());
    let t2_inv = t2
        .try_inverse()
        .ok_or_else(|| CameraError::DegenerateConfiguration("pixel normalization".into()))?;
    let p = t2_inv * p_norm * t3;

    let k_inv = intrinsics
        .matrix()
        .try_inverse()
        .expect("validated intrinsics are invertible");
    let mut m = k_inv * p;
    let mut b: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    if b.determinant() < 0.0 {
        m = -m;
        b = -b;
    }
    let svd_b = b.svd(true, true);
    let scale = svd_b.singular_values.mean();
    if !(scale > 0.0) {
        return Err(CameraError::DegenerateConfiguration(
            "DLT solution has a singular rotation block".into(),
        ));
    }
    let r = nearest_rotation(&b);
    let t: Vector3<f64> = m.column(3) / scale;
    Ok(CameraExtrinsics {
        rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        translation: t,
    })
}

/// Closest proper rotation to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

struct ReprojectionProblem<'a> {
    intrinsics: &'a CameraIntrinsics,
    correspondences: &'a [Correspondence],
    base: CameraExtrinsics,
}

impl ReprojectionProblem<'_> {
    fn extrinsics(&self, p: &DVector<f64>) -> CameraExtrinsics {
        let delta = UnitQuaternion::from_scaled_axis(Vector3::new(p[0], p[1], p[2]));
        CameraExtrinsics {
            rotation: delta * self.base.rotation,
            translation: self.base.translation + Vector3::new(p[3], p[4], p[5]),
        }
    }
}

impl LeastSquaresProblem for ReprojectionProblem<'_> {
    fn residuals(&self, p: &DVector<f64>) -> Option<DVector<f64>> {
        let proj = ProjectionMatrix::compose(self.intrinsics, &self.extrinsics(p));
        let mut r = DVector::zeros(2 * self.correspondences.len());
        for (i, c) in self.correspondences.iter().enumerate() {
            let uv = project(&proj, &c.world).ok()?;
            r[2 * i] = uv.x - c.pixel.x;
            r[2 * i + 1] = uv.y - c.pixel.y;
        }
        Some(r)
    }
}

fn refine(
    intrinsics: &CameraIntrinsics,
    correspondences: &[Correspondence],
    initial: CameraExtrinsics,
) -> Result<Calibration, CameraError> {
    let problem = ReprojectionProblem {
        intrinsics,
        correspondences,
        base: initial,
    };
    let config = LmConfig {
        max_iterations: 200,
        gradient_tolerance: 1e-12,
        ..LmConfig::default()
    };
    let report = levenberg_marquardt(&problem, DVector::zeros(6), &config).ok_or_else(|| {
        CameraError::DegenerateConfiguration("initial pose puts a point on the camera plane".into())
    })?;
    let extrinsics = problem.extrinsics(&report.params);
    let r = problem
        .residuals(&report.params)
        .expect("accepted parameters are in the domain");
    let n = correspondences.len();
    let max_px = (0..n)
        .map(|i| (r[2 * i].powi(2) + r[2 * i + 1].powi(2)).sqrt())
        .fold(0.0, f64::max);
    Ok(Calibration {
        extrinsics,
        rms_px: (r.norm_squared() / n as f64).sqrt(),
        max_px,
        converged: report.converged,
    })
}
