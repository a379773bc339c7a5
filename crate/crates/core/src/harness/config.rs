use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{io_error, HarnessError};
use crate::camera::{CameraExtrinsics, CameraIntrinsics, CameraModel};
use crate::ergonomics::{Load, RulaContext};
use crate::filter::{FilterConfig, FilterMode};
use crate::kinematics::{JointLimits, KinematicModel, Pose, SegmentLengths, DOF};
use crate::observation::NoiseConfig;
use crate::sim::{OcclusionMode, OcclusionSpec, TaskKind, TaskSpec};

/// Environment variable naming the config used when `--config` is absent.
pub const CONFIG_ENV: &str = "POSTURE_CONFIG";

/// One experiment session. Every block has defaults, so an empty file is a
/// valid config describing the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub seed: u64,
    /// Number of seeds (`seed`, `seed + 1`, ...) run per task.
    #[serde(default = "one")]
    pub repetitions: u64,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub camera: CameraBlock,
    #[serde(default)]
    pub noise: NoiseBlock,
    #[serde(default)]
    pub filter: FilterBlock,
    #[serde(default)]
    pub task: TaskBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occlusion: Option<OcclusionBlock>,
    #[serde(default)]
    pub rula: RulaBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

fn one() -> u64 {
    1
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repetitions: 1,
            model: ModelBlock::default(),
            camera: CameraBlock::default(),
            noise: NoiseBlock::default(),
            filter: FilterBlock::default(),
            task: TaskBlock::default(),
            occlusion: None,
            rula: RulaBlock::default(),
            output: OutputBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub torso_m: f64,
    pub shoulder_m: f64,
    pub upper_arm_m: f64,
    pub lower_arm_m: f64,
    pub hand_m: f64,
    /// Chair / mid-hip frame in the world.
    pub base_position_m: [f64; 3],
    /// Roll, pitch, yaw of the base frame (extrinsic X, Y, Z).
    pub base_rpy_deg: [f64; 3],
    pub hand_to_stylus_position_m: [f64; 3],
    pub hand_to_stylus_rpy_deg: [f64; 3],
    pub q_min_deg: [f64; DOF],
    pub q_max_deg: [f64; DOF],
}

fn rpy_deg(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let (r, p, y) = q.euler_angles();
    [r.to_degrees(), p.to_degrees(), y.to_degrees()]
}

fn pose_from(position: [f64; 3], rpy: [f64; 3]) -> Pose {
    Pose {
        position: Vector3::from(position),
        orientation: UnitQuaternion::from_euler_angles(
            rpy[0].to_radians(),
            rpy[1].to_radians(),
            rpy[2].to_radians(),
        ),
    }
}

impl ModelBlock {
    pub fn from_model(model: &KinematicModel) -> Self {
        let l = &model.segment_lengths;
        let deg = |v: &crate::kinematics::JointVector| std::array::from_fn(|j| v[j].to_degrees());
        Self {
            torso_m: l.torso,
            shoulder_m: l.shoulder,
            upper_arm_m: l.upper_arm,
            lower_arm_m: l.lower_arm,
            hand_m: l.hand,
            base_position_m: model.base_pose.position.into(),
            base_rpy_deg: rpy_deg(&model.base_pose.orientation),
            hand_to_stylus_position_m: model.hand_to_stylus.position.into(),
            hand_to_stylus_rpy_deg: rpy_deg(&model.hand_to_stylus.orientation),
            q_min_deg: deg(&model.joint_limits.q_min),
            q_max_deg: deg(&model.joint_limits.q_max),
        }
    }

    pub fn to_model(&self) -> Result<KinematicModel, HarnessError> {
        let lengths = SegmentLengths::new(self.torso_m, self.shoulder_m, self.upper_arm_m, self.lower_arm_m, self.hand_m)
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        let limits = JointLimits::from_degrees(self.q_min_deg, self.q_max_deg)
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        Ok(KinematicModel {
            segment_lengths: lengths,
            base_pose: pose_from(self.base_position_m, self.base_rpy_deg),
            hand_to_stylus: pose_from(self.hand_to_stylus_position_m, self.hand_to_stylus_rpy_deg),
            joint_limits: limits,
        })
    }
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self::from_model(&KinematicModel::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookAt {
    pub eye_m: [f64; 3],
    pub target_m: [f64; 3],
    /// World direction that appears upward in the image.
    pub up: [f64; 3],
}

/// World-to-camera transform `x_c = R·x_w + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitExtrinsics {
    /// Rows of R.
    pub rotation: [[f64; 3]; 3],
    pub translation_m: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraBlock {
    pub fx_px: f64,
    pub fy_px: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    pub width_px: u32,
    pub height_px: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub look_at: Option<LookAt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extrinsics: Option<ExplicitExtrinsics>,
}

impl Default for CameraBlock {
    fn default() -> Self {
        let i = CameraIntrinsics::default();
        Self {
            fx_px: i.fx,
            fy_px: i.fy,
            cx_px: i.cx,
            cy_px: i.cy,
            width_px: i.width,
            height_px: i.height,
            look_at: Some(LookAt {
                eye_m: [1.7, 1.0, 1.25],
                target_m: [0.25, -0.15, 0.85],
                up: [0.0, 0.0, 1.0],
            }),
            extrinsics: None,
        }
    }
}

impl CameraBlock {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, HarnessError> {
        let i = CameraIntrinsics {
            fx: self.fx_px,
            fy: self.fy_px,
            cx: self.cx_px,
            cy: self.cy_px,
            width: self.width_px,
            height: self.height_px,
        };
        i.validate().map_err(|e| HarnessError::Config(format!("camera: {e}")))?;
        Ok(i)
    }

    pub fn to_camera(&self) -> Result<CameraModel, HarnessError> {
        let intrinsics = self.intrinsics()?;
        let extrinsics = match (&self.look_at, &self.extrinsics) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Config(
                    "camera: give either look_at or extrinsics, not both".into(),
                ))
            }
            (None, None) => return Err(HarnessError::Config("camera: no pose given".into())),
            (Some(l), None) => {
                let eye = Vector3::from(l.eye_m);
                let forward = Vector3::from(l.target_m) - eye;
                let up = Vector3::from(l.up);
                if forward.norm() < 1e-9 || forward.cross(&up).norm() < 1e-9 * forward.norm() * up.norm().max(1.0) {
                    return Err(HarnessError::Config(
                        "camera: look_at needs distinct eye/target and an up vector not parallel to the view".into(),
                    ));
                }
                CameraExtrinsics::look_at(eye, Vector3::from(l.target_m), up)
            }
            (None, Some(e)) => {
                let m = Matrix3::from_fn(|r, c| e.rotation[r][c]);
                let orthonormal = (m.transpose() * m - Matrix3::identity()).amax() < 1e-6 && m.determinant() > 0.0;
                if !orthonormal {
                    return Err(HarnessError::Config("camera: extrinsics.rotation is not a rotation".into()));
                }
                CameraExtrinsics {
                    rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m)),
                    translation: Vector3::from(e.translation_m),
                }
            }
        };
        Ok(CameraModel::new(intrinsics, extrinsics))
    }

    /// Block describing `camera` with explicit extrinsics.
    pub fn from_camera(camera: &CameraModel) -> Self {
        let i = camera.intrinsics;
        let r = camera.extrinsics.rotation.to_rotation_matrix().into_inner();
        Self {
            fx_px: i.fx,
            fy_px: i.fy,
            cx_px: i.cx,
            cy_px: i.cy,
            width_px: i.width,
            height_px: i.height,
            look_at: None,
            extrinsics: Some(ExplicitExtrinsics {
                rotation: std::array::from_fn(|row| std::array::from_fn(|col| r[(row, col)])),
                translation_m: camera.extrinsics.translation.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseInterpretation {
    /// Entries are diagonal covariance entries (squared units).
    Variance,
    /// Entries are standard deviations.
    Std,
}

/// Sensor and process noise. The same values drive the simulated sensors
/// and the filter's likelihoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseBlock {
    /// How to read the robot and keypoint entries below.
    pub interpretation: NoiseInterpretation,
    pub position_m: [f64; 3],
    pub orientation_rad: [f64; 3],
    pub linear_velocity_m_s: [f64; 3],
    pub angular_velocity_rad_s: [f64; 3],
    pub keypoint_px: [f64; 5],
    /// Process-noise standard deviation per joint.
    pub process_std_deg_s: [f64; DOF],
}

impl Default for NoiseBlock {
    fn default() -> Self {
        let var = |v: f64| 0.01 * v;
        Self {
            interpretation: NoiseInterpretation::Variance,
            position_m: [var(0.01); 3],
            orientation_rad: [var(0.01), var(0.01), var(0.05)],
            linear_velocity_m_s: [var(0.1); 3],
            angular_velocity_rad_s: [var(10.0); 3],
            keypoint_px: [var(3.0); 5],
            process_std_deg_s: [2.0, 2.0, 2.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0],
        }
    }
}

impl NoiseBlock {
    pub fn to_noise(&self) -> Result<NoiseConfig, HarnessError> {
        let mut k = [0.0; 12];
        k[..3].copy_from_slice(&self.position_m);
        k[3..6].copy_from_slice(&self.orientation_rad);
        k[6..9].copy_from_slice(&self.linear_velocity_m_s);
        k[9..].copy_from_slice(&self.angular_velocity_rad_s);
        let noise = match self.interpretation {
            NoiseInterpretation::Variance => NoiseConfig::from_variances(k, self.keypoint_px, self.process_std_deg_s),
            NoiseInterpretation::Std => NoiseConfig {
                sigma_k: k,
                sigma_p: self.keypoint_px,
                sigma_v_deg: self.process_std_deg_s,
            },
        };
        noise.validate().map_err(|e| HarnessError::Config(format!("noise: {e}")))?;
        Ok(noise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterBlock {
    pub n_particles: usize,
    pub dt_s: f64,
    pub resample_threshold: f64,
    /// Modes compared by `run-experiment`.
    pub modes: Vec<String>,
}

impl Default for FilterBlock {
    fn default() -> Self {
        let d = FilterConfig::default();
        Self {
            n_particles: d.n_particles,
            dt_s: d.dt,
            resample_threshold: d.resample_threshold,
            modes: FilterMode::ALL.iter().map(|m| m.as_str().to_string()).collect(),
        }
    }
}

impl FilterBlock {
    pub fn modes(&self) -> Result<Vec<FilterMode>, HarnessError> {
        self.modes
            .iter()
            .map(|m| m.parse().map_err(|e| HarnessError::Config(format!("filter.modes: {e}"))))
            .collect()
    }

    pub fn to_config(&self, noise: NoiseConfig, mode: FilterMode, seed: u64) -> Result<FilterConfig, HarnessError> {
        let config = FilterConfig {
            n_particles: self.n_particles,
            noise,
            dt: self.dt_s,
            mode,
            resample_threshold: self.resample_threshold,
            seed,
        };
        config.validate().map_err(|e| HarnessError::Config(format!("filter: {e}")))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskBlock {
    /// Tasks run by `run-experiment`; `simulate` uses the first.
    pub kinds: Vec<String>,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub amplitude_m: f64,
    pub sway_deg: f64,
    pub tempo: f64,
}

impl Default for TaskBlock {
    fn default() -> Self {
        let d = TaskSpec::new(TaskKind::Circle, 60.0, 10.0, 0);
        Self {
            kinds: TaskKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            duration_s: d.duration,
            rate_hz: d.rate,
            amplitude_m: d.amplitude_m,
            sway_deg: d.sway_deg,
            tempo: d.tempo,
        }
    }
}

impl TaskBlock {
    pub fn kinds(&self) -> Result<Vec<TaskKind>, HarnessError> {
        self.kinds
            .iter()
            .map(|k| k.parse().map_err(|e| HarnessError::Config(format!("task.kinds: {e}"))))
            .collect()
    }

    pub fn spec(&self, kind: TaskKind, seed: u64) -> Result<TaskSpec, HarnessError> {
        let spec = TaskSpec {
            kind,
            duration: self.duration_s,
            rate: self.rate_hz,
            amplitude_m: self.amplitude_m,
            sway_deg: self.sway_deg,
            tempo: self.tempo,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionBlock {
    /// `dropout` or `displace`.
    pub mode: String,
    pub keypoints: Vec<u8>,
    /// Closed `[start, end]` windows.
    pub windows_s: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displacement_px: Option<f64>,
}

impl OcclusionBlock {
    /// Parses the compact command-line form
    /// `MODE:IDS:WINDOWS[:PIXELS]`, e.g. `dropout:3+4:12-30` or
    /// `displace:4:0-10,20-30:50`.
    pub fn parse(spec: &str) -> Result<Self, HarnessError> {
        let fail = |reason: &str| HarnessError::Occlusion {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let parts: Vec<&str> = spec.split(':').collect();
        let (mode, ids, windows, px) = match parts.as_slice() {
            ["dropout", ids, windows] => ("dropout", ids, windows, None),
            ["displace", ids, windows, px] => ("displace", ids, windows, Some(px)),
            ["displace", ..] => return Err(fail("displace needs a pixel magnitude: displace:IDS:WINDOWS:PIXELS")),
            ["dropout", ..] => return Err(fail("expected dropout:IDS:WINDOWS")),
            _ => return Err(fail("mode must be dropout or displace")),
        };
        let keypoints = ids
            .split('+')
            .map(|s| s.trim().parse::<u8>().map_err(|_| fail("keypoint ids must be integers joined by '+'")))
            .collect::<Result<Vec<_>, _>>()?;
        let windows_s = windows
            .split(',')
            .map(|w| {
                let (a, b) = w.split_once('-').ok_or_else(|| fail("windows look like START-END"))?;
                let a: f64 = a.trim().parse().map_err(|_| fail("window start is not a number"))?;
                let b: f64 = b.trim().parse().map_err(|_| fail("window end is not a number"))?;
                Ok([a, b])
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let displacement_px = px
            .map(|p| p.trim().parse::<f64>().map_err(|_| fail("pixel magnitude is not a number")))
            .transpose()?;
        Ok(Self {
            mode: mode.to_string(),
            keypoints,
            windows_s,
            displacement_px,
        })
    }

    pub fn to_spec(&self, seed: u64, duration: f64) -> Result<OcclusionSpec, HarnessError> {
        let mode = match (self.mode.as_str(), self.displacement_px) {
            ("dropout", None) => OcclusionMode::Dropout,
            ("displace", Some(magnitude_px)) => OcclusionMode::Displace { magnitude_px },
            ("dropout", Some(_)) => {
                return Err(HarnessError::Config("occlusion: dropout takes no displacement_px".into()))
            }
            ("displace", None) => return Err(HarnessError::Config("occlusion: displace needs displacement_px".into())),
            (other, _) => return Err(HarnessError::Config(format!("occlusion: unknown mode `{other}`"))),
        };
        let spec = OcclusionSpec {
            mode,
            keypoint_ids: self.keypoints.clone(),
            windows: self.windows_s.iter().map(|w| (w[0], w[1])).collect(),
            seed,
        };
        spec.validate(duration)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulaBlock {
    /// `light`, `moderate_intermittent`, `moderate_repeated` or `heavy`.
    pub load: String,
    pub muscle_use_static_or_repeated: bool,
    pub neck_twisted: bool,
    pub neck_side_bent: bool,
    pub trunk_twisted: bool,
    pub trunk_side_bent: bool,
    pub legs_supported: bool,
    pub trunk_from_torso: bool,
}

impl Default for RulaBlock {
    fn default() -> Self {
        let c = RulaContext::default();
        Self {
            load: "light".into(),
            muscle_use_static_or_repeated: c.muscle_use_static_or_repeated,
            neck_twisted: c.neck_twisted,
            neck_side_bent: c.neck_side_bent,
            trunk_twisted: c.trunk_twisted,
            trunk_side_bent: c.trunk_side_bent,
            legs_supported: c.legs_supported,
            trunk_from_torso: c.trunk_from_torso,
        }
    }
}

impl RulaBlock {
    pub fn to_context(&self) -> Result<RulaContext, HarnessError> {
        let load = match self.load.as_str() {
            "light" => Load::Light,
            "moderate_intermittent" => Load::ModerateIntermittent,
            "moderate_repeated" => Load::ModerateRepeated,
            "heavy" => Load::Heavy,
            other => return Err(HarnessError::Config(format!("rula.load: unknown load `{other}`"))),
        };
        Ok(RulaContext {
            load,
            muscle_use_static_or_repeated: self.muscle_use_static_or_repeated,
            neck_twisted: self.neck_twisted,
            neck_side_bent: self.neck_side_bent,
            trunk_twisted: self.trunk_twisted,
            trunk_side_bent: self.trunk_side_bent,
            legs_supported: self.legs_supported,
            trunk_from_torso: self.trunk_from_torso,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_toml()).map_err(io_error(path))
    }

    /// Resolves every block so errors surface at load time.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.to_model()?;
        self.camera.to_camera()?;
        let noise = self.noise.to_noise()?;
        for mode in self.filter.modes()? {
            self.filter.to_config(noise, mode, self.seed)?;
        }
        for kind in self.task.kinds()? {
            self.task.spec(kind, self.seed)?;
        }
        if let Some(o) = &self.occlusion {
            o.to_spec(self.seed, self.task.duration_s)?;
        }
        self.rula.to_context()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_reference_setup() {
        let c = SessionConfig::from_toml("").unwrap();
        assert_eq!(c, SessionConfig::default());
        assert_eq!(c.noise.to_noise().unwrap(), NoiseConfig::reference());
        let model = c.model.to_model().unwrap();
        let reference = KinematicModel::default();
        assert_eq!(model.segment_lengths, reference.segment_lengths);
        assert!((model.joint_limits.q_max - reference.joint_limits.q_max).amax() < 1e-12);
        let cam = c.camera.to_camera().unwrap();
        assert!((cam.projection.0 - CameraModel::default().projection.0).amax() < 1e-9);
    }

    #[test]
    fn round_trip() {
        let mut c = SessionConfig::default();
        c.seed = 17;
        c.occlusion = Some(OcclusionBlock::parse("displace:3+4:1.5-20,30-40:25").unwrap());
        c.camera = CameraBlock::from_camera(&CameraModel::default());
        let text = c.to_toml();
        let back = SessionConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(SessionConfig::from_toml("sede = 3").is_err());
        assert!(SessionConfig::from_toml("[filter]\nn_particles = 1\ndt_s = 0.1\nresample_threshold = 0.5\nmodes = [\"fused\"]").is_err());
    }

    #[test]
    fn occlusion_strings() {
        let o = OcclusionBlock::parse("dropout:3+4:12-30").unwrap();
        assert_eq!(o.keypoints, vec![3, 4]);
        assert_eq!(o.windows_s, vec![[12.0, 30.0]]);
        assert_eq!(o.displacement_px, None);
        let spec = o.to_spec(1, 60.0).unwrap();
        assert_eq!(spec.mode, OcclusionMode::Dropout);
        for bad in ["dropout:3", "blur:3:0-1", "displace:3:0-1", "dropout:x:0-1", "dropout:3:5"] {
            assert!(OcclusionBlock::parse(bad).is_err(), "{bad}");
        }
        // parses but names an untracked keypoint
        let o = OcclusionBlock::parse("dropout:7:0-1").unwrap();
        assert!(o.to_spec(0, 60.0).is_err());
    }

    #[test]
    fn camera_pose_must_be_unambiguous() {
        let mut c = CameraBlock::default();
        c.extrinsics = CameraBlock::from_camera(&CameraModel::default()).extrinsics;
        assert!(c.to_camera().is_err());
        c.look_at = None;
        assert!(c.to_camera().is_ok());
        c.extrinsics.as_mut().unwrap().rotation[0][0] = 2.0;
        assert!(c.to_camera().is_err());
    }
}
