//! RULA (Rapid Upper Limb Assessment) scoring of joint-space postures.
//!
//! Angles are binned into worksheet categories with closed-lower,
//! open-upper intervals. The three lookup tables and the category bands
//! are plain data so they can be audited and scanned exhaustively.

use thiserror::Error;

use crate::filter::PostureEstimate;
use crate::kinematics::JointVector;

/// Table A: `[upper_arm - 1][lower_arm - 1][(wrist - 1) * 2 + (twist - 1)]`.
pub const TABLE_A: [[[u8; 8]; 3]; 6] = [
    [
        [1, 2, 2, 2, 2, 3, 3, 3],
        [2, 2, 2, 2, 3, 3, 3, 3],
        [2, 3, 2, 3, 3, 3, 4, 4],
    ],
    [
        [2, 3, 3, 3, 3, 4, 4, 4],
        [3, 3, 3, 3, 3, 4, 4, 4],
        [3, 4, 4, 4, 4, 4, 5, 5],
    ],
    [
        [3, 3, 4, 4, 4, 4, 5, 5],
        [3, 4, 4, 4, 4, 4, 5, 5],
        [4, 4, 4, 4, 4, 5, 5, 5],
    ],
    [
        [4, 4, 4, 4, 4, 5, 5, 5],
        [4, 4, 4, 4, 4, 5, 5, 5],
        [4, 4, 4, 5, 5, 5, 6, 6],
    ],
    [
        [5, 5, 5, 5, 5, 6, 6, 7],
        [5, 6, 6, 6, 6, 7, 7, 7],
        [6, 6, 6, 7, 7, 7, 7, 8],
    ],
    [
        [7, 7, 7, 7, 7, 8, 8, 9],
        [8, 8, 8, 8, 8, 9, 9, 9],
        [9, 9, 9, 9, 9, 9, 9, 9],
    ],
];

/// Table B: `[neck - 1][(trunk - 1) * 2 + (legs - 1)]`.
pub const TABLE_B: [[u8; 12]; 6] = [
    [1, 3, 2, 3, 3, 4, 5, 5, 6, 6, 7, 7],
    [2, 3, 2, 3, 4, 5, 5, 5, 6, 7, 7, 7],
    [3, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 7],
    [5, 5, 5, 6, 6, 7, 7, 7, 7, 7, 8, 8],
    [7, 7, 7, 7, 7, 8, 8, 8, 8, 8, 8, 8],
    [8, 8, 8, 8, 8, 8, 8, 9, 9, 9, 9, 9],
];

/// Table C: `[min(wrist_arm, 8) - 1][min(neck_trunk_leg, 7) - 1]`.
pub const TABLE_C: [[u8; 7]; 8] = [
    [1, 2, 3, 3, 4, 5, 5],
    [2, 2, 3, 4, 4, 5, 5],
    [3, 3, 3, 4, 4, 5, 6],
    [3, 3, 3, 4, 5, 6, 6],
    [4, 4, 4, 5, 6, 7, 7],
    [4, 4, 5, 6, 6, 7, 7],
    [5, 5, 6, 6, 7, 7, 7],
    [5, 5, 6, 7, 7, 7, 7],
];

/// Upper-arm flexion bands in degrees: `(lower bound, score)`, ascending.
/// Extension beyond 20° scores like moderate flexion.
pub const UPPER_ARM_BANDS: [(f64, u8); 5] = [
    (f64::NEG_INFINITY, 2),
    (-20.0, 1),
    (20.0, 2),
    (45.0, 3),
    (90.0, 4),
];
/// Abduction at or beyond this adds 1 to the upper-arm score.
pub const ABDUCTION_THRESHOLD_DEG: f64 = 45.0;

/// Elbow flexion bands in degrees.
pub const LOWER_ARM_BANDS: [(f64, u8); 3] = [(f64::NEG_INFINITY, 2), (60.0, 1), (100.0, 2)];

/// Wrist flexion/extension magnitude bands in degrees; below 5° is neutral.
pub const WRIST_BANDS: [(f64, u8); 3] = [(0.0, 1), (5.0, 2), (15.0, 3)];
/// Radial/ulnar deviation at or beyond this adds 1 to the wrist score.
pub const WRIST_DEVIATION_THRESHOLD_DEG: f64 = 10.0;
/// Pronation/supination magnitude at or beyond this counts as end of range.
pub const WRIST_TWIST_THRESHOLD_DEG: f64 = 60.0;

/// Trunk flexion bands in degrees, used only when scoring the trunk from
/// the torso joints.
pub const TRUNK_BANDS: [(f64, u8); 4] = [(f64::NEG_INFINITY, 1), (5.0, 2), (20.0, 3), (60.0, 4)];
/// Torso rotation or side bend at or beyond this adds 1 each to the trunk.
pub const TRUNK_TWIST_THRESHOLD_DEG: f64 = 10.0;

fn band(bands: &[(f64, u8)], value: f64) -> u8 {
    bands
        .iter()
        .rev()
        .find(|(lo, _)| value >= *lo)
        .map(|(_, s)| *s)
        .unwrap_or(bands[0].1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Load {
    /// Under 2 kg, intermittent.
    #[default]
    Light,
    /// 2–10 kg, intermittent.
    ModerateIntermittent,
    /// 2–10 kg static or repeated.
    ModerateRepeated,
    /// Over 10 kg, or shocks.
    Heavy,
}

impl Load {
    pub fn score(self) -> u8 {
        match self {
            Load::Light => 0,
            Load::ModerateIntermittent => 1,
            Load::ModerateRepeated => 2,
            Load::Heavy => 3,
        }
    }
}

/// Assumptions that cannot be read off the arm joints. The defaults describe
/// a subject seated on a chair with supported legs, upright neck and trunk,
/// handling a light stylus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RulaContext {
    pub load: Load,
    pub muscle_use_static_or_repeated: bool,
    pub neck_twisted: bool,
    pub neck_side_bent: bool,
    pub trunk_twisted: bool,
    pub trunk_side_bent: bool,
    pub legs_supported: bool,
    /// Score the trunk from the three torso joints instead of assuming it
    /// upright.
    pub trunk_from_torso: bool,
}

impl Default for RulaContext {
    fn default() -> Self {
        Self {
            load: Load::Light,
            muscle_use_static_or_repeated: false,
            neck_twisted: false,
            neck_side_bent: false,
            trunk_twisted: false,
            trunk_side_bent: false,
            legs_supported: true,
            trunk_from_torso: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Interpretation {
    /// 1–2
    Acceptable,
    /// 3–4
    Investigate,
    /// 5–6
    InvestigateChangeSoon,
    /// 7
    InvestigateChangeNow,
}

impl Interpretation {
    pub fn from_grand(grand: u8) -> Self {
        match grand {
            0..=2 => Interpretation::Acceptable,
            3..=4 => Interpretation::Investigate,
            5..=6 => Interpretation::InvestigateChangeSoon,
            _ => Interpretation::InvestigateChangeNow,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Interpretation::Acceptable => "acceptable",
            Interpretation::Investigate => "investigate",
            Interpretation::InvestigateChangeSoon => "investigate_change_soon",
            Interpretation::InvestigateChangeNow => "investigate_change_now",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RulaScore {
    pub upper_arm: u8,
    pub lower_arm: u8,
    pub wrist: u8,
    pub wrist_twist: u8,
    pub table_a: u8,
    pub neck: u8,
    pub trunk: u8,
    pub legs: u8,
    pub table_b: u8,
    pub grand: u8,
    pub interpretation: Interpretation,
}

pub fn table_a(upper_arm: u8, lower_arm: u8, wrist: u8, wrist_twist: u8) -> u8 {
    TABLE_A[usize::from(upper_arm) - 1][usize::from(lower_arm) - 1]
        [usize::from(wrist - 1) * 2 + usize::from(wrist_twist) - 1]
}

pub fn table_b(neck: u8, trunk: u8, legs: u8) -> u8 {
    TABLE_B[usize::from(neck) - 1][usize::from(trunk - 1) * 2 + usize::from(legs) - 1]
}

pub fn table_c(wrist_arm: u8, neck_trunk_leg: u8) -> u8 {
    TABLE_C[usize::from(wrist_arm.clamp(1, 8)) - 1][usize::from(neck_trunk_leg.clamp(1, 7)) - 1]
}

/// Scores posture `q` (radians, canonical joint order).
pub fn rula(q: &JointVector, ctx: &RulaContext) -> RulaScore {
    let deg = q.map(f64::to_degrees);

    let mut upper_arm = band(&UPPER_ARM_BANDS, deg[4]);
    if deg[3] >= ABDUCTION_THRESHOLD_DEG {
        upper_arm += 1;
    }
    let lower_arm = band(&LOWER_ARM_BANDS, deg[6]);
    let mut wrist = band(&WRIST_BANDS, deg[8].abs());
    if deg[9].abs() >= WRIST_DEVIATION_THRESHOLD_DEG {
        wrist += 1;
    }
    let wrist_twist = if deg[7].abs() >= WRIST_TWIST_THRESHOLD_DEG { 2 } else { 1 };

    let neck = 1 + u8::from(ctx.neck_twisted) + u8::from(ctx.neck_side_bent);
    let trunk = if ctx.trunk_from_torso {
        band(&TRUNK_BANDS, deg[0])
            + u8::from(deg[2].abs() >= TRUNK_TWIST_THRESHOLD_DEG)
            + u8::from(deg[1].abs() >= TRUNK_TWIST_THRESHOLD_DEG)
    } else {
        1 + u8::from(ctx.trunk_twisted) + u8::from(ctx.trunk_side_bent)
    };
    let legs = if ctx.legs_supported { 1 } else { 2 };

    let a = table_a(upper_arm, lower_arm, wrist, wrist_twist);
    let b = table_b(neck, trunk.min(6), legs);
    let extra = u8::from(ctx.muscle_use_static_or_repeated) + ctx.load.score();
    let grand = table_c(a + extra, b + extra);
    RulaScore {
        upper_arm,
        lower_arm,
        wrist,
        wrist_twist,
        table_a: a,
        neck,
        trunk,
        legs,
        table_b: b,
        grand,
        interpretation: Interpretation::from_grand(grand),
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ErgonomicsError {
    #[error("cannot score an empty trace")]
    EmptyTrace,
}

/// Highest grand score over a sequence of postures.
pub fn max_rula_postures<'a, I>(postures: I, ctx: &RulaContext) -> Result<(u8, Interpretation), ErgonomicsError>
where
    I: IntoIterator<Item = &'a JointVector>,
{
    postures
        .into_iter()
        .map(|q| rula(q, ctx).grand)
        .max()
        .map(|g| (g, Interpretation::from_grand(g)))
        .ok_or(ErgonomicsError::EmptyTrace)
}

/// Highest grand score over a filter run.
pub fn max_rula(estimates: &[PostureEstimate], ctx: &RulaContext) -> Result<(u8, Interpretation), ErgonomicsError> {
    max_rula_postures(estimates.iter().map(|e| &e.q), ctx)
}
