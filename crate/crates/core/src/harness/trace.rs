use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{io_error, HarnessError};
use crate::camera::Correspondence;
use crate::filter::{FilterMode, ObservationStep, PostureEstimate};
use crate::kinematics::{JointState, JointVector, Pose, Twist, DOF};
use crate::observation::{Keypoint, KeypointObservation, RobotObservation};
use crate::sim::TruthSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    /// BODY-25 id.
    pub id: u8,
    pub u_px: f64,
    pub v_px: f64,
    pub confidence: f64,
}

/// One line of a JSONL trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceRecord {
    Robot {
        t_s: f64,
        position_m: [f64; 3],
        /// Unit quaternion, scalar last.
        orientation_xyzw: [f64; 4],
        linear_velocity_m_s: [f64; 3],
        angular_velocity_rad_s: [f64; 3],
    },
    Keypoints {
        t_s: f64,
        keypoints: Vec<KeypointRecord>,
    },
    Truth {
        t_s: f64,
        q_deg: [f64; DOF],
        qdot_deg_s: [f64; DOF],
    },
    Estimate {
        t_s: f64,
        mode: String,
        q_deg: [f64; DOF],
        qdot_deg_s: [f64; DOF],
        map_log_weight: f64,
        ess: f64,
        recovered: bool,
    },
    Correspondence {
        world_m: [f64; 3],
        pixel_px: [f64; 2],
    },
}

fn deg(v: &JointVector) -> [f64; DOF] {
    std::array::from_fn(|j| v[j].to_degrees())
}

fn rad(v: &[f64; DOF]) -> JointVector {
    JointVector::from_fn(|j, _| v[j].to_radians())
}

impl From<&RobotObservation> for TraceRecord {
    fn from(o: &RobotObservation) -> Self {
        let q = o.pose.orientation.quaternion();
        TraceRecord::Robot {
            t_s: o.t,
            position_m: o.pose.position.into(),
            orientation_xyzw: [q.i, q.j, q.k, q.w],
            linear_velocity_m_s: o.twist.linear.into(),
            angular_velocity_rad_s: o.twist.angular.into(),
        }
    }
}

impl From<&KeypointObservation> for TraceRecord {
    fn from(o: &KeypointObservation) -> Self {
        TraceRecord::Keypoints {
            t_s: o.t,
            keypoints: o
                .keypoints
                .iter()
                .map(|(id, kp)| KeypointRecord {
                    id: *id,
                    u_px: kp.pixel.x,
                    v_px: kp.pixel.y,
                    confidence: kp.confidence,
                })
                .collect(),
        }
    }
}

impl From<&TruthSample> for TraceRecord {
    fn from(s: &TruthSample) -> Self {
        TraceRecord::Truth {
            t_s: s.t,
            q_deg: deg(&s.state.q),
            qdot_deg_s: deg(&s.state.qdot),
        }
    }
}

impl From<&Correspondence> for TraceRecord {
    fn from(c: &Correspondence) -> Self {
        TraceRecord::Correspondence {
            world_m: c.world.into(),
            pixel_px: c.pixel.into(),
        }
    }
}

impl TraceRecord {
    pub fn estimate(mode: FilterMode, e: &PostureEstimate) -> Self {
        TraceRecord::Estimate {
            t_s: e.t,
            mode: mode.as_str().to_string(),
            q_deg: deg(&e.q),
            qdot_deg_s: deg(&e.qdot),
            map_log_weight: e.map_log_weight,
            ess: e.ess,
            recovered: e.recovered,
        }
    }
}

/// A decoded trace file, split by record type. Order within each list is
/// file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub robot: Vec<RobotObservation>,
    pub keypoints: Vec<KeypointObservation>,
    pub truth: Vec<TruthSample>,
    /// `(t, q)` of every estimate record.
    pub estimates: Vec<(f64, JointVector)>,
    pub correspondences: Vec<Correspondence>,
}

impl Trace {
    pub fn from_records(records: &[TraceRecord]) -> Result<Self, String> {
        let mut trace = Trace::default();
        for r in records {
            match r {
                TraceRecord::Robot {
                    t_s,
                    position_m,
                    orientation_xyzw: [x, y, z, w],
                    linear_velocity_m_s,
                    angular_velocity_rad_s,
                } => {
                    let q = Quaternion::new(*w, *x, *y, *z);
                    if !(q.norm() > 1e-9) {
                        return Err("orientation quaternion has zero norm".into());
                    }
                    trace.robot.push(RobotObservation {
                        t: *t_s,
                        pose: Pose {
                            position: Vector3::from(*position_m),
                            orientation: UnitQuaternion::from_quaternion(q),
                        },
                        twist: Twist {
                            linear: Vector3::from(*linear_velocity_m_s),
                            angular: Vector3::from(*angular_velocity_rad_s),
                        },
                    });
                }
                TraceRecord::Keypoints { t_s, keypoints } => {
                    let mut obs = KeypointObservation::new(*t_s);
                    for k in keypoints {
                        obs.keypoints.insert(
                            k.id,
                            Keypoint {
                                pixel: Vector2::new(k.u_px, k.v_px),
                                confidence: k.confidence,
                            },
                        );
                    }
                    trace.keypoints.push(obs);
                }
                TraceRecord::Truth { t_s, q_deg, qdot_deg_s } => trace.truth.push(TruthSample {
                    t: *t_s,
                    state: JointState {
                        q: rad(q_deg),
                        qdot: rad(qdot_deg_s),
                    },
                }),
                TraceRecord::Estimate { t_s, q_deg, .. } => trace.estimates.push((*t_s, rad(q_deg))),
                TraceRecord::Correspondence { world_m, pixel_px } => trace.correspondences.push(Correspondence {
                    world: Vector3::from(*world_m),
                    pixel: Vector2::from(*pixel_px),
                }),
            }
        }
        Ok(trace)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let records = read_jsonl(path)?;
        Self::from_records(&records).map_err(|message| HarnessError::Trace {
            path: path.to_path_buf(),
            line: 0,
            message,
        })
    }
}

/// Reads one record per non-blank line.
pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>, HarnessError> {
    let file = std::fs::File::open(path).map_err(io_error(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| HarnessError::Trace {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<'a, I>(path: &Path, records: I) -> Result<(), HarnessError>
where
    I: IntoIterator<Item = &'a TraceRecord>,
{
    let file = std::fs::File::create(path).map_err(io_error(path))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| io_error(path)(e.into()))?;
        out.write_all(b"\n").map_err(io_error(path))?;
    }
    out.flush().map_err(io_error(path))
}

fn nearest<T>(items: &[T], time: impl Fn(&T) -> f64, t: f64, tol: f64) -> Option<&T> {
    // items are sorted by time
    let i = items.partition_point(|x| time(x) < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|k| items.get(k))
        .map(|x| ((time(x) - t).abs(), x))
        .filter(|(d, _)| *d <= tol)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, x)| x)
}

/// Resamples both streams onto a uniform grid of step `dt` spanning their
/// common time range. Each grid step takes the nearest sample of each
/// stream within `dt/2`; a stream with nothing that close is absent at
/// that step.
pub fn sync_traces(
    robot: &[RobotObservation],
    keypoints: &[KeypointObservation],
    dt: f64,
) -> Result<Vec<ObservationStep>, HarnessError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(HarnessError::Config("sync step must be positive".into()));
    }
    let mut robot = robot.to_vec();
    let mut keypoints = keypoints.to_vec();
    robot.sort_by(|a, b| a.t.total_cmp(&b.t));
    keypoints.sort_by(|a, b| a.t.total_cmp(&b.t));
    let (Some(r0), Some(r1), Some(k0), Some(k1)) = (robot.first(), robot.last(), keypoints.first(), keypoints.last())
    else {
        return Err(HarnessError::EmptyOverlap);
    };
    let start = r0.t.max(k0.t);
    let end = r1.t.min(k1.t);
    if start > end {
        return Err(HarnessError::EmptyOverlap);
    }
    let tol = dt / 2.0 + 1e-9;
    let n = ((end - start) / dt + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| {
            let t = start + i as f64 * dt;
            ObservationStep {
                t,
                robot: nearest(&robot, |r| r.t, t, tol).copied(),
                keypoints: nearest(&keypoints, |k| k.t, t, tol).cloned(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn robot_at(t: f64) -> RobotObservation {
        RobotObservation {
            t,
            pose: Pose::from_position(Vector3::new(t, 0.0, 0.0)),
            twist: Twist::zero(),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut kp = KeypointObservation::new(0.5);
        kp.keypoints.insert(
            4,
            Keypoint {
                pixel: Vector2::new(320.25, 100.0),
                confidence: 0.9,
            },
        );
        let mut robot = robot_at(0.5);
        robot.pose.orientation = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        let records = vec![
            TraceRecord::from(&robot),
            TraceRecord::from(&kp),
            TraceRecord::Correspondence {
                world_m: [1.0, 2.0, 3.0],
                pixel_px: [4.0, 5.0],
            },
        ];
        write_jsonl(&path, &records).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
        let trace = Trace::from_records(&back).unwrap();
        assert_eq!(trace.keypoints, vec![kp]);
        assert!(trace.robot[0].pose.orientation.angle_to(&robot.pose.orientation) < 1e-12);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"type":"robot""#));
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(&path, "{\"type\":\"truth\",\"t_s\":0}\n").unwrap();
        match read_jsonl(&path) {
            Err(HarnessError::Trace { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sync_nearest_within_half_step() {
        let robot: Vec<_> = (0..11).map(|i| robot_at(i as f64 * 0.1)).collect();
        // keypoints at 1/3 the rate, slightly offset
        let kps: Vec<_> = (0..4).map(|i| KeypointObservation::new(0.02 + i as f64 * 0.3)).collect();
        let steps = sync_traces(&robot, &kps, 0.1).unwrap();
        assert!((steps[0].t - 0.02).abs() < 1e-12);
        assert_eq!(steps.len(), 10);
        for s in &steps {
            let r = s.robot.unwrap();
            assert!((r.t - s.t).abs() <= 0.05 + 1e-9);
            if let Some(k) = &s.keypoints {
                assert!((k.t - s.t).abs() <= 0.05 + 1e-9);
            }
        }
        assert!(steps.iter().any(|s| s.keypoints.is_none()));
    }

    #[test]
    fn disjoint_traces_have_no_overlap() {
        let robot = vec![robot_at(0.0), robot_at(1.0)];
        let kps = vec![KeypointObservation::new(2.0)];
        assert!(matches!(sync_traces(&robot, &kps, 0.1), Err(HarnessError::EmptyOverlap)));
        assert!(matches!(sync_traces(&[], &kps, 0.1), Err(HarnessError::EmptyOverlap)));
    }
}
