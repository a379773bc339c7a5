use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{evaluate, DeviationReport, Summary};
use super::trace::{sync_traces, write_jsonl, TraceRecord};
use super::{io_error, HarnessError, SessionConfig};
use crate::ergonomics::{max_rula, max_rula_postures};
use crate::filter::{Estimator, FilterMode, ObservationStep, PostureEstimate, Sensors};
use crate::kinematics::{JointVector, ValidityModel, DOF};
use crate::sim::{apply_occlusion, generate_task, synthesize_sensors, TaskKind, TruthSample};

/// Identifies one filter run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub task: TaskKind,
    pub seed: u64,
    pub occluded: bool,
    pub mode: FilterMode,
}

impl RunKey {
    pub fn occlusion_label(&self) -> &'static str {
        if self.occluded {
            "occluded"
        } else {
            "clean"
        }
    }

    /// `{task}-s{seed}-{clean|occluded}-{mode}`
    pub fn stem(&self) -> String {
        format!(
            "{}-s{}-{}-{}",
            self.task.as_str(),
            self.seed,
            self.occlusion_label(),
            self.mode.as_str()
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: RunKey,
    pub estimates: Vec<PostureEstimate>,
    /// Ground truth aligned to the estimate times.
    pub truth: Vec<JointVector>,
    pub deviations: DeviationReport,
    /// Steps at which every particle had died.
    pub recoveries: usize,
    pub rula_estimate: u8,
    pub rula_truth: u8,
}

/// One line of the mode comparison, pooled over seeds, steps and joints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub task: String,
    pub occlusion: String,
    pub mode: String,
    pub median_deg: f64,
    pub q75_deg: f64,
    pub upper_whisker_deg: f64,
    pub runs: usize,
    pub recoveries: usize,
    /// Fraction of runs whose maximum RULA grand score matches the truth.
    pub rula_agreement: f64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<RunResult>,
    pub comparison: Vec<ComparisonRow>,
}

/// Ground truth at each time, taking the nearest sample.
pub fn align_truth(times: &[f64], truth: &[TruthSample]) -> Vec<JointVector> {
    times
        .iter()
        .map(|&t| {
            let i = truth.partition_point(|s| s.t < t);
            let pick = match (i.checked_sub(1), truth.get(i)) {
                (Some(a), Some(b)) if (t - truth[a].t).abs() <= (b.t - t).abs() => a,
                (_, Some(_)) => i,
                (Some(a), None) => a,
                (None, None) => panic!("align_truth needs a non-empty truth trace"),
            };
            truth[pick].state.q
        })
        .collect()
}

struct Scenario {
    task: TaskKind,
    seed: u64,
    truth: Vec<TruthSample>,
    clean: Vec<ObservationStep>,
    occluded: Option<Vec<ObservationStep>>,
}

/// Seed offset for the simulated sensor noise, so it is not correlated with
/// the trajectory draw.
const SENSOR_SEED_SALT: u64 = 0x5EED_0000_0000_0001;

fn build_scenario(config: &SessionConfig, task: TaskKind, seed: u64) -> Result<Scenario, HarnessError> {
    let model = config.model.to_model()?;
    let camera = config.camera.to_camera()?;
    let noise = config.noise.to_noise()?;
    let spec = config.task.spec(task, seed)?;
    let gt = generate_task(&spec, &model, &camera)?;
    let (robot, keypoints) = synthesize_sensors(&gt, &noise, &camera, seed ^ SENSOR_SEED_SALT)?;
    let dt = config.filter.dt_s;
    let clean = sync_traces(&robot, &keypoints, dt)?;
    let occluded = match &config.occlusion {
        Some(block) => {
            let occ = block.to_spec(seed, spec.duration)?;
            Some(sync_traces(&robot, &apply_occlusion(&keypoints, &occ), dt)?)
        }
        None => None,
    };
    Ok(Scenario {
        task,
        seed,
        truth: gt.samples,
        clean,
        occluded,
    })
}

fn run_one(config: &SessionConfig, scenario: &Scenario, occluded: bool, mode: FilterMode) -> Result<RunResult, HarnessError> {
    let model = config.model.to_model()?;
    let camera = config.camera.to_camera()?;
    let filter = config.filter.to_config(config.noise.to_noise()?, mode, scenario.seed)?;
    let ctx = config.rula.to_context()?;
    let validity = ValidityModel::BoxOnly;
    let estimator = Estimator::new(
        filter,
        Sensors {
            model: &model,
            projection: &camera.projection,
            validity: &validity,
        },
    )?;
    let steps = match (occluded, &scenario.occluded) {
        (true, Some(s)) => s,
        _ => &scenario.clean,
    };
    let estimates = estimator.run(steps);
    let times: Vec<f64> = estimates.iter().map(|e| e.t).collect();
    let truth = align_truth(&times, &scenario.truth);
    let q: Vec<JointVector> = estimates.iter().map(|e| e.q).collect();
    let deviations = evaluate(&q, &truth)?;
    let (rula_estimate, _) = max_rula(&estimates, &ctx)?;
    let (rula_truth, _) = max_rula_postures(truth.iter(), &ctx)?;
    Ok(RunResult {
        key: RunKey {
            task: scenario.task,
            seed: scenario.seed,
            occluded,
            mode,
        },
        recoveries: estimates.iter().filter(|e| e.recovered).count(),
        estimates,
        truth,
        deviations,
        rula_estimate,
        rula_truth,
    })
}

/// Every task × seed × {clean, occluded} × mode combination of the config.
/// The occluded variant runs only when the config has an occlusion block.
/// Results are in that nesting order and do not depend on thread count.
pub fn run_experiment(config: &SessionConfig) -> Result<Experiment, HarnessError> {
    config.validate()?;
    let kinds = config.task.kinds()?;
    let modes = config.filter.modes()?;
    let seeds: Vec<u64> = (0..config.repetitions).map(|r| config.seed.wrapping_add(r)).collect();

    let pairs: Vec<(TaskKind, u64)> = kinds.iter().flat_map(|k| seeds.iter().map(move |s| (*k, *s))).collect();
    let scenarios = pairs
        .par_iter()
        .map(|(k, s)| build_scenario(config, *k, *s))
        .collect::<Result<Vec<_>, _>>()?;

    let variants: &[bool] = if config.occlusion.is_some() { &[false, true] } else { &[false] };
    let mut jobs: Vec<(&Scenario, bool, FilterMode)> = Vec::new();
    for sc in &scenarios {
        for occ in variants {
            jobs.extend(modes.iter().map(|m| (sc, *occ, *m)));
        }
    }
    let runs = jobs
        .par_iter()
        .map(|(sc, occ, mode)| run_one(config, sc, *occ, *mode))
        .collect::<Result<Vec<_>, _>>()?;

    let mut comparison = Vec::new();
    for kind in &kinds {
        for occ in variants {
            for mode in &modes {
                let group: Vec<&RunResult> = runs
                    .iter()
                    .filter(|r| r.key.task == *kind && r.key.occluded == *occ && r.key.mode == *mode)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let pooled = pooled_summary(&group, None);
                comparison.push(ComparisonRow {
                    task: kind.as_str().into(),
                    occlusion: group[0].key.occlusion_label().into(),
                    mode: mode.as_str().into(),
                    median_deg: pooled.median,
                    q75_deg: pooled.q75,
                    upper_whisker_deg: pooled.upper_whisker,
                    runs: group.len(),
                    recoveries: group.iter().map(|r| r.recoveries).sum(),
                    rula_agreement: group.iter().filter(|r| r.rula_estimate == r.rula_truth).count() as f64
                        / group.len() as f64,
                });
            }
        }
    }
    Ok(Experiment { runs, comparison })
}

/// Summary over a group of runs for one joint, or all joints when `None`.
fn pooled_summary(group: &[&RunResult], joint: Option<usize>) -> Summary {
    let values: Vec<f64> = group
        .iter()
        .flat_map(|r| r.deviations.per_step.iter())
        .flat_map(|row| match joint {
            Some(j) => vec![row[j]],
            None => row.to_vec(),
        })
        .collect();
    Summary::of(&values)
}

const DEVIATION_HEADER: &str = "t_s,q1_deg,q2_deg,q3_deg,q4_deg,q5_deg,q6_deg,q7_deg,q8_deg,q9_deg,q10_deg";
const SUMMARY_HEADER: &str = "joint,n,median_deg,q25_deg,q75_deg,upper_whisker_deg,max_deg";

fn summary_fields(s: &Summary) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        s.n, s.median, s.q25, s.q75, s.upper_whisker, s.max
    )
}

fn deviation_line(t: f64, row: &[f64; DOF]) -> String {
    let mut line = format!("{t:.6}");
    for v in row {
        let _ = write!(line, ",{v:.6}");
    }
    line
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(io_error(path))
}

/// `deviations.csv` and `summary.csv` for a single run.
pub fn write_deviation_report(dir: &Path, times: &[f64], report: &DeviationReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let mut dev = format!("{DEVIATION_HEADER}\n");
    for (t, row) in times.iter().zip(&report.per_step) {
        let _ = writeln!(dev, "{}", deviation_line(*t, row));
    }
    write_file(&dir.join("deviations.csv"), &dev)?;
    let mut sum = format!("{SUMMARY_HEADER}\n");
    for (j, s) in report.per_joint.iter().enumerate() {
        let _ = writeln!(sum, "q{},{}", j + 1, summary_fields(s));
    }
    let _ = writeln!(sum, "all,{}", summary_fields(&report.pooled));
    write_file(&dir.join("summary.csv"), &sum)
}

/// Writes per-run estimate traces and the CSV / JSON tables under `dir`.
pub fn write_experiment(experiment: &Experiment, dir: &Path) -> Result<(), HarnessError> {
    let est_dir = dir.join("estimates");
    std::fs::create_dir_all(&est_dir).map_err(io_error(&est_dir))?;
    for run in &experiment.runs {
        let records: Vec<TraceRecord> = run
            .estimates
            .iter()
            .map(|e| TraceRecord::estimate(run.key.mode, e))
            .collect();
        write_jsonl(&est_dir.join(format!("{}.jsonl", run.key.stem())), &records)?;
    }

    let mut dev = format!("task,seed,occlusion,mode,{DEVIATION_HEADER}\n");
    let mut rula = String::from("task,seed,occlusion,mode,rula_estimate,rula_truth,agree\n");
    for run in &experiment.runs {
        let k = &run.key;
        let prefix = format!("{},{},{},{}", k.task.as_str(), k.seed, k.occlusion_label(), k.mode.as_str());
        for (e, row) in run.estimates.iter().zip(&run.deviations.per_step) {
            let _ = writeln!(dev, "{prefix},{}", deviation_line(e.t, row));
        }
        let _ = writeln!(
            rula,
            "{prefix},{},{},{}",
            run.rula_estimate,
            run.rula_truth,
            run.rula_estimate == run.rula_truth
        );
    }
    write_file(&dir.join("deviations.csv"), &dev)?;
    write_file(&dir.join("rula.csv"), &rula)?;

    let mut sum = format!("task,occlusion,mode,{SUMMARY_HEADER}\n");
    for row in &experiment.comparison {
        let group: Vec<&RunResult> = experiment
            .runs
            .iter()
            .filter(|r| {
                r.key.task.as_str() == row.task && r.key.occlusion_label() == row.occlusion && r.key.mode.as_str() == row.mode
            })
            .collect();
        let prefix = format!("{},{},{}", row.task, row.occlusion, row.mode);
        for j in 0..DOF {
            let _ = writeln!(sum, "{prefix},q{},{}", j + 1, summary_fields(&pooled_summary(&group, Some(j))));
        }
        let _ = writeln!(sum, "{prefix},all,{}", summary_fields(&pooled_summary(&group, None)));
    }
    write_file(&dir.join("summary.csv"), &sum)?;

    let json = serde_json::to_string_pretty(&experiment.comparison).expect("comparison rows serialize");
    write_file(&dir.join("comparison.json"), &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::OcclusionBlock;
    use crate::kinematics::JointState;

    fn small_config() -> SessionConfig {
        let mut c = SessionConfig::default();
        c.task.kinds = vec!["circle".into()];
        c.task.duration_s = 2.0;
        c.filter.n_particles = 64;
        c.occlusion = Some(OcclusionBlock::parse("dropout:3+4:0.5-1.5").unwrap());
        c
    }

    #[test]
    fn align_picks_nearest() {
        let truth: Vec<TruthSample> = (0..5)
            .map(|i| TruthSample {
                t: i as f64,
                state: JointState::at_rest(JointVector::from_element(i as f64)),
            })
            .collect();
        let q = align_truth(&[-1.0, 0.4, 0.6, 2.5, 9.0], &truth);
        let firsts: Vec<f64> = q.iter().map(|v| v[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn experiment_shape_and_files() {
        let config = small_config();
        let exp = run_experiment(&config).unwrap();
        assert_eq!(exp.runs.len(), 2 * 3);
        assert_eq!(exp.comparison.len(), 2 * 3);
        for run in &exp.runs {
            assert_eq!(run.estimates.len(), 20);
            assert_eq!(run.truth.len(), 20);
        }
        let dir = tempfile::tempdir().unwrap();
        write_experiment(&exp, dir.path()).unwrap();
        for f in ["deviations.csv", "summary.csv", "rula.csv", "comparison.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("estimates/circle-s0-occluded-fused.jsonl").exists());
        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 6 * (DOF + 1));
    }

    #[test]
    fn zero_repetitions_give_empty_tables() {
        let mut config = small_config();
        config.repetitions = 0;
        let exp = run_experiment(&config).unwrap();
        assert!(exp.runs.is_empty() && exp.comparison.is_empty());
    }

    #[test]
    fn deterministic_for_a_seed() {
        let config = small_config();
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        assert_eq!(a.comparison, b.comparison);
    }
}
