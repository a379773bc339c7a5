//! `posture`: simulate desk tasks, calibrate the camera and segment lengths,
//! run the posture filter and score the results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use posture_fusion::anthropometry::{fit_lengths_keypoints, fit_lengths_robot, CalibrationSample, CalibrationTrace};
use posture_fusion::camera::{calibrate_extrinsics, CameraModel, Correspondence};
use posture_fusion::ergonomics::{max_rula_postures, rula};
use posture_fusion::filter::{Estimator, FilterMode, Sensors};
use posture_fusion::harness::{
    align_truth, evaluate, run_experiment, sync_traces, write_deviation_report, write_experiment, write_jsonl,
    CameraBlock, ErrorClass, HarnessError, ModelBlock, OcclusionBlock, SessionConfig, Trace, TraceRecord,
    CONFIG_ENV,
};
use posture_fusion::kinematics::{JointVector, ValidityModel, KEYPOINT_IDS};
use posture_fusion::sim::{apply_occlusion, generate_task, synthesize_sensors, TaskKind};

#[derive(Parser, Debug)]
#[command(name = "posture", version, about = "Upper-body posture estimation from robot and camera data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Session config (TOML). Defaults to the reference setup.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sensor combination used by the filter.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Keypoint occlusion, e.g. `dropout:3+4:12-30` or `displace:4:0-60:50`.
    #[arg(long, global = true, value_parser = parse_occlusion)]
    occlusion: Option<OcclusionBlock>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Mode {
    Robot,
    Keypoints,
    Fused,
}

impl From<Mode> for FilterMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Robot => FilterMode::RobotOnly,
            Mode::Keypoints => FilterMode::KeypointsOnly,
            Mode::Fused => FilterMode::Fused,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Source {
    Robot,
    Keypoints,
}

fn parse_occlusion(s: &str) -> Result<OcclusionBlock, String> {
    let block = OcclusionBlock::parse(s).map_err(|e| e.to_string())?;
    if let Some(id) = block.keypoints.iter().find(|id| !KEYPOINT_IDS.contains(id)) {
        return Err(format!("keypoint {id} is not tracked (tracked: {KEYPOINT_IDS:?})"));
    }
    Ok(block)
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one task: writes trace.jsonl (truth, robot, keypoints) and
    /// correspondences.jsonl.
    Simulate {
        /// Task to simulate; defaults to the first of `task.kinds`.
        #[arg(long)]
        task: Option<String>,
    },
    /// Estimate camera extrinsics from 3D-2D correspondences; writes camera.toml.
    CalibrateCamera {
        /// JSONL file of `correspondence` records.
        #[arg(long)]
        correspondences: PathBuf,
    },
    /// Fit segment lengths from a trace with known postures; writes model.toml.
    FitLengths {
        /// JSONL trace with `truth` records and robot or keypoint records.
        #[arg(long)]
        trace: PathBuf,
        /// Observations the lengths are fitted to.
        #[arg(long, value_enum, default_value = "robot")]
        source: Source,
    },
    /// Run the filter over a trace; writes estimates.jsonl.
    Estimate {
        /// JSONL trace with `robot` and/or `keypoints` records.
        #[arg(long)]
        trace: PathBuf,
    },
    /// Compare estimates with ground truth; writes deviations.csv and summary.csv.
    Evaluate {
        /// JSONL file of `estimate` records.
        #[arg(long)]
        estimates: PathBuf,
        /// JSONL file holding the `truth` records.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Full comparison over tasks, seeds, occlusion and modes.
    RunExperiment,
    /// Per-step and maximum RULA grand score of an estimate (or truth) trace.
    Rula {
        /// JSONL file of `estimate` records (falls back to `truth` records).
        #[arg(long)]
        estimates: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Harness(HarnessError),
}

impl<E: Into<HarnessError>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Harness(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Harness(e) => match e.class() {
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            },
        }
    }
}

struct Session {
    config: SessionConfig,
    mode: FilterMode,
    out: PathBuf,
}

impl Session {
    fn new(global: &Global) -> Result<Self, CliError> {
        let mut config = match &global.config {
            Some(path) => SessionConfig::load(path)?,
            None => SessionConfig::default(),
        };
        if let Some(seed) = global.seed {
            config.seed = seed;
        }
        if let Some(o) = &global.occlusion {
            config.occlusion = Some(o.clone());
        }
        if let Some(m) = global.mode {
            config.filter.modes = vec![FilterMode::from(m).as_str().to_string()];
        }
        config.validate()?;
        let out = global.out.clone().unwrap_or_else(|| config.output.dir.clone());
        std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
            path: out.clone(),
            source,
        })?;
        Ok(Self {
            config,
            mode: global.mode.map(FilterMode::from).unwrap_or(FilterMode::Fused),
            out,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| {
        CliError::Harness(HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn data_error(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Harness(HarnessError::Trace {
        path: path.to_path_buf(),
        line: 0,
        message: message.into(),
    })
}

fn simulate(s: &Session, task: Option<&str>) -> Result<(), CliError> {
    let c = &s.config;
    let kind: TaskKind = match task {
        Some(t) => t.parse().map_err(CliError::Usage)?,
        None => c.task.kinds()?[0],
    };
    let model = c.model.to_model()?;
    let camera = c.camera.to_camera()?;
    let noise = c.noise.to_noise()?;
    let spec = c.task.spec(kind, c.seed)?;
    let gt = generate_task(&spec, &model, &camera)?;
    let (robot, mut keypoints) = synthesize_sensors(&gt, &noise, &camera, c.seed)?;

    // known postures seen by the camera double as calibration targets
    let mut correspondences = Vec::new();
    for (sample, obs) in gt.samples.iter().zip(&keypoints).step_by(10) {
        let world = model.landmark_positions(&sample.state.q);
        for (slot, id) in KEYPOINT_IDS.iter().enumerate() {
            if let Some(kp) = obs.keypoints.get(id) {
                correspondences.push(TraceRecord::from(&Correspondence {
                    world: world[slot],
                    pixel: kp.pixel,
                }));
            }
        }
    }
    if let Some(block) = &c.occlusion {
        keypoints = apply_occlusion(&keypoints, &block.to_spec(c.seed, spec.duration)?);
    }

    let mut records = Vec::with_capacity(3 * gt.samples.len());
    for ((truth, r), k) in gt.samples.iter().zip(&robot).zip(&keypoints) {
        records.push(TraceRecord::from(truth));
        records.push(TraceRecord::from(r));
        records.push(TraceRecord::from(k));
    }
    write_jsonl(&s.out.join("trace.jsonl"), &records)?;
    write_jsonl(&s.out.join("correspondences.jsonl"), &correspondences)?;
    println!(
        "simulated {} for {:.1} s: {} samples -> {}",
        kind.as_str(),
        spec.duration,
        gt.samples.len(),
        s.out.join("trace.jsonl").display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    camera: CameraBlock,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ModelBlock,
}

fn calibrate_camera(s: &Session, path: &Path) -> Result<(), CliError> {
    let trace = Trace::read(path)?;
    let intrinsics = s.config.camera.intrinsics()?;
    let cal = calibrate_extrinsics(&intrinsics, &trace.correspondences)?;
    let camera = CameraModel::new(intrinsics, cal.extrinsics);
    let file = CameraFile {
        camera: CameraBlock::from_camera(&camera),
    };
    let text = toml::to_string(&file).expect("camera block serializes");
    write_text(&s.out.join("camera.toml"), &text)?;
    println!(
        "calibrated from {} correspondences: rms {:.3} px, max {:.3} px{}",
        trace.correspondences.len(),
        cal.rms_px,
        cal.max_px,
        if cal.converged { "" } else { " (iteration budget hit)" }
    );
    Ok(())
}

fn calibration_trace(path: &Path, trace: &Trace) -> Result<CalibrationTrace, CliError> {
    let tol = 1e-6;
    let mut samples = Vec::new();
    for truth in &trace.truth {
        let robot = trace.robot.iter().find(|r| (r.t - truth.t).abs() < tol);
        let keypoints = trace.keypoints.iter().find(|k| (k.t - truth.t).abs() < tol);
        if let Some(robot) = robot {
            samples.push(CalibrationSample {
                state: Some(truth.state),
                robot: *robot,
                keypoints: keypoints.cloned(),
            });
        }
    }
    if samples.is_empty() {
        return Err(data_error(path, "no robot samples share a timestamp with a truth record"));
    }
    Ok(CalibrationTrace { samples })
}

fn fit_lengths(s: &Session, path: &Path, source: Source) -> Result<(), CliError> {
    let trace = Trace::read(path)?;
    let cal = calibration_trace(path, &trace)?;
    let model = s.config.model.to_model()?;
    let fit = match source {
        Source::Robot => fit_lengths_robot(&cal, &model)?,
        Source::Keypoints => fit_lengths_keypoints(&cal, &model, &s.config.camera.to_camera()?.projection)?,
    };
    let mut fitted = model.clone();
    fitted.segment_lengths = fit.lengths;
    let file = ModelFile {
        model: ModelBlock::from_model(&fitted),
    };
    write_text(&s.out.join("model.toml"), &toml::to_string(&file).expect("model block serializes"))?;
    let l = fit.lengths;
    println!(
        "torso {:.4} m, shoulder {:.4} m, upper arm {:.4} m, lower arm {:.4} m, hand {:.4} m (rms {:.3e})",
        l.torso, l.shoulder, l.upper_arm, l.lower_arm, l.hand, fit.rms
    );
    Ok(())
}

fn estimate(s: &Session, path: &Path) -> Result<(), CliError> {
    let c = &s.config;
    let trace = Trace::read(path)?;
    let mut keypoints = trace.keypoints;
    if let Some(block) = &c.occlusion {
        let end = keypoints.iter().map(|k| k.t).fold(0.0, f64::max);
        keypoints = apply_occlusion(&keypoints, &block.to_spec(c.seed, end)?);
    }
    let steps = sync_traces(&trace.robot, &keypoints, c.filter.dt_s)?;
    let model = c.model.to_model()?;
    let camera = c.camera.to_camera()?;
    let validity = ValidityModel::BoxOnly;
    let estimator = Estimator::new(
        c.filter.to_config(c.noise.to_noise()?, s.mode, c.seed)?,
        Sensors {
            model: &model,
            projection: &camera.projection,
            validity: &validity,
        },
    )?;
    let estimates = estimator.run(&steps);
    let records: Vec<TraceRecord> = estimates.iter().map(|e| TraceRecord::estimate(s.mode, e)).collect();
    let out = s.out.join("estimates.jsonl");
    write_jsonl(&out, &records)?;
    let recoveries = estimates.iter().filter(|e| e.recovered).count();
    println!(
        "{} steps, mode {}, {} re-initializations -> {}",
        estimates.len(),
        s.mode.as_str(),
        recoveries,
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(s: &Session, estimates: &Path, truth: &Path) -> Result<(), CliError> {
    let est = Trace::read(estimates)?;
    let tru = Trace::read(truth)?;
    if est.estimates.is_empty() {
        return Err(data_error(estimates, "no estimate records"));
    }
    if tru.truth.is_empty() {
        return Err(data_error(truth, "no truth records"));
    }
    let times: Vec<f64> = est.estimates.iter().map(|(t, _)| *t).collect();
    let q: Vec<JointVector> = est.estimates.iter().map(|(_, q)| *q).collect();
    let report = evaluate(&q, &align_truth(&times, &tru.truth))?;
    write_deviation_report(&s.out, &times, &report)?;
    let p = report.pooled;
    println!(
        "{} steps: median {:.2} deg, q75 {:.2} deg, upper whisker {:.2} deg",
        times.len(),
        p.median,
        p.q75,
        p.upper_whisker
    );
    Ok(())
}

fn experiment(s: &Session) -> Result<(), CliError> {
    let exp = run_experiment(&s.config)?;
    write_experiment(&exp, &s.out)?;
    println!("{:<14} {:<9} {:<10} {:>8} {:>8} {:>8} {:>5} {:>6}", "task", "occlusion", "mode", "median", "q75", "whisker", "reinit", "rula");
    for r in &exp.comparison {
        println!(
            "{:<14} {:<9} {:<10} {:>8.2} {:>8.2} {:>8.2} {:>5} {:>6.2}",
            r.task, r.occlusion, r.mode, r.median_deg, r.q75_deg, r.upper_whisker_deg, r.recoveries, r.rula_agreement
        );
    }
    Ok(())
}

fn rula_cmd(s: &Session, path: &Path) -> Result<(), CliError> {
    let trace = Trace::read(path)?;
    let ctx = s.config.rula.to_context()?;
    // estimates if present, otherwise ground truth
    let postures: Vec<(f64, JointVector)> = if trace.estimates.is_empty() {
        trace.truth.iter().map(|t| (t.t, t.state.q)).collect()
    } else {
        trace.estimates.clone()
    };
    let mut csv = String::from("t_s,upper_arm,lower_arm,wrist,wrist_twist,neck,trunk,legs,grand,interpretation\n");
    for (t, q) in &postures {
        let r = rula(q, &ctx);
        csv.push_str(&format!(
            "{t:.6},{},{},{},{},{},{},{},{},{}\n",
            r.upper_arm,
            r.lower_arm,
            r.wrist,
            r.wrist_twist,
            r.neck,
            r.trunk,
            r.legs,
            r.grand,
            r.interpretation.as_str()
        ));
    }
    write_text(&s.out.join("rula.csv"), &csv)?;
    let (grand, interp) = max_rula_postures(postures.iter().map(|(_, q)| q), &ctx)?;
    println!("max RULA grand score {grand} ({})", interp.as_str());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let session = Session::new(&cli.global)?;
    match &cli.command {
        Command::Simulate { task } => simulate(&session, task.as_deref()),
        Command::CalibrateCamera { correspondences } => calibrate_camera(&session, correspondences),
        Command::FitLengths { trace, source } => fit_lengths(&session, trace, *source),
        Command::Estimate { trace } => estimate(&session, trace),
        Command::Evaluate { estimates, truth } => evaluate_cmd(&session, estimates, truth),
        Command::RunExperiment => experiment(&session),
        Command::Rula { estimates } => rula_cmd(&session, estimates),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Harness(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
