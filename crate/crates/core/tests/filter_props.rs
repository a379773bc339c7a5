use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posture_fusion::camera::CameraModel;
use posture_fusion::filter::{
    log_sum_exp, Estimator, FilterConfig, FilterError, FilterMode, ObservationStep, Particle, ParticleSet, Sensors,
};
use posture_fusion::harness::sync_traces;
use posture_fusion::kinematics::{JointState, JointVector, KinematicModel, ValidityModel, DOF};
use posture_fusion::observation::{Keypoint, KeypointObservation, NoiseConfig, RobotObservation};
use posture_fusion::sim::{generate_task, synthesize_sensors, GroundTruthTrace, TaskKind, TaskSpec};

struct Fixture {
    model: KinematicModel,
    camera: CameraModel,
    validity: ValidityModel,
}

impl Fixture {
    fn new() -> Self {
        Self {
            model: KinematicModel::default(),
            camera: CameraModel::default(),
            validity: ValidityModel::BoxOnly,
        }
    }

    fn sensors(&self) -> Sensors<'_> {
        Sensors {
            model: &self.model,
            projection: &self.camera.projection,
            validity: &self.validity,
        }
    }

    fn task(&self, kind: TaskKind, duration: f64, seed: u64) -> (GroundTruthTrace, Vec<ObservationStep>) {
        let spec = TaskSpec::new(kind, duration, 10.0, seed);
        let gt = generate_task(&spec, &self.model, &self.camera).unwrap();
        let (r, k) = synthesize_sensors(&gt, &NoiseConfig::reference(), &self.camera, seed + 100).unwrap();
        (gt, sync_traces(&r, &k, 0.1).unwrap())
    }
}

fn config(mode: FilterMode, n: usize, seed: u64) -> FilterConfig {
    FilterConfig {
        n_particles: n,
        mode,
        seed,
        ..FilterConfig::default()
    }
}

#[test]
fn normalized_and_ess_bounded_after_every_update() {
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::Circle, 8.0, 1);
    for mode in FilterMode::ALL {
        let est = Estimator::new(config(mode, 300, 4), fx.sensors()).unwrap();
        let mut set = est.initial_set();
        for obs in &steps {
            let e = est.step(&mut set, obs);
            let lse = log_sum_exp(set.log_weights()).unwrap();
            assert!(lse.abs() < 1e-9, "{mode:?} t={} lse={lse}", obs.t);
            assert!((1.0 - 1e-9..=300.0 + 1e-9).contains(&e.ess), "ess {}", e.ess);
        }
    }
}

#[test]
fn identical_particles_have_full_ess() {
    let fx = Fixture::new();
    let (gt, steps) = fx.task(TaskKind::LineX, 1.0, 2);
    let cfg = config(FilterMode::Fused, 50, 0);
    let state = gt.samples[3].state;
    let mut set = ParticleSet {
        particles: vec![
            Particle {
                state,
                log_weight: -(50f64).ln()
            };
            50
        ],
        seed: 0,
        step: 0,
    };
    let e = set
        .update(steps[3].t, steps[3].robot.as_ref(), steps[3].keypoints.as_ref(), &fx.sensors(), &cfg)
        .unwrap();
    assert!((e.ess - 50.0).abs() < 1e-9);
    assert!(!e.resampled);
    assert!(set.particles.iter().all(|p| (p.log_weight + (50f64).ln()).abs() < 1e-12));
}

#[test]
fn true_particle_dominates_noiseless_observation() {
    let fx = Fixture::new();
    let spec = TaskSpec::new(TaskKind::Circle, 2.0, 10.0, 3);
    let gt = generate_task(&spec, &fx.model, &fx.camera).unwrap();
    let truth = gt.samples[7];
    let (pose, twist) = fx.model.forward_kinematics(&truth.state);
    let mut kps = KeypointObservation::new(truth.t);
    for (slot, x) in fx.model.landmark_positions(&truth.state.q).iter().enumerate() {
        kps.keypoints.insert(
            posture_fusion::kinematics::KEYPOINT_IDS[slot],
            Keypoint {
                pixel: fx.camera.project(x).unwrap(),
                confidence: 1.0,
            },
        );
    }
    let robot = RobotObservation { t: truth.t, pose, twist };

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let limits = &fx.model.joint_limits;
    let mut particles: Vec<Particle> = (0..200)
        .map(|_| Particle {
            state: JointState::at_rest(JointVector::from_fn(|j, _| {
                rng.random_range(limits.q_min[j]..=limits.q_max[j])
            })),
            log_weight: -(200f64).ln(),
        })
        .collect();
    particles[57].state = truth.state;
    let mut set = ParticleSet { particles, seed: 0, step: 0 };
    let before = set.clone();
    for mode in FilterMode::ALL {
        set = before.clone();
        let e = set
            .update(truth.t, Some(&robot), Some(&kps), &fx.sensors(), &config(mode, 200, 0))
            .unwrap();
        assert_eq!(e.q, truth.state.q, "{mode:?}");
        assert!(e.map_log_weight.exp() > 0.99, "{mode:?}: {}", e.map_log_weight.exp());
    }
}

#[test]
fn outside_limits_is_all_invalid() {
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::Circle, 1.0, 0);
    let mut q = fx.model.joint_limits.q_max;
    q[6] += 0.1;
    let mut set = ParticleSet {
        particles: vec![
            Particle {
                state: JointState::at_rest(q),
                log_weight: -(10f64).ln()
            };
            10
        ],
        seed: 0,
        step: 0,
    };
    let r = set.update(0.0, steps[0].robot.as_ref(), None, &fx.sensors(), &config(FilterMode::RobotOnly, 10, 0));
    assert_eq!(r.unwrap_err(), FilterError::AllParticlesInvalid);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Resampling keeps the weighted mean of q within 3σ/√N per joint.
    #[test]
    fn systematic_resampling_preserves_mean(seed in any::<u64>()) {
        let fx = Fixture::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 400;
        let limits = &fx.model.joint_limits;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
        let lse = log_sum_exp(raw.iter().copied()).unwrap();
        let mut set = ParticleSet {
            particles: raw
                .iter()
                .map(|lw| Particle {
                    state: JointState::at_rest(JointVector::from_fn(|j, _| rng.random_range(limits.q_min[j]..=limits.q_max[j]))),
                    log_weight: lw - lse,
                })
                .collect(),
            seed,
            step: 0,
        };
        let (mean, std) = set.weighted_moments();
        set.resample_systematic(&mut rng);
        let after = set.particles.iter().fold(JointVector::zeros(), |acc, p| acc + p.state.q) / n as f64;
        for j in 0..DOF {
            prop_assert!((after[j] - mean[j]).abs() < 3.0 * std[j] / (n as f64).sqrt(), "joint {}", j);
        }
        prop_assert!(set.particles.iter().all(|p| p.log_weight == -(n as f64).ln()));
    }
}

#[test]
fn same_seed_same_estimates_regardless_of_threads() {
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::RandomBlocks, 6.0, 5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            Estimator::new(config(FilterMode::Fused, 256, 21), fx.sensors())
                .unwrap()
                .run(&steps)
        })
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one, four);
    assert_eq!(one, run(4));
    let other = Estimator::new(config(FilterMode::Fused, 256, 22), fx.sensors()).unwrap().run(&steps);
    assert_ne!(one, other);
}

#[test]
fn zero_steps_give_no_estimates() {
    let fx = Fixture::new();
    let est = Estimator::new(config(FilterMode::Fused, 10, 0), fx.sensors()).unwrap();
    assert!(est.run(&[]).is_empty());
}

#[test]
fn huge_pixel_noise_reduces_fused_to_robot() {
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::Circle, 6.0, 6);
    let mut noise = NoiseConfig::reference();
    noise.sigma_p = [1e6; 5];
    let run = |mode| {
        let cfg = FilterConfig {
            noise,
            ..config(mode, 300, 8)
        };
        Estimator::new(cfg, fx.sensors()).unwrap().run(&steps)
    };
    let fused = run(FilterMode::Fused);
    let robot = run(FilterMode::RobotOnly);
    for (f, r) in fused.iter().zip(&robot) {
        assert_eq!(f.q, r.q, "t = {}", f.t);
        assert_eq!(f.resampled, r.resampled);
    }
}

#[test]
fn particle_spread_shrinks_on_line_task() {
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::LineX, 2.0, 7);
    for mode in FilterMode::ALL {
        let est = Estimator::new(config(mode, 500, 3), fx.sensors()).unwrap();
        let set = est.initial_set();
        let (_, std0) = set.weighted_moments();
        let out = est.run(&steps[..6]);
        let std5 = out[5].std_q;
        for j in 0..DOF {
            assert!(std5[j] < std0[j], "{mode:?} joint {j}: {} !< {}", std5[j], std0[j]);
        }
    }
}

#[test]
fn missing_keypoints_are_ignored_not_penalized() {
    // an empty keypoint observation leaves fused weights equal to robot-only
    let fx = Fixture::new();
    let (_, steps) = fx.task(TaskKind::Circle, 1.0, 4);
    let empty = KeypointObservation::new(steps[2].t);
    let est_f = Estimator::new(config(FilterMode::Fused, 64, 1), fx.sensors()).unwrap();
    let est_r = Estimator::new(config(FilterMode::RobotOnly, 64, 1), fx.sensors()).unwrap();
    let mut a = est_f.initial_set();
    let mut b = est_r.initial_set();
    let obs = ObservationStep {
        t: steps[2].t,
        robot: steps[2].robot,
        keypoints: Some(empty),
    };
    est_f.step(&mut a, &obs);
    est_r.step(&mut b, &obs);
    assert_eq!(a, b);
}
