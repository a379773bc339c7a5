//! Sequential Monte Carlo posture estimator.
//!
//! Particles carry a joint state and a log-weight. Each observation step runs
//! `predict` (constant-velocity motion with Gaussian joint accelerations)
//! followed by `update` (validity × likelihood weighting, log-sum-exp
//! normalization, ESS-gated systematic resampling). The reported posture is
//! the highest-weight particle before resampling.
//!
//! Every particle draws from its own ChaCha stream derived from the master
//! seed, the step counter and the particle index, so results do not depend
//! on how many threads rayon uses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::ProjectionMatrix;
use crate::kinematics::{
    check_validity, propagate, sample_acceleration, JointLimits, JointState, JointVector,
    KinematicModel, ValidityModel,
};
use crate::observation::{
    log_likelihood_from_frames, KeypointObservation, NoiseConfig, RobotObservation,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("every particle has zero weight; observation is inconsistent with the joint limits")]
    AllParticlesInvalid,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterMode {
    RobotOnly,
    KeypointsOnly,
    Fused,
}

impl FilterMode {
    pub const ALL: [FilterMode; 3] = [FilterMode::RobotOnly, FilterMode::KeypointsOnly, FilterMode::Fused];

    pub fn as_str(&self) -> &'static str {
        match self {
            FilterMode::RobotOnly => "robot",
            FilterMode::KeypointsOnly => "keypoints",
            FilterMode::Fused => "fused",
        }
    }

    pub fn uses_robot(&self) -> bool {
        matches!(self, FilterMode::RobotOnly | FilterMode::Fused)
    }

    pub fn uses_keypoints(&self) -> bool {
        matches!(self, FilterMode::KeypointsOnly | FilterMode::Fused)
    }
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robot" => Ok(FilterMode::RobotOnly),
            "keypoints" => Ok(FilterMode::KeypointsOnly),
            "fused" => Ok(FilterMode::Fused),
            other => Err(format!("unknown mode `{other}` (expected robot, keypoints or fused)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub noise: NoiseConfig,
    /// Seconds between observation steps.
    pub dt: f64,
    pub mode: FilterMode,
    /// Resample when ESS drops below this fraction of N.
    pub resample_threshold: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 500,
            noise: NoiseConfig::default(),
            dt: 0.1,
            mode: FilterMode::Fused,
            resample_threshold: 0.5,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles < 2 {
            return Err(FilterError::InvalidConfig("n_particles must be at least 2".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(FilterError::InvalidConfig(
                "resample_threshold must lie in (0, 1]".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(FilterError::InvalidConfig("dt must be positive".into()));
        }
        self.noise.validate().map_err(FilterError::InvalidConfig)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: JointState,
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub seed: u64,
    /// Number of predict steps taken so far.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostureEstimate {
    pub t: f64,
    pub q: JointVector,
    pub qdot: JointVector,
    /// Normalized log-weight of the reported particle.
    pub map_log_weight: f64,
    pub ess: f64,
    /// Weighted particle mean and std-dev of q before resampling.
    pub mean_q: JointVector,
    pub std_q: JointVector,
    pub resampled: bool,
    /// Set when all particles died and the filter re-initialized.
    pub recovered: bool,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for (seed, step, particle). `stream = u64::MAX` is
/// reserved for the resampling draw.
fn stream_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step)));
    rng.set_stream(stream);
    rng
}

const INIT_STEP: u64 = u64::MAX;
const RESAMPLE_STREAM: u64 = u64::MAX;

impl ParticleSet {
    /// Uniform draw over the joint box with zero velocities and equal weights.
    pub fn initialize(config: &FilterConfig, limits: &JointLimits) -> Self {
        Self::initialize_with_seed(config.n_particles, config.seed, limits)
    }

    fn initialize_with_seed(n: usize, seed: u64, limits: &JointLimits) -> Self {
        let log_w = -(n as f64).ln();
        let particles = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, INIT_STEP, i as u64);
                let q = JointVector::from_fn(|j, _| {
                    let u: f64 = rng.random();
                    limits.q_min[j] + u * (limits.q_max[j] - limits.q_min[j])
                });
                Particle {
                    state: JointState::at_rest(q),
                    log_weight: log_w,
                }
            })
            .collect();
        Self {
            particles,
            seed,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Propagates every particle one step; weights are untouched.
    pub fn predict(&mut self, config: &FilterConfig) {
        let sigma = config.noise.sigma_v();
        let (seed, step, dt) = (self.seed, self.step, config.dt);
        self.particles
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, p)| {
                let mut rng = stream_rng(seed, step, i as u64);
                let qddot = sample_acceleration(&sigma, &mut rng);
                p.state = propagate(&p.state, &qddot, dt);
            });
        self.step += 1;
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    /// Shifts log-weights so they log-sum-exp to zero. Returns the shift, or
    /// `None` when no finite weight remains.
    pub fn normalize(&mut self) -> Option<f64> {
        let lse = log_sum_exp(self.particles.iter().map(|p| p.log_weight))?;
        for p in &mut self.particles {
            p.log_weight -= lse;
        }
        Some(lse)
    }

    /// Effective sample size of the (normalized) weights.
    pub fn ess(&self) -> f64 {
        effective_sample_size(self.particles.iter().map(|p| p.log_weight))
    }

    /// Systematic resampling from normalized weights; resets to equal weights.
    pub fn resample_systematic<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let n = self.particles.len();
        let weights: Vec<f64> = self.particles.iter().map(|p| p.log_weight.exp()).collect();
        let indices = systematic_indices(&weights, n, rng.random());
        let log_w = -(n as f64).ln();
        self.particles = indices
            .into_iter()
            .map(|i| Particle {
                state: self.particles[i].state,
                log_weight: log_w,
            })
            .collect();
    }

    /// Index of the highest-weight particle, lowest index on ties.
    pub fn map_index(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.particles.iter().enumerate() {
            if p.log_weight > self.particles[best].log_weight {
                best = i;
            }
        }
        best
    }

    /// Weighted mean and std-dev of joint angles under normalized weights.
    pub fn weighted_moments(&self) -> (JointVector, JointVector) {
        let mut mean = JointVector::zeros();
        for p in &self.particles {
            mean += p.state.q * p.log_weight.exp();
        }
        let mut var = JointVector::zeros();
        for p in &self.particles {
            let d = p.state.q - mean;
            var += d.component_mul(&d) * p.log_weight.exp();
        }
        (mean, var.map(|v| v.max(0.0).sqrt()))
    }

    /// Weights particles against whatever observations the mode uses, then
    /// normalizes, extracts the estimate and resamples if the ESS is low.
    pub fn update(
        &mut self,
        t: f64,
        robot_obs: Option<&RobotObservation>,
        kp_obs: Option<&KeypointObservation>,
        sensors: &Sensors<'_>,
        config: &FilterConfig,
    ) -> Result<PostureEstimate, FilterError> {
        let robot_obs = robot_obs.filter(|_| config.mode.uses_robot());
        let kp_obs = kp_obs.filter(|_| config.mode.uses_keypoints());
        let noise = &config.noise;
        self.particles.par_iter_mut().for_each(|p| {
            let v = check_validity(sensors.validity, &sensors.model.joint_limits, &p.state.q);
            if v <= 0.0 {
                p.log_weight = f64::NEG_INFINITY;
                return;
            }
            if robot_obs.is_none() && kp_obs.is_none() {
                p.log_weight += v.ln();
                return;
            }
            let frames = sensors.model.frames(&p.state.q);
            let ll = log_likelihood_from_frames(
                sensors.model,
                &frames,
                &p.state,
                sensors.projection,
                robot_obs,
                kp_obs,
                noise,
            );
            p.log_weight += v.ln() + ll;
        });

        if self.normalize().is_none() {
            return Err(FilterError::AllParticlesInvalid);
        }
        let ess = self.ess();
        let best = self.map_index();
        let (mean_q, std_q) = self.weighted_moments();
        let chosen = self.particles[best];
        let resampled = ess < config.resample_threshold * self.len() as f64;
        if resampled {
            let mut rng = stream_rng(self.seed, self.step, RESAMPLE_STREAM);
            self.resample_systematic(&mut rng);
        }
        Ok(PostureEstimate {
            t,
            q: chosen.state.q,
            qdot: chosen.state.qdot,
            map_log_weight: chosen.log_weight,
            ess,
            mean_q,
            std_q,
            resampled,
            recovered: false,
        })
    }
}

/// Everything the likelihoods need besides the observations.
#[derive(Clone, Copy)]
pub struct Sensors<'a> {
    pub model: &'a KinematicModel,
    pub projection: &'a ProjectionMatrix,
    pub validity: &'a ValidityModel,
}

/// `log Σ exp(xᵢ)` ignoring `-∞` entries; `None` if nothing finite remains.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let sum: f64 = values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - max).exp())
        .sum();
    Some(max + sum.ln())
}

/// `1 / Σ wᵢ²` of weights given in the log domain (normalized internally).
pub fn effective_sample_size<I: IntoIterator<Item = f64>>(log_weights: I) -> f64 {
    let lw: Vec<f64> = log_weights.into_iter().collect();
    let Some(lse) = log_sum_exp(lw.iter().copied()) else {
        return 0.0;
    };
    let sum_sq: f64 = lw.iter().map(|l| (2.0 * (l - lse)).exp()).sum();
    let ess = 1.0 / sum_sq;
    ess.clamp(1.0, lw.len() as f64)
}

/// Systematic resampling: `n` evenly spaced pointers offset by `u ∈ [0,1)`.
pub fn systematic_indices(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0] / total;
    let mut i = 0;
    for k in 0..n {
        let pointer = (k as f64 + u) / n as f64;
        while cumulative <= pointer && i + 1 < weights.len() {
            i += 1;
            cumulative += weights[i] / total;
        }
        out.push(i);
    }
    out
}

/// Observations available at one time step of a synchronized stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationStep {
    pub t: f64,
    pub robot: Option<RobotObservation>,
    pub keypoints: Option<KeypointObservation>,
}

/// Runs the filter over a synchronized stream, one estimate per step.
pub struct Estimator<'a> {
    pub config: FilterConfig,
    pub sensors: Sensors<'a>,
}

impl<'a> Estimator<'a> {
    pub fn new(config: FilterConfig, sensors: Sensors<'a>) -> Result<Self, FilterError> {
        config.validate()?;
        Ok(Self { config, sensors })
    }

    pub fn initial_set(&self) -> ParticleSet {
        ParticleSet::initialize(&self.config, &self.sensors.model.joint_limits)
    }

    /// Predict + update for one step, re-initializing when every particle
    /// has died.
    pub fn step(&self, set: &mut ParticleSet, obs: &ObservationStep) -> PostureEstimate {
        set.predict(&self.config);
        match set.update(
            obs.t,
            obs.robot.as_ref(),
            obs.keypoints.as_ref(),
            &self.sensors,
            &self.config,
        ) {
            Ok(est) => est,
            Err(_) => {
                let reseed = splitmix64(self.config.seed ^ set.step.rotate_left(32));
                let limits = &self.sensors.model.joint_limits;
                let step = set.step;
                *set = ParticleSet::initialize_with_seed(self.config.n_particles, reseed, limits);
                set.seed = self.config.seed;
                set.step = step;
                let mut est = set
                    .update(
                        obs.t,
                        obs.robot.as_ref(),
                        obs.keypoints.as_ref(),
                        &self.sensors,
                        &self.config,
                    )
                    .unwrap_or_else(|_| {
                        // fresh particles are inside the box, so only a custom
                        // validity model rejecting everything lands here
                        *set = ParticleSet::initialize_with_seed(self.config.n_particles, reseed, limits);
                        set.seed = self.config.seed;
                        set.step = step;
                        let (mean_q, std_q) = set.weighted_moments();
                        PostureEstimate {
                            t: obs.t,
                            q: set.particles[0].state.q,
                            qdot: JointVector::zeros(),
                            map_log_weight: set.particles[0].log_weight,
                            ess: set.len() as f64,
                            mean_q,
                            std_q,
                            resampled: false,
                            recovered: true,
                        }
                    });
                est.recovered = true;
                est
            }
        }
    }

    pub fn run(&self, steps: &[ObservationStep]) -> Vec<PostureEstimate> {
        let mut set = self.initial_set();
        steps.iter().map(|obs| self.step(&mut set, obs)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::DOF;

    #[test]
    fn lse_ignores_neg_infinity() {
        let v = [f64::NEG_INFINITY, 0.0, 0.0];
        assert!((log_sum_exp(v).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(log_sum_exp([f64::NEG_INFINITY; 3]).is_none());
    }

    #[test]
    fn ess_bounds() {
        let uniform = vec![-(4f64).ln(); 4];
        assert!((effective_sample_size(uniform) - 4.0).abs() < 1e-12);
        let peaked = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_eq!(effective_sample_size(peaked), 1.0);
    }

    #[test]
    fn systematic_follows_weights() {
        let idx = systematic_indices(&[0.5, 0.0, 0.25, 0.25], 4, 0.5);
        assert_eq!(idx, vec![0, 0, 2, 3]);
        let idx = systematic_indices(&[0.0, 1.0], 5, 0.0);
        assert_eq!(idx, vec![1; 5]);
    }

    #[test]
    fn init_is_uniform_in_box_and_deterministic() {
        let limits = JointLimits::default();
        let config = FilterConfig {
            seed: 9,
            ..FilterConfig::default()
        };
        let a = ParticleSet::initialize(&config, &limits);
        let b = ParticleSet::initialize(&config, &limits);
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        for p in &a.particles {
            assert!(limits.contains(&p.state.q));
            assert_eq!(p.state.qdot, JointVector::zeros());
        }
    }

    #[test]
    fn init_mean_is_range_center() {
        let limits = JointLimits::default();
        let config = FilterConfig {
            n_particles: 100_000,
            seed: 4,
            ..FilterConfig::default()
        };
        let set = ParticleSet::initialize(&config, &limits);
        let n = set.len() as f64;
        let mean = set.particles.iter().fold(JointVector::zeros(), |acc, p| acc + p.state.q) / n;
        for j in 0..DOF {
            let range = limits.q_max[j] - limits.q_min[j];
            let center = 0.5 * (limits.q_max[j] + limits.q_min[j]);
            assert!(((mean[j] - center) / range).abs() < 0.01, "joint {j}");
        }
    }

    fn zero_noise_config(n: usize) -> FilterConfig {
        let mut config = FilterConfig {
            n_particles: n,
            ..FilterConfig::default()
        };
        config.noise.sigma_v_deg = [0.0; 10];
        config
    }

    #[test]
    fn predict_without_noise_is_deterministic_drift() {
        let config = zero_noise_config(50);
        let limits = JointLimits::default();
        let mut set = ParticleSet::initialize(&config, &limits);
        let before = set.clone();
        set.predict(&config);
        for (a, b) in before.particles.iter().zip(&set.particles) {
            assert_eq!(a.state.q, b.state.q);
            assert_eq!(a.log_weight, b.log_weight);
        }
        let c = JointVector::from_fn(|j, _| 0.01 * j as f64);
        for p in &mut set.particles {
            p.state.qdot = c;
        }
        let before = set.clone();
        set.predict(&config);
        for (a, b) in before.particles.iter().zip(&set.particles) {
            assert!((b.state.q - (a.state.q + c * config.dt)).amax() < 1e-15);
        }
    }

    #[test]
    fn predict_velocity_increment_variance() {
        let config = FilterConfig {
            n_particles: 10_000,
            ..FilterConfig::default()
        };
        let limits = JointLimits::default();
        let mut set = ParticleSet::initialize(&config, &limits);
        set.predict(&config);
        let sigma = config.noise.sigma_v();
        let n = set.len() as f64;
        for j in 0..DOF {
            let var = set.particles.iter().map(|p| p.state.qdot[j].powi(2)).sum::<f64>() / n;
            let expected = (sigma[j] * config.dt).powi(2);
            assert!((var / expected - 1.0).abs() < 0.05, "joint {j}: {var} vs {expected}");
        }
    }

    #[test]
    fn mode_parsing() {
        for m in FilterMode::ALL {
            assert_eq!(m.as_str().parse::<FilterMode>().unwrap(), m);
        }
        assert!("both".parse::<FilterMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = FilterConfig::default();
        c.n_particles = 1;
        assert!(c.validate().is_err());
        c.n_particles = 10;
        c.resample_threshold = 0.0;
        assert!(c.validate().is_err());
    }
}
