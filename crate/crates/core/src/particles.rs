//! The N-particle jump-diffusion system.
//!
//! One time step applies, in order:
//! 1. truncated grazing jumps (marks `z ≤ Z`) at rate `2πZ` per particle,
//!    against a mollified partner, one moving particle per event;
//! 2. the drift restoring the mean of the omitted marks `z > Z`;
//! 3. the gated Brownian perturbation `√(2 dt) α ξ`.
//!
//! All randomness is drawn from keyed streams (see [`crate::rng`]). Jump
//! events do not depend on the state, so two ensembles run with the same seed
//! share every event, partner index and Gaussian draw.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diagnostics::{DiagnosticsOptions, DiagnosticsRecord};
use crate::error::{config, Error, Result};
use crate::gate::{self, GateParams, GateValue, MollifierParams, WeightedSample};
use crate::kernel::{make_frame, JumpCoefficient, KernelParams};
use crate::rng::{Purpose, StreamKey};
use crate::transport;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompensationMode {
    /// Average over every partner `j ≠ i`.
    ExactPairs,
    /// Average over this many uniformly drawn partners.
    Sampled(usize),
}

impl Default for CompensationMode {
    fn default() -> Self {
        CompensationMode::Sampled(64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_particles: usize,
    pub t_end: f64,
    pub dt: f64,
    /// Jump truncation `Z`.
    pub z_max: f64,
    pub kernel: KernelParams,
    pub mollifier: MollifierParams,
    pub gate: GateParams,
    pub gate_enabled: bool,
    /// Evaluate the gate on the leave-one-out measure of each particle.
    #[serde(default)]
    pub gate_leave_one_out: bool,
    pub compensation: CompensationMode,
    /// Add a zero-mean Gaussian increment, transverse to each sampled relative
    /// velocity, carrying the second moment of the omitted jumps `z > Z`.
    #[serde(default)]
    pub omitted_jump_noise: bool,
    pub seed: u64,
}

/// Largest ensemble for which the leave-one-out gate is allowed.
pub const LEAVE_ONE_OUT_LIMIT: usize = 2000;

impl SimConfig {
    /// γ = -1.5, ν = 1.6, N = 10⁴, T = 1, dt = 10⁻³, Z = 50, gate on.
    pub fn canonical(gate: GateParams) -> Self {
        SimConfig {
            n_particles: 10_000,
            t_end: 1.0,
            dt: 1e-3,
            z_max: 50.0,
            kernel: KernelParams::canonical(),
            mollifier: MollifierParams::default(),
            gate,
            gate_enabled: true,
            gate_leave_one_out: false,
            compensation: CompensationMode::default(),
            omitted_jump_noise: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(config(format!(
                "n_particles = {} must be >= 2",
                self.n_particles
            )));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(config(format!("t_end = {} must be positive", self.t_end)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config(format!("dt = {} must be positive", self.dt)));
        }
        self.n_steps()?;
        if !(self.z_max >= 0.0 && self.z_max.is_finite()) {
            return Err(config(format!("z_max = {} must be >= 0", self.z_max)));
        }
        let per_step = self.jumps_per_step();
        if per_step > 20.0 {
            return Err(config(format!(
                "dt * 2 pi z_max = {per_step:.3} exceeds the bound of 20 expected jumps per particle per step"
            )));
        }
        if per_step > 5.0 {
            log::warn!(
                "dt * 2 pi z_max = {per_step:.3} expected jumps per particle per step (above 5)"
            );
        }
        if self.gate_enabled {
            self.kernel.require_gated_regime()?;
            self.gate.validate()?;
        }
        if self.gate_leave_one_out && self.n_particles > LEAVE_ONE_OUT_LIMIT {
            return Err(config(format!(
                "leave-one-out gate needs n_particles <= {LEAVE_ONE_OUT_LIMIT}"
            )));
        }
        if let CompensationMode::Sampled(0) = self.compensation {
            return Err(config(
                "sampled compensation needs at least one pair per particle",
            ));
        }
        self.mollifier.epsilon(self.n_particles)?;
        Ok(())
    }

    /// `t_end / dt`, which must be an integer up to rounding.
    pub fn n_steps(&self) -> Result<u64> {
        let ratio = self.t_end / self.dt;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(config(format!(
                "t_end / dt = {ratio} is not an integer number of steps"
            )));
        }
        Ok(rounded as u64)
    }

    /// Expected jumps per particle per step, `2π Z dt`.
    pub fn jumps_per_step(&self) -> f64 {
        2.0 * PI * self.z_max * self.dt
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 3],
    pub temperature: f64,
}

/// Law of the i.i.d. initial velocities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    Maxwellian {
        mean: [f64; 3],
        temperature: f64,
    },
    UniformBall {
        radius: f64,
    },
    Mixture {
        components: Vec<GaussianComponent>,
    },
    PointMass {
        at: [f64; 3],
    },
    /// Velocities from a checkpoint file.
    File {
        path: PathBuf,
    },
}

impl InitialSpec {
    pub fn standard_maxwellian() -> Self {
        InitialSpec::Maxwellian {
            mean: [0.0; 3],
            temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            InitialSpec::Maxwellian { temperature, .. } if !(*temperature > 0.0) => {
                Err(config("maxwellian temperature must be positive"))
            }
            InitialSpec::UniformBall { radius } if !(*radius > 0.0) => {
                Err(config("uniform_ball radius must be positive"))
            }
            InitialSpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(config("mixture needs at least one component"));
                }
                if components
                    .iter()
                    .any(|c| !(c.weight > 0.0) || !(c.temperature > 0.0))
                {
                    return Err(config("mixture weights and temperatures must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let gauss = |rng: &mut R| {
            let x: f64 = StandardNormal.sample(rng);
            let y: f64 = StandardNormal.sample(rng);
            let z: f64 = StandardNormal.sample(rng);
            Vec3::new(x, y, z)
        };
        match self {
            InitialSpec::Maxwellian { mean, temperature } => {
                Vec3::from(*mean) + gauss(rng) * temperature.sqrt()
            }
            InitialSpec::UniformBall { radius } => loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm2() <= 1.0 {
                    break v * *radius;
                }
            },
            InitialSpec::Mixture { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = &components[components.len() - 1];
                for c in components {
                    if u < c.weight {
                        pick = c;
                        break;
                    }
                    u -= c.weight;
                }
                Vec3::from(pick.mean) + gauss(rng) * pick.temperature.sqrt()
            }
            InitialSpec::PointMass { at } => Vec3::from(*at),
            InitialSpec::File { .. } => unreachable!("file specs are loaded, not drawn"),
        }
    }
}

/// Particle velocities with the clock and cumulative counters of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub velocities: Vec<Vec3>,
    pub step: u64,
    pub time: f64,
    pub key: StreamKey,
    pub jump_count: u64,
    pub gate_active_time: f64,
    /// Gate value from the last evaluation, if the gate is enabled.
    pub last_gate: Option<GateValue>,
}

impl Ensemble {
    pub fn from_velocities(velocities: Vec<Vec3>, seed: u64) -> Self {
        Ensemble {
            velocities,
            step: 0,
            time: 0.0,
            key: StreamKey::new(seed),
            jump_count: 0,
            gate_active_time: 0.0,
            last_gate: None,
        }
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn mean(&self) -> Vec3 {
        let s = self.velocities.iter().fold(Vec3::ZERO, |acc, v| acc + *v);
        s / self.len() as f64
    }

    /// Mean of `|v|²`.
    pub fn energy(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm2()).sum::<f64>() / self.len() as f64
    }
}

/// N i.i.d. draws from `initial`; draw `i` comes from its own stream.
pub fn init_ensemble(cfg: &SimConfig, initial: &InitialSpec) -> Result<Ensemble> {
    initial.validate()?;
    let key = StreamKey::new(cfg.seed);
    let velocities = match initial {
        InitialSpec::File { path } => {
            let ck = checkpoint::read(path)?;
            if ck.velocities.len() != cfg.n_particles {
                return Err(config(format!(
                    "initial file {} holds {} particles, config asks for {}",
                    path.display(),
                    ck.velocities.len(),
                    cfg.n_particles
                )));
            }
            ck.velocities
        }
        spec => (0..cfg.n_particles)
            .into_par_iter()
            .map(|i| spec.draw(&mut key.stream(Purpose::Init, 0, i as u64)))
            .collect(),
    };
    Ok(Ensemble::from_velocities(velocities, cfg.seed))
}

/// One retained jump: particle `target` collides with `partner + w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub target: usize,
    pub partner: usize,
    pub w: Vec3,
    pub z: f64,
    pub phi: f64,
}

/// Applies one event to the current state; only the target moves.
#[inline]
pub fn apply_event(
    velocities: &mut [Vec3],
    ev: &JumpEvent,
    kernel: &KernelParams,
) -> Result<JumpCoefficient> {
    let v = velocities[ev.target];
    let partner = velocities[ev.partner] + ev.w;
    let c = kernel.jump_coefficient(v, partner, ev.z, ev.phi)?;
    velocities[ev.target] = v + c.delta_v;
    Ok(c)
}

/// Per-step constants derived from a validated config.
#[derive(Clone, Copy, Debug)]
pub struct Stepper {
    cfg: SimConfig,
    epsilon: f64,
    poisson: Option<Poisson<f64>>,
    n_steps: u64,
}

/// What a step did, beyond moving the ensemble.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub jumps: u64,
    pub alpha: f64,
}

impl Stepper {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let rate = cfg.jumps_per_step();
        let poisson = if rate > 0.0 {
            Some(Poisson::new(rate).map_err(|e| config(format!("jump rate {rate}: {e}")))?)
        } else {
            None
        };
        Ok(Stepper {
            cfg: *cfg,
            epsilon: cfg.mollifier.epsilon(cfg.n_particles)?,
            poisson,
            n_steps: cfg.n_steps()?,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_steps(&self) -> u64 {
        self.n_steps
    }

    /// Jump events of the step leaving step index `step`, in application order.
    pub fn draw_events(&self, key: &StreamKey, step: u64, t0: f64) -> Vec<JumpEvent> {
        let Some(poisson) = self.poisson else {
            return Vec::new();
        };
        let n = self.cfg.n_particles;
        let z_max = self.cfg.z_max;
        let dt = self.cfg.dt;
        let eps = self.epsilon;
        let per_particle: Vec<Vec<JumpEvent>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = key.stream(Purpose::Jump, step + 1, i as u64);
                let count = poisson.sample(&mut rng) as usize;
                (0..count)
                    .map(|_| {
                        let tau: f64 = rng.random();
                        let mut partner = rng.random_range(0..n - 1);
                        if partner >= i {
                            partner += 1;
                        }
                        let w = gate::mollifier_sample(eps, &mut rng);
                        let z = z_max * (1.0 - rng.random::<f64>());
                        let phi = 2.0 * PI * rng.random::<f64>();
                        JumpEvent {
                            time: t0 + tau * dt,
                            target: i,
                            partner,
                            w,
                            z,
                            phi,
                        }
                    })
                    .collect()
            })
            .collect();
        let mut events: Vec<JumpEvent> = per_particle.into_iter().flatten().collect();
        // Stable: equal times keep (target, event index) order.
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        events
    }

    /// Omitted-jump drift of every particle against a frozen snapshot, plus
    /// the Gaussian substitute for their spread when enabled.
    pub fn drift(&self, key: &StreamKey, step: u64, snap: &[Vec3]) -> Vec<Vec3> {
        let n = snap.len();
        let kernel = self.cfg.kernel;
        let z = self.cfg.z_max;
        let eps = self.epsilon;
        let dt = self.cfg.dt;
        let noise = self.cfg.omitted_jump_noise;
        let (count, exact) = match self.cfg.compensation {
            CompensationMode::ExactPairs => (n - 1, true),
            CompensationMode::Sampled(pairs) => (pairs, false),
        };
        let noise_scale = (dt / count as f64).sqrt();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = key.stream(Purpose::Drift, step + 1, i as u64);
                let vi = snap[i];
                let mut mean = Vec3::ZERO;
                let mut spread = Vec3::ZERO;
                for k in 0..count {
                    let j = if exact {
                        k + usize::from(k >= i)
                    } else {
                        let j = rng.random_range(0..n - 1);
                        j + usize::from(j >= i)
                    };
                    let w = gate::mollifier_sample(eps, &mut rng);
                    let x = vi - snap[j] - w;
                    let (m, second) = kernel.omitted_moments(x, z);
                    mean += m;
                    if noise && second > 0.0 {
                        if let Ok(frame) = make_frame(x) {
                            let g1: f64 = StandardNormal.sample(&mut rng);
                            let g2: f64 = StandardNormal.sample(&mut rng);
                            let scale = (0.5 * second / x.norm2()).sqrt();
                            spread += (frame.i_vec * g1 + frame.j_vec * g2) * scale;
                        }
                    }
                }
                mean * (dt / count as f64) + spread * noise_scale
            })
            .collect()
    }

    /// The mollified empirical sample the gate is evaluated on.
    pub fn gate_sample(&self, key: &StreamKey, step: u64, velocities: &[Vec3]) -> WeightedSample {
        let eps = self.epsilon;
        let points: Vec<Vec3> = velocities
            .par_iter()
            .enumerate()
            .map(|(j, v)| {
                *v + gate::mollifier_sample(eps, &mut key.stream(Purpose::Gate, step, j as u64))
            })
            .collect();
        WeightedSample::uniform(points)
    }

    /// Gate values addressed by `step`: one shared value, or one per particle
    /// in leave-one-out mode.
    pub fn evaluate_gate(
        &self,
        key: &StreamKey,
        step: u64,
        velocities: &[Vec3],
    ) -> Result<(GateValue, Option<Vec<f64>>)> {
        let sample = self.gate_sample(key, step, velocities);
        let shared = gate::alpha_gate_keyed(&sample, &self.cfg.gate, key, step)?;
        if !self.cfg.gate_leave_one_out {
            return Ok((shared, None));
        }
        let pts = sample.points();
        let per: Result<Vec<f64>> = (0..pts.len())
            .map(|i| {
                let rest: Vec<Vec3> = pts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, p)| *p)
                    .collect();
                Ok(gate::alpha_gate_keyed(
                    &WeightedSample::uniform(rest),
                    &self.cfg.gate,
                    key,
                    step,
                )?
                .alpha)
            })
            .collect();
        Ok((shared, Some(per?)))
    }

    /// Advances `ens` by one step of length `dt`.
    pub fn step(&self, ens: &mut Ensemble) -> Result<StepInfo> {
        let key = ens.key;
        let s = ens.step;
        let t0 = ens.time;
        let events = self.draw_events(&key, s, t0);
        for ev in &events {
            apply_event(&mut ens.velocities, ev, &self.cfg.kernel)?;
        }
        let drift = self.drift(&key, s, &ens.velocities);
        for (v, d) in ens.velocities.iter_mut().zip(&drift) {
            *v += *d;
        }
        let mut alpha = 0.0;
        if self.cfg.gate_enabled {
            let (shared, per) = self.evaluate_gate(&key, s + 1, &ens.velocities)?;
            let scale = (2.0 * self.cfg.dt).sqrt();
            let alphas: Vec<f64> = match per {
                Some(per) => per,
                None => vec![shared.alpha; ens.len()],
            };
            alpha = alphas.iter().copied().fold(0.0, f64::max);
            if alpha > 0.0 {
                ens.velocities
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| {
                        if alphas[i] > 0.0 {
                            let mut rng = key.stream(Purpose::Diffusion, s + 1, i as u64);
                            let xi = gate::mollifier_sample(1.0, &mut rng);
                            *v += xi * (scale * alphas[i]);
                        }
                    });
                ens.gate_active_time += self.cfg.dt;
            }
            ens.last_gate = Some(shared);
        }
        if let Some(i) = ens.velocities.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: s + 1,
                particle: i,
                dump: format!(
                    "v = {:?}, time = {}, jumps this step = {}",
                    ens.velocities[i].0,
                    t0 + self.cfg.dt,
                    events.len()
                ),
            });
        }
        ens.step = s + 1;
        ens.time = ens.step as f64 * self.cfg.dt;
        ens.jump_count += events.len() as u64;
        Ok(StepInfo {
            jumps: events.len() as u64,
            alpha,
        })
    }
}

/// Advances `ens` by one step of `cfg`.
pub fn step(ens: &mut Ensemble, cfg: &SimConfig) -> Result<StepInfo> {
    Stepper::new(cfg)?.step(ens)
}

/// Read-only view handed to observers.
pub struct Snapshot<'a> {
    pub step: u64,
    pub time: f64,
    pub velocities: &'a [Vec3],
    pub jump_count: u64,
    pub gate: Option<GateValue>,
}

pub trait Observer {
    fn observe(&mut self, snap: &Snapshot<'_>) -> Result<()>;
}

impl<F: FnMut(&Snapshot<'_>) -> Result<()>> Observer for F {
    fn observe(&mut self, snap: &Snapshot<'_>) -> Result<()> {
        self(snap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub record_every: u64,
    pub diagnostics: DiagnosticsOptions,
}

impl Default for RunPlan {
    fn default() -> Self {
        RunPlan {
            record_every: 50,
            diagnostics: DiagnosticsOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialSummary {
    pub mean: Vec3,
    pub energy: f64,
}

/// Size of the truncation error, measured on the terminal state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationAudit {
    /// Mean over sampled pairs of `∫_{z>Z}∫ |c|² dφ dz`, the second-moment rate
    /// of the omitted jumps.
    pub omitted_second_moment_rate: f64,
    /// Same mean over the full mark range.
    pub full_second_moment_rate: f64,
    /// Mean norm of the per-step drift increment divided by `dt`.
    pub mean_drift_speed: f64,
    /// Observed jumps per particle per unit time.
    pub jump_rate_observed: f64,
    pub jump_rate_expected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub initial: InitialSummary,
    pub steps: u64,
    pub final_time: f64,
    pub jump_count: u64,
    pub gate_active_time: f64,
    pub records: Vec<DiagnosticsRecord>,
    pub audit: Option<TruncationAudit>,
}

impl RunReport {
    /// Fraction of the elapsed time with `α > 0`.
    pub fn gate_active_fraction(&self) -> f64 {
        if self.final_time > 0.0 {
            self.gate_active_time / self.final_time
        } else {
            0.0
        }
    }
}

fn audit(stepper: &Stepper, ens: &Ensemble) -> TruncationAudit {
    let cfg = stepper.config();
    let kernel = cfg.kernel;
    let n = ens.len();
    let pairs = n.min(2000);
    let mut omitted = 0.0;
    let mut full = 0.0;
    for i in 0..pairs {
        let x = ens.velocities[i] - ens.velocities[(i + 1) % n];
        let r = x.norm();
        if r == 0.0 {
            continue;
        }
        let theta_pow =
            kernel.nu() * cfg.z_max / (kernel.k() * r.powf(kernel.gamma())) + PI.powf(-kernel.nu());
        let theta = theta_pow.powf(-1.0 / kernel.nu());
        let scale = r.powf(kernel.gamma() + 2.0);
        omitted += kernel.beta0_series(theta, theta_pow) * scale;
        full += kernel.beta0() * scale;
    }
    let mut mean_only = *stepper;
    mean_only.cfg.omitted_jump_noise = false;
    let drift = mean_only.drift(&ens.key, u64::MAX - 1, &ens.velocities);
    let mean_drift = drift.iter().map(|d| d.norm()).sum::<f64>() / n as f64 / cfg.dt;
    let observed = if ens.time > 0.0 {
        ens.jump_count as f64 / (n as f64 * ens.time)
    } else {
        0.0
    };
    TruncationAudit {
        omitted_second_moment_rate: omitted / pairs as f64,
        full_second_moment_rate: full / pairs as f64,
        mean_drift_speed: mean_drift,
        jump_rate_observed: observed,
        jump_rate_expected: 2.0 * PI * cfg.z_max,
    }
}

/// Runs `ens` to `t_end`, recording diagnostics at every multiple of
/// `record_every` steps (step 0 included) and handing the same snapshots to
/// `observers`.
pub fn run(
    cfg: &SimConfig,
    mut ens: Ensemble,
    plan: &RunPlan,
    observers: &mut [&mut dyn Observer],
) -> Result<(Ensemble, RunReport)> {
    let stepper = Stepper::new(cfg)?;
    if plan.record_every == 0 {
        return Err(config("record_every must be positive"));
    }
    let mut report = RunReport {
        config: *cfg,
        initial: InitialSummary {
            mean: ens.mean(),
            energy: ens.energy(),
        },
        steps: 0,
        final_time: 0.0,
        jump_count: 0,
        gate_active_time: 0.0,
        records: Vec::new(),
        audit: None,
    };
    if cfg.gate_enabled && ens.last_gate.is_none() {
        ens.last_gate = Some(
            stepper
                .evaluate_gate(&ens.key, ens.step, &ens.velocities)?
                .0,
        );
    }
    let n_steps = stepper.n_steps();
    let first = ens.step;
    loop {
        let done = ens.step - first;
        if done.is_multiple_of(plan.record_every) {
            let snap = Snapshot {
                step: ens.step,
                time: ens.time,
                velocities: &ens.velocities,
                jump_count: ens.jump_count,
                gate: ens.last_gate,
            };
            let rec = DiagnosticsRecord::from_snapshot(&snap, cfg, &plan.diagnostics);
            let rec = match rec {
                Ok(r) => r,
                Err(e) => return Err(abort(ens.step, e, report)),
            };
            report.records.push(rec);
            for obs in observers.iter_mut() {
                if let Err(e) = obs.observe(&snap) {
                    return Err(abort(ens.step, e, report));
                }
            }
        }
        if done == n_steps {
            break;
        }
        if let Err(e) = stepper.step(&mut ens) {
            let partial = report.clone();
            return Err(match e {
                Error::NonFinite { .. } => {
                    log::error!("{e}");
                    abort(ens.step + 1, e, partial)
                }
                other => abort(ens.step + 1, other, partial),
            });
        }
        report.steps += 1;
        report.final_time = ens.time;
        report.jump_count = ens.jump_count;
        report.gate_active_time = ens.gate_active_time;
    }
    report.audit = Some(audit(&stepper, &ens));
    Ok((ens, report))
}

fn abort(step: u64, err: Error, partial: RunReport) -> Error {
    Error::Aborted {
        step,
        reason: err.to_string(),
        partial: Box::new(partial),
    }
}

/// `W₂` between the two ensembles of a coupled run over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledReport {
    pub times: Vec<f64>,
    pub w2: Vec<f64>,
    /// `true` when `w2` holds exact assignment distances, `false` when it
    /// holds the index-coupling upper bound (ensembles above the exact limit).
    pub exact: bool,
    pub gate_active_time_a: f64,
    pub gate_active_time_b: f64,
}

/// Runs two ensembles side by side with shared randomness.
pub fn coupled_run(
    cfg: &SimConfig,
    mut a: Ensemble,
    mut b: Ensemble,
    record_every: u64,
) -> Result<CoupledReport> {
    let stepper = Stepper::new(cfg)?;
    if a.len() != b.len() {
        return Err(config("coupled ensembles must have equal sizes"));
    }
    if record_every == 0 {
        return Err(config("record_every must be positive"));
    }
    b.key = a.key;
    let exact = a.len() <= transport::EXACT_LIMIT;
    let distance = |x: &[Vec3], y: &[Vec3]| {
        if exact {
            transport::w2_exact(x, y)
        } else {
            transport::coupling_w2(x, y)
        }
    };
    let mut out = CoupledReport {
        times: Vec::new(),
        w2: Vec::new(),
        exact,
        gate_active_time_a: 0.0,
        gate_active_time_b: 0.0,
    };
    for k in 0..=stepper.n_steps() {
        if k % record_every == 0 {
            out.times.push(a.time);
            out.w2.push(distance(&a.velocities, &b.velocities)?);
        }
        if k == stepper.n_steps() {
            break;
        }
        stepper.step(&mut a)?;
        stepper.step(&mut b)?;
    }
    out.gate_active_time_a = a.gate_active_time;
    out.gate_active_time_b = b.gate_active_time;
    Ok(out)
}
