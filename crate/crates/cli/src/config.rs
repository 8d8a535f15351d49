//! Text configuration: sections `kernel`, `sim`, `gate`, `mollifier`,
//! `output`, and an optional `experiment`.

use std::path::{Path, PathBuf};

use nanbu_core::checkpoint::canonical_hash;
use nanbu_core::diagnostics::DiagnosticsOptions;
use nanbu_core::gate::gate_schedule;
use nanbu_core::{
    CompensationMode, GateParams, InitialSpec, KernelParams, MollifierParams, SimConfig,
};
use serde::{Deserialize, Serialize};

use crate::experiments::{ExperimentName, ExperimentParams};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_particles: usize,
    pub t_end: f64,
    pub dt: f64,
    pub z_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub gate_enabled: bool,
    #[serde(default)]
    pub gate_leave_one_out: bool,
    #[serde(default)]
    pub compensation: CompensationMode,
    #[serde(default = "yes")]
    pub omitted_jump_noise: bool,
    #[serde(default = "InitialSpec::standard_maxwellian")]
    pub initial: InitialSpec,
}

fn yes() -> bool {
    true
}

/// Gate parameters, either given directly or derived from entropy and
/// second-moment bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum GateSection {
    Schedule {
        entropy_bound: f64,
        second_moment_bound: f64,
        #[serde(default = "default_calibration")]
        calibration_c: f64,
        #[serde(default)]
        n_directions: Option<usize>,
        #[serde(default)]
        pair_budget: Option<usize>,
    },
    Explicit {
        r_ball: f64,
        delta: f64,
        eta: f64,
        #[serde(default)]
        n_directions: Option<usize>,
        #[serde(default)]
        pair_budget: Option<usize>,
    },
}

pub const DEFAULT_CALIBRATION: f64 = 0.25;

fn default_calibration() -> f64 {
    DEFAULT_CALIBRATION
}

impl GateSection {
    /// Schedule for a standard Maxwellian: `H = ln((2πe)^{3/2})`, `M = 3`.
    pub fn maxwellian_schedule() -> Self {
        GateSection::Schedule {
            entropy_bound: 1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln(),
            second_moment_bound: 3.0,
            calibration_c: DEFAULT_CALIBRATION,
            n_directions: None,
            pair_budget: None,
        }
    }

    pub fn resolve(&self) -> nanbu_core::Result<GateParams> {
        let (g, dirs, budget) = match *self {
            GateSection::Schedule {
                entropy_bound,
                second_moment_bound,
                calibration_c,
                n_directions,
                pair_budget,
            } => (
                gate_schedule(entropy_bound, second_moment_bound, calibration_c)?,
                n_directions,
                pair_budget,
            ),
            GateSection::Explicit {
                r_ball,
                delta,
                eta,
                n_directions,
                pair_budget,
            } => (
                GateParams::new(r_ball, delta, eta)?,
                n_directions,
                pair_budget,
            ),
        };
        let mut g = g;
        if let Some(d) = dirs {
            g = g.with_directions(d);
        }
        if let Some(b) = budget {
            g = g.with_pair_budget(b);
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default)]
    pub diagnostics: DiagnosticsOptions,
    /// Write the terminal state of each replica as a checkpoint.
    #[serde(default)]
    pub checkpoint: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_record_every() -> u64 {
    50
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out(),
            record_every: default_record_every(),
            diagnostics: DiagnosticsOptions::default(),
            checkpoint: false,
        }
    }
}

/// Fields of `[sim]` an experiment may replace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOverrides {
    pub n_particles: Option<usize>,
    pub t_end: Option<f64>,
    pub dt: Option<f64>,
    pub z_max: Option<f64>,
    pub gate_enabled: Option<bool>,
    pub compensation: Option<CompensationMode>,
    pub omitted_jump_noise: Option<bool>,
    pub initial: Option<InitialSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    #[serde(default)]
    pub overrides: SimOverrides,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub record_every: Option<u64>,
    #[serde(default)]
    pub params: ExperimentParams,
}

fn one() -> usize {
    1
}

impl ExperimentSpec {
    pub fn new(name: ExperimentName) -> Self {
        ExperimentSpec {
            name,
            overrides: SimOverrides::default(),
            replicas: name.default_replicas(),
            record_every: None,
            params: ExperimentParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replicas < 1 {
            return Err(ConfigError::Constraint(
                "experiment replicas must be >= 1".into(),
            ));
        }
        if self.record_every == Some(0) {
            return Err(ConfigError::Constraint(
                "experiment record_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The whole file, as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kernel: KernelParams,
    pub sim: SimSection,
    pub gate: GateSection,
    #[serde(default)]
    pub mollifier: MollifierParams,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

impl RunConfig {
    /// γ = -1.5, ν = 1.6, N = 10⁴, T = 1, dt = 10⁻³, Z = 50, gate on with the
    /// Maxwellian schedule.
    pub fn canonical() -> Self {
        RunConfig {
            kernel: KernelParams::canonical(),
            sim: SimSection {
                n_particles: 10_000,
                t_end: 1.0,
                dt: 1e-3,
                z_max: 50.0,
                seed: 0,
                gate_enabled: true,
                gate_leave_one_out: false,
                compensation: CompensationMode::default(),
                omitted_jump_noise: true,
                initial: InitialSpec::standard_maxwellian(),
            },
            gate: GateSection::maxwellian_schedule(),
            mollifier: MollifierParams::default(),
            output: OutputSection::default(),
            experiment: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let gate = self.gate.resolve().map_err(constraint)?;
        let cfg = SimConfig {
            n_particles: self.sim.n_particles,
            t_end: self.sim.t_end,
            dt: self.sim.dt,
            z_max: self.sim.z_max,
            kernel: self.kernel,
            mollifier: self.mollifier,
            gate,
            gate_enabled: self.sim.gate_enabled,
            gate_leave_one_out: self.sim.gate_leave_one_out,
            compensation: self.sim.compensation,
            omitted_jump_noise: self.sim.omitted_jump_noise,
            seed: self.sim.seed,
        };
        cfg.validate().map_err(constraint)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim_config()?;
        self.sim.initial.validate().map_err(constraint)?;
        if self.output.record_every == 0 {
            return Err(ConfigError::Constraint(
                "output record_every must be >= 1".into(),
            ));
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
            self.with_overrides(&e.overrides).sim_config()?;
        }
        Ok(())
    }

    /// Copy with the overridden `[sim]` fields replaced.
    pub fn with_overrides(&self, o: &SimOverrides) -> RunConfig {
        let mut c = self.clone();
        let s = &mut c.sim;
        if let Some(x) = o.n_particles {
            s.n_particles = x;
        }
        if let Some(x) = o.t_end {
            s.t_end = x;
        }
        if let Some(x) = o.dt {
            s.dt = x;
        }
        if let Some(x) = o.z_max {
            s.z_max = x;
        }
        if let Some(x) = o.gate_enabled {
            s.gate_enabled = x;
        }
        if let Some(x) = o.compensation {
            s.compensation = x;
        }
        if let Some(x) = o.omitted_jump_noise {
            s.omitted_jump_noise = x;
        }
        if let Some(x) = &o.initial {
            s.initial = x.clone();
        }
        c
    }

    /// SHA-256 of the canonical serialization, hex encoded. The output
    /// directory is not part of the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        hex::encode(canonical_hash(&c).expect("configuration serializes"))
    }
}

fn constraint(e: nanbu_core::Error) -> ConfigError {
    ConfigError::Constraint(e.to_string())
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text)
}
