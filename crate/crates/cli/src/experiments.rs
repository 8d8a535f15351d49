//! Named experiments. Each one runs replicas of the simulator (or of a
//! library-level Monte Carlo check), writes CSV artifacts, and returns
//! pass/fail outcomes for the criteria it encodes.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use nanbu_core::diagnostics::{
    self, fmt_f64, hls_battery, hls_inequality_check, DiagnosticsOptions, DiagnosticsRecord,
    GridSpec,
};
use nanbu_core::identities::{jump_integrals_mc, GROWTH_C2, GROWTH_C4};
use nanbu_core::kernel::k_gamma;
use nanbu_core::particles::{coupled_run, init_ensemble, run, RunPlan};
use nanbu_core::transport::sliced_w2;
use nanbu_core::{
    Ensemble, Error, InitialSpec, Purpose, RunReport, SimConfig, StreamKey, Vec3, COMPENSATION_SIGN,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentSpec, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Conservation,
    Relaxation,
    GateVanishing,
    FisherBudget,
    ChaosConvergence,
    Stability,
    Hls,
    KernelIdentities,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 8] = [
        ExperimentName::Conservation,
        ExperimentName::Relaxation,
        ExperimentName::GateVanishing,
        ExperimentName::FisherBudget,
        ExperimentName::ChaosConvergence,
        ExperimentName::Stability,
        ExperimentName::Hls,
        ExperimentName::KernelIdentities,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentName::Conservation => "conservation",
            ExperimentName::Relaxation => "relaxation",
            ExperimentName::GateVanishing => "gate_vanishing",
            ExperimentName::FisherBudget => "fisher_budget",
            ExperimentName::ChaosConvergence => "chaos_convergence",
            ExperimentName::Stability => "stability",
            ExperimentName::Hls => "hls",
            ExperimentName::KernelIdentities => "kernel_identities",
        }
    }

    /// Seeds (or seed triples) per setting when none is given.
    pub fn default_replicas(&self) -> usize {
        match self {
            ExperimentName::Conservation => 50,
            ExperimentName::GateVanishing
            | ExperimentName::ChaosConvergence
            | ExperimentName::Stability => 10,
            _ => 1,
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ExperimentName::ALL.iter().map(|e| e.as_str()).collect();
                format!(
                    "unknown experiment `{s}`; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

/// Experiment-specific knobs; anything unset takes the default of the
/// experiment it applies to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentParams {
    /// Ensemble sizes swept by `gate_vanishing`, `fisher_budget`,
    /// `chaos_convergence` and `hls`.
    pub n_values: Option<Vec<usize>>,
    /// Monte Carlo samples per pair for `kernel_identities`.
    pub samples: Option<usize>,
    /// Random pairs for `kernel_identities`.
    pub pairs: Option<usize>,
    /// Per-particle size of the initial perturbation for `stability`.
    pub perturbation: Option<f64>,
    /// Directions of the sliced distance in `chaos_convergence`.
    pub projections: Option<usize>,
    /// Singular exponent of the pairwise moment in `hls`.
    pub lambda: Option<f64>,
    /// Interpolation exponent `r` in `hls`.
    pub r: Option<f64>,
    /// Grid resolution of the Fisher estimates.
    pub fisher_resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Criterion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Noop,
}

impl Status {
    pub fn of(criteria: &[Criterion]) -> Status {
        if criteria.is_empty() {
            Status::Noop
        } else if criteria.iter().all(|c| c.passed) {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// What an experiment produced. Paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub experiment: String,
    pub status: Status,
    pub seeds: Vec<u64>,
    pub criteria: Vec<Criterion>,
    /// Replicas that aborted, with the reason.
    pub aborted: Vec<String>,
    pub csv: Vec<PathBuf>,
    /// Measured quantities behind the criteria.
    pub values: serde_json::Value,
}

impl ExperimentOutcome {
    fn new(
        name: &str,
        seeds: Vec<u64>,
        criteria: Vec<Criterion>,
        aborted: Vec<String>,
        csv: Vec<PathBuf>,
        values: serde_json::Value,
    ) -> Self {
        let mut criteria = criteria;
        if !aborted.is_empty() {
            criteria.push(Criterion::new(
                "no_aborted_replica",
                false,
                aborted.join("; "),
            ));
        }
        ExperimentOutcome {
            experiment: name.to_string(),
            status: Status::of(&criteria),
            seeds,
            criteria,
            aborted,
            csv,
            values,
        }
    }
}

/// Growth rates of the moment envelopes `M_k(t) ≤ e^{Ĉt}(1 + M_k(0))`, frozen
/// at twice the largest rate fitted on 50 validation seeds of the canonical
/// configuration at N = 250. The fitted `M₂` rate is 0, so `C2` is a floor.
pub const MOMENT_ENVELOPE_C2: f64 = 0.1;
pub const MOMENT_ENVELOPE_C4: f64 = 1.35;

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

struct Replica {
    label: String,
    cfg: SimConfig,
    initial: InitialSpec,
    plan: RunPlan,
}

struct ReplicaResult {
    label: String,
    seed: u64,
    report: Option<RunReport>,
    ensemble: Option<Ensemble>,
    error: Option<String>,
    csv: PathBuf,
}

fn write_records(path: &Path, records: &[DiagnosticsRecord]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    diagnostics::write_csv(&mut w, records)?;
    w.flush()?;
    Ok(())
}

fn resolve_initial(initial: &InitialSpec, base: &Path) -> InitialSpec {
    match initial {
        InitialSpec::File { path } if path.is_relative() => InitialSpec::File {
            path: base.join(path),
        },
        other => other.clone(),
    }
}

/// Runs replicas in parallel, one ensemble per worker, and writes one CSV per
/// replica (partial rows on abort).
fn run_replicas(
    replicas: Vec<Replica>,
    out: &Path,
    keep_state: bool,
) -> anyhow::Result<Vec<ReplicaResult>> {
    let results: Vec<anyhow::Result<ReplicaResult>> = replicas
        .into_par_iter()
        .map(|r| {
            let csv = PathBuf::from(format!("{}.csv", r.label));
            let seed = r.cfg.seed;
            let outcome = init_ensemble(&r.cfg, &r.initial)
                .and_then(|ens| run(&r.cfg, ens, &r.plan, &mut []));
            let (report, ensemble, error) = match outcome {
                Ok((ens, rep)) => (Some(rep), keep_state.then_some(ens), None),
                Err(Error::Aborted {
                    step,
                    reason,
                    partial,
                }) => {
                    write_records(&out.join(&csv), &partial.records)?;
                    return Ok(ReplicaResult {
                        label: r.label,
                        seed,
                        report: None,
                        ensemble: None,
                        error: Some(format!("aborted at step {step}: {reason}")),
                        csv,
                    });
                }
                Err(e) => (None, None, Some(e.to_string())),
            };
            let rows = report.as_ref().map(|r| r.records.as_slice()).unwrap_or(&[]);
            write_records(&out.join(&csv), rows)?;
            Ok(ReplicaResult {
                label: r.label,
                seed,
                report,
                ensemble,
                error,
                csv,
            })
        })
        .collect();
    results.into_iter().collect()
}

fn aborted(results: &[ReplicaResult]) -> Vec<String> {
    results
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.label)))
        .collect()
}

/// The `[sim]` configuration with the experiment's overrides applied.
fn base_config(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
) -> anyhow::Result<(SimConfig, InitialSpec, u64)> {
    let c = cfg.with_overrides(&spec.overrides);
    let sim = c.sim_config()?;
    let n_steps = sim.n_steps()?;
    let record_every = spec
        .record_every
        .unwrap_or(cfg.output.record_every)
        .min(n_steps.max(1));
    Ok((sim, c.sim.initial.clone(), record_every))
}

pub fn run_experiment(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match spec.name {
        ExperimentName::Conservation => conservation(cfg, spec, out, base_dir),
        ExperimentName::Relaxation => relaxation(cfg, spec, out, base_dir),
        ExperimentName::GateVanishing => gate_vanishing(cfg, spec, out, base_dir),
        ExperimentName::FisherBudget => fisher_budget(cfg, spec, out, base_dir),
        ExperimentName::ChaosConvergence => chaos_convergence(cfg, spec, out, base_dir),
        ExperimentName::Stability => stability(cfg, spec, out, base_dir),
        ExperimentName::Hls => hls(cfg, spec, out),
        ExperimentName::KernelIdentities => kernel_identities(cfg, spec, out),
    }
}

/// Replicas of the configured run without criteria.
pub fn plain_run(
    cfg: &RunConfig,
    replicas: usize,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    fs::create_dir_all(out)?;
    let sim = cfg.sim_config()?;
    let initial = resolve_initial(&cfg.sim.initial, base_dir);
    let plan = RunPlan {
        record_every: cfg.output.record_every.min(sim.n_steps()?.max(1)),
        diagnostics: cfg.output.diagnostics.clone(),
    };
    let reps = (0..replicas as u64)
        .map(|r| Replica {
            label: format!("run_seed{}", sim.seed + r),
            cfg: SimConfig {
                seed: sim.seed + r,
                ..sim
            },
            initial: initial.clone(),
            plan: plan.clone(),
        })
        .collect();
    let results = run_replicas(reps, out, cfg.output.checkpoint)?;
    let mut csv = Vec::new();
    for r in &results {
        csv.push(r.csv.clone());
        if let Some(rep) = &r.report {
            let path = PathBuf::from(format!("{}.report.json", r.label));
            fs::write(out.join(&path), serde_json::to_string_pretty(rep)?)?;
            csv.push(path);
        }
        if let Some(ens) = &r.ensemble {
            let path = PathBuf::from(format!("{}.ckpt", r.label));
            let mut hash = [0u8; 32];
            hex::decode_to_slice(cfg.hash(), &mut hash)?;
            nanbu_core::checkpoint::write(&out.join(&path), ens, &hash)?;
            csv.push(path);
        }
    }
    let seeds = results.iter().map(|r| r.seed).collect();
    let ab = aborted(&results);
    Ok(ExperimentOutcome::new(
        "run",
        seeds,
        Vec::new(),
        ab,
        csv,
        json!({}),
    ))
}

fn conservation(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, record_every) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let plan = RunPlan {
        record_every,
        diagnostics: DiagnosticsOptions::minimal(),
    };
    let reps = (0..spec.replicas as u64)
        .map(|r| Replica {
            label: format!("conservation_seed{}", sim.seed + r),
            cfg: SimConfig {
                seed: sim.seed + r,
                ..sim
            },
            initial: initial.clone(),
            plan: plan.clone(),
        })
        .collect();
    let results = run_replicas(reps, out, false)?;
    let reports: Vec<&RunReport> = results.iter().filter_map(|r| r.report.as_ref()).collect();
    let mut criteria = Vec::new();

    // Momentum drift, componentwise t-statistic across seeds.
    let drifts: Vec<Vec3> = reports
        .iter()
        .map(|r| r.records.last().unwrap().mean_momentum - r.records[0].mean_momentum)
        .collect();
    let k = drifts.len() as f64;
    let mut z_max: f64 = 0.0;
    if drifts.len() >= 2 {
        for a in 0..3 {
            let m = drifts.iter().map(|d| d[a]).sum::<f64>() / k;
            let var = drifts.iter().map(|d| (d[a] - m).powi(2)).sum::<f64>() / (k - 1.0);
            let se = (var / k).sqrt();
            z_max = z_max.max(if se > 0.0 {
                m.abs() / se
            } else if m == 0.0 {
                0.0
            } else {
                f64::INFINITY
            });
        }
        criteria.push(Criterion::new(
            "momentum_drift_within_4_sigma",
            z_max <= 4.0,
            format!("largest |mean drift| / standard error over components = {z_max:.3} across {} seeds", drifts.len()),
        ));
    } else {
        criteria.push(Criterion::new(
            "momentum_drift_within_4_sigma",
            false,
            "needs at least two seeds",
        ));
    }

    // Moment envelopes.
    let mut fitted = (0.0f64, 0.0f64);
    let mut finite = true;
    let mut envelope_ok = true;
    let mut energy_ok = true;
    let n = sim.n_particles as f64;
    for rep in &reports {
        let r0 = &rep.records[0];
        // Standard error of the initial energy from its own scale: sd(|v|²) ≤ √M4.
        let energy_band = 4.0 * r0.moment4.sqrt() / n.sqrt();
        for rec in &rep.records {
            finite &= rec.moment2.is_finite() && rec.moment4.is_finite();
            let t = rec.time;
            if t > 0.0 {
                fitted.0 = fitted.0.max((rec.moment2 / (1.0 + r0.moment2)).ln() / t);
                fitted.1 = fitted.1.max((rec.moment4 / (1.0 + r0.moment4)).ln() / t);
            }
            envelope_ok &= rec.moment2 <= (MOMENT_ENVELOPE_C2 * t).exp() * (1.0 + r0.moment2);
            envelope_ok &= rec.moment4 <= (MOMENT_ENVELOPE_C4 * t).exp() * (1.0 + r0.moment4);
            energy_ok &= rec.moment2 <= r0.moment2 + 4.0 * t + energy_band;
        }
    }
    criteria.push(Criterion::new(
        "moments_finite",
        finite && !reports.is_empty(),
        format!("{} runs", reports.len()),
    ));
    criteria.push(Criterion::new(
        "moment_envelopes",
        envelope_ok && !reports.is_empty(),
        format!(
            "fitted rates C2 = {:.4}, C4 = {:.4}; frozen C2 = {MOMENT_ENVELOPE_C2}, C4 = {MOMENT_ENVELOPE_C4}",
            fitted.0.max(0.0),
            fitted.1.max(0.0)
        ),
    ));
    criteria.push(Criterion::new(
        "energy_control",
        energy_ok && !reports.is_empty(),
        "M2(t) <= M2(0) + 4t + 4 standard errors",
    ));
    let values = json!({
        "momentum_z_max": z_max,
        "fitted_c2": fitted.0.max(0.0),
        "fitted_c4": fitted.1.max(0.0),
    });
    let seeds = results.iter().map(|r| r.seed).collect();
    let csv = results.iter().map(|r| r.csv.clone()).collect();
    let ab = aborted(&results);
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

fn relaxation(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, _) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let n_steps = sim.n_steps()?;
    let record_every = spec.record_every.unwrap_or((n_steps / 20).max(1));
    let plan = RunPlan {
        record_every,
        diagnostics: DiagnosticsOptions {
            fisher_resolution: None,
            neg_moment_lambda: None,
            ..DiagnosticsOptions::default()
        },
    };
    let reps = (0..spec.replicas as u64)
        .map(|r| Replica {
            label: format!("relaxation_seed{}", sim.seed + r),
            cfg: SimConfig {
                seed: sim.seed + r,
                ..sim
            },
            initial: initial.clone(),
            plan: plan.clone(),
        })
        .collect();
    let results = run_replicas(reps, out, false)?;
    let mut entropy_ok = !results.is_empty();
    let mut w2_ok = !results.is_empty();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut drops = Vec::new();
    for rep in results.iter().filter_map(|r| r.report.as_ref()) {
        for w in rep.records.windows(2) {
            let band = 3.0 * (w[0].entropy_se.powi(2) + w[1].entropy_se.powi(2)).sqrt();
            let excess = (w[1].entropy - w[0].entropy) - band;
            worst_excess = worst_excess.max(excess);
            entropy_ok &= excess <= 0.0;
        }
        let first = rep.records.first().unwrap().w2_to_reference;
        let last = rep.records.last().unwrap().w2_to_reference;
        let drop = 1.0 - last / first;
        drops.push(drop);
        w2_ok &= drop >= 0.3;
    }
    let criteria = vec![
        Criterion::new(
            "entropy_non_increasing_within_3_sigma",
            entropy_ok,
            format!("largest increase beyond the band = {worst_excess:.4}"),
        ),
        Criterion::new(
            "w2_to_maxwellian_drops_30_percent",
            w2_ok,
            format!("relative drops {drops:.3?}"),
        ),
    ];
    let seeds = results.iter().map(|r| r.seed).collect();
    let csv = results.iter().map(|r| r.csv.clone()).collect();
    let ab = aborted(&results);
    let values = json!({ "w2_drops": drops, "entropy_worst_excess": worst_excess });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

fn n_values(spec: &ExperimentSpec, default: &[usize]) -> anyhow::Result<Vec<usize>> {
    let v = spec
        .params
        .n_values
        .clone()
        .unwrap_or_else(|| default.to_vec());
    if v.len() < 2 {
        bail!("n_values needs at least two ensemble sizes");
    }
    Ok(v)
}

fn gate_vanishing(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, _) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let ns = n_values(spec, &[1000, 4000, 16000])?;
    let plan = RunPlan {
        record_every: spec.record_every.unwrap_or(sim.n_steps()?.max(1)),
        diagnostics: DiagnosticsOptions::minimal(),
    };
    let mut reps = Vec::new();
    for &n in &ns {
        for r in 0..spec.replicas as u64 {
            reps.push(Replica {
                label: format!("gate_n{n}_seed{}", sim.seed + r),
                cfg: SimConfig {
                    n_particles: n,
                    seed: sim.seed + r,
                    ..sim
                },
                initial: initial.clone(),
                plan: plan.clone(),
            });
        }
    }
    let results = run_replicas(reps, out, false)?;
    let mut medians = Vec::new();
    for (k, _) in ns.iter().enumerate() {
        let fr: Vec<f64> = results[k * spec.replicas..(k + 1) * spec.replicas]
            .iter()
            .filter_map(|r| r.report.as_ref().map(|p| p.gate_active_fraction()))
            .collect();
        medians.push(median(&fr));
    }
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let last = *medians.last().unwrap();
    let last_zero = last == 0.0;
    let criteria = vec![
        Criterion::new(
            "gate_fraction_non_increasing_in_n",
            monotone,
            format!("median active fraction {:?} at N = {ns:?}", medians),
        ),
        Criterion::new(
            "gate_fraction_zero_at_largest_n",
            last_zero,
            format!("median {last} at N = {}", ns.last().unwrap()),
        ),
    ];
    let seeds = (0..spec.replicas as u64).map(|r| sim.seed + r).collect();
    let csv = results.iter().map(|r| r.csv.clone()).collect();
    let ab = aborted(&results);
    let values = json!({ "n": ns, "median_active_fraction": medians });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

/// Trapezoid rule over the recorded times.
fn time_integral(records: &[DiagnosticsRecord], f: impl Fn(&DiagnosticsRecord) -> f64) -> f64 {
    records
        .windows(2)
        .map(|w| 0.5 * (f(&w[0]) + f(&w[1])) * (w[1].time - w[0].time))
        .sum()
}

fn fisher_budget(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, record_every) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let ns = n_values(spec, &[1000, 2000])?;
    let plan = RunPlan {
        record_every,
        diagnostics: DiagnosticsOptions {
            entropy_k: None,
            neg_moment_lambda: None,
            w2_projections: None,
            fisher_resolution: Some(spec.params.fisher_resolution.unwrap_or(64)),
            ..DiagnosticsOptions::default()
        },
    };
    let mut reps = Vec::new();
    for &n in &ns {
        for r in 0..spec.replicas as u64 {
            reps.push(Replica {
                label: format!("fisher_n{n}_seed{}", sim.seed + r),
                cfg: SimConfig {
                    n_particles: n,
                    seed: sim.seed + r,
                    ..sim
                },
                initial: initial.clone(),
                plan: plan.clone(),
            });
        }
    }
    let results = run_replicas(reps, out, false)?;
    let mut budgets = Vec::new();
    for k in 0..ns.len() {
        let b: Vec<f64> = results[k * spec.replicas..(k + 1) * spec.replicas]
            .iter()
            .filter_map(|r| {
                r.report
                    .as_ref()
                    .map(|p| time_integral(&p.records, |x| x.fisher_frac))
            })
            .collect();
        budgets.push(median(&b));
    }
    let finite = budgets.iter().all(|b| b.is_finite() && *b >= 0.0);
    let ratios: Vec<f64> = budgets.windows(2).map(|w| w[1] / w[0]).collect();
    let stable = ratios.iter().all(|r| *r >= 0.5 && *r <= 2.0);
    let criteria = vec![
        Criterion::new(
            "fisher_budget_finite",
            finite,
            format!("{budgets:?} at N = {ns:?}"),
        ),
        Criterion::new(
            "fisher_budget_stable_within_2x",
            finite && stable,
            format!("ratios {ratios:.3?}"),
        ),
    ];
    let seeds = (0..spec.replicas as u64).map(|r| sim.seed + r).collect();
    let csv = results.iter().map(|r| r.csv.clone()).collect();
    let ab = aborted(&results);
    let values = json!({ "n": ns, "budget": budgets, "ratios": ratios });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

fn chaos_convergence(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, _) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let ns = n_values(spec, &[500, 2000, 8000])?;
    let projections = spec.params.projections.unwrap_or(64);
    let plan = RunPlan {
        record_every: spec.record_every.unwrap_or(sim.n_steps()?.max(1)),
        diagnostics: DiagnosticsOptions::minimal(),
    };
    let scales = ns.len() as u64;
    let mut reps = Vec::new();
    for t in 0..spec.replicas as u64 {
        for (k, &n) in ns.iter().enumerate() {
            let seed = sim.seed + t * scales + k as u64;
            reps.push(Replica {
                label: format!("chaos_triple{t}_n{n}"),
                cfg: SimConfig {
                    n_particles: n,
                    seed,
                    ..sim
                },
                initial: initial.clone(),
                plan: plan.clone(),
            });
        }
    }
    let results = run_replicas(reps, out, true)?;
    let ab = aborted(&results);
    let mut gaps: Vec<Vec<f64>> = vec![Vec::new(); ns.len() - 1];
    let mut rows = Vec::new();
    for t in 0..spec.replicas {
        let states: Vec<&Ensemble> = results[t * ns.len()..(t + 1) * ns.len()]
            .iter()
            .filter_map(|r| r.ensemble.as_ref())
            .collect();
        if states.len() != ns.len() {
            continue;
        }
        let mut row = vec![t as f64];
        for k in 0..ns.len() - 1 {
            let d = sliced_w2(
                &states[k].velocities,
                &states[k + 1].velocities,
                projections,
                sim.seed + t as u64,
            )?;
            gaps[k].push(d);
            row.push(d);
        }
        rows.push(row);
    }
    let medians: Vec<f64> = gaps.iter().map(|g| median(g)).collect();
    let monotone = !gaps[0].is_empty() && medians.windows(2).all(|w| w[1] < w[0]);
    let majority = (0..rows.len())
        .filter(|&t| gaps.windows(2).all(|w| w[1][t] < w[0][t]))
        .count();
    let path = PathBuf::from("chaos_gaps.csv");
    let mut text = String::from("triple");
    for k in 0..ns.len() - 1 {
        text.push_str(&format!(",w2_{}_{}", ns[k], ns[k + 1]));
    }
    text.push('\n');
    for row in &rows {
        text.push_str(
            &row.iter()
                .map(|x| fmt_f64(*x))
                .collect::<Vec<_>>()
                .join(","),
        );
        text.push('\n');
    }
    fs::write(out.join(&path), text)?;
    let criteria = vec![Criterion::new(
        "terminal_sliced_w2_decreases_in_median",
        monotone,
        format!(
            "medians {medians:.4?} between N = {ns:?}; monotone in {majority} of {} triples",
            rows.len()
        ),
    )];
    let mut csv: Vec<PathBuf> = results.iter().map(|r| r.csv.clone()).collect();
    csv.push(path);
    let seeds = (0..spec.replicas as u64 * scales)
        .map(|s| sim.seed + s)
        .collect();
    let values = json!({ "n": ns, "median_gaps": medians, "monotone_triples": majority });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

/// `a_i + size · u_i` with `u_i` uniform on the unit sphere.
pub fn perturb(a: &Ensemble, size: f64, seed: u64) -> Ensemble {
    let key = StreamKey::new(seed);
    let velocities = a
        .velocities
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = key.stream(Purpose::Auxiliary, 1, i as u64);
            let u = loop {
                let x = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let r2 = x.norm2();
                if r2 > 1e-6 && r2 <= 1.0 {
                    break x / r2.sqrt();
                }
            };
            *v + u * size
        })
        .collect();
    Ensemble::from_velocities(velocities, a.key.seed())
}

fn stability(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
    base_dir: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let (sim, initial, record_every) = base_config(cfg, spec)?;
    let initial = resolve_initial(&initial, base_dir);
    let size = spec.params.perturbation.unwrap_or(0.01);
    let runs: Vec<anyhow::Result<(u64, nanbu_core::particles::CoupledReport)>> = (0..spec.replicas
        as u64)
        .into_par_iter()
        .map(|r| {
            let c = SimConfig {
                seed: sim.seed + r,
                ..sim
            };
            let a = init_ensemble(&c, &initial)?;
            let b = perturb(&a, size, c.seed);
            Ok((c.seed, coupled_run(&c, a, b, record_every)?))
        })
        .collect();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut csv = Vec::new();
    let mut seeds = Vec::new();
    let mut ab = Vec::new();
    let mut exact = true;
    for r in runs {
        match r {
            Ok((seed, rep)) => {
                let w0 = rep.w2[0];
                let growth = rep.w2.iter().copied().fold(0.0, f64::max) / w0;
                worst = worst.max(growth);
                ok &= growth <= 10.0;
                exact &= rep.exact;
                let path = PathBuf::from(format!("stability_seed{seed}.csv"));
                let mut text = String::from("t,w2\n");
                for (t, w) in rep.times.iter().zip(&rep.w2) {
                    text.push_str(&format!("{},{}\n", fmt_f64(*t), fmt_f64(*w)));
                }
                fs::write(out.join(&path), text)?;
                csv.push(path);
                seeds.push(seed);
            }
            Err(e) => ab.push(e.to_string()),
        }
    }
    let criteria = vec![Criterion::new(
        "w2_stays_below_10x_initial",
        ok && !seeds.is_empty(),
        format!(
            "largest max_t W2(t) / W2(0) = {worst:.3} over {} seeds ({} distances)",
            seeds.len(),
            if exact {
                "exact"
            } else {
                "coupling upper-bound"
            }
        ),
    )];
    let values = json!({ "worst_growth": worst, "exact": exact });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        seeds,
        criteria,
        ab,
        csv,
        values,
    ))
}

fn hls(cfg: &RunConfig, spec: &ExperimentSpec, out: &Path) -> anyhow::Result<ExperimentOutcome> {
    let sim = cfg.with_overrides(&spec.overrides).sim_config()?;
    let ns = n_values(spec, &[2000, 4000])?;
    let lambda = spec.params.lambda.unwrap_or(0.5);
    let r = spec.params.r.unwrap_or(0.85);
    let resolution = spec.params.fisher_resolution.unwrap_or(64);
    let battery = hls_battery();
    let jobs: Vec<(usize, usize)> = (0..battery.len())
        .flat_map(|f| (0..ns.len()).map(move |k| (f, k)))
        .collect();
    let reports: Vec<anyhow::Result<nanbu_core::diagnostics::HlsReport>> = jobs
        .par_iter()
        .map(|&(f, k)| {
            let c = SimConfig {
                n_particles: ns[k],
                seed: sim.seed + f as u64,
                ..sim
            };
            let ens = init_ensemble(&c, &battery[f].1)?;
            let grid = GridSpec::auto(&ens.velocities, resolution)?;
            Ok(hls_inequality_check(
                &ens.velocities,
                &sim.kernel,
                lambda,
                r,
                &grid,
            )?)
        })
        .collect();
    let mut c_hat = vec![0.0f64; ns.len()];
    let mut finite = true;
    let mut text = String::from("family,n,lhs,fisher,moment,rhs,ratio\n");
    for (&(f, k), rep) in jobs.iter().zip(reports) {
        let rep = rep?;
        finite &= rep.ratio.is_finite();
        c_hat[k] = c_hat[k].max(rep.ratio);
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            battery[f].0,
            ns[k],
            fmt_f64(rep.lhs),
            fmt_f64(rep.fisher),
            fmt_f64(rep.moment),
            fmt_f64(rep.rhs),
            fmt_f64(rep.ratio)
        ));
    }
    let path = PathBuf::from("hls.csv");
    fs::write(out.join(&path), text)?;
    let ratios: Vec<f64> = c_hat.windows(2).map(|w| w[1] / w[0]).collect();
    let stable = ratios.iter().all(|x| *x >= 0.5 && *x <= 2.0);
    let criteria = vec![Criterion::new(
        "single_constant_stable_within_2x",
        finite && stable,
        format!(
            "C-hat {c_hat:.4?} at N = {ns:?} over {} families",
            battery.len()
        ),
    )];
    let values = json!({ "n": ns, "c_hat": c_hat, "families": battery.len() });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        vec![sim.seed],
        criteria,
        Vec::new(),
        vec![path],
        values,
    ))
}

/// Uniform pairs in `[-2, 2]³`.
pub fn random_pairs(n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = StreamKey::new(seed).stream(Purpose::Auxiliary, 0, 0);
    let mut draw = || {
        Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        )
    };
    (0..n).map(|_| (draw(), draw())).collect()
}

fn kernel_identities(
    cfg: &RunConfig,
    spec: &ExperimentSpec,
    out: &Path,
) -> anyhow::Result<ExperimentOutcome> {
    let kernel = cfg.kernel;
    let seed = cfg.sim.seed;
    let samples = spec.params.samples.unwrap_or(1_000_000);
    let pairs = random_pairs(spec.params.pairs.unwrap_or(10), seed);
    let key = StreamKey::new(seed);
    let beta0 = kernel.beta0();
    let mut first_ok = true;
    let mut second_ok = true;
    let mut growth_ok = true;
    let mut worst_sigma: f64 = 0.0;
    let mut ratios = (0.0f64, 0.0f64);
    let mut text = String::from("pair,vx,vy,vz,wx,wy,wz,c1x,c1x_se,c1y,c1y_se,c1z,c1z_se,c1x_ref,c1y_ref,c1z_ref,c2,c2_se,c2_ref,g4,g4_se\n");
    for (i, (v, w)) in pairs.iter().enumerate() {
        let r = jump_integrals_mc(&kernel, *v, *w, 0.0, samples, &key, i as u64)?;
        let x = *v - *w;
        let first = k_gamma(x, kernel.gamma()) * (COMPENSATION_SIGN * beta0);
        for a in 0..3 {
            let s = (r.first[a] - first[a]).abs() / r.first_se[a];
            worst_sigma = worst_sigma.max(s);
            first_ok &= s <= 3.0;
        }
        let second = beta0 * x.norm().powf(kernel.gamma() + 2.0);
        let s2 = (r.second - second).abs() / r.second_se;
        worst_sigma = worst_sigma.max(s2);
        second_ok &= s2 <= 3.0;
        let closed = kernel.compensation_mean(*v, *w, 0.0)?;
        first_ok &= (closed - first).norm() <= 1e-12 * first.norm().max(1e-300);
        let b2 = v.norm2() + w.norm2() + 1.0;
        let b4 = v.norm2().powi(2) + w.norm2().powi(2) + 1.0;
        ratios.0 = ratios.0.max(r.second / b2);
        ratios.1 = ratios.1.max(r.growth4 / b4);
        growth_ok &= r.second <= GROWTH_C2 * b2 && r.growth4 <= GROWTH_C4 * b4;
        let cols = [
            v.x(),
            v.y(),
            v.z(),
            w.x(),
            w.y(),
            w.z(),
            r.first.x(),
            r.first_se.x(),
            r.first.y(),
            r.first_se.y(),
            r.first.z(),
            r.first_se.z(),
            first.x(),
            first.y(),
            first.z(),
            r.second,
            r.second_se,
            second,
            r.growth4,
            r.growth4_se,
        ];
        text.push_str(&format!(
            "{i},{}\n",
            cols.iter()
                .map(|c| fmt_f64(*c))
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
    // Omitted range z > 5 at a unit relative velocity.
    let z = 5.0;
    let unit = Vec3::new(1.0, 0.0, 0.0);
    let partial = jump_integrals_mc(
        &kernel,
        unit,
        Vec3::ZERO,
        z,
        samples * 10,
        &key,
        pairs.len() as u64,
    )?;
    let closed = kernel.compensation_mean(unit, Vec3::ZERO, z)?;
    let mut partial_sigma: f64 = 0.0;
    for a in 0..3 {
        if partial.first_se[a] > 0.0 {
            partial_sigma =
                partial_sigma.max((partial.first[a] - closed[a]).abs() / partial.first_se[a]);
        } else if partial.first[a] != closed[a] {
            partial_sigma = f64::INFINITY;
        }
    }
    let path = PathBuf::from("kernel_identities.csv");
    fs::write(out.join(&path), text)?;
    let criteria = vec![
        Criterion::new(
            "first_moment_identity_3_sigma",
            first_ok,
            format!("{} pairs, {samples} samples each", pairs.len()),
        ),
        Criterion::new(
            "second_moment_identity_3_sigma",
            second_ok,
            format!("largest deviation {worst_sigma:.2} standard errors"),
        ),
        Criterion::new(
            "omitted_range_mean_3_sigma",
            partial_sigma <= 3.0,
            format!(
                "Z = {z}: MC {:?} vs closed form {:?}, {partial_sigma:.2} standard errors",
                partial.first.0, closed.0
            ),
        ),
        Criterion::new(
            "moment_growth_bounds",
            growth_ok,
            format!(
                "ratios k=2: {:.3}, k=4: {:.3}; frozen C2 = {GROWTH_C2}, C4 = {GROWTH_C4}",
                ratios.0, ratios.1
            ),
        ),
    ];
    let values = json!({
        "worst_sigma": worst_sigma,
        "partial_sigma": partial_sigma,
        "growth_ratio_2": ratios.0,
        "growth_ratio_4": ratios.1,
    });
    Ok(ExperimentOutcome::new(
        spec.name.as_str(),
        vec![seed],
        criteria,
        Vec::new(),
        vec![path],
        values,
    ))
}
