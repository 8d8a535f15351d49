//! Regularity gate: the mollifier, smooth cutoffs, the gate functional
//! `α^R_{δ,η}` on weighted samples and the geometric condition 𝔸(R, δ, η).
//!
//! `α` is the sum of two terms. The slab term detects a sample putting too
//! much pair mass on a thin slab `|(v - v_*)·e| ≲ 2δ` inside the ball of
//! radius `R`; the mass term detects too little mass inside the ball. When the
//! sample fails 𝔸 at least one of them equals one.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::rng::{Purpose, StreamKey};
use crate::sort;
use crate::transport;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum MollifierRule {
    /// The same width for every particle count.
    Fixed { epsilon: f64 },
    /// `ε_N = c N^(-p)`.
    Power { c: f64, p: f64 },
}

/// Family of centered isotropic Gaussian mollifiers `ρ_ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MollifierParams {
    pub rule: MollifierRule,
}

impl Default for MollifierParams {
    fn default() -> Self {
        MollifierParams {
            rule: MollifierRule::Power { c: 0.5, p: 0.25 },
        }
    }
}

impl MollifierParams {
    pub fn fixed(epsilon: f64) -> Self {
        MollifierParams {
            rule: MollifierRule::Fixed { epsilon },
        }
    }

    /// Width used for an `n`-particle system; must lie in (0, 1).
    pub fn epsilon(&self, n: usize) -> Result<f64> {
        let eps = match self.rule {
            MollifierRule::Fixed { epsilon } => epsilon,
            MollifierRule::Power { c, p } => c * (n as f64).powf(-p),
        };
        if eps > 0.0 && eps < 1.0 {
            Ok(eps)
        } else {
            Err(config(format!("mollifier width {eps} must lie in (0, 1)")))
        }
    }
}

/// One draw from `ρ_ε`: a centered Gaussian with standard deviation `ε` per coordinate.
#[inline]
pub fn mollifier_sample<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> Vec3 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    Vec3::new(x * epsilon, y * epsilon, z * epsilon)
}

/// Smooth cutoff `χ_A`: one on `[0, A]`, zero from `2A` on, with a quintic
/// smoothstep in between.
///
/// `2A ≤ A + (1 ∨ A)` for every `A > 0`, so `𝟏_[0,A] ≤ χ_A ≤ 𝟏_[0,A+(1∨A)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothCutoff {
    a: f64,
}

impl SmoothCutoff {
    pub fn new(a: f64) -> Result<Self> {
        if a > 0.0 && a.is_finite() {
            Ok(SmoothCutoff { a })
        } else {
            Err(domain(format!("cutoff threshold {a} must be positive")))
        }
    }

    pub fn threshold(&self) -> f64 {
        self.a
    }

    /// First point where the cutoff vanishes.
    pub fn support_end(&self) -> f64 {
        2.0 * self.a
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        chi(self.a, x)
    }

    /// Maximal slope of the quintic profile, `15 / (8 A)`.
    pub fn lipschitz(&self) -> f64 {
        15.0 / (8.0 * self.a)
    }
}

#[inline]
pub fn chi(a: f64, x: f64) -> f64 {
    if x <= a {
        return 1.0;
    }
    let t = (x - a) / a;
    if t >= 1.0 {
        return 0.0;
    }
    let t3 = t * t * t;
    1.0 - t3 * (10.0 - 15.0 * t + 6.0 * t * t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    /// Ball radius `R > 1`.
    pub r_ball: f64,
    /// Slab half-width `δ ∈ (0, 1)`.
    pub delta: f64,
    /// Mass threshold `η ∈ (0, 1)`.
    pub eta: f64,
    /// Number of directions in the half-sphere grid (at least 64).
    #[serde(default = "default_directions")]
    pub n_directions: usize,
    /// Pair sums use at most `pair_budget²` pairs per direction.
    #[serde(default = "default_pair_budget")]
    pub pair_budget: usize,
}

fn default_directions() -> usize {
    64
}

fn default_pair_budget() -> usize {
    2048
}

impl GateParams {
    pub fn new(r_ball: f64, delta: f64, eta: f64) -> Result<Self> {
        let g = GateParams {
            r_ball,
            delta,
            eta,
            n_directions: default_directions(),
            pair_budget: default_pair_budget(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_ball > 1.0 && self.r_ball.is_finite()) {
            return Err(config(format!("gate R = {} must be > 1", self.r_ball)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(config(format!(
                "gate delta = {} must lie in (0, 1)",
                self.delta
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(config(format!(
                "gate eta = {} must lie in (0, 1)",
                self.eta
            )));
        }
        if self.n_directions < 64 {
            return Err(config(format!(
                "gate n_directions = {} must be >= 64",
                self.n_directions
            )));
        }
        if self.pair_budget == 0 {
            return Err(config("gate pair_budget must be positive"));
        }
        Ok(())
    }

    pub fn with_directions(mut self, n: usize) -> Self {
        self.n_directions = n;
        self
    }

    pub fn with_pair_budget(mut self, budget: usize) -> Self {
        self.pair_budget = budget;
        self
    }

    /// Lipschitz constant of `α` with respect to `W₁`, from the slopes of the
    /// four cutoffs it is built from.
    pub fn lipschitz_bound(&self) -> f64 {
        let lip = |a: f64| 15.0 / (8.0 * a);
        let slab = 2.0 * (lip(self.r_ball) + lip(2.0 * self.delta));
        lip(0.5 * self.eta * self.eta) * slab + lip(4.0 * self.eta) * lip(self.r_ball - 1.0)
    }
}

/// Probability measure carried by finitely many weighted points.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedSample {
    points: Vec<Vec3>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(points: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(domain("points and weights differ in length"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(domain("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !points.is_empty() && (total - 1.0).abs() > 1e-12 {
            return Err(domain(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightedSample { points, weights })
    }

    pub fn uniform(points: Vec<Vec3>) -> Self {
        let w = 1.0 / points.len().max(1) as f64;
        let weights = vec![w; points.len()];
        WeightedSample { points, weights }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fibonacci lattice of unit vectors on the upper half-sphere (`e` and `-e`
/// define the same slabs).
pub fn half_sphere_directions(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let (s, c) = (golden * i as f64).sin_cos();
            Vec3::new(r * c, r * s, z)
        })
        .collect()
}

/// Gate value with the pieces it is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GateValue {
    pub alpha: f64,
    /// Largest smoothed slab pair mass over the direction grid.
    pub slab_sup: f64,
    /// 3σ half-width of `slab_sup` when pair sums were subsampled, else 0.
    pub slab_band: f64,
    /// `∫ χ_{R-1}(|v|) dg`.
    pub ball_mass: f64,
    pub slab_term: f64,
    pub mass_term: f64,
    pub subsampled: bool,
}

struct SlabEstimate {
    value: f64,
    band: f64,
    subsampled: bool,
}

/// Smoothed pair mass `Σ_{a,b} x_a x_b χ_{2δ}(|p_a - p_b|)` for points already
/// sorted by projection `p`, where `x` carries weight times radial cutoff.
fn slab_sum_sorted(sorted: &[(f64, f64)], slab: SmoothCutoff) -> f64 {
    let reach = slab.support_end();
    let mut diag = 0.0;
    let mut off = 0.0;
    for (i, &(p, x)) in sorted.iter().enumerate() {
        diag += x * x;
        let mut row = 0.0;
        for &(q, y) in &sorted[i + 1..] {
            let d = q - p;
            if d >= reach {
                break;
            }
            row += y * slab.eval(d);
        }
        off += x * row;
    }
    diag + 2.0 * off
}

/// Number of unordered pairs `(a, b)`, `a < b`, closer than `reach` in projection.
fn window_pairs(sorted: &[(f64, f64)], reach: f64) -> u64 {
    let mut count = 0u64;
    let mut hi = 0;
    for (i, &(p, _)) in sorted.iter().enumerate() {
        if hi < i + 1 {
            hi = i + 1;
        }
        while hi < sorted.len() && sorted[hi].0 - p < reach {
            hi += 1;
        }
        count += (hi - i - 1) as u64;
    }
    count
}

fn slab_mass_direction(
    sample: &WeightedSample,
    radial: &[f64],
    e: Vec3,
    slab: SmoothCutoff,
    budget: usize,
    subsample: &[usize],
) -> SlabEstimate {
    let mut sorted: Vec<(f64, f64)> = sample
        .points
        .iter()
        .zip(&sample.weights)
        .zip(radial)
        .filter(|(_, &u)| u > 0.0)
        .map(|((v, &w), &u)| (v.dot(&e), w * u))
        .collect();
    sort::sort_by_key(&mut sorted);
    let budget_pairs = (budget as u64).saturating_mul(budget as u64);
    if window_pairs(&sorted, slab.support_end()) <= budget_pairs {
        return SlabEstimate {
            value: slab_sum_sorted(&sorted, slab),
            band: 0.0,
            subsampled: false,
        };
    }
    // U-statistic over a weight-distributed subsample: unbiased for the full
    // double sum, diagonal included.
    let mut sub: Vec<(f64, f64)> = subsample
        .iter()
        .map(|&i| (sample.points[i].dot(&e), radial[i]))
        .collect();
    sort::sort_by_key(&mut sub);
    let b = sub.len();
    let mut row_sums = vec![0.0; b];
    let reach = slab.support_end();
    for i in 0..b {
        let (p, x) = sub[i];
        for j in i + 1..b {
            let d = sub[j].0 - p;
            if d >= reach {
                break;
            }
            let g = x * sub[j].1 * slab.eval(d);
            row_sums[i] += g;
            row_sums[j] += g;
        }
    }
    let denom = (b * (b - 1)) as f64;
    let value = row_sums.iter().sum::<f64>() / denom;
    let row_means: Vec<f64> = row_sums.iter().map(|s| s / (b - 1) as f64).collect();
    let mean = row_means.iter().sum::<f64>() / b as f64;
    let var_rows = row_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
    let band = 3.0 * (4.0 * var_rows / b as f64).sqrt();
    SlabEstimate {
        value,
        band,
        subsampled: true,
    }
}

fn weighted_subsample(
    sample: &WeightedSample,
    size: usize,
    key: &StreamKey,
    step: u64,
) -> Vec<usize> {
    let mut rng = key.stream(Purpose::Subsample, step, 0);
    let n = sample.len();
    let uniform = sample.weights.iter().all(|&w| w == sample.weights[0]);
    if uniform {
        return (0..size).map(|_| rng.random_range(0..n)).collect();
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &sample.weights {
        acc += w;
        cumulative.push(acc);
    }
    (0..size)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cumulative.partition_point(|&c| c <= u).min(n - 1)
        })
        .collect()
}

/// The gate functional `α^R_{δ,η}`; subsampling (when needed) draws from a
/// fixed stream.
pub fn alpha_gate(sample: &WeightedSample, gate: &GateParams) -> Result<GateValue> {
    alpha_gate_keyed(sample, gate, &StreamKey::new(0), 0)
}

/// [`alpha_gate`] with the subsampling stream addressed by `(key, step)`.
pub fn alpha_gate_keyed(
    sample: &WeightedSample,
    gate: &GateParams,
    key: &StreamKey,
    step: u64,
) -> Result<GateValue> {
    if sample.is_empty() {
        return Err(domain("gate of an empty sample"));
    }
    let ball = SmoothCutoff::new(gate.r_ball)?;
    let inner = SmoothCutoff::new(gate.r_ball - 1.0)?;
    let slab = SmoothCutoff::new(2.0 * gate.delta)?;
    let pair_level = SmoothCutoff::new(0.5 * gate.eta * gate.eta)?;
    let mass_level = SmoothCutoff::new(4.0 * gate.eta)?;

    let norms: Vec<f64> = sample.points.iter().map(|v| v.norm()).collect();
    let radial: Vec<f64> = norms.iter().map(|&r| ball.eval(r)).collect();
    let ball_mass: f64 = norms
        .iter()
        .zip(&sample.weights)
        .map(|(&r, &w)| w * inner.eval(r))
        .sum();

    let subsample = if sample.len() > gate.pair_budget {
        weighted_subsample(sample, gate.pair_budget.max(2), key, step)
    } else {
        Vec::new()
    };
    let estimates: Vec<SlabEstimate> = {
        use rayon::prelude::*;
        half_sphere_directions(gate.n_directions)
            .into_par_iter()
            .map(|e| slab_mass_direction(sample, &radial, e, slab, gate.pair_budget, &subsample))
            .collect()
    };
    let mut slab_sup = f64::NEG_INFINITY;
    let mut slab_band = 0.0;
    let mut subsampled = false;
    for est in &estimates {
        if est.value > slab_sup {
            slab_sup = est.value;
            slab_band = est.band;
        }
        subsampled |= est.subsampled;
    }
    let slab_term = 1.0 - pair_level.eval(slab_sup.max(0.0));
    let mass_term = mass_level.eval(ball_mass);
    Ok(GateValue {
        alpha: slab_term + mass_term,
        slab_sup,
        slab_band,
        ball_mass,
        slab_term,
        mass_term,
        subsampled,
    })
}

/// Hard-indicator condition 𝔸(R, δ, η): the ball `B_R` carries mass at least
/// `4η` and no slab `{y ∈ B_R : |(y - x)·e| ≤ δ}` centered at a sample point
/// inside the ball carries more than `η`, for every grid direction.
pub fn condition_a(sample: &WeightedSample, gate: &GateParams) -> bool {
    let inside: Vec<(Vec3, f64)> = sample
        .points
        .iter()
        .zip(&sample.weights)
        .filter(|(v, _)| v.norm() <= gate.r_ball)
        .map(|(v, &w)| (*v, w))
        .collect();
    let ball_mass: f64 = inside.iter().map(|(_, w)| w).sum();
    if ball_mass < 4.0 * gate.eta {
        return false;
    }
    for e in half_sphere_directions(gate.n_directions) {
        let mut sorted: Vec<(f64, f64)> = inside.iter().map(|(v, w)| (v.dot(&e), *w)).collect();
        sort::sort_by_key(&mut sorted);
        let mut lo = 0;
        let mut hi = 0;
        let mut mass = 0.0;
        for i in 0..sorted.len() {
            let center = sorted[i].0;
            while hi < sorted.len() && sorted[hi].0 <= center + gate.delta {
                mass += sorted[hi].1;
                hi += 1;
            }
            while sorted[lo].0 < center - gate.delta {
                mass -= sorted[lo].1;
                lo += 1;
            }
            if mass > gate.eta * (1.0 + 1e-12) {
                return false;
            }
        }
    }
    true
}

/// Gate parameters for which `α` vanishes on any density with entropy at most
/// `entropy_bound` and second moment at most `second_moment_bound`:
/// `R = 3 + √M`, `η = c(1 - M/(4(R-2)²))/2`,
/// `δ = c R⁻⁵ exp(-4(c + 2(H + M))/η²)/2`.
///
/// `δ` is clamped into `[f64::MIN_POSITIVE, 1/2]`. Below the smallest normal
/// double the slab cutoff only sees exactly coincident projections, so any
/// smaller width gives the same gate.
pub fn gate_schedule(
    entropy_bound: f64,
    second_moment_bound: f64,
    calibration_c: f64,
) -> Result<GateParams> {
    if !(second_moment_bound >= 0.0) {
        return Err(config("second moment bound must be >= 0"));
    }
    if !(calibration_c > 0.0) {
        return Err(config("calibration constant must be positive"));
    }
    let m = second_moment_bound;
    let r = 3.0 + m.sqrt();
    let eta = calibration_c * (1.0 - m / (4.0 * (r - 2.0).powi(2))) / 2.0;
    if !(eta > 0.0 && eta < 1.0) {
        return Err(config(format!("scheduled eta = {eta} leaves (0, 1)")));
    }
    let log_delta = calibration_c.ln()
        - 5.0 * r.ln()
        - 4.0 * (calibration_c + 2.0 * (entropy_bound + m)) / (eta * eta)
        - 2f64.ln();
    let delta = if log_delta.is_nan() {
        return Err(config("scheduled delta is undefined"));
    } else {
        log_delta.exp().clamp(f64::MIN_POSITIVE, 0.5)
    };
    if log_delta < f64::MIN_POSITIVE.ln() {
        log::warn!("scheduled delta = exp({log_delta:.1}) is below f64 range; clamped");
    }
    GateParams::new(r, delta, eta)
}

/// `(|α(a) - α(b)|, W₁(a, b))` for two uniform samples of equal size.
pub fn w1_lipschitz_probe(
    a: &WeightedSample,
    b: &WeightedSample,
    gate: &GateParams,
) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(domain("Lipschitz probe needs equal-size samples"));
    }
    let da = alpha_gate(a, gate)?.alpha;
    let db = alpha_gate(b, gate)?.alpha;
    let w1 = transport::w1_exact(a.points(), b.points())?;
    Ok(((da - db).abs(), w1))
}
