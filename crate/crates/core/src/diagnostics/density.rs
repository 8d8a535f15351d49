//! Gaussian kernel density estimates on a periodic grid, and the functionals
//! computed from them: the weighted fractional Fisher information and Lᵖ norms.
//!
//! Particles are binned cloud-in-cell onto an `M³` grid over `[-L, L)³`; the
//! kernel is applied in Fourier space together with the inverse of the
//! cloud-in-cell window.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{domain, Result};
use crate::kernel::KernelParams;
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width `L` of the cube.
    pub extent: f64,
    /// Points per axis, a power of two.
    pub resolution: usize,
    pub kde_bandwidth: f64,
}

/// Default multiplier of Silverman's bandwidth.
pub const BANDWIDTH_SCALE: f64 = 0.9;

fn spread(sample: &[Vec3]) -> (Vec3, f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().fold(Vec3::ZERO, |a, v| a + *v) / n;
    let mut var = [0.0f64; 3];
    for v in sample {
        for a in 0..3 {
            var[a] += (v[a] - mean[a]).powi(2);
        }
    }
    let var = var.map(|x| x / n);
    let sd_mean = ((var[0] + var[1] + var[2]) / 3.0).sqrt();
    let sd_max = var.iter().copied().fold(0.0, f64::max).sqrt();
    (mean, sd_mean, sd_max)
}

impl GridSpec {
    pub fn new(extent: f64, resolution: usize, kde_bandwidth: f64) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 8 {
            return Err(domain(format!(
                "grid resolution {resolution} must be a power of two >= 8"
            )));
        }
        if !(extent > 0.0) || !(kde_bandwidth > 0.0) {
            return Err(domain("grid extent and bandwidth must be positive"));
        }
        Ok(GridSpec {
            extent,
            resolution,
            kde_bandwidth,
        })
    }

    /// Silverman bandwidth scaled by [`BANDWIDTH_SCALE`]; the extent covers
    /// four standard deviations and every point plus three bandwidths.
    pub fn auto(sample: &[Vec3], resolution: usize) -> Result<Self> {
        Self::auto_scaled(sample, resolution, BANDWIDTH_SCALE)
    }

    pub fn auto_scaled(sample: &[Vec3], resolution: usize, bandwidth_scale: f64) -> Result<Self> {
        if sample.len() < 2 {
            return Err(domain("density estimate needs at least two points"));
        }
        let (mean, sd, sd_max) = spread(sample);
        if !(sd > 0.0) {
            return Err(domain("density estimate of a sample without spread"));
        }
        let h = bandwidth_scale
            * sd
            * (0.8f64).powf(1.0 / 7.0)
            * (sample.len() as f64).powf(-1.0 / 7.0);
        let max_abs = sample
            .iter()
            .flat_map(|v| v.0)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let mean_abs = mean.0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let extent = (4.0 * sd_max + mean_abs).max(max_abs + 3.0 * h);
        GridSpec::new(extent, resolution, h)
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / self.resolution as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(3)
    }

    /// Coordinate of grid index `i` along any axis.
    pub fn coord(&self, i: usize) -> f64 {
        -self.extent + i as f64 * self.spacing()
    }

    /// Angular frequency of index `i`, folded to `(-π/Δ, π/Δ]`.
    pub fn freq(&self, i: usize) -> f64 {
        let m = self.resolution as isize;
        let k = if (i as isize) < m / 2 {
            i as isize
        } else {
            i as isize - m
        };
        k as f64 * PI / self.extent
    }

    fn check_covers(&self, sample: &[Vec3]) -> Result<()> {
        let max_abs = sample
            .iter()
            .flat_map(|v| v.0)
            .fold(0.0f64, |m, x| m.max(x.abs()));
        let need = max_abs + 3.0 * self.kde_bandwidth;
        if need > self.extent {
            let (_, _, sd_max) = spread(sample);
            return Err(domain(format!(
                "grid extent {} too small for the sample; use at least {}",
                self.extent,
                need.max(4.0 * sd_max)
            )));
        }
        Ok(())
    }
}

/// Density values on the grid, index `(x·M + y)·M + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    /// Samples `f` at the grid nodes.
    pub fn from_fn<F: Fn(Vec3) -> f64>(spec: GridSpec, f: F) -> Self {
        let m = spec.resolution;
        let mut values = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    values.push(f(Vec3::new(spec.coord(i), spec.coord(j), spec.coord(k))));
                }
            }
        }
        DensityGrid { spec, values }
    }

    pub fn node(&self, idx: usize) -> Vec3 {
        let m = self.spec.resolution;
        Vec3::new(
            self.spec.coord(idx / (m * m)),
            self.spec.coord((idx / m) % m),
            self.spec.coord(idx % m),
        )
    }
}

/// In-place 3D DFT (unnormalized both ways).
fn fft3(data: &mut [Complex<f64>], m: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(m)
    } else {
        planner.plan_fft_forward(m)
    };
    // Contiguous z lines.
    fft.process(data);
    let mut line = vec![Complex::new(0.0, 0.0); m];
    // y lines.
    for x in 0..m {
        for z in 0..m {
            for y in 0..m {
                line[y] = data[(x * m + y) * m + z];
            }
            fft.process(&mut line);
            for y in 0..m {
                data[(x * m + y) * m + z] = line[y];
            }
        }
    }
    // x lines.
    for y in 0..m {
        for z in 0..m {
            for x in 0..m {
                line[x] = data[(x * m + y) * m + z];
            }
            fft.process(&mut line);
            for x in 0..m {
                data[(x * m + y) * m + z] = line[x];
            }
        }
    }
}

/// Gaussian KDE of a uniform sample on `grid`; nonnegative and normalized to
/// unit mass.
pub fn kde_on_grid(sample: &[Vec3], grid: &GridSpec) -> Result<DensityGrid> {
    if sample.is_empty() {
        return Err(domain("density estimate of an empty sample"));
    }
    grid.check_covers(sample)?;
    let m = grid.resolution;
    let dx = grid.spacing();
    let mut data = vec![Complex::new(0.0, 0.0); m * m * m];
    let w = 1.0 / (sample.len() as f64 * grid.cell_volume());
    for v in sample {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (v[a] + grid.extent) / dx;
            let f = u.floor();
            base[a] = (f as isize).rem_euclid(m as isize) as usize;
            frac[a] = u - f;
        }
        for c in 0..8 {
            let mut weight = w;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let up = (c >> a) & 1 == 1;
                weight *= if up { frac[a] } else { 1.0 - frac[a] };
                idx[a] = if up { (base[a] + 1) % m } else { base[a] };
            }
            data[(idx[0] * m + idx[1]) * m + idx[2]].re += weight;
        }
    }
    fft3(&mut data, m, false);
    let h2 = grid.kde_bandwidth * grid.kde_bandwidth;
    let window: Vec<f64> = (0..m)
        .map(|i| {
            let k = grid.freq(i);
            let s = 0.5 * k * dx;
            let sinc = if s == 0.0 { 1.0 } else { s.sin() / s };
            (-0.5 * h2 * k * k).exp() / (sinc * sinc)
        })
        .collect();
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                data[(i * m + j) * m + k] *= window[i] * window[j] * window[k];
            }
        }
    }
    fft3(&mut data, m, true);
    let norm = 1.0 / (m * m * m) as f64;
    let mut values: Vec<f64> = data.iter().map(|c| (c.re * norm).max(0.0)).collect();
    let mass: f64 = values.iter().sum::<f64>() * grid.cell_volume();
    if mass > 0.0 {
        values.iter_mut().for_each(|x| *x /= mass);
    }
    Ok(DensityGrid {
        spec: *grid,
        values,
    })
}

/// Constant `C(d, s)` of the fractional Laplacian,
/// `4^s Γ(d/2 + s) / (π^{d/2} |Γ(-s)|)`.
pub fn gagliardo_constant(d: f64, s: f64) -> f64 {
    let abs_gamma_neg_s = gamma(1.0 - s) / s;
    4f64.powf(s) * gamma(0.5 * d + s) / (PI.powf(0.5 * d) * abs_gamma_neg_s)
}

/// Radial taper: one below 0.7 of the Nyquist frequency, cos² down to zero at it.
fn taper(ratio: f64) -> f64 {
    if ratio <= 0.7 {
        1.0
    } else if ratio >= 1.0 {
        0.0
    } else {
        (0.5 * PI * (ratio - 0.7) / 0.3).cos().powi(2)
    }
}

/// `∫∫ |h(x) - h(y)|² / |x - y|^{3+2s} dx dy` for `h` given on the grid,
/// computed in Fourier space as `(2 / C(3,s)) ∫ |ξ|^{2s} |ĥ(ξ)|² dξ / (2π)³`.
pub fn seminorm_on_grid(h: &DensityGrid, s: f64) -> f64 {
    let spec = h.spec;
    let m = spec.resolution;
    let mut data: Vec<Complex<f64>> = h.values.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft3(&mut data, m, false);
    let nyquist = PI / spec.spacing();
    let cell = spec.cell_volume();
    let dxi3 = (PI / spec.extent).powi(3);
    let freqs: Vec<f64> = (0..m).map(|i| spec.freq(i)).collect();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let r2 = freqs[i].powi(2) + freqs[j].powi(2) + freqs[k].powi(2);
                if r2 == 0.0 {
                    continue;
                }
                let r = r2.sqrt();
                let wt = taper(r / nyquist);
                if wt == 0.0 {
                    continue;
                }
                acc += wt * r.powf(2.0 * s) * data[(i * m + j) * m + k].norm_sqr();
            }
        }
    }
    let fourier = acc * cell * cell * dxi3 / (2.0 * PI).powi(3);
    2.0 * fourier / gagliardo_constant(3.0, s)
}

fn weighted_sqrt(f: &DensityGrid, kernel: &KernelParams) -> DensityGrid {
    let g = kernel.gamma();
    let values = f
        .values
        .iter()
        .enumerate()
        .map(|(idx, &x)| (1.0 + f.node(idx).norm2()).powf(0.25 * g) * x.max(0.0).sqrt())
        .collect();
    DensityGrid {
        spec: f.spec,
        values,
    }
}

/// `|⟨·⟩^{γ/2} √f|²_{H^{ν/2}}` of a density given on the grid.
pub fn fisher_on_grid(f: &DensityGrid, kernel: &KernelParams) -> f64 {
    seminorm_on_grid(&weighted_sqrt(f, kernel), 0.5 * kernel.nu())
}

/// Splits a sample in two by a hash of each point's coordinates, so the split
/// does not depend on the order of the sample.
fn hash_halves(sample: &[Vec3]) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut a = Vec::with_capacity(sample.len() / 2 + 1);
    let mut b = Vec::with_capacity(sample.len() / 2 + 1);
    for v in sample {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for c in v.0 {
            h = (h ^ c.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            h ^= h >> 29;
        }
        if h & 1 == 0 {
            a.push(*v);
        } else {
            b.push(*v);
        }
    }
    (a, b)
}

/// One-particle estimate of the weighted fractional Fisher information
/// `|⟨·⟩^{γ/2} √f|²_{H^{ν/2}}` in its double-integral normalization.
///
/// Sampling noise in the KDE adds a positive amount to the seminorm. With
/// `h_A`, `h_B` the weighted roots of the KDEs of two disjoint halves (same grid
/// and bandwidth), `|h_A - h_B|²/4` estimates that amount to first order and is
/// subtracted.
pub fn fisher_frac(sample: &[Vec3], kernel: &KernelParams, grid: &GridSpec) -> Result<f64> {
    let s = 0.5 * kernel.nu();
    let raw = fisher_on_grid(&kde_on_grid(sample, grid)?, kernel);
    let (a, b) = hash_halves(sample);
    if a.is_empty() || b.is_empty() {
        return Ok(raw);
    }
    let ha = weighted_sqrt(&kde_on_grid(&a, grid)?, kernel);
    let hb = weighted_sqrt(&kde_on_grid(&b, grid)?, kernel);
    // Halves of unequal size: the difference carries noise 1/|A| + 1/|B| in
    // units where the full sample carries 1/N.
    let n = sample.len() as f64;
    let scale = 1.0 / (n / a.len() as f64 + n / b.len() as f64);
    let diff = DensityGrid {
        spec: *grid,
        values: ha
            .values
            .iter()
            .zip(&hb.values)
            .map(|(x, y)| x - y)
            .collect(),
    };
    Ok((raw - scale * seminorm_on_grid(&diff, s)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub value: f64,
    /// Half-sample spread plus the shift between the full and half-sample
    /// estimates.
    pub band: f64,
}

/// [`fisher_frac`] with a band from two halves of the sample, each estimated
/// on its own auto grid.
pub fn fisher_frac_with_band(
    sample: &[Vec3],
    kernel: &KernelParams,
    resolution: usize,
) -> Result<FisherEstimate> {
    let full = fisher_frac(sample, kernel, &GridSpec::auto(sample, resolution)?)?;
    let (even, odd) = hash_halves(sample);
    let a = fisher_frac(&even, kernel, &GridSpec::auto(&even, resolution)?)?;
    let b = fisher_frac(&odd, kernel, &GridSpec::auto(&odd, resolution)?)?;
    let half_mean = 0.5 * (a + b);
    Ok(FisherEstimate {
        value: full,
        band: 3.0 * (a - b).abs() / 2.0 + (full - half_mean).abs(),
    })
}

/// `(Σ f̂^p ΔV)^{1/p}` on the KDE grid.
pub fn lp_norm_kde(sample: &[Vec3], p: f64, grid: &GridSpec) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(domain(format!("Lp exponent {p} must be >= 1")));
    }
    let f = kde_on_grid(sample, grid)?;
    Ok(lp_on_grid(&f, p))
}

pub(crate) fn lp_on_grid(f: &DensityGrid, p: f64) -> f64 {
    (f.values.iter().map(|x| x.powf(p)).sum::<f64>() * f.spec.cell_volume()).powf(1.0 / p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::mollifier_sample;
    use crate::quadrature;
    use crate::rng::{Purpose, StreamKey};
    use rand::Rng;

    fn gaussian(n: usize, seed: u64, sd: f64) -> Vec<Vec3> {
        let mut rng = StreamKey::new(seed).stream(Purpose::Auxiliary, 0, 0);
        (0..n).map(|_| mollifier_sample(sd, &mut rng)).collect()
    }

    /// Double-integral seminorm of `√φ` for the standard Gaussian `φ`, by the
    /// autocorrelation identity `∫|h(x) - h(x+y)|² dx = 2(1 - e^{-|y|²/8})`
    /// and radial quadrature in `y`.
    fn gaussian_sqrt_seminorm_quadrature(s: f64) -> f64 {
        let f = |r: f64| {
            if r == 0.0 {
                0.0
            } else {
                4.0 * PI * r * r * r.powf(-3.0 - 2.0 * s) * 2.0 * -(-r * r / 8.0).exp_m1()
            }
        };
        // r = t^a removes the r^{1-2s} singularity at the origin.
        let a = 1.0 / (2.0 - 2.0 * s);
        let g = |t: f64| {
            if t == 0.0 {
                0.0
            } else {
                f(t.powf(a)) * a * t.powf(a - 1.0)
            }
        };
        let near = quadrature::integrate(g, 0.0, 1.0, 1e-10, 0.0);
        let far: f64 = (0..5)
            .map(|k| {
                quadrature::integrate(f, 4f64.powi(k), 4f64.powi(k + 1).min(400.0), 1e-10, 0.0)
            })
            .sum();
        near + far + 4.0 * PI * 2.0 * 400f64.powf(-2.0 * s) / (2.0 * s)
    }

    fn gaussian_sqrt_seminorm_closed(s: f64) -> f64 {
        4.0 * PI * 8f64.powf(-s) * gamma(1.0 - s) / s
    }

    fn std_gaussian_grid(m: usize, l: f64) -> DensityGrid {
        let spec = GridSpec::new(l, m, 1.0).unwrap();
        DensityGrid::from_fn(spec, |v| (2.0 * PI).powf(-1.5) * (-0.5 * v.norm2()).exp())
    }

    #[test]
    fn gagliardo_constant_values() {
        // C(3, 1/2) = 1/π² for the half Laplacian in three dimensions.
        assert!((gagliardo_constant(3.0, 0.5) - 1.0 / (PI * PI)).abs() < 1e-12);
    }

    #[test]
    fn oracles_agree() {
        let s = 0.8;
        let q = gaussian_sqrt_seminorm_quadrature(s);
        let c = gaussian_sqrt_seminorm_closed(s);
        assert!((q - c).abs() < 1e-6 * c, "{q} {c}");
    }

    #[test]
    fn grid_seminorm_of_exact_gaussian() {
        let kernel = KernelParams::new(0.0, 1.6, 1.0).unwrap();
        let f = std_gaussian_grid(64, 8.0);
        let est = fisher_on_grid(&f, &kernel);
        let want = gaussian_sqrt_seminorm_closed(0.8);
        assert!((est / want - 1.0).abs() < 0.01, "{est} {want}");
    }

    #[test]
    fn kde_fisher_matches_quadrature_oracle() {
        let kernel = KernelParams::new(0.0, 1.6, 1.0).unwrap();
        let s = gaussian(200_000, 1, 1.0);
        let est = fisher_frac(&s, &kernel, &GridSpec::auto(&s, 64).unwrap()).unwrap();
        let want = gaussian_sqrt_seminorm_quadrature(0.8);
        assert!((est / want - 1.0).abs() < 0.05, "{est} {want}");
    }

    #[test]
    fn fisher_dilation_and_refinement() {
        let kernel = KernelParams::new(0.0, 1.6, 1.0).unwrap();
        let s = gaussian(200_000, 2, 1.0);
        let f1 = fisher_frac(&s, &kernel, &GridSpec::auto(&s, 64).unwrap()).unwrap();
        let squeezed: Vec<Vec3> = s.iter().map(|v| *v * 0.5).collect();
        let f2 = fisher_frac(&squeezed, &kernel, &GridSpec::auto(&squeezed, 64).unwrap()).unwrap();
        assert!((f2 / f1 / 2f64.powf(1.6) - 1.0).abs() < 0.05, "{}", f2 / f1);
        let fine = fisher_frac(&s, &kernel, &GridSpec::auto(&s, 128).unwrap()).unwrap();
        assert!((fine / f1 - 1.0).abs() < 0.02, "{f1} {fine}");
    }

    #[test]
    fn fisher_half_sample_within_band() {
        let kernel = KernelParams::canonical();
        let s = gaussian(40_000, 3, 1.0);
        let full = fisher_frac_with_band(&s, &kernel, 64).unwrap();
        let half = &s[..20_000];
        let h = fisher_frac(half, &kernel, &GridSpec::auto(half, 64).unwrap()).unwrap();
        assert!(
            (h - full.value).abs() <= full.band,
            "{} {} {}",
            h,
            full.value,
            full.band
        );
        assert!(full.value > 0.0);
    }

    #[test]
    fn constant_grid_has_zero_seminorm() {
        let spec = GridSpec::new(4.0, 16, 1.0).unwrap();
        let g = DensityGrid::from_fn(spec, |_| 0.3);
        assert!(seminorm_on_grid(&g, 0.8).abs() < 1e-20);
    }

    #[test]
    fn lp_norms() {
        let s = gaussian(200_000, 4, 1.0);
        let l2 = lp_norm_kde(&s, 2.0, &GridSpec::auto(&s, 64).unwrap()).unwrap();
        assert!((l2 / (4.0 * PI).powf(-0.75) - 1.0).abs() < 0.03, "{l2}");
        for p in [1.2, 2.0] {
            let a = lp_norm_kde(&s, p, &GridSpec::auto(&s, 64).unwrap()).unwrap();
            let sq: Vec<Vec3> = s.iter().map(|v| *v * 0.5).collect();
            let b = lp_norm_kde(&sq, p, &GridSpec::auto(&sq, 64).unwrap()).unwrap();
            let want = 2f64.powf(3.0 * (1.0 - 1.0 / p));
            assert!((b / a / want - 1.0).abs() < 0.03, "{p}: {}", b / a);
        }
        // Nearly flat: uniform cube of side 2, volume 8, p = 2 gives 8^{-1/2}.
        let mut rng = StreamKey::new(5).stream(Purpose::Auxiliary, 0, 0);
        let u: Vec<Vec3> = (0..200_000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let lu = lp_norm_kde(&u, 2.0, &GridSpec::auto(&u, 64).unwrap()).unwrap();
        assert!((lu / 8f64.powf(-0.5) - 1.0).abs() < 0.1, "{lu}");
    }

    #[test]
    fn grid_must_cover_sample() {
        let s = gaussian(1000, 6, 1.0);
        let err = kde_on_grid(&s, &GridSpec::new(1.0, 32, 0.2).unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("use at least"));
    }
}
