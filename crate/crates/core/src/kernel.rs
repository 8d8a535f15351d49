//! Collision kernel: the angular weight β(θ) = K θ^(-1-ν), the deviation
//! angle map G_ν, the (θ, φ) collision parametrization and the jump
//! coefficient c_{γ,ν}.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::quadrature;
use crate::Vec3;

/// Sign relating the mean of the omitted grazing jumps to `β₀ K_γ`.
///
/// Averaging `c_{γ,ν}` over the azimuth leaves `-π(1 - cos θ)(v - v_*)`, so the
/// integral of `c` over `(z, φ)` is `-β₀ K_γ(v - v_*)`. The Monte Carlo test in
/// `tests/kernel_identities.rs` pins this value.
pub const COMPENSATION_SIGN: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelParams", into = "RawKernelParams")]
pub struct KernelParams {
    gamma: f64,
    nu: f64,
    k: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKernelParams {
    gamma: f64,
    nu: f64,
    #[serde(rename = "K", alias = "k")]
    k: f64,
}

impl TryFrom<RawKernelParams> for KernelParams {
    type Error = crate::Error;

    fn try_from(raw: RawKernelParams) -> Result<Self> {
        KernelParams::new(raw.gamma, raw.nu, raw.k)
    }
}

impl From<KernelParams> for RawKernelParams {
    fn from(p: KernelParams) -> Self {
        RawKernelParams {
            gamma: p.gamma,
            nu: p.nu,
            k: p.k,
        }
    }
}

impl KernelParams {
    pub fn new(gamma: f64, nu: f64, k: f64) -> Result<Self> {
        if !(gamma > -2.0 && gamma <= 0.0) {
            return Err(config(format!("gamma = {gamma} must lie in (-2, 0]")));
        }
        if !(nu > 0.0 && nu < 2.0) {
            return Err(config(format!("nu = {nu} must lie in (0, 2)")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(config(format!("K = {k} must be positive")));
        }
        Ok(KernelParams { gamma, nu, k })
    }

    /// γ = -1.5, ν = 1.6, K = 1: inside the regime γ ∈ (-2,-1), ν ∈ (1,2), γ+ν > 0.
    pub fn canonical() -> Self {
        KernelParams {
            gamma: -1.5,
            nu: 1.6,
            k: 1.0,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// The gated dynamics need grazing collisions strong enough to beat the
    /// soft-potential singularity.
    pub fn require_gated_regime(&self) -> Result<()> {
        if self.gamma + self.nu > 0.0 {
            Ok(())
        } else {
            Err(config(format!(
                "gamma + nu = {} must be > 0 when the gate is enabled \
                 (regime gamma in (-2,-1), nu in (1,2), gamma + nu > 0)",
                self.gamma + self.nu
            )))
        }
    }

    pub fn beta(&self, theta: f64) -> Result<f64> {
        check_angle(theta)?;
        Ok(self.k * theta.powf(-1.0 - self.nu))
    }

    /// `∫_x^π β(θ) dθ = (K/ν)(x^(-ν) - π^(-ν))`.
    pub fn tail_integral(&self, x: f64) -> Result<f64> {
        check_angle(x)?;
        if x == PI {
            return Ok(0.0);
        }
        Ok(self.k / self.nu * (x.powf(-self.nu) - PI.powf(-self.nu)))
    }

    /// Inverse of [`tail_integral`](Self::tail_integral): the deviation angle
    /// whose tail mass is `z`.
    pub fn g_nu(&self, z: f64) -> Result<f64> {
        if !(z >= 0.0) {
            return Err(domain(format!("g_nu needs z >= 0, got {z}")));
        }
        Ok(self.g_nu_unchecked(z))
    }

    #[inline]
    fn g_nu_unchecked(&self, z: f64) -> f64 {
        if z == 0.0 {
            return PI;
        }
        (self.nu * z / self.k + PI.powf(-self.nu)).powf(-1.0 / self.nu)
    }

    /// `π ∫_0^θ₀ (1 - cos θ) β(θ) dθ`, by adaptive quadrature after the
    /// substitution `θ = u^(1/(2-ν))`, which turns the integrand into the
    /// bounded `(1 - cos θ)/θ² / (2-ν)`.
    pub fn beta0_partial(&self, theta0: f64) -> Result<f64> {
        if self.nu >= 2.0 {
            return Err(config("beta0 needs nu < 2"));
        }
        if !(0.0..=PI).contains(&theta0) {
            return Err(domain(format!("theta0 = {theta0} outside [0, pi]")));
        }
        if theta0 == 0.0 {
            return Ok(0.0);
        }
        let a = 1.0 / (2.0 - self.nu);
        let integrand = |u: f64| {
            let theta = u.powf(a);
            if theta < 1e-4 {
                let t2 = theta * theta;
                a * (0.5 - t2 / 24.0 + t2 * t2 / 720.0)
            } else {
                let s = (0.5 * theta).sin();
                a * 2.0 * s * s / (theta * theta)
            }
        };
        let upper = theta0.powf(2.0 - self.nu);
        let value = quadrature::integrate(integrand, 0.0, upper, 1e-12, 0.0);
        Ok(PI * self.k * value)
    }

    /// `β₀ = π ∫_0^π (1 - cos θ) β(θ) dθ`.
    pub fn beta0(&self) -> f64 {
        self.beta0_series(PI, PI.powf(-self.nu))
    }

    /// Same quantity as [`beta0_partial`](Self::beta0_partial), summed from the
    /// power series of `1 - cos θ`. `theta_pow_neg_nu` must equal `θ₀^(-ν)`.
    #[inline]
    pub fn beta0_series(&self, theta0: f64, theta_pow_neg_nu: f64) -> f64 {
        let t2 = theta0 * theta0;
        let mut power = 1.0;
        let mut sum = 0.0;
        for k in 1..40 {
            let kk = 2.0 * k as f64;
            power *= t2 / (kk * (kk - 1.0));
            let term = power / (kk - self.nu);
            if k % 2 == 1 {
                sum += term;
            } else {
                sum -= term;
            }
            if term < 1e-17 * sum.abs() {
                break;
            }
        }
        PI * self.k * theta_pow_neg_nu * sum
    }

    /// Deviation angle attached to the jump mark `z` for relative speed `speed`.
    #[inline]
    pub fn deviation_angle(&self, speed: f64, z: f64) -> f64 {
        self.g_nu_unchecked(z * speed.powf(-self.gamma))
    }

    pub fn jump_coefficient(
        &self,
        v: Vec3,
        v_star: Vec3,
        z: f64,
        phi: f64,
    ) -> Result<JumpCoefficient> {
        if !(z >= 0.0) {
            return Err(domain(format!("jump mark z = {z} must be >= 0")));
        }
        let x = v - v_star;
        let speed = x.norm();
        if speed == 0.0 {
            return Ok(JumpCoefficient::default());
        }
        deflect(v, v_star, self.deviation_angle(speed, z), phi)
    }

    /// Mean of the jumps with mark `z > z_trunc`:
    /// `∫_{z > Z} ∫_0^{2π} c_{γ,ν}(v, v_*, z, φ) dφ dz`.
    pub fn compensation_mean(&self, v: Vec3, v_star: Vec3, z_trunc: f64) -> Result<Vec3> {
        if !(z_trunc >= 0.0) {
            return Err(domain(format!("truncation level {z_trunc} must be >= 0")));
        }
        Ok(self.omitted_drift(v - v_star, z_trunc))
    }

    /// [`compensation_mean`](Self::compensation_mean) as a function of the
    /// relative velocity, for the inner loop.
    #[inline]
    pub fn omitted_drift(&self, x: Vec3, z_trunc: f64) -> Vec3 {
        self.omitted_moments(x, z_trunc).0
    }

    /// Mean `∫_{z>Z}∫ c` and second moment `∫_{z>Z}∫ |c|²` of the omitted jumps,
    /// as functions of the relative velocity.
    #[inline]
    pub fn omitted_moments(&self, x: Vec3, z_trunc: f64) -> (Vec3, f64) {
        let r2 = x.norm2();
        if r2 == 0.0 || !z_trunc.is_finite() {
            return (Vec3::ZERO, 0.0);
        }
        let ln_r = 0.5 * r2.ln();
        let r_gamma = (self.gamma * ln_r).exp();
        let theta_pow = self.nu * z_trunc / (self.k * r_gamma) + PI.powf(-self.nu);
        let theta = theta_pow.powf(-1.0 / self.nu);
        let weight = self.beta0_series(theta, theta_pow);
        (
            x * (COMPENSATION_SIGN * weight * r_gamma),
            weight * r_gamma * r2,
        )
    }
}

fn check_angle(theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= PI {
        Ok(())
    } else {
        Err(domain(format!("angle {theta} outside (0, pi]")))
    }
}

/// `K_γ(x) = |x|^γ x`; zero at the origin.
#[inline]
pub fn k_gamma(x: Vec3, gamma: f64) -> Vec3 {
    let r = x.norm();
    if r == 0.0 {
        Vec3::ZERO
    } else {
        x * r.powf(gamma)
    }
}

/// `I(X)`, `J(X)`: both of norm `|X|`, completing `X/|X|` to a direct basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub i_vec: Vec3,
    pub j_vec: Vec3,
}

/// Builds the frame from the coordinate axis least aligned with `x`
/// (ties go to the later axis): `I ∝ e × X`, `J = X × I / |X|`.
pub fn make_frame(x: Vec3) -> Result<Frame> {
    let norm = x.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(domain("frame of a zero or non-finite vector"));
    }
    Ok(frame_unchecked(x, norm))
}

#[inline]
fn frame_unchecked(x: Vec3, norm: f64) -> Frame {
    let mut pivot = 0;
    for i in 1..3 {
        if x[i].abs() <= x[pivot].abs() {
            pivot = i;
        }
    }
    let raw = Vec3::axis(pivot).cross(&x);
    let i_vec = raw * (norm / raw.norm());
    let j_vec = x.cross(&i_vec) / norm;
    Frame { i_vec, j_vec }
}

/// Velocity increment `v' - v` of the colliding particle.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct JumpCoefficient {
    pub delta_v: Vec3,
}

/// `a(v, v_*, θ, φ) = -((1 - cos θ)/2)(v - v_*) + (sin θ / 2) Γ(v - v_*, φ)`.
pub fn deflect(v: Vec3, v_star: Vec3, theta: f64, phi: f64) -> Result<JumpCoefficient> {
    if !(v.is_finite() && v_star.is_finite() && theta.is_finite() && phi.is_finite()) {
        return Err(domain("non-finite collision input"));
    }
    let x = v - v_star;
    let norm = x.norm();
    if norm == 0.0 {
        return Ok(JumpCoefficient::default());
    }
    let frame = frame_unchecked(x, norm);
    let (sin_p, cos_p) = phi.sin_cos();
    let gamma_vec = frame.i_vec * cos_p + frame.j_vec * sin_p;
    let half_sin = 0.5 * theta.sin();
    // 1 - cos θ = 2 sin²(θ/2) keeps grazing increments accurate.
    let s = (0.5 * theta).sin();
    let delta_v = x * (-s * s) + gamma_vec * half_sin;
    Ok(JumpCoefficient { delta_v })
}
