//! Monte Carlo estimates of the per-pair jump integrals over `(z, φ)`.
//!
//! The mark `z` is drawn from a shifted Pareto law whose tail matches the
//! `z^(-2/ν)` decay of `|c|²`, so the importance weights stay bounded and the
//! estimators have finite variance.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::kernel::{deflect, KernelParams};
use crate::rng::{Purpose, StreamKey};
use crate::Vec3;

const CHUNK: usize = 1 << 16;

/// Regression bounds `C_k` in `∫∫ Δ̃|·|^k ≤ C_k(|v|^k + |v_*|^k + 1)` for the
/// canonical kernel: twice the largest ratio seen on random pairs in `[-2, 2]³`.
pub const GROWTH_C2: f64 = 3.5;
pub const GROWTH_C4: f64 = 12.0;

/// Estimates of `∫∫ c`, `∫∫ |c|²` and `∫∫ Δ̃|·|⁴` over `z > z_from`, `φ ∈ (0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpIntegrals {
    pub first: Vec3,
    pub first_se: Vec3,
    pub second: f64,
    pub second_se: f64,
    pub growth4: f64,
    pub growth4_se: f64,
    pub samples: usize,
}

/// `Δ̃|·|^k(v, c) = |v + c|^k - |v|^k - k|v|^(k-2) v·c` for even `k`, expanded
/// in `d = |v + c|² - |v|²` so that the first-order terms cancel exactly.
pub fn growth_integrand(v: Vec3, c: Vec3, k: u32) -> f64 {
    debug_assert!(k >= 2 && k.is_multiple_of(2));
    let m = k / 2;
    let r2 = v.norm2();
    let d = 2.0 * v.dot(&c) + c.norm2();
    let mut total = m as f64 * r2.powi(m as i32 - 1) * c.norm2();
    let mut binom = m as f64;
    for j in 2..=m {
        binom *= (m - j + 1) as f64 / j as f64;
        total += binom * r2.powi((m - j) as i32) * d.powi(j as i32);
    }
    total
}

#[derive(Clone, Copy, Default)]
struct Sums {
    n: usize,
    s1: [f64; 3],
    q1: [f64; 3],
    s2: f64,
    q2: f64,
    s4: f64,
    q4: f64,
}

impl Sums {
    fn merge(mut self, o: Sums) -> Sums {
        self.n += o.n;
        for a in 0..3 {
            self.s1[a] += o.s1[a];
            self.q1[a] += o.q1[a];
        }
        self.s2 += o.s2;
        self.q2 += o.q2;
        self.s4 += o.s4;
        self.q4 += o.q4;
        self
    }
}

fn mean_se(s: f64, q: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let m = s / nf;
    let var = ((q / nf - m * m) * nf / (nf - 1.0)).max(0.0);
    (m, (var / nf).sqrt())
}

pub fn jump_integrals_mc(
    kernel: &KernelParams,
    v: Vec3,
    v_star: Vec3,
    z_from: f64,
    samples: usize,
    key: &StreamKey,
    index: u64,
) -> Result<JumpIntegrals> {
    if samples < 2 {
        return Err(domain("Monte Carlo estimate needs at least two samples"));
    }
    if !(z_from >= 0.0 && z_from.is_finite()) {
        return Err(domain(format!(
            "lower mark {z_from} must be finite and >= 0"
        )));
    }
    let x = v - v_star;
    let speed = x.norm();
    if speed == 0.0 {
        return Ok(JumpIntegrals {
            first: Vec3::ZERO,
            first_se: Vec3::ZERO,
            second: 0.0,
            second_se: 0.0,
            growth4: 0.0,
            growth4_se: 0.0,
            samples,
        });
    }
    let tail = 2.0 / kernel.nu();
    let scale = kernel.k() * speed.powf(kernel.gamma()) / kernel.nu() + z_from;
    let chunks = samples.div_ceil(CHUNK);
    let sums = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Sums> {
            let mut rng = key.stream(Purpose::Auxiliary, index, c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut acc = Sums {
                n,
                ..Sums::default()
            };
            for _ in 0..n {
                let u: f64 = rng.random();
                let t = (1.0 - u).powf(-1.0 / (tail - 1.0)) - 1.0;
                let z = z_from + scale * t;
                let density = (tail - 1.0) / scale * (1.0 + t).powf(-tail);
                let phi = 2.0 * PI * rng.random::<f64>();
                let weight = 2.0 * PI / density;
                let c = deflect(v, v_star, kernel.deviation_angle(speed, z), phi)?.delta_v;
                for a in 0..3 {
                    let y = weight * c[a];
                    acc.s1[a] += y;
                    acc.q1[a] += y * y;
                }
                let y2 = weight * c.norm2();
                acc.s2 += y2;
                acc.q2 += y2 * y2;
                let y4 = weight * growth_integrand(v, c, 4);
                acc.s4 += y4;
                acc.q4 += y4 * y4;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<Sums>>>()?
        .into_iter()
        .fold(Sums::default(), Sums::merge);
    let mut first = [0.0; 3];
    let mut first_se = [0.0; 3];
    for a in 0..3 {
        (first[a], first_se[a]) = mean_se(sums.s1[a], sums.q1[a], sums.n);
    }
    let (second, second_se) = mean_se(sums.s2, sums.q2, sums.n);
    let (growth4, growth4_se) = mean_se(sums.s4, sums.q4, sums.n);
    Ok(JumpIntegrals {
        first: first.into(),
        first_se: first_se.into(),
        second,
        second_se,
        growth4,
        growth4_se,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_integrand_of_square_is_jump_square() {
        let v = Vec3::new(0.3, -1.2, 2.0);
        let c = Vec3::new(0.01, 0.2, -0.05);
        assert!((growth_integrand(v, c, 2) - c.norm2()).abs() < 1e-15);
        let r2 = v.norm2();
        for k in [4u32, 6] {
            let kf = k as f64;
            let direct = (v + c).norm().powf(kf)
                - r2.powf(kf / 2.0)
                - kf * r2.powf(kf / 2.0 - 1.0) * v.dot(&c);
            assert!((growth_integrand(v, c, k) - direct).abs() < 1e-10, "{k}");
        }
    }

    #[test]
    fn zero_relative_velocity() {
        let k = KernelParams::canonical();
        let v = Vec3::new(1.0, 2.0, 3.0);
        let r = jump_integrals_mc(&k, v, v, 0.0, 10, &StreamKey::new(0), 0).unwrap();
        assert_eq!(r.second, 0.0);
    }
}
