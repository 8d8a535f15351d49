//! Wasserstein distances between samples: exact assignment for moderate
//! sizes, sliced distances for anything larger.

use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Result};
use crate::rng::{Purpose, StreamKey};
use crate::Vec3;

/// Largest sample size accepted by the exact solvers.
pub const EXACT_LIMIT: usize = 4096;

/// Minimum-cost perfect matching of an `n × n` cost given row by row through
/// `cost(i, j)`. Shortest augmenting paths with potentials; costs are never
/// stored, so memory is `O(n)`.
///
/// Returns the column assigned to each row and the total cost.
pub fn assignment<F: Fn(usize, usize) -> f64>(n: usize, cost: F) -> (Vec<usize>, f64) {
    // 1-based internal indexing with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![f64::INFINITY; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    for (i, &j) in col_of.iter().enumerate() {
        total += cost(i, j);
    }
    (col_of, total)
}

fn check_exact(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.len() != b.len() {
        return Err(domain(format!(
            "exact transport needs equal sizes, got {} and {}; use sliced_w2",
            a.len(),
            b.len()
        )));
    }
    if a.len() > EXACT_LIMIT {
        return Err(domain(format!(
            "exact transport is limited to {EXACT_LIMIT} points, got {}; use sliced_w2",
            a.len()
        )));
    }
    if a.is_empty() {
        return Err(domain("transport between empty samples"));
    }
    Ok(())
}

/// `W₂` between two uniform empirical measures of equal size.
pub fn w2_exact(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_exact(a, b)?;
    let (_, total) = assignment(a.len(), |i, j| (a[i] - b[j]).norm2());
    Ok((total.max(0.0) / a.len() as f64).sqrt())
}

/// `W₁` between two uniform empirical measures of equal size.
pub fn w1_exact(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check_exact(a, b)?;
    let (_, total) = assignment(a.len(), |i, j| (a[i] - b[j]).norm());
    Ok(total.max(0.0) / a.len() as f64)
}

/// `(mean |a_i - b_i|²)^(1/2)`: the cost of the index coupling, an upper bound on `W₂`.
pub fn coupling_w2(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(domain("index coupling needs equal nonempty samples"));
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (*x - *y).norm2()).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Uniformly distributed unit vectors drawn from the projection stream of `seed`.
pub fn random_directions(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = StreamKey::new(seed).stream(Purpose::Projection, 0, 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: f64 = StandardNormal.sample(&mut rng);
        let y: f64 = StandardNormal.sample(&mut rng);
        let z: f64 = StandardNormal.sample(&mut rng);
        let v = Vec3::new(x, y, z);
        let r = v.norm();
        if r > 1e-12 {
            out.push(v / r);
        }
    }
    out
}

fn sorted_projection(points: &[Vec3], e: Vec3) -> Vec<f64> {
    let mut p: Vec<f64> = points.iter().map(|v| v.dot(&e)).collect();
    p.sort_unstable_by(f64::total_cmp);
    p
}

/// Squared `W₂` between two sorted 1D uniform empirical measures of any sizes,
/// integrating the quantile difference over the merged breakpoints.
pub fn w2_sq_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / na as f64;
    }
    let (mut i, mut j) = (0, 0);
    let mut last = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        acc += (next - last) * (a[i] - b[j]).powi(2);
        last = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced `W₂`: the root mean square over `directions` of the 1D `W₂` between
/// projections.
pub fn sliced_w2_dirs(a: &[Vec3], b: &[Vec3], directions: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() || directions.is_empty() {
        return Err(domain("sliced W2 needs nonempty samples and directions"));
    }
    let total: f64 = directions
        .iter()
        .map(|&e| w2_sq_1d_sorted(&sorted_projection(a, e), &sorted_projection(b, e)))
        .sum();
    Ok((total / directions.len() as f64).sqrt())
}

/// [`sliced_w2_dirs`] over `n_projections` random directions fixed by `seed`.
pub fn sliced_w2(a: &[Vec3], b: &[Vec3], n_projections: usize, seed: u64) -> Result<f64> {
    sliced_w2_dirs(a, b, &random_directions(n_projections, seed))
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `∫_{-∞}^{q} x φ(x) dx` and `∫_{-∞}^{q} x² φ(x) dx`.
fn gaussian_partial_moments(q: f64) -> (f64, f64) {
    if q == f64::NEG_INFINITY {
        return (0.0, 0.0);
    }
    if q == f64::INFINITY {
        return (0.0, 1.0);
    }
    let phi = (-0.5 * q * q).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (-phi, std_normal().cdf(q) - q * phi)
}

/// Squared `W₂` between a sorted 1D uniform empirical measure and `N(m, s²)`,
/// in closed form on each quantile cell.
pub fn w2_sq_1d_to_gaussian(sorted: &[f64], m: f64, s: f64) -> f64 {
    let n = sorted.len();
    let normal = std_normal();
    let mut acc = 0.0;
    let mut lo = gaussian_partial_moments(f64::NEG_INFINITY);
    for (i, &x) in sorted.iter().enumerate() {
        let u = (i + 1) as f64 / n as f64;
        let q = if i + 1 == n {
            f64::INFINITY
        } else {
            normal.inverse_cdf(u)
        };
        let hi = gaussian_partial_moments(q);
        let width = 1.0 / n as f64;
        let first = hi.0 - lo.0;
        let second = hi.1 - lo.1;
        // ∫ (x - m - s Q(u))² du over the cell.
        let y = x - m;
        acc += y * y * width - 2.0 * y * s * first + s * s * second;
        lo = hi;
    }
    acc.max(0.0)
}

/// Sliced `W₂` from a sample to the isotropic Gaussian `N(mean, σ² I)`.
pub fn sliced_w2_to_gaussian(
    a: &[Vec3],
    mean: Vec3,
    sigma: f64,
    directions: &[Vec3],
) -> Result<f64> {
    if a.is_empty() || directions.is_empty() {
        return Err(domain("sliced W2 needs a nonempty sample and directions"));
    }
    let total: f64 = directions
        .iter()
        .map(|&e| w2_sq_1d_to_gaussian(&sorted_projection(a, e), mean.dot(&e), sigma))
        .sum();
    Ok((total / directions.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::mollifier_sample;
    use proptest::prelude::*;

    fn gaussian(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = StreamKey::new(seed).stream(Purpose::Auxiliary, 0, 0);
        (0..n).map(|_| mollifier_sample(1.0, &mut rng)).collect()
    }

    fn brute_force(a: &[Vec3], b: &[Vec3]) -> f64 {
        fn perms(
            k: usize,
            cur: &mut Vec<usize>,
            used: &mut Vec<bool>,
            f: &mut dyn FnMut(&[usize]),
        ) {
            if cur.len() == k {
                f(cur);
                return;
            }
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    perms(k, cur, used, f);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        perms(a.len(), &mut vec![], &mut vec![false; a.len()], &mut |p| {
            let c: f64 = p
                .iter()
                .enumerate()
                .map(|(i, &j)| (a[i] - b[j]).norm2())
                .sum();
            best = best.min(c);
        });
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn small_examples() {
        let a = vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0)];
        assert!((w2_exact(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let p = Vec3::new(1.0, 2.0, 3.0);
        let q = Vec3::new(-1.0, 0.5, 2.0);
        assert!((w2_exact(&[p], &[q]).unwrap() - (p - q).norm()).abs() < 1e-12);
        assert_eq!(w2_exact(&a, &a).unwrap(), 0.0);
        assert!(w2_exact(&a, &b[..1]).is_err());
    }

    #[test]
    fn too_large_is_rejected() {
        let a = vec![Vec3::ZERO; EXACT_LIMIT + 1];
        let err = w2_exact(&a, &a).unwrap_err().to_string();
        assert!(err.contains("sliced_w2"));
    }

    #[test]
    fn translation_gives_exact_w1_and_w2() {
        let a = gaussian(200, 1);
        let t = Vec3::new(0.3, -0.2, 0.1);
        let b: Vec<Vec3> = a.iter().map(|v| *v + t).collect();
        assert!((w2_exact(&a, &b).unwrap() - t.norm()).abs() < 1e-9);
        assert!((w1_exact(&a, &b).unwrap() - t.norm()).abs() < 1e-9);
    }

    #[test]
    fn sliced_shift_matches_sphere_average() {
        let a = gaussian(20_000, 2);
        let t = Vec3::new(1.0, 0.0, 0.0);
        let b: Vec<Vec3> = a.iter().map(|v| *v + t).collect();
        let s = sliced_w2(&a, &b, 2000, 7).unwrap();
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 0.02, "{s}");
    }

    #[test]
    fn sliced_equals_exact_on_line_data() {
        let mut rng = StreamKey::new(3).stream(Purpose::Auxiliary, 0, 0);
        let e = Vec3::new(1.0, 2.0, -2.0) / 3.0;
        let line = |rng: &mut crate::rng::Stream| {
            let x: f64 = StandardNormal.sample(rng);
            e * x
        };
        let a: Vec<Vec3> = (0..300).map(|_| line(&mut rng)).collect();
        let b: Vec<Vec3> = (0..300).map(|_| line(&mut rng) + e * 0.5).collect();
        let s = sliced_w2_dirs(&a, &b, &[e]).unwrap();
        let w = w2_exact(&a, &b).unwrap();
        assert!((s - w).abs() < 1e-9, "{s} {w}");
    }

    #[test]
    fn unequal_sizes_reduce_to_equal_case() {
        let a = vec![0.0, 1.0, 2.0];
        let b = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0];
        assert!(w2_sq_1d_sorted(&a, &b).abs() < 1e-15);
        let b2 = vec![0.5, 1.5];
        // Cells: [0,1/3] 0 vs .5, [1/3,1/2] 1 vs .5, [1/2,2/3] 1 vs 1.5, [2/3,1] 2 vs 1.5.
        let want = 0.25 / 3.0 + 0.25 / 6.0 + 0.25 / 6.0 + 0.25 / 3.0;
        assert!((w2_sq_1d_sorted(&a, &b2) - want).abs() < 1e-15);
    }

    #[test]
    fn gaussian_reference_distance() {
        // Exact Gaussian quantiles of a large sample sit near zero; a shifted
        // sample sits at the shift.
        let a = gaussian(50_000, 4);
        let dirs = random_directions(64, 1);
        let d0 = sliced_w2_to_gaussian(&a, Vec3::ZERO, 1.0, &dirs).unwrap();
        assert!(d0 < 0.02, "{d0}");
        let t = Vec3::new(0.0, 0.0, 0.6);
        let d1 = sliced_w2_to_gaussian(&a, t, 1.0, &random_directions(4000, 2)).unwrap();
        assert!((d1 - 0.6 / 3f64.sqrt()).abs() < 0.02, "{d1}");
        // 1D closed form against a two-sample estimate.
        let mut rng = StreamKey::new(8).stream(Purpose::Auxiliary, 0, 0);
        let mut xs: Vec<f64> = (0..2000).map(|_| 2.0 * rng.random::<f64>()).collect();
        xs.sort_unstable_by(f64::total_cmp);
        let mut ys: Vec<f64> = (0..400_000)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                0.5 + 0.8 * g
            })
            .collect();
        ys.sort_unstable_by(f64::total_cmp);
        let closed = w2_sq_1d_to_gaussian(&xs, 0.5, 0.8);
        let mc = w2_sq_1d_sorted(&xs, &ys);
        assert!((closed - mc).abs() < 0.01 * closed, "{closed} {mc}");
    }

    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn matches_brute_force(seed in 0u64..10_000, n in 1usize..7) {
            let a = gaussian(n, seed);
            let b = gaussian(n, seed + 1_000_000);
            let w = w2_exact(&a, &b).unwrap();
            prop_assert!((w - brute_force(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn metric_axioms(seed in 0u64..10_000, n in 2usize..40) {
            let a = gaussian(n, seed);
            let b = gaussian(n, seed + 1);
            let c: Vec<Vec3> = gaussian(n, seed + 2).into_iter().map(|v| v * 2.0).collect();
            let ab = w2_exact(&a, &b).unwrap();
            let ba = w2_exact(&b, &a).unwrap();
            let bc = w2_exact(&b, &c).unwrap();
            let ac = w2_exact(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!(w2_exact(&a, &a).unwrap() < 1e-9);
        }

        #[test]
        fn sliced_is_dominated_by_exact(seed in 0u64..10_000, n in 2usize..200) {
            let a = gaussian(n, seed);
            let b: Vec<Vec3> = gaussian(n, seed + 7).into_iter().map(|v| v * 1.5).collect();
            let s = sliced_w2(&a, &b, 32, seed).unwrap();
            prop_assert!(s <= w2_exact(&a, &b).unwrap() + 1e-9);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..10_000, n in 2usize..60) {
            let a = gaussian(n, seed);
            let b = gaussian(n, seed + 3);
            let mut r = b.clone();
            r.reverse();
            prop_assert!((w2_exact(&a, &b).unwrap() - w2_exact(&a, &r).unwrap()).abs() < 1e-9);
            prop_assert!((sliced_w2(&a, &b, 16, 1).unwrap() - sliced_w2(&a, &r, 16, 1).unwrap()).abs() < 1e-12);
        }
    }
}
