//! Kozachenko–Leonenko nearest-neighbour estimate of `∫ f ln f`.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use super::kdtree::KdTree;
use crate::error::{domain, Result};
use crate::rng::{Purpose, StreamKey};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// `∫ f ln f`, i.e. minus the differential entropy.
    pub value: f64,
    /// Standard error from the spread of the per-point terms.
    pub std_err: f64,
}

fn log_distances(sample: &[Vec3], k: usize) -> Vec<f64> {
    let tree = KdTree::new(sample);
    (0..sample.len())
        .into_par_iter()
        .map(|i| tree.kth_neighbour_distance(sample[i], k, i).ln())
        .collect()
}

pub fn entropy_knn(sample: &[Vec3], k: usize) -> Result<EntropyEstimate> {
    let n = sample.len();
    if n < 100 {
        return Err(domain(format!(
            "entropy estimate needs >= 100 points, got {n}"
        )));
    }
    if !(3..=20).contains(&k) {
        return Err(domain(format!("neighbour rank {k} must lie in [3, 20]")));
    }
    let mut logs = log_distances(sample, k);
    if logs.iter().any(|l| !l.is_finite()) {
        log::warn!("duplicate points in entropy sample; jittering by 1e-12");
        let mut rng = StreamKey::new(0).stream(Purpose::Auxiliary, 0, n as u64);
        let jittered: Vec<Vec3> = sample
            .iter()
            .map(|v| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                let z: f64 = StandardNormal.sample(&mut rng);
                *v + Vec3::new(x, y, z) * 1e-12
            })
            .collect();
        logs = log_distances(&jittered, k);
    }
    let offset = digamma(n as f64) - digamma(k as f64) + (4.0 * PI / 3.0).ln();
    let terms: Vec<f64> = logs.iter().map(|l| offset + 3.0 * l).collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(EntropyEstimate {
        value: -mean,
        std_err: (var / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::mollifier_sample;
    use rand::Rng;

    #[test]
    fn gaussian_and_scaling() {
        let mut rng = StreamKey::new(1).stream(Purpose::Auxiliary, 0, 0);
        let s: Vec<Vec3> = (0..100_000)
            .map(|_| mollifier_sample(1.0, &mut rng))
            .collect();
        let e = entropy_knn(&s, 5).unwrap();
        let exact = -1.5 * (2.0 * PI * std::f64::consts::E).ln();
        assert!((e.value - exact).abs() < 0.03, "{}", e.value);
        assert!(e.std_err > 0.0 && e.std_err < 0.01);
        let scaled: Vec<Vec3> = s.iter().map(|v| *v * 2.0).collect();
        let e2 = entropy_knn(&scaled, 5).unwrap();
        assert!((e.value - e2.value - 3.0 * 2f64.ln()).abs() <= 0.05);
    }

    #[test]
    fn uniform_cube() {
        let mut rng = StreamKey::new(2).stream(Purpose::Auxiliary, 0, 0);
        let s: Vec<Vec3> = (0..100_000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        // The estimator is biased upward near the faces of the cube.
        let e = entropy_knn(&s, 5).unwrap();
        assert!(e.value.abs() < 0.035, "{}", e.value);
    }

    #[test]
    fn duplicates_are_jittered() {
        let mut rng = StreamKey::new(3).stream(Purpose::Auxiliary, 0, 0);
        let base: Vec<Vec3> = (0..100).map(|_| mollifier_sample(1.0, &mut rng)).collect();
        let s: Vec<Vec3> = (0..6).flat_map(|_| base.iter().copied()).collect();
        assert!(entropy_knn(&s, 5).unwrap().value.is_finite());
        assert!(entropy_knn(&s[..50], 5).is_err());
        assert!(entropy_knn(&s, 2).is_err());
    }
}
