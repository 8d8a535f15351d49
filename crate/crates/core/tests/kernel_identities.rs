use nanbu_core::identities::{jump_integrals_mc, GROWTH_C2, GROWTH_C4};
use nanbu_core::kernel::k_gamma;
use nanbu_core::{KernelParams, StreamKey, Vec3, COMPENSATION_SIGN};
use rand::Rng;

fn random_pairs(n: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = StreamKey::new(seed).stream(nanbu_core::Purpose::Auxiliary, 0, 0);
    let mut draw = || {
        Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        )
    };
    (0..n).map(|_| (draw(), draw())).collect()
}

fn within(est: f64, se: f64, want: f64, sigmas: f64) -> bool {
    (est - want).abs() <= sigmas * se
}

#[test]
fn first_and_second_moment_identities() {
    let k = KernelParams::canonical();
    let key = StreamKey::new(11);
    let beta0 = k.beta0();
    for (i, (v, w)) in random_pairs(10, 5).into_iter().enumerate() {
        let r = jump_integrals_mc(&k, v, w, 0.0, 1_000_000, &key, i as u64).unwrap();
        let x = v - w;
        let first = k_gamma(x, k.gamma()) * (COMPENSATION_SIGN * beta0);
        for a in 0..3 {
            assert!(
                within(r.first[a], r.first_se[a], first[a], 3.0),
                "pair {i} axis {a}: {r:?} vs {first:?}"
            );
        }
        let second = beta0 * x.norm().powf(k.gamma() + 2.0);
        assert!(
            within(r.second, r.second_se, second, 3.0),
            "pair {i}: {} ± {} vs {second}",
            r.second,
            r.second_se
        );
        let full = k.compensation_mean(v, w, 0.0).unwrap();
        assert!((full - first).norm() <= 1e-12 * first.norm());
    }
}

#[test]
fn omitted_range_mean_matches_closed_form() {
    let k = KernelParams::canonical();
    let v = Vec3::new(1.0, 0.0, 0.0);
    let r = jump_integrals_mc(&k, v, Vec3::ZERO, 5.0, 10_000_000, &StreamKey::new(12), 0).unwrap();
    let closed = k.compensation_mean(v, Vec3::ZERO, 5.0).unwrap();
    assert!(closed.x() < 0.0);
    for a in 0..3 {
        assert!(
            within(r.first[a], r.first_se[a], closed[a], 3.0),
            "{r:?} vs {closed:?}"
        );
    }
}

#[test]
fn moment_growth_bounds() {
    let k = KernelParams::canonical();
    let key = StreamKey::new(13);
    let mut ratios = (0.0f64, 0.0f64);
    for (i, (v, w)) in random_pairs(10, 6).into_iter().enumerate() {
        let r = jump_integrals_mc(&k, v, w, 0.0, 200_000, &key, i as u64).unwrap();
        let b2 = v.norm2() + w.norm2() + 1.0;
        let b4 = v.norm2().powi(2) + w.norm2().powi(2) + 1.0;
        ratios.0 = ratios.0.max(r.second / b2);
        ratios.1 = ratios.1.max(r.growth4 / b4);
    }
    assert!(ratios.0 <= GROWTH_C2 && ratios.1 <= GROWTH_C4, "{ratios:?}");
}
