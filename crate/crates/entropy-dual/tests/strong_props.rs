use entropy_dual::grid::random_smooth;
use entropy_dual::strong::{entropy_drift, entropy_series, gronwall_check, integrate_sharp, integrate_sharp_from, StrongOptions};
use entropy_dual::{make_system, FieldShape, PeriodicGrid, SystemParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line(points: usize) -> PeriodicGrid {
    PeriodicGrid::line(points, 2.0 * std::f64::consts::PI).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn identical_inputs_give_identical_runs(seed in 0u64..1000) {
        let sys = make_system("nls", &SystemParams::default()).unwrap();
        let g = line(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v0 = random_smooth(&g, FieldShape::Vector(sys.n), 3, 0.1, &mut rng);
        let opts = StrongOptions::with_cfl(&sys, &g, 0.1, 8, 0.5, true);
        let a = integrate_sharp(&sys, &v0, &opts).unwrap();
        let b = integrate_sharp(&sys, &v0, &opts).unwrap();
        for (x, y) in a.sharp.iter().zip(&b.sharp) {
            prop_assert_eq!(&x.data, &y.data);
        }
    }

    #[test]
    fn nlkg_runs_backwards_to_its_start(seed in 0u64..1000) {
        let sys = make_system("nlkg", &SystemParams::default()).unwrap();
        let g = line(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v0 = random_smooth(&g, FieldShape::Vector(sys.n), 2, 0.1, &mut rng);
        let opts = StrongOptions::with_cfl(&sys, &g, 0.2, 4, 0.5, true);
        let fwd = integrate_sharp(&sys, &v0, &opts).unwrap();
        let dt = opts.dt();
        let back = integrate_sharp_from(&sys, fwd.sharp.last().unwrap(), -dt, opts.intervals, opts.substeps, true, 1e6, 1e-13).unwrap();
        let err = back.sharp.last().unwrap().sub(&fwd.sharp[0]).max_abs();
        prop_assert!(err <= 1e-6, "{err:e}");
    }
}

#[test]
fn entropy_is_conserved_with_fourth_order_drift() {
    let g = line(64);
    for name in ["gkdv", "nls", "nlkg"] {
        let sys = make_system(name, &SystemParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v0 = random_smooth(&g, FieldShape::Vector(sys.n), 2, 0.1, &mut rng);
        let coarse = StrongOptions::with_cfl(&sys, &g, 0.25, 8, 0.5, true);
        let fine = StrongOptions { substeps: 2 * coarse.substeps, ..coarse };
        let d1 = entropy_drift(&entropy_series(&sys, &integrate_sharp(&sys, &v0, &coarse).unwrap()));
        let d2 = entropy_drift(&entropy_series(&sys, &integrate_sharp(&sys, &v0, &fine).unwrap()));
        assert!(d1 <= 1e-6, "{name}: {d1:e}");
        // Below roundoff the ratio is meaningless.
        assert!(d2 <= d1 / 8.0 || d1 < 1e-13, "{name}: {d1:e} -> {d2:e}");
    }
}

#[test]
fn jeffreys_divergence_obeys_the_exponential_bound() {
    let sys = make_system("nls", &SystemParams::default()).unwrap();
    let g = line(32);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u0 = random_smooth(&g, FieldShape::Vector(sys.n), 2, 0.1, &mut rng);
    let mut v0 = u0.clone();
    v0.axpy(1.0, &random_smooth(&g, FieldShape::Vector(sys.n), 2, 1e-3, &mut rng));
    let opts = StrongOptions::with_cfl(&sys, &g, 0.5, 16, 0.5, true);
    let a = integrate_sharp(&sys, &u0, &opts).unwrap();
    let b = integrate_sharp(&sys, &v0, &opts).unwrap();
    let rep = gronwall_check(&sys, &a, &b).unwrap();
    assert!(rep.divergence.iter().all(|d| *d >= 0.0));
    assert!(rep.worst_ratio <= 1.0 + 1e-6, "{rep:?}");
}
