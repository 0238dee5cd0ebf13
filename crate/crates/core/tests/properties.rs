use proptest::prelude::*;

use harvest_core::kernel::KernelEvaluator;
use harvest_core::measures::{SpatialMeasure, TimeMeasure};
use harvest_core::model::{derive_constants, validate_scenario, FieldSpec, ModelParams};
use harvest_core::solver::{solve_forward, solve_phi1, SolveOptions};
use harvest_core::{Field, Grid};

fn atoms_strategy(max_atoms: usize) -> impl Strategy<Value = SpatialMeasure> {
    prop::collection::vec((0.0..=1.0f64, -1.0..1.0f64), 0..=max_atoms).prop_map(SpatialMeasure::atoms)
}

fn nonneg_atoms(max_atoms: usize, max_mass: f64) -> impl Strategy<Value = SpatialMeasure> {
    prop::collection::vec((0.0..=1.0f64, 0.0..max_mass), 0..=max_atoms).prop_map(SpatialMeasure::atoms)
}

fn measure(slices: usize) -> impl Strategy<Value = TimeMeasure> {
    prop::collection::vec(atoms_strategy(3), slices).prop_map(|s| TimeMeasure::uniform(1.0, 1.0, s).unwrap())
}

fn nonneg_measure(slices: usize, max_mass: f64) -> impl Strategy<Value = TimeMeasure> {
    prop::collection::vec(nonneg_atoms(3, max_mass), slices).prop_map(|s| TimeMeasure::uniform(1.0, 1.0, s).unwrap())
}

fn test_field(grid: Grid, a: f64, b: f64) -> Field {
    Field::from_fn(grid, |t, x| (a * x + t).sin() + b * x * x)
}

fn profile(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = FieldSpec> {
    prop::collection::vec(lo..hi, n).prop_map(FieldSpec::Profile)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairing_is_bilinear(mu in measure(3), nu in measure(2), a in -3.0..3.0f64, fa in 0.1..5.0f64, fb in -1.0..1.0f64) {
        let grid = Grid::new(1.0, 1.0, 21, 30).unwrap();
        let f = test_field(grid, fa, fb);
        let lhs = TimeMeasure::combine(a, &mu, 1.0, &nu).unwrap().pair(&f).unwrap();
        let rhs = a * mu.pair(&f).unwrap() + nu.pair(&f).unwrap();
        let scale = 1.0 + (a.abs() + 1.0) * (mu.total_variation_sup() + nu.total_variation_sup()) * f.sup_abs();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn pairing_bounded_by_total_variation(mu in measure(4), fa in 0.1..5.0f64, fb in -1.0..1.0f64) {
        let grid = Grid::new(1.0, 1.0, 21, 40).unwrap();
        let f = test_field(grid, fa, fb);
        let bound = mu.total_variation_sup() * grid.t * f.sup_abs();
        prop_assert!(mu.pair(&f).unwrap().abs() <= bound * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn budget_value_scales_linearly(mu in nonneg_measure(3, 2.0), lambda in 0.0..10.0f64, b in profile(4, 0.5, 3.0)) {
        for k in 0..3 {
            let base = mu.budget_value(&b, k).unwrap();
            let scaled = mu.scaled(lambda).budget_value(&b, k).unwrap();
            prop_assert!((scaled - lambda * base).abs() <= 1e-13 * (1.0 + lambda * base));
        }
    }

    #[test]
    fn kernel_is_positive(t in 1e-4..5.0f64, x in 0.0..=1.0f64, y in 0.0..=1.0f64) {
        let k = KernelEvaluator::new(1.0, 1e-14).unwrap();
        prop_assert!(k.eval_d(t, x, y).unwrap() > 0.0);
    }

    #[test]
    fn kernel_tail_is_certified(t in 1e-3..3.0f64, x in 0.0..=2.0f64, y in 0.0..=2.0f64) {
        let coarse = KernelEvaluator::new(2.0, 1e-8).unwrap();
        let fine = KernelEvaluator::new(2.0, 5e-9).unwrap();
        prop_assert!((coarse.eval_d(t, x, y).unwrap() - fine.eval_d(t, x, y).unwrap()).abs() <= 1e-8);
        prop_assert!((coarse.eval_dx_d(t, x, y).unwrap() - fine.eval_dx_d(t, x, y).unwrap()).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kernel_semigroup(s in 0.01..0.4f64, t in 0.01..0.4f64, x in 0.0..=1.0f64, y in 0.0..=1.0f64) {
        let k = KernelEvaluator::new(1.0, 1e-14).unwrap();
        let n = 4000;
        let h = 1.0 / n as f64;
        let f = |z: f64| k.eval_d(s, x, z).unwrap() * k.eval_d(t, z, y).unwrap();
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let composed = acc * h / 3.0;
        let direct = k.eval_d(s + t, x, y).unwrap();
        prop_assert!((composed - direct).abs() <= 1e-8 * direct.max(1.0), "{composed} vs {direct}");
    }

    #[test]
    fn forward_solutions_obey_the_maximum_principle(
        alpha in profile(4, 0.1, 3.0),
        h in profile(5, 0.2, 2.0),
        phi0 in profile(7, 0.0, 2.5),
        mu in nonneg_measure(4, 4.0),
    ) {
        let grid = Grid::new(1.0, 1.0, 41, 60).unwrap();
        let mut p = ModelParams::uniform(1.0, 1.0, 1.0, 0.1, 1.0);
        p.alpha = alpha;
        p.h = h;
        p.phi0 = phi0;
        prop_assume!(validate_scenario(&p, &grid).is_admissible());
        let phi = solve_forward(&p, &mu, &grid, &SolveOptions::default()).unwrap();
        let m = derive_constants(&p).unwrap().m;
        prop_assert!(phi.min() >= -1e-10, "min {}", phi.min());
        prop_assert!(phi.max() <= m + 1e-10, "max {} vs M {m}", phi.max());
    }

    #[test]
    fn tangent_is_linear_in_the_direction(
        mu in nonneg_measure(2, 1.0),
        n1 in measure(3),
        n2 in measure(1),
        a in -2.0..2.0f64,
    ) {
        let grid = Grid::new(1.0, 1.0, 31, 40).unwrap();
        let p = ModelParams::uniform(1.5, 1.0, 0.7, 0.1, 1.0);
        let o = SolveOptions::default();
        let phi = solve_forward(&p, &mu, &grid, &o).unwrap();
        let combo = TimeMeasure::combine(a, &n1, 1.0, &n2).unwrap();
        let lhs = solve_phi1(&p, &mu, &combo, &phi, &grid, &o).unwrap();
        let f1 = solve_phi1(&p, &mu, &n1, &phi, &grid, &o).unwrap();
        let f2 = solve_phi1(&p, &mu, &n2, &phi, &grid, &o).unwrap();
        let rhs = Field::from_values(grid, f1.values().iter().zip(f2.values()).map(|(x, y)| a * x + y).collect()).unwrap();
        prop_assert!(lhs.difference(&rhs).unwrap().sup_abs() <= 1e-10);
    }

    #[test]
    fn constant_coefficients_give_exact_constants(alpha in 0.1..5.0f64, h in 0.1..3.0f64, phi0 in 0.0..4.0f64) {
        let c = derive_constants(&ModelParams::uniform(alpha, h, phi0, 0.0, 1.0)).unwrap();
        prop_assert_eq!(c.m, h.max(phi0));
        prop_assert_eq!(c.alpha1, alpha);
        prop_assert_eq!(c.h_star, alpha);
        prop_assert_eq!(c.alpha2, 0.0);
        prop_assert_eq!(c.f, alpha * h);
    }
}
