mod common;

use common::*;
use pcaplab::concavity::*;
use pcaplab::model::GridSpec;
use pcaplab::pde_solver::{radial_solution, solve_exterior};
use proptest::prelude::*;

fn radial_field(cells: usize) -> pcaplab::model::ScalarField {
    let grid = GridSpec::cube(&[0.0, 0.0], 8.0, cells).unwrap();
    radial_solution(&[0.0, 0.0], 1.0, &plane(), &grid).unwrap()
}

#[test]
fn radial_support_functions_follow_the_power_law() {
    let d = dirs();
    let u = radial_field(256);
    let levels = resolvable_levels(&u, &geometric_levels(0.2, 0.8, 9));
    let sm = support_matrix(&u, &levels, &d).unwrap();
    for (k, t) in sm.t_grid.iter().enumerate() {
        for row in &sm.h {
            assert!((row[k] - 1.0 / t).abs() < 0.02 / t, "t = {t}: {}", row[k]);
        }
    }
    assert!(sm.max_increase() <= 0.0);
    let est = alpha_from_support(&sm).unwrap();
    assert!((est.alpha + 1.0).abs() < 0.05, "{}", est.alpha);
}

#[test]
fn ellipse_support_rounds_off_and_falls_below_the_optimum() {
    let d = dirs();
    let body = ellipse(2.0, &d);
    let rep = solve_exterior(&body, &config(&body, 128)).unwrap();
    let levels = resolvable_levels(&rep.field, &geometric_levels(0.1, 0.9, 17));
    let sm = support_matrix(&rep.field, &levels, &d).unwrap();
    assert!(sm.max_increase() <= 1e-9, "{}", sm.max_increase());
    let last = sm.t_grid.len() - 1;
    assert!(sm.anisotropy(last) > sm.anisotropy(0));
    assert!(sm.anisotropy(0) < 1.1, "{}", sm.anisotropy(0));
    let est = alpha_from_support(&sm).unwrap();
    assert!(est.alpha < -1.05, "{}", est.alpha);
}

#[test]
fn midpoint_test_accepts_the_optimum_and_rejects_more() {
    let u = radial_field(128);
    let floor = level_floor(&u);
    let at_optimum = midpoint_concavity_test(&u, -1.0, 5000, 3, floor, 1e-3).unwrap();
    assert!(at_optimum.passes(), "{}", at_optimum.max_violation());
    let stronger = midpoint_concavity_test(&u, -0.8, 5000, 3, floor, 1e-3).unwrap();
    assert!(stronger.max_violation() > 1e-3, "{}", stronger.max_violation());
}

#[test]
fn report_on_the_disk_attains_the_optimum() {
    let d = dirs();
    let body = disk(&d);
    let rep = solve_exterior(&body, &config(&body, 256)).unwrap();
    let report = concavity_report(&rep.field, &ConcavitySettings::new(d, -1.0, 5)).unwrap();
    assert!((report.alpha_pointwise + 1.0).abs() <= 0.05, "{}", report.alpha_pointwise);
    assert!((report.alpha_support + 1.0).abs() <= 0.05, "{}", report.alpha_support);
    assert!(report.estimator_gap() <= 0.05);
}

#[test]
fn midpoint_test_is_seed_deterministic() {
    let u = radial_field(64);
    let floor = level_floor(&u);
    let a = midpoint_concavity_test(&u, -1.0, 2000, 9, floor, 1e-3).unwrap();
    let b = midpoint_concavity_test(&u, -1.0, 2000, 9, floor, 1e-3).unwrap();
    assert_eq!(a.max_violation(), b.max_violation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn weaker_exponents_pass_when_a_stronger_one_does(beta in -4.0f64..-1.0, seed in 0u64..1000) {
        let u = radial_field(64);
        let floor = level_floor(&u);
        let strong = midpoint_concavity_test(&u, -1.0, 2000, seed, floor, 1e-3).unwrap();
        prop_assume!(strong.passes());
        let weak = midpoint_concavity_test(&u, beta, 2000, seed, floor, 1e-3).unwrap();
        prop_assert!(weak.passes(), "beta {} violation {}", beta, weak.max_violation());
    }
}
