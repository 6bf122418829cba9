use pcaplab::lab::{run, BodyLiteral, BodySpec, ExperimentConfig, Scenario, Verdict};
use serde_json::Value;

fn ball_config(center: [f64; 2], cells: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_defaults(2, 1.5, Scenario::Ball);
    cfg.bodies = vec![BodySpec::Literal(BodyLiteral::Ball { center: center.to_vec(), r: 1.0 })];
    cfg.grid.cells = Some(cells);
    cfg.resolve = false;
    cfg
}

fn metric(metrics: &std::collections::BTreeMap<String, Value>, key: &str) -> f64 {
    metrics[key].as_f64().unwrap_or_else(|| panic!("metric {key} missing"))
}

#[test]
fn coarse_ball_run_is_inconclusive() {
    let out = run(&ball_config([0.0, 0.0], 64)).unwrap();
    assert_eq!(out.report.verdict, Verdict::Inconclusive);
    let ind = &out.report.metrics["indicators"]["ball.capacity_two_grid"];
    assert_eq!(ind["exceeded"], true);
}

#[test]
fn ball_scenario_is_translation_invariant() {
    let a = run(&ball_config([0.0, 0.0], 128)).unwrap().report;
    let b = run(&ball_config([1.0, 1.0], 128)).unwrap().report;
    assert_eq!(a.verdict, b.verdict);
    assert_eq!(a.metrics["checks"], b.metrics["checks"]);
    for key in [
        "ball.linf_error",
        "capacity.energy",
        "capacity.asymptotic",
        "ball.alpha_pointwise",
        "ball.alpha_support",
        "levels.max_ratio_law_error",
        "scaling.max_deviation",
    ] {
        let (x, y) = (metric(&a.metrics, key), metric(&b.metrics, key));
        assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3), "{key}: {x} vs {y}");
    }
    assert_ne!(a.provenance.config_sha, b.provenance.config_sha);
}

#[test]
fn unit_ratio_member_of_the_ladder_reproduces_the_ball_run() {
    let ball = run(&ball_config([0.0, 0.0], 128)).unwrap().report;
    let mut cfg = ExperimentConfig::with_defaults(2, 1.5, Scenario::Theorem1);
    cfg.bodies = vec![BodySpec::Named("ellipse:1".into()), BodySpec::Named("ellipse:2".into())];
    cfg.grid.cells = Some(128);
    let t1 = run(&cfg).unwrap().report;
    for (k_ball, k_ladder) in [
        ("ball.alpha_pointwise", "ellipse:1.alpha_pointwise"),
        ("ball.alpha_support", "ellipse:1.alpha_support"),
        ("ball.energy", "ellipse:1.energy"),
        ("ball.midpoint_violation", "ellipse:1.midpoint_violation"),
    ] {
        assert_eq!(metric(&ball.metrics, k_ball), metric(&t1.metrics, k_ladder), "{k_ball}");
    }
    assert!(metric(&t1.metrics, "ellipse:2.alpha_support") < metric(&t1.metrics, "ellipse:1.alpha_support"));
}

#[test]
fn reports_are_reproducible() {
    let mut cfg = ExperimentConfig::with_defaults(2, 1.5, Scenario::Concavity);
    cfg.bodies = vec![BodySpec::Named("square".into())];
    cfg.grid.cells = Some(64);
    cfg.seed = 42;
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
    assert_eq!(a.tables, b.tables);
    cfg.seed = 43;
    let c = run(&cfg).unwrap();
    assert_ne!(a.report.provenance.config_sha, c.report.provenance.config_sha);
}

#[test]
fn level_set_scenarios_need_the_plane() {
    let cfg = ExperimentConfig::with_defaults(3, 2.0, Scenario::Levelsets);
    assert!(matches!(run(&cfg), Err(pcaplab::Error::Config(_))));
}

#[test]
fn levelsets_scenario_reports_square_non_homothety() {
    let mut cfg = ExperimentConfig::with_defaults(2, 1.5, Scenario::Levelsets);
    cfg.bodies = vec![BodySpec::Named("square".into())];
    cfg.grid.cells = Some(128);
    cfg.levels = Some(vec![0.6, 0.4, 0.2]);
    let out = run(&cfg).unwrap();
    let h = out.table("homothety.csv").unwrap();
    assert_eq!(h.rows.len(), 3);
    let col = h.header.iter().position(|c| c == "relative_residual").unwrap();
    for row in &h.rows {
        let r: f64 = row[col].parse().unwrap();
        assert!(r > 1e-4, "{row:?}");
    }
    assert!(out.table("levelsets.csv").unwrap().rows.len() >= 3 * 512);
}
