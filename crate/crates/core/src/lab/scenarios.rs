//! Scenario pipelines. Every metric comes from a library operation; this
//! module only sequences them and compares against thresholds.

use std::collections::BTreeSet;
use std::sync::Arc;

use rayon::prelude::*;

use super::config::{body_label, build_body, is_ball, BodySpec, ExperimentConfig, Scenario, Thresholds};
use super::plot::{Figure, Series};
use super::{num, Plot, Table, Tally};
use crate::brunn_minkowski::{bm_deficit, bm_sweep, BMReport, DEFAULT_LAMBDAS};
use crate::capacity::{
    capacity_asymptotic, capacity_ball_exact, capacity_energy, scaling_check, CapacityEstimate, ResolveSettings,
};
use crate::concavity::{concavity_report, ConcavityReport, ConcavitySettings};
use crate::geometry::{homothety_fit, level_set_extract, BodyForm, ConvexBody, DirectionGrid, HomothetyFit};
use crate::model::ProblemParams;
use crate::pde_solver::{linf_relative_error, BodyGridSettings, RadialSolution, SolveReport};
use crate::{Error, Result};

pub(crate) type Parts = (Tally, Vec<Table>, Vec<Plot>);

const LEVELSET_LEVELS: [f64; 8] = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2];
const SCALING_LEVELS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
/// Largest share of requested levels that may be unresolvable.
const MAX_SKIPPED_FRACTION: f64 = 0.5;

pub(crate) fn dispatch(cfg: &ExperimentConfig) -> Result<Parts> {
    let lab = Lab::new(cfg)?;
    let needs_levels = matches!(cfg.scenario, Scenario::Theorem1 | Scenario::Theorem2 | Scenario::Concavity | Scenario::Levelsets);
    if needs_levels && !lab.planar() {
        return Err(Error::Config(format!(
            "scenario {} extracts level sets, which needs n = 2",
            cfg.scenario.name()
        )));
    }
    match cfg.scenario {
        Scenario::Ball => verify_ball(&lab),
        Scenario::Theorem1 => verify_theorem1(&lab),
        Scenario::Theorem2 => verify_theorem2(&lab),
        Scenario::Bm => bm(&lab),
        Scenario::Solve => solve(&lab),
        Scenario::Capacity => capacity(&lab),
        Scenario::Concavity => concavity(&lab),
        Scenario::Levelsets => levelsets(&lab),
    }
}

fn default_bodies(scenario: Scenario, n: usize) -> Vec<&'static str> {
    match (scenario, n) {
        (Scenario::Theorem1, _) => vec!["ellipse:1", "ellipse:1.5", "ellipse:2", "ellipse:3"],
        (Scenario::Theorem2, 2) | (Scenario::Bm, _) => vec!["disk", "square"],
        (_, 2) => vec!["disk"],
        _ => vec!["ball"],
    }
}

struct NamedBody {
    /// Metric prefix.
    key: String,
    label: String,
    body: ConvexBody,
}

struct Lab<'a> {
    cfg: &'a ExperimentConfig,
    params: ProblemParams,
    dirs: Arc<DirectionGrid>,
    solver: BodyGridSettings,
    bodies: Vec<NamedBody>,
}

impl<'a> Lab<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let params = cfg.params()?;
        let dirs = cfg.direction_grid()?;
        let specs: Vec<BodySpec> = if cfg.bodies.is_empty() {
            default_bodies(cfg.scenario, cfg.n).into_iter().map(|s| BodySpec::Named(s.to_string())).collect()
        } else {
            cfg.bodies.clone()
        };
        let mut seen = BTreeSet::new();
        let mut bodies = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let label = body_label(spec);
            let mut key = match spec {
                BodySpec::Named(name) => name.clone(),
                BodySpec::Literal(_) => format!("body{i}"),
            };
            if !seen.insert(key.clone()) {
                key = format!("{key}#{i}");
            }
            bodies.push(NamedBody { key, label, body: build_body(spec, cfg.n, &dirs)? });
        }
        Ok(Self { cfg, params, solver: cfg.solver_settings()?, dirs, bodies })
    }

    /// Level-set extraction works on planar grids only.
    fn planar(&self) -> bool {
        self.params.n() == 2
    }

    fn resolve_settings(&self) -> Option<ResolveSettings> {
        (self.cfg.resolve && self.planar())
            .then(|| ResolveSettings { solver: self.solver.clone(), dirs: self.dirs.clone() })
    }

    fn thr(&self) -> &Thresholds {
        &self.cfg.thresholds
    }

    fn levels(&self, default: &[f64]) -> Vec<f64> {
        self.cfg.levels.clone().unwrap_or_else(|| default.to_vec())
    }

    fn solve(&self, b: &NamedBody) -> Result<SolveReport> {
        self.solver.solve(&b.body).map_err(|e| Error::BodySolve { body: b.label.clone(), source: Box::new(e) })
    }

    fn record_bodies(&self, t: &mut Tally) {
        let labels: Vec<serde_json::Value> = self
            .bodies
            .iter()
            .map(|b| serde_json::json!({ "key": b.key, "label": b.label }))
            .collect();
        t.metric("bodies", labels);
        let c = self.params.constants();
        t.num("alpha_star", c.alpha_star);
        t.num("q_rad", c.q_rad);
    }
}

fn f(x: f64) -> String {
    format!("{x}")
}

fn fo(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn anisotropy(body: &ConvexBody) -> f64 {
    let widths: Vec<f64> = (0..body.dirs().len()).map(|i| body.width(i)).collect();
    let max = widths.iter().cloned().fold(0.0, f64::max);
    let min = widths.iter().cloned().fold(f64::INFINITY, f64::min);
    max / min
}

/// Solver diagnostics plus the two-grid capacity indicator.
fn record_solve(t: &mut Tally, key: &str, rep: &SolveReport, thr: &Thresholds) -> Result<CapacityEstimate> {
    t.num(format!("{key}.energy"), rep.total_energy());
    t.num(format!("{key}.residual_norm"), rep.residual_norm);
    t.metric(format!("{key}.iterations"), rep.iterations);
    t.metric(format!("{key}.outer_cycles"), rep.outer_cycles);
    t.num(format!("{key}.farfield_coeff"), rep.farfield_coeff);
    t.num(format!("{key}.farfield_fit_residual"), rep.farfield_fit_residual);
    t.num(format!("{key}.spacing"), rep.spacing());
    t.metric(format!("{key}.extrema_violations"), rep.extrema_violations);
    t.check(format!("{key}.converged"), rep.converged);
    let cap = capacity_energy(rep)?;
    t.indicator(format!("{key}.capacity_two_grid"), cap.error_indicator, thr.max_capacity_indicator);
    Ok(cap)
}

fn radial_reference(body: &ConvexBody, params: &ProblemParams) -> Result<Option<RadialSolution>> {
    match body.form() {
        BodyForm::Ball { center, radius } => Ok(Some(RadialSolution::new(center, *radius, params)?)),
        _ => Ok(None),
    }
}

fn ball_radius(body: &ConvexBody) -> Option<f64> {
    match body.form() {
        BodyForm::Ball { radius, .. } => Some(*radius),
        _ => None,
    }
}

/// Concavity checks: balls must attain `α*`, other bodies must fall short of
/// it by the margin. Returns the report when the estimators resolved.
fn record_concavity(
    t: &mut Tally,
    key: &str,
    rep: &SolveReport,
    lab: &Lab,
    ball: bool,
) -> Result<Option<ConcavityReport>> {
    let thr = lab.thr();
    let a_star = lab.params.alpha_star();
    let settings = ConcavitySettings::new(lab.dirs.clone(), a_star, lab.cfg.seed);
    let report = match concavity_report(&rep.field, &settings) {
        Ok(r) => r,
        Err(Error::Concavity(msg)) => {
            t.metric(format!("{key}.concavity_error"), msg);
            t.indicator(format!("{key}.concavity_unresolved"), 1.0, 0.0);
            return Ok(None);
        }
        Err(e @ Error::QuasiConcavity { .. }) => {
            t.metric(format!("{key}.concavity_error"), e.to_string());
            t.check(format!("{key}.quasi_concave"), false);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    t.num(format!("{key}.alpha_pointwise"), report.alpha_pointwise);
    t.num(format!("{key}.alpha_support"), report.alpha_support);
    t.num(format!("{key}.estimator_gap"), report.estimator_gap());
    t.num(format!("{key}.midpoint_violation"), report.worst_violation.max_violation());
    t.metric(format!("{key}.midpoint_pairs"), report.worst_violation.pairs_tested);
    t.metric(format!("{key}.concavity_samples"), report.samples_used);
    t.indicator(format!("{key}.excluded_fraction"), report.excluded_fraction, thr.max_excluded_fraction);
    if ball {
        t.check(format!("{key}.alpha_pointwise_attains_optimum"), (report.alpha_pointwise - a_star).abs() <= thr.alpha_tol);
        t.check(format!("{key}.alpha_support_attains_optimum"), (report.alpha_support - a_star).abs() <= thr.alpha_tol);
        t.check(format!("{key}.estimators_agree"), report.estimator_gap() <= thr.alpha_tol);
        t.check(format!("{key}.midpoint_concave"), report.worst_violation.passes());
    } else {
        t.check(format!("{key}.alpha_pointwise_below_optimum"), report.alpha_pointwise < a_star - thr.alpha_margin);
        t.check(format!("{key}.alpha_support_below_optimum"), report.alpha_support < a_star - thr.alpha_margin);
    }
    Ok(Some(report))
}

struct Extracted {
    t: f64,
    set: Option<ConvexBody>,
    /// `min_θ (h_level - h_body)` in grid spacings.
    clearance: f64,
    notice: Option<String>,
}

/// Extracts level sets; those closer to the body than the clearance limit
/// are kept out of further analysis.
fn extract_levels(rep: &SolveReport, body: &ConvexBody, levels: &[f64], lab: &Lab) -> Vec<Extracted> {
    let h = rep.spacing();
    levels
        .iter()
        .map(|&t| match level_set_extract(&rep.field, t, &lab.dirs) {
            Ok(set) => {
                let clearance = set
                    .support()
                    .iter()
                    .zip(body.support())
                    .map(|(a, b)| a - b)
                    .fold(f64::INFINITY, f64::min)
                    / h;
                if clearance < lab.thr().level_clearance {
                    Extracted {
                        t,
                        set: None,
                        clearance,
                        notice: Some(format!("level set only {clearance:.2} cells from the body")),
                    }
                } else {
                    Extracted { t, set: Some(set), clearance, notice: None }
                }
            }
            Err(e) => Extracted { t, set: None, clearance: f64::NAN, notice: Some(e.to_string()) },
        })
        .collect()
}

fn record_levels(t: &mut Tally, key: &str, ex: &[Extracted]) -> usize {
    let skipped: Vec<serde_json::Value> = ex
        .iter()
        .filter(|e| e.set.is_none())
        .map(|e| serde_json::json!({ "t": num(e.t), "reason": e.notice.clone().unwrap_or_default() }))
        .collect();
    let n_skipped = skipped.len();
    t.metric(format!("{key}.levels_skipped"), skipped);
    let frac = if ex.is_empty() { 1.0 } else { n_skipped as f64 / ex.len() as f64 };
    t.indicator(format!("{key}.levels_skipped_fraction"), frac, MAX_SKIPPED_FRACTION);
    ex.len() - n_skipped
}

struct PairFit {
    /// Higher level; its set is the image.
    r: f64,
    s: f64,
    fit: HomothetyFit,
}

/// Fits `Ω(s) → Ω(r)` for every pair of resolved levels with `r > s`.
fn pair_fits(ex: &[Extracted]) -> Result<Vec<PairFit>> {
    let mut out = Vec::new();
    let resolved: Vec<(f64, &ConvexBody)> = ex.iter().filter_map(|e| e.set.as_ref().map(|s| (e.t, s))).collect();
    for (i, (ti, si)) in resolved.iter().enumerate() {
        for (tj, sj) in resolved.iter().skip(i + 1) {
            if ti == tj {
                continue;
            }
            let ((r, big_r), (s, big_s)) = if ti > tj { ((*ti, *si), (*tj, *sj)) } else { ((*tj, *sj), (*ti, *si)) };
            out.push(PairFit { r, s, fit: homothety_fit(big_s, big_r)? });
        }
    }
    Ok(out)
}

/// `|ρ^((p-n)/(p-1)) / (r/s) - 1|`.
fn ratio_law_error(pf: &PairFit, params: &ProblemParams) -> f64 {
    let e = -params.q_rad();
    (pf.fit.rho.powf(e) / (pf.r / pf.s) - 1.0).abs()
}

fn homothety_rows(table: &mut Table, key: &str, fits: &[PairFit]) {
    for pf in fits {
        table.rows.push(vec![
            key.to_string(),
            f(pf.r),
            f(pf.s),
            f(pf.fit.rho),
            f(pf.fit.residual),
            f(pf.fit.relative_residual()),
        ]);
    }
}

fn homothety_table() -> Table {
    Table::new("homothety.csv", &["body", "t_high", "t_low", "rho", "residual", "relative_residual"])
}

fn levelset_plot(key: &str, body: &ConvexBody, ex: &[Extracted]) -> Option<Plot> {
    if body.dim() != 2 {
        return None;
    }
    let mut series = vec![Series {
        label: "body".into(),
        points: body.halfspace_vertices().ok()?.to_vec(),
        closed: true,
    }];
    for e in ex {
        if let Some(set) = &e.set {
            if let Ok(v) = set.halfspace_vertices() {
                series.push(Series { label: format!("t = {}", e.t), points: v, closed: true });
            }
        }
    }
    let fig = Figure {
        title: format!("level sets of {key}"),
        x_label: "x".into(),
        y_label: "y".into(),
        equal_aspect: true,
        series,
        reference: None,
    };
    Some(Plot { name: format!("levelsets_{}.svg", file_stem(key)), svg: fig.to_svg() })
}

fn alpha_plot(profiles: Vec<(String, Vec<[f64; 2]>)>, alpha_star: f64) -> Plot {
    let fig = Figure {
        title: "support-based concavity exponent by level".into(),
        x_label: "t".into(),
        y_label: "alpha".into(),
        equal_aspect: false,
        series: profiles.into_iter().map(|(label, points)| Series { label, points, closed: false }).collect(),
        reference: Some(("alpha*".into(), alpha_star)),
    };
    Plot { name: "alpha_profile.svg".into(), svg: fig.to_svg() }
}

fn file_stem(key: &str) -> String {
    key.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn concavity_table() -> Table {
    Table::new(
        "concavity.csv",
        &[
            "body",
            "anisotropy",
            "alpha_pointwise",
            "alpha_support",
            "estimator_gap",
            "midpoint_violation",
            "samples_used",
            "excluded_fraction",
        ],
    )
}

fn concavity_row(table: &mut Table, key: &str, aniso: f64, c: &ConcavityReport) {
    table.rows.push(vec![
        key.to_string(),
        f(aniso),
        f(c.alpha_pointwise),
        f(c.alpha_support),
        f(c.estimator_gap()),
        f(c.worst_violation.max_violation()),
        c.samples_used.to_string(),
        f(c.excluded_fraction),
    ]);
}

fn profile_rows(table: &mut Table, key: &str, c: &ConcavityReport) {
    for [t, a] in &c.support.profile {
        table.rows.push(vec![key.to_string(), f(*t), f(*a)]);
    }
}

fn verify_ball(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    let nb = lab.bodies.first().ok_or_else(|| Error::Config("scenario ball needs a body".into()))?;
    if lab.bodies.len() != 1 || !is_ball(&nb.body) {
        return Err(Error::Config("scenario ball needs exactly one ball body".into()));
    }
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let rep = lab.solve(nb)?;
    let cap = record_solve(&mut t, "ball", &rep, thr)?;
    let oracle = radial_reference(&nb.body, &lab.params)?.expect("ball");
    let linf = linf_relative_error(&rep.field, &oracle);
    t.num("ball.linf_error", linf);
    t.check("ball.solution_matches_radial", linf <= thr.solution_rel);

    let exact = capacity_ball_exact(oracle.radius(), &lab.params)?;
    let asym = capacity_asymptotic(&rep)?;
    t.num("capacity.exact", exact.value);
    t.num("capacity.energy", cap.value);
    t.num("capacity.asymptotic", asym.value);
    let rel_e = (cap.value - exact.value).abs() / exact.value;
    let rel_a = (asym.value - exact.value).abs() / exact.value;
    t.num("capacity.energy_rel_error", rel_e);
    t.num("capacity.asymptotic_rel_error", rel_a);
    t.check("capacity.energy_matches_exact", rel_e <= thr.ball_capacity_rel);
    t.check("capacity.asymptotic_matches_exact", rel_a <= thr.ball_capacity_rel);
    t.indicator("capacity.fit_residual", asym.error_indicator, thr.max_fit_residual);

    let (conc, ex, fits) = if lab.planar() {
        let conc = record_concavity(&mut t, "ball", &rep, lab, true)?;
        let ex = extract_levels(&rep, &nb.body, &lab.levels(&LEVELSET_LEVELS), lab);
        let resolved = record_levels(&mut t, "ball", &ex);
        let fits = pair_fits(&ex)?;
        let worst_h = fits.iter().map(|p| p.fit.relative_residual()).fold(0.0, f64::max);
        let worst_law = fits.iter().map(|p| ratio_law_error(p, &lab.params)).fold(0.0, f64::max);
        t.num("levels.max_homothety_residual", worst_h);
        t.num("levels.max_ratio_law_error", worst_law);
        t.check("levels.mutually_homothetic", resolved >= 2 && worst_h <= thr.homothety_rel);
        t.check("levels.ratio_law", resolved >= 2 && worst_law <= thr.ratio_law_rel);
        (conc, ex, fits)
    } else {
        t.metric("skipped", serde_json::json!(["concavity", "levels", "scaling.resolve"]));
        (None, Vec::new(), Vec::new())
    };

    let resolve = lab.resolve_settings();
    let scaling = scaling_check(&nb.body, &rep, &lab.levels(&SCALING_LEVELS), resolve.as_ref())?;
    t.num("scaling.max_deviation", scaling.max_deviation());
    t.check("scaling.within_tolerance", scaling.max_deviation() <= thr.scaling_rel);
    t.indicator("scaling.skipped_levels", scaling.skipped() as f64, 0.0);
    for lvl in &scaling.levels {
        if let Some(ind) = lvl.resolve_indicator {
            t.indicator(format!("scaling.resolve_two_grid.t={}", lvl.t), ind, thr.max_capacity_indicator);
        }
    }

    let mut tables = vec![
        capacity_table(&[("ball", &cap), ("ball", &asym), ("ball", &exact)]),
        scaling_table(&[("ball", &scaling)]),
    ];
    let mut h = homothety_table();
    homothety_rows(&mut h, "ball", &fits);
    tables.push(h);
    let mut law = Table::new("ratio_law.csv", &["body", "r", "s", "rho", "relative_error"]);
    for p in &fits {
        law.rows.push(vec!["ball".into(), f(p.r), f(p.s), f(p.fit.rho), f(ratio_law_error(p, &lab.params))]);
    }
    tables.push(law);
    let mut plots = Vec::new();
    if let Some(c) = &conc {
        let mut ct = concavity_table();
        concavity_row(&mut ct, "ball", 1.0, c);
        tables.push(ct);
        plots.push(alpha_plot(vec![("ball".into(), c.support.profile.clone())], lab.params.alpha_star()));
    }
    plots.extend(levelset_plot("ball", &nb.body, &ex));
    Ok((t, tables, plots))
}

fn capacity_table(rows: &[(&str, &CapacityEstimate)]) -> Table {
    let mut table = Table::new("capacity.csv", &["body", "method", "value", "error_indicator", "coarse_value", "reliable"]);
    for (key, c) in rows {
        let method = serde_json::to_value(c.method).expect("method serializes");
        table.rows.push(vec![
            key.to_string(),
            method.as_str().unwrap_or_default().to_string(),
            f(c.value),
            f(c.error_indicator),
            fo(c.coarse_value),
            c.reliable.to_string(),
        ]);
    }
    table
}

fn scaling_table(rows: &[(&str, &crate::capacity::ScalingReport)]) -> Table {
    let mut table = Table::new(
        "scaling.csv",
        &["body", "t", "ratio_rescaled", "ratio_resolved", "route_gap", "resolve_indicator", "notice"],
    );
    for (key, s) in rows {
        for l in &s.levels {
            table.rows.push(vec![
                key.to_string(),
                f(l.t),
                fo(l.ratio_rescaled),
                fo(l.ratio_resolved),
                fo(l.route_gap),
                fo(l.resolve_indicator),
                l.notice.clone().unwrap_or_default(),
            ]);
        }
    }
    table
}

/// Support comparison of `Ω(t)` against `(1 - λ) Ω(r) + λ Ω(s)`.
struct Replay {
    t: f64,
    max_gap: f64,
    min_gap: f64,
    spacing: f64,
}

struct Member {
    key: String,
    ball: bool,
    aniso: f64,
    tally: Tally,
    conc: Option<ConcavityReport>,
    replay: Option<Replay>,
    bm: Option<BMReport>,
}

fn theorem1_member(lab: &Lab, nb: &NamedBody) -> Result<Member> {
    let thr = lab.thr();
    let key = nb.key.as_str();
    let ball = is_ball(&nb.body);
    let mut t = Tally::default();
    let rep = lab.solve(nb)?;
    record_solve(&mut t, key, &rep, thr)?;
    let conc = record_concavity(&mut t, key, &rep, lab, ball)?;

    let rp = &lab.cfg.replay;
    let a = lab.params.alpha_star();
    let level_t = ((1.0 - rp.lambda) * rp.r.powf(a) + rp.lambda * rp.s.powf(a)).powf(1.0 / a);
    t.num(format!("{key}.replay_t"), level_t);
    let ex = extract_levels(&rep, &nb.body, &[rp.r, rp.s, level_t], lab);
    let mut replay = None;
    let mut bm = None;
    if let [Some(or), Some(os), Some(ot)] = [&ex[0].set, &ex[1].set, &ex[2].set] {
        let comb = crate::geometry::minkowski_combination(or, os, rp.lambda)?;
        let gaps: Vec<f64> = ot.support().iter().zip(comb.support()).map(|(x, y)| x - y).collect();
        let r = Replay {
            t: level_t,
            max_gap: gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min_gap: gaps.iter().cloned().fold(f64::INFINITY, f64::min),
            spacing: rep.spacing(),
        };
        t.num(format!("{key}.replay_max_gap"), r.max_gap);
        t.num(format!("{key}.replay_min_gap"), r.min_gap);
        replay = Some(r);
        let report = bm_deficit(or, os, rp.lambda, &lab.solver)?;
        t.num(format!("{key}.level_bm_deficit"), report.deficit);
        t.num(format!("{key}.level_bm_tolerance"), report.tolerance);
        for (name, est) in [("k1", &report.estimates.k1), ("k2", &report.estimates.k2), ("combination", &report.estimates.combination)] {
            t.indicator(format!("{key}.level_bm_{name}_two_grid"), est.error_indicator, thr.max_capacity_indicator);
        }
        t.num(format!("{key}.level_bm_relative_deficit"), report.deficit / report.rhs);
        t.check(format!("{key}.level_bm_nonnegative"), report.nonnegative());
        bm = Some(report);
    } else {
        let notes: Vec<String> = ex.iter().filter_map(|e| e.notice.clone().map(|n| format!("t = {}: {n}", e.t))).collect();
        t.metric(format!("{key}.replay_error"), notes.join("; "));
        t.indicator(format!("{key}.replay_unresolved"), 1.0, 0.0);
    }
    Ok(Member { key: key.to_string(), ball, aniso: anisotropy(&nb.body), tally: t, conc, replay, bm })
}

fn verify_theorem1(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    if !lab.bodies.iter().any(|b| is_ball(&b.body)) {
        return Err(Error::Config("scenario theorem1 needs a ball control among the bodies".into()));
    }
    let results: Vec<Result<Member>> = lab.bodies.par_iter().map(|nb| theorem1_member(lab, nb)).collect();
    let members = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let control = members.iter().find(|m| m.ball).expect("ball control present");
    // Replay noise in grid spacings, measured on the ball control.
    let noise = control.replay.as_ref().map(|r| r.max_gap.abs().max(r.min_gap.abs()) / r.spacing);
    if let Some(nz) = noise {
        t.num("replay.noise_spacings", nz);
    }
    let bm_noise = control.bm.as_ref().map(|b| b.deficit.abs() / b.rhs);
    if let Some(nz) = bm_noise {
        t.num("level_bm.noise_relative", nz);
    }
    let mut table = Table::new(
        "theorem1.csv",
        &[
            "body",
            "anisotropy",
            "alpha_pointwise",
            "alpha_support",
            "level_bm_deficit",
            "level_bm_tolerance",
            "replay_t",
            "replay_max_gap",
            "replay_min_gap",
            "spacing",
        ],
    );
    let mut ctab = concavity_table();
    let mut ptab = Table::new("alpha_profile.csv", &["body", "t", "alpha_support"]);
    let mut profiles = Vec::new();
    for m in &members {
        let key = &m.key;
        t.num(format!("{key}.anisotropy"), m.aniso);
        if let Some(r) = &m.replay {
            if m.ball {
                t.check(format!("{key}.replay_equality"), r.max_gap.abs().max(r.min_gap.abs()) <= thr.inclusion_spacings * r.spacing);
            } else if let Some(nz) = noise {
                let limit = thr.noise_factor * nz * r.spacing;
                t.num(format!("{key}.replay_noise"), limit);
                t.check(format!("{key}.replay_strict"), r.max_gap > limit);
            }
        }
        if let (false, Some(b)) = (m.ball, &m.bm) {
            // Strict positivity must clear both the two-grid tolerance and the
            // relative deficit the ball control shows.
            let floor = bm_noise.map_or(0.0, |nz| thr.noise_factor * nz * b.rhs);
            let margin = b.tolerance.max(floor);
            let resolution = if b.deficit > 0.0 { margin / b.deficit } else { f64::INFINITY };
            t.indicator(format!("{key}.level_bm_unresolved"), resolution, 1.0);
        }
        if let Some(c) = &m.conc {
            concavity_row(&mut ctab, key, m.aniso, c);
            profile_rows(&mut ptab, key, c);
            profiles.push((key.clone(), c.support.profile.clone()));
        }
        table.rows.push(vec![
            key.clone(),
            f(m.aniso),
            fo(m.conc.as_ref().map(|c| c.alpha_pointwise)),
            fo(m.conc.as_ref().map(|c| c.alpha_support)),
            fo(m.bm.as_ref().map(|b| b.deficit)),
            fo(m.bm.as_ref().map(|b| b.tolerance)),
            fo(m.replay.as_ref().map(|r| r.t)),
            fo(m.replay.as_ref().map(|r| r.max_gap)),
            fo(m.replay.as_ref().map(|r| r.min_gap)),
            fo(m.replay.as_ref().map(|r| r.spacing)),
        ]);
    }
    // Strict decrease of both estimators with anisotropy.
    let mut order: Vec<&Member> = members.iter().filter(|m| m.conc.is_some()).collect();
    order.sort_by(|a, b| a.aniso.total_cmp(&b.aniso));
    let mut mono_pw = true;
    let mut mono_sup = true;
    for w in order.windows(2) {
        if w[1].aniso - w[0].aniso <= 1e-9 * w[0].aniso {
            continue;
        }
        let (c0, c1) = (w[0].conc.as_ref().expect("filtered"), w[1].conc.as_ref().expect("filtered"));
        mono_pw &= c1.alpha_pointwise < c0.alpha_pointwise;
        mono_sup &= c1.alpha_support < c0.alpha_support;
    }
    t.check("ladder.pointwise_monotone", mono_pw);
    t.check("ladder.support_monotone", mono_sup);
    for m in members {
        t.absorb(m.tally);
    }
    Ok((t, vec![table, ctab, ptab], vec![alpha_plot(profiles, lab.params.alpha_star())]))
}

fn verify_theorem2(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    let levels = lab.levels(&LEVELSET_LEVELS);
    let results: Vec<Result<(SolveReport, Vec<Extracted>)>> = lab
        .bodies
        .par_iter()
        .map(|nb| {
            let rep = lab.solve(nb)?;
            let ex = extract_levels(&rep, &nb.body, &levels, lab);
            Ok((rep, ex))
        })
        .collect();
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let mut htab = homothety_table();
    let mut law = Table::new("ratio_law.csv", &["body", "r", "s", "rho", "relative_error"]);
    let mut plots = Vec::new();
    for (nb, res) in lab.bodies.iter().zip(results) {
        let (rep, ex) = res?;
        let key = nb.key.as_str();
        record_solve(&mut t, key, &rep, thr)?;
        let resolved = record_levels(&mut t, key, &ex);
        let fits = pair_fits(&ex)?;
        homothety_rows(&mut htab, key, &fits);
        let worst = fits.iter().map(|p| p.fit.relative_residual()).fold(0.0, f64::max);
        t.num(format!("{key}.max_homothety_residual"), worst);
        // Residuals of neighbouring levels, from the highest level down.
        let mut resolved_levels: Vec<f64> = ex.iter().filter(|e| e.set.is_some()).map(|e| e.t).collect();
        resolved_levels.sort_by(|a, b| b.total_cmp(a));
        let neighbours: Vec<f64> = resolved_levels
            .windows(2)
            .filter_map(|w| fits.iter().find(|p| p.r == w[0] && p.s == w[1]).map(|p| p.fit.relative_residual()))
            .collect();
        let decreasing = neighbours.windows(2).filter(|w| w[1] <= w[0]).count();
        t.metric(format!("{key}.neighbour_residuals"), neighbours.iter().map(|x| num(*x)).collect::<Vec<_>>());
        t.num(
            format!("{key}.neighbour_decreasing_fraction"),
            if neighbours.len() > 1 { decreasing as f64 / (neighbours.len() - 1) as f64 } else { f64::NAN },
        );
        if is_ball(&nb.body) {
            let worst_law = fits.iter().map(|p| ratio_law_error(p, &lab.params)).fold(0.0, f64::max);
            t.num(format!("{key}.max_ratio_law_error"), worst_law);
            t.check(format!("{key}.all_levels_homothetic"), resolved >= 2 && worst <= thr.homothety_rel);
            t.check(format!("{key}.ratio_law"), resolved >= 2 && worst_law <= thr.ratio_law_rel);
            for p in &fits {
                law.rows.push(vec![key.to_string(), f(p.r), f(p.s), f(p.fit.rho), f(ratio_law_error(p, &lab.params))]);
            }
        } else {
            let near: Vec<&PairFit> = fits.iter().filter(|p| p.r >= thr.near_one).collect();
            let min_near = near.iter().map(|p| p.fit.relative_residual()).fold(f64::INFINITY, f64::min);
            t.num(format!("{key}.min_near_one_residual"), min_near);
            t.indicator(format!("{key}.near_one_pairs_missing"), if near.is_empty() { 1.0 } else { 0.0 }, 0.0);
            t.check(format!("{key}.near_one_pairs_not_homothetic"), !near.is_empty() && min_near > thr.homothety_rel);
        }
        plots.extend(levelset_plot(key, &nb.body, &ex));
    }
    Ok((t, vec![htab, law], plots))
}

fn bm(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    let [a, b] = lab.bodies.as_slice() else {
        return Err(Error::Config(format!("scenario bm needs exactly two bodies, got {}", lab.bodies.len())));
    };
    let lambdas = lab.cfg.lambdas.clone().unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec());
    let reports = bm_sweep(&a.body, &b.body, &lambdas, &lab.solver)?;
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let homothety = &reports[0].homothety;
    let homothetic = homothety.is_homothetic(thr.homothety_rel);
    t.num("homothety_residual", homothety.relative_residual());
    t.metric("homothetic", homothetic);
    t.indicator("k1.capacity_two_grid", reports[0].estimates.k1.error_indicator, thr.max_capacity_indicator);
    t.indicator("k2.capacity_two_grid", reports[0].estimates.k2.error_indicator, thr.max_capacity_indicator);
    let mut table = Table::new(
        "bm.csv",
        &[
            "lambda",
            "lhs",
            "rhs",
            "deficit",
            "homothety_residual",
            "tolerance",
            "coarse_deficit",
            "asymptotic_deficit",
        ],
    );
    let mut min_margin = f64::INFINITY;
    for r in &reports {
        let lk = format!("lambda={}", r.lambda);
        t.num(format!("{lk}.deficit"), r.deficit);
        t.num(format!("{lk}.tolerance"), r.tolerance);
        t.check(format!("{lk}.nonnegative"), r.nonnegative());
        t.metric(format!("{lk}.asymptotic_agrees"), r.asymptotic_agrees);
        let interior = r.lambda > 0.0 && r.lambda < 1.0;
        if interior {
            t.indicator(format!("{lk}.combination_two_grid"), r.estimates.combination.error_indicator, thr.max_capacity_indicator);
            if homothetic {
                t.check(format!("{lk}.equality_for_homothetic"), r.is_equality());
            } else {
                t.check(format!("{lk}.strict_for_non_homothetic"), r.deficit > r.tolerance);
                min_margin = min_margin.min(r.deficit - r.tolerance);
            }
        }
        table.rows.push(vec![
            f(r.lambda),
            f(r.lhs),
            f(r.rhs),
            f(r.deficit),
            f(r.homothety.relative_residual()),
            f(r.tolerance),
            fo(r.coarse_deficit),
            f(r.asymptotic_deficit),
        ]);
    }
    if min_margin.is_finite() {
        t.num("min_strict_margin", min_margin);
    }
    Ok((t, vec![table], Vec::new()))
}

fn solve_all(lab: &Lab) -> Result<Vec<SolveReport>> {
    let results: Vec<Result<SolveReport>> = lab.bodies.par_iter().map(|nb| lab.solve(nb)).collect();
    results.into_iter().collect()
}

fn solve(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    let reports = solve_all(lab)?;
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let mut table = Table::new(
        "solve.csv",
        &[
            "body",
            "cells",
            "spacing",
            "energy",
            "tail_energy",
            "residual_norm",
            "iterations",
            "outer_cycles",
            "farfield_coeff",
            "farfield_fit_residual",
            "linf_error",
        ],
    );
    for (nb, rep) in lab.bodies.iter().zip(&reports) {
        let key = nb.key.as_str();
        record_solve(&mut t, key, rep, thr)?;
        t.check(format!("{key}.maximum_principle"), rep.extrema_violations == 0);
        let linf = radial_reference(&nb.body, &lab.params)?.map(|o| linf_relative_error(&rep.field, &o));
        if let Some(e) = linf {
            t.num(format!("{key}.linf_error"), e);
            t.check(format!("{key}.solution_matches_radial"), e <= thr.solution_rel);
        }
        table.rows.push(vec![
            key.to_string(),
            rep.field.grid.cells()[0].to_string(),
            f(rep.spacing()),
            f(rep.energy),
            f(rep.tail_energy),
            f(rep.residual_norm),
            rep.iterations.to_string(),
            rep.outer_cycles.to_string(),
            f(rep.farfield_coeff),
            f(rep.farfield_fit_residual),
            fo(linf),
        ]);
    }
    Ok((t, vec![table], Vec::new()))
}

fn capacity(lab: &Lab) -> Result<Parts> {
    let thr = lab.thr();
    let levels = lab.levels(&SCALING_LEVELS);
    let resolve = lab.resolve_settings();
    let results: Vec<Result<_>> = lab
        .bodies
        .par_iter()
        .map(|nb| {
            let rep = lab.solve(nb)?;
            let scaling = scaling_check(&nb.body, &rep, &levels, resolve.as_ref())?;
            Ok((rep, scaling))
        })
        .collect();
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let mut estimates = Vec::new();
    let mut scalings = Vec::new();
    for (nb, res) in lab.bodies.iter().zip(results) {
        let (rep, scaling) = res?;
        let key = nb.key.as_str();
        let energy = record_solve(&mut t, key, &rep, thr)?;
        let asym = capacity_asymptotic(&rep)?;
        t.num(format!("{key}.capacity_energy"), energy.value);
        t.num(format!("{key}.capacity_asymptotic"), asym.value);
        t.indicator(format!("{key}.fit_residual"), asym.error_indicator, thr.max_fit_residual);
        let gap = (energy.value - asym.value).abs() / energy.value;
        t.num(format!("{key}.estimator_gap"), gap);
        t.check(format!("{key}.estimators_agree"), gap <= thr.capacity_rel);
        if let Some(r) = ball_radius(&nb.body) {
            let exact = capacity_ball_exact(r, &lab.params)?;
            t.num(format!("{key}.capacity_exact"), exact.value);
            for est in [&energy, &asym] {
                let rel = (est.value - exact.value).abs() / exact.value;
                let m = serde_json::to_value(est.method).expect("method serializes");
                let m = m.as_str().unwrap_or_default().to_lowercase();
                t.num(format!("{key}.{m}_rel_error"), rel);
                t.check(format!("{key}.{m}_matches_exact"), rel <= thr.capacity_rel);
            }
            estimates.extend([(key, energy), (key, asym), (key, exact)]);
        } else {
            estimates.extend([(key, energy), (key, asym)]);
        }
        t.num(format!("{key}.scaling_max_deviation"), scaling.max_deviation());
        t.check(format!("{key}.scaling_law"), scaling.max_deviation() <= thr.scaling_rel);
        t.indicator(format!("{key}.scaling_skipped_levels"), scaling.skipped() as f64, 0.0);
        for lvl in &scaling.levels {
            if let Some(ind) = lvl.resolve_indicator {
                t.indicator(format!("{key}.scaling_resolve_two_grid.t={}", lvl.t), ind, thr.max_capacity_indicator);
            }
        }
        scalings.push((key, scaling));
    }
    let est_refs: Vec<(&str, &CapacityEstimate)> = estimates.iter().map(|(k, e)| (*k, e)).collect();
    let sc_refs: Vec<(&str, &crate::capacity::ScalingReport)> = scalings.iter().map(|(k, s)| (*k, s)).collect();
    Ok((t, vec![capacity_table(&est_refs), scaling_table(&sc_refs)], Vec::new()))
}

fn concavity(lab: &Lab) -> Result<Parts> {
    let reports = solve_all(lab)?;
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let mut ctab = concavity_table();
    let mut ptab = Table::new("alpha_profile.csv", &["body", "t", "alpha_support"]);
    let mut profiles = Vec::new();
    for (nb, rep) in lab.bodies.iter().zip(&reports) {
        let key = nb.key.as_str();
        record_solve(&mut t, key, rep, lab.thr())?;
        if let Some(c) = record_concavity(&mut t, key, rep, lab, is_ball(&nb.body))? {
            concavity_row(&mut ctab, key, anisotropy(&nb.body), &c);
            profile_rows(&mut ptab, key, &c);
            profiles.push((key.to_string(), c.support.profile.clone()));
        }
    }
    Ok((t, vec![ctab, ptab], vec![alpha_plot(profiles, lab.params.alpha_star())]))
}

fn levelsets(lab: &Lab) -> Result<Parts> {
    let levels = lab.levels(&LEVELSET_LEVELS);
    let reports = solve_all(lab)?;
    let mut t = Tally::default();
    lab.record_bodies(&mut t);
    let mut ltab = Table::new("levelsets.csv", &["body", "t", "direction", "theta", "support", "clearance"]);
    let mut htab = homothety_table();
    let mut plots = Vec::new();
    for (nb, rep) in lab.bodies.iter().zip(&reports) {
        let key = nb.key.as_str();
        record_solve(&mut t, key, rep, lab.thr())?;
        let ex = extract_levels(rep, &nb.body, &levels, lab);
        let resolved = record_levels(&mut t, key, &ex);
        t.check(format!("{key}.levels_extracted"), resolved > 0);
        for e in &ex {
            if let Some(set) = &e.set {
                for (i, (dir, h)) in lab.dirs.iter().zip(set.support()).enumerate() {
                    let theta: Vec<String> = dir.iter().map(|x| f(*x)).collect();
                    ltab.rows.push(vec![key.to_string(), f(e.t), i.to_string(), theta.join(" "), f(*h), f(e.clearance)]);
                }
            }
        }
        homothety_rows(&mut htab, key, &pair_fits(&ex)?);
        plots.extend(levelset_plot(key, &nb.body, &ex));
    }
    Ok((t, vec![ltab, htab], plots))
}
