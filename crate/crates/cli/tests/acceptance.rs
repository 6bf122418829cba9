//! Acceptance run: one line per criterion, non-zero exit if any fails.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use pcaplab::brunn_minkowski::{bm_sweep, BMReport, DEFAULT_LAMBDAS};
use pcaplab::capacity::{capacity_asymptotic, capacity_ball_exact, capacity_energy, scaling_check, ResolveSettings};
use pcaplab::geometry::{make_ball, make_polygon, ConvexBody, DirectionGrid, DEFAULT_HOMOTHETY_TOL};
use pcaplab::lab::{run, ExperimentConfig, Outcome};
use pcaplab::model::ProblemParams;
use pcaplab::pde_solver::{
    linf_relative_error, solve_exterior, BodyGridSettings, RadialSolution, SolveReport, SolverConfig, DEFAULT_HALF_WIDTH,
};
use serde_json::Value;

const SOLVER_LINF: f64 = 0.02;
const SOLVER_ORDER: f64 = 0.9;
const SOLVE_BUDGET_S: f64 = 300.0;
const CAPACITY_REL: f64 = 0.03;
const CAPACITY_3D_REL: f64 = 0.08;
const SCALING_BAND: (f64, f64) = (0.97, 1.03);
const SCALING_LEVELS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
const ALPHA_TOL: f64 = 0.05;
const ALPHA_MARGIN: f64 = 0.05;
const RATIO_LAW_REL: f64 = 0.02;
const INCLUSION_SPACINGS: f64 = 2.0;
const NOISE_FACTOR: f64 = 3.0;

struct Line {
    ok: bool,
    text: String,
}

fn line(ok: bool, text: String) -> Line {
    Line { ok, text }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn plane() -> ProblemParams {
    ProblemParams::new(2, 1.5).unwrap()
}

fn dirs() -> Arc<DirectionGrid> {
    Arc::new(DirectionGrid::uniform_2d(512).unwrap())
}

fn square(d: &Arc<DirectionGrid>) -> ConvexBody {
    make_polygon(&[[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], d).unwrap()
}

fn solve(body: &ConvexBody, params: ProblemParams, cells: usize) -> SolveReport {
    solve_exterior(body, &SolverConfig::for_body(params, body, DEFAULT_HALF_WIDTH, cells).unwrap()).unwrap()
}

fn settings(cells: usize) -> BodyGridSettings {
    let d = dirs();
    let disk = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
    BodyGridSettings::new(SolverConfig::for_body(plane(), &disk, DEFAULT_HALF_WIDTH, cells).unwrap(), DEFAULT_HALF_WIDTH)
}

fn scenario(name: &str) -> Outcome {
    let cfg = ExperimentConfig::from_path(&workspace().join("scenarios").join(name)).unwrap();
    run(&cfg).unwrap()
}

fn metric(out: &Outcome, key: &str) -> f64 {
    out.report.metrics.get(key).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

fn solver_and_capacity(lines: &mut Vec<Line>) {
    let d = dirs();
    let disk = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
    let oracle = RadialSolution::new(&[0.0, 0.0], 1.0, &plane()).unwrap();
    let coarse = solve(&disk, plane(), 256);
    let start = Instant::now();
    let fine = solve(&disk, plane(), 512);
    let secs = start.elapsed().as_secs_f64();
    let (e256, e512) = (linf_relative_error(&coarse.field, &oracle), linf_relative_error(&fine.field, &oracle));
    let order = (e256 / e512).log2();
    lines.push(line(
        e512 <= SOLVER_LINF && order >= SOLVER_ORDER && secs <= SOLVE_BUDGET_S,
        format!(
            "1 solver vs radial oracle: linf(512) = {e512:.3e} (<= {SOLVER_LINF}), order 256->512 = {order:.3} (>= {SOLVER_ORDER}), solve {secs:.1} s (<= {SOLVE_BUDGET_S} s)"
        ),
    ));

    let exact = capacity_ball_exact(1.0, &plane()).unwrap().value;
    let energy = capacity_energy(&fine).unwrap().value;
    let asym = capacity_asymptotic(&fine).unwrap().value;
    let (re, ra) = ((energy / exact - 1.0).abs(), (asym / exact - 1.0).abs());
    let p3 = ProblemParams::new(3, 2.0).unwrap();
    let d3 = Arc::new(DirectionGrid::default_for_dim(3).unwrap());
    let ball = make_ball(&[0.0; 3], 1.0, &d3).unwrap();
    let rep3 = solve(&ball, p3, 128);
    let e3 = (capacity_energy(&rep3).unwrap().value / (4.0 * PI) - 1.0).abs();
    let a3 = (capacity_asymptotic(&rep3).unwrap().value / (4.0 * PI) - 1.0).abs();
    lines.push(line(
        re <= CAPACITY_REL && ra <= CAPACITY_REL && e3 <= CAPACITY_3D_REL && a3 <= CAPACITY_3D_REL,
        format!(
            "2 capacity consistency: disk energy {re:.2e}, asymptotic {ra:.2e} (<= {CAPACITY_REL}); 3D p=2 128 cells energy {e3:.2e}, asymptotic {a3:.2e} (<= {CAPACITY_3D_REL})"
        ),
    ));
}

fn scaling(lines: &mut Vec<Line>) {
    let d = dirs();
    let resolve = ResolveSettings { solver: settings(256), dirs: d.clone() };
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, body) in [("disk", make_ball(&[0.0, 0.0], 1.0, &d).unwrap()), ("square", square(&d))] {
        let rep = solve(&body, plane(), 256);
        let sc = scaling_check(&body, &rep, &SCALING_LEVELS, Some(&resolve)).unwrap();
        let ratios: Vec<f64> = sc.levels.iter().flat_map(|l| l.ratios().collect::<Vec<_>>()).collect();
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        ok &= sc.skipped() == 0 && ratios.len() == 2 * SCALING_LEVELS.len() && lo >= SCALING_BAND.0 && hi <= SCALING_BAND.1;
        parts.push(format!("{name} ratios in [{lo:.4}, {hi:.4}] ({} values)", ratios.len()));
    }
    lines.push(line(ok, format!("3 scaling law: {} (band [{}, {}])", parts.join("; "), SCALING_BAND.0, SCALING_BAND.1)));
}

fn bm_suite(lines: &mut Vec<Line>) {
    let d = dirs();
    let s = settings(256);
    let disk = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
    let big = make_ball(&[2.0, 0.0], 3.0, &d).unwrap();
    let sq = square(&d);
    let r = 2f64.sqrt();
    let rotated = make_polygon(&[[r, 0.0], [0.0, r], [-r, 0.0], [0.0, -r]], &d).unwrap();
    let interior = |v: &[BMReport]| v.iter().filter(|b| b.lambda > 0.0 && b.lambda < 1.0).cloned().collect::<Vec<_>>();

    let homothetic = bm_sweep(&disk, &big, &DEFAULT_LAMBDAS, &s).unwrap();
    let mixed = bm_sweep(&disk, &sq, &DEFAULT_LAMBDAS, &s).unwrap();
    let squares = bm_sweep(&sq, &rotated, &DEFAULT_LAMBDAS, &s).unwrap();
    let all_nonneg = [&homothetic, &mixed, &squares].iter().all(|v| v.iter().all(BMReport::nonnegative));
    let h_ok = interior(&homothetic)
        .iter()
        .all(|b| b.is_equality() && b.homothety.relative_residual() <= DEFAULT_HOMOTHETY_TOL);
    let m_ok = interior(&mixed)
        .iter()
        .all(|b| b.deficit > b.tolerance && b.homothety.relative_residual() > DEFAULT_HOMOTHETY_TOL);
    let worst_h = interior(&homothetic).iter().map(|b| b.deficit.abs() / b.tolerance).fold(0.0, f64::max);
    let min_m = interior(&mixed).iter().map(|b| b.deficit / b.tolerance).fold(f64::INFINITY, f64::min);
    let min_sq = interior(&squares).iter().map(|b| b.deficit / b.tolerance).fold(f64::INFINITY, f64::min);
    lines.push(line(
        all_nonneg && h_ok && m_ok,
        format!(
            "4 BM suite: every deficit >= -tolerance: {all_nonneg}; disk/B((2,0),3) max |deficit|/tol = {worst_h:.2e}, residual {:.1e}; disk/square min deficit/tol = {min_m:.2}, residual {:.3}; square/rotated min deficit/tol = {min_sq:.2}",
            homothetic[2].homothety.relative_residual(),
            mixed[2].homothety.relative_residual()
        ),
    ));
}

fn theorem1(lines: &mut Vec<Line>) {
    let out = scenario("theorem1.json");
    let ball = ("ellipse:1.alpha_pointwise", "ellipse:1.alpha_support");
    let (bp, bs) = (metric(&out, ball.0), metric(&out, ball.1));
    let ladder = ["ellipse:1.5", "ellipse:2", "ellipse:3"];
    let pw: Vec<f64> = ladder.iter().map(|k| metric(&out, &format!("{k}.alpha_pointwise"))).collect();
    let sp: Vec<f64> = ladder.iter().map(|k| metric(&out, &format!("{k}.alpha_support"))).collect();
    let below = pw.iter().chain(&sp).all(|&a| a < -1.0 - ALPHA_MARGIN);
    let monotone = pw.windows(2).all(|w| w[1] < w[0]) && sp.windows(2).all(|w| w[1] < w[0]) && pw[0] < bp && sp[0] < bs;
    let ball_ok = (bp + 1.0).abs() <= ALPHA_TOL && (bs + 1.0).abs() <= ALPHA_TOL && (bp - bs).abs() <= ALPHA_TOL;
    lines.push(line(
        ball_ok && below && monotone,
        format!(
            "5 concavity: ball pointwise {bp:.4}, support {bs:.4} (within {ALPHA_TOL} of -1); ladder 1.5/2/3 pointwise {:.3}/{:.3}/{:.3}, support {:.3}/{:.3}/{:.3} (< {}), monotone {monotone}",
            pw[0],
            pw[1],
            pw[2],
            sp[0],
            sp[1],
            sp[2],
            -1.0 - ALPHA_MARGIN
        ),
    ));

    let h = metric(&out, "ellipse:1.spacing");
    let ball_gap = metric(&out, "ellipse:1.replay_max_gap").abs().max(metric(&out, "ellipse:1.replay_min_gap").abs());
    let noise = NOISE_FACTOR * ball_gap;
    let strict_gap = metric(&out, "ellipse:2.replay_max_gap");
    lines.push(line(
        ball_gap <= INCLUSION_SPACINGS * h && strict_gap > noise,
        format!(
            "7 inclusion replay: ball max |gap| = {ball_gap:.2e} (<= {INCLUSION_SPACINGS} h = {:.2e}); 2:1 ellipse max gap {strict_gap:.3e} > noise {noise:.2e}",
            INCLUSION_SPACINGS * h
        ),
    ));
}

fn csv_rows(out: &Outcome, table: &str) -> Vec<Vec<String>> {
    out.table(table).map(|t| t.rows.clone()).unwrap_or_default()
}

fn theorem2(lines: &mut Vec<Line>) {
    let out = scenario("theorem2.json");
    let rows = csv_rows(&out, "homothety.csv");
    let header = &out.table("homothety.csv").unwrap().header;
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (cb, chi, clo, crel) = (col("body"), col("t_high"), col("t_low"), col("relative_residual"));
    let disk_res: Vec<f64> = rows.iter().filter(|r| r[cb] == "disk").map(|r| r[crel].parse().unwrap()).collect();
    let worst_disk = disk_res.iter().cloned().fold(0.0, f64::max);
    let law: Vec<f64> = csv_rows(&out, "ratio_law.csv")
        .iter()
        .filter(|r| r[0] == "disk")
        .map(|r| r.last().unwrap().parse().unwrap())
        .collect();
    let worst_law = law.iter().cloned().fold(0.0, f64::max);
    let square = rows
        .iter()
        .find(|r| r[cb] == "square" && r[chi].parse::<f64>().unwrap() == 0.8 && r[clo].parse::<f64>().unwrap() == 0.6)
        .map(|r| r[crel].parse::<f64>().unwrap());
    lines.push(line(
        disk_res.len() == 6 && law.len() == 6 && worst_disk <= DEFAULT_HOMOTHETY_TOL && worst_law <= RATIO_LAW_REL
            && square.is_some_and(|s| s > DEFAULT_HOMOTHETY_TOL),
        format!(
            "6 level-set homothety: disk worst residual {worst_disk:.2e} over {} pairs (<= {DEFAULT_HOMOTHETY_TOL}), ratio law {worst_law:.2e} (<= {RATIO_LAW_REL}); square (0.8, 0.6) residual {} (> {DEFAULT_HOMOTHETY_TOL})",
            disk_res.len(),
            square.map_or("missing".to_string(), |s| format!("{s:.2e}"))
        ),
    ));
}

fn interface(lines: &mut Vec<Line>) {
    let bin = env!("CARGO_BIN_EXE_pcaplab");
    let tmp = tempfile::tempdir().unwrap();
    let go = |cfg: &str, out: &str| {
        let out_dir = tmp.path().join(out);
        let status = Command::new(bin)
            .args(["run", workspace().join("scenarios").join(cfg).to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
            .output()
            .unwrap()
            .status
            .code()
            .unwrap_or(-1);
        (status, std::fs::read(out_dir.join("report.json")).ok())
    };
    let (pass_a, report_a) = go("ball.json", "a");
    let (pass_b, report_b) = go("ball.json", "b");
    let (fail, _) = go("fail_unconverged.json", "f");
    let (usage, usage_report) = go("missing_p.json", "u");
    let identical = report_a.is_some() && report_a == report_b;
    lines.push(line(
        identical && pass_a == 0 && pass_b == 0 && fail == 1 && usage == 3 && usage_report.is_none(),
        format!(
            "8 determinism and exit codes: repeated ball.json reports byte-identical: {identical}; exit codes ball {pass_a} (0), fail_unconverged {fail} (1), missing_p {usage} (3)"
        ),
    ));
}

fn main() {
    let mut lines = Vec::new();
    solver_and_capacity(&mut lines);
    scaling(&mut lines);
    bm_suite(&mut lines);
    theorem1(&mut lines);
    theorem2(&mut lines);
    interface(&mut lines);
    lines.sort_by_key(|l| l.text.split(' ').next().and_then(|n| n.parse::<u32>().ok()));
    let mut failed = 0;
    for l in &lines {
        println!("[{}] criterion {}", if l.ok { "PASS" } else { "FAIL" }, l.text);
        failed += usize::from(!l.ok);
    }
    println!("acceptance: {} of {} criteria met", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
