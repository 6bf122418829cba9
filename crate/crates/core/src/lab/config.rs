//! Experiment configuration: JSON schema, defaults and validation.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{make_ball, make_ellipse, make_polygon, BodyForm, ConvexBody, DirectionGrid};
use crate::model::{GridSpec, ProblemParams};
use crate::pde_solver::{
    BodyGridSettings, FarfieldMode, SolverConfig, DEFAULT_EPSILON_REG, DEFAULT_HALF_WIDTH, DEFAULT_MAX_INNER,
    DEFAULT_MAX_OUTER, DEFAULT_TOL,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[serde(alias = "verify_ball")]
    Ball,
    #[serde(alias = "verify_theorem1")]
    Theorem1,
    #[serde(alias = "verify_theorem2")]
    Theorem2,
    Bm,
    Solve,
    Capacity,
    Concavity,
    Levelsets,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Ball => "ball",
            Scenario::Theorem1 => "theorem1",
            Scenario::Theorem2 => "theorem2",
            Scenario::Bm => "bm",
            Scenario::Solve => "solve",
            Scenario::Capacity => "capacity",
            Scenario::Concavity => "concavity",
            Scenario::Levelsets => "levelsets",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown scenario `{s}`")))
    }
}

/// A named body or an explicit literal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BodySpec {
    /// `disk`, `ball`, `square`, `ellipse` (2:1) or `ellipse:R` (axis ratio `R`).
    Named(String),
    Literal(BodyLiteral),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum BodyLiteral {
    Ball { center: Vec<f64>, r: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Box half-width in units of each body's circumradius.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    /// Cells per axis when absent: 256 in the plane (512 for level-set
    /// scenarios) and 128 in space.
    #[serde(default)]
    pub cells: Option<usize>,
}

fn default_half_width() -> f64 {
    DEFAULT_HALF_WIDTH
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { half_width: DEFAULT_HALF_WIDTH, cells: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub epsilon_reg: f64,
    pub tol: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub farfield_mode: FarfieldMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            epsilon_reg: DEFAULT_EPSILON_REG,
            tol: DEFAULT_TOL,
            max_inner: DEFAULT_MAX_INNER,
            max_outer: DEFAULT_MAX_OUTER,
            farfield_mode: FarfieldMode::AsymptoticDirichlet,
        }
    }
}

/// Pass/fail thresholds and the limits on error indicators beyond which a
/// verdict is INCONCLUSIVE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Allowed `|α - α*|` for balls and the allowed estimator gap.
    pub alpha_tol: f64,
    /// Required `α* - α` for non-balls.
    pub alpha_margin: f64,
    /// Capacity agreement in the `capacity` scenario.
    pub capacity_rel: f64,
    /// Capacity against the closed form in the `ball` scenario.
    pub ball_capacity_rel: f64,
    /// Potential against the radial closed form, relative max norm.
    pub solution_rel: f64,
    pub scaling_rel: f64,
    /// Homothety residual relative to the diameter.
    pub homothety_rel: f64,
    pub ratio_law_rel: f64,
    /// Support agreement in the inclusion replay, in grid spacings.
    pub inclusion_spacings: f64,
    /// Multiple of the ball-control replay gap that counts as noise.
    pub noise_factor: f64,
    /// Levels at or above this value count as near the body.
    pub near_one: f64,
    /// Minimum distance of a level set from the body, in grid spacings.
    pub level_clearance: f64,
    pub max_capacity_indicator: f64,
    pub max_fit_residual: f64,
    pub max_excluded_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            alpha_tol: 0.05,
            alpha_margin: 0.05,
            capacity_rel: 0.03,
            ball_capacity_rel: 0.05,
            solution_rel: 0.02,
            scaling_rel: 0.03,
            homothety_rel: crate::geometry::DEFAULT_HOMOTHETY_TOL,
            ratio_law_rel: 0.02,
            inclusion_spacings: 2.0,
            noise_factor: 3.0,
            near_one: 0.75,
            level_clearance: 2.0,
            max_capacity_indicator: 0.005,
            max_fit_residual: crate::capacity::FIT_RESIDUAL_THRESHOLD,
            max_excluded_fraction: crate::concavity::MAX_EXCLUDED_FRACTION,
        }
    }
}

/// Level pair and weight of the level-set Minkowski replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySettings {
    pub r: f64,
    pub s: f64,
    pub lambda: f64,
}

impl Default for ReplaySettings {
    fn default() -> Self {
        Self { r: 0.7, s: 0.2, lambda: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: f64,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    #[serde(default)]
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replay: ReplaySettings,
    /// Support directions; 512 in the plane, 1024 on the sphere when absent.
    #[serde(default)]
    pub directions: Option<usize>,
    /// Re-solve on extracted level sets in the scaling check.
    #[serde(default = "default_true")]
    pub resolve: bool,
}

fn default_scenario() -> Scenario {
    Scenario::Ball
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Minimal configuration for a scenario; every other field takes its default.
    pub fn with_defaults(n: usize, p: f64, scenario: Scenario) -> Self {
        Self {
            n,
            p,
            scenario,
            bodies: Vec::new(),
            grid: GridConfig::default(),
            solver: SolverSettings::default(),
            levels: None,
            lambdas: None,
            thresholds: Thresholds::default(),
            seed: 0,
            replay: ReplaySettings::default(),
            directions: None,
            resolve: true,
        }
    }

    /// Parses and validates. Messages carry `source:line:column`.
    pub fn from_json_str(text: &str, source: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{source}:{}:{}: {}", e.line(), e.column(), strip_position(&e))))?;
        cfg.validate().map_err(|(key, msg)| {
            let line = key_line(text, key).unwrap_or(1);
            Error::Config(format!("{source}:{line}: {msg}"))
        })?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: cannot read config: {e}", path.display())))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Checks everything that can be checked without solving. The error
    /// names the offending key.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        ProblemParams::new(self.n, self.p).map_err(|e| ("p", e.to_string()))?;
        if !(self.grid.half_width > 1.0) {
            return Err(("half_width", format!("half_width must exceed 1, got {}", self.grid.half_width)));
        }
        let cells = self.cells();
        if cells < 16 || !cells.is_multiple_of(2) {
            return Err(("cells", format!("cells must be even and at least 16, got {cells}")));
        }
        let s = &self.solver;
        if !(s.epsilon_reg >= 0.0 && s.tol > 0.0 && s.max_inner > 0 && s.max_outer > 0) {
            return Err(("solver", "solver settings must be positive".into()));
        }
        if let Some(levels) = &self.levels {
            if levels.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
                return Err(("levels", "levels must lie in (0, 1)".into()));
            }
        }
        if let Some(lambdas) = &self.lambdas {
            if lambdas.is_empty() || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err(("lambdas", "lambdas must be a non-empty list in [0, 1]".into()));
            }
        }
        let r = &self.replay;
        if !(r.r > 0.0 && r.r < 1.0 && r.s > 0.0 && r.s < 1.0 && (0.0..=1.0).contains(&r.lambda)) {
            return Err(("replay", "replay levels must lie in (0, 1) and lambda in [0, 1]".into()));
        }
        if let Some(m) = self.directions {
            if m < 8 {
                return Err(("directions", format!("at least 8 directions required, got {m}")));
            }
        }
        let dirs = self.direction_grid().map_err(|e| ("directions", e.to_string()))?;
        for spec in &self.bodies {
            build_body(spec, self.n, &dirs).map_err(|e| ("bodies", e.to_string()))?;
        }
        if self.scenario == Scenario::Bm && !self.bodies.is_empty() && self.bodies.len() != 2 {
            return Err(("bodies", format!("scenario bm needs exactly two bodies, got {}", self.bodies.len())));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ProblemParams> {
        ProblemParams::new(self.n, self.p)
    }

    /// Cells per axis. Level-set scenarios in the plane default to a finer
    /// grid so that the levels near the body keep their clearance.
    pub fn cells(&self) -> usize {
        let fine = matches!(self.scenario, Scenario::Theorem2 | Scenario::Levelsets);
        self.grid.cells.unwrap_or(match (self.n, fine) {
            (2, true) => 512,
            (2, false) => 256,
            _ => 128,
        })
    }

    pub fn direction_grid(&self) -> Result<Arc<DirectionGrid>> {
        let grid = match (self.n, self.directions) {
            (2, Some(m)) => DirectionGrid::uniform_2d(m)?,
            (3, Some(m)) => DirectionGrid::sphere_3d(m)?,
            (n, _) => DirectionGrid::default_for_dim(n)?,
        };
        Ok(Arc::new(grid))
    }

    /// Solver settings that place a lattice of the configured size around
    /// each body.
    pub fn solver_settings(&self) -> Result<BodyGridSettings> {
        let params = self.params()?;
        let center = vec![0.0; self.n];
        let mut template = SolverConfig::new(params, GridSpec::cube(&center, 1.0, self.cells())?);
        template.epsilon_reg = self.solver.epsilon_reg;
        template.tol = self.solver.tol;
        template.max_inner = self.solver.max_inner;
        template.max_outer = self.solver.max_outer;
        template.farfield_mode = self.solver.farfield_mode;
        Ok(BodyGridSettings::new(template, self.grid.half_width))
    }

    /// Canonical JSON of the effective configuration, the input of the
    /// provenance hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn strip_position(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg,
    }
}

/// First line (1-based) on which `"key"` appears.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Display name of a body spec.
pub fn body_label(spec: &BodySpec) -> String {
    match spec {
        BodySpec::Named(name) => name.clone(),
        BodySpec::Literal(BodyLiteral::Ball { center, r }) => format!("ball(center={center:?},r={r})"),
        BodySpec::Literal(BodyLiteral::Polygon { vertices }) => format!("polygon({} vertices)", vertices.len()),
        BodySpec::Literal(BodyLiteral::Ellipse { center, semi_axes }) => {
            format!("ellipse(center={center:?},semi_axes={semi_axes:?})")
        }
    }
}

/// Builds a body. An ellipse with equal semi-axes becomes a ball.
pub fn build_body(spec: &BodySpec, n: usize, dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    let planar = |what: &str| {
        if n != 2 {
            Err(Error::Config(format!("body `{what}` is planar but n = {n}")))
        } else {
            Ok(())
        }
    };
    match spec {
        BodySpec::Named(name) => match name.as_str() {
            "disk" => {
                planar("disk")?;
                make_ball(&[0.0, 0.0], 1.0, dirs)
            }
            "ball" => make_ball(&vec![0.0; n], 1.0, dirs),
            "square" => {
                planar("square")?;
                make_polygon(&[[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], dirs)
            }
            "ellipse" => {
                planar("ellipse")?;
                make_ellipse([0.0, 0.0], [1.0, 0.5], dirs)
            }
            other => match other.strip_prefix("ellipse:").map(str::parse::<f64>) {
                Some(Ok(ratio)) if ratio >= 1.0 => {
                    planar(other)?;
                    if ratio == 1.0 {
                        make_ball(&[0.0, 0.0], 1.0, dirs)
                    } else {
                        make_ellipse([0.0, 0.0], [1.0, 1.0 / ratio], dirs)
                    }
                }
                _ => Err(Error::Config(format!(
                    "unknown body `{other}` (expected disk, ball, square, ellipse or ellipse:RATIO with RATIO >= 1)"
                ))),
            },
        },
        BodySpec::Literal(BodyLiteral::Ball { center, r }) => {
            if center.len() != n {
                return Err(Error::Config(format!("ball center has {} coordinates, n = {n}", center.len())));
            }
            make_ball(center, *r, dirs)
        }
        BodySpec::Literal(BodyLiteral::Polygon { vertices }) => {
            planar("polygon")?;
            make_polygon(vertices, dirs)
        }
        BodySpec::Literal(BodyLiteral::Ellipse { center, semi_axes }) => {
            planar("ellipse")?;
            if semi_axes[0] == semi_axes[1] {
                make_ball(center, semi_axes[0], dirs)
            } else {
                make_ellipse(*center, *semi_axes, dirs)
            }
        }
    }
}

pub fn is_ball(body: &ConvexBody) -> bool {
    matches!(body.form(), BodyForm::Ball { .. })
}
