//! Exterior p-Laplace Dirichlet problem on a truncated box.
//!
//! The discrete energy splits every cell into one piece per corner. A piece
//! uses the forward differences along the cell edges meeting at its corner and
//! carries `1/2^n` of the cell volume. Edges that cross the body boundary are
//! shortened to the crossing point, where the potential equals one, and their
//! squared difference quotient is weighted by the shortened length, so that
//! for p = 2 the scheme reduces to the symmetric Shortley-Weller Laplacian.
//! The minimizer is found by lagged-diffusivity iteration, each step being a
//! weighted graph Laplacian solved by multigrid-preconditioned conjugate
//! gradients.

use serde::{Deserialize, Serialize};

use crate::geometry::ConvexBody;
use crate::linalg::gauss_legendre;
use crate::model::{GridSpec, NodeTag, ProblemParams, ScalarField};
use crate::sparse::{pcg, Csr, Multigrid};
use crate::{Error, Result};

/// Box half-width in units of the body's circumradius.
pub const DEFAULT_HALF_WIDTH: f64 = 8.0;
pub const DEFAULT_CELLS: usize = 256;
pub const DEFAULT_EPSILON_REG: f64 = 1e-8;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_OUTER: usize = 3;
pub const DEFAULT_MAX_INNER: usize = 500;

const MIN_CUT_FRACTION: f64 = 1e-3;
const FARFIELD_STOP: f64 = 1e-7;
const LINEAR_MAX_ITER: usize = 400;
const NESTED_MIN_CELLS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FarfieldMode {
    ZeroDirichlet,
    AsymptoticDirichlet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub params: ProblemParams,
    pub grid: GridSpec,
    /// Gradient regularization relative to the mean gradient magnitude.
    pub epsilon_reg: f64,
    /// Relative energy decrease below which the iteration stops.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub farfield_mode: FarfieldMode,
    /// Solve once on the lattice with half the cells first; that field is
    /// the starting guess and its energy feeds two-grid error indicators.
    pub nested: bool,
    pub linear_tol: f64,
    /// Radius of the far-field fitting sphere as a fraction of the smallest
    /// box half-width.
    pub fit_radius: f64,
}

impl SolverConfig {
    pub fn new(params: ProblemParams, grid: GridSpec) -> Self {
        Self {
            params,
            grid,
            epsilon_reg: DEFAULT_EPSILON_REG,
            tol: DEFAULT_TOL,
            max_outer: DEFAULT_MAX_OUTER,
            max_inner: DEFAULT_MAX_INNER,
            farfield_mode: FarfieldMode::AsymptoticDirichlet,
            nested: true,
            linear_tol: 1e-10,
            fit_radius: 0.75,
        }
    }

    /// Default configuration on the cube produced by [`grid_around`].
    pub fn for_body(params: ProblemParams, body: &ConvexBody, half_width: f64, cells: usize) -> Result<Self> {
        Ok(Self::new(params, grid_around(body, half_width, cells)?))
    }

    fn with_grid(&self, grid: GridSpec) -> Self {
        Self { grid, ..self.clone() }
    }
}

/// Cube centred at the Steiner point of `body` whose half-width is
/// `half_width` times the body's circumradius about that point. Homothetic
/// bodies therefore get exactly rescaled lattices.
pub fn grid_around(body: &ConvexBody, half_width: f64, cells: usize) -> Result<GridSpec> {
    if !(half_width > 0.0) {
        return Err(Error::InvalidGrid(format!("half width factor {half_width} must be positive")));
    }
    let center = body.steiner_point();
    let radius = body.bounding_radius(&center);
    GridSpec::cube(&center, half_width * radius, cells)
}

/// Solver settings whose lattice is rebuilt around each body by [`grid_around`].
#[derive(Debug, Clone)]
pub struct BodyGridSettings {
    /// The grid of the template only supplies the cell count.
    pub template: SolverConfig,
    pub half_width: f64,
}

impl BodyGridSettings {
    pub fn new(template: SolverConfig, half_width: f64) -> Self {
        Self { template, half_width }
    }

    pub fn config_for(&self, body: &ConvexBody) -> Result<SolverConfig> {
        let cells = self.template.grid.cells()[0];
        Ok(self.template.with_grid(grid_around(body, self.half_width, cells)?))
    }

    pub fn solve(&self, body: &ConvexBody) -> Result<SolveReport> {
        solve_exterior(body, &self.config_for(body)?)
    }
}

/// Conjugate-gradient work summed over all lagged-diffusivity steps.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LinearStats {
    pub iterations: usize,
    /// Largest final relative residual of any linear solve.
    pub worst_residual: f64,
}

/// Result of the solve on the next coarser lattice of a nested solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoarseSummary {
    pub cells: Vec<usize>,
    pub energy: f64,
    pub tail_energy: f64,
    pub farfield_coeff: f64,
    pub boundary_coeff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub field: ScalarField,
    pub params: ProblemParams,
    pub farfield_mode: FarfieldMode,
    /// Discrete p-Dirichlet energy of `field` inside the box (no regularization).
    pub energy: f64,
    /// Energy of the far-field extension `C|x - x_c|^(-q)` outside the box,
    /// with `C` the boundary coefficient. Zero in `ZeroDirichlet` mode.
    pub tail_energy: f64,
    pub residual_norm: f64,
    /// Every Picard loop met the energy tolerance.
    pub converged: bool,
    /// Picard steps on the finest lattice, summed over outer cycles.
    pub iterations: usize,
    pub outer_cycles: usize,
    /// `C` fitted from the computed field on the fitting sphere.
    pub farfield_coeff: f64,
    /// Largest relative deviation of `u|x - x_c|^q` from `C` on that sphere.
    pub farfield_fit_residual: f64,
    /// `C` used in the boundary data of the returned field.
    pub boundary_coeff: f64,
    pub farfield_center: Vec<f64>,
    /// Regularized energies after every accepted Picard step, per outer cycle.
    pub energy_history: Vec<Vec<f64>>,
    pub cut_edges: usize,
    pub linear: LinearStats,
    pub extrema_violations: usize,
    pub coarse: Option<CoarseSummary>,
}

impl SolveReport {
    pub fn total_energy(&self) -> f64 {
        self.energy + self.tail_energy
    }

    pub fn spacing(&self) -> f64 {
        self.field.grid.max_spacing()
    }
}

/// Closed-form potential of the ball `B(center, radius)`.
#[derive(Debug, Clone)]
pub struct RadialSolution {
    center: Vec<f64>,
    radius: f64,
    q: f64,
}

impl RadialSolution {
    pub fn new(center: &[f64], radius: f64, params: &ProblemParams) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidBody(format!("radius {radius} must be positive")));
        }
        if center.len() != params.n() {
            return Err(Error::InvalidBody("center dimension differs from n".into()));
        }
        Ok(Self { center: center.to_vec(), radius, q: params.q_rad() })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let r = dist(x, &self.center);
        if r <= self.radius {
            1.0
        } else {
            (self.radius / r).powf(self.q)
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Samples the potential; nodes with `|x - center| <= R` are body nodes.
    pub fn sample(&self, grid: &GridSpec) -> Result<ScalarField> {
        let n = grid.node_count();
        let mut values = Vec::with_capacity(n);
        let mut mask = Vec::with_capacity(n);
        for idx in 0..n {
            let x = grid.node_position(idx);
            let inside = dist(&x, &self.center) <= self.radius;
            let boundary = grid.is_boundary_node(grid.multi_index(idx));
            if inside && boundary {
                return Err(Error::BodyTouchesBox("ball reaches the box boundary".into()));
            }
            mask.push(if inside {
                NodeTag::InsideBody
            } else if boundary {
                NodeTag::OuterBoundary
            } else {
                NodeTag::Exterior
            });
            values.push(self.value(&x));
        }
        ScalarField::new(grid.clone(), values, mask)
    }
}

pub fn radial_solution(center: &[f64], radius: f64, params: &ProblemParams, grid: &GridSpec) -> Result<ScalarField> {
    RadialSolution::new(center, radius, params)?.sample(grid)
}

/// `max |u - u_ref| / max |u_ref|` over all lattice nodes.
pub fn linf_relative_error(field: &ScalarField, reference: &RadialSolution) -> f64 {
    let mut err = 0.0f64;
    let mut top = 0.0f64;
    for (idx, v) in field.values.iter().enumerate() {
        let r = reference.value(&field.grid.node_position(idx));
        err = err.max((v - r).abs());
        top = top.max(r.abs());
    }
    err / top
}

/// Max-norm of the discrete divergence-form operator at exterior nodes at
/// least two cells away from any body or box node.
pub fn residual_norm(field: &ScalarField, params: &ProblemParams) -> f64 {
    let disc = Discrete::plain(field);
    let nodes = field.interior_exterior_nodes(2);
    disc.residual_max(&field.values, params.p(), &nodes)
}

/// Discrete energy of `field` with the boundary treatment used for `body`.
pub fn discrete_energy(body: &ConvexBody, field: &ScalarField, params: &ProblemParams) -> Result<f64> {
    let disc = Discrete::new(body, &field.grid)?;
    if disc.mask != field.mask {
        return Err(Error::InvalidGrid("field mask does not match the body".into()));
    }
    Ok(disc.sweep(&field.values, 0.0, params.p(), None).energy)
}

/// Energy (box plus far-field tail) of `min(u/t, 1)`, the potential of the
/// superlevel set `{u >= t}`, discretized like a solve for that set. Cut
/// positions come from linear interpolation of `u` along lattice edges.
pub fn rescaled_level_energy(body: &ConvexBody, report: &SolveReport, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::LevelSet { t, reason: "level must lie in (0, 1]".into() });
    }
    let field = &report.field;
    let base = Discrete::new(body, &field.grid)?;
    if base.mask != field.mask {
        return Err(Error::InvalidGrid("field mask does not match the body".into()));
    }
    let u = &field.values;
    let mut mask = base.mask.clone();
    for (idx, tag) in mask.iter_mut().enumerate() {
        if u[idx] >= t {
            match tag {
                NodeTag::OuterBoundary => {
                    return Err(Error::LevelSet { t, reason: "superlevel set reaches the box boundary".into() });
                }
                _ => *tag = NodeTag::InsideBody,
            }
        }
    }
    let mut disc = Discrete::lattice(&field.grid, mask);
    for a in 0..disc.dim {
        for lo in 0..u.len() {
            if field.grid.multi_index(lo)[a] + 1 >= disc.shape[a] {
                continue;
            }
            let hi = lo + disc.strides[a];
            let lo_in = disc.mask[lo] == NodeTag::InsideBody;
            if lo_in == (disc.mask[hi] == NodeTag::InsideBody) {
                continue;
            }
            let (out_idx, in_idx) = if lo_in { (hi, lo) } else { (lo, hi) };
            let u_out = u[out_idx];
            let frac = if base.mask[in_idx] == NodeTag::InsideBody {
                base.theta[a][lo] * (t - u_out) / (1.0 - u_out)
            } else {
                (t - u_out) / (u[in_idx] - u_out)
            };
            disc.theta[a][lo] = frac.clamp(MIN_CUT_FRACTION, 1.0);
        }
    }
    let values: Vec<f64> = u
        .iter()
        .zip(&disc.mask)
        .map(|(v, tag)| if *tag == NodeTag::InsideBody { 1.0 } else { (v / t).min(1.0) })
        .collect();
    let energy = disc.sweep(&values, 0.0, report.params.p(), None).energy;
    let tail = tail_energy(&field.grid, &report.farfield_center, report.boundary_coeff / t, &report.params);
    Ok(energy + tail)
}

/// Exterior nodes (off the box boundary) whose value lies strictly outside the
/// range of their axis neighbours.
pub fn max_principle_violations(field: &ScalarField) -> usize {
    let grid = &field.grid;
    let dim = grid.dim();
    let strides = grid.strides();
    let mut count = 0;
    for (idx, tag) in field.mask.iter().enumerate() {
        if *tag != NodeTag::Exterior {
            continue;
        }
        let v = field.values[idx];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in strides.iter().take(dim) {
            for nb in [idx - s, idx + s] {
                lo = lo.min(field.values[nb]);
                hi = hi.max(field.values[nb]);
            }
        }
        let slack = 1e-9;
        if v > hi + slack || v < lo - slack {
            count += 1;
        }
    }
    count
}

/// Energy of `C|x - center|^(-q)` outside the box of `grid`.
pub fn tail_energy(grid: &GridSpec, center: &[f64], coeff: f64, params: &ProblemParams) -> f64 {
    if coeff == 0.0 {
        return 0.0;
    }
    let dim = grid.dim();
    let p = params.p();
    let q = params.q_rad();
    let a = p * (q + 1.0);
    let mut total = 0.0;
    for axis in 0..dim {
        let others: Vec<usize> = (0..dim).filter(|&b| b != axis).collect();
        let spans: Vec<Vec<(f64, f64)>> = others
            .iter()
            .map(|&b| gauss_legendre(grid.lower()[b] - center[b], grid.upper()[b] - center[b], 24))
            .collect();
        for face_l in [center[axis] - grid.lower()[axis], grid.upper()[axis] - center[axis]] {
            let l2 = face_l * face_l;
            let mut s = 0.0;
            if dim == 2 {
                for &(y, w) in &spans[0] {
                    s += w * (l2 + y * y).powf(-0.5 * a);
                }
            } else {
                for &(y, wy) in &spans[0] {
                    for &(z, wz) in &spans[1] {
                        s += wy * wz * (l2 + y * y + z * z).powf(-0.5 * a);
                    }
                }
            }
            total += face_l / (a - dim as f64) * s;
        }
    }
    (coeff * q).powf(p) * total
}

/// Solves the exterior problem for `body` on `cfg.grid`.
pub fn solve_exterior(body: &ConvexBody, cfg: &SolverConfig) -> Result<SolveReport> {
    validate(body, cfg)?;
    let coarse = match cfg.grid.coarsened() {
        Some(g) if cfg.nested && g.cells().iter().all(|&c| c >= NESTED_MIN_CELLS) => {
            let mut coarse_cfg = cfg.with_grid(g);
            coarse_cfg.nested = false;
            Some(solve_exterior(body, &coarse_cfg)?)
        }
        _ => None,
    };
    let disc = Discrete::new(body, &cfg.grid)?;
    if !disc.mask.contains(&NodeTag::InsideBody) {
        return Err(Error::InvalidGrid("no lattice node falls inside the body".into()));
    }
    let center = body.steiner_point();
    let q = cfg.params.q_rad();
    let radius = body.bounding_radius(&center);

    let (mut u, c0) = match &coarse {
        Some(c) => {
            let init: Vec<f64> = (0..cfg.grid.node_count())
                .map(|idx| c.field.interpolate(&cfg.grid.node_position(idx)).unwrap_or(0.0))
                .collect();
            (init, c.boundary_coeff)
        }
        None => {
            let init = (0..cfg.grid.node_count())
                .map(|idx| (radius / dist(&cfg.grid.node_position(idx), &center)).powf(q).min(1.0))
                .collect();
            (init, radius.powf(q))
        }
    };

    let fit_r = cfg.fit_radius * cfg.grid.half_widths().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut coeffs: Vec<(f64, f64)> = Vec::new();
    let mut c_bc = match cfg.farfield_mode {
        FarfieldMode::ZeroDirichlet => 0.0,
        FarfieldMode::AsymptoticDirichlet => c0,
    };
    let cycles = match cfg.farfield_mode {
        FarfieldMode::ZeroDirichlet => 1,
        FarfieldMode::AsymptoticDirichlet => cfg.max_outer.max(1),
    };
    let mut fit = (0.0, 0.0);
    let mut outer = 0;
    let mut linear = LinearStats::default();
    for cycle in 0..cycles {
        outer += 1;
        disc.apply_dirichlet(&mut u, &center, c_bc, q);
        let (steps, energies) = disc.minimize(&mut u, cfg, &mut linear)?;
        iterations += steps;
        history.push(energies);
        fit = disc.fit_farfield(&u, &center, fit_r, q);
        if cfg.farfield_mode == FarfieldMode::ZeroDirichlet {
            break;
        }
        let residual = fit.0 - c_bc;
        coeffs.push((c_bc, residual));
        if residual.abs() <= FARFIELD_STOP * c_bc.abs() || cycle + 1 == cycles {
            break;
        }
        c_bc = next_coeff(&coeffs, fit.0);
    }

    for v in u.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let energy = disc.sweep(&u, 0.0, cfg.params.p(), None).energy;
    let field = ScalarField::new(cfg.grid.clone(), u, disc.mask.clone())?;
    let residual = residual_norm(&field, &cfg.params);
    let extrema = max_principle_violations(&field);
    let tail = tail_energy(&cfg.grid, &center, c_bc, &cfg.params);
    Ok(SolveReport {
        params: cfg.params,
        farfield_mode: cfg.farfield_mode,
        energy,
        tail_energy: tail,
        residual_norm: residual,
        converged: true,
        iterations,
        outer_cycles: outer,
        farfield_coeff: fit.0,
        farfield_fit_residual: fit.1,
        boundary_coeff: c_bc,
        farfield_center: center,
        energy_history: history,
        cut_edges: disc.cut_edges,
        linear,
        extrema_violations: extrema,
        coarse: coarse.map(|c| CoarseSummary {
            cells: c.field.grid.cells().to_vec(),
            energy: c.energy,
            tail_energy: c.tail_energy,
            farfield_coeff: c.farfield_coeff,
            boundary_coeff: c.boundary_coeff,
        }),
        field,
    })
}

/// Secant step on `C -> fit(C) - C`, falling back to the fitted value.
fn next_coeff(history: &[(f64, f64)], fitted: f64) -> f64 {
    if let [.., (c0, f0), (c1, f1)] = history {
        let denom = f1 - f0;
        if denom != 0.0 {
            let c = c1 - f1 * (c1 - c0) / denom;
            if c.is_finite() && c > 0.0 {
                return c;
            }
        }
    }
    fitted
}

fn validate(body: &ConvexBody, cfg: &SolverConfig) -> Result<()> {
    let n = cfg.params.n();
    if body.dim() != n || cfg.grid.dim() != n {
        return Err(Error::InvalidParams(format!(
            "body dimension {}, grid dimension {} and n = {n} disagree",
            body.dim(),
            cfg.grid.dim()
        )));
    }
    for (name, v) in [("epsilon_reg", cfg.epsilon_reg), ("tol", cfg.tol), ("linear_tol", cfg.linear_tol)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidParams(format!("{name} = {v} must be a non-negative number")));
        }
    }
    if cfg.max_inner == 0 {
        return Err(Error::InvalidParams("max_inner must be positive".into()));
    }
    if !(cfg.fit_radius > 0.0 && cfg.fit_radius < 1.0) {
        return Err(Error::InvalidParams(format!("fit radius fraction {} must lie in (0, 1)", cfg.fit_radius)));
    }
    let (lo, hi) = body.bounding_box();
    let diam = body.diameter();
    for axis in 0..n {
        let below = lo[axis] - cfg.grid.lower()[axis];
        let above = cfg.grid.upper()[axis] - hi[axis];
        if below <= 0.0 || above <= 0.0 {
            return Err(Error::BodyTouchesBox(format!("axis {axis}: body spans [{}, {}]", lo[axis], hi[axis])));
        }
        if below.min(above) < 2.0 * diam {
            return Err(Error::InvalidGrid(format!(
                "clearance {:.4} on axis {axis} is below twice the body diameter {:.4}",
                below.min(above),
                diam
            )));
        }
    }
    Ok(())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct SweepResult {
    energy: f64,
    grad_sum: f64,
    pieces: usize,
}

/// Lattice, node tags and cut fractions of one exterior problem.
struct Discrete {
    grid: GridSpec,
    dim: usize,
    shape: [usize; 3],
    strides: [usize; 3],
    h: [f64; 3],
    weight: f64,
    /// Offset of the lower node of each cell edge, per axis and slot.
    edge_offsets: [[usize; 4]; 3],
    /// Slot of the edge along each axis that starts at each cell corner.
    corner_slot: [[usize; 3]; 8],
    mask: Vec<NodeTag>,
    fixed: Vec<bool>,
    /// Per axis and lower node: distance from the exterior end of the edge to
    /// the body boundary, in units of the spacing. One for uncut edges.
    theta: [Vec<f64>; 3],
    cut_edges: usize,
}

impl Discrete {
    fn lattice(grid: &GridSpec, mask: Vec<NodeTag>) -> Self {
        let dim = grid.dim();
        let shape = grid.shape();
        let strides = grid.strides();
        let mut h = [1.0; 3];
        for (a, ha) in h.iter_mut().enumerate().take(dim) {
            *ha = grid.spacing(a);
        }
        let weight = h.iter().product::<f64>() / (1usize << dim) as f64;
        let mut edge_offsets = [[0usize; 4]; 3];
        let mut corner_slot = [[0usize; 3]; 8];
        for a in 0..dim {
            let others: Vec<usize> = (0..dim).filter(|&b| b != a).collect();
            for slot in 0..(1usize << (dim - 1)) {
                edge_offsets[a][slot] = others
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| slot >> j & 1 == 1)
                    .map(|(_, &b)| strides[b])
                    .sum();
            }
            for (corner, slots) in corner_slot.iter_mut().enumerate().take(1 << dim) {
                slots[a] = others
                    .iter()
                    .enumerate()
                    .map(|(j, &b)| (corner >> b & 1) << j)
                    .sum();
            }
        }
        let fixed = mask.iter().map(|t| *t != NodeTag::Exterior).collect();
        let n = grid.node_count();
        Self {
            grid: grid.clone(),
            dim,
            shape,
            strides,
            h,
            weight,
            edge_offsets,
            corner_slot,
            mask,
            fixed,
            theta: [vec![1.0; n], if dim > 1 { vec![1.0; n] } else { Vec::new() }, if dim > 2 { vec![1.0; n] } else { Vec::new() }],
            cut_edges: 0,
        }
    }

    /// Lattice of `field` with every edge treated as uncut.
    fn plain(field: &ScalarField) -> Self {
        Self::lattice(&field.grid, field.mask.clone())
    }

    fn new(body: &ConvexBody, grid: &GridSpec) -> Result<Self> {
        let n = grid.node_count();
        let mut mask = Vec::with_capacity(n);
        for idx in 0..n {
            let x = grid.node_position(idx);
            let inside = body.contains(&x);
            let boundary = grid.is_boundary_node(grid.multi_index(idx));
            if inside && boundary {
                return Err(Error::BodyTouchesBox(format!("body contains box node {x:?}")));
            }
            mask.push(if inside {
                NodeTag::InsideBody
            } else if boundary {
                NodeTag::OuterBoundary
            } else {
                NodeTag::Exterior
            });
        }
        let mut disc = Self::lattice(grid, mask);
        let mut cut = 0;
        for a in 0..disc.dim {
            for lo in 0..n {
                let ijk = grid.multi_index(lo);
                if ijk[a] + 1 >= disc.shape[a] {
                    continue;
                }
                let hi = lo + disc.strides[a];
                let lo_in = disc.mask[lo] == NodeTag::InsideBody;
                let hi_in = disc.mask[hi] == NodeTag::InsideBody;
                if lo_in == hi_in {
                    continue;
                }
                let (out_idx, in_idx) = if lo_in { (hi, lo) } else { (lo, hi) };
                let s = body.boundary_fraction(&grid.node_position(out_idx), &grid.node_position(in_idx));
                disc.theta[a][lo] = s.max(MIN_CUT_FRACTION);
                cut += 1;
            }
        }
        disc.cut_edges = cut;
        Ok(disc)
    }

    fn cell_counts(&self) -> [usize; 3] {
        let mut c = [1; 3];
        for (a, ca) in c.iter_mut().enumerate().take(self.dim) {
            *ca = self.shape[a] - 1;
        }
        c
    }

    /// Walks every piece once. Accumulates edge conductances of the quadratic
    /// model at `u` into `cond` and the energy gradient into `grad`.
    fn sweep(&self, u: &[f64], eps2: f64, p: f64, mut out: Option<(&mut [Vec<f64>; 3], &mut [f64])>) -> SweepResult {
        let dim = self.dim;
        let slots = 1usize << (dim - 1);
        let corners = 1usize << dim;
        let cc = self.cell_counts();
        let mut energy = 0.0;
        let mut grad_sum = 0.0;
        let mut pieces = 0;
        let mut g = [[0.0f64; 4]; 3];
        let mut th = [[1.0f64; 4]; 3];
        let mut lo_idx = [[0usize; 4]; 3];
        let mut active = [[false; 4]; 3];
        for k in 0..cc[2] {
            for j in 0..cc[1] {
                for i in 0..cc[0] {
                    let origin = i + self.shape[0] * (j + self.shape[1] * k);
                    let mut any = false;
                    for a in 0..dim {
                        for s in 0..slots {
                            let lo = origin + self.edge_offsets[a][s];
                            let hi = lo + self.strides[a];
                            let act = !(self.mask[lo] == NodeTag::InsideBody && self.mask[hi] == NodeTag::InsideBody);
                            active[a][s] = act;
                            lo_idx[a][s] = lo;
                            if act {
                                any = true;
                                let t = self.theta[a][lo];
                                th[a][s] = t;
                                g[a][s] = (u[hi] - u[lo]) / (t * self.h[a]);
                            }
                        }
                    }
                    if !any {
                        continue;
                    }
                    for corner in 0..corners {
                        let mut qsum = 0.0;
                        let mut used = false;
                        for a in 0..dim {
                            let s = self.corner_slot[corner][a];
                            if active[a][s] {
                                used = true;
                                qsum += th[a][s] * g[a][s] * g[a][s];
                            }
                        }
                        if !used {
                            continue;
                        }
                        let base = qsum + eps2;
                        energy += self.weight * base.powf(0.5 * p);
                        grad_sum += qsum.sqrt();
                        pieces += 1;
                        if let Some((cond, grad)) = out.as_mut() {
                            let coef = if base > 0.0 { base.powf(0.5 * p - 1.0) } else { 0.0 };
                            for a in 0..dim {
                                let s = self.corner_slot[corner][a];
                                if !active[a][s] {
                                    continue;
                                }
                                let lo = lo_idx[a][s];
                                cond[a][lo] += self.weight * coef / (th[a][s] * self.h[a] * self.h[a]);
                                let flux = p * self.weight * coef * g[a][s] / self.h[a];
                                grad[lo + self.strides[a]] += flux;
                                grad[lo] -= flux;
                            }
                        }
                    }
                }
            }
        }
        SweepResult { energy, grad_sum, pieces }
    }

    fn residual_max(&self, u: &[f64], p: f64, nodes: &[usize]) -> f64 {
        let n = u.len();
        let mut cond = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut grad = vec![0.0; n];
        self.sweep(u, 0.0, p, Some((&mut cond, &mut grad)));
        let vol: f64 = self.h.iter().take(self.dim).product();
        nodes
            .iter()
            .map(|&i| (grad[i] / (p * vol)).abs())
            .fold(0.0, f64::max)
    }

    fn apply_dirichlet(&self, u: &mut [f64], center: &[f64], coeff: f64, q: f64) {
        for idx in 0..u.len() {
            match self.mask[idx] {
                NodeTag::InsideBody => u[idx] = 1.0,
                NodeTag::OuterBoundary => {
                    let r = dist(&self.grid.node_position(idx), center);
                    u[idx] = (coeff * r.powf(-q)).min(1.0);
                }
                NodeTag::Exterior => {}
            }
        }
    }

    fn matrix(&self, cond: &[Vec<f64>; 3], u: &[f64]) -> (Csr, Vec<f64>) {
        let n = u.len();
        let dim = self.dim;
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(n * (2 * dim + 1));
        let mut vals = Vec::with_capacity(n * (2 * dim + 1));
        let mut rhs = vec![0.0; n];
        for idx in 0..n {
            if self.fixed[idx] {
                cols.push(idx as u32);
                vals.push(1.0);
                rhs[idx] = u[idx];
                row_ptr.push(cols.len());
                continue;
            }
            let mut diag = 0.0;
            let mut b = 0.0;
            // lower neighbours, highest axis first, keep columns ascending
            for a in (0..dim).rev() {
                let nb = idx - self.strides[a];
                let k = cond[a][nb];
                diag += k;
                if self.fixed[nb] {
                    b += k * u[nb];
                } else if k != 0.0 {
                    cols.push(nb as u32);
                    vals.push(-k);
                }
            }
            let diag_pos = cols.len();
            cols.push(idx as u32);
            vals.push(0.0);
            for a in 0..dim {
                let nb = idx + self.strides[a];
                let k = cond[a][idx];
                diag += k;
                if self.fixed[nb] {
                    b += k * u[nb];
                } else if k != 0.0 {
                    cols.push(nb as u32);
                    vals.push(-k);
                }
            }
            vals[diag_pos] = diag;
            rhs[idx] = b;
            row_ptr.push(cols.len());
        }
        (Csr { rows: n, cols_count: n, row_ptr, cols, vals }, rhs)
    }

    /// Damped lagged-diffusivity iteration from `u` (boundary values already
    /// set). Returns the step count and the regularized energy after each
    /// accepted step, starting with the initial energy.
    fn minimize(&self, u: &mut [f64], cfg: &SolverConfig, linear: &mut LinearStats) -> Result<(usize, Vec<f64>)> {
        let p = cfg.params.p();
        let n = u.len();
        let probe = self.sweep(u, 0.0, p, None);
        let mean_grad = if probe.pieces > 0 { probe.grad_sum / probe.pieces as f64 } else { 0.0 };
        let eps = cfg.epsilon_reg * mean_grad;
        let eps2 = eps * eps;
        let mut e_cur = self.sweep(u, eps2, p, None).energy;
        let mut history = vec![e_cur];
        let mut trial = vec![0.0; n];
        let mut last_change = f64::INFINITY;
        for step in 1..=cfg.max_inner {
            let mut cond = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
            let mut grad = vec![0.0; n];
            self.sweep(u, eps2, p, Some((&mut cond, &mut grad)));
            let (a, rhs) = self.matrix(&cond, u);
            let mg = Multigrid::build(a.clone(), self.shape, self.dim, &self.fixed);
            let mut target = u.to_vec();
            let cg = pcg(&a, &rhs, &mut target, &mg, cfg.linear_tol, LINEAR_MAX_ITER);
            linear.iterations += cg.iterations;
            linear.worst_residual = linear.worst_residual.max(cg.relative_residual);
            let mut accepted = None;
            let mut s = 1.0;
            for _ in 0..12 {
                for i in 0..n {
                    trial[i] = u[i] + s * (target[i] - u[i]);
                }
                let e = self.sweep(&trial, eps2, p, None).energy;
                if e <= e_cur {
                    accepted = Some(e);
                    break;
                }
                s *= 0.5;
            }
            let Some(e_new) = accepted else {
                // No descent left at rounding level.
                return Ok((step, history));
            };
            u.copy_from_slice(&trial);
            last_change = (e_cur - e_new) / e_new.abs().max(f64::MIN_POSITIVE);
            e_cur = e_new;
            history.push(e_cur);
            if last_change < cfg.tol {
                return Ok((step, history));
            }
        }
        let field = ScalarField {
            grid: self.grid.clone(),
            values: u.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            mask: self.mask.clone(),
        };
        Err(Error::NotConverged {
            iterations: cfg.max_inner,
            last_change,
            residual: residual_norm(&field, &cfg.params),
        })
    }

    /// Mean and largest relative spread of `u r^q` on the sphere of radius
    /// `r` about `center`.
    fn fit_farfield(&self, u: &[f64], center: &[f64], r: f64, q: f64) -> (f64, f64) {
        let field = ScalarField { grid: self.grid.clone(), values: u.to_vec(), mask: self.mask.clone() };
        let samples: Vec<f64> = sphere_points(self.dim)
            .iter()
            .filter_map(|dir| {
                let x: Vec<f64> = center.iter().zip(dir).map(|(c, d)| c + r * d).collect();
                field.interpolate(&x).map(|v| v * r.powf(q))
            })
            .collect();
        if samples.is_empty() {
            return (0.0, f64::INFINITY);
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let spread = samples.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
        (mean, if mean > 0.0 { spread / mean } else { f64::INFINITY })
    }
}

fn sphere_points(dim: usize) -> Vec<Vec<f64>> {
    if dim == 2 {
        (0..256)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * (k as f64 + 0.5) / 256.0;
                vec![t.cos(), t.sin()]
            })
            .collect()
    } else {
        let m = 512;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..m)
            .map(|k| {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                let rho = (1.0 - z * z).sqrt();
                let phi = golden * k as f64;
                vec![rho * phi.cos(), rho * phi.sin(), z]
            })
            .collect()
    }
}
