//! Problem parameters, their derived constants, and the grid-sampled field
//! representation shared by the solver and the analysis modules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension `n` and exponent `p` of the exterior p-Laplace problem.
///
/// Construction enforces `n ∈ {2, 3}` and `1 < p < n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct ProblemParams {
    n: usize,
    p: f64,
}

#[derive(Deserialize)]
struct RawParams {
    n: usize,
    p: f64,
}

impl TryFrom<RawParams> for ProblemParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        ProblemParams::new(raw.n, raw.p)
    }
}

impl ProblemParams {
    pub fn new(n: usize, p: f64) -> Result<Self> {
        if n != 2 && n != 3 {
            return Err(Error::InvalidParams(format!(
                "dimension must be 2 or 3, got {n}"
            )));
        }
        if !p.is_finite() || p <= 1.0 || p >= n as f64 {
            return Err(Error::InvalidParams(format!(
                "exponent must satisfy 1 < p < n = {n}, got {p}"
            )));
        }
        Ok(Self { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Radial decay exponent `(n - p) / (p - 1)`.
    pub fn q_rad(&self) -> f64 {
        (self.n as f64 - self.p) / (self.p - 1.0)
    }

    /// Optimal power-concavity exponent `(1 - p) / (n - p)`.
    pub fn alpha_star(&self) -> f64 {
        (1.0 - self.p) / (self.n as f64 - self.p)
    }

    /// Exponent of the Brunn-Minkowski root, `1 / (n - p)`.
    pub fn bm_exponent(&self) -> f64 {
        1.0 / (self.n as f64 - self.p)
    }

    pub fn constants(&self) -> DerivedConstants {
        let q_rad = self.q_rad();
        let omega_n = unit_ball_volume(self.n);
        DerivedConstants {
            q_rad,
            alpha_star: self.alpha_star(),
            omega_n,
            c_np: self.n as f64 * omega_n * q_rad.powf(self.p - 1.0),
        }
    }
}

/// Constants that follow from `(n, p)`.
///
/// `c_np` is normalized so that `c_np * C^(p-1)` reproduces the energy of the
/// potential whose far field is `C |x|^(-q_rad)`; it carries the surface area
/// `n * omega_n` of the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub q_rad: f64,
    pub alpha_star: f64,
    pub omega_n: f64,
    pub c_np: f64,
}

pub fn make_params(n: usize, p: f64) -> Result<(ProblemParams, DerivedConstants)> {
    let params = ProblemParams::new(n, p)?;
    Ok((params, params.constants()))
}

/// Lebesgue measure of the unit ball in dimension 2 or 3.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => panic!("unsupported dimension {n}"),
    }
}

pub const MIN_CELLS_PER_AXIS: usize = 16;

/// Axis-aligned box sampled by a uniform node lattice.
///
/// Nodes are numbered with the first axis fastest. In two dimensions the third
/// axis is degenerate (one node), which lets index arithmetic stay uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        let dim = lower.len();
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidGrid(format!("dimension {dim} not supported")));
        }
        if upper.len() != dim || cells.len() != dim {
            return Err(Error::InvalidGrid("bounds and cell counts disagree in length".into()));
        }
        for axis in 0..dim {
            if !(upper[axis] > lower[axis]) || !lower[axis].is_finite() || !upper[axis].is_finite() {
                return Err(Error::InvalidGrid(format!("empty extent on axis {axis}")));
            }
            if cells[axis] < MIN_CELLS_PER_AXIS {
                return Err(Error::InvalidGrid(format!(
                    "axis {axis} has {} cells, at least {MIN_CELLS_PER_AXIS} required",
                    cells[axis]
                )));
            }
        }
        Ok(Self { lower, upper, cells })
    }

    /// Cube `center ± half_width` with `cells` cells on every axis.
    pub fn cube(center: &[f64], half_width: f64, cells: usize) -> Result<Self> {
        let lower = center.iter().map(|c| c - half_width).collect();
        let upper = center.iter().map(|c| c + half_width).collect();
        Self::new(lower, upper, vec![cells; center.len()])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells[axis] as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| 0.5 * (self.lower[a] + self.upper[a]))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|a| 0.5 * (self.upper[a] - self.lower[a]))
            .collect()
    }

    /// Node counts padded to three axes.
    pub fn shape(&self) -> [usize; 3] {
        let mut s = [1; 3];
        for (axis, c) in self.cells.iter().enumerate() {
            s[axis] = c + 1;
        }
        s
    }

    pub fn node_count(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn strides(&self) -> [usize; 3] {
        let s = self.shape();
        [1, s[0], s[0] * s[1]]
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        let s = self.shape();
        ijk[0] + s[0] * (ijk[1] + s[1] * ijk[2])
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let s = self.shape();
        [idx % s[0], (idx / s[0]) % s[1], idx / (s[0] * s[1])]
    }

    pub fn node_coord(&self, ijk: [usize; 3], axis: usize) -> f64 {
        if ijk[axis] == self.cells[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + ijk[axis] as f64 * self.spacing(axis)
        }
    }

    pub fn node_position(&self, idx: usize) -> Vec<f64> {
        let ijk = self.multi_index(idx);
        (0..self.dim()).map(|a| self.node_coord(ijk, a)).collect()
    }

    pub fn is_boundary_node(&self, ijk: [usize; 3]) -> bool {
        (0..self.dim()).any(|a| ijk[a] == 0 || ijk[a] == self.cells[a])
    }

    /// Same box with every cell count halved, if that keeps the grid valid.
    pub fn coarsened(&self) -> Option<Self> {
        if self.cells.iter().any(|c| c % 2 != 0 || c / 2 < MIN_CELLS_PER_AXIS) {
            return None;
        }
        let cells = self.cells.iter().map(|c| c / 2).collect();
        Self::new(self.lower.clone(), self.upper.clone(), cells).ok()
    }
}

/// Per-node classification of a sampled exterior problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeTag {
    InsideBody,
    Exterior,
    OuterBoundary,
}

/// Potential sampled on a grid, together with the node classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub mask: Vec<NodeTag>,
}

impl ScalarField {
    pub fn new(grid: GridSpec, values: Vec<f64>, mask: Vec<NodeTag>) -> Result<Self> {
        let field = Self { grid, values, mask };
        field.validate()?;
        Ok(field)
    }

    /// Checks the field invariants: one value and tag per node, value 1 at
    /// body nodes and every value in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let count = self.grid.node_count();
        if self.values.len() != count || self.mask.len() != count {
            return Err(Error::InvalidGrid(format!(
                "field has {} values and {} tags for {count} nodes",
                self.values.len(),
                self.mask.len()
            )));
        }
        for (idx, (&v, &tag)) in self.values.iter().zip(&self.mask).enumerate() {
            if tag == NodeTag::InsideBody && v != 1.0 {
                return Err(Error::InvalidGrid(format!("body node {idx} has value {v}")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidGrid(format!("node {idx} has value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Multilinear interpolation; `None` outside the box.
    pub fn interpolate(&self, x: &[f64]) -> Option<f64> {
        let dim = self.dim();
        let shape = self.grid.shape();
        let strides = self.grid.strides();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..dim {
            let h = self.grid.spacing(axis);
            let s = (x[axis] - self.grid.lower()[axis]) / h;
            if !(s >= -1e-12 && s <= self.grid.cells()[axis] as f64 + 1e-12) {
                return None;
            }
            let i = (s.floor().max(0.0) as usize).min(shape[axis] - 2);
            base[axis] = i;
            frac[axis] = (s - i as f64).clamp(0.0, 1.0);
        }
        let origin: usize = (0..dim).map(|a| base[a] * strides[a]).sum();
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = origin;
            for axis in 0..dim {
                if corner >> axis & 1 == 1 {
                    w *= frac[axis];
                    idx += strides[axis];
                } else {
                    w *= 1.0 - frac[axis];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        Some(acc)
    }

    /// Exterior nodes whose Chebyshev neighbourhood of radius `band` contains
    /// only exterior nodes (no body node, no truncation node).
    pub fn interior_exterior_nodes(&self, band: usize) -> Vec<usize> {
        let dim = self.dim();
        let shape = self.grid.shape();
        let far = self.distance_to_non_exterior(band + 1);
        (0..self.values.len())
            .filter(|&idx| {
                let ijk = self.grid.multi_index(idx);
                (0..dim).all(|a| ijk[a] >= band && ijk[a] + band < shape[a]) && far[idx] > band
            })
            .collect()
    }

    /// Chebyshev distance (in nodes, capped at `cap`) to the nearest node that
    /// is not tagged exterior.
    pub fn distance_to_non_exterior(&self, cap: usize) -> Vec<usize> {
        chebyshev_distance(&self.mask, &self.grid, cap)
    }
}

fn line_start(line: usize, axis: usize, shape: [usize; 3], strides: [usize; 3]) -> usize {
    // Enumerate lines parallel to `axis` by the remaining two coordinates.
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let a0 = others[0];
    let a1 = others[1];
    let i0 = line % shape[a0];
    let i1 = line / shape[a0];
    i0 * strides[a0] + i1 * strides[a1]
}

/// Chebyshev distance to the nearest non-exterior node, capped at `cap`.
fn chebyshev_distance(mask: &[NodeTag], grid: &GridSpec, cap: usize) -> Vec<usize> {
    let dim = grid.dim();
    let shape = grid.shape();
    let strides = grid.strides();
    let mut dist: Vec<usize> = mask
        .iter()
        .map(|&t| if t == NodeTag::Exterior { cap } else { 0 })
        .collect();
    // Separable: the Chebyshev ball is a product of intervals, so a 1D
    // min-distance pass per axis composes exactly.
    for axis in 0..dim {
        let n = shape[axis];
        let stride = strides[axis];
        let lines = mask.len() / n;
        let mut next = dist.clone();
        for line in 0..lines {
            let start = line_start(line, axis, shape, strides);
            for k in 0..n {
                let mut best = dist[start + k * stride];
                let lo = k.saturating_sub(cap);
                let hi = (k + cap).min(n - 1);
                for m in lo..=hi {
                    let off = m.abs_diff(k);
                    let cand = dist[start + m * stride].max(off);
                    if cand < best {
                        best = cand;
                    }
                }
                next[start + k * stride] = best;
            }
        }
        dist = next;
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constants_for_reference_pairs() {
        let (_, c) = make_params(3, 2.0).unwrap();
        assert_relative_eq!(c.q_rad, 1.0);
        assert_relative_eq!(c.alpha_star, -1.0);
        assert_relative_eq!(c.omega_n, 4.0 * PI / 3.0);
        assert_relative_eq!(c.c_np, 4.0 * PI);

        let (_, c) = make_params(2, 1.5).unwrap();
        assert_relative_eq!(c.q_rad, 1.0);
        assert_relative_eq!(c.alpha_star, -1.0);
        assert_relative_eq!(c.omega_n, PI);
        assert_relative_eq!(c.c_np, 2.0 * PI);

        let (_, c) = make_params(3, 1.5).unwrap();
        assert_relative_eq!(c.q_rad, 3.0);
        assert_relative_eq!(c.alpha_star, -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_inadmissible_params() {
        assert!(make_params(2, 1.0).is_err());
        assert!(make_params(2, 2.0).is_err());
        assert!(make_params(3, 3.5).is_err());
        assert!(make_params(4, 2.0).is_err());
        assert!(make_params(3, f64::NAN).is_err());
        assert!(serde_json::from_str::<ProblemParams>(r#"{"n":2,"p":2.5}"#).is_err());
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = GridSpec::cube(&[0.0, 0.0, 0.0], 1.0, 16).unwrap();
        assert_eq!(g.node_count(), 17 * 17 * 17);
        for idx in [0, 5, 17 * 3 + 2, g.node_count() - 1] {
            assert_eq!(g.index(g.multi_index(idx)), idx);
        }
        assert_eq!(g.node_position(g.node_count() - 1), vec![1.0, 1.0, 1.0]);
        assert!(GridSpec::cube(&[0.0, 0.0], 1.0, 8).is_err());
    }

    #[test]
    fn chebyshev_distance_matches_brute_force() {
        let g = GridSpec::cube(&[0.0, 0.0], 1.0, 16).unwrap();
        let n = g.node_count();
        let mut mask = vec![NodeTag::Exterior; n];
        for idx in [g.index([3, 4, 0]), g.index([12, 9, 0])] {
            mask[idx] = NodeTag::InsideBody;
        }
        let field = ScalarField::new(g.clone(), vec![0.5; n].iter().zip(&mask).map(|(v, t)| if *t == NodeTag::InsideBody { 1.0 } else { *v }).collect(), mask.clone()).unwrap();
        let d = field.distance_to_non_exterior(20);
        for idx in 0..n {
            let a = g.multi_index(idx);
            let brute = (0..n)
                .filter(|&j| mask[j] != NodeTag::Exterior)
                .map(|j| {
                    let b = g.multi_index(j);
                    (a[0] as i64 - b[0] as i64).unsigned_abs().max((a[1] as i64 - b[1] as i64).unsigned_abs()) as usize
                })
                .min()
                .unwrap()
                .min(20);
            assert_eq!(d[idx], brute, "node {a:?}");
        }
    }
}
