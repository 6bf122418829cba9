//! Convex bodies represented by sampled support functions.
//!
//! A body stores `h(θ_i) = sup { <x, θ_i> : x ∈ K }` on a shared
//! [`DirectionGrid`]. Minkowski combinations and dilations act linearly on
//! these samples, so both are exact on the grid. Bodies built from an
//! analytic description (ball, polygon, ellipse) keep that description for
//! exact membership and boundary-crossing queries.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::model::{NodeTag, ScalarField};

/// Default number of sampled directions in the plane.
pub const DEFAULT_DIRECTIONS_2D: usize = 512;

/// Default relative residual below which two bodies are declared homothetic.
pub const DEFAULT_HOMOTHETY_TOL: f64 = 1e-3;

const CONTAINS_SLACK: f64 = 1e-12;

/// Unit directions on `S^(n-1)`, stored flat. The grid is antipodally
/// symmetric: direction `i + M/2 (mod M)` is the negation of direction `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionGrid {
    dim: usize,
    data: Vec<f64>,
}

impl DirectionGrid {
    /// `m` equally spaced angles `2πk/m`, starting on the positive x-axis.
    pub fn uniform_2d(m: usize) -> Result<Self> {
        if m < 64 || !m.is_multiple_of(2) {
            return Err(Error::InvalidBody(format!(
                "planar direction grid needs an even count >= 64, got {m}"
            )));
        }
        let mut data = Vec::with_capacity(2 * m);
        for k in 0..m {
            let a = 2.0 * PI * k as f64 / m as f64;
            data.push(a.cos());
            data.push(a.sin());
        }
        Ok(Self { dim: 2, data })
    }

    /// Near-uniform sphere covering: a Fibonacci lattice on the upper
    /// hemisphere followed by its antipodes.
    pub fn sphere_3d(m: usize) -> Result<Self> {
        if m < 64 || !m.is_multiple_of(2) {
            return Err(Error::InvalidBody(format!(
                "sphere direction grid needs an even count >= 64, got {m}"
            )));
        }
        let half = m / 2;
        let golden = PI * (3.0 - 5f64.sqrt());
        let mut upper = Vec::with_capacity(3 * half);
        for i in 0..half {
            let z = 1.0 - (i as f64 + 0.5) / half as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            upper.extend_from_slice(&[r * phi.cos(), r * phi.sin(), z]);
        }
        let mut data = upper.clone();
        data.extend(upper.iter().map(|v| -v));
        Ok(Self { dim: 3, data })
    }

    pub fn default_for_dim(dim: usize) -> Result<Self> {
        match dim {
            2 => Self::uniform_2d(DEFAULT_DIRECTIONS_2D),
            3 => Self::sphere_3d(1024),
            _ => Err(Error::InvalidBody(format!("dimension {dim} not supported"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dir(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn antipode(&self, i: usize) -> usize {
        (i + self.len() / 2) % self.len()
    }
}

/// Analytic description carried alongside the support samples.
#[derive(Debug, Clone, PartialEq)]
pub enum BodyForm {
    Ball { center: Vec<f64>, radius: f64 },
    /// Counter-clockwise hull vertices, no three collinear.
    Polygon { vertices: Vec<[f64; 2]> },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2] },
    Generic,
}

#[derive(Debug, Clone)]
pub struct ConvexBody {
    dirs: Arc<DirectionGrid>,
    support: Vec<f64>,
    form: BodyForm,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn make_ball(center: &[f64], radius: f64, dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidBody(format!("ball radius must be positive, got {radius}")));
    }
    if center.len() != dirs.dim() {
        return Err(Error::InvalidBody("ball center has the wrong dimension".into()));
    }
    let support = dirs.iter().map(|th| dot(center, th) + radius).collect();
    Ok(ConvexBody {
        dirs: dirs.clone(),
        support,
        form: BodyForm::Ball { center: center.to_vec(), radius },
    })
}

pub fn make_polygon(vertices: &[[f64; 2]], dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    if dirs.dim() != 2 {
        return Err(Error::InvalidBody("polygons require a planar direction grid".into()));
    }
    if vertices.len() < 3 {
        return Err(Error::InvalidBody("a polygon needs at least 3 vertices".into()));
    }
    let hull = convex_hull(vertices);
    if hull.len() < 3 {
        return Err(Error::InvalidBody("polygon vertices are collinear".into()));
    }
    let support = dirs
        .iter()
        .map(|th| hull.iter().map(|v| v[0] * th[0] + v[1] * th[1]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(ConvexBody { dirs: dirs.clone(), support, form: BodyForm::Polygon { vertices: hull } })
}

/// Axis-aligned ellipse; support `<c, θ> + sqrt(a² θ₁² + b² θ₂²)`.
pub fn make_ellipse(center: [f64; 2], semi_axes: [f64; 2], dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    if dirs.dim() != 2 {
        return Err(Error::InvalidBody("ellipses require a planar direction grid".into()));
    }
    let [a, b] = semi_axes;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidBody(format!("semi-axes must be positive, got {semi_axes:?}")));
    }
    let support = dirs
        .iter()
        .map(|th| center[0] * th[0] + center[1] * th[1] + (a * a * th[0] * th[0] + b * b * th[1] * th[1]).sqrt())
        .collect();
    Ok(ConvexBody { dirs: dirs.clone(), support, form: BodyForm::Ellipse { center, semi_axes } })
}

/// Body given only by support samples. In the plane the samples must be
/// consistent: the halfspace intersection must reproduce them.
pub fn make_generic(support: Vec<f64>, dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    if support.len() != dirs.len() {
        return Err(Error::InvalidBody("support sample count does not match the direction grid".into()));
    }
    let body = ConvexBody { dirs: dirs.clone(), support, form: BodyForm::Generic };
    if dirs.dim() == 2 {
        let err = body.consistency_error()?;
        if err > 1e-8 * (1.0 + body.diameter()) {
            return Err(Error::InvalidBody(format!(
                "support samples are not those of a convex body (mismatch {err:.3e})"
            )));
        }
    }
    Ok(body)
}

/// `(1 - λ) A + λ B`, computed on the support samples.
pub fn minkowski_combination(a: &ConvexBody, b: &ConvexBody, lambda: f64) -> Result<ConvexBody> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidBody(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    a.check_shared(b)?;
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }
    let support: Vec<f64> = a
        .support
        .iter()
        .zip(&b.support)
        .map(|(ha, hb)| (1.0 - lambda) * ha + lambda * hb)
        .collect();
    let form = match (&a.form, &b.form) {
        (BodyForm::Ball { center: ca, radius: ra }, BodyForm::Ball { center: cb, radius: rb }) => BodyForm::Ball {
            center: ca.iter().zip(cb).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect(),
            radius: (1.0 - lambda) * ra + lambda * rb,
        },
        (fa, fb) if fa == fb => fa.clone(),
        _ => BodyForm::Generic,
    };
    Ok(ConvexBody { dirs: a.dirs.clone(), support, form })
}

/// `ρ A + ξ`.
pub fn scale_translate(a: &ConvexBody, rho: f64, xi: &[f64]) -> Result<ConvexBody> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidBody(format!("dilation factor must be positive, got {rho}")));
    }
    if xi.len() != a.dim() {
        return Err(Error::InvalidBody("translation has the wrong dimension".into()));
    }
    let support = a
        .dirs
        .iter()
        .zip(&a.support)
        .map(|(th, h)| rho * h + dot(xi, th))
        .collect();
    let form = match &a.form {
        BodyForm::Ball { center, radius } => BodyForm::Ball {
            center: center.iter().zip(xi).map(|(c, x)| rho * c + x).collect(),
            radius: rho * radius,
        },
        BodyForm::Polygon { vertices } => BodyForm::Polygon {
            vertices: vertices.iter().map(|v| [rho * v[0] + xi[0], rho * v[1] + xi[1]]).collect(),
        },
        BodyForm::Ellipse { center, semi_axes } => BodyForm::Ellipse {
            center: [rho * center[0] + xi[0], rho * center[1] + xi[1]],
            semi_axes: [rho * semi_axes[0], rho * semi_axes[1]],
        },
        BodyForm::Generic => BodyForm::Generic,
    };
    Ok(ConvexBody { dirs: a.dirs.clone(), support, form })
}

/// Least-squares dilation and translation mapping `A` onto `B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomothetyFit {
    pub rho: f64,
    pub xi: Vec<f64>,
    /// `max_θ |h_B(θ) - ρ h_A(θ) - <ξ, θ>|`.
    pub residual: f64,
    /// Diameter of `B`, the scale against which `residual` is judged.
    pub scale: f64,
}

impl HomothetyFit {
    pub fn relative_residual(&self) -> f64 {
        self.residual / self.scale
    }

    pub fn is_homothetic(&self, rel_tol: f64) -> bool {
        self.residual <= rel_tol * self.scale
    }
}

pub fn homothety_fit(a: &ConvexBody, b: &ConvexBody) -> Result<HomothetyFit> {
    a.check_shared(b)?;
    let dim = a.dim();
    let k = dim + 1;
    let mut normal = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    let mut row = vec![0.0; k];
    for ((th, ha), hb) in a.dirs.iter().zip(&a.support).zip(&b.support) {
        row[0] = *ha;
        row[1..].copy_from_slice(th);
        for i in 0..k {
            rhs[i] += row[i] * hb;
            for j in 0..k {
                normal[i * k + j] += row[i] * row[j];
            }
        }
    }
    let x = solve_dense(normal, rhs)
        .ok_or_else(|| Error::InvalidBody("degenerate support data in homothety fit".into()))?;
    let rho = x[0];
    let xi = x[1..].to_vec();
    let residual = a
        .dirs
        .iter()
        .zip(&a.support)
        .zip(&b.support)
        .map(|((th, ha), hb)| (hb - rho * ha - dot(&xi, th)).abs())
        .fold(0.0, f64::max);
    if !(rho > 0.0) {
        return Err(Error::NotHomothetic { rho, residual });
    }
    Ok(HomothetyFit { rho, xi, residual, scale: b.diameter() })
}

pub fn contains(a: &ConvexBody, x: &[f64]) -> bool {
    a.contains(x)
}

impl ConvexBody {
    pub fn dim(&self) -> usize {
        self.dirs.dim()
    }

    pub fn dirs(&self) -> &Arc<DirectionGrid> {
        &self.dirs
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn form(&self) -> &BodyForm {
        &self.form
    }

    fn check_shared(&self, other: &ConvexBody) -> Result<()> {
        if Arc::ptr_eq(&self.dirs, &other.dirs) || *self.dirs == *other.dirs {
            Ok(())
        } else {
            Err(Error::MismatchedDirections)
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.form {
            BodyForm::Ball { center, radius } => {
                let d: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d.sqrt() <= radius + CONTAINS_SLACK
            }
            BodyForm::Ellipse { center, semi_axes } => {
                let u = (x[0] - center[0]) / semi_axes[0];
                let v = (x[1] - center[1]) / semi_axes[1];
                u * u + v * v <= 1.0 + CONTAINS_SLACK
            }
            BodyForm::Polygon { vertices } => {
                let n = vertices.len();
                (0..n).all(|i| {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    let cross = (b[0] - a[0]) * (x[1] - a[1]) - (b[1] - a[1]) * (x[0] - a[0]);
                    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                    cross >= -CONTAINS_SLACK * len
                })
            }
            BodyForm::Generic => self
                .dirs
                .iter()
                .zip(&self.support)
                .all(|(th, h)| dot(x, th) <= h + CONTAINS_SLACK),
        }
    }

    /// For `outside` not in the body and `inside` in it, the fraction
    /// `s ∈ [0, 1]` such that `outside + s (inside - outside)` lies on the
    /// boundary.
    pub fn boundary_fraction(&self, outside: &[f64], inside: &[f64]) -> f64 {
        let d: Vec<f64> = inside.iter().zip(outside).map(|(b, a)| b - a).collect();
        let s = match &self.form {
            BodyForm::Ball { center, radius } => {
                let rel: Vec<f64> = outside.iter().zip(center).map(|(a, c)| a - c).collect();
                entry_of_unit_quadric(&rel, &d, *radius)
            }
            BodyForm::Ellipse { center, semi_axes } => {
                let rel = [(outside[0] - center[0]) / semi_axes[0], (outside[1] - center[1]) / semi_axes[1]];
                let dd = [d[0] / semi_axes[0], d[1] / semi_axes[1]];
                entry_of_unit_quadric(&rel, &dd, 1.0)
            }
            BodyForm::Polygon { vertices } => {
                let n = vertices.len();
                let mut s: f64 = 0.0;
                for i in 0..n {
                    let a = vertices[i];
                    let b = vertices[(i + 1) % n];
                    // outward normal of a counter-clockwise edge
                    let nrm = [b[1] - a[1], a[0] - b[0]];
                    let c = nrm[0] * a[0] + nrm[1] * a[1];
                    s = s.max(halfspace_entry(&nrm, c, outside, &d));
                }
                s
            }
            BodyForm::Generic => self
                .dirs
                .iter()
                .zip(&self.support)
                .fold(0.0f64, |s, (th, h)| s.max(halfspace_entry(th, *h, outside, &d))),
        };
        s.clamp(0.0, 1.0)
    }

    /// Exact support value in an arbitrary unit direction where an analytic
    /// form or a planar halfspace polygon is available.
    pub fn support_at(&self, theta: &[f64]) -> Option<f64> {
        match &self.form {
            BodyForm::Ball { center, radius } => Some(dot(center, theta) + radius * norm(theta)),
            BodyForm::Ellipse { center, semi_axes } => Some(
                center[0] * theta[0]
                    + center[1] * theta[1]
                    + (semi_axes[0].powi(2) * theta[0].powi(2) + semi_axes[1].powi(2) * theta[1].powi(2)).sqrt(),
            ),
            BodyForm::Polygon { vertices } => Some(
                vertices
                    .iter()
                    .map(|v| v[0] * theta[0] + v[1] * theta[1])
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            BodyForm::Generic if self.dim() == 2 => self
                .halfspace_vertices()
                .ok()
                .map(|vs| vs.iter().map(|v| v[0] * theta[0] + v[1] * theta[1]).fold(f64::NEG_INFINITY, f64::max)),
            BodyForm::Generic => None,
        }
    }

    /// Vertices of the planar halfspace intersection `∩ {<x, θ_i> <= h_i}`,
    /// taken as intersections of consecutive supporting lines.
    pub fn halfspace_vertices(&self) -> Result<Vec<[f64; 2]>> {
        if self.dim() != 2 {
            return Err(Error::InvalidBody("halfspace polygon is planar only".into()));
        }
        let m = self.dirs.len();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let j = (i + 1) % m;
            let a = self.dirs.dir(i);
            let b = self.dirs.dir(j);
            let det = a[0] * b[1] - a[1] * b[0];
            if det.abs() < 1e-14 {
                return Err(Error::InvalidBody("direction grid has parallel neighbours".into()));
            }
            let (ha, hb) = (self.support[i], self.support[j]);
            out.push([(ha * b[1] - hb * a[1]) / det, (a[0] * hb - b[0] * ha) / det]);
        }
        Ok(out)
    }

    /// Largest mismatch between the stored samples and the support of their
    /// halfspace intersection (planar bodies only).
    pub fn consistency_error(&self) -> Result<f64> {
        let vs = self.halfspace_vertices()?;
        Ok(self
            .dirs
            .iter()
            .zip(&self.support)
            .map(|(th, h)| {
                let s = vs.iter().map(|v| v[0] * th[0] + v[1] * th[1]).fold(f64::NEG_INFINITY, f64::max);
                (s - h).abs()
            })
            .fold(0.0, f64::max))
    }

    pub fn width(&self, i: usize) -> f64 {
        self.support[i] + self.support[self.dirs.antipode(i)]
    }

    pub fn diameter(&self) -> f64 {
        match &self.form {
            BodyForm::Ball { radius, .. } => 2.0 * radius,
            BodyForm::Ellipse { semi_axes, .. } => 2.0 * semi_axes[0].max(semi_axes[1]),
            BodyForm::Polygon { vertices } => {
                let mut d: f64 = 0.0;
                for a in vertices {
                    for b in vertices {
                        d = d.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                    }
                }
                d
            }
            BodyForm::Generic => (0..self.dirs.len()).map(|i| self.width(i)).fold(0.0, f64::max),
        }
    }

    /// Steiner point `(n / M) Σ h(θ_i) θ_i`; equivariant under translations
    /// and dilations.
    pub fn steiner_point(&self) -> Vec<f64> {
        if let BodyForm::Ball { center, .. } = &self.form {
            return center.clone();
        }
        let dim = self.dim();
        let mut c = vec![0.0; dim];
        for (th, h) in self.dirs.iter().zip(&self.support) {
            for a in 0..dim {
                c[a] += h * th[a];
            }
        }
        let f = dim as f64 / self.dirs.len() as f64;
        c.iter_mut().for_each(|x| *x *= f);
        c
    }

    /// Radius of the smallest ball about `center` containing the body.
    pub fn bounding_radius(&self, center: &[f64]) -> f64 {
        match &self.form {
            BodyForm::Ball { center: c, radius } => {
                radius + c.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
            BodyForm::Polygon { vertices } => max_distance(vertices, center),
            BodyForm::Ellipse { center: c, semi_axes } => {
                let pts: Vec<[f64; 2]> = (0..4096)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 4096.0;
                        [c[0] + semi_axes[0] * a.cos(), c[1] + semi_axes[1] * a.sin()]
                    })
                    .collect();
                max_distance(&pts, center)
            }
            BodyForm::Generic if self.dim() == 2 => match self.halfspace_vertices() {
                Ok(vs) => max_distance(&vs, center),
                Err(_) => self.max_centered_support(center),
            },
            BodyForm::Generic => self.max_centered_support(center),
        }
    }

    fn max_centered_support(&self, center: &[f64]) -> f64 {
        self.dirs
            .iter()
            .zip(&self.support)
            .map(|(th, h)| h - dot(center, th))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest axis-aligned box `[lo, hi]` containing the body, read off the
    /// support in the coordinate directions.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let mut lo = vec![0.0; dim];
        let mut hi = vec![0.0; dim];
        for a in 0..dim {
            let mut e = vec![0.0; dim];
            e[a] = 1.0;
            let plus = self.support_at(&e);
            e[a] = -1.0;
            let minus = self.support_at(&e);
            let (p, m) = match (plus, minus) {
                (Some(p), Some(m)) => (p, m),
                _ => {
                    let c = self.steiner_point();
                    let r = self.bounding_radius(&c);
                    (c[a] + r, r - c[a])
                }
            };
            hi[a] = p;
            lo[a] = -m;
        }
        (lo, hi)
    }
}

fn max_distance(points: &[[f64; 2]], center: &[f64]) -> f64 {
    points
        .iter()
        .map(|v| ((v[0] - center[0]).powi(2) + (v[1] - center[1]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

/// Parameter at which the segment `a + s d` enters `{<x, n> <= c}`; zero if
/// `a` already satisfies the constraint.
fn halfspace_entry(n: &[f64], c: f64, a: &[f64], d: &[f64]) -> f64 {
    let va = dot(n, a) - c;
    if va <= 0.0 {
        return 0.0;
    }
    let slope = dot(n, d);
    if slope >= 0.0 {
        return 1.0;
    }
    va / -slope
}

/// Entry parameter of `rel + s d` into the centred ball of radius `r`
/// (ellipses are passed in axis-normalized coordinates).
fn entry_of_unit_quadric(rel: &[f64], d: &[f64], r: f64) -> f64 {
    let a = dot(d, d);
    let b = 2.0 * dot(rel, d);
    let c = dot(rel, rel) - r * r;
    if c <= 0.0 {
        return 0.0;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return 1.0;
    }
    // Numerically stable smaller root.
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let r1 = q / a;
    let r2 = c / q;
    let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    if lo >= 0.0 {
        lo
    } else {
        hi
    }
}

/// Andrew's monotone chain; returns counter-clockwise vertices without
/// collinear points.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Convex set bounded by the `{u = t}` contour.
///
/// Crossings on grid edges are located by cubic (or, next to the body,
/// quadratic) interpolation along the grid line through nodes outside the
/// body, and linearly on edges touching the body. The returned body has the hull of the crossings as its polygon
/// form; its sampled support is refined by a parabola through the extreme
/// hull vertex and its neighbours, which removes most of the chord error.
pub fn level_set_extract(u: &ScalarField, t: f64, dirs: &Arc<DirectionGrid>) -> Result<ConvexBody> {
    let fail = |reason: &str| Error::LevelSet { t, reason: reason.to_string() };
    if u.dim() != 2 || dirs.dim() != 2 {
        return Err(fail("level-set extraction is implemented for planar grids only"));
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(fail("level must lie strictly between 0 and 1"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &tag) in u.values.iter().zip(&u.mask) {
        if tag == NodeTag::Exterior {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if tag == NodeTag::OuterBoundary && v >= t {
            return Err(fail("superlevel set reaches the truncation boundary"));
        }
    }
    if !(t > lo && t < hi) {
        return Err(fail("level is outside the range of exterior values"));
    }
    let grid = &u.grid;
    let shape = grid.shape();
    let strides = grid.strides();
    let mut points = Vec::new();
    for j in 0..shape[1] {
        for i in 0..shape[0] {
            let ij = [i, j];
            for axis in 0..2 {
                if ij[axis] + 1 >= shape[axis] {
                    continue;
                }
                let a = grid.index([i, j, 0]);
                let b = a + strides[axis];
                let (ua, ub) = (u.values[a], u.values[b]);
                if (ua >= t) == (ub >= t) {
                    continue;
                }
                let usable = |idx: usize| u.mask[idx] != NodeTag::InsideBody;
                let linear = (ua - t) / (ua - ub);
                let mut nodes: Vec<(f64, f64)> = Vec::with_capacity(4);
                if usable(a) && usable(b) {
                    if ij[axis] >= 1 && usable(a - strides[axis]) {
                        nodes.push((-1.0, u.values[a - strides[axis]]));
                    }
                    nodes.push((0.0, ua));
                    nodes.push((1.0, ub));
                    if ij[axis] + 2 < shape[axis] && usable(b + strides[axis]) {
                        nodes.push((2.0, u.values[b + strides[axis]]));
                    }
                }
                let s = if nodes.len() >= 3 { polynomial_crossing(&nodes, t, linear) } else { linear };
                let mut x = [grid.node_coord([i, j, 0], 0), grid.node_coord([i, j, 0], 1)];
                x[axis] += s * grid.spacing(axis);
                points.push(x);
            }
        }
    }
    if points.len() < 3 {
        return Err(fail("level set is empty on this grid"));
    }
    let polygon = make_polygon(&points, dirs).map_err(|_| fail("level set is degenerate on this grid"))?;
    let BodyForm::Polygon { vertices } = &polygon.form else {
        return Ok(polygon);
    };
    let support = dirs.iter().map(|th| refined_support(vertices, th)).collect();
    Ok(ConvexBody { dirs: Arc::clone(dirs), support, form: polygon.form.clone() })
}

/// Root in `[0, 1]` of the interpolating polynomial through `nodes` minus
/// `t`, by Newton from the linear estimate `s0`. Falls back to `s0` if the
/// iteration leaves the interval or the nodes straddle a crossing outside it.
fn polynomial_crossing(nodes: &[(f64, f64)], t: f64, s0: f64) -> f64 {
    let eval = |s: f64| -> (f64, f64) {
        // value and derivative of the Lagrange form
        let mut p = 0.0;
        let mut dp = 0.0;
        for (k, &(sk, fk)) in nodes.iter().enumerate() {
            let mut basis = 1.0;
            let mut dbasis = 0.0;
            for (m, &(sm, _)) in nodes.iter().enumerate() {
                if m == k {
                    continue;
                }
                let w = 1.0 / (sk - sm);
                dbasis = dbasis * (s - sm) * w + basis * w;
                basis *= (s - sm) * w;
            }
            p += fk * basis;
            dp += fk * dbasis;
        }
        (p, dp)
    };
    let mut s = s0;
    for _ in 0..20 {
        let (p, dp) = eval(s);
        if dp == 0.0 {
            return s0;
        }
        let step = (p - t) / dp;
        s -= step;
        if !(-0.01..=1.01).contains(&s) {
            return s0;
        }
        if step.abs() < 1e-14 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Support of a dense convex polygon at `theta`, with a parabola fitted
/// through the extreme vertex and its two neighbours.
fn refined_support(vertices: &[[f64; 2]], theta: &[f64]) -> f64 {
    let m = vertices.len();
    let along = |v: &[f64; 2]| v[0] * theta[0] + v[1] * theta[1];
    let across = |v: &[f64; 2]| -v[0] * theta[1] + v[1] * theta[0];
    let (k, best) = vertices
        .iter()
        .enumerate()
        .map(|(k, v)| (k, along(v)))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    if m < 5 {
        return best;
    }
    let prev = &vertices[(k + m - 1) % m];
    let next = &vertices[(k + 1) % m];
    let (x0, y0) = (across(prev), along(prev));
    let (x1, y1) = (across(&vertices[k]), best);
    let (x2, y2) = (across(next), along(next));
    let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
    if denom.abs() < 1e-300 {
        return best;
    }
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
    if !(a < 0.0) {
        return best;
    }
    let xv = -b / (2.0 * a);
    let (lo, hi) = if x0 < x2 { (x0, x2) } else { (x2, x0) };
    if xv < lo || xv > hi {
        return best;
    }
    let c = y1 - a * x1 * x1 - b * x1;
    (a * xv * xv + b * xv + c).max(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridSpec, NodeTag};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dirs() -> Arc<DirectionGrid> {
        Arc::new(DirectionGrid::uniform_2d(512).unwrap())
    }

    fn square(d: &Arc<DirectionGrid>) -> ConvexBody {
        make_polygon(&[[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]], d).unwrap()
    }

    #[test]
    fn direction_grids_are_unit_and_antipodal() {
        for g in [DirectionGrid::uniform_2d(512).unwrap(), DirectionGrid::sphere_3d(256).unwrap()] {
            for i in 0..g.len() {
                assert!((norm(g.dir(i)) - 1.0).abs() < 1e-12);
                let j = g.antipode(i);
                for a in 0..g.dim() {
                    assert_abs_diff_eq!(g.dir(i)[a], -g.dir(j)[a], epsilon = 1e-12);
                }
            }
        }
        assert!(DirectionGrid::uniform_2d(32).is_err());
    }

    #[test]
    fn ball_support_values() {
        let d = dirs();
        let unit = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        assert!(unit.support().iter().all(|h| (h - 1.0).abs() < 1e-15));
        let b = make_ball(&[1.0, 0.0], 2.0, &d).unwrap();
        assert_abs_diff_eq!(b.support()[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b.support()[256], 1.0, epsilon = 1e-14);
        let twice = make_ball(&[0.0, 0.0], 2.0, &d).unwrap();
        for (a, b) in twice.support().iter().zip(unit.support()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-14);
        }
        assert!(make_ball(&[0.0, 0.0], 0.0, &d).is_err());
    }

    #[test]
    fn polygon_support_values() {
        let d = dirs();
        let sq = square(&d);
        assert_abs_diff_eq!(sq.support()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sq.support()[64], 2f64.sqrt(), epsilon = 1e-14);
        let tri = make_polygon(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &d).unwrap();
        assert_abs_diff_eq!(tri.support()[256], 0.0, epsilon = 1e-14);
        let with_interior = make_polygon(
            &[[-1.0, -1.0], [1.0, -1.0], [0.2, 0.1], [1.0, 1.0], [-1.0, 1.0], [0.0, 0.0], [0.2, 0.1]],
            &d,
        )
        .unwrap();
        assert_eq!(with_interior.support(), sq.support());
        assert_eq!(with_interior.form(), sq.form());
        assert!(make_polygon(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], &d).is_err());
    }

    #[test]
    fn minkowski_combination_examples() {
        let d = dirs();
        let a = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        let c = [2.0, -1.0];
        let b = make_ball(&c, 3.0, &d).unwrap();
        assert_eq!(minkowski_combination(&a, &b, 0.0).unwrap().support(), a.support());
        assert_eq!(minkowski_combination(&a, &b, 1.0).unwrap().support(), b.support());
        let mid = minkowski_combination(&a, &b, 0.5).unwrap();
        let expect = make_ball(&[1.0, -0.5], 2.0, &d).unwrap();
        for (x, y) in mid.support().iter().zip(expect.support()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-13);
        }
        assert_eq!(mid.form(), expect.form());
        let sq = square(&d);
        let self_combo = minkowski_combination(&sq, &sq, 0.3).unwrap();
        for (x, y) in self_combo.support().iter().zip(sq.support()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
        let other = Arc::new(DirectionGrid::uniform_2d(256).unwrap());
        let foreign = make_ball(&[0.0, 0.0], 1.0, &other).unwrap();
        assert!(matches!(minkowski_combination(&a, &foreign, 0.5), Err(Error::MismatchedDirections)));
    }

    #[test]
    fn scale_translate_examples() {
        let d = dirs();
        let sq = square(&d);
        assert_eq!(scale_translate(&sq, 1.0, &[0.0, 0.0]).unwrap().support(), sq.support());
        let big = scale_translate(&sq, 2.0, &[0.0, 0.0]).unwrap();
        let expect = make_polygon(&[[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]], &d).unwrap();
        for (x, y) in big.support().iter().zip(expect.support()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
        let ball = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        let moved = scale_translate(&ball, 3.0, &[1.0, 0.0]).unwrap();
        assert_eq!(moved.form(), &BodyForm::Ball { center: vec![1.0, 0.0], radius: 3.0 });
        assert!(scale_translate(&ball, 0.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn homothety_fit_examples() {
        let d = dirs();
        let a = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        let fit = homothety_fit(&a, &a).unwrap();
        assert_abs_diff_eq!(fit.rho, 1.0, epsilon = 1e-12);
        assert!(fit.residual < 1e-12);
        let b = make_ball(&[1.0, 0.0], 2.0, &d).unwrap();
        let fit = homothety_fit(&a, &b).unwrap();
        assert_abs_diff_eq!(fit.rho, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.xi[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.xi[1], 0.0, epsilon = 1e-12);
        assert!(fit.residual < 1e-12);
    }

    /// Independent oracle: minimize the least-squares objective over (ρ, ξ)
    /// by coordinate-free brute force. For a centred disk against a centred
    /// ellipse symmetry forces ξ = 0, so a 1D scan over ρ suffices.
    #[test]
    fn disk_versus_ellipse_is_far_from_homothetic() {
        let d = dirs();
        let disk = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        let ell = make_ellipse([0.0, 0.0], [2.0, 1.0], &d).unwrap();
        let objective = |rho: f64| -> f64 {
            ell.support().iter().zip(disk.support()).map(|(hb, ha)| (hb - rho * ha).powi(2)).sum()
        };
        let (mut best_rho, mut best) = (0.0, f64::INFINITY);
        for k in 0..=200_000 {
            let rho = 1.0 + k as f64 * 1e-5;
            let v = objective(rho);
            if v < best {
                best = v;
                best_rho = rho;
            }
        }
        let oracle_residual = ell
            .support()
            .iter()
            .zip(disk.support())
            .map(|(hb, ha)| (hb - best_rho * ha).abs())
            .fold(0.0, f64::max);
        let fit = homothety_fit(&disk, &ell).unwrap();
        assert_abs_diff_eq!(fit.rho, best_rho, epsilon = 1e-5);
        assert_abs_diff_eq!(fit.residual, oracle_residual, epsilon = 1e-4);
        // diameter of the ellipse is 4
        assert!(fit.residual >= 0.1 * 4.0, "residual {}", fit.residual);
        assert!(!fit.is_homothetic(DEFAULT_HOMOTHETY_TOL));
    }

    #[test]
    fn contains_examples() {
        let d = dirs();
        let ball = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        assert!(contains(&ball, &[0.0, 0.0]));
        assert!(!contains(&ball, &[2.0, 0.0]));
        let sq = square(&d);
        assert!(contains(&sq, &[1.0, 1.0]));
        let generic = make_generic(sq.support().to_vec(), &d).unwrap();
        assert!(contains(&generic, &[1.0, 1.0]));
        assert!(!contains(&generic, &[1.0 + 1e-6, 0.0]));
    }

    #[test]
    fn generic_rejects_inconsistent_support() {
        let d = dirs();
        let mut h = vec![1.0; d.len()];
        h[10] = 1.5;
        assert!(make_generic(h, &d).is_err());
    }

    #[test]
    fn boundary_fraction_for_each_form() {
        let d = dirs();
        let ball = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
        assert_abs_diff_eq!(ball.boundary_fraction(&[2.0, 0.0], &[0.0, 0.0]), 0.5, epsilon = 1e-14);
        let ell = make_ellipse([0.0, 0.0], [2.0, 1.0], &d).unwrap();
        assert_abs_diff_eq!(ell.boundary_fraction(&[3.0, 0.0], &[1.0, 0.0]), 0.5, epsilon = 1e-14);
        let sq = square(&d);
        assert_abs_diff_eq!(sq.boundary_fraction(&[1.5, 0.3], &[0.5, 0.3]), 0.5, epsilon = 1e-14);
        let gen = make_generic(sq.support().to_vec(), &d).unwrap();
        assert_abs_diff_eq!(gen.boundary_fraction(&[1.5, 0.3], &[0.5, 0.3]), 0.5, epsilon = 1e-12);
    }

    fn radial_field(q: f64, half_width: f64, cells: usize) -> ScalarField {
        let grid = GridSpec::cube(&[0.0, 0.0], half_width, cells).unwrap();
        let n = grid.node_count();
        let mut values = vec![0.0; n];
        let mut mask = vec![NodeTag::Exterior; n];
        for idx in 0..n {
            let x = grid.node_position(idx);
            let r = norm(&x);
            if r <= 1.0 {
                values[idx] = 1.0;
                mask[idx] = NodeTag::InsideBody;
            } else {
                values[idx] = r.powf(-q);
            }
            if grid.is_boundary_node(grid.multi_index(idx)) {
                mask[idx] = NodeTag::OuterBoundary;
            }
        }
        ScalarField::new(grid, values, mask).unwrap()
    }

    #[test]
    fn level_set_of_radial_fields() {
        let d = dirs();
        let u = radial_field(1.0, 8.0, 256);
        let h = u.grid.spacing(0);
        let body = level_set_extract(&u, 0.5, &d).unwrap();
        let target = make_ball(&[0.0, 0.0], 2.0, &d).unwrap();
        let err = body
            .support()
            .iter()
            .zip(target.support())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.1 * h, "support error {err}");
        let fit = homothety_fit(&target, &body).unwrap();
        assert!(fit.residual <= 2.0 * h);

        let u3 = radial_field(3.0, 4.0, 256);
        let body = level_set_extract(&u3, 0.125, &d).unwrap();
        for s in body.support() {
            assert!((s - 2.0).abs() < 0.1 * u3.grid.spacing(0));
        }

        assert!(level_set_extract(&u, 1.0, &d).is_err());
        assert!(level_set_extract(&u, 0.1, &d).is_err());
    }

    proptest! {
        #[test]
        fn support_is_minkowski_linear(lambda in 0.0f64..=1.0, cx in -2.0f64..2.0, a in 0.2f64..3.0, b in 0.2f64..3.0) {
            let d = dirs();
            let e = make_ellipse([cx, 0.5], [a, b], &d).unwrap();
            let sq = square(&d);
            let combo = minkowski_combination(&e, &sq, lambda).unwrap();
            for i in 0..d.len() {
                let expect = (1.0 - lambda) * e.support()[i] + lambda * sq.support()[i];
                prop_assert!((combo.support()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn homothety_recovers_scale_and_shift(rho in 0.1f64..10.0, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let d = dirs();
            for body in [square(&d), make_ellipse([0.3, -0.2], [1.5, 0.7], &d).unwrap()] {
                let image = scale_translate(&body, rho, &[x, y]).unwrap();
                let fit = homothety_fit(&body, &image).unwrap();
                prop_assert!((fit.rho - rho).abs() < 1e-9 * rho);
                prop_assert!((fit.xi[0] - x).abs() < 1e-9 * (1.0 + rho));
                prop_assert!((fit.xi[1] - y).abs() < 1e-9 * (1.0 + rho));
                prop_assert!(fit.residual <= 1e-9);
            }
        }

        #[test]
        fn containment_respects_inclusion(px in -3.0f64..3.0, py in -3.0f64..3.0, grow in 0.0f64..1.0) {
            let d = dirs();
            let inner = make_ellipse([0.1, 0.0], [1.2, 0.8], &d).unwrap();
            let disk = make_ball(&[0.0, 0.0], 1.0, &d).unwrap();
            // inner + grow * disk contains inner
            let outer_support: Vec<f64> = inner.support().iter().zip(disk.support()).map(|(a, b)| a + grow * b).collect();
            let outer = make_generic(outer_support, &d).unwrap();
            let inner_generic = make_generic(inner.support().to_vec(), &d).unwrap();
            if contains(&inner, &[px, py]) {
                prop_assert!(contains(&outer, &[px, py]));
            }
            if contains(&inner_generic, &[px, py]) {
                prop_assert!(contains(&outer, &[px, py]));
            }
        }
    }
}
