//! Concavity numbers of quasi-concave potentials.
//!
//! Two independent estimators: second differences of the field along sampled
//! directions, and differences of the level-set support function in the
//! level. A direct midpoint test of `u^alpha` complements both.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{level_set_extract, DirectionGrid};
use crate::model::{NodeTag, ScalarField};
use crate::{Error, Result};

pub const DEFAULT_DELTA: f64 = 1e-3;
pub const DEFAULT_BAND: usize = 3;
pub const DEFAULT_LEVEL_COUNT: usize = 17;
pub const DEFAULT_LEVEL_RANGE: (f64, f64) = (0.1, 0.9);
/// Level sets must stay inside `{u < t}` near the box by this factor over the
/// largest boundary value.
pub const LEVEL_FLOOR_FACTOR: f64 = 1.25;
pub const MAX_EXCLUDED_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointwiseEstimate {
    pub alpha: f64,
    pub samples_used: usize,
    /// Fraction of (point, direction) pairs dropped by the gradient floor.
    pub excluded_fraction: f64,
    /// Node and direction attaining the supremum.
    pub argmax_point: Vec<f64>,
    pub argmax_direction: Vec<f64>,
}

/// Exterior nodes at least `band` cells from the body and the box with
/// `u >= floor`.
pub fn interior_samples(u: &ScalarField, band: usize, floor: f64) -> Vec<usize> {
    u.interior_exterior_nodes(band)
        .into_iter()
        .filter(|&i| u.values[i] >= floor)
        .collect()
}

/// Smallest level whose superlevel set keeps clear of the box.
pub fn level_floor(u: &ScalarField) -> f64 {
    let boundary_max = u
        .values
        .iter()
        .zip(&u.mask)
        .filter(|(_, t)| **t == NodeTag::OuterBoundary)
        .map(|(v, _)| *v)
        .fold(0.0, f64::max);
    LEVEL_FLOOR_FACTOR * boundary_max
}

/// `1 - sup v v_θθ / v_θ²` over `samples` and `dirs`, by central differences.
pub fn concavity_number_pointwise(
    u: &ScalarField,
    samples: &[usize],
    dirs: &DirectionGrid,
    delta: f64,
) -> Result<PointwiseEstimate> {
    let dim = u.dim();
    if dirs.dim() != dim {
        return Err(Error::MismatchedDirections);
    }
    if samples.is_empty() {
        return Err(Error::Concavity("no sample points".into()));
    }
    let derivs: Vec<([f64; 3], [[f64; 3]; 3])> = samples.iter().map(|&i| derivatives(u, i)).collect();
    let mean_grad = derivs
        .iter()
        .map(|(g, _)| g.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / samples.len() as f64;
    let floor = delta * mean_grad;
    let mut best = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize);
    let mut excluded = 0usize;
    let mut used_points = 0usize;
    for (k, (&idx, (g, hess))) in samples.iter().zip(&derivs).enumerate() {
        let v = u.values[idx];
        let mut any = false;
        for (d, th) in dirs.iter().enumerate() {
            let vt: f64 = (0..dim).map(|a| g[a] * th[a]).sum();
            if vt.abs() < floor {
                excluded += 1;
                continue;
            }
            any = true;
            let mut vtt = 0.0;
            for a in 0..dim {
                for b in 0..dim {
                    vtt += th[a] * hess[a][b] * th[b];
                }
            }
            let ratio = v * vtt / (vt * vt);
            if ratio > best {
                best = ratio;
                arg = (k, d);
            }
        }
        if any {
            used_points += 1;
        }
    }
    let total = samples.len() * dirs.len();
    let excluded_fraction = excluded as f64 / total as f64;
    if used_points == 0 {
        return Err(Error::Concavity("every sample was excluded by the gradient floor".into()));
    }
    Ok(PointwiseEstimate {
        alpha: 1.0 - best,
        samples_used: used_points,
        excluded_fraction,
        argmax_point: u.grid.node_position(samples[arg.0]),
        argmax_direction: dirs.dir(arg.1).to_vec(),
    })
}

/// Central-difference gradient and Hessian at an interior node.
fn derivatives(u: &ScalarField, idx: usize) -> ([f64; 3], [[f64; 3]; 3]) {
    let dim = u.dim();
    let st = u.grid.strides();
    let v = &u.values;
    let mut g = [0.0; 3];
    let mut hess = [[0.0; 3]; 3];
    for a in 0..dim {
        let h = u.grid.spacing(a);
        g[a] = (v[idx + st[a]] - v[idx - st[a]]) / (2.0 * h);
        hess[a][a] = (v[idx + st[a]] - 2.0 * v[idx] + v[idx - st[a]]) / (h * h);
        for b in a + 1..dim {
            let hb = u.grid.spacing(b);
            let pp = v[idx + st[a] + st[b]];
            let pm = v[idx + st[a] - st[b]];
            let mp = v[idx - st[a] + st[b]];
            let mm = v[idx - st[a] - st[b]];
            let c = (pp - pm - mp + mm) / (4.0 * h * hb);
            hess[a][b] = c;
            hess[b][a] = c;
        }
    }
    (g, hess)
}

/// Support values of superlevel sets, `h[θ][k]` for level `t_grid[k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportMatrix {
    #[serde(skip)]
    pub theta_grid: Option<Arc<DirectionGrid>>,
    pub t_grid: Vec<f64>,
    pub h: Vec<Vec<f64>>,
}

impl SupportMatrix {
    /// Largest increase of `h` from one level to the next (should be `<= 0`).
    pub fn max_increase(&self) -> f64 {
        self.h
            .iter()
            .flat_map(|row| row.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_θ h / min_θ h` at level index `k`, after centring on the mean
    /// width point so that translations do not matter.
    pub fn anisotropy(&self, k: usize) -> f64 {
        let Some(dirs) = &self.theta_grid else {
            return f64::NAN;
        };
        let widths: Vec<f64> = (0..dirs.len()).map(|i| self.h[i][k] + self.h[dirs.antipode(i)][k]).collect();
        let max = widths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = widths.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Geometric levels between `lo` and `hi`.
pub fn geometric_levels(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|k| lo * (ratio * k as f64).exp()).collect()
}

/// Levels from `candidates` that lie above [`level_floor`] and below the
/// largest exterior value.
pub fn resolvable_levels(u: &ScalarField, candidates: &[f64]) -> Vec<f64> {
    let floor = level_floor(u);
    let top = u
        .values
        .iter()
        .zip(&u.mask)
        .filter(|(_, t)| **t == NodeTag::Exterior)
        .map(|(v, _)| *v)
        .fold(0.0, f64::max);
    candidates.iter().copied().filter(|&t| t > floor && t < top).collect()
}

pub fn support_matrix(u: &ScalarField, t_grid: &[f64], dirs: &Arc<DirectionGrid>) -> Result<SupportMatrix> {
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Concavity("levels must be strictly increasing".into()));
    }
    let mut h = vec![Vec::with_capacity(t_grid.len()); dirs.len()];
    for &t in t_grid {
        let body = level_set_extract(u, t, dirs)?;
        for (row, v) in h.iter_mut().zip(body.support()) {
            row.push(*v);
        }
    }
    Ok(SupportMatrix { theta_grid: Some(Arc::clone(dirs)), t_grid: t_grid.to_vec(), h })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub alpha: f64,
    pub argmin_direction: usize,
    pub argmin_level: f64,
    pub retained: usize,
    pub excluded_fraction: f64,
    /// `[t, min over directions]` for every interior level.
    pub profile: Vec<[f64; 2]>,
}

/// `inf (1 + t h_tt / h_t)` over directions and interior levels. Written in
/// `s = ln t` this is `h_ss / h_s`, evaluated with three-point differences on
/// the (possibly uneven) level grid.
pub fn alpha_from_support(sm: &SupportMatrix) -> Result<SupportEstimate> {
    let k = sm.t_grid.len();
    if k < 5 {
        return Err(Error::Concavity(format!("{k} levels given, at least 5 required")));
    }
    let s: Vec<f64> = sm.t_grid.iter().map(|t| t.ln()).collect();
    let scale = sm
        .h
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let floor = 1e-9 * scale;
    let mut best = f64::INFINITY;
    let mut arg = (0usize, 0usize);
    let mut retained = 0usize;
    let mut excluded = 0usize;
    let mut per_level = vec![f64::INFINITY; k];
    for (dir, row) in sm.h.iter().enumerate() {
        for j in 1..k - 1 {
            let (dm, dp) = (s[j] - s[j - 1], s[j + 1] - s[j]);
            let fm = (row[j] - row[j - 1]) / dm;
            let fp = (row[j + 1] - row[j]) / dp;
            let hs = (fm * dp + fp * dm) / (dm + dp);
            let hss = 2.0 * (fp - fm) / (dm + dp);
            if hs > floor {
                return Err(Error::QuasiConcavity { h_t: hs / sm.t_grid[j], direction: dir, level: sm.t_grid[j] });
            }
            if hs.abs() <= floor {
                excluded += 1;
                continue;
            }
            retained += 1;
            let a = hss / hs;
            per_level[j] = per_level[j].min(a);
            if a < best {
                best = a;
                arg = (dir, j);
            }
        }
    }
    if retained == 0 {
        return Err(Error::Concavity("no support differences above the floor".into()));
    }
    Ok(SupportEstimate {
        alpha: best,
        argmin_direction: arg.0,
        argmin_level: sm.t_grid[arg.1],
        retained,
        excluded_fraction: excluded as f64 / (retained + excluded) as f64,
        profile: (1..k - 1)
            .filter(|&j| per_level[j].is_finite())
            .map(|j| [sm.t_grid[j], per_level[j]])
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// `u` at the midpoint.
    pub level: f64,
    /// `(w(mid) - (w(x) + w(y)) / 2) / ((w(x) + w(y)) / 2)` with `w = u^alpha`.
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MidpointReport {
    pub alpha: f64,
    pub pairs_tested: usize,
    pub worst: Option<Violation>,
    pub tolerance: f64,
}

impl MidpointReport {
    pub fn max_violation(&self) -> f64 {
        self.worst.as_ref().map_or(f64::NEG_INFINITY, |v| v.magnitude)
    }

    pub fn passes(&self) -> bool {
        self.max_violation() <= self.tolerance
    }
}

/// Random pairs of exterior nodes with `u >= floor`, matched in parity on
/// every axis so that the midpoint is itself a lattice node.
pub fn midpoint_concavity_test(
    u: &ScalarField,
    alpha: f64,
    pair_count: usize,
    seed: u64,
    floor: f64,
    tolerance: f64,
) -> Result<MidpointReport> {
    if !(alpha < 0.0) {
        return Err(Error::Concavity(format!("midpoint test needs a negative exponent, got {alpha}")));
    }
    let dim = u.dim();
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); 1 << dim];
    for (idx, (&v, &tag)) in u.values.iter().zip(&u.mask).enumerate() {
        if tag == NodeTag::Exterior && v >= floor {
            let ijk = u.grid.multi_index(idx);
            let class = (0..dim).map(|a| (ijk[a] & 1) << a).sum::<usize>();
            classes[class].push(idx);
        }
    }
    let weights: Vec<usize> = classes.iter().map(|c| c.len()).collect();
    let total: usize = weights.iter().sum();
    if total < 2 {
        return Err(Error::Concavity("fewer than two admissible nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<Violation> = None;
    let mut tested = 0;
    for _ in 0..pair_count {
        let mut pick = rng.gen_range(0..total);
        let class = weights
            .iter()
            .position(|&w| {
                if pick < w {
                    true
                } else {
                    pick -= w;
                    false
                }
            })
            .unwrap();
        let members = &classes[class];
        if members.len() < 2 {
            continue;
        }
        let pair: Vec<&usize> = members.choose_multiple(&mut rng, 2).collect();
        let (a, b) = (*pair[0], *pair[1]);
        let ia = u.grid.multi_index(a);
        let ib = u.grid.multi_index(b);
        let mut mid = [0usize; 3];
        for ax in 0..3 {
            mid[ax] = (ia[ax] + ib[ax]) / 2;
        }
        let m = u.grid.index(mid);
        let wa = u.values[a].powf(alpha);
        let wb = u.values[b].powf(alpha);
        let wm = u.values[m].powf(alpha);
        let avg = 0.5 * (wa + wb);
        let magnitude = (wm - avg) / avg;
        tested += 1;
        if worst.as_ref().is_none_or(|w| magnitude > w.magnitude) {
            worst = Some(Violation {
                x: u.grid.node_position(a),
                y: u.grid.node_position(b),
                level: u.values[m],
                magnitude,
            });
        }
    }
    Ok(MidpointReport { alpha, pairs_tested: tested, worst, tolerance })
}

/// Both estimators and the midpoint test at one exponent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub alpha_pointwise: f64,
    pub alpha_support: f64,
    pub pointwise: PointwiseEstimate,
    pub support: SupportEstimate,
    pub levels: Vec<f64>,
    pub worst_violation: MidpointReport,
    pub samples_used: usize,
    pub excluded_fraction: f64,
}

impl ConcavityReport {
    pub fn estimator_gap(&self) -> f64 {
        (self.alpha_pointwise - self.alpha_support).abs()
    }
}

#[derive(Debug, Clone)]
pub struct ConcavitySettings {
    pub dirs: Arc<DirectionGrid>,
    pub delta: f64,
    pub band: usize,
    /// Candidate levels; clipped to [`resolvable_levels`].
    pub levels: Vec<f64>,
    pub midpoint_alpha: f64,
    pub pair_count: usize,
    pub seed: u64,
    pub midpoint_tolerance: f64,
}

impl ConcavitySettings {
    pub fn new(dirs: Arc<DirectionGrid>, midpoint_alpha: f64, seed: u64) -> Self {
        Self {
            dirs,
            delta: DEFAULT_DELTA,
            band: DEFAULT_BAND,
            levels: geometric_levels(DEFAULT_LEVEL_RANGE.0, DEFAULT_LEVEL_RANGE.1, DEFAULT_LEVEL_COUNT),
            midpoint_alpha,
            pair_count: 20_000,
            seed,
            midpoint_tolerance: 1e-3,
        }
    }
}

pub fn concavity_report(u: &ScalarField, settings: &ConcavitySettings) -> Result<ConcavityReport> {
    let floor = level_floor(u);
    let samples = interior_samples(u, settings.band, floor);
    let pointwise = concavity_number_pointwise(u, &samples, &settings.dirs, settings.delta)?;
    if pointwise.excluded_fraction >= MAX_EXCLUDED_FRACTION {
        return Err(Error::Concavity(format!(
            "excluded fraction {:.3} is not below {MAX_EXCLUDED_FRACTION}",
            pointwise.excluded_fraction
        )));
    }
    let levels = resolvable_levels(u, &settings.levels);
    let sm = support_matrix(u, &levels, &settings.dirs)?;
    let support = alpha_from_support(&sm)?;
    let midpoint = midpoint_concavity_test(
        u,
        settings.midpoint_alpha,
        settings.pair_count,
        settings.seed,
        floor,
        settings.midpoint_tolerance,
    )?;
    Ok(ConcavityReport {
        alpha_pointwise: pointwise.alpha,
        alpha_support: support.alpha,
        samples_used: pointwise.samples_used,
        excluded_fraction: pointwise.excluded_fraction,
        pointwise,
        support,
        levels,
        worst_violation: midpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridSpec, ProblemParams};
    use crate::pde_solver::radial_solution;

    fn radial(n: usize, p: f64, cells: usize) -> ScalarField {
        let params = ProblemParams::new(n, p).unwrap();
        let c = vec![0.0; n];
        radial_solution(&c, 1.0, &params, &GridSpec::cube(&c, 8.0, cells).unwrap()).unwrap()
    }

    #[test]
    fn pointwise_on_radial_fields() {
        let dirs = DirectionGrid::uniform_2d(256).unwrap();
        let u = radial(2, 1.5, 256);
        let samples = interior_samples(&u, 3, level_floor(&u));
        let est = concavity_number_pointwise(&u, &samples, &dirs, DEFAULT_DELTA).unwrap();
        assert!((est.alpha + 1.0).abs() < 0.05, "{}", est.alpha);

        let dirs3 = DirectionGrid::sphere_3d(256).unwrap();
        let u3 = radial(3, 1.5, 48);
        let samples = interior_samples(&u3, 3, level_floor(&u3));
        let est = concavity_number_pointwise(&u3, &samples, &dirs3, DEFAULT_DELTA).unwrap();
        assert!((est.alpha + 1.0 / 3.0).abs() < 0.05, "{}", est.alpha);
    }

    #[test]
    fn linear_ridge_is_concave() {
        let grid = GridSpec::cube(&[0.0, 0.0], 1.0, 32).unwrap();
        let n = grid.node_count();
        let values: Vec<f64> = (0..n).map(|i| (1.0 - grid.node_position(i)[0].abs()).max(0.0) * 0.5).collect();
        let mask = (0..n)
            .map(|i| if grid.is_boundary_node(grid.multi_index(i)) { NodeTag::OuterBoundary } else { NodeTag::Exterior })
            .collect();
        let u = ScalarField::new(grid.clone(), values, mask).unwrap();
        // smooth part only: x in (0.2, 0.8)
        let samples: Vec<usize> = (0..n)
            .filter(|&i| {
                let x = grid.node_position(i);
                x[0] > 0.2 && x[0] < 0.8 && x[1].abs() < 0.8
            })
            .collect();
        let dirs = DirectionGrid::uniform_2d(64).unwrap();
        let est = concavity_number_pointwise(&u, &samples, &dirs, DEFAULT_DELTA).unwrap();
        assert!((est.alpha - 1.0).abs() < 1e-9);
    }

    #[test]
    fn support_of_radial_levels() {
        let dirs = Arc::new(DirectionGrid::uniform_2d(256).unwrap());
        let u = radial(2, 1.5, 256);
        let levels = resolvable_levels(&u, &geometric_levels(0.1, 0.9, 17));
        assert!(levels.len() >= 12 && levels[0] > 0.15);
        let sm = support_matrix(&u, &levels, &dirs).unwrap();
        for row in &sm.h {
            for (h, t) in row.iter().zip(&levels) {
                assert!((h - 1.0 / t).abs() < 1e-3 / t, "h {h} at t {t}");
            }
        }
        assert!(sm.max_increase() < 0.0);
        let est = alpha_from_support(&sm).unwrap();
        assert!((est.alpha + 1.0).abs() < 0.02, "{}", est.alpha);
    }

    #[test]
    fn support_alpha_of_exact_power_law() {
        let t: Vec<f64> = geometric_levels(0.2, 0.9, 9);
        let h = vec![t.iter().map(|t| 2.0 * t.powf(-1.0 / 3.0)).collect::<Vec<_>>(); 4];
        let sm = SupportMatrix { theta_grid: None, t_grid: t, h };
        let est = alpha_from_support(&sm).unwrap();
        assert!((est.alpha + 1.0 / 3.0).abs() < 1e-3);
        let mut bad = sm.clone();
        bad.h[2][4] = 100.0;
        assert!(matches!(alpha_from_support(&bad), Err(Error::QuasiConcavity { .. })));
    }

    #[test]
    fn midpoint_test_on_radial_field() {
        let u = radial(2, 1.5, 128);
        let floor = level_floor(&u);
        let ok = midpoint_concavity_test(&u, -1.0, 20_000, 7, floor, 1e-12).unwrap();
        assert!(ok.passes(), "{:?}", ok.worst);
        let strict = midpoint_concavity_test(&u, -0.8, 20_000, 7, floor, 1e-12).unwrap();
        assert!(strict.max_violation() > 0.0);
        for beta in [-1.2, -1.5, -3.0] {
            assert!(midpoint_concavity_test(&u, beta, 20_000, 7, floor, 1e-12).unwrap().passes());
        }
        let again = midpoint_concavity_test(&u, -0.8, 20_000, 7, floor, 1e-12).unwrap();
        assert_eq!(again.max_violation(), strict.max_violation());
    }
}
