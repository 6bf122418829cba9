//! Brunn-Minkowski inequality for p-capacity.
//!
//! For convex bodies `K1`, `K2` and `λ ∈ [0, 1]` the functional
//! `Cap_p^(1/(n-p))` is concave along `(1 - λ) K1 + λ K2`, with equality
//! exactly for homothetic bodies. [`bm_sweep`] measures the deficit of that
//! concavity inequality from three exterior solves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capacity::{capacity_asymptotic, capacity_energy, CapacityEstimate};
use crate::geometry::{homothety_fit, minkowski_combination, ConvexBody, HomothetyFit};
use crate::pde_solver::{BodyGridSettings, SolveReport};
use crate::{Error, Result};

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Multiplier on the combined error indicator.
pub const TOLERANCE_FACTOR: f64 = 3.0;

/// Relative floor of the deficit tolerance, on the scale of `rhs`.
pub const TOLERANCE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmEstimates {
    pub k1: CapacityEstimate,
    pub k2: CapacityEstimate,
    pub combination: CapacityEstimate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BMReport {
    pub lambda: f64,
    /// `Cap((1 - λ) K1 + λ K2)^(1/(n-p))`.
    pub lhs: f64,
    /// `(1 - λ) Cap(K1)^(1/(n-p)) + λ Cap(K2)^(1/(n-p))`.
    pub rhs: f64,
    pub deficit: f64,
    pub homothety: HomothetyFit,
    /// Energy estimates of `K1`, `K2` and the combination.
    pub estimates: BmEstimates,
    /// Deficit from the solves on the coarser nested lattices.
    pub coarse_deficit: Option<f64>,
    /// `|deficit - coarse_deficit|`, or the propagated capacity indicators
    /// when no coarse solve exists.
    pub error_indicator: f64,
    pub tolerance: f64,
    /// Deficit recomputed from the far-field estimates.
    pub asymptotic_deficit: f64,
    /// Whether the far-field deficit lies within `tolerance` of the energy
    /// deficit or shares its sign.
    pub asymptotic_agrees: bool,
}

impl BMReport {
    /// `deficit ≥ -tolerance`.
    pub fn nonnegative(&self) -> bool {
        self.deficit >= -self.tolerance
    }

    /// `|deficit| ≤ tolerance`.
    pub fn is_equality(&self) -> bool {
        self.deficit.abs() <= self.tolerance
    }
}

struct Solved {
    energy: CapacityEstimate,
    asymptotic: CapacityEstimate,
}

fn solve_named(body: &ConvexBody, name: &str, settings: &BodyGridSettings) -> Result<Solved> {
    let wrap = |e: Error| Error::BodySolve { body: name.to_string(), source: Box::new(e) };
    let report: SolveReport = settings.solve(body).map_err(wrap)?;
    Ok(Solved {
        energy: capacity_energy(&report).map_err(wrap)?,
        asymptotic: capacity_asymptotic(&report).map_err(wrap)?,
    })
}

/// Deficit for a single `λ`. See [`bm_sweep`].
pub fn bm_deficit(k1: &ConvexBody, k2: &ConvexBody, lambda: f64, settings: &BodyGridSettings) -> Result<BMReport> {
    Ok(bm_sweep(k1, k2, &[lambda], settings)?.remove(0))
}

/// Solves `K1` and `K2` once and every interior combination once; the
/// endpoints `λ ∈ {0, 1}` reuse the input solves and so have zero deficit.
/// Solves run on the current rayon pool and results keep the order of
/// `lambdas`.
pub fn bm_sweep(
    k1: &ConvexBody,
    k2: &ConvexBody,
    lambdas: &[f64],
    settings: &BodyGridSettings,
) -> Result<Vec<BMReport>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidBody("empty lambda list".into()));
    }
    let combos = lambdas
        .iter()
        .map(|&l| minkowski_combination(k1, k2, l))
        .collect::<Result<Vec<_>>>()?;
    let homothety = homothety_fit(k1, k2)?;
    let (s1, s2) = rayon::join(|| solve_named(k1, "K1", settings), || solve_named(k2, "K2", settings));
    let (s1, s2) = (s1?, s2?);
    let inner: Vec<Option<Result<Solved>>> = lambdas
        .par_iter()
        .zip(&combos)
        .map(|(&l, body)| {
            (l > 0.0 && l < 1.0).then(|| solve_named(body, &format!("combination lambda={l}"), settings))
        })
        .collect();
    let mut out = Vec::with_capacity(lambdas.len());
    for (&lambda, solved) in lambdas.iter().zip(inner) {
        let solved = solved.transpose()?;
        let mid = match &solved {
            Some(s) => s,
            None if lambda == 0.0 => &s1,
            None => &s2,
        };
        out.push(assemble(lambda, &s1, &s2, mid, homothety.clone(), settings)?);
    }
    Ok(out)
}

fn assemble(
    lambda: f64,
    s1: &Solved,
    s2: &Solved,
    mid: &Solved,
    homothety: HomothetyFit,
    settings: &BodyGridSettings,
) -> Result<BMReport> {
    let root = settings.template.params.bm_exponent();
    let side = |c: f64, a: f64, b: f64| (c.powf(root), (1.0 - lambda) * a.powf(root) + lambda * b.powf(root));
    let (lhs, rhs) = side(mid.energy.value, s1.energy.value, s2.energy.value);
    let deficit = lhs - rhs;
    let coarse_deficit = match (mid.energy.coarse_value, s1.energy.coarse_value, s2.energy.coarse_value) {
        (Some(c), Some(a), Some(b)) => {
            let (l, r) = side(c, a, b);
            Some(l - r)
        }
        _ => None,
    };
    let error_indicator = match coarse_deficit {
        Some(c) => (deficit - c).abs(),
        None => {
            // Relative capacity errors shrink by the root exponent.
            let rel = |e: &CapacityEstimate| root * e.error_indicator * e.value.powf(root);
            rel(&mid.energy) + (1.0 - lambda) * rel(&s1.energy) + lambda * rel(&s2.energy)
        }
    };
    let tolerance = TOLERANCE_FACTOR * error_indicator + TOLERANCE_FLOOR * rhs;
    let (al, ar) = side(mid.asymptotic.value, s1.asymptotic.value, s2.asymptotic.value);
    let asymptotic_deficit = al - ar;
    let asymptotic_agrees =
        (asymptotic_deficit - deficit).abs() <= tolerance || asymptotic_deficit.signum() == deficit.signum();
    if !(lhs > 0.0 && rhs > 0.0) {
        return Err(Error::Unconverged);
    }
    Ok(BMReport {
        lambda,
        lhs,
        rhs,
        deficit,
        homothety,
        estimates: BmEstimates {
            k1: s1.energy.clone(),
            k2: s2.energy.clone(),
            combination: mid.energy.clone(),
        },
        coarse_deficit,
        error_indicator,
        tolerance,
        asymptotic_deficit,
        asymptotic_agrees,
    })
}
