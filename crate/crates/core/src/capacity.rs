//! Capacity estimators and the level-set scaling law.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{level_set_extract, ConvexBody, DirectionGrid};
use crate::model::ProblemParams;
use crate::pde_solver::{rescaled_level_energy, BodyGridSettings, SolveReport};
use crate::{Error, Result};

/// Far-field fits with a larger relative spread are flagged unreliable.
pub const FIT_RESIDUAL_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CapacityMethod {
    Energy,
    Asymptotic,
    ExactBall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityEstimate {
    pub value: f64,
    pub method: CapacityMethod,
    /// `Energy`: relative change against the solve with half the cells when
    /// available, otherwise the grid spacing. `Asymptotic`: far-field fit
    /// residual. `ExactBall`: zero.
    pub error_indicator: f64,
    /// Same estimator on the coarser lattice of a nested solve.
    pub coarse_value: Option<f64>,
    pub reliable: bool,
}

fn check_report(report: &SolveReport) -> Result<()> {
    if !report.converged || !report.energy.is_finite() {
        return Err(Error::Unconverged);
    }
    Ok(())
}

/// Discrete energy over the box plus the energy of the far-field extension.
pub fn capacity_energy(report: &SolveReport) -> Result<CapacityEstimate> {
    check_report(report)?;
    let value = report.total_energy();
    if !(value > 0.0) {
        return Err(Error::Unconverged);
    }
    let coarse_value = report.coarse.as_ref().map(|c| c.energy + c.tail_energy);
    let error_indicator = match coarse_value {
        Some(c) => ((value - c) / value).abs(),
        None => report.spacing(),
    };
    Ok(CapacityEstimate { value, method: CapacityMethod::Energy, error_indicator, coarse_value, reliable: true })
}

/// `c_np C^(p-1)` from the fitted far-field coefficient.
pub fn capacity_asymptotic(report: &SolveReport) -> Result<CapacityEstimate> {
    check_report(report)?;
    let params = &report.params;
    let c = report.farfield_coeff;
    if !(c > 0.0) {
        return Err(Error::Unconverged);
    }
    let value = params.constants().c_np * c.powf(params.p() - 1.0);
    let coarse_value = report
        .coarse
        .as_ref()
        .map(|s| params.constants().c_np * s.farfield_coeff.powf(params.p() - 1.0));
    Ok(CapacityEstimate {
        value,
        method: CapacityMethod::Asymptotic,
        error_indicator: report.farfield_fit_residual,
        coarse_value,
        reliable: report.farfield_fit_residual <= FIT_RESIDUAL_THRESHOLD,
    })
}

pub fn capacity_ball_exact(radius: f64, params: &ProblemParams) -> Result<CapacityEstimate> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidBody(format!("radius {radius} must be positive")));
    }
    let n = params.n() as f64;
    Ok(CapacityEstimate {
        value: params.constants().c_np * radius.powf(n - params.p()),
        method: CapacityMethod::ExactBall,
        error_indicator: 0.0,
        coarse_value: None,
        reliable: true,
    })
}

/// Settings for re-solving on extracted level sets.
#[derive(Debug, Clone)]
pub struct ResolveSettings {
    pub solver: BodyGridSettings,
    pub dirs: Arc<DirectionGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingLevel {
    pub t: f64,
    /// `Cap(Ω(t)) t^(p-1) / Cap(Ω)` from the rescaled potential `min(u/t, 1)`.
    pub ratio_rescaled: Option<f64>,
    /// Same ratio from an independent solve on the extracted level set.
    pub ratio_resolved: Option<f64>,
    /// Relative difference between the two routes.
    pub route_gap: Option<f64>,
    /// Two-grid indicator of the re-solve.
    pub resolve_indicator: Option<f64>,
    pub notice: Option<String>,
}

impl ScalingLevel {
    pub fn ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.ratio_rescaled.iter().chain(self.ratio_resolved.iter()).copied()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub base: CapacityEstimate,
    pub levels: Vec<ScalingLevel>,
}

impl ScalingReport {
    /// Largest `|ratio - 1|` over all computed ratios.
    pub fn max_deviation(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.ratios())
            .map(|r| (r - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.levels.iter().filter(|l| l.ratio_rescaled.is_none() && l.ratio_resolved.is_none()).count()
    }
}

/// Checks `Cap(Ω(t)) = t^(1-p) Cap(Ω)` at every level. Unresolvable levels are
/// kept with a notice and no ratios.
pub fn scaling_check(
    body: &ConvexBody,
    report: &SolveReport,
    levels: &[f64],
    resolve: Option<&ResolveSettings>,
) -> Result<ScalingReport> {
    let base = capacity_energy(report)?;
    let p = report.params.p();
    let mut out = Vec::with_capacity(levels.len());
    for &t in levels {
        if t == 1.0 {
            out.push(ScalingLevel {
                t,
                ratio_rescaled: Some(1.0),
                ratio_resolved: resolve.map(|_| 1.0),
                route_gap: resolve.map(|_| 0.0),
                resolve_indicator: None,
                notice: None,
            });
            continue;
        }
        let scale = t.powf(p - 1.0) / base.value;
        let mut level = ScalingLevel {
            t,
            ratio_rescaled: None,
            ratio_resolved: None,
            route_gap: None,
            resolve_indicator: None,
            notice: None,
        };
        match rescaled_level_energy(body, report, t) {
            Ok(e) => level.ratio_rescaled = Some(e * scale),
            Err(e) => level.notice = Some(e.to_string()),
        }
        if let Some(settings) = resolve {
            match resolve_level(report, t, settings) {
                Ok(est) => {
                    level.ratio_resolved = Some(est.value * scale);
                    level.resolve_indicator = Some(est.error_indicator);
                }
                Err(e) => level.notice = Some(e.to_string()),
            }
        }
        if let (Some(a), Some(b)) = (level.ratio_rescaled, level.ratio_resolved) {
            level.route_gap = Some((a - b).abs() / b);
        }
        out.push(level);
    }
    Ok(ScalingReport { base, levels: out })
}

fn resolve_level(report: &SolveReport, t: f64, settings: &ResolveSettings) -> Result<CapacityEstimate> {
    let level_body = level_set_extract(&report.field, t, &settings.dirs)?;
    capacity_energy(&settings.solver.solve(&level_body)?)
}
