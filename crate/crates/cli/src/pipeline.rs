//! The per-`n` run shared by the commands: twin, middle-atom preoptimization,
//! Newton, then the diagnostics of the minimizer.

use serde::Serialize;
use twinlattice::analysis::{
    boundary_layer_widths, classify, deviation_profile, fit_sides, interface_positions, well_runs, InterfaceRecord,
    SideFits, WellClassification,
};
use twinlattice::energy::{chain_energy, EnergyBreakdown};
use twinlattice::lattice::{reconstruct, BoundaryKind, ChainState, LatticeGeometry};
use twinlattice::minimize::{
    newton_minimize, preoptimize_atom, twin_chain, MinimizationReport, Preoptimized, Termination,
};
use twinlattice::wells::WellPair;

use crate::{CliError, ExperimentConfig};

/// Chain index where the twin puts its interface: 0 for twin data, `(1-2λ)n` for
/// `F_λ` data (the only place where both clamps are met continuously).
pub fn interface_column(cfg: &ExperimentConfig, n: usize) -> i64 {
    match cfg.bc {
        crate::BcChoice::Twin => 0,
        crate::BcChoice::Affine => ((1.0 - 2.0 * cfg.lambda) * n as f64).round() as i64,
    }
}

/// Initial state: the twin, or the single affine state when the interface would
/// sit on a clamp (`λ ∈ {0, 1}` with affine data).
pub fn initial_state(cfg: &ExperimentConfig, wells: &WellPair, n: usize) -> Result<ChainState, CliError> {
    let g = LatticeGeometry::physical(n)?;
    let bc = cfg.boundary(wells)?;
    let s = interface_column(cfg, n);
    if g.first < s && s < g.last {
        Ok(twin_chain(g, wells, s, bc)?)
    } else {
        Ok(ChainState::piecewise(g, wells.clone(), bc, 0, bc.left, bc.right)?)
    }
}

pub struct MinimizeRun {
    pub n: usize,
    pub interface_column: i64,
    pub twin: ChainState,
    pub twin_energy: f64,
    pub pre: Preoptimized,
    pub report: MinimizationReport,
    pub breakdown: EnergyBreakdown,
    pub classification: WellClassification,
    pub interfaces: Vec<InterfaceRecord>,
    /// In-well runs `(first bond, last bond, well)`.
    pub runs: Vec<(i64, i64, u8)>,
    pub boundary_layers: (usize, usize),
    /// `|uⁱ - uⁱ_pre|` against the preoptimized twin.
    pub profile: Vec<(i64, f64)>,
    pub fits: Result<SideFits, String>,
}

impl MinimizeRun {
    pub fn deviation(&self, i: i64) -> f64 {
        self.profile[(i - self.twin.geometry.first) as usize].1
    }

    pub fn summary(&self) -> RunSummary {
        let r = &self.report;
        let fit = |f: &twinlattice::analysis::DecayFit| FitSummary {
            rate: f.rate,
            amplitude: f.amplitude,
            r_squared: f.r_squared,
            points: f.profile.len(),
        };
        let bc = match self.twin.boundary.kind {
            BoundaryKind::Affine { .. } => "affine",
            BoundaryKind::Twin => "twin",
            BoundaryKind::Layer => "layer",
        };
        RunSummary {
            n: self.n,
            bc,
            interface_column: self.interface_column,
            converged: r.converged,
            termination: r.termination,
            iterations: r.iterations,
            twin_energy: self.twin_energy,
            preoptimized_energy: self.pre.energy_after,
            preoptimization_iterations: self.pre.iterations,
            final_energy_h1: r.final_energy(),
            final_energy_hn: self.breakdown.total,
            final_grad_norm: r.final_grad_norm(),
            admissibility_violations: r.admissibility_violations,
            admissibility_rejections: r.admissibility_rejections,
            interfaces: self.interfaces.clone(),
            boundary_layers: self.boundary_layers,
            well_regions: self.runs.len(),
            middle_deviation: self.deviation(self.interface_column),
            fit_left: self.fits.as_ref().ok().map(|f| fit(&f.left)),
            fit_right: self.fits.as_ref().ok().map(|f| fit(&f.right)),
            fit_error: self.fits.as_ref().err().cloned(),
            energy_history: r.energy_history.clone(),
            grad_norm_history: r.grad_norm_history.clone(),
            shift_history: r.shift_history.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub rate: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub n: usize,
    pub bc: &'static str,
    pub interface_column: i64,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub twin_energy: f64,
    pub preoptimized_energy: f64,
    pub preoptimization_iterations: usize,
    pub final_energy_h1: f64,
    pub final_energy_hn: f64,
    pub final_grad_norm: f64,
    pub admissibility_violations: usize,
    pub admissibility_rejections: usize,
    pub interfaces: Vec<InterfaceRecord>,
    pub boundary_layers: (usize, usize),
    pub well_regions: usize,
    pub middle_deviation: f64,
    pub fit_left: Option<FitSummary>,
    pub fit_right: Option<FitSummary>,
    pub fit_error: Option<String>,
    pub energy_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    pub shift_history: Vec<f64>,
}

pub fn minimize_one(cfg: &ExperimentConfig, n: usize) -> Result<MinimizeRun, CliError> {
    let wells = cfg.wells()?;
    let twin = initial_state(cfg, &wells, n)?;
    let s = interface_column(cfg, n).clamp(twin.geometry.first + 1, twin.geometry.last - 1);
    let pre = preoptimize_atom(&twin, s);
    let report = newton_minimize(&pre.chain, &cfg.minimize_options());
    log::info!(
        "n = {n}: {:?} after {} iterations, H1 = {:.10}, |g| = {:.2e}",
        report.termination,
        report.iterations,
        report.final_energy(),
        report.final_grad_norm()
    );
    analyse(cfg, &wells, n, s, twin, pre, report)
}

/// Diagnostics of a finished run; `fit-decay` also calls this on stored chains.
pub fn analyse(
    cfg: &ExperimentConfig,
    wells: &WellPair,
    n: usize,
    interface_column: i64,
    twin: ChainState,
    pre: Preoptimized,
    report: MinimizationReport,
) -> Result<MinimizeRun, CliError> {
    let fin = &report.final_chain;
    let breakdown = chain_energy(fin);
    let classification = classify(&reconstruct(fin), wells);
    let interfaces = interface_positions(&classification, cfg.interface_tol);
    let runs = well_runs(&classification, cfg.interface_tol);
    let boundary_layers = boundary_layer_widths(&classification, cfg.interface_tol);
    let profile = deviation_profile(fin, &pre.chain)?;
    let fits = fit_sides(&profile, interface_column, 2, (n / 2) as i64, cfg.fit_floor).map_err(|e| e.to_string());
    let twin_energy = chain_energy(&twin).rescaled;
    Ok(MinimizeRun {
        n,
        interface_column,
        twin,
        twin_energy,
        pre,
        report,
        breakdown,
        classification,
        interfaces,
        runs,
        boundary_layers,
        profile,
        fits,
    })
}
