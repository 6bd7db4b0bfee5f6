//! Experiment configuration: defaults, optional TOML file, command-line overrides.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use twinlattice::gamma::LayerSearch;
use twinlattice::lattice::BoundaryData;
use twinlattice::minimize::MinimizeOptions;
use twinlattice::wells::{boundary_gradient, build_wells, WellPair};

use crate::CliError;

/// Far-field clamps for the physical runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BcChoice {
    /// `U0 x` left of the domain, `Q U1 x` right of it.
    Twin,
    /// `F_λ x` on both sides.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub a: f64,
    pub lambda: f64,
    pub n_list: Vec<usize>,
    pub alpha: f64,
    pub delta: f64,
    /// Large-site threshold of the row census; `None` uses the wells' default.
    pub c_tilde: Option<f64>,
    /// Recorded for provenance. No command draws random numbers.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub bc: BcChoice,
    pub variable_tau: bool,
    pub quick: bool,
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Distance to a well below which a bond counts as in-well.
    pub interface_tol: f64,
    /// Deviations below this are rounding and end a decay-fit window.
    pub fit_floor: f64,
    /// Strip half-heights of the layer problems.
    pub layer_n: Vec<usize>,
    pub truncation_factor: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            a: 2f64.sqrt(),
            lambda: 0.5,
            n_list: vec![40, 100, 200],
            alpha: 0.4,
            delta: 0.1,
            c_tilde: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            bc: BcChoice::Twin,
            variable_tau: false,
            quick: false,
            grad_tol: 1e-10,
            max_iters: 500,
            interface_tol: 0.05,
            fit_floor: 1e-13,
            layer_n: vec![10, 20, 40],
            truncation_factor: 3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if !(self.a.is_finite() && self.a > 0.0 && (self.a - 1.0).abs() > 1e-12) {
            return bad(format!("a must be positive and different from 1, got {}", self.a));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.n_list.is_empty() {
            return bad("n_list is empty".into());
        }
        if let Some(n) = self.n_list.iter().find(|&&n| n < 2) {
            return bad(format!("every n must be at least 2, got {n}"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta < 0.25) {
            return bad(format!("delta must lie in (0, 1/4), got {}", self.delta));
        }
        if self.c_tilde.is_some_and(|c| !(c > 0.0)) {
            return bad("c_tilde must be positive".into());
        }
        if !(self.grad_tol > 0.0 && self.interface_tol > 0.0 && self.fit_floor >= 0.0) {
            return bad("tolerances must be positive".into());
        }
        if self.max_iters == 0 || self.truncation_factor == 0 {
            return bad("max_iters and truncation_factor must be positive".into());
        }
        if self.layer_n.is_empty() || self.layer_n.iter().any(|&n| n < 2) {
            return bad("layer_n needs at least one entry, each at least 2".into());
        }
        Ok(())
    }

    pub fn wells(&self) -> Result<WellPair, CliError> {
        Ok(build_wells(self.a)?)
    }

    pub fn boundary(&self, wells: &WellPair) -> Result<BoundaryData, CliError> {
        Ok(match self.bc {
            BcChoice::Twin => BoundaryData::twin(wells),
            BcChoice::Affine => BoundaryData::affine(&boundary_gradient(wells, self.lambda)?),
        })
    }

    pub fn minimize_options(&self) -> MinimizeOptions {
        MinimizeOptions {
            variable_tau: self.variable_tau,
            grad_tol: self.grad_tol,
            max_iters: self.max_iters,
            ..Default::default()
        }
    }

    pub fn layer_search(&self) -> LayerSearch {
        let base = LayerSearch { n_sequence: self.layer_n.clone(), truncation_factor: self.truncation_factor, ..Default::default() };
        if self.quick {
            LayerSearch { max_evaluations: 30, max_doublings: 0, ..base }
        } else {
            base
        }
    }

    pub fn c_tilde_or_default(&self, wells: &WellPair) -> f64 {
        self.c_tilde.unwrap_or_else(|| wells.c_tilde())
    }

    /// `config.<field> = value` for every field, in declaration order. Embedded
    /// at the top of every output file.
    pub fn header(&self, command: &str) -> Vec<(String, String)> {
        let f = |x: f64| format!("{x:.16e}");
        let list = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ");
        [
            ("tool", format!("twinlattice {}", env!("CARGO_PKG_VERSION"))),
            ("command", command.to_string()),
            ("a", f(self.a)),
            ("lambda", f(self.lambda)),
            ("n_list", list(&self.n_list)),
            ("alpha", f(self.alpha)),
            ("delta", f(self.delta)),
            ("c_tilde", self.c_tilde.map_or("default".into(), f)),
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("bc", format!("{:?}", self.bc).to_lowercase()),
            ("variable_tau", self.variable_tau.to_string()),
            ("quick", self.quick.to_string()),
            ("grad_tol", f(self.grad_tol)),
            ("max_iters", self.max_iters.to_string()),
            ("interface_tol", f(self.interface_tol)),
            ("fit_floor", f(self.fit_floor)),
            ("layer_n", list(&self.layer_n)),
            ("truncation_factor", self.truncation_factor.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("config.{k}"), v))
        .collect()
    }
}
