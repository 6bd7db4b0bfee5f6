use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use twinlattice::analysis::{
    fit_sides, find_good_lines, row_stats, DecayFit, GoodLineOptions, GoodLineOutcome, SideFits,
};
use twinlattice::energy::local_energy_threshold_census;
use twinlattice::gamma::{estimate_ek, estimate_layer, EkEstimate, LayerEnergyEstimate, LayerKind, LayerSpec};
use twinlattice::lattice::{read_snapshot, write_snapshot, BoundaryKind, ChainState};
use twinlattice::minimize::preoptimize_atom;
use twinlattice::wells::{boundary_gradient, Mat2, WellPair};

use crate::output::{create, f17, write_header, write_json, Table};
use crate::pipeline::{initial_state, interface_column, minimize_one, MinimizeRun, RunSummary};
use crate::{BcChoice, CliError, ExperimentConfig};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Every `n` of the config through the pipeline, concurrently, in list order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MinimizeRun>, CliError> {
    cfg.n_list.par_iter().map(|&n| minimize_one(cfg, n)).collect()
}

fn failures_of(runs: &[MinimizeRun]) -> Vec<String> {
    runs.iter()
        .filter(|r| !r.report.converged)
        .map(|r| format!("n = {}: {:?} at |g| = {:.3e}", r.n, r.report.termination, r.report.final_grad_norm()))
        .collect()
}

fn finish(summary: PathBuf, files: Vec<PathBuf>, failures: Vec<String>) -> Result<Outcome, CliError> {
    if failures.is_empty() {
        Ok(Outcome { summary, files })
    } else {
        Err(CliError::RunFailures(failures))
    }
}

fn write_snapshot_with_header(chain: &ChainState, path: &Path, header: &[(String, String)]) -> Result<PathBuf, CliError> {
    let mut buf = Vec::new();
    write_snapshot(chain, &mut buf)?;
    let text = String::from_utf8(buf).expect("snapshot is ascii");
    let (magic, rest) = text.split_once('\n').expect("snapshot has a header line");
    let mut w = create(path)?;
    use std::io::Write;
    writeln!(w, "{magic}")?;
    write_header(&mut w, header)?;
    w.write_all(rest.as_bytes())?;
    w.flush()?;
    Ok(path.to_path_buf())
}

fn side_fit(fits: &Result<SideFits, String>, i: i64, s: i64) -> Option<&DecayFit> {
    let f = fits.as_ref().ok()?;
    match i.cmp(&s) {
        std::cmp::Ordering::Less => Some(&f.left),
        std::cmp::Ordering::Greater => Some(&f.right),
        std::cmp::Ordering::Equal => None,
    }
}

fn deviation_table(profile: &[(i64, f64)], fits: &Result<SideFits, String>, s: i64) -> Table {
    let mut t = Table::new(&["i", "deviation", "log_deviation", "fitted_value"]);
    for &(i, d) in profile {
        let fitted = side_fit(fits, i, s).map_or(f64::NAN, |f| f.fitted((i - s).abs()));
        t.push(vec![i.to_string(), f17(d), f17(d.ln()), f17(fitted)]);
    }
    t
}

fn write_fits(dir: &Path, fits: &Result<SideFits, String>, header: &[(String, String)], files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if let Ok(f) = fits {
        for (name, fit) in [("fit_left.csv", &f.left), ("fit_right.csv", &f.right)] {
            let p = dir.join(name);
            let mut w = create(&p)?;
            fit.write_csv(header, &mut w)?;
            std::io::Write::flush(&mut w)?;
            files.push(p);
        }
    }
    Ok(())
}

fn write_run(dir: &Path, header: &[(String, String)], cfg: &ExperimentConfig, run: &MinimizeRun) -> Result<Vec<PathBuf>, CliError> {
    let mut files = vec![
        write_json(&dir.join("report.json"), header, &run.summary())?,
        write_snapshot_with_header(&run.report.final_chain, &dir.join("chain.snap"), header)?,
    ];
    let p = dir.join("energy.csv");
    let mut w = create(&p)?;
    let lambda = matches!(cfg.bc, BcChoice::Affine).then_some(cfg.lambda);
    run.breakdown.write_csv(header, cfg.a, lambda, &mut w)?;
    std::io::Write::flush(&mut w)?;
    files.push(p);
    files.push(deviation_table(&run.profile, &run.fits, run.interface_column).write(&dir.join("deviation.csv"), header)?);
    write_fits(dir, &run.fits, header, &mut files)?;
    let p = dir.join("classification.csv");
    let mut w = create(&p)?;
    run.classification.write_matrix(header, &mut w)?;
    std::io::Write::flush(&mut w)?;
    files.push(p);
    Ok(files)
}

#[derive(Serialize)]
struct MinimizeSummary {
    runs: Vec<RunSummary>,
    failures: Vec<String>,
}

pub fn minimize(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let runs = run_all(cfg)?;
    let dir = cfg.output_dir.join("minimize");
    let header = cfg.header("minimize");
    let mut files = Vec::new();
    for run in &runs {
        files.extend(write_run(&dir.join(format!("n{}", run.n)), &header, cfg, run)?);
    }
    let failures = failures_of(&runs);
    let body = MinimizeSummary { runs: runs.iter().map(MinimizeRun::summary).collect(), failures: failures.clone() };
    let summary = write_json(&dir.join("summary.json"), &header, &body)?;
    finish(summary, files, failures)
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanStep {
    pub n_prev: usize,
    pub n: usize,
    /// `|H¹_n - H¹_prev| / H¹_prev`.
    pub h1_relative_change: f64,
    pub hn_ratio: f64,
    pub lambda_ratio: f64,
    /// `|hn_ratio / lambda_ratio - 1|`.
    pub proportionality_error: f64,
}

#[derive(Serialize)]
struct ScanSummary {
    n: Vec<usize>,
    h1: Vec<f64>,
    hn: Vec<f64>,
    /// Least-squares slope of `log H_n` against `log λ_n`.
    loglog_slope: f64,
    steps: Vec<ScanStep>,
    failures: Vec<String>,
}

pub fn scan_steps(runs: &[MinimizeRun]) -> Vec<ScanStep> {
    runs.windows(2)
        .map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (h1a, h1b) = (a.report.final_energy(), b.report.final_energy());
            let hn_ratio = b.breakdown.total / a.breakdown.total;
            let lambda_ratio = a.n as f64 / b.n as f64;
            ScanStep {
                n_prev: a.n,
                n: b.n,
                h1_relative_change: (h1b - h1a).abs() / h1a,
                hn_ratio,
                lambda_ratio,
                proportionality_error: (hn_ratio / lambda_ratio - 1.0).abs(),
            }
        })
        .collect()
}

pub fn scan(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let runs = run_all(cfg)?;
    let dir = cfg.output_dir.join("scan");
    let header = cfg.header("scan");
    let mut table = Table::new(&["n", "lambda_n", "H_n", "H1_n", "twin_H1", "converged", "iterations", "final_grad_norm"]);
    let mut loglog = Table::new(&["log_lambda_n", "log_H_n"]);
    for r in &runs {
        let lam = 1.0 / r.n as f64;
        table.push(vec![
            r.n.to_string(),
            f17(lam),
            f17(r.breakdown.total),
            f17(r.report.final_energy()),
            f17(r.twin_energy),
            r.report.converged.to_string(),
            r.report.iterations.to_string(),
            f17(r.report.final_grad_norm()),
        ]);
        loglog.push(vec![f17(lam.ln()), f17(r.breakdown.total.ln())]);
    }
    let steps = scan_steps(&runs);
    let mut st = Table::new(&["n_prev", "n", "h1_relative_change", "hn_ratio", "lambda_ratio", "proportionality_error"]);
    for s in &steps {
        st.push(vec![
            s.n_prev.to_string(),
            s.n.to_string(),
            f17(s.h1_relative_change),
            f17(s.hn_ratio),
            f17(s.lambda_ratio),
            f17(s.proportionality_error),
        ]);
    }
    let files = vec![
        table.write(&dir.join("scan.csv"), &header)?,
        loglog.write(&dir.join("loglog.csv"), &header)?,
        st.write(&dir.join("steps.csv"), &header)?,
    ];
    let xs: Vec<f64> = runs.iter().map(|r| -(r.n as f64).ln()).collect();
    let ys: Vec<f64> = runs.iter().map(|r| r.breakdown.total.ln()).collect();
    let failures = failures_of(&runs);
    let body = ScanSummary {
        n: runs.iter().map(|r| r.n).collect(),
        h1: runs.iter().map(|r| r.report.final_energy()).collect(),
        hn: runs.iter().map(|r| r.breakdown.total).collect(),
        loglog_slope: slope(&xs, &ys),
        steps,
        failures: failures.clone(),
    };
    let summary = write_json(&dir.join("summary.json"), &header, &body)?;
    finish(summary, files, failures)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    if xs.len() < 2 {
        return f64::NAN;
    }
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Serialize)]
struct DiagnoseRun {
    n: usize,
    good_lines: GoodLineOutcome,
    census_moderate: CensusSummary,
    census_large: CensusSummary,
    interfaces: usize,
    boundary_layers: (usize, usize),
    /// Internal interfaces plus nonempty boundary layers.
    layer_count: usize,
}

#[derive(Serialize)]
struct CensusSummary {
    threshold: f64,
    sites: usize,
    rows: usize,
    max_per_row: usize,
}

#[derive(Serialize)]
struct DiagnoseSummary {
    c_tilde: f64,
    runs: Vec<DiagnoseRun>,
    failures: Vec<String>,
}

pub fn layer_count(run: &MinimizeRun) -> usize {
    let (l, r) = run.boundary_layers;
    run.interfaces.len() + usize::from(l > 0) + usize::from(r > 0)
}

pub fn diagnose(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let wells = cfg.wells()?;
    let c_tilde = cfg.c_tilde_or_default(&wells);
    let opts = GoodLineOptions::new(cfg.alpha, cfg.delta, c_tilde);
    let runs = run_all(cfg)?;
    let dir = cfg.output_dir.join("diagnose");
    let header = cfg.header("diagnose");
    let mut files = Vec::new();
    let mut out = Vec::new();
    for r in &runs {
        let d = dir.join(format!("n{}", r.n));
        let mut rows = Table::new(&["j", "line_energy", "moderate_sites", "large_sites", "line_energy_ok", "moderate_ok", "large_ok"]);
        for s in row_stats(&r.breakdown, &opts) {
            rows.push(vec![
                s.j.to_string(),
                f17(s.line_energy),
                s.moderate_sites.to_string(),
                s.large_sites.to_string(),
                s.line_energy_ok.to_string(),
                s.moderate_ok.to_string(),
                s.large_ok.to_string(),
            ]);
        }
        files.push(rows.write(&d.join("rows.csv"), &header)?);
        let census = |t: f64| {
            let c = local_energy_threshold_census(&r.breakdown, t);
            CensusSummary { threshold: t, sites: c.site_count(), rows: c.row_count(), max_per_row: c.max_per_row() }
        };
        let run = DiagnoseRun {
            n: r.n,
            good_lines: find_good_lines(&r.breakdown, &opts)?,
            census_moderate: census((r.n as f64).powf(-cfg.alpha)),
            census_large: census(c_tilde),
            interfaces: r.interfaces.len(),
            boundary_layers: r.boundary_layers,
            layer_count: layer_count(r),
        };
        let mut ct = Table::new(&["threshold", "sites", "rows", "max_per_row"]);
        for c in [&run.census_moderate, &run.census_large] {
            ct.push(vec![f17(c.threshold), c.sites.to_string(), c.rows.to_string(), c.max_per_row.to_string()]);
        }
        files.push(ct.write(&d.join("census.csv"), &header)?);
        files.push(write_json(&d.join("good_lines.json"), &header, &run.good_lines)?);
        out.push(run);
    }
    let failures = failures_of(&runs);
    let summary = write_json(&dir.join("summary.json"), &header, &DiagnoseSummary { c_tilde, runs: out, failures: failures.clone() })?;
    finish(summary, files, failures)
}

fn matrix_name(m: &Mat2, wells: &WellPair, f: &Mat2) -> &'static str {
    if *m == wells.u0 {
        "U0"
    } else if *m == wells.q * wells.u1 {
        "QU1"
    } else if m == f {
        "F"
    } else {
        "other"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub quantity: String,
    pub layer_value: f64,
    pub minimizer_h1: f64,
    pub n: usize,
    pub relative_difference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayersSummary {
    pub lambda: f64,
    pub orderings: Vec<(String, EkEstimate)>,
    pub e3: f64,
    pub same_state: Vec<LayerEnergyEstimate>,
    pub cross_checks: Vec<CrossCheck>,
    /// Interfaces plus boundary layers of the `F_λ` minimizer at the largest `n`.
    pub affine_minimizer_layers: usize,
    pub affine_minimizer_interfaces: usize,
    pub affine_minimizer_boundary_layers: (usize, usize),
}

/// Layer energies, both three-layer orderings and the comparison with the
/// physical minimizers at the largest `n` of the config.
pub fn layers_summary(cfg: &ExperimentConfig) -> Result<LayersSummary, CliError> {
    let wells = cfg.wells()?;
    let f = boundary_gradient(&wells, cfg.lambda)?.f;
    let qu1 = wells.q * wells.u1;
    let opts = twinlattice::minimize::MinimizeOptions { variable_tau: true, ..cfg.minimize_options() };
    let search = cfg.layer_search();
    let orders = [("F/U0/QU1/F", vec![f, wells.u0, qu1, f]), ("F/QU1/U0/F", vec![f, qu1, wells.u0, f])];
    let nmax = *cfg.n_list.iter().max().expect("validated non-empty");
    let twin_cfg = ExperimentConfig { bc: BcChoice::Twin, ..cfg.clone() };
    let affine_cfg = ExperimentConfig { bc: BcChoice::Affine, ..cfg.clone() };
    let ((eks, same), (twin_run, affine_run)) = rayon::join(
        || {
            rayon::join(
                || orders.par_iter().map(|(_, v)| estimate_ek(v, &wells, &opts, &search)).collect::<Result<Vec<_>, _>>(),
                || {
                    [wells.u0, qu1]
                        .par_iter()
                        .map(|v| estimate_layer(&LayerSpec::new(LayerKind::C, *v, *v, search.n_sequence[0]), &wells, &opts, &search))
                        .collect::<Result<Vec<_>, _>>()
                },
            )
        },
        || rayon::join(|| minimize_one(&twin_cfg, nmax), || minimize_one(&affine_cfg, nmax)),
    );
    let (eks, same, twin_run, affine_run) = (eks?, same?, twin_run?, affine_run?);
    let c_int = eks[0].terms[1].value;
    let e3 = eks.iter().map(|e| e.value).fold(f64::INFINITY, f64::min);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let cross_checks = vec![
        CrossCheck {
            quantity: "C(U0,QU1) vs twin-data minimizer".into(),
            layer_value: c_int,
            minimizer_h1: twin_run.report.final_energy(),
            n: nmax,
            relative_difference: rel(c_int, twin_run.report.final_energy()),
        },
        CrossCheck {
            quantity: "E3 vs F_lambda-data minimizer".into(),
            layer_value: e3,
            minimizer_h1: affine_run.report.final_energy(),
            n: nmax,
            relative_difference: rel(e3, affine_run.report.final_energy()),
        },
    ];
    Ok(LayersSummary {
        lambda: cfg.lambda,
        orderings: orders.iter().map(|(k, _)| k.to_string()).zip(eks).collect(),
        e3,
        same_state: same,
        cross_checks,
        affine_minimizer_layers: layer_count(&affine_run),
        affine_minimizer_interfaces: affine_run.interfaces.len(),
        affine_minimizer_boundary_layers: affine_run.boundary_layers,
    })
}

pub fn layers(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let s = layers_summary(cfg)?;
    let wells = cfg.wells()?;
    let f = boundary_gradient(&wells, cfg.lambda)?.f;
    let dir = cfg.output_dir.join("layers");
    let header = cfg.header("layers");
    let mut t = Table::new(&[
        "source", "kind", "v_left", "v_right", "n", "truncation", "estimate", "offset_x", "offset_y", "converged",
        "tail_energy", "stabilization_gap",
    ]);
    let mut push = |source: &str, e: &LayerEnergyEstimate| {
        for r in &e.n_sequence {
            t.push(vec![
                source.to_string(),
                e.kind.to_string(),
                matrix_name(&e.v_left, &wells, &f).to_string(),
                matrix_name(&e.v_right, &wells, &f).to_string(),
                r.n.to_string(),
                r.truncation.to_string(),
                f17(r.estimate),
                f17(r.offset.x),
                f17(r.offset.y),
                r.converged.to_string(),
                f17(r.tail_energy),
                f17(e.stabilization_gap),
            ]);
        }
    };
    for (name, ek) in &s.orderings {
        for term in &ek.terms {
            push(name, term);
        }
    }
    for e in &s.same_state {
        push("same-state", e);
    }
    let mut ek = Table::new(&["ordering", "value", "verification", "b_plus", "c", "b_minus"]);
    for (name, e) in &s.orderings {
        ek.push(vec![
            name.clone(),
            f17(e.value),
            f17(e.verification),
            f17(e.terms[0].value),
            f17(e.terms[1].value),
            f17(e.terms[2].value),
        ]);
    }
    let mut cc = Table::new(&["quantity", "layer_value", "minimizer_h1", "n", "relative_difference"]);
    for c in &s.cross_checks {
        cc.push(vec![c.quantity.clone(), f17(c.layer_value), f17(c.minimizer_h1), c.n.to_string(), f17(c.relative_difference)]);
    }
    let files = vec![
        t.write(&dir.join("layers.csv"), &header)?,
        ek.write(&dir.join("ek.csv"), &header)?,
        cc.write(&dir.join("crosscheck.csv"), &header)?,
    ];
    let failures: Vec<String> = s
        .orderings
        .iter()
        .flat_map(|(_, e)| e.terms.iter())
        .chain(&s.same_state)
        .filter(|e| !e.value.is_finite())
        .map(|e| format!("{} layer did not converge", e.kind))
        .collect();
    let summary = write_json(&dir.join("summary.json"), &header, &s)?;
    finish(summary, files, failures)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecaySummary {
    pub n: usize,
    pub source: &'static str,
    pub middle_deviation: f64,
    pub deviation_near: f64,
    pub deviation_half: f64,
    pub fit_left_rate: Option<f64>,
    pub fit_left_r_squared: Option<f64>,
    pub fit_right_rate: Option<f64>,
    pub fit_right_r_squared: Option<f64>,
    pub fit_error: Option<String>,
}

struct Decay {
    n: usize,
    source: &'static str,
    profile: Vec<(i64, f64)>,
    fits: Result<SideFits, String>,
    s: i64,
}

#[derive(Serialize)]
struct DecayRuns {
    runs: Vec<DecaySummary>,
}

/// The minimizer for `n`: the snapshot of an earlier `minimize` run in the same
/// output directory when it matches the config, else a fresh run.
fn stored_or_fresh(cfg: &ExperimentConfig, n: usize) -> Result<(ChainState, &'static str), CliError> {
    let path = cfg.output_dir.join("minimize").join(format!("n{n}")).join("chain.snap");
    if let Ok(file) = std::fs::File::open(&path) {
        let chain = read_snapshot(std::io::BufReader::new(file))?;
        let kind_ok = match (cfg.bc, chain.boundary.kind) {
            (BcChoice::Twin, BoundaryKind::Twin) => true,
            (BcChoice::Affine, BoundaryKind::Affine { lambda }) => lambda == cfg.lambda,
            _ => false,
        };
        if chain.geometry.n == n && chain.wells.a == cfg.a && kind_ok {
            return Ok((chain, "snapshot"));
        }
        log::warn!("{} does not match the config; recomputing", path.display());
    }
    Ok((minimize_one(cfg, n)?.report.final_chain, "recomputed"))
}

pub fn fit_decay(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let wells = cfg.wells()?;
    let dir = cfg.output_dir.join("fit-decay");
    let header = cfg.header("fit-decay");
    let results: Vec<Decay> = cfg
        .n_list
        .par_iter()
        .map(|&n| {
            let (chain, source) = stored_or_fresh(cfg, n)?;
            let s = interface_column(cfg, n);
            let twin = initial_state(cfg, &wells, n)?;
            let pre = preoptimize_atom(&twin, s.clamp(twin.geometry.first + 1, twin.geometry.last - 1));
            let profile = twinlattice::analysis::deviation_profile(&chain, &pre.chain)?;
            let fits = fit_sides(&profile, s, 2, (n / 2) as i64, cfg.fit_floor).map_err(|e| e.to_string());
            Ok(Decay { n, source, profile, fits, s })
        })
        .collect::<Result<_, CliError>>()?;
    let mut files = Vec::new();
    let mut out = Vec::new();
    for Decay { n, source, profile, fits, s } in &results {
        let d = dir.join(format!("n{n}"));
        files.push(deviation_table(profile, fits, *s).write(&d.join("deviation.csv"), &header)?);
        write_fits(&d, fits, &header, &mut files)?;
        let at = |i: i64| profile.iter().find(|p| p.0 == i).map_or(f64::NAN, |p| p.1);
        let (l, r) = (fits.as_ref().ok().map(|f| &f.left), fits.as_ref().ok().map(|f| &f.right));
        out.push(DecaySummary {
            n: *n,
            source,
            middle_deviation: at(*s),
            deviation_near: at(s + 2).max(at(s - 2)),
            deviation_half: at(s + (*n / 2) as i64).max(at(s - (*n / 2) as i64)),
            fit_left_rate: l.map(|f| f.rate),
            fit_left_r_squared: l.map(|f| f.r_squared),
            fit_right_rate: r.map(|f| f.rate),
            fit_right_r_squared: r.map(|f| f.r_squared),
            fit_error: fits.as_ref().err().cloned(),
        });
    }
    let summary = write_json(&dir.join("summary.json"), &header, &DecayRuns { runs: out })?;
    finish(summary, files, Vec::new())
}
