//! Rigidity diagnostics: per-cell well classification, interface detection, good
//! rows of the energy matrix, deviation profiles and exponential decay fits.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::Serialize;

use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::lattice::{ChainState, LatticeField, LatticeGeometry};
use crate::wells::{dist_to_well, WellPair};

/// Relative gap below which the two well distances count as equal.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellClass {
    pub well_id: u8,
    pub distance: f64,
    /// Distance to the other well.
    pub other_distance: f64,
    /// Minimizing rotation angle for the chosen well.
    pub angle: f64,
    pub tie: bool,
}

/// Nearest well of every "+" triangle between two atoms of the chain. Cells are
/// keyed by bond `i` (atoms `i` and `i + 1`, `first <= i < last`) and row `j`.
#[derive(Debug, Clone)]
pub struct WellClassification {
    pub geometry: LatticeGeometry,
    cells: Vec<CellClass>,
}

impl WellClassification {
    pub fn bonds(&self) -> RangeInclusive<i64> {
        self.geometry.first..=self.geometry.last - 1
    }

    pub fn cell(&self, i: i64, j: i64) -> CellClass {
        let g = &self.geometry;
        self.cells[(i - g.first) as usize * g.num_rows() + (j + g.n as i64) as usize]
    }

    /// Largest distance to the assigned well over the rows of bond `i`.
    pub fn column_distance(&self, i: i64) -> f64 {
        self.geometry.rows().map(|j| self.cell(i, j).distance).fold(0.0, f64::max)
    }

    /// The well every cell of bond `i` sits in within `tol`, if there is one.
    pub fn column_well(&self, i: i64, tol: f64) -> Option<u8> {
        let mut rows = self.geometry.rows();
        let first = self.cell(i, *rows.start());
        let k = first.well_id;
        rows.all(|j| {
            let c = self.cell(i, j);
            c.well_id == k && c.distance <= tol
        })
        .then_some(k)
    }

    pub fn write_matrix<W: Write>(&self, header: &[(String, String)], mut w: W) -> Result<()> {
        for (k, v) in header {
            writeln!(w, "# {k} = {v}")?;
        }
        write!(w, "j")?;
        for i in self.bonds() {
            write!(w, ",{i}")?;
        }
        writeln!(w)?;
        for j in self.geometry.rows() {
            write!(w, "{j}")?;
            for i in self.bonds() {
                write!(w, ",{}", self.cell(i, j).well_id)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn classify_gradient(m: &crate::wells::Mat2, wells: &WellPair) -> CellClass {
    let d0 = dist_to_well(m, &wells.u0);
    let d1 = dist_to_well(m, &wells.u1);
    let tie = (d0.distance - d1.distance).abs() <= TIE_TOL * d0.distance.max(d1.distance).max(1.0);
    if tie || d0.distance <= d1.distance {
        CellClass { well_id: 0, distance: d0.distance, other_distance: d1.distance, angle: d0.angle, tie }
    } else {
        CellClass { well_id: 1, distance: d1.distance, other_distance: d0.distance, angle: d1.angle, tie }
    }
}

pub fn classify(field: &LatticeField, wells: &WellPair) -> WellClassification {
    let g = field.geometry;
    let mut cells = Vec::with_capacity((g.len() - 1) * g.num_rows());
    for i in g.first..g.last {
        for j in g.rows() {
            cells.push(classify_gradient(&field.gradient(i, j), wells));
        }
    }
    WellClassification { geometry: g, cells }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterfaceRecord {
    /// Continuum coordinate of the centre of the layer.
    pub x_s: f64,
    pub left_well: u8,
    pub right_well: u8,
    /// Bonds in the gap whose distance exceeds the tolerance.
    pub width_in_atoms: usize,
}

/// Maximal runs of in-well bonds, as `(first bond, last bond, well)`.
pub fn well_runs(cls: &WellClassification, tol: f64) -> Vec<(i64, i64, u8)> {
    let mut runs: Vec<(i64, i64, u8)> = Vec::new();
    for i in cls.bonds() {
        match (cls.column_well(i, tol), runs.last_mut()) {
            (Some(k), Some(last)) if last.2 == k && last.1 == i - 1 => last.1 = i,
            (Some(k), _) => runs.push((i, i, k)),
            (None, _) => {}
        }
    }
    runs
}

/// Interfaces are the gaps between consecutive runs: either a change of well, or a
/// layer of bad bonds separating two runs of the same well. Leading and trailing
/// bad bonds are boundary layers (see [`boundary_layer_widths`]).
pub fn interface_positions(cls: &WellClassification, tol: f64) -> Vec<InterfaceRecord> {
    let h = cls.geometry.lambda_n();
    well_runs(cls, tol)
        .windows(2)
        .map(|w| {
            let (e, f) = (w[0].1, w[1].0);
            InterfaceRecord {
                x_s: 0.5 * ((e + 1 + f) as f64) * h,
                left_well: w[0].2,
                right_well: w[1].2,
                width_in_atoms: (f - e - 1) as usize,
            }
        })
        .collect()
}

/// Bad bonds before the first and after the last in-well run. With no run at all
/// every bond is reported on the left.
pub fn boundary_layer_widths(cls: &WellClassification, tol: f64) -> (usize, usize) {
    let runs = well_runs(cls, tol);
    let b = cls.bonds();
    match (runs.first(), runs.last()) {
        (Some(f), Some(l)) => ((f.0 - b.start()) as usize, (b.end() - l.1) as usize),
        _ => ((b.end() - b.start() + 1) as usize, 0),
    }
}

/// Per-atom `|uⁱ - uⁱ_ref|`.
pub fn deviation_profile(chain: &ChainState, reference: &ChainState) -> Result<Vec<(i64, f64)>> {
    if chain.geometry != reference.geometry {
        return Err(Error::SizeMismatch("chain and reference have different geometries".into()));
    }
    Ok(chain.geometry.indices().map(|i| (i, (chain.atom(i) - reference.atom(i)).norm())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    /// Slope of `log d` per atom.
    pub rate: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    /// The fitted points `(x, d)`.
    pub profile: Vec<(i64, f64)>,
}

impl DecayFit {
    pub fn fitted(&self, x: i64) -> f64 {
        self.amplitude * (self.rate * x as f64).exp()
    }

    pub fn write_csv<W: Write>(&self, header: &[(String, String)], mut w: W) -> Result<()> {
        for (k, v) in header {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "# rate = {:.16e}, amplitude = {:.16e}, r_squared = {:.16e}", self.rate, self.amplitude, self.r_squared)?;
        writeln!(w, "i,deviation,log_deviation,fitted_value")?;
        for &(x, d) in &self.profile {
            writeln!(w, "{x},{d:.16e},{:.16e},{:.16e}", d.ln(), self.fitted(x))?;
        }
        Ok(())
    }
}

/// Least-squares line through `(x, log d)` for the points with `x` in `window`.
pub fn fit_exponential(profile: &[(i64, f64)], window: RangeInclusive<i64>) -> Result<DecayFit> {
    let pts: Vec<(i64, f64)> = profile.iter().copied().filter(|(x, _)| window.contains(x)).collect();
    if let Some((x, d)) = pts.iter().find(|(_, d)| !(*d > 0.0)) {
        return Err(Error::Fit(format!("deviation {d} at {x} is not positive")));
    }
    if pts.len() < 5 {
        return Err(Error::Fit(format!("{} points in window, need at least 5", pts.len())));
    }
    let m = pts.len() as f64;
    let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let rate = sxy / sxx;
    let intercept = my - rate * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - rate * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    Ok(DecayFit { rate, amplitude: intercept.exp(), r_squared, profile: pts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SideFits {
    pub left: DecayFit,
    pub right: DecayFit,
}

/// Fits each side of an interface at atom `center` separately, in the distance
/// `|i - center|`, over distances `near..=far`. A side's window ends early at the
/// first atom whose deviation drops below `floor` (round-off territory).
pub fn fit_sides(profile: &[(i64, f64)], center: i64, near: i64, far: i64, floor: f64) -> Result<SideFits> {
    let side = |sign: i64| -> Result<DecayFit> {
        let mut pts = Vec::new();
        for k in near..=far {
            let Some(&(_, d)) = profile.iter().find(|(i, _)| *i == center + sign * k) else { break };
            if d < floor {
                break;
            }
            pts.push((k, d));
        }
        fit_exponential(&pts, near..=far)
    };
    Ok(SideFits { left: side(-1)?, right: side(1)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoodLineOptions {
    pub alpha: f64,
    pub delta: f64,
    pub c_tilde: f64,
    /// Constant in the per-row energy bound `(1/n) Σ_i h ≤ C n^{-α}`.
    pub line_energy_const: f64,
    /// Constant in the moderate-site bound `#{h ≥ n^{-α}} ≤ C δ⁻¹ n^α`.
    pub moderate_count_const: f64,
    /// Bound on `#{h ≥ c̃}` per row.
    pub large_count_max: usize,
}

impl GoodLineOptions {
    /// The constants hidden in the estimates are unquantified; these defaults are
    /// generous enough to accept twin minimizers and nothing more is claimed.
    pub fn new(alpha: f64, delta: f64, c_tilde: f64) -> Self {
        Self { alpha, delta, c_tilde, line_energy_const: 4.0, moderate_count_const: 1.0, large_count_max: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LineCondition {
    LineEnergy,
    ModerateSites,
    LargeSites,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RowStats {
    pub j: i64,
    pub line_energy: f64,
    pub moderate_sites: usize,
    pub large_sites: usize,
    pub line_energy_ok: bool,
    pub moderate_ok: bool,
    pub large_ok: bool,
}

impl RowStats {
    pub fn good(&self) -> bool {
        self.line_energy_ok && self.moderate_ok && self.large_ok
    }
    fn failures(&self) -> Vec<LineCondition> {
        let mut v = Vec::new();
        if !self.line_energy_ok {
            v.push(LineCondition::LineEnergy);
        }
        if !self.moderate_ok {
            v.push(LineCondition::ModerateSites);
        }
        if !self.large_ok {
            v.push(LineCondition::LargeSites);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodLines {
    pub j_minus: i64,
    pub j_zero: i64,
    pub j_plus: i64,
    pub rows: [RowStats; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandReport {
    pub band: RangeInclusive<i64>,
    pub good_rows: usize,
    /// Rows of the band violating each condition.
    pub violations: Vec<(LineCondition, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodLineFailure {
    pub bands: [BandReport; 3],
    /// Conditions that no row of some band satisfies.
    pub unsatisfiable: Vec<LineCondition>,
    /// Equally spaced triples with the fewest violated conditions.
    pub best_candidates: Vec<((i64, i64, i64), usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum GoodLineOutcome {
    Found(GoodLines),
    Failed(GoodLineFailure),
}

pub fn row_stats(bd: &EnergyBreakdown, opts: &GoodLineOptions) -> Vec<RowStats> {
    let g = &bd.geometry;
    let n = g.n as f64;
    let thr = n.powf(-opts.alpha);
    let line_bound = opts.line_energy_const * thr;
    let moderate_bound = opts.moderate_count_const / opts.delta * n.powf(opts.alpha);
    g.rows()
        .map(|j| {
            let line_energy = bd.row_sum(j) / n;
            let moderate_sites = g.indices().filter(|&i| bd.local(i, j) >= thr).count();
            let large_sites = g.indices().filter(|&i| bd.local(i, j) >= opts.c_tilde).count();
            RowStats {
                j,
                line_energy,
                moderate_sites,
                large_sites,
                line_energy_ok: line_energy <= line_bound,
                moderate_ok: moderate_sites as f64 <= moderate_bound,
                large_ok: large_sites <= opts.large_count_max,
            }
        })
        .collect()
}

/// Three rows, one near the bottom, one near the middle and one near the top,
/// equally spaced and each with small line energy and few high-energy sites.
/// Among valid triples the most centred one is returned.
pub fn find_good_lines(bd: &EnergyBreakdown, opts: &GoodLineOptions) -> Result<GoodLineOutcome> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {}", opts.alpha)));
    }
    if !(opts.delta > 0.0 && opts.delta < 0.25) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0, 1/4), got {}", opts.delta)));
    }
    let n = bd.geometry.n as i64;
    let dn = opts.delta * n as f64;
    let wide = (2.0 * dn).floor() as i64;
    let narrow = dn.floor() as i64;
    let bands = [-n..=-n + wide, -narrow..=narrow, n - wide..=n];
    let stats = row_stats(bd, opts);
    let st = |j: i64| &stats[(j + n) as usize];

    let centre = n as f64 - dn;
    let mut best: Option<((i64, i64, i64), f64)> = None;
    let mut candidates: Vec<((i64, i64, i64), usize)> = Vec::new();
    for j0 in bands[1].clone() {
        for d in 1..=2 * n {
            let (jm, jp) = (j0 - d, j0 + d);
            if !bands[0].contains(&jm) || !bands[2].contains(&jp) {
                continue;
            }
            let bad = [jm, j0, jp].iter().map(|&j| st(j).failures().len()).sum::<usize>();
            candidates.push(((jm, j0, jp), bad));
            if bad == 0 {
                let score = j0.abs() as f64 + (d as f64 - centre).abs();
                if best.map_or(true, |(_, s)| score < s) {
                    best = Some(((jm, j0, jp), score));
                }
            }
        }
    }
    if let Some(((jm, j0, jp), _)) = best {
        let rows = [*st(jm), *st(j0), *st(jp)];
        debug_assert!(rows.iter().all(RowStats::good) && jp - j0 == j0 - jm);
        return Ok(GoodLineOutcome::Found(GoodLines { j_minus: jm, j_zero: j0, j_plus: jp, rows }));
    }

    let report = |band: &RangeInclusive<i64>| {
        let rows: Vec<&RowStats> = band.clone().map(st).collect();
        let count = |c: LineCondition| rows.iter().filter(|r| r.failures().contains(&c)).count();
        BandReport {
            band: band.clone(),
            good_rows: rows.iter().filter(|r| r.good()).count(),
            violations: [LineCondition::LineEnergy, LineCondition::ModerateSites, LineCondition::LargeSites]
                .into_iter()
                .map(|c| (c, count(c)))
                .collect(),
        }
    };
    let bands_rep = [report(&bands[0]), report(&bands[1]), report(&bands[2])];
    let mut unsatisfiable = Vec::new();
    for b in &bands_rep {
        let len = (b.band.end() - b.band.start() + 1) as usize;
        for &(c, k) in &b.violations {
            if k == len && !unsatisfiable.contains(&c) {
                unsatisfiable.push(c);
            }
        }
    }
    candidates.sort_by_key(|&(t, bad)| (bad, t.1.abs(), t));
    candidates.truncate(5);
    Ok(GoodLineOutcome::Failed(GoodLineFailure { bands: bands_rep, unsatisfiable, best_candidates: candidates }))
}
