//! Surface-energy machinery at desk scale: strip averaging, cutting and affine
//! extension, and numerical boundary/internal layer energies.

use std::ops::RangeInclusive;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{chain_energy, chain_site_diffs, density, surface_energy, DensityParams};
use crate::error::{Error, Result};
use crate::lattice::{check_admissible, reconstruct, AffineClamp, BoundaryData, ChainState, LatticeGeometry};
use crate::minimize::{newton_minimize, MinimizationReport, MinimizeOptions, Termination};
use crate::summation::NeumaierSum;
use crate::wells::{Mat2, Vec2, WellPair};

/// `(1/m) Σ_i Σ_{j ∈ rows} h(i, j)`. Rows may lie outside `-n..=n`: the chain
/// determines the configuration on every row.
pub fn strip_energy(chain: &ChainState, rows: RangeInclusive<i64>, m: usize) -> f64 {
    let p = DensityParams::from(&chain.wells);
    let s = chain.stencil();
    let mut sum = NeumaierSum::new();
    for c in chain.geometry.indices() {
        for j in rows.clone() {
            sum.add(density(p, &chain_site_diffs(&s, c, j)));
        }
    }
    sum.value() / m as f64
}

/// Moves the configuration down by `t` rows: row `j` of the result is row `j + t`
/// of the input. Chain atoms shift by `t λ τⁱ`, clamps by `t λ τ`.
pub fn translate_rows(chain: &ChainState, t: i64) -> ChainState {
    let mut out = chain.clone();
    let h = chain.geometry.lambda_n() * t as f64;
    for (k, i) in chain.geometry.indices().enumerate() {
        out.u[k] += chain.tau(i) * h;
    }
    out.boundary.left.offset += chain.wells.tau * h;
    out.boundary.right.offset += chain.wells.tau * h;
    out
}

#[derive(Debug, Clone)]
pub struct Averaged {
    /// Strip index; strip `k` covers rows `-n + 2km ..= -n + 2(k+1)m - 1`.
    pub k: usize,
    /// Row shift bringing strip `k` onto rows `-m..=m-1`.
    pub shift: i64,
    pub translated: ChainState,
    /// Strip energy of the translated chain over rows `-m..=m-1`, evaluated afresh.
    pub strip_energy: f64,
    /// `H¹` of the input over all rows.
    pub full_energy: f64,
    pub strip_energies: Vec<f64>,
    pub bound: f64,
}

impl Averaged {
    pub fn verified(&self, epsilon: f64) -> bool {
        self.strip_energy <= self.full_energy + epsilon
    }
}

/// Picks a strip of `2m` consecutive rows whose `1/m`-weighted energy is within
/// `epsilon` of the full vertical average, and translates it to the centre.
///
/// Strips are disjoint blocks of `2m` rows, so their energies sum to at most the
/// full row sum and pigeonholing applies once `n > m (1 + C/ε)`, where `C` bounds
/// `H¹` of the input (`bound`, defaulting to `H¹` itself).
pub fn average_down(chain: &ChainState, m: usize, epsilon: f64, bound: Option<f64>) -> Result<Averaged> {
    let n = chain.geometry.n;
    if m == 0 || !(epsilon > 0.0) {
        return Err(Error::InvalidParameter("need m >= 1 and epsilon > 0".into()));
    }
    let full = surface_energy(chain);
    let c = bound.unwrap_or(full);
    if c < full {
        return Err(Error::Precondition(format!("bound {c} is below the energy {full}")));
    }
    if !(n as f64 > m as f64 * (1.0 + c / epsilon)) {
        return Err(Error::Precondition(format!(
            "n = {n} must exceed m (1 + C/eps) = {}",
            m as f64 * (1.0 + c / epsilon)
        )));
    }
    Ok(lowest_strip(chain, m, full, c))
}

/// The strip selection of [`average_down`] without its size precondition. The
/// inequality may then fail; callers check [`Averaged::verified`].
pub fn best_strip(chain: &ChainState, m: usize) -> Result<Averaged> {
    if m == 0 || 2 * m > 2 * chain.geometry.n + 1 {
        return Err(Error::InvalidParameter(format!("strip half-height {m} does not fit n = {}", chain.geometry.n)));
    }
    let full = surface_energy(chain);
    Ok(lowest_strip(chain, m, full, full))
}

fn lowest_strip(chain: &ChainState, m: usize, full: f64, bound: f64) -> Averaged {
    let (n, mi) = (chain.geometry.n as i64, m as i64);
    let strips = (2 * n + 1) / (2 * mi);
    let energies: Vec<f64> = (0..strips)
        .map(|k| {
            let lo = -n + 2 * k * mi;
            strip_energy(chain, lo..=lo + 2 * mi - 1, m)
        })
        .collect();
    let k = (0..energies.len())
        .reduce(|best, k| if energies[k] < energies[best] { k } else { best })
        .expect("at least one strip");
    let shift = -n + 2 * k as i64 * mi + mi;
    let translated = translate_rows(chain, shift);
    let se = strip_energy(&translated, -mi..=mi - 1, m);
    Averaged { k, shift, translated, strip_energy: se, full_energy: full, strip_energies: energies, bound }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CutSide {
    Left,
    Right,
    Both,
}

#[derive(Debug, Clone)]
pub struct CutResult {
    pub chain: ChainState,
    /// Atoms at which the configuration was glued, with the well matrix used.
    pub cuts: Vec<(i64, Mat2)>,
    pub energy_before: f64,
    pub energy_after: f64,
    /// `energy_after - energy_before`.
    pub w: f64,
    pub violations_before: usize,
    pub violations_after: usize,
}

/// Replaces the configuration beyond a near-well bond by the exact affine well map.
///
/// Searching outward from `anchor` over at most `⌈n^α⌉` atoms, the first atom `r`
/// whose adjacent kept bond is, in every row, within `closeness · n^{-α/4}` of `U0`
/// or `Q U1` becomes the glue point; everything past it follows that matrix and
/// the clamp on that side moves with it.
pub fn cut_and_extend(chain: &ChainState, anchor: i64, side: CutSide, alpha: f64, closeness: f64) -> Result<CutResult> {
    let g = chain.geometry;
    let nf = g.n as f64;
    let reach = nf.powf(alpha).ceil() as i64;
    let tol = closeness * nf.powf(-alpha / 4.0);
    let field = reconstruct(chain);
    let violations_before = check_admissible(&field).len();
    let energy_before = surface_energy(chain);
    let wells = &chain.wells;
    let candidates = [wells.u0, wells.q * wells.u1];
    let h = g.lambda_n();

    let mut out = chain.clone();
    let mut cuts = Vec::new();
    let sides: &[i64] = match side {
        CutSide::Right => &[1],
        CutSide::Left => &[-1],
        CutSide::Both => &[1, -1],
    };
    for &dir in sides {
        let mut found = None;
        for k in 1..=reach {
            let r = anchor + dir * k;
            // Bond kept next to the glue point: (r-1, r) going right, (r, r+1) left.
            let bond = if dir > 0 { r - 1 } else { r };
            if r <= g.first || r >= g.last || bond < g.first || bond >= g.last {
                break;
            }
            let best = candidates.iter().copied().find(|v| {
                g.rows().all(|j| (field.gradient(bond, j) - v).norm() <= tol)
            });
            if let Some(v) = best {
                let trial = extend(&out, r, dir, v, h);
                if check_admissible(&reconstruct(&trial)).len() <= violations_before {
                    found = Some((r, v, trial));
                    break;
                }
            }
        }
        let Some((r, v, trial)) = found else {
            return Err(Error::NoCutColumn(format!(
                "no bond within {reach} atoms {} of {anchor} is within {tol:.3e} of a well matrix",
                if dir > 0 { "right" } else { "left" }
            )));
        };
        out = trial;
        cuts.push((r, v));
    }
    let energy_after = surface_energy(&out);
    let violations_after = check_admissible(&reconstruct(&out)).len();
    Ok(CutResult {
        chain: out,
        cuts,
        energy_before,
        energy_after,
        w: energy_after - energy_before,
        violations_before,
        violations_after,
    })
}

fn extend(chain: &ChainState, r: i64, dir: i64, v: Mat2, h: f64) -> ChainState {
    let mut out = chain.clone();
    let g = chain.geometry;
    let ur = chain.atom(r);
    let clamp = AffineClamp::new(v, ur - v * Vec2::new(r as f64 * h, 0.0));
    for i in g.indices() {
        if (i - r) * dir > 0 {
            out.set_atom(i, clamp.at(i as f64 * h));
            out.tau_angles[(i - g.first) as usize] = 0.0;
        }
    }
    if dir > 0 {
        out.boundary.right = clamp;
    } else {
        out.boundary.left = clamp;
    }
    out.boundary.kind = crate::lattice::BoundaryKind::Layer;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Boundary data on columns `<= 0`, far field on the right.
    BPlus,
    /// Far field on the left, boundary data on columns `>= 0`.
    BMinus,
    /// Far fields on both sides.
    C,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerKind::BPlus => "B+",
            LayerKind::BMinus => "B-",
            LayerKind::C => "C",
        })
    }
}

/// One layer problem on a rescaled strip. The offset `r*` shifts the far-field
/// clamp: the right one for `B+` and `C`, the left one for `B-`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub v_left: Mat2,
    pub v_right: Mat2,
    pub offset: Vec2,
    pub truncation: usize,
    pub n: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, v_left: Mat2, v_right: Mat2, n: usize) -> Self {
        Self { kind, v_left, v_right, offset: Vec2::zeros(), truncation: 3 * n, n }
    }

    fn geometry(&self) -> Result<LatticeGeometry> {
        let l = self.truncation as i64;
        match self.kind {
            LayerKind::C => LatticeGeometry::strip(self.n, -l, l),
            LayerKind::BPlus => LatticeGeometry::strip(self.n, 0, l),
            LayerKind::BMinus => LatticeGeometry::strip(self.n, -l, 0),
        }
    }

    fn clamps(&self, offset: Vec2) -> (AffineClamp, AffineClamp) {
        match self.kind {
            LayerKind::BMinus => (AffineClamp::new(self.v_left, offset), AffineClamp::new(self.v_right, Vec2::zeros())),
            _ => (AffineClamp::new(self.v_left, Vec2::zeros()), AffineClamp::new(self.v_right, offset)),
        }
    }

    /// Weight of the far-field offset at atom `i` for the linear initial ramp.
    fn ramp(&self, g: &LatticeGeometry, i: i64) -> f64 {
        let span = (g.last - g.first) as f64;
        match self.kind {
            LayerKind::BMinus => (g.last - i) as f64 / span,
            _ => (i - g.first) as f64 / span,
        }
        .clamp(0.0, 1.0)
    }

    /// Piecewise-affine start: `v_left` up to column 0, `v_right` after, with the
    /// offset spread linearly so the clamps are met.
    pub fn initial_chain(&self, wells: &WellPair, offset: Vec2) -> Result<ChainState> {
        let g = self.geometry()?;
        let (left, right) = self.clamps(offset);
        let bc = BoundaryData::layer(left, right);
        let u = g
            .indices()
            .map(|i| {
                let x = Vec2::new(i as f64, 0.0);
                let base = if i <= 0 { self.v_left * x } else { self.v_right * x };
                base + offset * self.ramp(&g, i)
            })
            .collect();
        ChainState::new(g, wells.clone(), bc, u, vec![0.0; g.len()])
    }

    /// `warm` moved onto new clamps with offset `offset`.
    fn rebase(&self, warm: &ChainState, old: Vec2, offset: Vec2) -> ChainState {
        let mut c = warm.clone();
        let g = c.geometry;
        for (k, i) in g.indices().enumerate() {
            c.u[k] += (offset - old) * self.ramp(&g, i);
        }
        let (l, r) = self.clamps(offset);
        c.boundary.left = l;
        c.boundary.right = r;
        c.clamp_ends();
        c
    }

    /// Energy of the outermost free far-field column(s).
    fn tail_energy(&self, chain: &ChainState) -> f64 {
        let bd = chain_energy(chain);
        let g = &chain.geometry;
        let inv = 1.0 / g.n as f64;
        let left = bd.col_sum(g.first + 1) * inv;
        let right = bd.col_sum(g.last - 1) * inv;
        match self.kind {
            LayerKind::C => left.max(right),
            LayerKind::BPlus => right,
            LayerKind::BMinus => left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearch {
    pub n_sequence: Vec<usize>,
    /// `L = truncation_factor · n`.
    pub truncation_factor: usize,
    pub optimize_offset: bool,
    /// Initial simplex edge for the offset search, lattice units.
    pub simplex_step: f64,
    pub ftol: f64,
    pub max_evaluations: usize,
    pub tail_tol: f64,
    pub max_doublings: usize,
    /// A solve that stalls at its rounding floor still counts when its gradient
    /// is below this. With variable elongations the floor sits near `1e-10` at
    /// `n = 40`.
    pub floor_grad_tol: f64,
    /// Relative change between the two largest `n` accepted as stabilized.
    pub stabilization_tol: f64,
}

impl Default for LayerSearch {
    fn default() -> Self {
        Self {
            n_sequence: vec![10, 20, 40],
            truncation_factor: 3,
            optimize_offset: true,
            simplex_step: 0.25,
            ftol: 1e-10,
            max_evaluations: 150,
            tail_tol: 1e-8,
            max_doublings: 2,
            floor_grad_tol: 1e-8,
            stabilization_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRun {
    pub n: usize,
    pub truncation: usize,
    pub estimate: f64,
    pub offset: Vec2,
    pub converged: bool,
    pub tail_energy: f64,
    pub evaluations: usize,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEnergyEstimate {
    pub kind: LayerKind,
    pub v_left: Mat2,
    pub v_right: Mat2,
    /// Estimate at the largest `n` whose run converged.
    pub value: f64,
    pub offset: Vec2,
    pub n_sequence: Vec<LayerRun>,
    /// Offsets evaluated at the largest `n`, in order, with their energies.
    pub offsets_tried: Vec<(Vec2, f64)>,
    pub converged_flag: bool,
    pub stabilization_gap: f64,
    #[serde(skip)]
    pub best_chain: Option<ChainState>,
}

/// Minimal energy of one layer problem at a fixed offset, warm-started if possible.
struct LayerEvaluator<'a> {
    spec: LayerSpec,
    wells: &'a WellPair,
    opts: MinimizeOptions,
    warm: Option<(Vec2, ChainState)>,
    evaluations: usize,
    newton_iterations: usize,
    tried: Vec<(Vec2, f64)>,
    best: Option<(f64, Vec2, ChainState)>,
    failures: usize,
    floor_grad_tol: f64,
}

impl<'a> LayerEvaluator<'a> {
    fn new(spec: LayerSpec, wells: &'a WellPair, opts: MinimizeOptions, floor_grad_tol: f64) -> Self {
        Self {
            spec,
            wells,
            opts,
            warm: None,
            evaluations: 0,
            newton_iterations: 0,
            tried: Vec::new(),
            best: None,
            failures: 0,
            floor_grad_tol,
        }
    }

    fn eval(&mut self, r: Vec2) -> Result<f64> {
        self.evaluations += 1;
        let start = match &self.warm {
            Some((old, c)) => self.spec.rebase(c, *old, r),
            None => self.spec.initial_chain(self.wells, r)?,
        };
        let usable = |rep: &MinimizationReport| {
            rep.converged
                || (matches!(rep.termination, Termination::Stalled | Termination::StepCollapse)
                    && rep.final_grad_norm() <= self.floor_grad_tol)
        };
        let mut rep = newton_minimize(&start, &self.opts);
        self.newton_iterations += rep.iterations;
        if !usable(&rep) && self.warm.is_some() {
            rep = newton_minimize(&self.spec.initial_chain(self.wells, r)?, &self.opts);
            self.newton_iterations += rep.iterations;
        }
        let e = rep.final_energy();
        self.tried.push((r, e));
        if !usable(&rep) || rep.admissibility_violations > 0 {
            self.failures += 1;
            return Ok(f64::INFINITY);
        }
        if self.best.as_ref().map_or(true, |b| e < b.0) {
            self.best = Some((e, r, rep.final_chain.clone()));
        }
        self.warm = Some((r, rep.final_chain));
        Ok(e)
    }
}

/// Nelder–Mead in two dimensions. Returns the best vertex and its value.
pub fn nelder_mead_2d<F>(mut f: F, x0: Vec2, step: f64, ftol: f64, max_evals: usize) -> Result<(Vec2, f64, usize)>
where
    F: FnMut(Vec2) -> Result<f64>,
{
    let mut evals = 0;
    let mut call = |x: Vec2, evals: &mut usize| -> Result<f64> {
        *evals += 1;
        f(x)
    };
    let mut s = [x0, x0 + Vec2::new(step, 0.0), x0 + Vec2::new(0.0, step)];
    let mut v = [call(s[0], &mut evals)?, call(s[1], &mut evals)?, call(s[2], &mut evals)?];
    loop {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        s = [s[idx[0]], s[idx[1]], s[idx[2]]];
        v = [v[idx[0]], v[idx[1]], v[idx[2]]];
        let spread = (v[2] - v[0]).abs();
        let size = (s[1] - s[0]).norm().max((s[2] - s[0]).norm());
        if (spread.is_finite() && spread <= ftol * (1.0 + v[0].abs()) && size < 1e-3) || size < 1e-9 || evals >= max_evals {
            return Ok((s[0], v[0], evals));
        }
        let c = (s[0] + s[1]) * 0.5;
        let xr = c + (c - s[2]);
        let fr = call(xr, &mut evals)?;
        if fr < v[0] {
            let xe = c + (c - s[2]) * 2.0;
            let fe = call(xe, &mut evals)?;
            if fe < fr {
                (s[2], v[2]) = (xe, fe);
            } else {
                (s[2], v[2]) = (xr, fr);
            }
            continue;
        }
        if fr < v[1] {
            (s[2], v[2]) = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < v[2] {
            let xc = c + (xr - c) * 0.5;
            (xc, call(xc, &mut evals)?)
        } else {
            let xc = c + (s[2] - c) * 0.5;
            (xc, call(xc, &mut evals)?)
        };
        if fc < v[2].min(fr) {
            (s[2], v[2]) = (xc, fc);
            continue;
        }
        for k in 1..3 {
            s[k] = s[0] + (s[k] - s[0]) * 0.5;
            v[k] = call(s[k], &mut evals)?;
        }
    }
}

fn run_layer(spec: LayerSpec, wells: &WellPair, opts: &MinimizeOptions, search: &LayerSearch, start: Vec2) -> Result<(LayerRun, Vec<(Vec2, f64)>, Option<ChainState>)> {
    let mut spec = spec;
    let mut offset = start;
    let mut doublings = 0;
    loop {
        let mut ev = LayerEvaluator::new(spec, wells, *opts, search.floor_grad_tol);
        let (r, e) = if search.optimize_offset {
            let (r, e, _) = nelder_mead_2d(|x| ev.eval(x), offset, search.simplex_step, search.ftol, search.max_evaluations)?;
            (r, e)
        } else {
            (offset, ev.eval(offset)?)
        };
        let best_chain = ev.best.as_ref().map(|b| b.2.clone());
        let tail = best_chain.as_ref().map_or(f64::INFINITY, |c| spec.tail_energy(c));
        let converged = e.is_finite();
        if converged && tail >= search.tail_tol && doublings < search.max_doublings {
            doublings += 1;
            spec.truncation *= 2;
            offset = r;
            continue;
        }
        let run = LayerRun {
            n: spec.n,
            truncation: spec.truncation,
            estimate: e,
            offset: r,
            converged,
            tail_energy: tail,
            evaluations: ev.evaluations,
            newton_iterations: ev.newton_iterations,
        };
        return Ok((run, ev.tried, best_chain));
    }
}

/// Layer energy of `spec` for each `n` of `search.n_sequence`, with `L = factor·n`,
/// minimized over the far-field offset starting from `spec.offset`.
pub fn estimate_layer(spec: &LayerSpec, wells: &WellPair, opts: &MinimizeOptions, search: &LayerSearch) -> Result<LayerEnergyEstimate> {
    if !opts.variable_tau {
        return Err(Error::InvalidParameter("layer problems minimize over the elongation angles; set variable_tau".into()));
    }
    if search.n_sequence.is_empty() {
        return Err(Error::InvalidParameter("empty n sequence".into()));
    }
    // A layer between equal states attains its minimum 0 at zero offset.
    let same = LayerSearch { optimize_offset: false, ..search.clone() };
    let search = if spec.kind == LayerKind::C && spec.v_left == spec.v_right && spec.offset == Vec2::zeros() {
        &same
    } else {
        search
    };
    let mut runs = Vec::new();
    let mut tried = Vec::new();
    let mut best_chain = None;
    let mut start = spec.offset;
    for &n in &search.n_sequence {
        let s = LayerSpec { n, truncation: (search.truncation_factor * n).max(n), ..*spec };
        let (run, t, chain) = run_layer(s, wells, opts, search, start)?;
        if run.converged {
            start = run.offset;
            best_chain = chain;
        } else {
            log::warn!("{} layer at n = {n} did not converge", spec.kind);
        }
        tried = t;
        runs.push(run);
    }
    let good: Vec<&LayerRun> = runs.iter().filter(|r| r.converged).collect();
    let (value, offset) = good.last().map_or((f64::INFINITY, spec.offset), |r| (r.estimate, r.offset));
    let gap = match good.len() {
        0 | 1 => f64::INFINITY,
        k => {
            let (a, b) = (good[k - 2].estimate, good[k - 1].estimate);
            let d = (a - b).abs();
            if b.abs() > 1e-10 {
                d / b.abs()
            } else {
                d
            }
        }
    };
    Ok(LayerEnergyEstimate {
        kind: spec.kind,
        v_left: spec.v_left,
        v_right: spec.v_right,
        value,
        offset,
        n_sequence: runs,
        offsets_tried: tried,
        converged_flag: gap <= search.stabilization_tol,
        stabilization_gap: gap,
        best_chain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EkEstimate {
    pub value: f64,
    pub terms: Vec<LayerEnergyEstimate>,
    /// Re-evaluation of every term at its final offset; equals `value` when the
    /// coordinate descent has settled.
    pub verification: f64,
}

/// `B+(V0, V1) + Σ C(V_s, V_{s+1}) + B-(V_{K-1}, V_K)` minimized over the offsets.
///
/// Each offset enters exactly one term, so coordinate descent over `r_0..r_{K-1}`
/// settles after one sweep; a second pass re-evaluates the terms at the final
/// offsets as a check. Terms are independent and run concurrently; results are
/// summed in sequence order.
pub fn estimate_ek(v: &[Mat2], wells: &WellPair, opts: &MinimizeOptions, search: &LayerSearch) -> Result<EkEstimate> {
    if v.len() < 3 {
        return Err(Error::InvalidParameter("need V_0, ..., V_K with K >= 2".into()));
    }
    let k = v.len() - 1;
    if (v[0] - v[k]).norm() > 1e-12 {
        return Err(Error::InvalidParameter("V_0 and V_K must both be the boundary gradient".into()));
    }
    let qu1 = wells.q * wells.u1;
    for (s, m) in v[1..k].iter().enumerate() {
        if (m - wells.u0).norm() > 1e-12 && (m - qu1).norm() > 1e-12 {
            return Err(Error::InvalidParameter(format!("V_{} is neither U0 nor Q U1", s + 1)));
        }
    }
    let mut specs = vec![LayerSpec::new(LayerKind::BPlus, v[0], v[1], 1)];
    for s in 1..k - 1 {
        specs.push(LayerSpec::new(LayerKind::C, v[s], v[s + 1], 1));
    }
    specs.push(LayerSpec::new(LayerKind::BMinus, v[k - 1], v[k], 1));
    let terms = specs
        .par_iter()
        .map(|s| estimate_layer(s, wells, opts, search))
        .collect::<Result<Vec<_>>>()?;
    let value = terms.iter().map(|t| t.value).sum();
    let last_n = *search.n_sequence.last().expect("non-empty");
    let verification = specs
        .par_iter()
        .zip(&terms)
        .map(|(s, t)| {
            let fixed = LayerSearch { optimize_offset: false, n_sequence: vec![last_n], ..search.clone() };
            estimate_layer(&LayerSpec { offset: t.offset, ..*s }, wells, opts, &fixed).map(|e| e.value)
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .sum();
    Ok(EkEstimate { value, terms, verification })
}
