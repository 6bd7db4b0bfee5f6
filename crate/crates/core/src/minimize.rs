//! Twin initial states and the damped Newton minimizer.
//!
//! The objective is the surface energy `H¹ = (1/n) Σ h`, differentiated with
//! respect to the free atoms in lattice units (`w = u/λ`) and, optionally, the free
//! elongation angles. These units make gradients and Hessians independent of `n`
//! in scale, so a single absolute gradient tolerance is meaningful across sizes.

use nalgebra::{Matrix2, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::banded::BandedSym;
use crate::energy::{chain_site_diffs, column_is_uniform, density_derivatives, surface_energy, surface_energy_change, surface_energy_of, DensityParams};
use crate::error::{Error, Result};
use crate::lattice::{check_admissible, reconstruct, BoundaryData, ChainState, LatticeGeometry, Stencil};
use crate::wells::{rotation, Vec2, WellPair};

type Vec9 = SVector<f64, 9>;
type Mat9 = SMatrix<f64, 9, 9>;
type Jac = SMatrix<f64, 8, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self { armijo_c: 1e-4, backtrack: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizeOptions {
    pub variable_tau: bool,
    pub grad_tol: f64,
    pub max_iters: usize,
    /// First Levenberg shift tried once the plain Hessian fails to factor.
    pub hessian_regularization: f64,
    pub line_search: LineSearch,
    /// Step halvings allowed when a trial step inverts a triangle.
    pub max_admissibility_retries: usize,
    /// Backtracking steps before the line search gives up.
    pub max_backtracks: usize,
    /// Consecutive accepted steps that leave the energy flat to rounding before
    /// the run is declared stalled.
    pub stall_window: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            variable_tau: false,
            grad_tol: 1e-10,
            max_iters: 500,
            hessian_regularization: 1e-8,
            line_search: LineSearch::default(),
            max_admissibility_retries: 20,
            max_backtracks: 60,
            stall_window: 10,
        }
    }
}

impl MinimizeOptions {
    pub fn validate(&self) -> Result<()> {
        let ls = &self.line_search;
        if !(self.grad_tol > 0.0 && self.hessian_regularization > 0.0 && ls.armijo_c > 0.0 && ls.armijo_c < 1.0) {
            return Err(Error::InvalidParameter("tolerances must be positive and armijo_c < 1".into()));
        }
        if self.stall_window == 0 {
            return Err(Error::InvalidParameter("stall_window must be at least 1".into()));
        }
        if !(ls.backtrack > 0.0 && ls.backtrack < 1.0) {
            return Err(Error::InvalidParameter(format!("backtrack must lie in (0, 1), got {}", ls.backtrack)));
        }
        Ok(())
    }
}

/// Twin with the interface at chain index `interface_column`: `U0 x + c1` up to the
/// interface, `Q U1 x + c2` after it, `τⁱ ≡ τ`. `c1` matches the left clamp and `c2`
/// makes the two branches agree at the interface atom. The right clamp is met as
/// well exactly when the interface sits where the boundary data put it (column
/// `(1-2λ)n` for `F_λ` data, column 0 for twin data).
pub fn twin_chain(
    geometry: LatticeGeometry,
    wells: &WellPair,
    interface_column: i64,
    boundary: BoundaryData,
) -> Result<ChainState> {
    if !(geometry.first < interface_column && interface_column < geometry.last) {
        return Err(Error::InvalidParameter(format!(
            "interface column {interface_column} must lie strictly inside [{}, {}]",
            geometry.first, geometry.last
        )));
    }
    let h = geometry.lambda_n();
    let qu1 = wells.q * wells.u1;
    let x_first = Vec2::new(geometry.first as f64 * h, 0.0);
    let x_s = Vec2::new(interface_column as f64 * h, 0.0);
    let c1 = boundary.left.at(x_first.x) - wells.u0 * x_first;
    let c2 = wells.u0 * x_s + c1 - qu1 * x_s;
    let u = geometry
        .indices()
        .map(|i| {
            let x = Vec2::new(i as f64 * h, 0.0);
            if i <= interface_column {
                wells.u0 * x + c1
            } else {
                qu1 * x + c2
            }
        })
        .collect();
    ChainState::new(geometry, wells.clone(), boundary, u, vec![0.0; geometry.len()])
}

/// The energy as a function of the free chain variables.
#[derive(Debug, Clone)]
pub struct Objective {
    template: ChainState,
    base: Stencil,
    params: DensityParams,
    variable_tau: bool,
}

impl Objective {
    pub fn new(chain: &ChainState, variable_tau: bool) -> Self {
        Self {
            template: chain.clone(),
            base: chain.stencil(),
            params: DensityParams::from(&chain.wells),
            variable_tau,
        }
    }

    /// Variables per free atom: `(wx, wy)` or `(wx, wy, θ)`.
    pub fn block(&self) -> usize {
        if self.variable_tau {
            3
        } else {
            2
        }
    }

    pub fn free_atoms(&self) -> std::ops::Range<i64> {
        let g = &self.template.geometry;
        g.first + 1..g.last
    }

    pub fn dim(&self) -> usize {
        (self.template.geometry.len() - 2) * self.block()
    }

    fn var(&self, i: i64) -> Option<usize> {
        let g = &self.template.geometry;
        (g.first < i && i < g.last).then(|| (i - g.first - 1) as usize * self.block())
    }

    pub fn vector_of(&self, chain: &ChainState) -> Vec<f64> {
        let inv = 1.0 / chain.geometry.lambda_n();
        let mut x = Vec::with_capacity(self.dim());
        for i in self.free_atoms() {
            let w = chain.atom(i) * inv;
            x.push(w.x);
            x.push(w.y);
            if self.variable_tau {
                x.push(chain.theta(i));
            }
        }
        x
    }

    pub fn chain_of(&self, x: &[f64]) -> ChainState {
        let mut c = self.template.clone();
        let h = c.geometry.lambda_n();
        let d = self.block();
        for (k, i) in self.free_atoms().enumerate() {
            c.set_atom(i, Vec2::new(x[k * d], x[k * d + 1]) * h);
            if self.variable_tau {
                c.tau_angles[(i - c.geometry.first) as usize] = x[k * d + 2];
            }
        }
        c
    }

    fn stencil_of(&self, x: &[f64]) -> Stencil {
        let mut s = self.base.clone();
        let d = self.block();
        let tau0 = self.template.wells.tau;
        for (k, i) in self.free_atoms().enumerate() {
            let slot = s.slot(i);
            s.w[slot] = Vec2::new(x[k * d], x[k * d + 1]);
            if self.variable_tau {
                let t = x[k * d + 2];
                s.tau[slot] = if t == 0.0 { tau0 } else { rotation(t) * tau0 };
            }
        }
        s
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        surface_energy_of(self.params, &self.stencil_of(x))
    }

    /// `energy(xt) - energy(x)`, accurate relative to the change itself.
    pub fn energy_change(&self, x: &[f64], xt: &[f64]) -> f64 {
        let s = self.stencil_of(x);
        let mut ds = Stencil { w: vec![Vec2::zeros(); s.w.len()], tau: vec![Vec2::zeros(); s.tau.len()], ..s.clone() };
        let d = self.block();
        let tau0 = self.template.wells.tau;
        for (k, i) in self.free_atoms().enumerate() {
            let slot = s.slot(i);
            ds.w[slot] = Vec2::new(xt[k * d] - x[k * d], xt[k * d + 1] - x[k * d + 1]);
            if self.variable_tau {
                // R(θ + δ) - R(θ) = R(θ)(R(δ) - I), with cos δ - 1 = -2 sin²(δ/2).
                let (t, dt) = (x[k * d + 2], xt[k * d + 2] - x[k * d + 2]);
                let (sn, hs) = (dt.sin(), (0.5 * dt).sin());
                let c1 = -2.0 * hs * hs;
                let r = Vec2::new(c1 * tau0.x - sn * tau0.y, sn * tau0.x + c1 * tau0.y);
                ds.tau[slot] = if t == 0.0 { r } else { rotation(t) * r };
            }
        }
        surface_energy_change(self.params, &s, &ds)
    }

    /// Value, gradient and Hessian of column `c` in local variables
    /// `(w^{c-1}, w^c, w^{c+1}, θ^{c-1}, θ^c, θ^{c+1})`, unweighted.
    fn column_local(&self, s: &Stencil, c: i64, hessian: bool) -> (f64, Vec9, Mat9) {
        let n = s.n as i64;
        let k = s.slot(c);
        let jt = |t: Vec2| Vec2::new(-t.y, t.x);
        let (tm, t0, tp) = (s.tau[k - 1], s.tau[k], s.tau[k + 1]);
        // Jacobian of (v+, v-, h+, h-) is A + j B; the second θ-derivatives are
        // A2 + j B2 (same pattern with -τ in place of Jτ).
        let mut a = Jac::zeros();
        let mut b = Jac::zeros();
        let mut a2 = Jac::zeros();
        let mut b2 = Jac::zeros();
        let eye = Matrix2::<f64>::identity();
        for (row, plus) in [(0usize, true), (1, false), (2, true), (3, false)] {
            let r = 2 * row;
            let nb = if plus { 4 } else { 0 };
            a.fixed_view_mut::<2, 2>(r, nb).copy_from(&eye);
            a.fixed_view_mut::<2, 2>(r, 2).copy_from(&(-eye));
        }
        let put = |m: &mut Jac, m2: &mut Jac, row: usize, col: usize, coef: f64, t: Vec2| {
            let r = 2 * row;
            let v = jt(t) * coef;
            m[(r, col)] += v.x;
            m[(r + 1, col)] += v.y;
            let v2 = -t * coef;
            m2[(r, col)] += v2.x;
            m2[(r + 1, col)] += v2.y;
        };
        // v+ : (j+1) τ+ - j τ0
        put(&mut a, &mut a2, 0, 8, 1.0, tp);
        put(&mut b, &mut b2, 0, 8, 1.0, tp);
        put(&mut b, &mut b2, 0, 7, -1.0, t0);
        // v- : (j-1) τ- - j τ0
        put(&mut a, &mut a2, 1, 6, -1.0, tm);
        put(&mut b, &mut b2, 1, 6, 1.0, tm);
        put(&mut b, &mut b2, 1, 7, -1.0, t0);
        // h+ : j τ+ - j τ0
        put(&mut b, &mut b2, 2, 8, 1.0, tp);
        put(&mut b, &mut b2, 2, 7, -1.0, t0);
        // h- : j τ- - j τ0
        put(&mut b, &mut b2, 3, 6, 1.0, tm);
        put(&mut b, &mut b2, 3, 7, -1.0, t0);

        let curvature = |g: &SVector<f64, 8>, m2: &Jac, out: &mut Mat9, scale: f64| {
            for col in 6..9 {
                out[(col, col)] += scale * m2.column(col).dot(g);
            }
        };
        let mut val = 0.0;
        let mut grad = Vec9::zeros();
        let mut hess = Mat9::zeros();
        if column_is_uniform(s, c) {
            let rows = (2 * n + 1) as f64;
            let s2 = (n * (n + 1) * (2 * n + 1)) as f64 / 3.0;
            let (v, g, h) = density_derivatives(self.params, &chain_site_diffs(s, c, 0));
            val = rows * v;
            grad = a.transpose() * g * rows;
            if hessian {
                hess = a.transpose() * h * a * rows + b.transpose() * h * b * s2;
                curvature(&g, &a2, &mut hess, rows);
            }
        } else {
            for j in -n..=n {
                let jf = j as f64;
                let (v, g, h) = density_derivatives(self.params, &chain_site_diffs(s, c, j));
                let jac = a + b * jf;
                val += v;
                grad += jac.transpose() * g;
                if hessian {
                    hess += jac.transpose() * h * jac;
                    let m2 = a2 + b2 * jf;
                    curvature(&g, &m2, &mut hess, 1.0);
                }
            }
        }
        (val, grad, hess)
    }

    /// Global variable index of local slot `l` at column `c`.
    fn global(&self, c: i64, l: usize) -> Option<usize> {
        let (atom, comp) = if l < 6 { (c - 1 + (l / 2) as i64, l % 2) } else { (c - 1 + (l - 6) as i64, 2) };
        if comp == 2 && !self.variable_tau {
            return None;
        }
        self.var(atom).map(|base| base + comp)
    }

    /// Energy, gradient and (optionally) banded Hessian at `x`.
    pub fn derivatives(&self, x: &[f64], hessian: bool) -> (f64, Vec<f64>, Option<BandedSym>) {
        let s = self.stencil_of(x);
        let g = &self.template.geometry;
        let w = 1.0 / g.n as f64;
        let d = self.block();
        let mut grad = vec![0.0; self.dim()];
        let mut hess = hessian.then(|| BandedSym::zeros(self.dim(), 3 * d - 1));
        // Columns beyond the free range still touch free atoms through their
        // neighbours, so every summed site contributes.
        for c in g.indices() {
            let (_, lg, lh) = self.column_local(&s, c, hessian);
            let idx: Vec<Option<usize>> = (0..9).map(|l| self.global(c, l)).collect();
            for (l, gi) in idx.iter().enumerate() {
                if let Some(p) = gi {
                    grad[*p] += w * lg[l];
                    if let Some(hm) = hess.as_mut() {
                        for (m, gj) in idx.iter().enumerate().take(l + 1) {
                            // Distinct local slots are distinct variables, so each
                            // unordered pair is visited once.
                            if let Some(q) = gj {
                                hm.add(*p, *q, w * lh[(l, m)]);
                            }
                        }
                    }
                }
            }
        }
        (surface_energy_of(self.params, &s), grad, hess)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.derivatives(x, false).1
    }

    pub fn hessian(&self, x: &[f64]) -> BandedSym {
        self.derivatives(x, true).2.expect("hessian requested")
    }

    /// Energy of the three columns touching atom `i`, with the derivatives with
    /// respect to `w^i` only.
    fn atom_local(&self, x: &[f64], i: i64) -> (f64, Vec2, Matrix2<f64>) {
        let s = self.stencil_of(x);
        let w = 1.0 / s.n as f64;
        let (mut e, mut g, mut h) = (0.0, Vec2::zeros(), Matrix2::zeros());
        for c in i - 1..=i + 1 {
            let (v, lg, lh) = self.column_local(&s, c, true);
            let off = 2 * (i - c + 1) as usize;
            e += w * v;
            g += w * Vec2::new(lg[off], lg[off + 1]);
            h += w * lh.fixed_view::<2, 2>(off, off).into_owned();
        }
        (e, g, h)
    }
}

/// Gradient of `H¹` with respect to the free variables.
pub fn gradient(chain: &ChainState, variable_tau: bool) -> Vec<f64> {
    let o = Objective::new(chain, variable_tau);
    o.gradient(&o.vector_of(chain))
}

pub fn hessian(chain: &ChainState, variable_tau: bool) -> BandedSym {
    let o = Objective::new(chain, variable_tau);
    o.hessian(&o.vector_of(chain))
}

#[derive(Debug, Clone)]
pub struct Preoptimized {
    pub chain: ChainState,
    pub converged: bool,
    pub iterations: usize,
    pub energy_before: f64,
    pub energy_after: f64,
}

/// Minimizes the energy over the middle atom (chain index 0) alone.
pub fn preoptimize_middle(chain: &ChainState) -> Preoptimized {
    preoptimize_atom(chain, 0)
}

/// Two-variable damped Newton over atom `i`, all other atoms fixed. On failure the
/// input is returned unchanged with `converged = false`.
pub fn preoptimize_atom(chain: &ChainState, i: i64) -> Preoptimized {
    let obj = Objective::new(chain, false);
    let e0 = obj.energy(&obj.vector_of(chain));
    let fail = |iterations| Preoptimized {
        chain: chain.clone(),
        converged: false,
        iterations,
        energy_before: e0,
        energy_after: e0,
    };
    let Some(slot) = obj.var(i) else {
        log::warn!("preoptimization target {i} is not a free atom");
        return fail(0);
    };
    let mut x = obj.vector_of(chain);
    let (mut e, mut g, mut h) = obj.atom_local(&x, i);
    let mut iterations = 0;
    let tol = 1e-13;
    while g.amax() > tol {
        if iterations == 200 {
            // Cycling at the rounding floor.
            if g.amax() < 1e-9 {
                break;
            }
            log::warn!("middle-atom preoptimization did not converge (|g| = {:.3e})", g.amax());
            return fail(iterations);
        }
        iterations += 1;
        let mut mu = 0.0;
        let step = loop {
            let m = h + Matrix2::identity() * mu;
            if let Some(ch) = m.cholesky() {
                break -ch.solve(&g);
            }
            mu = if mu == 0.0 { 1e-8 * (1.0 + h.amax()) } else { mu * 10.0 };
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut xt = x.clone();
            xt[slot] += t * step.x;
            xt[slot + 1] += t * step.y;
            let (et, gt, ht) = obj.atom_local(&xt, i);
            let noise = 64.0 * f64::EPSILON * e.abs();
            if et <= e + 1e-4 * t * slope || (t == 1.0 && et <= e + noise && gt.amax() < g.amax()) {
                x = xt;
                (e, g, h) = (et, gt, ht);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Stalled at rounding level: accept the point if it is stationary enough.
            if g.amax() < 1e-9 {
                break;
            }
            log::warn!("middle-atom preoptimization line search failed");
            return fail(iterations);
        }
    }
    // Copy only the target atom so every other atom keeps its exact bits.
    let mut out = chain.clone();
    out.set_atom(i, obj.chain_of(&x).atom(i));
    let e1 = surface_energy(&out);
    Preoptimized { chain: out, converged: true, iterations, energy_before: e0, energy_after: e1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    StepCollapse,
    /// The gradient sits at its rounding floor above `grad_tol`.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct MinimizationReport {
    pub final_chain: ChainState,
    pub iterations: usize,
    pub grad_norm_history: Vec<f64>,
    pub energy_history: Vec<f64>,
    /// Levenberg shift used at each iteration (0 when the Hessian factored).
    pub shift_history: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    /// Inverted triangles in the final state.
    pub admissibility_violations: usize,
    /// Trial steps shortened because they inverted a triangle.
    pub admissibility_rejections: usize,
    pub options: MinimizeOptions,
}

impl MinimizationReport {
    pub fn final_energy(&self) -> f64 {
        *self.energy_history.last().expect("history is never empty")
    }
    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norm_history.last().expect("history is never empty")
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Levenberg-regularized Newton with Armijo backtracking on `H¹`.
pub fn newton_minimize(chain: &ChainState, opts: &MinimizeOptions) -> MinimizationReport {
    let obj = Objective::new(chain, opts.variable_tau);
    let mut x = obj.vector_of(chain);
    let (mut e, mut g, mut h) = obj.derivatives(&x, true);
    let mut gn = inf_norm(&g);
    let mut energy_history = vec![e];
    let mut grad_norm_history = vec![gn];
    let mut shift_history = Vec::new();
    let mut rejections = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut last_shift = 0.0f64;
    let mut flat = 0;
    loop {
        if gn <= opts.grad_tol {
            termination = Termination::Converged;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        let hm = h.take().expect("hessian computed");
        let (step, mu) = regularized_step(&hm, &g, opts.hessian_regularization, last_shift);
        last_shift = mu;
        shift_history.push(mu);
        let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut adm_retries = 0;
        let mut accepted = None;
        let mut tries = 0;
        while tries < opts.max_backtracks {
            tries += 1;
            let xt: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            let trial = obj.chain_of(&xt);
            if !check_admissible(&reconstruct(&trial)).is_empty() {
                rejections += 1;
                adm_retries += 1;
                if adm_retries > opts.max_admissibility_retries {
                    break;
                }
                t *= 0.5;
                continue;
            }
            let de = obj.energy_change(&x, &xt);
            if de <= opts.line_search.armijo_c * t * slope {
                accepted = Some((xt, de));
                break;
            }
            t *= opts.line_search.backtrack;
        }
        let Some((xt, de)) = accepted else {
            termination = Termination::StepCollapse;
            break;
        };
        x = xt;
        // The recorded energy accumulates the accurate increments; re-evaluating
        // from scratch would add rounding noise of order ε·H¹ at every step.
        e += de;
        (_, g, h) = obj.derivatives(&x, true);
        gn = inf_norm(&g);
        energy_history.push(e);
        grad_norm_history.push(gn);
        if -de <= 64.0 * f64::EPSILON * e.abs() {
            flat += 1;
            if flat >= opts.stall_window && gn > opts.grad_tol {
                termination = Termination::Stalled;
                break;
            }
        } else {
            flat = 0;
        }
    }
    let final_chain = obj.chain_of(&x);
    let violations = check_admissible(&reconstruct(&final_chain)).len();
    MinimizationReport {
        final_chain,
        iterations,
        grad_norm_history,
        energy_history,
        shift_history,
        converged: termination == Termination::Converged,
        termination,
        admissibility_violations: violations,
        admissibility_rejections: rejections,
        options: *opts,
    }
}

/// Solves `(H + μI) p = -g` with the smallest `μ` in `{0, μ0·10^k}` that makes the
/// shifted matrix factor. The search starts near the previous iteration's shift.
fn regularized_step(h: &BandedSym, g: &[f64], mu0: f64, previous: f64) -> (Vec<f64>, f64) {
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    if let Some(ch) = h.cholesky() {
        return (ch.solve(&neg), 0.0);
    }
    let mut mu = mu0.max(previous / 100.0);
    loop {
        let mut m = h.clone();
        m.add_diagonal(mu);
        if let Some(ch) = m.cholesky() {
            return (ch.solve(&neg), mu);
        }
        mu *= 10.0;
    }
}
