//! The quartic two-well density and the lattice Hamiltonian, evaluated either on the
//! reconstructed lattice or directly in chain variables.

use std::io::Write;
use std::ops::AddAssign;

use nalgebra::{SMatrix, SVector};

use crate::error::Result;
use crate::lattice::{ChainState, LatticeField, LatticeGeometry, Stencil};
use crate::summation::{sharded_sum, NeumaierSum};
use crate::wells::{Vec2, WellPair};

pub type Vec8 = SVector<f64, 8>;
pub type Mat8 = SMatrix<f64, 8, 8>;

/// Squared well stretches; all the density needs.
#[derive(Debug, Clone, Copy)]
pub struct DensityParams {
    pub a2: f64,
    pub b2: f64,
}

impl From<&WellPair> for DensityParams {
    fn from(w: &WellPair) -> Self {
        Self { a2: w.a * w.a, b2: w.b * w.b }
    }
}

/// Signed neighbour differences of one site in lattice units, in the order
/// `(v+, v-, h+, h-)`: vertical differences should have length `b`-or-`a`
/// depending on the well, horizontal ones the other.
pub type SiteDiffs = [Vec2; 4];

/// `B1·B2` with
/// `B1 = Σ_v (|v|²-a²)² + Σ_h (|h|²-b²)² + Σ_{v,h} (v·h)²`
/// and `B2` the same with `a` and `b` exchanged. The cross sum runs over all four
/// sign pairs.
pub fn density(p: DensityParams, d: &SiteDiffs) -> f64 {
    let [vp, vm, hp, hm] = *d;
    let (nvp, nvm, nhp, nhm) = (vp.norm_squared(), vm.norm_squared(), hp.norm_squared(), hm.norm_squared());
    let sq = |x: f64| x * x;
    let cross = sq(vp.dot(&hp)) + sq(vp.dot(&hm)) + sq(vm.dot(&hp)) + sq(vm.dot(&hm));
    let b1 = sq(nvp - p.a2) + sq(nvm - p.a2) + sq(nhp - p.b2) + sq(nhm - p.b2) + cross;
    let b2 = sq(nvp - p.b2) + sq(nvm - p.b2) + sq(nhp - p.a2) + sq(nhm - p.a2) + cross;
    b1 * b2
}

/// `h(d + δ) - h(d)` built from the increments, so its rounding error scales with
/// the change instead of with `h`. Line searches near a minimum need this: the
/// decrease they test falls below the resolution of two separate evaluations.
pub fn density_change(p: DensityParams, d: &SiteDiffs, dd: &SiteDiffs) -> f64 {
    let sq = |x: f64| x * x;
    let targets = [[p.a2, p.a2, p.b2, p.b2], [p.b2, p.b2, p.a2, p.a2]];
    let mut b = [0.0f64; 2];
    let mut db = [0.0f64; 2];
    for k in 0..4 {
        let (x, e) = (d[k], dd[k]);
        let nx = x.norm_squared();
        let dn = e.dot(&(x * 2.0 + e));
        for m in 0..2 {
            let r = nx - targets[m][k];
            b[m] += sq(r);
            db[m] += dn * (2.0 * r + dn);
        }
    }
    let (mut cross, mut dcross) = (0.0, 0.0);
    for vk in 0..2 {
        for hk in 2..4 {
            let t = d[vk].dot(&d[hk]);
            let dt = dd[vk].dot(&d[hk]) + d[vk].dot(&dd[hk]) + dd[vk].dot(&dd[hk]);
            cross += sq(t);
            dcross += dt * (2.0 * t + dt);
        }
    }
    let (b1, b2) = (b[0] + cross, b[1] + cross);
    let (d1, d2) = (db[0] + dcross, db[1] + dcross);
    d1 * b2 + b1 * d2 + d1 * d2
}

/// Density with gradient and Hessian with respect to the stacked differences
/// `(v+, v-, h+, h-)`.
pub fn density_derivatives(p: DensityParams, d: &SiteDiffs) -> (f64, Vec8, Mat8) {
    let mut b = [0.0f64; 2];
    let mut g = [Vec8::zeros(); 2];
    let mut hs = [Mat8::zeros(); 2];
    let targets = [[p.a2, p.a2, p.b2, p.b2], [p.b2, p.b2, p.a2, p.a2]];
    for (k, x) in d.iter().enumerate() {
        let nx = x.norm_squared();
        let xxt = x * x.transpose();
        for m in 0..2 {
            let r = nx - targets[m][k];
            b[m] += r * r;
            g[m].fixed_rows_mut::<2>(2 * k).axpy(4.0 * r, x, 1.0);
            let mut blk = hs[m].fixed_view_mut::<2, 2>(2 * k, 2 * k);
            blk += xxt * 8.0;
            blk[(0, 0)] += 4.0 * r;
            blk[(1, 1)] += 4.0 * r;
        }
    }
    // Cross terms are common to both brackets.
    let mut cross = 0.0;
    let mut gc = Vec8::zeros();
    let mut hc = Mat8::zeros();
    for vk in 0..2 {
        for hk in 2..4 {
            let (v, h) = (d[vk], d[hk]);
            let t = v.dot(&h);
            cross += t * t;
            gc.fixed_rows_mut::<2>(2 * vk).axpy(2.0 * t, &h, 1.0);
            gc.fixed_rows_mut::<2>(2 * hk).axpy(2.0 * t, &v, 1.0);
            hc.fixed_view_mut::<2, 2>(2 * vk, 2 * vk).add_assign(h * h.transpose() * 2.0);
            hc.fixed_view_mut::<2, 2>(2 * hk, 2 * hk).add_assign(v * v.transpose() * 2.0);
            let mut off = h * v.transpose() * 2.0;
            off[(0, 0)] += 2.0 * t;
            off[(1, 1)] += 2.0 * t;
            hc.fixed_view_mut::<2, 2>(2 * vk, 2 * hk).add_assign(off);
            hc.fixed_view_mut::<2, 2>(2 * hk, 2 * vk).add_assign(off.transpose());
        }
    }
    for m in 0..2 {
        b[m] += cross;
        g[m] += gc;
        hs[m] += hc;
    }
    let value = b[0] * b[1];
    let grad = g[0] * b[1] + g[1] * b[0];
    let hess = hs[0] * b[1] + hs[1] * b[0] + g[0] * g[1].transpose() + g[1] * g[0].transpose();
    (value, grad, hess)
}

/// Differences at chain column `c`, row `j`, from the chain variables alone:
/// `h± = (w^{c±1} - w^c) + j δ±`, `v+ = h+ + δ+ + τ^c`, `v- = h- - δ- - τ^c`
/// with `δ± = τ^{c±1} - τ^c`.
#[inline]
pub fn chain_site_diffs(s: &Stencil, c: i64, j: i64) -> SiteDiffs {
    let k = s.slot(c);
    let w0 = s.w[k];
    let t0 = s.tau[k];
    let dp = s.w[k + 1] - w0;
    let dm = s.w[k - 1] - w0;
    let tp = s.tau[k + 1] - t0;
    let tm = s.tau[k - 1] - t0;
    let jf = j as f64;
    let hp = dp + tp * jf;
    let hm = dm + tm * jf;
    let vp = dp + tp * (jf + 1.0) + t0;
    let vm = dm + tm * (jf - 1.0) - t0;
    [vp, vm, hp, hm]
}

/// Whether column `c` carries the same energy on every row (both neighbouring
/// elongation vectors equal its own).
#[inline]
pub fn column_is_uniform(s: &Stencil, c: i64) -> bool {
    let k = s.slot(c);
    s.tau[k - 1] == s.tau[k] && s.tau[k + 1] == s.tau[k]
}

/// `Σ_j h(c, j)` over the rows of column `c`.
pub fn column_energy(p: DensityParams, s: &Stencil, c: i64) -> f64 {
    let n = s.n as i64;
    if column_is_uniform(s, c) {
        density(p, &chain_site_diffs(s, c, 0)) * (2 * n + 1) as f64
    } else {
        (-n..=n).map(|j| density(p, &chain_site_diffs(s, c, j))).collect::<NeumaierSum>().value()
    }
}

/// `(1/n) Σ_{c,j} h`: the surface energy `H¹` of the chain, without materializing
/// per-site values.
pub fn surface_energy_of(p: DensityParams, s: &Stencil) -> f64 {
    let len = (s.last - s.first + 1) as usize;
    sharded_sum(len, |k| column_energy(p, s, s.first + k as i64)) / s.n as f64
}

/// Change of `H¹` between `s` and the stencil whose entries are `s + ds`, computed
/// from the increments (see [`density_change`]). Differences are linear in the
/// stencil, so `ds` goes through [`chain_site_diffs`] unchanged.
pub fn surface_energy_change(p: DensityParams, s: &Stencil, ds: &Stencil) -> f64 {
    let n = s.n as i64;
    let len = (s.last - s.first + 1) as usize;
    let column = |k: usize| {
        let c = s.first + k as i64;
        let slot = s.slot(c);
        let still = ds.tau[slot - 1] == ds.tau[slot] && ds.tau[slot + 1] == ds.tau[slot];
        if column_is_uniform(s, c) && still {
            density_change(p, &chain_site_diffs(s, c, 0), &chain_site_diffs(ds, c, 0)) * (2 * n + 1) as f64
        } else {
            (-n..=n)
                .map(|j| density_change(p, &chain_site_diffs(s, c, j), &chain_site_diffs(ds, c, j)))
                .collect::<NeumaierSum>()
                .value()
        }
    };
    sharded_sum(len, column) / s.n as f64
}

pub fn surface_energy(chain: &ChainState) -> f64 {
    surface_energy_of(DensityParams::from(&chain.wells), &chain.stencil())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyBreakdown {
    pub geometry: LatticeGeometry,
    /// `h(i, j)`, column-major: all rows of `first`, then of `first + 1`, ...
    pub local: Vec<f64>,
    /// Indexed by `j + n`.
    pub row_sums: Vec<f64>,
    /// Indexed by `i - first`.
    pub col_sums: Vec<f64>,
    /// `H_n = λ² Σ h`.
    pub total: f64,
    /// `H¹ = (1/n) Σ h`: `total / λ_n` on the physical domain, the `1/n`-weighted
    /// strip sum on a rescaled one.
    pub rescaled: f64,
}

impl EnergyBreakdown {
    fn from_local(geometry: LatticeGeometry, local: Vec<f64>) -> Self {
        let nr = geometry.num_rows();
        let col_sums: Vec<f64> = local.chunks(nr).map(|c| c.iter().copied().collect::<NeumaierSum>().value()).collect();
        let row_sums = (0..nr)
            .map(|r| local.iter().skip(r).step_by(nr).copied().collect::<NeumaierSum>().value())
            .collect();
        let sum = col_sums.iter().copied().collect::<NeumaierSum>().value();
        let h = geometry.lambda_n();
        let total = h * h * sum;
        let rescaled = if geometry.rescaled { sum / geometry.n as f64 } else { total / h };
        Self { geometry, local, row_sums, col_sums, total, rescaled }
    }

    pub fn local(&self, i: i64, j: i64) -> f64 {
        let g = &self.geometry;
        self.local[(i - g.first) as usize * g.num_rows() + (j + g.n as i64) as usize]
    }

    pub fn row_sum(&self, j: i64) -> f64 {
        self.row_sums[(j + self.geometry.n as i64) as usize]
    }

    pub fn col_sum(&self, i: i64) -> f64 {
        self.col_sums[(i - self.geometry.first) as usize]
    }

    /// Writes the `h(i, j)` matrix (one line per row `j`, one column per `i`)
    /// after `#` comment lines carrying `header` and the summary.
    pub fn write_csv<W: Write>(&self, header: &[(String, String)], a: f64, lambda: Option<f64>, mut w: W) -> Result<()> {
        let g = &self.geometry;
        for (k, v) in header {
            writeln!(w, "# {k} = {v}")?;
        }
        let lam = lambda.map_or("none".to_string(), |l| format!("{l:.16e}"));
        writeln!(
            w,
            "# summary: n = {}, a = {a:.16e}, lambda = {lam}, total = {:.16e}, rescaled = {:.16e}",
            g.n, self.total, self.rescaled
        )?;
        write!(w, "j")?;
        for i in g.indices() {
            write!(w, ",{i}")?;
        }
        writeln!(w)?;
        for j in g.rows() {
            write!(w, "{j}")?;
            for i in g.indices() {
                write!(w, ",{:.16e}", self.local(i, j))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Energy from materialized lattice positions: every site `(i, j)` in the domain
/// reads its four neighbours directly off the field.
pub fn lattice_energy(field: &LatticeField, wells: &WellPair) -> EnergyBreakdown {
    let g = field.geometry;
    let p = DensityParams::from(wells);
    let inv = 1.0 / g.lambda_n();
    let mut local = Vec::with_capacity(g.len() * g.num_rows());
    for i in g.indices() {
        for j in g.rows() {
            let o = field.position(i, j);
            let d = [
                (field.position(i + 1, j + 1) - o) * inv,
                (field.position(i - 1, j - 1) - o) * inv,
                (field.position(i + 1, j) - o) * inv,
                (field.position(i - 1, j) - o) * inv,
            ];
            local.push(density(p, &d));
        }
    }
    EnergyBreakdown::from_local(g, local)
}

/// Energy in chain variables, without reconstructing the lattice.
pub fn chain_energy(chain: &ChainState) -> EnergyBreakdown {
    let g = chain.geometry;
    let p = DensityParams::from(&chain.wells);
    let s = chain.stencil();
    let mut local = Vec::with_capacity(g.len() * g.num_rows());
    for c in g.indices() {
        if column_is_uniform(&s, c) {
            let v = density(p, &chain_site_diffs(&s, c, 0));
            local.extend(std::iter::repeat(v).take(g.num_rows()));
        } else {
            local.extend(g.rows().map(|j| density(p, &chain_site_diffs(&s, c, j))));
        }
    }
    EnergyBreakdown::from_local(g, local)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    pub threshold: f64,
    /// Sites `(i, j)` with `h(i, j) >= threshold`.
    pub sites: Vec<(i64, i64)>,
    /// Rows whose weighted sum `(1/n) Σ_i h(i, j)` reaches the threshold.
    pub rows: Vec<i64>,
    /// Flagged-site count per row, indexed by `j + n`.
    pub per_row: Vec<usize>,
}

impl Census {
    pub fn site_count(&self) -> usize {
        self.sites.len()
    }
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
    pub fn max_per_row(&self) -> usize {
        self.per_row.iter().copied().max().unwrap_or(0)
    }
}

pub fn local_energy_threshold_census(bd: &EnergyBreakdown, threshold: f64) -> Census {
    let g = &bd.geometry;
    let inv_n = 1.0 / g.n as f64;
    let mut sites = Vec::new();
    let mut per_row = vec![0; g.num_rows()];
    for i in g.indices() {
        for j in g.rows() {
            if bd.local(i, j) >= threshold {
                sites.push((i, j));
                per_row[(j + g.n as i64) as usize] += 1;
            }
        }
    }
    let rows = g.rows().filter(|&j| bd.row_sum(j) * inv_n >= threshold).collect();
    Census { threshold, sites, rows, per_row }
}
