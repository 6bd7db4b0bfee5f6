//! Constrained chain configurations and their reconstruction on the sheared lattice.
//!
//! A configuration is generated by the row-0 chain `uⁱ` together with one elongation
//! vector `τⁱ = R(θᵢ)τ` per chain index; the atom at lattice site `(i-j, j)` sits at
//! `uⁱ + j·λ·τⁱ`. Site `(p, q)` therefore belongs to chain index `p + q`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wells::{rotation, BoundaryGradient, Mat2, Vec2, WellPair};

/// Chain indices `first..=last`, rows `-n..=n`.
///
/// On the physical domain `first = -n`, `last = n` and the spacing is `λ_n = 1/n`.
/// Rescaled strips (spacing 1) may use any index range; layer problems need
/// half-infinite and off-center ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeGeometry {
    pub n: usize,
    pub first: i64,
    pub last: i64,
    pub rescaled: bool,
}

impl LatticeGeometry {
    pub fn physical(n: usize) -> Result<Self> {
        Self::checked(n, -(n as i64), n as i64, false)
    }

    pub fn rescaled(n: usize) -> Result<Self> {
        Self::checked(n, -(n as i64), n as i64, true)
    }

    /// Rescaled strip with chain indices `first..=last` and `2n+1` rows.
    pub fn strip(n: usize, first: i64, last: i64) -> Result<Self> {
        Self::checked(n, first, last, true)
    }

    fn checked(n: usize, first: i64, last: i64, rescaled: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be positive".into()));
        }
        if last - first < 2 {
            return Err(Error::InvalidParameter(format!(
                "chain range [{first}, {last}] has no free atom"
            )));
        }
        Ok(Self { n, first, last, rescaled })
    }

    /// Lattice spacing: `1/n`, or 1 on a rescaled domain.
    pub fn lambda_n(&self) -> f64 {
        if self.rescaled {
            1.0
        } else {
            1.0 / self.n as f64
        }
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rows(&self) -> std::ops::RangeInclusive<i64> {
        -(self.n as i64)..=self.n as i64
    }

    pub fn num_rows(&self) -> usize {
        2 * self.n + 1
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<i64> {
        self.first..=self.last
    }

    pub fn contains(&self, i: i64) -> bool {
        self.first <= i && i <= self.last
    }
}

/// `x ↦ gradient·x + offset`, evaluated on the chain row `x = (iλ, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineClamp {
    pub gradient: Mat2,
    pub offset: Vec2,
}

impl AffineClamp {
    pub fn new(gradient: Mat2, offset: Vec2) -> Self {
        Self { gradient, offset }
    }

    pub fn at(&self, x: f64) -> Vec2 {
        self.gradient * Vec2::new(x, 0.0) + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryKind {
    /// The same affine map `F_λ x` on both sides.
    Affine { lambda: f64 },
    /// `U0 x` on the left, `Q U1 x` on the right: the twin itself as far field.
    Twin,
    /// Independent clamps, as used by the layer problems.
    Layer,
}

impl fmt::Display for BoundaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryKind::Affine { .. } => f.write_str("affine"),
            BoundaryKind::Twin => f.write_str("twin"),
            BoundaryKind::Layer => f.write_str("layer"),
        }
    }
}

/// Dirichlet data: every atom with chain index `<= first` follows `left`, every
/// atom `>= last` follows `right`; their elongation angles are 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryData {
    pub kind: BoundaryKind,
    pub left: AffineClamp,
    pub right: AffineClamp,
}

impl BoundaryData {
    pub fn affine(bg: &BoundaryGradient) -> Self {
        let c = AffineClamp::new(bg.f, Vec2::zeros());
        Self { kind: BoundaryKind::Affine { lambda: bg.lambda }, left: c, right: c }
    }

    pub fn twin(wells: &WellPair) -> Self {
        Self {
            kind: BoundaryKind::Twin,
            left: AffineClamp::new(wells.u0, Vec2::zeros()),
            right: AffineClamp::new(wells.q * wells.u1, Vec2::zeros()),
        }
    }

    pub fn layer(left: AffineClamp, right: AffineClamp) -> Self {
        Self { kind: BoundaryKind::Layer, left, right }
    }

    /// The clamps only make sense if they are compatible with `θ = 0` ghosts,
    /// i.e. if `V(-1,1) = τ` for both gradients.
    fn check_compatible(&self, wells: &WellPair) -> Result<()> {
        for (side, c) in [("left", &self.left), ("right", &self.right)] {
            let r = c.gradient * Vec2::new(-1.0, 1.0) - wells.tau;
            if r.norm() > 1e-10 * wells.tau.norm() {
                return Err(Error::InvalidParameter(format!(
                    "{side} clamp gradient does not map (-1,1) to tau (residual {:.3e})",
                    r.norm()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub geometry: LatticeGeometry,
    /// `u[k]` is atom `first + k`, in the units of the domain.
    pub u: Vec<Vec2>,
    pub tau_angles: Vec<f64>,
    pub wells: WellPair,
    pub boundary: BoundaryData,
}

impl ChainState {
    /// Builds a chain; the two end atoms are overwritten with the clamp values and
    /// their angles set to zero.
    pub fn new(
        geometry: LatticeGeometry,
        wells: WellPair,
        boundary: BoundaryData,
        u: Vec<Vec2>,
        tau_angles: Vec<f64>,
    ) -> Result<Self> {
        if u.len() != geometry.len() || tau_angles.len() != geometry.len() {
            return Err(Error::SizeMismatch(format!(
                "chain has {} atoms and {} angles, geometry needs {}",
                u.len(),
                tau_angles.len(),
                geometry.len()
            )));
        }
        boundary.check_compatible(&wells)?;
        let mut chain = Self { geometry, u, tau_angles, wells, boundary };
        chain.clamp_ends();
        Ok(chain)
    }

    /// Chain sampling the clamps: `left` up to and including `split`, `right` after.
    pub fn piecewise(
        geometry: LatticeGeometry,
        wells: WellPair,
        boundary: BoundaryData,
        split: i64,
        left: AffineClamp,
        right: AffineClamp,
    ) -> Result<Self> {
        let h = geometry.lambda_n();
        let u = geometry
            .indices()
            .map(|i| if i <= split { left.at(i as f64 * h) } else { right.at(i as f64 * h) })
            .collect();
        Self::new(geometry, wells, boundary, u, vec![0.0; geometry.len()])
    }

    pub fn clamp_ends(&mut self) {
        let g = self.geometry;
        let h = g.lambda_n();
        let last = self.u.len() - 1;
        self.u[0] = self.boundary.left.at(g.first as f64 * h);
        self.u[last] = self.boundary.right.at(g.last as f64 * h);
        self.tau_angles[0] = 0.0;
        self.tau_angles[last] = 0.0;
    }

    fn slot(&self, i: i64) -> usize {
        (i - self.geometry.first) as usize
    }

    /// Atom `i`, following the clamps beyond the index range.
    pub fn atom(&self, i: i64) -> Vec2 {
        let g = &self.geometry;
        if i < g.first {
            self.boundary.left.at(i as f64 * g.lambda_n())
        } else if i > g.last {
            self.boundary.right.at(i as f64 * g.lambda_n())
        } else {
            self.u[self.slot(i)]
        }
    }

    pub fn theta(&self, i: i64) -> f64 {
        if self.geometry.contains(i) {
            self.tau_angles[self.slot(i)]
        } else {
            0.0
        }
    }

    pub fn tau(&self, i: i64) -> Vec2 {
        let t = self.theta(i);
        if t == 0.0 {
            self.wells.tau
        } else {
            rotation(t) * self.wells.tau
        }
    }

    pub fn set_atom(&mut self, i: i64, v: Vec2) {
        let k = self.slot(i);
        self.u[k] = v;
    }

    /// Same configuration moved rigidly by `c`, clamps included.
    pub fn translated(&self, c: Vec2) -> Self {
        let mut out = self.clone();
        for x in &mut out.u {
            *x += c;
        }
        out.boundary.left.offset += c;
        out.boundary.right.offset += c;
        out
    }

    /// Same configuration rotated rigidly by `r`. The wells are not rotated, so the
    /// result is generally not in the constrained class; it is meant for energy
    /// invariance checks through the lattice route.
    pub fn positions_rotated(&self, r: &Mat2) -> Vec<Vec2> {
        self.u.iter().map(|x| r * x).collect()
    }

    /// Lattice-unit stencil with two ghost columns per side.
    pub fn stencil(&self) -> Stencil {
        let g = self.geometry;
        let inv = 1.0 / g.lambda_n();
        let lo = g.first - GHOSTS;
        let hi = g.last + GHOSTS;
        Stencil {
            first: g.first,
            last: g.last,
            n: g.n,
            w: (lo..=hi).map(|i| self.atom(i) * inv).collect(),
            tau: (lo..=hi).map(|i| self.tau(i)).collect(),
        }
    }
}

pub const GHOSTS: i64 = 2;

/// Chain data in lattice units (`w = u/λ`) including ghost columns, the form the
/// energy kernels consume.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub first: i64,
    pub last: i64,
    pub n: usize,
    pub w: Vec<Vec2>,
    pub tau: Vec<Vec2>,
}

impl Stencil {
    #[inline]
    pub fn slot(&self, i: i64) -> usize {
        (i - self.first + GHOSTS) as usize
    }
    #[inline]
    pub fn w(&self, i: i64) -> Vec2 {
        self.w[self.slot(i)]
    }
    #[inline]
    pub fn tau(&self, i: i64) -> Vec2 {
        self.tau[self.slot(i)]
    }
}

/// Reconstructed lattice. Storage is keyed by (chain index `i`, row `j`); entry
/// `(i, j)` is the atom at lattice site `(i - j, j)`. One ghost row and two ghost
/// columns are kept on every side so each site in the domain has a full stencil.
#[derive(Debug, Clone)]
pub struct LatticeField {
    pub geometry: LatticeGeometry,
    positions: Vec<Vec2>,
    /// Plus-triangle gradients for bonds `first-1..=last`, rows `-n..=n`.
    gradients: Vec<Mat2>,
    /// `δⁱ = τⁱ - τ^{i-1}` for `i` in `first-1..=last+2`.
    pub deltas: Vec<Vec2>,
    row_lo: i64,
    nrows: usize,
    col_lo: i64,
}

impl LatticeField {
    pub fn position(&self, i: i64, j: i64) -> Vec2 {
        self.positions[self.pslot(i, j)]
    }

    fn pslot(&self, i: i64, j: i64) -> usize {
        debug_assert!(i >= self.col_lo && j >= self.row_lo);
        (i - self.col_lo) as usize * self.nrows + (j - self.row_lo) as usize
    }

    pub fn col_range(&self) -> std::ops::RangeInclusive<i64> {
        self.col_lo..=self.geometry.last + GHOSTS
    }

    pub fn row_range(&self) -> std::ops::RangeInclusive<i64> {
        self.row_lo..=self.row_lo + self.nrows as i64 - 1
    }

    /// Gradient on the "+" triangle with vertices `(p,q), (p+1,q), (p,q+1)`, where
    /// `(p, q)` is the site of entry `(i, j)`.
    pub fn plus_gradient(&self, i: i64, j: i64) -> Mat2 {
        let h = self.geometry.lambda_n();
        let o = self.position(i, j);
        let e1 = (self.position(i + 1, j) - o) / h;
        let e2 = (self.position(i + 1, j + 1) - o) / h;
        Mat2::from_columns(&[e1, e2])
    }

    /// Gradient on the "-" triangle with vertices `(p,q), (p-1,q), (p,q-1)`.
    pub fn minus_gradient(&self, i: i64, j: i64) -> Mat2 {
        let h = self.geometry.lambda_n();
        let o = self.position(i, j);
        let e1 = (o - self.position(i - 1, j)) / h;
        let e2 = (o - self.position(i - 1, j - 1)) / h;
        Mat2::from_columns(&[e1, e2])
    }

    /// Stored plus-triangle gradient for bond `i` (atoms `i`, `i+1`), row `j`.
    pub fn gradient(&self, i: i64, j: i64) -> Mat2 {
        let g = &self.geometry;
        let k = (i - (g.first - 1)) as usize * g.num_rows() + (j + g.n as i64) as usize;
        self.gradients[k]
    }

    pub fn bond_range(&self) -> std::ops::RangeInclusive<i64> {
        self.geometry.first - 1..=self.geometry.last
    }

    /// Row-0 chain and elongation vectors read back off the lattice.
    pub fn generating_chain(&self) -> (Vec<Vec2>, Vec<Vec2>) {
        let h = self.geometry.lambda_n();
        self.geometry
            .indices()
            .map(|i| {
                let u = self.position(i, 0);
                (u, (self.position(i, 1) - u) / h)
            })
            .unzip()
    }
}

pub fn reconstruct(chain: &ChainState) -> LatticeField {
    let g = chain.geometry;
    let h = g.lambda_n();
    let row_lo = -(g.n as i64) - 1;
    let nrows = g.num_rows() + 2;
    let col_lo = g.first - GHOSTS;
    let mut positions = Vec::with_capacity(nrows * (g.len() + 2 * GHOSTS as usize));
    for i in col_lo..=g.last + GHOSTS {
        let (u, t) = (chain.atom(i), chain.tau(i));
        for j in row_lo..row_lo + nrows as i64 {
            positions.push(u + t * (j as f64 * h));
        }
    }
    let deltas = (g.first - 1..=g.last + GHOSTS).map(|i| chain.tau(i) - chain.tau(i - 1)).collect();
    let mut field = LatticeField {
        geometry: g,
        positions,
        gradients: Vec::new(),
        deltas,
        row_lo,
        nrows,
        col_lo,
    };
    let mut gradients = Vec::with_capacity((g.len() + 1) * g.num_rows());
    for i in field.bond_range() {
        for j in g.rows() {
            gradients.push(field.plus_gradient(i, j));
        }
    }
    field.gradients = gradients;
    field
}

/// Chain whose reconstruction is `field`, using `template` for wells and clamps.
pub fn extract_chain(field: &LatticeField, template: &ChainState) -> Result<ChainState> {
    if field.geometry != template.geometry {
        return Err(Error::SizeMismatch("field and template geometries differ".into()));
    }
    let (u, taus) = field.generating_chain();
    let t0 = template.wells.tau;
    let angles = taus
        .iter()
        .map(|t| (t0.x * t.y - t0.y * t.x).atan2(t0.dot(t)))
        .collect();
    ChainState::new(field.geometry, template.wells.clone(), template.boundary, u, angles)
}

/// A lattice triangle whose image is inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Chain index and row of the lower-left corner of the unit cell.
    pub i: i64,
    pub j: i64,
    /// Which of the four corner triangles: 0 = ABC, 1 = ACD, 2 = ABD, 3 = BCD with
    /// A, B, C, D the cell corners counter-clockwise from lower left.
    pub triangle: u8,
    /// Image determinant in lattice units.
    pub det: f64,
}

/// Threshold on image determinants, in lattice units (`det / λ²`).
pub const ADMISSIBILITY_TOL: f64 = 1e-12;

/// Every unit cell contributes its four positively oriented triangles of diameter
/// `√2·λ`; any whose image determinant is below `-ADMISSIBILITY_TOL` is reported.
pub fn check_admissible(field: &LatticeField) -> Vec<Violation> {
    let g = &field.geometry;
    let h2 = g.lambda_n() * g.lambda_n();
    let det = |x: Vec2, y: Vec2, z: Vec2| {
        let (p, q) = (y - x, z - x);
        (p.x * q.y - p.y * q.x) / h2
    };
    let mut out = Vec::new();
    let (rows, cols) = (field.row_range(), field.col_range());
    for i in *cols.start()..=*cols.end() - 2 {
        for j in *rows.start()..*rows.end() {
            let a = field.position(i, j);
            let b = field.position(i + 1, j);
            let c = field.position(i + 2, j + 1);
            let d = field.position(i + 1, j + 1);
            for (t, (x, y, z)) in [(a, b, c), (a, c, d), (a, b, d), (b, c, d)].into_iter().enumerate() {
                let v = det(x, y, z);
                if v < -ADMISSIBILITY_TOL {
                    out.push(Violation { i, j, triangle: t as u8, det: v });
                }
            }
        }
    }
    out
}

const SNAPSHOT_MAGIC: &str = "# twinlattice chain snapshot v1";

fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_clamp(c: &AffineClamp) -> String {
    let g = &c.gradient;
    [g[(0, 0)], g[(0, 1)], g[(1, 0)], g[(1, 1)], c.offset.x, c.offset.y]
        .iter()
        .map(|&x| fmt_f(x))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes the chain as `i,ux,uy,theta` records after a `# key = value` header.
/// Floats carry 17 significant digits, so [`read_snapshot`] restores them exactly.
pub fn write_snapshot<W: Write>(chain: &ChainState, mut w: W) -> Result<()> {
    let g = &chain.geometry;
    let lambda = match chain.boundary.kind {
        BoundaryKind::Affine { lambda } => fmt_f(lambda),
        _ => "none".to_string(),
    };
    writeln!(w, "{SNAPSHOT_MAGIC}")?;
    writeln!(w, "# a = {}", fmt_f(chain.wells.a))?;
    writeln!(w, "# n = {}", g.n)?;
    writeln!(w, "# first = {}", g.first)?;
    writeln!(w, "# last = {}", g.last)?;
    writeln!(w, "# rescaled = {}", g.rescaled)?;
    writeln!(w, "# bc = {}", chain.boundary.kind)?;
    writeln!(w, "# lambda = {lambda}")?;
    writeln!(w, "# left = {}", fmt_clamp(&chain.boundary.left))?;
    writeln!(w, "# right = {}", fmt_clamp(&chain.boundary.right))?;
    writeln!(w, "i,ux,uy,theta")?;
    for (k, i) in g.indices().enumerate() {
        let u = chain.u[k];
        writeln!(w, "{i},{},{},{}", fmt_f(u.x), fmt_f(u.y), fmt_f(chain.tau_angles[k]))?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<ChainState> {
    let mut header = std::collections::HashMap::new();
    let mut records = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        if k == 0 {
            if line.trim() != SNAPSHOT_MAGIC {
                return Err(perr("missing snapshot header".into()));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let (key, val) = rest.split_once('=').ok_or_else(|| perr("expected `key = value`".into()))?;
            header.insert(key.trim().to_string(), (val.trim().to_string(), lineno));
            continue;
        }
        if line.trim().is_empty() || line.starts_with("i,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(perr(format!("expected 4 fields, found {}", f.len())));
        }
        let i: i64 = f[0].trim().parse().map_err(|e| perr(format!("index: {e}")))?;
        let mut v = [0.0; 3];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.trim().parse().map_err(|e| perr(format!("value: {e}")))?;
        }
        records.push((i, v));
    }
    let get = |key: &str| -> Result<&(String, usize)> {
        header.get(key).ok_or_else(|| Error::Parse { line: 0, msg: format!("missing header key `{key}`") })
    };
    fn parse<T: std::str::FromStr>(e: &(String, usize)) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        e.0.parse().map_err(|err: T::Err| Error::Parse { line: e.1, msg: err.to_string() })
    }
    let clamp = |key: &str| -> Result<AffineClamp> {
        let e = get(key)?;
        let xs: Vec<f64> = e
            .0
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|err| Error::Parse { line: e.1, msg: err.to_string() })?;
        if xs.len() != 6 {
            return Err(Error::Parse { line: e.1, msg: "clamp needs 6 numbers".into() });
        }
        Ok(AffineClamp::new(Mat2::new(xs[0], xs[1], xs[2], xs[3]), Vec2::new(xs[4], xs[5])))
    };
    let a: f64 = parse(get("a")?)?;
    let n: usize = parse(get("n")?)?;
    let first: i64 = parse(get("first")?)?;
    let last: i64 = parse(get("last")?)?;
    let rescaled: bool = parse(get("rescaled")?)?;
    let kind = match get("bc")?.0.as_str() {
        "affine" => BoundaryKind::Affine { lambda: parse(get("lambda")?)? },
        "twin" => BoundaryKind::Twin,
        "layer" => BoundaryKind::Layer,
        other => return Err(Error::Parse { line: get("bc")?.1, msg: format!("unknown bc `{other}`") }),
    };
    let geometry = LatticeGeometry::checked(n, first, last, rescaled)?;
    if records.len() != geometry.len() || records.iter().zip(geometry.indices()).any(|((i, _), e)| *i != e) {
        return Err(Error::Parse { line: 0, msg: "records do not cover the chain index range in order".into() });
    }
    let wells = crate::wells::build_wells(a)?;
    let boundary = BoundaryData { kind, left: clamp("left")?, right: clamp("right")? };
    let u = records.iter().map(|(_, v)| Vec2::new(v[0], v[1])).collect();
    let th = records.iter().map(|(_, v)| v[2]).collect();
    // Bypass the clamping constructor: the file already holds the clamped values
    // and the round trip must be exact.
    boundary.check_compatible(&wells)?;
    Ok(ChainState { geometry, u, tau_angles: th, wells, boundary })
}
