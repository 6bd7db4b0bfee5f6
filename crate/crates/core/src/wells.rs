//! The two martensitic wells `SO(2)U0 ∪ SO(2)U1` and their rank-one geometry.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat2 = Matrix2<f64>;
pub type Vec2 = Vector2<f64>;

/// Counter-clockwise rotation by `theta`.
pub fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Stretch matrices `U0 = diag(a, b)`, `U1 = diag(b, a)` with `b = 1/a`, the two
/// rotations connecting them by rank-one matrices, and the chain direction `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellPair {
    pub a: f64,
    pub b: f64,
    pub u0: Mat2,
    pub u1: Mat2,
    /// Connection with normal (1,1): `U0 - Q U1 = k (a,-b) ⊗ (1,1)`.
    pub q: Mat2,
    /// Connection with normal (1,-1): `U0 - Q̃ U1 = k (a,b) ⊗ (1,-1)`.
    pub q_tilde: Mat2,
    /// Signed angle of `Q`; `Q̃` is the rotation by `-gamma`.
    pub gamma: f64,
    pub tau: Vec2,
}

impl WellPair {
    /// Well `k` as a matrix: `U0` for 0, `Q U1` for 1 (the representative that is
    /// rank-one connected to `U0` across the (1,1) normal).
    pub fn well_matrix(&self, k: usize) -> Mat2 {
        if k == 0 {
            self.u0
        } else {
            self.q * self.u1
        }
    }

    /// Stretch `U_k`.
    pub fn stretch(&self, k: usize) -> Mat2 {
        if k == 0 {
            self.u0
        } else {
            self.u1
        }
    }

    /// The threshold `c̃ = ((b²-a²) / (100 (a²+b²)))⁴` used to separate layer
    /// cells from near-well cells.
    pub fn c_tilde(&self) -> f64 {
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        ((b2 - a2) / (100.0 * (a2 + b2))).powi(4)
    }

    /// `|tau|² = a² + b²`.
    pub fn tau_norm_sq(&self) -> f64 {
        self.a * self.a + self.b * self.b
    }
}

pub fn build_wells(a: f64) -> Result<WellPair> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::InvalidParameter(format!("well stretch a must be positive, got {a}")));
    }
    if a == 1.0 {
        return Err(Error::InvalidParameter("a = 1 makes the two wells coincide".into()));
    }
    let b = 1.0 / a;
    let (a2, b2) = (a * a, b * b);
    // det(U0 - R(θ)U1) = 2 - (a² + b²) cos θ, so cos θ = 2/(a²+b²) and, since
    // ab = 1, sin θ = ±(a² - b²)/(a² + b²).
    let cos = 2.0 / (a2 + b2);
    let sin = (a2 - b2) / (a2 + b2);
    let q = Mat2::new(cos, -sin, sin, cos);
    let q_tilde = Mat2::new(cos, sin, -sin, cos);
    Ok(WellPair {
        a,
        b,
        u0: Mat2::new(a, 0.0, 0.0, b),
        u1: Mat2::new(b, 0.0, 0.0, a),
        q,
        q_tilde,
        gamma: sin.atan2(cos),
        tau: Vec2::new(-a, b),
    })
}

/// `F_λ = (1-λ) U0 + λ Q U1`, the affine boundary gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGradient {
    pub lambda: f64,
    pub f: Mat2,
}

pub fn boundary_gradient(wells: &WellPair, lambda: f64) -> Result<BoundaryGradient> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let qu1 = wells.q * wells.u1;
    let f = if lambda == 0.0 {
        wells.u0
    } else if lambda == 1.0 {
        qu1
    } else {
        wells.u0 * (1.0 - lambda) + qu1 * lambda
    };
    Ok(BoundaryGradient { lambda, f })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellDistance {
    pub distance: f64,
    /// Minimizing rotation angle: `R(angle) U` is the closest point of `SO(2)U`.
    pub angle: f64,
}

/// `min_θ |M - R(θ)U|_F`.
///
/// The maximizer of `tr(R(θ)ᵀ M Uᵀ)` is available in closed form; the distance is
/// then evaluated directly as `|M - R(θ*)U|` rather than through the expanded
/// square, which would lose all digits for `M` inside the well.
pub fn dist_to_well(m: &Mat2, u: &Mat2) -> WellDistance {
    let s = m * u.transpose();
    let angle = (s[(1, 0)] - s[(0, 1)]).atan2(s[(0, 0)] + s[(1, 1)]);
    let distance = (m - rotation(angle) * u).norm();
    WellDistance { distance, angle }
}

/// The closed-form squared distance `|M|² + |U|² - 2 |(S11+S22, S21-S12)|`.
/// Kept for cross-checking; prefer [`dist_to_well`].
pub fn dist_to_well_sq_closed_form(m: &Mat2, u: &Mat2) -> f64 {
    let s = u * m.transpose();
    let t = ((s[(0, 0)] + s[(1, 1)]).powi(2) + (s[(1, 0)] - s[(0, 1)]).powi(2)).sqrt();
    (m.norm_squared() + u.norm_squared() - 2.0 * t).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_angle_for_sqrt2() {
        let w = build_wells(2f64.sqrt()).unwrap();
        assert!((w.gamma.sin() - 0.6).abs() < 1e-15);
        assert!((w.q[(0, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_stretch() {
        assert!(build_wells(1.0).is_err());
        assert!(build_wells(0.0).is_err());
        assert!(build_wells(-2.0).is_err());
        assert!(build_wells(f64::NAN).is_err());
    }

    #[test]
    fn boundary_gradient_endpoints_are_exact() {
        let w = build_wells(1.3).unwrap();
        assert_eq!(boundary_gradient(&w, 0.0).unwrap().f, w.u0);
        assert_eq!(boundary_gradient(&w, 1.0).unwrap().f, w.q * w.u1);
        assert!(boundary_gradient(&w, 1.5).is_err());
    }

    #[test]
    fn distance_to_own_well_vanishes() {
        let w = build_wells(2f64.sqrt()).unwrap();
        assert_eq!(dist_to_well(&w.u0, &w.u0).distance, 0.0);
        let d = dist_to_well(&(rotation(0.3) * w.u1), &w.u1);
        assert!(d.distance < 1e-15);
        assert!((d.angle - 0.3).abs() < 1e-15);
    }
}
