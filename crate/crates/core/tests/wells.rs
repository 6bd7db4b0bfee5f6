use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinlattice::wells::{boundary_gradient, build_wells, dist_to_well, dist_to_well_sq_closed_form, rotation, Mat2, Vec2};

/// `min_θ ‖M - R(θ)U‖` over an evenly spaced angle grid. The squared norm is
/// `‖M‖² + ‖U‖² - 2(cos θ·p + sin θ·q)`, so a precomputed table keeps it cheap.
struct AngleScan {
    table: Vec<(f64, f64)>,
}

impl AngleScan {
    fn new(points: usize) -> Self {
        let step = std::f64::consts::TAU / points as f64;
        Self { table: (0..points).map(|k| (k as f64 * step).sin_cos()).map(|(s, c)| (c, s)).collect() }
    }

    fn dist(&self, m: &Mat2, u: &Mat2) -> f64 {
        // tr(Mᵀ R U) = tr(R S) = cos θ·(S11 + S22) + sin θ·(S12 - S21), S = U Mᵀ.
        let s = u * m.transpose();
        let p = s[(0, 0)] + s[(1, 1)];
        let q = s[(0, 1)] - s[(1, 0)];
        let best = self.table.iter().map(|&(c, sn)| c * p + sn * q).fold(f64::NEG_INFINITY, f64::max);
        (m.norm_squared() + u.norm_squared() - 2.0 * best).max(0.0).sqrt()
    }
}

#[test]
fn scan_finds_the_rank_one_angle() {
    let w = build_wells(2f64.sqrt()).unwrap();
    let points = 1_000_000;
    let step = std::f64::consts::TAU / points as f64;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..points {
        let th = k as f64 * step;
        let d = (w.u0 - rotation(th) * w.u1).determinant().abs();
        // Two roots; the Q root has a positive sine.
        if th.sin() > 0.0 && d < best.0 {
            best = (d, th);
        }
    }
    assert!((best.1.sin() - 0.6).abs() < 1e-5, "scan root {}", best.1.sin());
    assert!((w.q[(1, 0)] - 0.6).abs() < 1e-9);
    assert!((w.q[(0, 0)] - 0.8).abs() < 1e-9);
    assert!((w.gamma.sin() - best.1.sin()).abs() < 1e-5);
}

#[test]
fn rank_one_factorizations() {
    for a in [2f64.sqrt(), 0.7, 1.9] {
        let w = build_wells(a).unwrap();
        let b = 1.0 / a;
        assert!((a * w.b - 1.0).abs() < 1e-14);
        assert!((w.u0.determinant() - 1.0).abs() < 1e-14);
        assert!((w.u1.determinant() - 1.0).abs() < 1e-14);
        let d1 = w.u0 - w.q * w.u1;
        let d2 = w.u0 - w.q_tilde * w.u1;
        assert!(d1.determinant().abs() < 1e-12);
        assert!(d2.determinant().abs() < 1e-12);
        // Project onto the claimed rank-one directions; the remainder must vanish.
        let s = 1.0 / 2f64.sqrt();
        for (d, c, nu) in [(d1, Vec2::new(a, -b), Vec2::new(s, s)), (d2, Vec2::new(a, b), Vec2::new(s, -s))] {
            let k = (d * nu).dot(&c) / c.norm_squared();
            assert!((d - c * nu.transpose() * k).norm() < 1e-12, "a = {a}");
        }
        for r in [w.q, w.q_tilde] {
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - Mat2::identity()).norm() < 1e-12);
        }
        assert!((w.q - w.q_tilde).norm() > 1e-3);
        assert_eq!(w.tau, Vec2::new(-a, b));
    }
}

#[test]
fn rejects_bad_stretches() {
    assert!(build_wells(0.0).is_err());
    assert!(build_wells(-1.0).is_err());
    assert!(build_wells(1.0).is_err());
    assert!(build_wells(f64::NAN).is_err());
}

#[test]
fn boundary_gradient_contract() {
    let w = build_wells(2f64.sqrt()).unwrap();
    assert_eq!(boundary_gradient(&w, 0.0).unwrap().f, w.u0);
    assert_eq!(boundary_gradient(&w, 1.0).unwrap().f, w.q * w.u1);
    for lam in [0.0, 0.25, 0.5, 0.9, 1.0] {
        let f = boundary_gradient(&w, lam).unwrap().f;
        assert!((f - ((1.0 - lam) * w.u0 + lam * w.q * w.u1)).norm() < 1e-14);
        assert!((f * Vec2::new(1.0, -1.0) + w.tau).norm() < 1e-12);
    }
    let half = boundary_gradient(&w, 0.5).unwrap().f * Vec2::new(1.0, -1.0);
    assert!((half - Vec2::new(2f64.sqrt(), -1.0 / 2f64.sqrt())).norm() < 1e-12);
    assert!(boundary_gradient(&w, 1.5).is_err());
    assert!(boundary_gradient(&w, -0.1).is_err());
}

#[test]
fn distance_examples() {
    let w = build_wells(2f64.sqrt()).unwrap();
    assert!(dist_to_well(&w.u0, &w.u0).distance < 1e-15);
    assert!(dist_to_well(&(rotation(0.3) * w.u1), &w.u1).distance < 1e-15);
    let d = dist_to_well(&Mat2::identity(), &w.u0).distance;
    let scan = AngleScan::new(1_000_000).dist(&Mat2::identity(), &w.u0);
    assert!((d - scan).abs() < 1e-9);
    assert!((d - 0.5073).abs() < 5e-5, "{d}");
}

#[test]
fn closed_form_matches_scan_on_random_matrices() {
    let w = build_wells(2f64.sqrt()).unwrap();
    let scan = AngleScan::new(1_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let m = Mat2::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        if m.determinant() <= 0.0 {
            continue;
        }
        let u = if checked % 2 == 0 { w.u0 } else { w.u1 };
        let d = dist_to_well(&m, &u);
        assert!((d.distance - scan.dist(&m, &u)).abs() < 1e-6);
        assert!((d.distance.powi(2) - dist_to_well_sq_closed_form(&m, &u)).abs() < 1e-10);
        assert!(((m - rotation(d.angle) * u).norm() - d.distance).abs() < 1e-12);
        checked += 1;
    }
}

proptest! {
    #[test]
    fn distance_is_left_rotation_invariant(
        m in prop::array::uniform4(-3.0f64..3.0),
        th in -4.0f64..4.0,
        a in 0.5f64..2.5,
    ) {
        prop_assume!((a - 1.0).abs() > 1e-3);
        let w = build_wells(a).unwrap();
        let m = Mat2::new(m[0], m[1], m[2], m[3]);
        for u in [w.u0, w.u1] {
            let d0 = dist_to_well(&m, &u).distance;
            let d1 = dist_to_well(&(rotation(th) * m), &u).distance;
            prop_assert!((d0 - d1).abs() < 1e-12 * (1.0 + d0));
        }
    }
}
