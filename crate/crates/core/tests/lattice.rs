mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twinlattice::analysis::classify;
use twinlattice::lattice::{
    check_admissible, extract_chain, read_snapshot, reconstruct, write_snapshot, BoundaryData, ChainState,
    LatticeGeometry,
};
use twinlattice::minimize::twin_chain;
use twinlattice::wells::{boundary_gradient, Vec2};

use common::{random_chain, sqrt2_wells};

#[test]
fn pairwise_constraint_holds_on_random_chains() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let c = random_chain(&mut rng, &w, 8, 0.05, 0.05);
        let f = reconstruct(&c);
        let h = c.geometry.lambda_n();
        // Sites (p+1, q) and (p, q+1) sit in storage at (p+q+1, q) and (p+q+1, q+1).
        for i in -8..=7 {
            for j in -8..=7 {
                let lhs = f.position(i + 1, j) - f.position(i + 1, j + 1);
                let rhs = -c.tau(i + 1) * h;
                assert!((lhs - rhs).norm() < 1e-13);
                assert!((f.position(i, j) - (c.atom(i) + c.tau(i) * (j as f64 * h))).norm() < 1e-13);
            }
        }
    }
}

#[test]
fn plus_gradients_carry_the_elongation_vector() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = random_chain(&mut rng, &w, 6, 0.05, 0.1);
    let f = reconstruct(&c);
    for i in f.bond_range() {
        for j in c.geometry.rows() {
            // (-1, 1) maps to the image of the vertical-minus-horizontal edge.
            let d = f.gradient(i, j) * Vec2::new(-1.0, 1.0);
            assert!((d - c.tau(i + 1)).norm() < 1e-12);
        }
    }
}

#[test]
fn twin_field_sits_in_the_wells() {
    let w = sqrt2_wells();
    let c = twin_chain(LatticeGeometry::physical(10).unwrap(), &w, 0, BoundaryData::twin(&w)).unwrap();
    let f = reconstruct(&c);
    assert!(check_admissible(&f).is_empty());
    let cls = classify(&f, &w);
    for i in cls.bonds() {
        for j in c.geometry.rows() {
            let cell = cls.cell(i, j);
            assert!(cell.distance < 1e-12);
            assert_eq!(cell.well_id, if i < 0 { 0 } else { 1 });
        }
    }
}

#[test]
fn affine_chain_is_admissible() {
    let w = sqrt2_wells();
    let bc = BoundaryData::affine(&boundary_gradient(&w, 0.0).unwrap());
    let c = ChainState::piecewise(LatticeGeometry::physical(7).unwrap(), w, bc, 0, bc.left, bc.right).unwrap();
    assert!(check_admissible(&reconstruct(&c)).is_empty());
}

#[test]
fn pushed_atom_inverts_triangles() {
    let w = sqrt2_wells();
    let mut c = twin_chain(LatticeGeometry::physical(6).unwrap(), &w, 0, BoundaryData::twin(&w)).unwrap();
    let h = c.geometry.lambda_n();
    // Move the middle atom two spacings past its right neighbour.
    let v = c.atom(0) + Vec2::new(2.0 * w.a * h, 0.0) * 2.0;
    c.set_atom(0, v);
    let bad = check_admissible(&reconstruct(&c));
    assert!(!bad.is_empty());
    assert!(bad.iter().all(|v| v.det < 0.0));
}

#[test]
fn extract_inverts_reconstruct() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in [3, 6, 9] {
        let c = random_chain(&mut rng, &w, n, 0.1, 0.2);
        let back = extract_chain(&reconstruct(&c), &c).unwrap();
        for i in c.geometry.indices() {
            assert!((back.atom(i) - c.atom(i)).norm() < 1e-14);
            assert!((back.theta(i) - c.theta(i)).abs() < 1e-12);
        }
    }
}

#[test]
fn snapshot_rejects_garbage() {
    assert!(read_snapshot(&b"not a snapshot\n"[..]).is_err());
    let w = sqrt2_wells();
    let c = twin_chain(LatticeGeometry::physical(3).unwrap(), &w, 0, BoundaryData::twin(&w)).unwrap();
    let mut buf = Vec::new();
    write_snapshot(&c, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let truncated: String = text.lines().take(text.lines().count() - 1).map(|l| format!("{l}\n")).collect();
    assert!(read_snapshot(truncated.as_bytes()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn snapshot_round_trip_is_bit_exact(seed in any::<u64>(), n in 2usize..12, amp in 0.0f64..0.2) {
        let w = sqrt2_wells();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_chain(&mut rng, &w, n, amp + 1e-9, amp + 1e-9);
        let mut buf = Vec::new();
        write_snapshot(&c, &mut buf).unwrap();
        let back = read_snapshot(&buf[..]).unwrap();
        prop_assert_eq!(back, c);
    }
}
