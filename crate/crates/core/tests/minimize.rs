mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twinlattice::energy::surface_energy;
use twinlattice::lattice::{check_admissible, reconstruct, BoundaryData, ChainState, LatticeGeometry};
use twinlattice::minimize::{
    gradient, hessian, newton_minimize, preoptimize_middle, twin_chain, MinimizeOptions, Objective, Termination,
};
use twinlattice::wells::{boundary_gradient, Vec2};

use common::{random_chain, sqrt2_wells};

fn inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn fd_check(c: &ChainState, variable_tau: bool) -> (f64, f64) {
    let o = Objective::new(c, variable_tau);
    let x = o.vector_of(c);
    let g = gradient(c, variable_tau);
    let h = hessian(c, variable_tau);
    let e = 1e-6;
    let mut gerr = 0.0f64;
    let mut herr = 0.0f64;
    let mut hmax = 0.0f64;
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += e;
        xm[k] -= e;
        gerr = gerr.max(((o.energy(&xp) - o.energy(&xm)) / (2.0 * e) - g[k]).abs());
        let (gp, gm) = (o.gradient(&xp), o.gradient(&xm));
        for l in 0..x.len() {
            herr = herr.max(((gp[l] - gm[l]) / (2.0 * e) - h.get(k, l)).abs());
            hmax = hmax.max(h.get(k, l).abs());
        }
    }
    (gerr / inf(&g).max(1e-300), herr / hmax.max(1e-300))
}

#[test]
fn derivatives_match_finite_differences() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..20 {
        let c = random_chain(&mut rng, &w, 8, 0.1, 0.3);
        let (g, h) = fd_check(&c, k % 2 == 1);
        assert!(g < 1e-5, "gradient error {g}");
        assert!(h < 1e-4, "hessian error {h}");
    }
}

#[test]
fn hessian_is_banded_and_symmetric() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let c = random_chain(&mut rng, &w, 7, 0.1, 0.3);
    for (vt, kd) in [(false, 5), (true, 8)] {
        let h = hessian(&c, vt);
        assert_eq!(h.half_bandwidth(), kd);
        let d = h.to_dense();
        for i in 0..d.len() {
            for j in 0..d.len() {
                assert_eq!(d[i][j], d[j][i]);
            }
        }
    }
}

#[test]
fn pure_well_states_are_stationary() {
    let w = sqrt2_wells();
    for lam in [0.0, 1.0] {
        let bg = boundary_gradient(&w, lam).unwrap();
        let bc = BoundaryData::affine(&bg);
        let c = ChainState::piecewise(LatticeGeometry::physical(12).unwrap(), w.clone(), bc, 0, bc.left, bc.right).unwrap();
        assert!(surface_energy(&c) < 1e-20);
        // Atoms are stored in domain units; rescaling to lattice units leaves bond
        // lengths with ~1e-15 rounding, which sets the floor here.
        assert!(inf(&gradient(&c, true)) < 1e-11);
        let r = newton_minimize(&c, &MinimizeOptions::default());
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }
}

#[test]
fn translation_gauge() {
    let w = sqrt2_wells();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let c = random_chain(&mut rng, &w, 9, 0.1, 0.2);
    let t = c.translated(Vec2::new(-0.4, 2.5));
    assert!((surface_energy(&c) - surface_energy(&t)).abs() < 1e-12 * surface_energy(&c));
    let (g0, g1) = (gradient(&c, false), gradient(&t, false));
    for (a, b) in g0.iter().zip(&g1) {
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }
    // Clamps pin the gauge: the shifted Hessian factors.
    let mut h = hessian(&c, false);
    h.add_diagonal(1e-8);
    let mut mu = 1e-8;
    while h.cholesky().is_none() {
        h.add_diagonal(mu * 9.0);
        mu *= 10.0;
    }
    assert!(mu < 1e6);
}

#[test]
fn preoptimization_lowers_the_twin_energy() {
    let w = sqrt2_wells();
    let t = twin_chain(LatticeGeometry::physical(40).unwrap(), &w, 0, BoundaryData::twin(&w)).unwrap();
    let p = preoptimize_middle(&t);
    assert!(p.converged);
    assert!(p.energy_after < p.energy_before);
    assert!((p.energy_before - surface_energy(&t)).abs() < 1e-12 * p.energy_before);
    for i in t.geometry.indices().filter(|&i| i != 0) {
        assert_eq!(p.chain.atom(i), t.atom(i));
    }
    // Fixed point.
    let again = preoptimize_middle(&p.chain);
    assert!((again.chain.atom(0) - p.chain.atom(0)).norm() < 1e-10);
    // A perturbed start returns to the same position.
    let mut q = t.clone();
    q.set_atom(0, t.atom(0) + Vec2::new(0.1, 0.0) * t.geometry.lambda_n());
    let back = preoptimize_middle(&q);
    assert!((back.chain.atom(0) - p.chain.atom(0)).norm() < 1e-6);
}

#[test]
fn newton_run_contract() {
    let w = sqrt2_wells();
    for (n, bc) in [(40, BoundaryData::twin(&w)), (24, BoundaryData::affine(&boundary_gradient(&w, 0.5).unwrap()))] {
        let t = twin_chain(LatticeGeometry::physical(n).unwrap(), &w, 0, bc).unwrap();
        let p = preoptimize_middle(&t);
        let r = newton_minimize(&p.chain, &MinimizeOptions::default());
        assert!(r.converged, "n = {n}: {:?}", r.termination);
        assert_eq!(r.termination, Termination::Converged);
        assert!(r.final_grad_norm() <= 1e-10);
        assert!(r.energy_history.windows(2).all(|e| e[1] <= e[0]));
        assert!(r.final_energy() <= p.energy_after && p.energy_after <= surface_energy(&t));
        assert_eq!(r.admissibility_violations, 0);
        assert!(check_admissible(&reconstruct(&r.final_chain)).is_empty());
        assert_eq!(r.grad_norm_history.len(), r.iterations + 1);
    }
}

#[test]
fn variable_tau_lowers_the_energy_further() {
    let w = sqrt2_wells();
    let t = twin_chain(LatticeGeometry::physical(16).unwrap(), &w, 0, BoundaryData::twin(&w)).unwrap();
    let fixed = newton_minimize(&t, &MinimizeOptions::default());
    let free = newton_minimize(&fixed.final_chain, &MinimizeOptions { variable_tau: true, ..Default::default() });
    assert!(free.converged);
    assert!(free.final_energy() <= fixed.final_energy());
    assert!(free.final_chain.tau_angles.iter().any(|&t| t != 0.0));
}

#[test]
fn twin_rejects_interface_on_the_boundary() {
    let w = sqrt2_wells();
    let g = LatticeGeometry::physical(5).unwrap();
    assert!(twin_chain(g, &w, -5, BoundaryData::twin(&w)).is_err());
    assert!(twin_chain(g, &w, 5, BoundaryData::twin(&w)).is_err());
    assert!(twin_chain(g, &w, 4, BoundaryData::twin(&w)).is_ok());
}
