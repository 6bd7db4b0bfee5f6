#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use twinlattice::lattice::{check_admissible, reconstruct, BoundaryData, ChainState, LatticeGeometry};
use twinlattice::minimize::{newton_minimize, preoptimize_middle, twin_chain, MinimizationReport, MinimizeOptions, Preoptimized};
use twinlattice::wells::{build_wells, Vec2, WellPair};

pub fn sqrt2_wells() -> WellPair {
    build_wells(2f64.sqrt()).unwrap()
}

/// Twin chain with the interface at 0 and twin clamps, perturbed by `amp` (in
/// lattice units) in positions and by `angle / n` in elongation angles, so the
/// row-dependent part `j δ` stays of order `angle`. Retries until the result is
/// admissible.
pub fn random_chain(rng: &mut ChaCha8Rng, wells: &WellPair, n: usize, amp: f64, angle: f64) -> ChainState {
    let g = LatticeGeometry::physical(n).unwrap();
    let base = twin_chain(g, wells, 0, BoundaryData::twin(wells)).unwrap();
    for _ in 0..10_000 {
        let mut c = base.clone();
        let h = g.lambda_n();
        for k in 1..c.u.len() - 1 {
            c.u[k] += Vec2::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)) * h;
            c.tau_angles[k] = rng.gen_range(-angle..angle) / n as f64;
        }
        if check_admissible(&reconstruct(&c)).is_empty() {
            return c;
        }
    }
    panic!("no admissible perturbation with amp {amp}, angle {angle} at n = {n}");
}

/// Twin → middle-atom preoptimization → Newton, as the experiments run it.
pub fn minimizer(wells: &WellPair, n: usize, bc: BoundaryData) -> (ChainState, Preoptimized, MinimizationReport) {
    let t = twin_chain(LatticeGeometry::physical(n).unwrap(), wells, 0, bc).unwrap();
    let p = preoptimize_middle(&t);
    let r = newton_minimize(&p.chain, &MinimizeOptions::default());
    assert!(r.converged, "n = {n}: {:?}", r.termination);
    (t, p, r)
}
