//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use twinlattice::analysis::{classify, interface_positions, well_runs};
use twinlattice::energy::{chain_energy, density, lattice_energy, surface_energy, DensityParams};
use twinlattice::gamma::average_down;
use twinlattice::lattice::{check_admissible, read_snapshot, reconstruct, BoundaryData, ChainState, LatticeGeometry};
use twinlattice::minimize::{gradient, hessian, twin_chain, Objective};
use twinlattice::wells::{build_wells, dist_to_well, rotation, Mat2, Vec2, WellPair};
use twinlattice_cli::commands::layers_summary;
use twinlattice_cli::{execute, Command, ExperimentConfig};

/// Collects the individual checks of one criterion.
#[derive(Default)]
struct Verdict {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.notes.push(what.into());
        } else {
            self.failures.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

fn sqrt2() -> WellPair {
    build_wells(2f64.sqrt()).unwrap()
}

fn diffs(m: &Mat2) -> [Vec2; 4] {
    [m * Vec2::new(0.0, 1.0), m * Vec2::new(0.0, -1.0), m * Vec2::new(1.0, 0.0), m * Vec2::new(-1.0, 0.0)]
}

/// Perturbed twin with free elongation angles, retried until admissible.
fn random_chain(rng: &mut ChaCha8Rng, wells: &WellPair, n: usize, amp: f64, angle: f64) -> ChainState {
    let g = LatticeGeometry::physical(n).unwrap();
    let base = twin_chain(g, wells, 0, BoundaryData::twin(wells)).unwrap();
    loop {
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
}

fn config(out: &Path, n_list: &[usize]) -> ExperimentConfig {
    ExperimentConfig { n_list: n_list.to_vec(), output_dir: out.to_path_buf(), ..Default::default() }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Data rows of a CSV written by the driver: comments and the header skipped.
fn read_csv(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn oracle_equivalence(v: &mut Verdict) {
    let w = sqrt2();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(4..=16);
        let c = random_chain(&mut rng, &w, n, 0.2, 0.15);
        let a = chain_energy(&c).total;
        let b = lattice_energy(&reconstruct(&c), &w).total;
        worst = worst.max((a - b).abs() / (1.0 + a.abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    v.check(worst <= 1e-12, format!("worst relative gap {worst:.2e}"));
    v.check(secs < 5.0, format!("{secs:.2} s"));
}

fn zero_set(v: &mut Verdict) {
    let w = sqrt2();
    let p = DensityParams::from(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let start = Instant::now();
    let mut on_wells = 0.0f64;
    for k in 0..1000 {
        let u = if k % 2 == 0 { w.u0 } else { w.u1 };
        let m = rotation(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)) * u;
        on_wells = on_wells.max(density(p, &diffs(&m)));
    }
    let (mut off_wells, mut checked) = (f64::INFINITY, 0);
    while checked < 1000 {
        let m = Mat2::from_fn(|_, _| rng.gen_range(-2.5..2.5));
        if dist_to_well(&m, &w.u0).distance.min(dist_to_well(&m, &w.u1).distance) < 0.1 {
            continue;
        }
        off_wells = off_wells.min(density(p, &diffs(&m)));
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    v.check(on_wells <= 1e-20, format!("max on the wells {on_wells:.2e}"));
    v.check(off_wells > 0.0, format!("min away from the wells {off_wells:.2e}"));
    v.check(secs < 1.0, format!("{secs:.3} s"));
}

fn rank_one_geometry(v: &mut Verdict) {
    let w = sqrt2();
    let (a, b) = (w.a, w.b);
    v.check((w.u0 - w.q * w.u1).determinant().abs() < 1e-12, "det(U0 - QU1) = 0");
    v.check((w.u0 - w.q_tilde * w.u1).determinant().abs() < 1e-12, "det(U0 - Q~U1) = 0");
    let s = 1.0 / 2f64.sqrt();
    for (d, c, nu) in [
        (w.u0 - w.q * w.u1, Vec2::new(a, -b), Vec2::new(s, s)),
        (w.u0 - w.q_tilde * w.u1, Vec2::new(a, b), Vec2::new(s, -s)),
    ] {
        let k = (d * nu).dot(&c) / c.norm_squared();
        let r = (d - c * nu.transpose() * k).norm();
        v.check(r < 1e-12, format!("rank-one remainder {r:.1e}"));
    }
    // Angle-scan oracle: bracket the root of det(U0 - R(θ)U1) with positive sine
    // on a grid, then bisect.
    let f = |t: f64| (w.u0 - rotation(t) * w.u1).determinant();
    let grid = 10_000;
    let step = std::f64::consts::PI / grid as f64;
    let k = (0..grid).find(|&k| f(k as f64 * step).signum() != f((k + 1) as f64 * step).signum()).unwrap();
    let (mut lo, mut hi) = (k as f64 * step, (k + 1) as f64 * step);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == f(lo).signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    let (sg, so) = (w.gamma.sin(), oracle.sin());
    v.check((sg - 0.6).abs() < 1e-9, format!("sin γ = {sg:.15}"));
    v.check((sg - so).abs() < 1e-9, format!("scan oracle sin = {so:.15}"));
    v.check((w.q - rotation(oracle)).norm() < 1e-9, "Q = R(scan root)");
}

fn derivative_check(v: &mut Verdict) {
    let w = sqrt2();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut gworst, mut hworst) = (0.0f64, 0.0f64);
    let inf = |x: &[f64]| x.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    for k in 0..20 {
        let c = random_chain(&mut rng, &w, 8, 0.1, 0.3);
        let vt = k % 2 == 1;
        let o = Objective::new(&c, vt);
        let x = o.vector_of(&c);
        let g = gradient(&c, vt);
        let h = hessian(&c, vt);
        let e = 1e-6;
        let (mut gerr, mut herr, mut hmax) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += e;
            xm[i] -= e;
            gerr = gerr.max(((o.energy(&xp) - o.energy(&xm)) / (2.0 * e) - g[i]).abs());
            let (gp, gm) = (o.gradient(&xp), o.gradient(&xm));
            for j in 0..x.len() {
                herr = herr.max(((gp[j] - gm[j]) / (2.0 * e) - h.get(i, j)).abs());
                hmax = hmax.max(h.get(i, j).abs());
            }
        }
        gworst = gworst.max(gerr / inf(&g));
        hworst = hworst.max(herr / hmax);
    }
    v.check(gworst < 1e-5, format!("gradient {gworst:.1e}"));
    v.check(hworst < 1e-4, format!("Hessian {hworst:.1e}"));
}

fn twin_reproduction(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[40, 100]);
    let start = Instant::now();
    let run = execute(Command::Minimize, &cfg);
    let secs = start.elapsed().as_secs_f64();
    v.check(run.is_ok(), format!("minimize exit: {:?}", run.as_ref().err().map(|e| e.to_string())));
    let w = sqrt2();
    for n in [40, 100] {
        let d = dir.path().join(format!("minimize/n{n}"));
        let r = read_json(&d.join("report.json"));
        let g = r["final_grad_norm"].as_f64().unwrap();
        v.check(r["converged"] == true && g <= 1e-10, format!("n={n} |g| = {g:.1e}"));
        let regions = r["well_regions"].as_u64().unwrap();
        let faces = r["interfaces"].as_array().unwrap().len();
        v.check(regions == 2 && faces == 1, format!("n={n} {regions} regions, {faces} interface"));
        v.check(r["admissibility_violations"] == 0, format!("n={n} violations {}", r["admissibility_violations"]));
        // Independently from the stored chain.
        let chain = read_snapshot(std::io::BufReader::new(std::fs::File::open(d.join("chain.snap")).unwrap())).unwrap();
        let field = reconstruct(&chain);
        let cls = classify(&field, &w);
        let ok = check_admissible(&field).is_empty()
            && well_runs(&cls, cfg.interface_tol).len() == 2
            && interface_positions(&cls, cfg.interface_tol).len() == 1;
        v.check(ok, format!("n={n} snapshot reclassified"));
    }
    v.check(secs < 120.0, format!("{secs:.2} s"));
}

fn decay_reproduction(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[100, 200]);
    let run = execute(Command::Minimize, &cfg);
    v.check(run.is_ok(), "minimize exit");
    for n in [100i64, 200] {
        let d = dir.path().join(format!("minimize/n{n}"));
        let r = read_json(&d.join("report.json"));
        let mid = r["middle_deviation"].as_f64().unwrap();
        v.check(mid <= 1e-10, format!("n={n} middle deviation {mid:.2e}"));
        for side in ["fit_left", "fit_right"] {
            let r2 = r[side]["r_squared"].as_f64().unwrap_or(f64::NAN);
            v.check(r2 >= 0.9, format!("n={n} {side} r² {r2:.3}"));
        }
        let dev: BTreeMap<i64, f64> =
            read_csv(&d.join("deviation.csv")).iter().map(|row| (row[0].parse().unwrap(), row[1].parse().unwrap())).collect();
        for sign in [-1, 1] {
            let (near, far) = (dev[&(2 * sign)], dev[&(n / 2 * sign)]);
            v.check(far * 10.0 <= near, format!("n={n} d({})/d({}) = {:.3}", n / 2 * sign, 2 * sign, far / near));
        }
    }
}

fn scaling(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[25, 50, 100, 200]);
    let run = execute(Command::Scan, &cfg);
    v.check(run.is_ok(), "every run converged");
    let s = read_json(&dir.path().join("scan/summary.json"));
    for st in s["steps"].as_array().unwrap() {
        let (a, b) = (st["n_prev"].as_u64().unwrap(), st["n"].as_u64().unwrap());
        let dh = st["h1_relative_change"].as_f64().unwrap();
        let pe = st["proportionality_error"].as_f64().unwrap();
        v.check(dh < 0.10, format!("{a}->{b}: H¹ change {:.2}%", 100.0 * dh));
        v.check(pe < 0.15, format!("{a}->{b}: H_n ratio off λ ratio by {:.2}%", 100.0 * pe));
    }
    for row in read_csv(&dir.path().join("scan/scan.csv")) {
        let (n, hn, h1): (f64, f64, f64) = (row[0].parse().unwrap(), row[2].parse().unwrap(), row[3].parse().unwrap());
        v.check((hn * n - h1).abs() <= 1e-12 * h1, format!("n={n}: H_n = λ_n H¹"));
    }
}

fn averaging(v: &mut Verdict) {
    let w = sqrt2();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut worst = f64::NEG_INFINITY;
    let mut bad = 0;
    for _ in 0..50 {
        let n = rng.gen_range(12..=40);
        let m = rng.gen_range(1..=3);
        let c = random_chain(&mut rng, &w, n, 0.05, 0.1);
        let e = surface_energy(&c);
        let eps = m as f64 * e / (n - m) as f64 * rng.gen_range(1.05..3.0);
        let Ok(out) = average_down(&c, m, eps, None) else {
            bad += 1;
            continue;
        };
        // Direct evaluation on the reconstructed lattices.
        let full = lattice_energy(&reconstruct(&c), &w).rescaled;
        let rows = lattice_energy(&reconstruct(&out.translated), &w).row_sums;
        let strip: f64 = (-(m as i64)..m as i64).map(|j| rows[(j + n as i64) as usize]).sum::<f64>() / m as f64;
        worst = worst.max(strip - full - eps);
    }
    v.check(bad == 0, format!("{bad} inputs rejected"));
    v.check(worst <= 0.0, format!("max H¹_(n,m) - H¹_(n,n) - ε = {worst:.3e}"));
}

fn layer_consistency(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[200]);
    let start = Instant::now();
    let s = match layers_summary(&cfg) {
        Ok(s) => s,
        Err(e) => return v.check(false, format!("layers: {e}")),
    };
    let c = &s.orderings[0].1.terms[1];
    let x = &s.cross_checks[0];
    let last = c.n_sequence.last().unwrap();
    v.check(
        x.relative_difference <= 0.10,
        format!("C(U0,QU1) = {:.4} at strip n={} vs minimizer H¹ {:.4} at n={}: {:.2}%", c.value, last.n, x.minimizer_h1, x.n, 100.0 * x.relative_difference),
    );
    for e in &s.same_state {
        v.check(e.value.abs() <= 1e-10, format!("C(V,V) = {:.1e}", e.value));
    }
    for (name, ek) in &s.orderings {
        let sum: f64 = ek.terms.iter().map(|t| t.value).sum();
        v.check((sum - ek.value).abs() <= 1e-9 * ek.value, format!("E3[{name}] = {:.4} = B+ + C + B-", ek.value));
    }
    v.check(
        s.affine_minimizer_layers == 3,
        format!(
            "F_1/2 minimizer: {} interface(s) + boundary layers {:?} = {}",
            s.affine_minimizer_interfaces, s.affine_minimizer_boundary_layers, s.affine_minimizer_layers
        ),
    );
    let y = &s.cross_checks[1];
    v.note(format!("E3 {:.4} vs F_1/2 minimizer H¹ {:.4}: {:.2}%", y.layer_value, y.minimizer_h1, 100.0 * y.relative_difference));
    v.note(format!("{:.1} s", start.elapsed().as_secs_f64()));
}

fn snapshot_dir(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bin = env!("CARGO_BIN_EXE_twinlattice");
    // Different worker counts: reductions must not depend on scheduling.
    let mut runs = Vec::new();
    for workers in ["1", "3"] {
        for cmd in ["minimize", "scan", "diagnose", "fit-decay", "layers"] {
            let status = std::process::Command::new(bin)
                .args([cmd, "--quick", "--n", "8", "--n", "16", "--n", "24", "--out"])
                .arg(&out)
                .env("TWINLATTICE_WORKERS", workers)
                .env("RUST_LOG", "error")
                .status()
                .unwrap();
            v.check(status.success(), format!("{cmd} with {workers} worker(s) exits 0"));
        }
        runs.push(snapshot_dir(&out));
    }
    let files = runs[0].len();
    let differing: Vec<_> = runs[0].iter().filter(|(k, b)| runs[1].get(*k) != Some(*b)).map(|(k, _)| k.display().to_string()).collect();
    v.check(files > 0 && runs[0].len() == runs[1].len() && differing.is_empty(), format!("{files} files identical, differing: {differing:?}"));
}

fn main() {
    let criteria: [(&str, fn(&mut Verdict)); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("zero set", zero_set),
        ("rank-one geometry", rank_one_geometry),
        ("gradient and Hessian", derivative_check),
        ("twin minimizer structure", twin_reproduction),
        ("deviation from the twin", decay_reproduction),
        ("surface-energy scaling", scaling),
        ("averaging contract", averaging),
        ("layer energies", layer_consistency),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let mut v = Verdict::default();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut v)));
        if let Err(p) = outcome {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            v.failures.push(format!("panicked: {}", msg.unwrap_or_default()));
        }
        let k = k + 1;
        if v.failures.is_empty() {
            println!("criterion {k:>2} {name}: PASS [{}]", v.notes.join("; "));
        } else {
            println!("criterion {k:>2} {name}: FAIL [{}] [passed: {}]", v.failures.join("; "), v.notes.join("; "));
            failed.push(k);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
