//! Acceptance gate. Runs every criterion in order and prints one `PASS`/`FAIL`
//! line for each; the process fails if any criterion does.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kslab_core::fields::{chemical_duhamel, chemical_step, interp, ChemicalParams, DelayedSourceRing};
use kslab_core::kernels::semigroup_apply;
use kslab_core::particles::{
    drift_interacting_direct, em_step, init_ensemble, ChemicalFamily, DensityFamily, EmpiricalChemistry,
    GridMemoryDrift,
};
use kslab_core::pde::{compare_eps_to_limit, solve, PdeParams, PdeState, System};
use kslab_core::transport::{w1_1d, w1_exact, EmpiricalMeasure};
use kslab_core::{BrownianStore, GridField, GridSpec, InitialData, Mode};
use kslab_harness::config::{EpsSetting, SimConfig};
use kslab_harness::report::fit_loglog;
use kslab_harness::studies;

fn verdict(id: u32, name: &str, ok: bool, detail: &str, started: Instant) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {id:>2} {tag}: {name}: {detail} ({:.1} s)", started.elapsed().as_secs_f64());
    assert!(ok, "criterion {id} failed: {detail}");
}

fn no_chem(dim: usize, sigma: f64) -> InitialData {
    InitialData::new(dim, DensityFamily::Gaussian { mean: [0.0; 3], sigma }, ChemicalFamily::Zero).unwrap()
}

fn c01_heat_equation_exactness() {
    let t0 = Instant::now();
    let spec = GridSpec::new(1, 512, 8.0).unwrap();
    let init = no_chem(1, 0.5);
    let rho0 = init.rho0_grid(&spec);
    let params = PdeParams { dt: 0.01, lambda: 1.0, interaction: false };
    let state = PdeState::new(System::Limit, rho0.clone(), init.c0_grid(&spec).unwrap(), params).unwrap();
    let run = solve(state, 0.5, 10).unwrap();
    let want = semigroup_apply(&rho0, 0.5).unwrap();
    let err = run.state.rho().sub(&want).unwrap().max_abs();
    verdict(1, "heat-equation exactness", err <= 1e-8, &format!("Linf error {err:.3e} (tol 1e-8)"), t0);
}

fn c02_mass_conservation() {
    let t0 = Instant::now();
    let mut worst = 0.0_f64;
    for (d, m, l) in [(1usize, 512usize, 8.0), (2, 128, 6.0)] {
        let spec = GridSpec::new(d, m, l).unwrap();
        let init = SimConfig::defaults(d).initial_data().unwrap();
        for system in [System::Intermediate { eps: 0.08 }, System::Limit] {
            let params = PdeParams { dt: 0.002, lambda: 1.0, interaction: true };
            let mut state =
                PdeState::new(system, init.rho0_grid(&spec), init.c0_grid(&spec).unwrap(), params).unwrap();
            let m0 = state.rho().mass();
            for _ in 0..1000 {
                state.advance().unwrap();
                worst = worst.max((state.rho().mass() - m0).abs());
            }
        }
    }
    verdict(2, "mass conservation", worst <= 1e-10, &format!("max |mass - M0| {worst:.3e} over 1000 steps (tol 1e-10)"), t0);
}

fn c03_recurrence_matches_duhamel() {
    let t0 = Instant::now();
    let spec = GridSpec::new(1, 512, 8.0).unwrap();
    let (dt, eps, lambda, t_end) = (1e-3_f64, 0.05, 1.0, 0.2_f64);
    let steps = (t_end / dt).round() as usize;
    let source = |k: usize| {
        let t = k as f64 * dt;
        GridField::from_fn(spec, |x| (1.0 + t) * (-(x[0] - 0.3) * (x[0] - 0.3) / 0.2).exp())
    };
    let path: Vec<GridField> = (0..=steps).map(source).collect();
    let mut ring = DelayedSourceRing::new(eps, dt);
    ring.push(0, path[0].clone()).unwrap();
    let params = ChemicalParams { dt, lambda };
    let mut phi = GridField::zeros(spec, 1);
    for step in 0..steps {
        ring.push(step + 1, path[step + 1].clone()).unwrap();
        phi = chemical_step(&phi, &ring, params, step).unwrap();
    }
    let oracle = chemical_duhamel(&path, &GridField::zeros(spec, 1), lambda, eps, dt, t_end).unwrap();
    let rel = phi.sub(&oracle).unwrap().l2() / oracle.l2();
    verdict(3, "chemical recurrence vs Duhamel", rel <= 1e-4, &format!("relative L2 {rel:.3e} at t = 0.2 (tol 1e-4)"), t0);
}

/// Max deviation of the grid drift from the direct sum, relative to the largest direct drift.
fn drift_deviation(m_cells: &[usize]) -> Vec<f64> {
    let (eps, dt, lambda, n, steps) = (0.2, 0.025, 1.0, 64, 20);
    let init = no_chem(1, 0.5);
    let store = BrownianStore::new(11, dt, 1).unwrap();
    let mut ens = init_ensemble(&init, n, &store, 8.0, Mode::Interacting).unwrap().with_history(1);
    let specs: Vec<GridSpec> = m_cells.iter().map(|&m| GridSpec::new(1, m, 8.0).unwrap()).collect();
    let mut chems: Vec<EmpiricalChemistry> =
        specs.iter().map(|s| EmpiricalChemistry::new(&ens, *s, eps, lambda, true).unwrap()).collect();
    for _ in 0..steps {
        let drift = GridMemoryDrift::new(chems[0].memory_gradient(), &init, lambda, &ens).unwrap();
        em_step(&mut ens, &drift, &store, eps).unwrap();
        for c in chems.iter_mut() {
            c.advance(&ens).unwrap();
        }
    }
    let direct: Vec<f64> = (0..n).map(|i| drift_interacting_direct(i, &ens, eps, lambda).unwrap()[0]).collect();
    let scale = direct.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    chems
        .iter()
        .map(|c| {
            (0..n)
                .map(|i| (interp(c.memory_gradient(), ens.position(i)).unwrap()[0] - direct[i]).abs())
                .fold(0.0_f64, f64::max)
                / scale
        })
        .collect()
}

fn c04_drift_oracle_equivalence() {
    let t0 = Instant::now();
    let dev = drift_deviation(&[512, 256]);
    let (fine, coarse) = (dev[0], dev[1]);
    let gain = coarse / fine;
    let ok = fine <= 0.05 && gain >= 1.8;
    verdict(
        4,
        "fast vs direct drift",
        ok,
        &format!("max rel deviation {fine:.3e} at M=512, {coarse:.3e} at M=256, gain {gain:.2} (need <= 5%, >= 1.8)"),
        t0,
    );
}

fn brute_force(xs: &[[f64; 2]], ys: &[[f64; 2]]) -> f64 {
    fn rec(k: usize, used: &mut Vec<bool>, acc: f64, xs: &[[f64; 2]], ys: &[[f64; 2]], best: &mut f64) {
        if k == xs.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..ys.len() {
            if !used[j] {
                used[j] = true;
                let c = ((xs[k][0] - ys[j][0]).powi(2) + (xs[k][1] - ys[j][1]).powi(2)).sqrt();
                rec(k + 1, used, acc + c, xs, ys, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, &mut vec![false; ys.len()], 0.0, xs, ys, &mut best);
    best / xs.len() as f64
}

fn c05_w1_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_1d = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=256usize);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..4.0)).collect();
        let sorted = w1_1d(&xs, &ys).unwrap().value;
        let exact = w1_exact(&EmpiricalMeasure::new(1, xs).unwrap(), &EmpiricalMeasure::new(1, ys).unwrap()).unwrap().value;
        worst_1d = worst_1d.max((sorted - exact).abs());
    }
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6usize);
        let xs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let ys: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
        let flat = |p: &[[f64; 2]]| EmpiricalMeasure::new(2, p.iter().flatten().copied().collect()).unwrap();
        let exact = w1_exact(&flat(&xs), &flat(&ys)).unwrap().value;
        let bf = brute_force(&xs, &ys);
        // equal up to summation order of the same matching
        if (exact - bf).abs() > 4.0 * f64::EPSILON * bf.max(1.0) {
            mismatches += 1;
        }
    }
    let ok = worst_1d <= 1e-12 && mismatches == 0;
    verdict(5, "W1 oracles", ok, &format!("1D max gap {worst_1d:.2e} (tol 1e-12), brute-force mismatches {mismatches}/100"), t0);
}

fn drift_scaling_config() -> SimConfig {
    studies::drift_scaling_defaults(2)
}

fn c06_sup_drift_scaling() {
    let t0 = Instant::now();
    let cfg = drift_scaling_config();
    let report = studies::drift_scaling_study(&cfg, &[0.04, 0.08, 0.16, 0.32]).unwrap();
    let slope = report.sup_drift.fit.unwrap().slope;
    let ok = (-0.7..=-0.3).contains(&slope);
    verdict(6, "d=2 sup drift scaling", ok, &format!("slope {slope:.3} (band [-0.7, -0.3])"), t0);
}

fn c07_config() -> SimConfig {
    let mut cfg = SimConfig::defaults(1);
    cfg.eps = EpsSetting::Value(0.2);
    cfg.n_seeds = 8;
    cfg.n_list = vec![64, 256, 1024, 4096];
    cfg
}

fn c07_n_rate() {
    let t0 = Instant::now();
    let cfg = c07_config();
    let report = studies::sweep_n(&cfg, &cfg.n_list).unwrap();
    let slope = report.fit.unwrap().slope;
    let ok = (-0.65..=-0.35).contains(&slope);
    let means: Vec<String> = report.points.iter().map(|p| format!("{:.3e}", p.mean)).collect();
    verdict(7, "N-rate", ok, &format!("slope {slope:.3} (band [-0.65, -0.35]), means {}", means.join(" ")), t0);
}

fn c08_config() -> SimConfig {
    let mut cfg = SimConfig::defaults(1);
    cfg.dt = 0.0025;
    cfg.n = 256;
    cfg.n_seeds = 8;
    cfg.eps_list = vec![0.05, 0.1, 0.2];
    cfg
}

fn c08_eps_rate() {
    let t0 = Instant::now();
    let cfg = c08_config();
    let report = studies::sweep_eps(&cfg, &cfg.eps_list).unwrap();
    let slope = report.fit.unwrap().slope;
    let ok = (0.7..=1.3).contains(&slope);
    let means: Vec<String> = report.points.iter().map(|p| format!("{:.3e}", p.mean)).collect();
    verdict(8, "eps-rate", ok, &format!("slope {slope:.3} (band [0.7, 1.3]), means {}", means.join(" ")), t0);
}

fn c09_config() -> SimConfig {
    let mut cfg = SimConfig::defaults(1);
    cfg.eps = EpsSetting::Auto;
    cfg.n_seeds = 20;
    cfg.n_list = vec![128, 512, 2048];
    cfg
}

fn c09_chaos_trend() {
    let t0 = Instant::now();
    let cfg = c09_config();
    let report = studies::chaos_study(&cfg, &cfg.n_list).unwrap();
    let ok = report.strictly_decreasing();
    let pts: Vec<String> =
        report.points.iter().map(|p| format!("N={} eps={:.4} {:.3e}+/-{:.1e}", p.x, p.eps, p.mean, p.stderr)).collect();
    verdict(9, "chaos trend", ok, &format!("strictly decreasing = {ok}: {}", pts.join(", ")), t0);
}

fn c10_chemical_eps_trend() {
    let t0 = Instant::now();
    let cfg = SimConfig::defaults(1);
    let spec = cfg.grid().unwrap();
    let init = cfg.initial_data().unwrap();
    let (dt, t_final, radius) = (0.0025, cfg.t_final, 3.0);
    let params = PdeParams { dt, lambda: cfg.lambda, interaction: true };
    let run = |system| {
        let state = PdeState::new(system, init.rho0_grid(&spec), init.c0_grid(&spec).unwrap(), params).unwrap();
        solve(state, t_final, 4).unwrap()
    };
    let limit = run(System::Limit);
    let eps_list = [0.05, 0.1, 0.2];
    let sups: Vec<f64> =
        eps_list.iter().map(|&e| compare_eps_to_limit(&run(System::Intermediate { eps: e }).samples, &limit.samples, radius).unwrap().sup_c_l2).collect();
    let decreasing = sups.windows(2).all(|w| w[0] < w[1]);
    let slope = fit_loglog(&eps_list, &sups).unwrap().unwrap().slope;
    let ok = decreasing && (0.7..=1.3).contains(&slope);
    verdict(
        10,
        "chemical eps trend",
        ok,
        &format!("sup L2(B_3) {:?}, decreasing with eps = {decreasing}, slope {slope:.3} (band [0.7, 1.3])", sups),
        t0,
    );
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

fn c11_worker_count_determinism() {
    let t0 = Instant::now();
    let mut sweep = c07_config();
    sweep.n_list = vec![64, 256];
    sweep.n_seeds = 4;
    let mut eps = c08_config();
    eps.eps_list = vec![0.05, 0.1];
    eps.n_seeds = 3;
    let mut chaos = c09_config();
    chaos.n_list = vec![128, 512];
    chaos.n_seeds = 4;
    let drift = drift_scaling_config();
    let render = || {
        vec![
            studies::sweep_n(&sweep, &sweep.n_list).unwrap().to_csv() + &studies::sweep_n(&sweep, &sweep.n_list).unwrap().to_json(),
            studies::sweep_eps(&eps, &eps.eps_list).unwrap().to_json(),
            studies::chaos_study(&chaos, &chaos.n_list).unwrap().to_json(),
            studies::drift_scaling_study(&drift, &[0.16, 0.32]).unwrap().to_json(),
        ]
    };
    let one = in_pool(1, render);
    let eight = in_pool(8, render);
    let same = one.iter().zip(&eight).filter(|(a, b)| a == b).count();
    verdict(11, "1 vs 8 workers", same == one.len(), &format!("{same}/{} reports byte-identical", one.len()), t0);
}

fn main() {
    let criteria: [fn(); 11] = [
        c01_heat_equation_exactness,
        c02_mass_conservation,
        c03_recurrence_matches_duhamel,
        c04_drift_oracle_equivalence,
        c05_w1_oracles,
        c06_sup_drift_scaling,
        c07_n_rate,
        c08_eps_rate,
        c09_chaos_trend,
        c10_chemical_eps_trend,
        c11_worker_count_determinism,
    ];
    let failed = criteria.iter().filter(|c| std::panic::catch_unwind(**c).is_err()).count();
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
