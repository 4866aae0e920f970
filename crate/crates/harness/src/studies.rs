//! Sweeps over particle number and cut-off, the chaos study and the drift
//! scaling study.

use rayon::prelude::*;

use kslab_core::coupling::{run_coupled, CoupledConfig, CouplingReport};
use kslab_core::particles::{em_step, init_ensemble, interaction_drift_at, DensityFamily, ChemicalFamily, ZeroDrift};
use kslab_core::{BrownianStore, DriftPath, Error, InitialData, Mode, Result};
use serde::Serialize;

use crate::config::SimConfig;
use crate::report::{ConvergenceReport, SweepPoint};

/// Cut-off schedule `lambda_cut (ln N)^{-2/(d+2)}`.
pub fn epsilon_schedule(n: usize, lambda_cut: f64, d: usize) -> Result<f64> {
    if n <= 2 {
        return Err(Error::Domain(format!("the schedule needs N >= 3 (ln N > 1), got {n}")));
    }
    if !(lambda_cut > 0.0) {
        return Err(Error::Domain(format!("lambda_cut must be positive, got {lambda_cut}")));
    }
    Ok(lambda_cut * (n as f64).ln().powf(-2.0 / (d as f64 + 2.0)))
}

/// Which processes and statistics a coupled run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modes {
    pub intermediate: bool,
    pub limit: bool,
    pub w1: bool,
}

/// Builds and validates the coupled run for one sweep point.
pub fn coupled_config(cfg: &SimConfig, n: usize, eps: f64, modes: Modes) -> Result<CoupledConfig> {
    cfg.validate_point(n, eps)?;
    Ok(CoupledConfig {
        init: cfg.initial_data()?,
        spec: cfg.grid()?,
        n,
        eps,
        lambda: cfg.lambda,
        dt: cfg.dt,
        t_final: cfg.t_final,
        seeds: cfg.seeds(),
        drift: cfg.drift,
        interaction: cfg.interaction,
        history_stride: cfg.history_stride_for(eps),
        sample_every: cfg.sample_every,
        intermediate: modes.intermediate,
        limit: modes.limit,
        w1: modes.w1,
        w1_samples: cfg.w1_samples,
    })
}

fn per_seed(report: &CouplingReport, f: fn(&kslab_core::coupling::SeedCoupling) -> Option<f64>) -> Result<Vec<f64>> {
    report.per_seed.iter().map(|s| f(s).ok_or_else(|| Error::State("statistic missing from coupled run".into()))).collect()
}

/// `E sup_t |X^{i,eps} - Xbar^{i,eps}|` against `N` at fixed cut-off.
pub fn sweep_n(cfg: &SimConfig, n_list: &[usize]) -> Result<ConvergenceReport> {
    let modes = Modes { intermediate: true, limit: false, w1: false };
    let points = n_list
        .par_iter()
        .map(|&n| {
            let eps = cfg.eps_for(n)?;
            let report = run_coupled(&coupled_config(cfg, n, eps, modes)?)?;
            Ok(SweepPoint::from_values(n as f64, eps, per_seed(&report, |s| s.sup_interacting_intermediate)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ConvergenceReport::new("sweep-n", "N", "mean sup_t |X^eps - Xbar^eps|", points, cfg)
}

/// `E sup_t |Xbar^{i,eps} - X^i|` against the cut-off.
pub fn sweep_eps(cfg: &SimConfig, eps_list: &[f64]) -> Result<ConvergenceReport> {
    let modes = Modes { intermediate: true, limit: true, w1: false };
    let points = eps_list
        .par_iter()
        .map(|&eps| {
            let report = run_coupled(&coupled_config(cfg, cfg.n, eps, modes)?)?;
            Ok(SweepPoint::from_values(eps, eps, per_seed(&report, |s| s.sup_intermediate_limit)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ConvergenceReport::new("sweep-eps", "eps", "mean sup_t |Xbar^eps - X|", points, cfg)
}

/// Planned `(N, eps)` pairs of a chaos study.
pub fn chaos_plan(cfg: &SimConfig, n_list: &[usize]) -> Result<Vec<(usize, f64)>> {
    n_list.iter().map(|&n| Ok((n, epsilon_schedule(n, cfg.lambda_cut, cfg.d)?))).collect()
}

/// `E sup_t W1(mu^N_t, rho_t)` with the cut-off following the schedule.
pub fn chaos_study(cfg: &SimConfig, n_list: &[usize]) -> Result<ConvergenceReport> {
    let modes = Modes { intermediate: false, limit: false, w1: true };
    let plan = chaos_plan(cfg, n_list)?;
    let points = plan
        .par_iter()
        .map(|&(n, eps)| {
            let report = run_coupled(&coupled_config(cfg, n, eps, modes)?)?;
            Ok(SweepPoint::from_values(n as f64, eps, per_seed(&report, |s| s.sup_w1_interacting_limit)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ConvergenceReport::new("chaos", "N", "mean sup_t W1(mu^N_t, rho_t)", points, cfg)
}

/// Results of the drift scaling study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftScalingReport {
    /// Largest interaction drift over the probe points.
    pub sup_drift: ConvergenceReport,
    /// Largest finite-difference slope of the drift along the probe lines.
    pub lipschitz: ConvergenceReport,
    /// `sup |B[f] - B[g]| / int_0^T W1(f_r, g_r) dr` for two shifted Gaussians.
    pub contraction: ConvergenceReport,
}

impl DriftScalingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Probe points on `n_dirs` rays from the origin out to `4 sqrt(eps)`, with a
/// twin shifted by `h` along each ray for difference quotients.
fn probes(d: usize, eps: f64, n_dirs: usize, n_radii: usize) -> Vec<([f64; 3], [f64; 3])> {
    let mut out = Vec::with_capacity(n_dirs * n_radii);
    let reach = 4.0 * eps.sqrt();
    let h = eps.sqrt() / 20.0;
    for k in 0..n_dirs {
        let mut dir = [0.0; 3];
        if d == 1 {
            dir[0] = if k % 2 == 0 { 1.0 } else { -1.0 };
        } else {
            let angle = std::f64::consts::PI * k as f64 / n_dirs as f64 * 2.0;
            dir[0] = angle.cos();
            dir[1] = angle.sin();
        }
        for j in 0..n_radii {
            let r = reach * j as f64 / (n_radii - 1) as f64;
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            for i in 0..d {
                a[i] = r * dir[i];
                b[i] = (r + h) * dir[i];
            }
            out.push((a, b));
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sup drift and Lipschitz estimate of one frozen Gaussian history.
fn frozen_history_stats(cfg: &SimConfig, eps: f64, seed: u64) -> Result<(f64, f64)> {
    let d = cfg.d;
    let store = BrownianStore::new(seed, cfg.dt, d)?;
    let init = InitialData::new(
        d,
        DensityFamily::Gaussian { mean: [0.0; 3], sigma: cfg.rho_sigma },
        ChemicalFamily::Zero,
    )?;
    // grid-free: the box only has to be wide enough for the minimum image to be the identity
    let mut ens = init_ensemble(&init, cfg.n, &store, 1e6, Mode::Interacting)?.with_history(cfg.history_stride_for(eps));
    let still = BrownianStore::zero(seed, cfg.dt, d)?;
    let steps = kslab_core::pde::steps_to(cfg.t_final, cfg.dt)?;
    for _ in 0..steps {
        em_step(&mut ens, &ZeroDrift, &still, eps)?;
    }
    let pts = probes(d, eps, if d == 1 { 2 } else { 16 }, 48);
    let h = eps.sqrt() / 20.0;
    let vals = pts
        .par_iter()
        .map(|(a, b)| {
            let ba = interaction_drift_at(&a[..d], &ens, eps, cfg.lambda)?;
            let bb = interaction_drift_at(&b[..d], &ens, eps, cfg.lambda)?;
            let diff: Vec<f64> = ba.iter().zip(&bb).map(|(x, y)| x - y).collect();
            Ok((norm(&ba), norm(&diff) / h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().fold((0.0_f64, 0.0_f64), |(s, l), (a, b)| (s.max(*a), l.max(*b))))
}

/// Closed-form memory drift of a Gaussian `N(mean, sigma^2 I)` held fixed on
/// `[0, T]`: `int_eps^T e^{-lambda tau} grad (G(tau) * f)(x) dtau`, by the
/// trapezoid rule in `ln tau`.
pub fn frozen_gaussian_drift(x: &[f64], mean: &[f64], sigma: f64, eps: f64, t_final: f64, lambda: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = vec![0.0; d];
    if t_final <= eps {
        return out;
    }
    let nodes = 2000;
    let (a, b) = (eps.ln(), t_final.ln());
    let h = (b - a) / nodes as f64;
    let r2: f64 = x.iter().zip(mean).map(|(p, m)| (p - m) * (p - m)).sum();
    for k in 0..=nodes {
        let tau = (a + k as f64 * h).exp();
        let var = sigma * sigma + 2.0 * tau;
        let dens = (-r2 / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d as f64);
        let w = if k == 0 || k == nodes { 0.5 * h } else { h } * tau * (-lambda * tau).exp();
        for i in 0..d {
            out[i] -= w * dens * (x[i] - mean[i]) / var;
        }
    }
    out
}

/// `sup_x |B[f](x) - B[g](x)| / (T W1(f, g))` for `f = N(0, sigma^2)`, `g` shifted by `shift` on axis 0.
pub fn contraction_ratio(d: usize, sigma: f64, shift: f64, eps: f64, t_final: f64, lambda: f64) -> f64 {
    let mut mg = vec![0.0; d];
    mg[0] = shift;
    let mf = vec![0.0; d];
    let reach = 4.0 * (sigma * sigma + 2.0 * eps).sqrt() + shift.abs();
    let mut sup = 0.0_f64;
    for j in 0..=400 {
        let mut x = vec![0.0; d];
        x[0] = -reach + 2.0 * reach * j as f64 / 400.0;
        let bf = frozen_gaussian_drift(&x, &mf, sigma, eps, t_final, lambda);
        let bg = frozen_gaussian_drift(&x, &mg, sigma, eps, t_final, lambda);
        sup = sup.max(norm(&bf.iter().zip(&bg).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    if shift == 0.0 {
        return sup;
    }
    sup / (t_final * shift.abs())
}

/// Checks the settings of the (grid-free) drift scaling study.
pub fn validate_drift_scaling(cfg: &SimConfig, eps_list: &[f64]) -> Result<()> {
    if eps_list.len() < 2 {
        return Err(Error::Config("drift scaling needs at least two eps values".into()));
    }
    for &eps in eps_list {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps > 0 required, got {eps}")));
        }
        if cfg.dt > 0.25 * eps * (1.0 + 1e-12) {
            return Err(Error::Config(format!("dt > eps/4 (dt = {}, eps = {eps})", cfg.dt)));
        }
        if cfg.t_final <= eps {
            return Err(Error::Config(format!("T must exceed eps (T = {}, eps = {eps})", cfg.t_final)));
        }
    }
    if cfg.n < 2 {
        return Err(Error::Config("N >= 2 required".into()));
    }
    Ok(())
}

/// Sup and Lipschitz scaling of the interaction drift on frozen narrow Gaussian
/// histories, plus the contraction functional on shifted Gaussian pairs.
pub fn drift_scaling_study(cfg: &SimConfig, eps_list: &[f64]) -> Result<DriftScalingReport> {
    validate_drift_scaling(cfg, eps_list)?;
    let seeds = cfg.seeds();
    let mut sup_pts = Vec::new();
    let mut lip_pts = Vec::new();
    let mut con_pts = Vec::new();
    for &eps in eps_list {
        let stats = seeds.iter().map(|&s| frozen_history_stats(cfg, eps, s)).collect::<Result<Vec<_>>>()?;
        sup_pts.push(SweepPoint::from_values(eps, eps, stats.iter().map(|s| s.0).collect()));
        lip_pts.push(SweepPoint::from_values(eps, eps, stats.iter().map(|s| s.1).collect()));
        let ratio = contraction_ratio(cfg.d, cfg.rho_sigma, 0.5 * cfg.rho_sigma, eps, cfg.t_final, cfg.lambda);
        con_pts.push(SweepPoint::from_values(eps, eps, vec![ratio]));
    }
    Ok(DriftScalingReport {
        sup_drift: ConvergenceReport::new("drift-scaling", "eps", "sup_x |interaction drift|", sup_pts, cfg)?,
        lipschitz: ConvergenceReport::new("drift-scaling", "eps", "drift Lipschitz estimate", lip_pts, cfg)?,
        contraction: ConvergenceReport::new("drift-scaling", "eps", "sup |B[f]-B[g]| / int W1", con_pts, cfg)?,
    })
}

/// Default template for the drift scaling study.
pub fn drift_scaling_defaults(d: usize) -> SimConfig {
    let mut cfg = SimConfig::defaults(d);
    cfg.n = 128;
    cfg.t_final = 4.0;
    cfg.dt = 0.005;
    cfg.lambda = 0.0;
    cfg.rho_sigma = 0.02;
    cfg.n_seeds = 2;
    cfg.drift = DriftPath::Direct;
    cfg.eps_list = vec![0.04, 0.08, 0.16, 0.32];
    cfg
}
