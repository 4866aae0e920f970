//! Shared-noise coupling of the interacting, intermediate and limit processes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::particles::{
    check_step_resolution, em_step, init_ensemble, DirectInteractingDrift, DriftPath, EmpiricalChemistry,
    GridMemoryDrift, InitialData, Mode, ParticleEnsemble,
};
use crate::pde::{steps_to, PdeParams, PdeState, System};
use crate::rng::BrownianStore;
use crate::transport::{sup_metric, w1_vs_grid, EmpiricalMeasure};

/// Everything a coupled run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConfig {
    pub init: InitialData,
    pub spec: GridSpec,
    pub n: usize,
    pub eps: f64,
    pub lambda: f64,
    pub dt: f64,
    pub t_final: f64,
    pub seeds: Vec<u64>,
    pub drift: DriftPath,
    /// Density acts as a chemical source (false leaves only the `c0` drift).
    pub interaction: bool,
    /// History decimation for the direct drift path.
    pub history_stride: usize,
    /// Steps between recorded statistics.
    pub sample_every: usize,
    /// Run the intermediate particles (and the delayed PDE).
    pub intermediate: bool,
    /// Run the limit particles.
    pub limit: bool,
    /// Record `W1(empirical, limit density)` curves.
    pub w1: bool,
    /// Density samples per W1 evaluation in `d >= 2`.
    pub w1_samples: usize,
}

/// Per-seed coupling statistics; sup values are averaged over particles.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SeedCoupling {
    pub seed: u64,
    /// `mean_i sup_t |X^{i,eps} - Xbar^{i,eps}|`.
    pub sup_interacting_intermediate: Option<f64>,
    /// `mean_i sup_t |Xbar^{i,eps} - X^i|`.
    pub sup_intermediate_limit: Option<f64>,
    /// `mean_i sup_t |X^{i,eps} - X^i|`.
    pub sup_interacting_limit: Option<f64>,
    /// `mean_i |X^{i,eps} - Xbar^{i,eps}|` at each sample time.
    pub dist_interacting_intermediate: Vec<f64>,
    pub dist_intermediate_limit: Vec<f64>,
    /// `W1(mu^N_t, rho_t)` for the interacting particles against the limit density.
    pub w1_interacting_limit: Vec<f64>,
    /// `W1(mubar^N_t, rho^eps_t)`: the intermediate particles against their own PDE.
    pub w1_intermediate_pde: Vec<f64>,
    pub sup_w1_interacting_limit: Option<f64>,
}

/// Mean and seed-level standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SeedStat {
    pub mean: f64,
    pub stderr: f64,
}

impl SeedStat {
    pub fn from_values(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let stderr = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
        Some(Self { mean, stderr })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CouplingReport {
    pub dim: usize,
    pub n: usize,
    pub eps: f64,
    pub lambda: f64,
    pub dt: f64,
    pub t_final: f64,
    pub drift: DriftPath,
    pub times: Vec<f64>,
    pub per_seed: Vec<SeedCoupling>,
    pub interacting_intermediate: Option<SeedStat>,
    pub intermediate_limit: Option<SeedStat>,
    pub interacting_limit: Option<SeedStat>,
    pub sup_w1: Option<SeedStat>,
    /// Largest drift Lipschitz estimate seen, times `dt`.
    pub dt_lipschitz: f64,
}

/// Numerical Lipschitz constant of a gradient field: largest one-cell
/// difference quotient over all components and axes.
pub fn lipschitz_estimate(grad: &GridField) -> f64 {
    let spec = grad.spec();
    let m = spec.cells();
    let d = spec.dim();
    let dx = spec.dx();
    let mut best = 0.0_f64;
    for c in 0..grad.components() {
        let v = grad.component(c);
        for a in 0..d {
            let stride = m.pow((d - 1 - a) as u32);
            for idx in 0..v.len() {
                let j = (idx / stride) % m;
                let next = if j == m - 1 { idx + stride - m * stride } else { idx + stride };
                best = best.max((v[next] - v[idx]).abs() / dx);
            }
        }
    }
    best
}

/// Memory gradients of one PDE system at every step, plus densities at sample steps.
struct PdeTrack {
    memory_gradient: Vec<GridField>,
    rho: Vec<Option<GridField>>,
}

fn track_pde(cfg: &CoupledConfig, system: System, steps: usize) -> Result<PdeTrack> {
    let rho0 = cfg.init.rho0_grid(&cfg.spec);
    let c0 = cfg.init.c0_grid(&cfg.spec)?;
    let params = PdeParams { dt: cfg.dt, lambda: cfg.lambda, interaction: cfg.interaction };
    let mut state = PdeState::new(system, rho0, c0, params)?;
    let mut memory_gradient = vec![state.memory_gradient().clone()];
    let mut rho = vec![Some(state.rho().clone())];
    for n in 1..=steps {
        state.advance()?;
        memory_gradient.push(state.memory_gradient().clone());
        rho.push((n % cfg.sample_every == 0 || n == steps).then(|| state.rho().clone()));
    }
    Ok(PdeTrack { memory_gradient, rho })
}

fn validate(cfg: &CoupledConfig) -> Result<usize> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("no seeds".into()));
    }
    if cfg.n < 1 {
        return Err(Error::Config("N must be positive".into()));
    }
    if cfg.spec.dim() != cfg.init.dim {
        return Err(Error::Config("grid and initial data dimensions differ".into()));
    }
    if cfg.sample_every == 0 {
        return Err(Error::Config("sample_every must be positive".into()));
    }
    check_step_resolution(Mode::Interacting, cfg.dt, cfg.eps)?;
    steps_to(cfg.t_final, cfg.dt)
}

/// Runs the coupled processes for every seed. Seeds are independent and run
/// concurrently; results come back in seed order.
pub fn run_coupled(cfg: &CoupledConfig) -> Result<CouplingReport> {
    let steps = validate(cfg)?;
    let intermediate_pde = if cfg.intermediate { Some(track_pde(cfg, System::Intermediate { eps: cfg.eps }, steps)?) } else { None };
    let limit_pde = if cfg.limit || cfg.w1 { Some(track_pde(cfg, System::Limit, steps)?) } else { None };
    let times: Vec<f64> =
        (0..=steps).filter(|n| n % cfg.sample_every == 0 || *n == steps).map(|n| n as f64 * cfg.dt).collect();

    let results: Vec<Result<(SeedCoupling, f64)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, steps, intermediate_pde.as_ref(), limit_pde.as_ref()))
        .collect();
    let mut per_seed = Vec::with_capacity(results.len());
    let mut dt_lipschitz = 0.0_f64;
    for r in results {
        let (s, lip) = r?;
        dt_lipschitz = dt_lipschitz.max(lip);
        per_seed.push(s);
    }
    if dt_lipschitz > 0.5 {
        log::warn!("dt times the estimated drift Lipschitz constant is {dt_lipschitz:.3} > 0.5");
    }
    let collect = |f: fn(&SeedCoupling) -> Option<f64>| -> Option<SeedStat> {
        let v: Option<Vec<f64>> = per_seed.iter().map(f).collect();
        v.and_then(|v| SeedStat::from_values(&v))
    };
    Ok(CouplingReport {
        dim: cfg.init.dim,
        n: cfg.n,
        eps: cfg.eps,
        lambda: cfg.lambda,
        dt: cfg.dt,
        t_final: cfg.t_final,
        drift: cfg.drift,
        times,
        interacting_intermediate: collect(|s| s.sup_interacting_intermediate),
        intermediate_limit: collect(|s| s.sup_intermediate_limit),
        interacting_limit: collect(|s| s.sup_interacting_limit),
        sup_w1: collect(|s| s.sup_w1_interacting_limit),
        per_seed,
        dt_lipschitz,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn distances(a: &ParticleEnsemble, b: &ParticleEnsemble) -> Vec<f64> {
    (0..a.len()).map(|i| a.distance_to(b, i)).collect()
}

fn w1_to(ens: &ParticleEnsemble, rho: &GridField, samples: usize, seed: u64) -> Result<f64> {
    let mu = EmpiricalMeasure::new(ens.dim(), ens.positions().to_vec())?;
    Ok(w1_vs_grid(&mu, rho, samples, seed)?.value)
}

fn run_seed(
    cfg: &CoupledConfig,
    seed: u64,
    steps: usize,
    intermediate_pde: Option<&PdeTrack>,
    limit_pde: Option<&PdeTrack>,
) -> Result<(SeedCoupling, f64)> {
    let d = cfg.init.dim;
    let store = BrownianStore::new(seed, cfg.dt, d)?;
    let l = cfg.spec.half_width();
    let stride = if cfg.drift == DriftPath::Direct { cfg.history_stride.max(1) } else { 0 };
    let mut inter = init_ensemble(&cfg.init, cfg.n, &store, l, Mode::Interacting)?.with_history(stride);
    let mut mid = intermediate_pde.map(|_| inter.clone().with_history(0).with_mode(Mode::Intermediate));
    let mut lim = (cfg.limit).then(|| inter.clone().with_history(0).with_mode(Mode::Limit));
    let mut chem = match cfg.drift {
        DriftPath::Fast => Some(EmpiricalChemistry::new(&inter, cfg.spec, cfg.eps, cfg.lambda, cfg.interaction)?),
        DriftPath::Direct => None,
    };

    let n = cfg.n;
    let mut sup_im = vec![0.0_f64; n];
    let mut sup_ml = vec![0.0_f64; n];
    let mut sup_il = vec![0.0_f64; n];
    let mut out = SeedCoupling {
        seed,
        sup_interacting_intermediate: None,
        sup_intermediate_limit: None,
        sup_interacting_limit: None,
        dist_interacting_intermediate: vec![],
        dist_intermediate_limit: vec![],
        w1_interacting_limit: vec![],
        w1_intermediate_pde: vec![],
        sup_w1_interacting_limit: None,
    };
    let mut lipschitz = 0.0_f64;
    let mut record = |step: usize, inter: &ParticleEnsemble, mid: Option<&ParticleEnsemble>, lim: Option<&ParticleEnsemble>, out: &mut SeedCoupling| -> Result<()> {
        let sample = step % cfg.sample_every == 0 || step == steps;
        if let Some(mid) = mid {
            let dist = distances(inter, mid);
            sup_im.iter_mut().zip(&dist).for_each(|(s, v)| *s = s.max(*v));
            if sample {
                out.dist_interacting_intermediate.push(mean(&dist));
            }
            if let Some(lim) = lim {
                let dist = distances(mid, lim);
                sup_ml.iter_mut().zip(&dist).for_each(|(s, v)| *s = s.max(*v));
                if sample {
                    out.dist_intermediate_limit.push(mean(&dist));
                }
            }
        }
        if let Some(lim) = lim {
            let dist = distances(inter, lim);
            sup_il.iter_mut().zip(&dist).for_each(|(s, v)| *s = s.max(*v));
        }
        if sample {
            let w1_seed = seed ^ (step as u64).wrapping_mul(0xA24B_AED4_963E_E407);
            if cfg.w1 {
                let rho = limit_pde.and_then(|p| p.rho[step].as_ref()).expect("limit density at sample step");
                out.w1_interacting_limit.push(w1_to(inter, rho, cfg.w1_samples, w1_seed)?);
            }
            if let (Some(mid), Some(pde)) = (mid, intermediate_pde) {
                if let Some(rho) = pde.rho[step].as_ref() {
                    out.w1_intermediate_pde.push(w1_to(mid, rho, cfg.w1_samples, w1_seed)?);
                }
            }
        }
        Ok(())
    };
    record(0, &inter, mid.as_ref(), lim.as_ref(), &mut out)?;

    for step in 0..steps {
        match (&chem, cfg.drift) {
            (Some(c), _) => {
                lipschitz = lipschitz.max(lipschitz_estimate(c.memory_gradient()));
                let drift = GridMemoryDrift::new(c.memory_gradient(), &cfg.init, cfg.lambda, &inter)?;
                em_step(&mut inter, &drift, &store, cfg.eps)?;
            }
            (None, _) => {
                if cfg.interaction {
                    let drift = DirectInteractingDrift::new(&cfg.init, cfg.eps, cfg.lambda, &inter)?;
                    em_step(&mut inter, &drift, &store, cfg.eps)?;
                } else {
                    let drift = crate::particles::InitialChemDrift { init: &cfg.init, lambda: cfg.lambda };
                    em_step(&mut inter, &drift, &store, cfg.eps)?;
                }
            }
        }
        if let Some(c) = chem.as_mut() {
            c.advance(&inter)?;
        }
        if let (Some(mid), Some(pde)) = (mid.as_mut(), intermediate_pde) {
            let drift = GridMemoryDrift::new(&pde.memory_gradient[step], &cfg.init, cfg.lambda, mid)?;
            em_step(mid, &drift, &store, cfg.eps)?;
        }
        if let (Some(lim), Some(pde)) = (lim.as_mut(), limit_pde) {
            let drift = GridMemoryDrift::new(&pde.memory_gradient[step], &cfg.init, cfg.lambda, lim)?;
            em_step(lim, &drift, &store, cfg.eps)?;
        }
        record(step + 1, &inter, mid.as_ref(), lim.as_ref(), &mut out)?;
    }

    if mid.is_some() {
        out.sup_interacting_intermediate = Some(mean(&sup_im));
        if lim.is_some() {
            out.sup_intermediate_limit = Some(mean(&sup_ml));
        }
    }
    if lim.is_some() {
        out.sup_interacting_limit = Some(mean(&sup_il));
    }
    if cfg.w1 {
        out.sup_w1_interacting_limit = Some(sup_metric(&out.w1_interacting_limit));
    }
    Ok((out, lipschitz * cfg.dt))
}
