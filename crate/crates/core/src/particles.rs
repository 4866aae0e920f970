//! Particle ensembles, initial data, drift evaluators and the Euler-Maruyama step.
//!
//! Three processes share this machinery: the interacting particle system with a
//! memory drift, the intermediate self-consistent process driven by the delayed
//! PDE density, and the limiting mean-field process driven by the Keller-Segel
//! solution. All of them see `dX = b dt + sqrt(2) dB` with the same keyed noise.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{chemical_step, deposit, gradient, interp_into, ChemicalParams, DelayedSourceRing};
use crate::grid::{Coord, GridField, GridSpec, MAX_DIM};
use crate::kernels::{memory_nodes, propagate, KernelEval};
use crate::rng::{fill_standard_normal, uniform, BrownianStore};

/// Which process an ensemble represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Interacting,
    Intermediate,
    Limit,
}

/// How the interacting drift is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftPath {
    /// Particle-particle double sum over the stored history.
    Direct,
    /// Deposited density driving the delayed chemical recurrence on a grid.
    Fast,
}

impl std::str::FromStr for DriftPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "direct" => Ok(Self::Direct),
            "fast" => Ok(Self::Fast),
            other => Err(Error::Config(format!("unknown drift mode '{other}' (direct|fast)"))),
        }
    }
}

fn to_coord(v: &[f64]) -> Coord {
    let mut c = [0.0; MAX_DIM];
    c[..v.len()].copy_from_slice(v);
    c
}

/// Initial bacterial density (a probability density).
#[derive(Debug, Clone, PartialEq)]
pub enum DensityFamily {
    Gaussian { mean: Coord, sigma: f64 },
    /// `weight * N(means[0], sigma^2) + (1 - weight) * N(means[1], sigma^2)`.
    Mixture { means: [Coord; 2], sigma: f64, weight: f64 },
}

impl DensityFamily {
    /// Builds a family from its tag; `separation` places the mixture modes at
    /// `mean -/+ separation/2` along the first axis.
    pub fn from_tag(tag: &str, dim: usize, mean: &[f64], sigma: f64, separation: f64, weight: f64) -> Result<Self> {
        if mean.len() != dim {
            return Err(Error::Config(format!("mean has {} entries for dimension {dim}", mean.len())));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("density width must be positive, got {sigma}")));
        }
        let m = to_coord(mean);
        match tag {
            "gaussian" => Ok(Self::Gaussian { mean: m, sigma }),
            "mixture" => {
                if !(0.0..=1.0).contains(&weight) {
                    return Err(Error::Config(format!("mixture weight {weight} outside [0, 1]")));
                }
                let (mut a, mut b) = (m, m);
                a[0] -= 0.5 * separation;
                b[0] += 0.5 * separation;
                Ok(Self::Mixture { means: [a, b], sigma, weight })
            }
            other => Err(Error::Config(format!("unknown initial density family '{other}'"))),
        }
    }

    fn gaussian(x: &[f64], mean: &Coord, sigma: f64) -> f64 {
        let d = x.len();
        let r2: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        (-r2 / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).powf(0.5 * d as f64)
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Self::Gaussian { mean, sigma } => Self::gaussian(x, mean, *sigma),
            Self::Mixture { means, sigma, weight } => {
                weight * Self::gaussian(x, &means[0], *sigma) + (1.0 - weight) * Self::gaussian(x, &means[1], *sigma)
            }
        }
    }

    /// Upper bound on the mass outside `[-a, a]^d` (union bound over axes with
    /// `P(|Z| > t) <= 2 exp(-t^2 / 2)`).
    pub fn tail_mass_bound(&self, dim: usize, a: f64) -> f64 {
        let comp = |mean: &Coord, sigma: f64| -> f64 {
            (0..dim)
                .map(|k| {
                    let t = (a - mean[k].abs()) / sigma;
                    if t <= 0.0 {
                        1.0
                    } else {
                        2.0 * (-0.5 * t * t).exp()
                    }
                })
                .sum::<f64>()
                .min(1.0)
        };
        match self {
            Self::Gaussian { mean, sigma } => comp(mean, *sigma),
            Self::Mixture { means, sigma, weight } => {
                weight * comp(&means[0], *sigma) + (1.0 - weight) * comp(&means[1], *sigma)
            }
        }
    }

    fn sample(&self, dim: usize, rng: &mut impl rand::RngCore, out: &mut [f64]) {
        let (mean, sigma) = match self {
            Self::Gaussian { mean, sigma } => (*mean, *sigma),
            Self::Mixture { means, sigma, weight } => {
                let u = uniform(rng);
                (if u < *weight { means[0] } else { means[1] }, *sigma)
            }
        };
        fill_standard_normal(rng, &mut out[..dim]);
        for k in 0..dim {
            out[k] = mean[k] + sigma * out[k];
        }
    }
}

/// Initial chemical concentration, with closed-form heat propagation.
#[derive(Debug, Clone, PartialEq)]
pub enum ChemicalFamily {
    Zero,
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    Gaussian { amplitude: f64, center: Coord, width: f64 },
    /// `gradient . x`; not representable on a periodic grid.
    Affine { gradient: Coord },
}

impl ChemicalFamily {
    pub fn from_tag(tag: &str, dim: usize, amplitude: f64, center: &[f64], width: f64) -> Result<Self> {
        match tag {
            "zero" | "none" => Ok(Self::Zero),
            "gaussian" => {
                if center.len() != dim {
                    return Err(Error::Config(format!("c0 center has {} entries for dimension {dim}", center.len())));
                }
                if !(width > 0.0) {
                    return Err(Error::Config(format!("c0 width must be positive, got {width}")));
                }
                Ok(Self::Gaussian { amplitude, center: to_coord(center), width })
            }
            other => Err(Error::Config(format!("unknown initial chemical family '{other}'"))),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Gaussian { amplitude, center, width } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            Self::Affine { gradient } => x.iter().zip(gradient).map(|(a, g)| a * g).sum(),
        }
    }

    /// `e^{-lambda s} (e^{s Laplacian} grad c0)(x)` into `out`.
    pub fn propagated_gradient(&self, x: &[f64], s: f64, lambda: f64, out: &mut [f64]) {
        let d = x.len();
        let decay = (-lambda * s).exp();
        match self {
            Self::Zero => out[..d].iter_mut().for_each(|o| *o = 0.0),
            Self::Affine { gradient } => {
                for k in 0..d {
                    out[k] = decay * gradient[k];
                }
            }
            Self::Gaussian { amplitude, center, width } => {
                let var = width * width + 2.0 * s;
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                let peak = amplitude * (width * width / var).powf(0.5 * d as f64) * (-r2 / (2.0 * var)).exp();
                for k in 0..d {
                    out[k] = -decay * peak * (x[k] - center[k]) / var;
                }
            }
        }
    }

    /// Supremum of `|grad c0|`.
    pub fn gradient_sup(&self, dim: usize) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Affine { gradient } => gradient[..dim].iter().map(|g| g * g).sum::<f64>().sqrt(),
            Self::Gaussian { amplitude, width, .. } => amplitude.abs() * (-0.5f64).exp() / width,
        }
    }
}

/// Initial data `(rho0, c0)` for all three processes.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialData {
    pub dim: usize,
    pub rho0: DensityFamily,
    pub c0: ChemicalFamily,
}

impl InitialData {
    pub fn new(dim: usize, rho0: DensityFamily, c0: ChemicalFamily) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Config(format!("dimension {dim} unsupported")));
        }
        Ok(Self { dim, rho0, c0 })
    }

    /// Isotropic Gaussian density, no initial chemical.
    pub fn gaussian(dim: usize, sigma: f64) -> Self {
        Self { dim, rho0: DensityFamily::Gaussian { mean: [0.0; MAX_DIM], sigma }, c0: ChemicalFamily::Zero }
    }

    pub fn with_c0(mut self, c0: ChemicalFamily) -> Self {
        self.c0 = c0;
        self
    }

    /// Density sampled at the nodes, renormalized to unit discrete mass.
    pub fn rho0_grid(&self, spec: &GridSpec) -> GridField {
        let mut f = GridField::from_fn(*spec, |x| self.rho0.density(x));
        let mass = f.mass();
        f.scale(1.0 / mass);
        f
    }

    pub fn c0_grid(&self, spec: &GridSpec) -> Result<GridField> {
        if let ChemicalFamily::Affine { .. } = self.c0 {
            return Err(Error::Config("affine c0 is not periodic and cannot be gridded".into()));
        }
        Ok(GridField::from_fn(*spec, |x| self.c0.value(x)))
    }
}

/// A stored past configuration of the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub time: f64,
    pub positions: Vec<f64>,
}

/// `N` particles in `d` dimensions on the periodic box `[-L, L)^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    keys: Vec<u64>,
    order: Vec<usize>,
    step: usize,
    dt: f64,
    half_width: f64,
    mode: Mode,
    history: Vec<Snapshot>,
    history_stride: usize,
}

impl ParticleEnsemble {
    /// Ensemble from explicit positions; `keys[i]` addresses the noise of particle `i`.
    pub fn from_parts(dim: usize, positions: Vec<f64>, keys: Vec<u64>, dt: f64, half_width: f64, mode: Mode) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Domain(format!("dimension {dim} unsupported")));
        }
        if positions.is_empty() || positions.len() % dim != 0 || positions.len() / dim != keys.len() {
            return Err(Error::Shape(format!("{} coordinates for {} keys in {dim}-d", positions.len(), keys.len())));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite particle position".into()));
        }
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&i| keys[i]);
        if order.windows(2).any(|w| keys[w[0]] == keys[w[1]]) {
            return Err(Error::Domain("particle keys must be distinct".into()));
        }
        let mut ens = Self { dim, positions, keys, order, step: 0, dt, half_width, mode, history: Vec::new(), history_stride: 0 };
        ens.wrap_all();
        ens.history.push(Snapshot { step: 0, time: 0.0, positions: ens.positions.clone() });
        Ok(ens)
    }

    /// Records the full configuration every `stride` steps (0 keeps only the initial one).
    pub fn with_history(mut self, stride: usize) -> Self {
        self.history_stride = stride;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    /// Particle indices sorted by key; every sum over particles runs in this order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn history(&self) -> &[Snapshot] {
        &self.history
    }

    pub fn history_stride(&self) -> usize {
        self.history_stride
    }

    fn wrap_all(&mut self) {
        let width = 2.0 * self.half_width;
        let l = self.half_width;
        for v in &mut self.positions {
            let mut y = (*v + l).rem_euclid(width) - l;
            if y >= l {
                y -= width;
            }
            *v = y;
        }
    }

    /// Minimum-image displacement `a - b` along one axis.
    #[inline]
    pub fn min_image(&self, delta: f64) -> f64 {
        let width = 2.0 * self.half_width;
        delta - width * (delta / width).round()
    }

    /// Euclidean minimum-image distance between particle `i` here and in `other`.
    pub fn distance_to(&self, other: &ParticleEnsemble, i: usize) -> f64 {
        self.position(i)
            .iter()
            .zip(other.position(i))
            .map(|(a, b)| self.min_image(a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Reorders particles: new particle `k` is old particle `perm[k]`, keeping its key.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::Shape("permutation length".into()));
        }
        let gather = |src: &[f64]| -> Vec<f64> {
            perm.iter().flat_map(|&p| src[p * self.dim..(p + 1) * self.dim].iter().copied()).collect()
        };
        let keys = perm.iter().map(|&p| self.keys[p]).collect();
        let mut out = Self::from_parts(self.dim, gather(&self.positions), keys, self.dt, self.half_width, self.mode)?;
        out.step = self.step;
        out.history_stride = self.history_stride;
        out.history =
            self.history.iter().map(|s| Snapshot { step: s.step, time: s.time, positions: gather(&s.positions) }).collect();
        Ok(out)
    }
}

/// Draws `n` i.i.d. samples from `rho0`; particle `i` gets key `i` and its
/// sample from the store's initial stream.
pub fn init_ensemble(init: &InitialData, n: usize, store: &BrownianStore, half_width: f64, mode: Mode) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::Config("ensemble needs at least one particle".into()));
    }
    if store.dim() != init.dim {
        return Err(Error::Shape(format!("store dimension {} vs data dimension {}", store.dim(), init.dim)));
    }
    let d = init.dim;
    let mut positions = vec![0.0; n * d];
    positions.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let mut rng = store.initial_rng(i as u64);
        init.rho0.sample(d, &mut rng, out);
    });
    ParticleEnsemble::from_parts(d, positions, (0..n as u64).collect(), store.dt(), half_width, mode)
}

/// `e^{-lambda s} (e^{s Laplacian} grad c0)(x)` in closed form.
pub fn drift_initial_chem(x: &[f64], s: f64, init: &InitialData, lambda: f64) -> Result<Vec<f64>> {
    if s < 0.0 {
        return Err(Error::Domain(format!("negative time {s}")));
    }
    let mut out = vec![0.0; x.len()];
    init.c0.propagated_gradient(x, s, lambda, &mut out);
    Ok(out)
}

/// Grid route for the same quantity: `interp(grad(e^{s Laplacian} c0), x) e^{-lambda s}`.
pub fn drift_initial_chem_grid(x: &[f64], s: f64, c0: &GridField, lambda: f64) -> Result<Vec<f64>> {
    let g = gradient(&propagate(c0, s, lambda)?)?;
    let mut out = vec![0.0; x.len()];
    interp_into(&g, x, &mut out);
    Ok(out)
}

/// Memory part of the interacting drift of particle `i` by direct summation:
/// `(1/N) sum_j sum_k w_k e^{-lambda (s - r_k)} grad G(X_s^i - X_{r_k}^j, s - r_k)`.
/// Zero while `s <= eps`.
pub fn drift_interacting_direct(i: usize, ens: &ParticleEnsemble, eps: f64, lambda: f64) -> Result<Vec<f64>> {
    interaction_drift_at(ens.position(i), ens, eps, lambda)
}

/// Memory drift the ensemble's history exerts on a test point `x` at the
/// ensemble's current time.
pub fn interaction_drift_at(x: &[f64], ens: &ParticleEnsemble, eps: f64, lambda: f64) -> Result<Vec<f64>> {
    if x.len() != ens.dim() {
        return Err(Error::Shape("query point dimension".into()));
    }
    let kernel = KernelEval::new(ens.dim(), lambda)?;
    let mut out = vec![0.0; ens.dim()];
    direct_memory_into(x, ens, eps, &kernel, &mut out)?;
    Ok(out)
}

fn direct_memory_into(xi: &[f64], ens: &ParticleEnsemble, eps: f64, kernel: &KernelEval, out: &mut [f64]) -> Result<()> {
    let d = ens.dim();
    out[..d].iter_mut().for_each(|o| *o = 0.0);
    let s = ens.time();
    let stride = ens.history_stride().max(1) as f64 * ens.dt();
    let quad = memory_nodes(s, eps, stride);
    if quad.is_empty() {
        return Ok(());
    }
    let stride_steps = ens.history_stride().max(1);
    let inv_n = 1.0 / ens.len() as f64;
    let mut z = [0.0; MAX_DIM];
    for ((&k, &r), &w) in quad.indices.iter().zip(&quad.nodes).zip(&quad.weights) {
        let snap = ens
            .history()
            .get(k)
            .filter(|snap| snap.step == k * stride_steps)
            .ok_or_else(|| Error::State(format!("history is missing the snapshot at t = {r}")))?;
        let tau = s - r;
        let mut node = [0.0; MAX_DIM];
        for &j in ens.order() {
            let yj = &snap.positions[j * d..(j + 1) * d];
            for a in 0..d {
                z[a] = ens.min_image(xi[a] - yj[a]);
            }
            kernel.accumulate_memory_gradient(&z[..d], tau, 1.0, &mut node[..d]);
        }
        for a in 0..d {
            out[a] += w * inv_n * node[a];
        }
    }
    Ok(())
}

/// A drift that can be evaluated for every particle of an ensemble.
pub trait DriftField: Sync {
    /// Writes `b(X_t^i, t)` for particle `i` into `out`.
    fn drift(&self, ens: &ParticleEnsemble, i: usize, out: &mut [f64]);
}

/// No drift at all.
pub struct ZeroDrift;

impl DriftField for ZeroDrift {
    fn drift(&self, ens: &ParticleEnsemble, _i: usize, out: &mut [f64]) {
        out[..ens.dim()].iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Only the propagated initial chemical gradient.
pub struct InitialChemDrift<'a> {
    pub init: &'a InitialData,
    pub lambda: f64,
}

impl DriftField for InitialChemDrift<'_> {
    fn drift(&self, ens: &ParticleEnsemble, i: usize, out: &mut [f64]) {
        self.init.c0.propagated_gradient(ens.position(i), ens.time(), self.lambda, out);
    }
}

/// Interacting drift by direct history summation plus the `c0` term.
pub struct DirectInteractingDrift<'a> {
    init: &'a InitialData,
    kernel: KernelEval,
    eps: f64,
}

impl<'a> DirectInteractingDrift<'a> {
    pub fn new(init: &'a InitialData, eps: f64, lambda: f64, ens: &ParticleEnsemble) -> Result<Self> {
        if ens.history_stride() == 0 && ens.time() > eps {
            return Err(Error::State("direct drift needs a recorded history".into()));
        }
        Ok(Self { init, kernel: KernelEval::new(ens.dim(), lambda)?, eps })
    }
}

impl DriftField for DirectInteractingDrift<'_> {
    fn drift(&self, ens: &ParticleEnsemble, i: usize, out: &mut [f64]) {
        let d = ens.dim();
        let mut mem = [0.0; MAX_DIM];
        direct_memory_into(ens.position(i), ens, self.eps, &self.kernel, &mut mem).expect("history validated at construction");
        self.init.c0.propagated_gradient(ens.position(i), ens.time(), self.kernel.lambda(), out);
        for a in 0..d {
            out[a] += mem[a];
        }
    }
}

/// Grid-interpolated memory gradient plus the closed-form `c0` term: the fast
/// interacting drift, and the mean-field drift when the gradient comes from a
/// PDE solution.
pub struct GridMemoryDrift<'a> {
    memory_gradient: &'a GridField,
    init: &'a InitialData,
    lambda: f64,
}

impl<'a> GridMemoryDrift<'a> {
    /// Fails when the gradient field is not at the ensemble's current time.
    pub fn new(memory_gradient: &'a GridField, init: &'a InitialData, lambda: f64, ens: &ParticleEnsemble) -> Result<Self> {
        check_fresh(memory_gradient, ens.time())?;
        if memory_gradient.components() != ens.dim() {
            return Err(Error::Shape("memory gradient must have d components".into()));
        }
        Ok(Self { memory_gradient, init, lambda })
    }
}

fn check_fresh(field: &GridField, t: f64) -> Result<()> {
    if (field.time() - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(Error::State(format!("stale field: field at t = {}, particles at t = {t}", field.time())));
    }
    Ok(())
}

impl DriftField for GridMemoryDrift<'_> {
    fn drift(&self, ens: &ParticleEnsemble, i: usize, out: &mut [f64]) {
        let d = ens.dim();
        let x = ens.position(i);
        let mut mem = [0.0; MAX_DIM];
        interp_into(self.memory_gradient, x, &mut mem);
        self.init.c0.propagated_gradient(x, ens.time(), self.lambda, out);
        for a in 0..d {
            out[a] += mem[a];
        }
    }
}

/// Fast interacting drift of particle `i`: `interp(phi_grad, X^i) + c0 term`.
pub fn drift_interacting_fast(
    i: usize,
    ens: &ParticleEnsemble,
    phi_grad: &GridField,
    init: &InitialData,
    lambda: f64,
) -> Result<Vec<f64>> {
    let drift = GridMemoryDrift::new(phi_grad, init, lambda, ens)?;
    let mut out = vec![0.0; ens.dim()];
    drift.drift(ens, i, &mut out);
    Ok(out)
}

/// Mean-field drift at an arbitrary point from the gradient of a full chemical field.
pub fn drift_meanfield(x: &[f64], chemical_gradient: &GridField) -> Result<Vec<f64>> {
    if chemical_gradient.components() != x.len() {
        return Err(Error::Shape("chemical gradient must have d components".into()));
    }
    let mut out = vec![0.0; x.len()];
    interp_into(chemical_gradient, x, &mut out);
    Ok(out)
}

/// Delayed chemical memory built from the ensemble's own empirical density.
#[derive(Debug, Clone)]
pub struct EmpiricalChemistry {
    spec: GridSpec,
    params: ChemicalParams,
    ring: DelayedSourceRing,
    phi: GridField,
    phi_grad: GridField,
    interaction: bool,
}

impl EmpiricalChemistry {
    /// Starts at the ensemble's current (initial) configuration.
    pub fn new(ens: &ParticleEnsemble, spec: GridSpec, eps: f64, lambda: f64, interaction: bool) -> Result<Self> {
        let dt = ens.dt();
        let mut ring = DelayedSourceRing::new(eps, dt);
        ring.push(ens.step(), deposit(ens, &spec)?)?;
        let phi = GridField::zeros(spec, 1).with_time(ens.time());
        let phi_grad = GridField::zeros(spec, spec.dim()).with_time(ens.time());
        Ok(Self { spec, params: ChemicalParams { dt, lambda }, ring, phi, phi_grad, interaction })
    }

    /// Deposits the ensemble after its latest step and advances the memory field.
    pub fn advance(&mut self, ens: &ParticleEnsemble) -> Result<()> {
        let step = ens.step();
        if step != self.ring.oldest_step().unwrap_or(0) + self.ring.len() {
            return Err(Error::State(format!("chemistry is not one step behind the ensemble (step {step})")));
        }
        self.ring.push(step, deposit(ens, &self.spec)?)?;
        if self.interaction {
            self.phi = chemical_step(&self.phi, &self.ring, self.params, step - 1)?;
            self.phi_grad = gradient(&self.phi)?;
        } else {
            self.phi.set_time(ens.time());
            self.phi_grad.set_time(ens.time());
        }
        Ok(())
    }

    pub fn memory(&self) -> &GridField {
        &self.phi
    }

    pub fn memory_gradient(&self) -> &GridField {
        &self.phi_grad
    }

    pub fn lag(&self) -> usize {
        self.ring.lag()
    }
}

/// `dt <= eps/4` unless the cut-off is inactive (limit process or `eps = 0`).
pub fn check_step_resolution(mode: Mode, dt: f64, eps: f64) -> Result<()> {
    if mode != Mode::Limit && eps > 0.0 && dt > 0.25 * eps * (1.0 + 1e-12) {
        return Err(Error::Config(format!("dt > eps/4 (dt = {dt}, eps = {eps})")));
    }
    Ok(())
}

/// Euler-Maruyama step `X <- X + b dt + sqrt(2) dB` for every particle, with
/// periodic wrap and history recording.
pub fn em_step(ens: &mut ParticleEnsemble, drift: &impl DriftField, store: &BrownianStore, eps: f64) -> Result<()> {
    check_step_resolution(ens.mode(), ens.dt(), eps)?;
    if (store.dt() - ens.dt()).abs() > 1e-15 * ens.dt() {
        return Err(Error::Config(format!("store dt {} differs from ensemble dt {}", store.dt(), ens.dt())));
    }
    let d = ens.dim();
    let dt = ens.dt();
    let step = ens.step() as u64;
    let mut update = vec![0.0; ens.positions.len()];
    {
        let snapshot: &ParticleEnsemble = ens;
        update.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
            let mut b = [0.0; MAX_DIM];
            let mut db = [0.0; MAX_DIM];
            drift.drift(snapshot, i, &mut b[..d]);
            store.increment(snapshot.keys[i], step, &mut db[..d]);
            for a in 0..d {
                out[a] = b[a] * dt + std::f64::consts::SQRT_2 * db[a];
            }
        });
    }
    for (x, u) in ens.positions.iter_mut().zip(&update) {
        *x += u;
    }
    ens.wrap_all();
    ens.step += 1;
    if ens.history_stride > 0 && ens.step % ens.history_stride == 0 {
        ens.history.push(Snapshot { step: ens.step, time: ens.time(), positions: ens.positions.clone() });
    }
    Ok(())
}

/// Default history decimation `max(1, ceil(eps / (8 dt)))`.
pub fn default_history_stride(eps: f64, dt: f64) -> usize {
    ((eps / (8.0 * dt)) - 1e-9).ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(seed: u64, dt: f64, d: usize) -> BrownianStore {
        BrownianStore::new(seed, dt, d).unwrap()
    }

    #[test]
    fn init_is_reproducible_and_single_particle_history() {
        let init = InitialData::gaussian(2, 1.0);
        let s = store(9, 0.01, 2);
        let a = init_ensemble(&init, 50, &s, 8.0, Mode::Interacting).unwrap();
        let b = init_ensemble(&init, 50, &s, 8.0, Mode::Interacting).unwrap();
        assert_eq!(a.positions(), b.positions());
        let one = init_ensemble(&init, 1, &s, 8.0, Mode::Interacting).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.history().len(), 1);
    }

    #[test]
    fn init_mean_within_clt_band() {
        let init = InitialData::gaussian(1, 1.0);
        let n = 10_000;
        let ens = init_ensemble(&init, n, &store(1, 0.01, 1), 8.0, Mode::Interacting).unwrap();
        let mean: f64 = ens.positions().iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn unknown_family_is_rejected() {
        assert!(DensityFamily::from_tag("cauchy", 1, &[0.0], 1.0, 0.0, 0.5).is_err());
        assert!(ChemicalFamily::from_tag("sine", 1, 1.0, &[0.0], 1.0).is_err());
    }

    #[test]
    fn initial_chem_closed_forms() {
        let zero = InitialData::gaussian(2, 1.0);
        assert_eq!(drift_initial_chem(&[0.3, -1.0], 0.7, &zero, 1.0).unwrap(), vec![0.0, 0.0]);

        let v = [0.4, -0.2, 0.0];
        let affine = InitialData::gaussian(2, 1.0).with_c0(ChemicalFamily::Affine { gradient: v });
        let got = drift_initial_chem(&[1.0, 2.0], 0.3, &affine, 2.0).unwrap();
        let decay = (-0.6f64).exp();
        assert!((got[0] - decay * 0.4).abs() < 1e-10 && (got[1] + decay * 0.2).abs() < 1e-10);

        let c0 = ChemicalFamily::from_tag("gaussian", 1, 0.8, &[0.5], 1.0).unwrap();
        let init = InitialData::gaussian(1, 1.0).with_c0(c0.clone());
        let x = 1.3;
        let exact = -0.8 * (x - 0.5) * (-(x - 0.5f64).powi(2) / 2.0).exp();
        // the deviation is first order in s with slope |Laplacian grad c0| + lambda |grad c0| <= 3
        let near = drift_initial_chem(&[x], 1e-6, &init, 1.0).unwrap()[0];
        assert!((near - exact).abs() < 3e-6);
        let nearer = drift_initial_chem(&[x], 1e-9, &init, 1.0).unwrap()[0];
        assert!((nearer - exact).abs() < 1e-8);
    }

    #[test]
    fn initial_chem_grid_route_agrees() {
        let c0 = ChemicalFamily::from_tag("gaussian", 1, 0.8, &[0.5], 1.0).unwrap();
        let init = InitialData::gaussian(1, 1.0).with_c0(c0);
        let spec = GridSpec::new(1, 512, 8.0).unwrap();
        let grid = init.c0_grid(&spec).unwrap();
        for x in [-1.0, 0.37, 2.2] {
            let a = drift_initial_chem(&[x], 0.25, &init, 0.5).unwrap()[0];
            let b = drift_initial_chem_grid(&[x], 0.25, &grid, 0.5).unwrap()[0];
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn direct_drift_vanishes_before_cutoff_and_for_coincident_pair() {
        let dt = 0.01;
        let eps = 0.1;
        let pos = vec![0.5, 0.5];
        let mut ens = ParticleEnsemble::from_parts(1, pos, vec![0, 1], dt, 8.0, Mode::Interacting).unwrap().with_history(1);
        let zero = BrownianStore::zero(0, dt, 1).unwrap();
        for _ in 0..5 {
            em_step(&mut ens, &ZeroDrift, &zero, eps).unwrap();
            assert_eq!(drift_interacting_direct(0, &ens, eps, 1.0).unwrap(), vec![0.0]);
        }
        for _ in 0..20 {
            em_step(&mut ens, &ZeroDrift, &zero, eps).unwrap();
        }
        // both particles always at the same point: the gradient at the origin
        assert_eq!(drift_interacting_direct(0, &ens, eps, 1.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn em_step_rejects_coarse_dt() {
        let init = InitialData::gaussian(1, 1.0);
        let s = store(1, 0.05, 1);
        let mut ens = init_ensemble(&init, 4, &s, 8.0, Mode::Interacting).unwrap();
        let err = em_step(&mut ens, &ZeroDrift, &s, 0.1).unwrap_err();
        assert!(err.to_string().contains("dt > eps/4"));
        let mut lim = ens.clone().with_mode(Mode::Limit);
        em_step(&mut lim, &ZeroDrift, &s, 0.1).unwrap();
    }

    #[test]
    fn zero_drift_zero_noise_keeps_positions() {
        let init = InitialData::gaussian(2, 1.0);
        let s = BrownianStore::zero(3, 0.01, 2).unwrap();
        let mut ens = init_ensemble(&init, 16, &s, 8.0, Mode::Interacting).unwrap();
        let before = ens.positions().to_vec();
        em_step(&mut ens, &ZeroDrift, &s, 0.2).unwrap();
        assert_eq!(ens.positions(), &before[..]);
    }

    #[test]
    fn one_step_displacement_variance() {
        let dt = 0.01;
        let init = InitialData::gaussian(1, 0.5);
        let s = store(5, dt, 1);
        let mut ens = init_ensemble(&init, 10_000, &s, 8.0, Mode::Limit).unwrap();
        let before = ens.positions().to_vec();
        em_step(&mut ens, &ZeroDrift, &s, 0.0).unwrap();
        let var = ens.positions().iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 10_000.0;
        assert!((var / (2.0 * dt) - 1.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn stale_gradient_is_rejected() {
        let init = InitialData::gaussian(1, 1.0);
        let s = store(1, 0.01, 1);
        let ens = init_ensemble(&init, 4, &s, 8.0, Mode::Interacting).unwrap();
        let spec = GridSpec::new(1, 64, 8.0).unwrap();
        let stale = GridField::zeros(spec, 1).with_time(0.5);
        assert!(matches!(drift_interacting_fast(0, &ens, &stale, &init, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn history_stride_default() {
        assert_eq!(default_history_stride(0.2, 0.025), 1);
        assert_eq!(default_history_stride(0.2, 0.01), 3);
        assert_eq!(default_history_stride(0.08, 0.01), 1);
    }
}
