//! Heat kernel primitives, spectral heat semigroup and memory-integral quadrature.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::spectral::Spectral;

/// Dimension and chemical decay rate shared by every kernel evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEval {
    dim: usize,
    lambda: f64,
}

impl KernelEval {
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be >= 1".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("decay rate must be >= 0, got {lambda}")));
        }
        Ok(Self { dim, lambda })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `e^{-lambda tau} * grad G(x, tau)` accumulated into `out` with weight `w`.
    #[inline]
    pub fn accumulate_memory_gradient(&self, x: &[f64], tau: f64, w: f64, out: &mut [f64]) {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let g = (-r2 / (4.0 * tau) - self.lambda * tau).exp() / (4.0 * PI * tau).powf(0.5 * self.dim as f64);
        let coeff = -w * g / (2.0 * tau);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += coeff * xi;
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("heat kernel needs tau > 0, got {tau}")))
    }
}

/// Gaussian heat kernel `exp(-|x|^2 / 4 tau) / (4 pi tau)^{d/2}` with `d = x.len()`.
pub fn heat_kernel(x: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    Ok((-r2 / (4.0 * tau)).exp() / (4.0 * PI * tau).powf(0.5 * x.len() as f64))
}

/// Spatial gradient of [`heat_kernel`]: `G(x, tau) * (-x) / (2 tau)`.
pub fn grad_heat_kernel(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    let g = heat_kernel(x, tau)?;
    Ok(x.iter().map(|xi| -g * xi / (2.0 * tau)).collect())
}

/// Upper bound on `|grad G(., tau)|` from maximizing `u e^{-u^2}` at `u = 1/sqrt(2)`.
pub fn grad_heat_kernel_bound(dim: usize, tau: f64) -> f64 {
    0.5 * 2f64.sqrt() * (-0.5f64).exp() * (4.0 * PI * tau).powf(-0.5 * dim as f64) / tau.sqrt()
}

/// Periodic heat semigroup `e^{tau Laplacian}` applied component-wise by spectral
/// multiplication with `exp(-|k|^2 tau)`.
pub fn semigroup_apply(field: &GridField, tau: f64) -> Result<GridField> {
    propagate(field, tau, 0.0)
}

/// `e^{-lambda tau} e^{tau Laplacian}` applied component-wise.
pub fn propagate(field: &GridField, tau: f64, lambda: f64) -> Result<GridField> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("semigroup time must be >= 0, got {tau}")));
    }
    if tau == 0.0 && lambda == 0.0 {
        return Ok(field.clone());
    }
    let spec = *field.spec();
    let spectral = Spectral::new(&spec);
    let decay = (-lambda * tau).exp();
    let multipliers: Vec<f64> = spectral.k_squared().iter().map(|k2| (-k2 * tau).exp() * decay).collect();
    let mut out = Vec::with_capacity(field.values().len());
    for c in 0..field.components() {
        let mut hat = spectral.forward(field.component(c));
        apply_multiplier(&mut hat, &multipliers);
        out.extend(spectral.inverse(hat));
    }
    Ok(GridField::from_values(spec, field.components(), out)?.with_time(field.time()))
}

pub(crate) fn apply_multiplier(hat: &mut [Complex64], multipliers: &[f64]) {
    for (h, m) in hat.iter_mut().zip(multipliers) {
        *h *= *m;
    }
}

/// Trapezoid quadrature for the memory integral over `[0, s - eps]`.
///
/// Nodes are stored history points `r_k = k * stride`; `indices[k]` is the history
/// slot of each node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryQuadrature {
    pub indices: Vec<usize>,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MemoryQuadrature {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Quadrature nodes for `int_0^{s - eps} g(r) dr` on a history stored every
/// `stride` time units.
///
/// Returns an empty rule when `s <= eps`. Otherwise the trapezoid rule runs up to
/// the largest stored point not exceeding `s - eps`; the leftover sliver up to
/// `s - eps` is credited to that last node so the weights integrate constants
/// exactly.
pub fn memory_nodes(s: f64, eps: f64, stride: f64) -> MemoryQuadrature {
    let span = s - eps;
    if !(stride > 0.0) || span <= 1e-12 * s.abs().max(1.0) {
        return MemoryQuadrature::default();
    }
    let panels = (span / stride + 1e-9).floor() as usize;
    let mut q = MemoryQuadrature {
        indices: (0..=panels).collect(),
        nodes: (0..=panels).map(|k| k as f64 * stride).collect(),
        weights: vec![stride; panels + 1],
    };
    if panels == 0 {
        q.weights[0] = 0.0;
    } else {
        q.weights[0] = 0.5 * stride;
        q.weights[panels] = 0.5 * stride;
    }
    let remainder = (span - panels as f64 * stride).max(0.0);
    q.weights[panels] += remainder;
    q
}
