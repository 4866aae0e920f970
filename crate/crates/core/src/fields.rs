//! Particle/grid transfer (cloud-in-cell), spectral gradients and the delayed
//! chemical field.
//!
//! The chemical memory term
//! `phi(t) = int_0^{t-eps} e^{-lambda (t-s)} e^{(t-s) Laplacian} f(s) ds`
//! obeys `d/dt phi = (Laplacian - lambda) phi + e^{-lambda eps} e^{eps Laplacian} f(t - eps)`
//! for `t > eps` and vanishes before. [`chemical_step`] integrates that equation
//! with a trapezoidal integrating-factor rule, which reproduces the trapezoid
//! Duhamel sum of [`chemical_duhamel`] panel by panel.

use std::collections::VecDeque;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
pub use crate::grid::{GridField, GridSpec};
use crate::grid::MAX_DIM;
use crate::kernels::{apply_multiplier, memory_nodes, propagate};
use crate::particles::ParticleEnsemble;
use crate::spectral::Spectral;

/// Particles handled per private deposit buffer. Fixed so that the summation
/// order never depends on the worker count.
const DEPOSIT_CHUNK: usize = 1024;

/// Number of whole steps spanned by the cut-off (`ceil(eps / dt)`).
pub fn lag_steps(eps: f64, dt: f64) -> usize {
    if eps <= 0.0 {
        0
    } else {
        (eps / dt - 1e-9).ceil() as usize
    }
}

/// Multilinear (CIC) stencil of a point: lower node per axis and the weight of
/// the upper node.
#[inline]
fn cic_stencil(spec: &GridSpec, x: &[f64]) -> ([usize; MAX_DIM], [f64; MAX_DIM]) {
    let m = spec.cells();
    let dx = spec.dx();
    let mut lower = [0usize; MAX_DIM];
    let mut frac = [0.0; MAX_DIM];
    for a in 0..spec.dim() {
        let u = (spec.wrap(x[a]) + spec.half_width()) / dx;
        let i0 = u.floor();
        let mut f = u - i0;
        let mut i = i0 as isize;
        if f >= 1.0 {
            f = 0.0;
            i += 1;
        }
        lower[a] = i.rem_euclid(m as isize) as usize;
        frac[a] = f;
    }
    (lower, frac)
}

/// Visits the `2^d` corners of the stencil with their multilinear weights.
#[inline]
fn for_each_corner(spec: &GridSpec, lower: &[usize; MAX_DIM], frac: &[f64; MAX_DIM], mut f: impl FnMut(usize, f64)) {
    let d = spec.dim();
    let m = spec.cells();
    for corner in 0..(1usize << d) {
        let mut idx = 0usize;
        let mut w = 1.0;
        for a in 0..d {
            let up = (corner >> (d - 1 - a)) & 1 == 1;
            let k = if up { (lower[a] + 1) % m } else { lower[a] };
            w *= if up { frac[a] } else { 1.0 - frac[a] };
            idx = idx * m + k;
        }
        f(idx, w);
    }
}

/// Cloud-in-cell deposit of `positions` (row-major `n x d`) with mass `weight`
/// each, visiting particles in `order`. Returns a density field.
pub fn deposit_points(positions: &[f64], order: &[usize], weight: f64, spec: &GridSpec) -> GridField {
    let d = spec.dim();
    let n_nodes = spec.n_nodes();
    let inv_vol = weight / spec.cell_volume();
    let partials: Vec<Vec<f64>> = order
        .par_chunks(DEPOSIT_CHUNK)
        .map(|chunk| {
            let mut buf = vec![0.0; n_nodes];
            for &p in chunk {
                let x = &positions[p * d..(p + 1) * d];
                let (lower, frac) = cic_stencil(spec, x);
                for_each_corner(spec, &lower, &frac, |idx, w| buf[idx] += w * inv_vol);
            }
            buf
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut acc = iter.next().unwrap_or_else(|| vec![0.0; n_nodes]);
    for part in iter {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    GridField::from_values(*spec, 1, acc).expect("deposit produces finite samples")
}

/// Empirical density of the ensemble, weight `1/N` per particle.
pub fn deposit(ensemble: &ParticleEnsemble, spec: &GridSpec) -> Result<GridField> {
    if ensemble.dim() != spec.dim() {
        return Err(Error::Shape(format!(
            "ensemble dimension {} vs grid dimension {}",
            ensemble.dim(),
            spec.dim()
        )));
    }
    let weight = 1.0 / ensemble.len() as f64;
    Ok(deposit_points(ensemble.positions(), ensemble.order(), weight, spec).with_time(ensemble.time()))
}

/// Multilinear interpolation of every component at `x`, written into `out`.
pub fn interp_into(field: &GridField, x: &[f64], out: &mut [f64]) {
    let spec = field.spec();
    let (lower, frac) = cic_stencil(spec, x);
    let n = spec.n_nodes();
    out[..field.components()].iter_mut().for_each(|o| *o = 0.0);
    let values = field.values();
    for_each_corner(spec, &lower, &frac, |idx, w| {
        for (c, o) in out[..field.components()].iter_mut().enumerate() {
            *o += w * values[c * n + idx];
        }
    });
}

/// Multilinear interpolation with periodic wrap.
pub fn interp(field: &GridField, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != field.spec().dim() {
        return Err(Error::Shape(format!("query of length {} on a {}-d grid", x.len(), field.spec().dim())));
    }
    let mut out = vec![0.0; field.components()];
    interp_into(field, x, &mut out);
    Ok(out)
}

/// Spectral gradient (`i k` multiplier) of a scalar field; `d` components.
pub fn gradient(field: &GridField) -> Result<GridField> {
    if field.components() != 1 {
        return Err(Error::Shape("gradient expects a scalar field".into()));
    }
    let spec = *field.spec();
    let spectral = Spectral::new(&spec);
    let hat = spectral.forward(field.values());
    let mut out = Vec::with_capacity(spec.n_nodes() * spec.dim());
    for axis in 0..spec.dim() {
        let dhat: Vec<Complex64> =
            hat.iter().enumerate().map(|(idx, h)| h * spectral.derivative_factor(idx, axis)).collect();
        out.extend(spectral.inverse(dhat));
    }
    Ok(GridField::from_values(spec, spec.dim(), out)?.with_time(field.time()))
}

/// Recent density snapshots, enough to look back `lag` steps.
#[derive(Debug, Clone)]
pub struct DelayedSourceRing {
    lag: usize,
    capacity: usize,
    snapshots: VecDeque<(usize, GridField)>,
}

impl DelayedSourceRing {
    /// Ring for cut-off `eps` at step `dt`. It holds `ceil(eps/dt) + 2`
    /// snapshots: the newest one plus both ends of the delayed trapezoid panel.
    pub fn new(eps: f64, dt: f64) -> Self {
        let lag = lag_steps(eps, dt);
        Self::with_lag(lag)
    }

    pub fn with_lag(lag: usize) -> Self {
        let capacity = lag + 2;
        Self { lag, capacity, snapshots: VecDeque::with_capacity(capacity) }
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends the snapshot of `step`; steps must be consecutive.
    pub fn push(&mut self, step: usize, field: GridField) -> Result<()> {
        if let Some((last, _)) = self.snapshots.back() {
            if step != last + 1 {
                return Err(Error::State(format!("snapshot step {step} does not follow {last}")));
            }
        }
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back((step, field));
        Ok(())
    }

    pub fn get(&self, step: usize) -> Option<&GridField> {
        let (first, _) = self.snapshots.front()?;
        let offset = step.checked_sub(*first)?;
        self.snapshots.get(offset).map(|(_, f)| f)
    }

    pub fn oldest_step(&self) -> Option<usize> {
        self.snapshots.front().map(|(s, _)| *s)
    }
}

/// Time step and decay rate of the chemical recurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChemicalParams {
    pub dt: f64,
    pub lambda: f64,
}

/// Advances the memory field from step `step` to `step + 1`.
///
/// `phi` holds the field at `t = step * dt`. When `(step + 1) * dt` lies past the
/// cut-off the ring must contain the density snapshots of steps
/// `step - lag` and `step + 1 - lag`.
pub fn chemical_step(phi: &GridField, ring: &DelayedSourceRing, params: ChemicalParams, step: usize) -> Result<GridField> {
    let lag = ring.lag();
    let dt = params.dt;
    let next_time = (step + 1) as f64 * dt;
    if step < lag {
        // cut-off window: the source has not switched on yet
        let mut out = propagate(phi, dt, params.lambda)?;
        out.set_time(next_time);
        return Ok(out);
    }
    let missing = |s: usize| Error::State(format!("ring underflow: no density snapshot for step {s}"));
    let old = ring.get(step - lag).ok_or_else(|| missing(step - lag))?;
    let new = ring.get(step + 1 - lag).ok_or_else(|| missing(step + 1 - lag))?;
    phi.check_compatible(old)?;
    phi.check_compatible(new)?;

    let spec = *phi.spec();
    let spectral = Spectral::new(&spec);
    let eps_eff = lag as f64 * dt;
    let k2 = spectral.k_squared();
    let step_mult: Vec<f64> = k2.iter().map(|k| (-(k + params.lambda) * dt).exp()).collect();
    let delay_mult: Vec<f64> = k2.iter().map(|k| (-(k + params.lambda) * eps_eff).exp()).collect();

    let mut phi_hat = spectral.forward(phi.values());
    let old_hat = spectral.forward(old.values());
    let new_hat = spectral.forward(new.values());
    for idx in 0..phi_hat.len() {
        let source = 0.5 * dt * delay_mult[idx] * (step_mult[idx] * old_hat[idx] + new_hat[idx]);
        phi_hat[idx] = step_mult[idx] * phi_hat[idx] + source;
    }
    Ok(GridField::from_values(spec, 1, spectral.inverse(phi_hat))?.with_time(next_time))
}

/// Direct trapezoid evaluation of the chemical Duhamel formula
/// `c(t) = e^{-lambda t} e^{t Laplacian} c0 + int_0^{t-eps} e^{-lambda (t-s)} e^{(t-s) Laplacian} rho(s) ds`
/// with `rho_path[k]` the density at `k * dt`.
pub fn chemical_duhamel(
    rho_path: &[GridField],
    c0: &GridField,
    lambda: f64,
    eps: f64,
    dt: f64,
    t: f64,
) -> Result<GridField> {
    let mut out = propagate(c0, t, lambda)?;
    let quad = memory_nodes(t, eps, dt);
    if quad.is_empty() {
        out.set_time(t);
        return Ok(out);
    }
    let last = *quad.indices.last().expect("non-empty");
    if last >= rho_path.len() {
        return Err(Error::State(format!("density path has {} samples, need {}", rho_path.len(), last + 1)));
    }
    let spec = *c0.spec();
    let spectral = Spectral::new(&spec);
    let k2 = spectral.k_squared();
    let mut acc = vec![Complex64::new(0.0, 0.0); spec.n_nodes()];
    for ((&k, &s), &w) in quad.indices.iter().zip(&quad.nodes).zip(&quad.weights) {
        c0.check_compatible(&rho_path[k])?;
        let age = t - s;
        let mut hat = spectral.forward(rho_path[k].values());
        let mult: Vec<f64> = k2.iter().map(|k| w * (-(k + lambda) * age).exp()).collect();
        apply_multiplier(&mut hat, &mult);
        for (a, h) in acc.iter_mut().zip(hat) {
            *a += h;
        }
    }
    out.axpy(1.0, &GridField::from_values(spec, 1, spectral.inverse(acc))?)?;
    out.set_time(t);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::semigroup_apply;
    use std::f64::consts::PI;

    fn spec1(m: usize) -> GridSpec {
        GridSpec::new(1, m, 8.0).unwrap()
    }

    #[test]
    fn deposit_on_node_and_midpoint() {
        let spec = spec1(64);
        let dx = spec.dx();
        let x = spec.axis_coord(10);
        let rho = deposit_points(&[x], &[0], 0.25, &spec);
        assert!((rho.values()[10] * dx - 0.25).abs() < 1e-15);
        assert_eq!(rho.values().iter().filter(|v| **v != 0.0).count(), 1);

        let mid = x + 0.5 * dx;
        let rho = deposit_points(&[mid], &[0], 1.0, &spec);
        assert!((rho.values()[10] * dx - 0.5).abs() < 1e-14);
        assert!((rho.values()[11] * dx - 0.5).abs() < 1e-14);
    }

    #[test]
    fn deposit_then_interp_self_weight() {
        let spec = spec1(64);
        let dx = spec.dx();
        let x = spec.axis_coord(20) + 0.3 * dx;
        let n = 4.0;
        let rho = deposit_points(&[x], &[0], 1.0 / n, &spec);
        let v = interp(&rho, &[x]).unwrap()[0];
        let want = (1.0 / n) * (0.7f64.powi(2) + 0.3f64.powi(2)) / dx;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn interp_exact_at_nodes_and_on_affine() {
        let spec = spec1(64);
        let f = GridField::from_fn(spec, |x| (x[0] * 0.7).sin());
        let v = interp(&f, &[spec.axis_coord(5)]).unwrap()[0];
        assert_eq!(v, f.values()[5]);
        let affine = GridField::from_fn(spec, |x| 2.0 * x[0] + 1.0);
        for x in [-3.3, 0.01, 5.77] {
            let v = interp(&affine, &[x]).unwrap()[0];
            assert!((v - (2.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_is_second_order() {
        let g = |x: f64| (-(x * x)).exp();
        let err = |m: usize| {
            let spec = spec1(m);
            let f = GridField::from_fn(spec, |x| g(x[0]));
            (0..997)
                .map(|k| -3.0 + 6.0 * k as f64 / 996.0 + 1e-3)
                .map(|x| (interp(&f, &[x]).unwrap()[0] - g(x)).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(128) / err(256);
        assert!(ratio >= 3.5, "{ratio}");
    }

    #[test]
    fn gradient_of_constant_and_sine() {
        let spec = spec1(128);
        let c = GridField::from_fn(spec, |_| 4.0);
        assert!(gradient(&c).unwrap().max_abs() < 1e-13);
        let k = 3.0 * PI / spec.half_width();
        let s = GridField::from_fn(spec, |x| (k * x[0]).sin());
        let g = gradient(&s).unwrap();
        let want = GridField::from_fn(spec, |x| k * (k * x[0]).cos());
        let err = g.sub(&want).unwrap().max_abs();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn gradient_matches_fourth_order_differences() {
        let spec = spec1(256);
        let f = GridField::from_fn(spec, |x| (-(x[0] - 0.4).powi(2)).exp() + 0.3 * (-(x[0] + 1.0).powi(2) / 0.5).exp());
        let g = gradient(&f).unwrap();
        let (m, dx) = (spec.cells(), spec.dx());
        let v = f.values();
        let at = |i: isize| v[i.rem_euclid(m as isize) as usize];
        let err = (0..m as isize)
            .map(|i| {
                let fd = (-at(i + 2) + 8.0 * at(i + 1) - 8.0 * at(i - 1) + at(i - 2)) / (12.0 * dx);
                (fd - g.values()[i as usize]).abs()
            })
            .fold(0.0, f64::max);
        // fourth-order truncation with unit-scale derivatives
        assert!(err < 5.0 * dx.powi(4), "{err}");
    }

    #[test]
    fn gradient_has_zero_mean_2d() {
        let spec = GridSpec::new(2, 32, 3.0).unwrap();
        let f = GridField::from_fn(spec, |x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp() * (1.0 + x[0]));
        let g = gradient(&f).unwrap();
        for c in 0..2 {
            assert!(g.component(c).iter().sum::<f64>().abs() < 1e-11);
        }
    }

    #[test]
    fn ring_lookback() {
        let spec = spec1(16);
        let mut ring = DelayedSourceRing::new(0.1, 0.025);
        assert_eq!(ring.lag(), 4);
        assert_eq!(ring.capacity(), 6);
        for s in 0..9 {
            ring.push(s, GridField::zeros(spec, 1).with_time(s as f64)).unwrap();
        }
        assert_eq!(ring.len(), 6);
        assert_eq!(ring.oldest_step(), Some(3));
        assert!(ring.get(2).is_none());
        assert_eq!(ring.get(8).unwrap().time(), 8.0);
        assert!(ring.push(10, GridField::zeros(spec, 1)).is_err());
    }

    #[test]
    fn chemical_step_before_cutoff_stays_zero() {
        let spec = spec1(64);
        let params = ChemicalParams { dt: 0.01, lambda: 1.0 };
        let mut ring = DelayedSourceRing::new(0.05, 0.01);
        let rho = GridField::from_fn(spec, |x| (-(x[0] * x[0])).exp());
        let mut phi = GridField::zeros(spec, 1);
        ring.push(0, rho.clone()).unwrap();
        for step in 0..5 {
            ring.push(step + 1, rho.clone()).unwrap();
            phi = chemical_step(&phi, &ring, params, step).unwrap();
            assert_eq!(phi.max_abs(), 0.0);
        }
        ring.push(6, rho.clone()).unwrap();
        phi = chemical_step(&phi, &ring, params, 5).unwrap();
        assert!(phi.max_abs() > 0.0);
    }

    #[test]
    fn chemical_step_constant_decay_and_underflow() {
        let spec = spec1(32);
        let params = ChemicalParams { dt: 0.02, lambda: 0.7 };
        let mut ring = DelayedSourceRing::with_lag(2);
        let phi = GridField::from_fn(spec, |_| 1.5);
        let zero = GridField::zeros(spec, 1);
        for s in 0..=3 {
            ring.push(s, zero.clone()).unwrap();
        }
        let out = chemical_step(&phi, &ring, params, 3).unwrap();
        let want = 1.5 * (-0.7f64 * 0.02).exp();
        assert!(out.values().iter().all(|v| (v - want).abs() < 1e-12));

        let mut short = DelayedSourceRing::with_lag(2);
        short.push(5, zero.clone()).unwrap();
        assert!(matches!(chemical_step(&phi, &short, params, 3), Err(Error::State(_))));
    }

    #[test]
    fn duhamel_without_source_is_propagated_c0() {
        let spec = spec1(64);
        let c0 = GridField::from_fn(spec, |x| (-(x[0] * x[0]) / 2.0).exp());
        let zeros = vec![GridField::zeros(spec, 1); 51];
        let c = chemical_duhamel(&zeros, &c0, 0.5, 0.1, 0.01, 0.5).unwrap();
        let mut want = semigroup_apply(&c0, 0.5).unwrap();
        want.scale((-0.25f64).exp());
        assert!(c.sub(&want).unwrap().max_abs() < 1e-13);
        let early = chemical_duhamel(&zeros, &GridField::zeros(spec, 1), 0.5, 0.1, 0.01, 0.05).unwrap();
        assert_eq!(early.max_abs(), 0.0);
    }
}
