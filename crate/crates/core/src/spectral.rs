//! Separable complex FFTs on periodic grids.
//!
//! Plans are cached per axis length so that repeated transforms inside a time
//! loop only pay for the butterflies.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{GridSpec, MAX_DIM};

type Plans = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plans(len: usize) -> Plans {
    static CACHE: OnceLock<Mutex<HashMap<usize, Plans>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("fft plan cache poisoned");
    guard
        .entry(len)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            (planner.plan_fft_forward(len), planner.plan_fft_inverse(len))
        })
        .clone()
}

pub(crate) struct Spectral {
    spec: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Angular wavenumber of each axis index.
    k: Vec<f64>,
}

impl Spectral {
    pub(crate) fn new(spec: &GridSpec) -> Self {
        let m = spec.cells();
        let (forward, inverse) = plans(m);
        let base = PI / spec.half_width();
        let k = (0..m)
            .map(|j| {
                let signed = if j <= m / 2 { j as f64 } else { j as f64 - m as f64 };
                signed * base
            })
            .collect();
        Self { spec: *spec, forward, inverse, k }
    }

    pub(crate) fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    /// Inverse transform returning the (normalized) real part.
    pub(crate) fn inverse(&self, mut data: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut data, &self.inverse);
        let norm = 1.0 / self.spec.n_nodes() as f64;
        data.into_iter().map(|c| c.re * norm).collect()
    }

    /// Angular wavenumber vector of a flat mode index.
    pub(crate) fn wavevector(&self, idx: usize) -> [f64; MAX_DIM] {
        let multi = self.spec.unravel(idx);
        let mut out = [0.0; MAX_DIM];
        for a in 0..self.spec.dim() {
            out[a] = self.k[multi[a]];
        }
        out
    }

    /// `|k|^2` for every mode, in storage order.
    pub(crate) fn k_squared(&self) -> Vec<f64> {
        let d = self.spec.dim();
        (0..self.spec.n_nodes())
            .map(|idx| self.wavevector(idx)[..d].iter().map(|k| k * k).sum())
            .collect()
    }

    /// Multiplier for differentiation along `axis`; the Nyquist mode is dropped
    /// so that derivatives of real fields stay real.
    pub(crate) fn derivative_factor(&self, idx: usize, axis: usize) -> Complex64 {
        let m = self.spec.cells();
        let j = self.spec.unravel(idx)[axis];
        if j == m / 2 {
            Complex64::new(0.0, 0.0)
        } else {
            Complex64::new(0.0, self.k[j])
        }
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let m = self.spec.cells();
        let d = self.spec.dim();
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        // last axis is contiguous
        for line in data.chunks_exact_mut(m) {
            plan.process_with_scratch(line, &mut scratch);
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for axis in 0..d.saturating_sub(1) {
            let stride = m.pow((d - 1 - axis) as u32);
            let block = stride * m;
            for outer in (0..data.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b = data[base + k * stride];
                    }
                    plan.process_with_scratch(&mut buf, &mut scratch);
                    for (k, b) in buf.iter().enumerate() {
                        data[base + k * stride] = *b;
                    }
                }
            }
        }
    }
}
