//! Uniform periodic grids over the box `[-L, L)^d`.

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// Small fixed-size coordinate buffer used in hot loops.
pub type Coord = [f64; MAX_DIM];

/// Geometry of a periodic grid: `cells` nodes per axis, spacing `2L / cells`,
/// node `k` on each axis sitting at `-L + k * dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    dim: usize,
    cells: usize,
    half_width: f64,
}

impl GridSpec {
    pub fn new(dim: usize, cells: usize, half_width: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Domain(format!("dimension {dim} not in 1..={MAX_DIM}")));
        }
        if cells < 4 || !cells.is_power_of_two() {
            return Err(Error::Domain(format!(
                "cells per axis must be a power of two >= 4, got {cells}"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::Domain(format!("half width must be positive, got {half_width}")));
        }
        Ok(Self { dim, cells, half_width })
    }

    /// Default resolution per dimension (`M = 512, L = 8` in 1D, `M = 128, L = 6` in 2D).
    pub fn default_for(dim: usize) -> Result<Self> {
        match dim {
            1 => Self::new(1, 512, 8.0),
            2 => Self::new(2, 128, 6.0),
            3 => Self::new(3, 32, 6.0),
            _ => Self::new(dim, 32, 6.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx().powi(self.dim as i32)
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    /// Same box and dimension, different resolution.
    pub fn with_cells(&self, cells: usize) -> Result<Self> {
        Self::new(self.dim, cells, self.half_width)
    }

    pub fn axis_coord(&self, k: usize) -> f64 {
        -self.half_width + k as f64 * self.dx()
    }

    /// Row-major multi-index of a flat node index (axis 0 slowest).
    pub fn unravel(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0usize; MAX_DIM];
        for a in (0..self.dim).rev() {
            out[a] = idx % self.cells;
            idx /= self.cells;
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi[..self.dim].iter().fold(0, |acc, &k| acc * self.cells + k)
    }

    pub fn node_position(&self, idx: usize) -> Coord {
        let multi = self.unravel(idx);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = self.axis_coord(multi[a]);
        }
        x
    }

    /// Maps a coordinate into `[-L, L)`.
    pub fn wrap(&self, x: f64) -> f64 {
        let width = 2.0 * self.half_width;
        let mut y = (x + self.half_width).rem_euclid(width) - self.half_width;
        if y >= self.half_width {
            y -= width;
        }
        y
    }

    /// Minimum-image representative of a displacement.
    pub fn min_image(&self, dx: f64) -> f64 {
        let width = 2.0 * self.half_width;
        dx - width * (dx / width).round()
    }
}

/// Samples of one or more scalar components on a periodic grid.
///
/// Components are stored back to back, each block row-major over the nodes.
/// Density fields carry units of `1/length^d` so that `mass = sum * dx^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    spec: GridSpec,
    components: usize,
    values: Vec<f64>,
    time: f64,
}

impl GridField {
    pub fn zeros(spec: GridSpec, components: usize) -> Self {
        Self { spec, components, values: vec![0.0; spec.n_nodes() * components], time: 0.0 }
    }

    pub fn from_values(spec: GridSpec, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_nodes() * components {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                spec.n_nodes() * components,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample {bad}")));
        }
        Ok(Self { spec, components, values, time: 0.0 })
    }

    /// Scalar field sampled from a function of the node position.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..spec.n_nodes())
            .map(|idx| {
                let x = spec.node_position(idx);
                f(&x[..spec.dim()])
            })
            .collect();
        Self { spec, components: 1, values, time: 0.0 }
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.spec.n_nodes();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spec.n_nodes();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// `sum(values) * dx^d` of the first component.
    pub fn mass(&self) -> f64 {
        self.component(0).iter().sum::<f64>() * self.spec.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Checks that another field lives on the same grid with the same layout.
    pub fn check_compatible(&self, other: &GridField) -> Result<()> {
        if self.spec != other.spec || self.components != other.components {
            return Err(Error::Shape(format!(
                "grid {:?}x{} vs {:?}x{}",
                self.spec, self.components, other.spec, other.components
            )));
        }
        Ok(())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &GridField) -> Result<()> {
        self.check_compatible(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    /// Pointwise (per-component) difference.
    pub fn sub(&self, other: &GridField) -> Result<GridField> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(GridField { spec: self.spec, components: self.components, values, time: self.time })
    }

    /// L2 norm of the first component over nodes with `|x| <= radius`.
    pub fn l2_on_ball(&self, radius: f64) -> f64 {
        let dv = self.spec.cell_volume();
        let r2 = radius * radius;
        let sum: f64 = self
            .component(0)
            .iter()
            .enumerate()
            .filter(|(idx, _)| {
                let x = self.spec.node_position(*idx);
                x[..self.spec.dim()].iter().map(|v| v * v).sum::<f64>() <= r2
            })
            .map(|(_, v)| v * v)
            .sum();
        (sum * dv).sqrt()
    }

    pub fn l2(&self) -> f64 {
        (self.component(0).iter().map(|v| v * v).sum::<f64>() * self.spec.cell_volume()).sqrt()
    }
}
