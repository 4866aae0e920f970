//! Wasserstein-1 distances between empirical measures and grid densities.

use crate::error::{Error, Result};
use crate::grid::{GridField, MAX_DIM};
use crate::rng::{fill_standard_normal, keyed_rng, stream, uniform};

/// Largest problem handed to the exact assignment solver.
pub const EXACT_MAX_POINTS: usize = 512;

/// Uniformly weighted point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Shape(format!("{} coordinates in dimension {dim}", points.len())));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite support point".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn project(&self, dir: &[f64]) -> Vec<f64> {
        self.points.chunks_exact(self.dim).map(|p| p.iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum W1Method {
    Sorted1d,
    AssignmentExact,
    Sliced,
    GridQuantile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct W1Result {
    pub value: f64,
    pub method: W1Method,
    /// `matching[i]` is the target matched to source point `i` (exact methods).
    pub matching: Option<Vec<usize>>,
}

impl W1Result {
    pub fn is_exact(&self) -> bool {
        matches!(self.method, W1Method::Sorted1d | W1Method::AssignmentExact | W1Method::GridQuantile)
    }
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Equal-size 1D distance by monotone (sorted) matching.
pub fn w1_1d(xs: &[f64], ys: &[f64]) -> Result<W1Result> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape(format!("w1_1d needs equal non-empty sizes, got {} and {}", xs.len(), ys.len())));
    }
    let sx = argsort(xs);
    let sy = argsort(ys);
    let mut matching = vec![0; xs.len()];
    let mut sum = 0.0;
    for (&i, &j) in sx.iter().zip(&sy) {
        matching[i] = j;
        sum += (xs[i] - ys[j]).abs();
    }
    Ok(W1Result { value: sum / xs.len() as f64, method: W1Method::Sorted1d, matching: Some(matching) })
}

/// 1D distance between uniform empirical measures of any sizes, `int |F - G|`.
pub fn w1_1d_unequal(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Shape("empty measure".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0_f64, 0.0_f64);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (fa - fb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            fa += wa;
            i += 1;
        }
        while j < b.len() && b[j] == next {
            fb += wb;
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum-cost perfect matching for a square cost matrix (row-major), by the
/// shortest augmenting path method with potentials. Returns `assignment[row]`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Exact distance between equal-size clouds with Euclidean ground cost.
pub fn w1_exact(xs: &EmpiricalMeasure, ys: &EmpiricalMeasure) -> Result<W1Result> {
    if xs.dim() != ys.dim() || xs.len() != ys.len() {
        return Err(Error::Shape("w1_exact needs equal sizes and dimensions".into()));
    }
    let n = xs.len();
    if n > EXACT_MAX_POINTS {
        return Err(Error::Size(format!("{n} points exceed the exact solver limit {EXACT_MAX_POINTS}; use w1_sliced")));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = euclid(xs.point(i), ys.point(j));
        }
    }
    let matching = assignment(&cost, n);
    let sum: f64 = matching.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(W1Result { value: sum / n as f64, method: W1Method::AssignmentExact, matching: Some(matching) })
}

/// Seeded unit directions in `dim` dimensions.
pub fn unit_directions(dim: usize, n_dirs: usize, seed: u64) -> Vec<[f64; MAX_DIM]> {
    let mut rng = keyed_rng(seed, stream::DIRECTIONS, 0, 0);
    (0..n_dirs)
        .map(|_| loop {
            let mut z = [0.0; MAX_DIM];
            fill_standard_normal(&mut rng, &mut z[..dim]);
            let norm = z[..dim].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                z[..dim].iter_mut().for_each(|v| *v /= norm);
                break z;
            }
        })
        .collect()
}

/// Mean of 1D distances over `n_dirs` random projections.
pub fn w1_sliced(xs: &EmpiricalMeasure, ys: &EmpiricalMeasure, n_dirs: usize, seed: u64) -> Result<W1Result> {
    if xs.dim() != ys.dim() {
        return Err(Error::Shape("dimension mismatch".into()));
    }
    if n_dirs == 0 {
        return Err(Error::Config("sliced distance needs at least one direction".into()));
    }
    let d = xs.dim();
    let mut total = 0.0;
    for dir in unit_directions(d, n_dirs, seed) {
        let a = xs.project(&dir[..d]);
        let b = ys.project(&dir[..d]);
        total += if a.len() == b.len() { w1_1d(&a, &b)?.value } else { w1_1d_unequal(&a, &b)? };
    }
    Ok(W1Result { value: total / n_dirs as f64, method: W1Method::Sliced, matching: None })
}

/// Cells of a 1D density as `(left edge, width, mass)` with the density clamped
/// at zero and normalized to unit mass. Each node owns the cell centred on it.
fn cell_masses_1d(rho: &GridField) -> Result<Vec<(f64, f64, f64)>> {
    let spec = rho.spec();
    let dx = spec.dx();
    let mut cells: Vec<(f64, f64, f64)> = rho
        .component(0)
        .iter()
        .enumerate()
        .map(|(k, v)| (spec.axis_coord(k) - 0.5 * dx, dx, v.max(0.0) * dx))
        .collect();
    let total: f64 = cells.iter().map(|c| c.2).sum();
    if !(total > 0.0) {
        return Err(Error::Domain("density has no positive mass".into()));
    }
    cells.iter_mut().for_each(|c| c.2 /= total);
    Ok(cells)
}

/// Inverse of the piecewise-linear grid CDF at probability `p`.
pub fn grid_quantile(rho: &GridField, p: f64) -> Result<f64> {
    if rho.spec().dim() != 1 {
        return Err(Error::Domain("grid quantiles are one-dimensional".into()));
    }
    let cells = cell_masses_1d(rho)?;
    let mut acc = 0.0;
    for &(left, width, mass) in &cells {
        if mass > 0.0 && acc + mass >= p {
            return Ok(left + width * ((p - acc) / mass).clamp(0.0, 1.0));
        }
        acc += mass;
    }
    let last = cells.last().expect("non-empty grid");
    Ok(last.0 + last.1)
}

/// `int |F_emp - F_grid|` with the grid CDF linear inside each cell.
fn w1_1d_grid(xs: &[f64], rho: &GridField) -> Result<f64> {
    let cells = cell_masses_1d(rho)?;
    let mut pts = xs.to_vec();
    pts.sort_by(f64::total_cmp);
    let w = 1.0 / pts.len() as f64;
    // |a + b s| integrated over s in [0, h]
    let seg = |a: f64, b: f64, h: f64| -> f64 {
        let end = a + b * h;
        if a * end >= 0.0 {
            0.5 * (a.abs() + end.abs()) * h
        } else {
            let s0 = -a / b;
            0.5 * a.abs() * s0 + 0.5 * end.abs() * (h - s0)
        }
    };
    let mut total = 0.0;
    let mut fe = 0.0;
    let mut i = 0;
    // empirical mass left of the grid support
    let left = cells[0].0;
    while i < pts.len() && pts[i] < left {
        let next = pts.get(i + 1).copied().unwrap_or(left).min(left);
        fe += w;
        total += fe * (next - pts[i]);
        i += 1;
    }
    let mut fg = 0.0;
    for &(a, h, mass) in &cells {
        let slope = mass / h;
        let mut x = a;
        while i < pts.len() && pts[i] < a + h {
            let p = pts[i].max(x);
            total += seg(fe - (fg + slope * (x - a)), -slope, p - x);
            x = p;
            fe += w;
            i += 1;
        }
        total += seg(fe - (fg + slope * (x - a)), -slope, a + h - x);
        fg += mass;
    }
    let right = cells.last().map(|c| c.0 + c.1).unwrap_or(0.0);
    let mut x = right;
    while i < pts.len() {
        total += (fe - 1.0).abs() * (pts[i] - x);
        x = pts[i];
        fe += w;
        i += 1;
    }
    Ok(total)
}

/// Draws `m` samples from a grid density: a cell by its mass, then a uniform
/// point in the cell centred on that node.
pub fn sample_grid(rho: &GridField, m: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = rho.spec();
    let d = spec.dim();
    let dx = spec.dx();
    let mut cum = Vec::with_capacity(spec.n_nodes());
    let mut acc = 0.0;
    for v in rho.component(0) {
        acc += v.max(0.0);
        cum.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::Domain("density has no positive mass".into()));
    }
    let mut rng = keyed_rng(seed, stream::SAMPLING, 0, 0);
    let mut out = Vec::with_capacity(m * d);
    for _ in 0..m {
        let u = uniform(&mut rng) * acc;
        let idx = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        let x = spec.node_position(idx);
        for a in 0..d {
            out.push(x[a] + dx * (uniform(&mut rng) - 0.5));
        }
    }
    Ok(out)
}

/// Distance between particles and a grid density. Exact in one dimension;
/// otherwise against `m_samples` seeded draws from the density, exactly when the
/// sizes match and fit the assignment solver, sliced with 64 directions if not.
pub fn w1_vs_grid(xs: &EmpiricalMeasure, rho: &GridField, m_samples: usize, seed: u64) -> Result<W1Result> {
    let d = rho.spec().dim();
    if xs.dim() != d {
        return Err(Error::Shape("dimension mismatch".into()));
    }
    if d == 1 {
        return Ok(W1Result { value: w1_1d_grid(xs.points(), rho)?, method: W1Method::GridQuantile, matching: None });
    }
    if m_samples == 0 {
        return Err(Error::Config("need at least one density sample".into()));
    }
    let ys = EmpiricalMeasure::new(d, sample_grid(rho, m_samples, seed)?)?;
    if ys.len() == xs.len() && xs.len() <= EXACT_MAX_POINTS {
        w1_exact(xs, &ys)
    } else {
        w1_sliced(xs, &ys, 64, seed ^ 0x5EED)
    }
}

/// Mean and standard error of [`w1_vs_grid`] over independent sample seeds.
pub fn w1_vs_grid_replicates(xs: &EmpiricalMeasure, rho: &GridField, m_samples: usize, seed: u64, replicas: usize) -> Result<(f64, f64)> {
    if replicas < 2 {
        return Err(Error::Config("need at least two replicas".into()));
    }
    let vals = (0..replicas as u64)
        .map(|r| w1_vs_grid(xs, rho, m_samples, seed.wrapping_add(r.wrapping_mul(0x9E37_79B9))).map(|w| w.value))
        .collect::<Result<Vec<_>>>()?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// `sup_t W1(t)` over a sampled curve (zero for an empty curve).
pub fn sup_metric(curve: &[f64]) -> f64 {
    curve.iter().copied().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn cloud(dim: usize, pts: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::new(dim, pts.to_vec()).unwrap()
    }

    fn brute_force(xs: &EmpiricalMeasure, ys: &EmpiricalMeasure) -> f64 {
        let n = xs.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let s: f64 = p.iter().enumerate().map(|(i, &j)| euclid(xs.point(i), ys.point(j))).sum();
            best = best.min(s);
        });
        best / n as f64
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn small_1d_cases() {
        assert_eq!(w1_1d(&[0.0, 1.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(w1_1d(&[0.0], &[1.0]).unwrap().value, 1.0);
        assert_eq!(w1_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap().value, 1.0);
        assert!(w1_1d(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn small_exact_cases() {
        let a = cloud(2, &[0.0, 0.0, 1.0, 0.0]);
        let b = cloud(2, &[1.0, 0.0, 0.0, 0.0]);
        let r = w1_exact(&a, &b).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.matching, Some(vec![1, 0]));
        let same = w1_exact(&a, &a).unwrap();
        assert_eq!(same.matching, Some(vec![0, 1]));
        let one = w1_exact(&cloud(2, &[0.0, 0.0]), &cloud(2, &[3.0, 4.0])).unwrap();
        assert_eq!(one.value, 5.0);
    }

    #[test]
    fn guard_directs_to_sliced() {
        let pts = vec![0.0; 513];
        let a = cloud(1, &pts);
        let err = w1_exact(&a, &a).unwrap_err();
        assert!(matches!(err, Error::Size(_)) && err.to_string().contains("sliced"));
    }

    #[test]
    fn sliced_in_one_dimension_is_sorted_distance() {
        let a = [0.3, -1.0, 2.0, 0.1];
        let b = [1.3, 0.0, -2.0, 0.5];
        let s = w1_sliced(&cloud(1, &a), &cloud(1, &b), 1, 7).unwrap().value;
        assert!((s - w1_1d(&a, &b).unwrap().value).abs() < 1e-15);
        assert_eq!(w1_sliced(&cloud(1, &a), &cloud(1, &a), 5, 1).unwrap().value, 0.0);
    }

    #[test]
    fn unequal_sizes_match_equal_case() {
        let a = [0.3, -1.0, 2.0, 0.1];
        let b = [1.3, 0.0, -2.0, 0.5];
        assert!((w1_1d_unequal(&a, &b).unwrap() - w1_1d(&a, &b).unwrap().value).abs() < 1e-14);
        let dup: Vec<f64> = b.iter().chain(&b).copied().collect();
        assert!((w1_1d_unequal(&a, &dup).unwrap() - w1_1d(&a, &b).unwrap().value).abs() < 1e-14);
    }

    fn gaussian(spec: GridSpec, sigma: f64) -> GridField {
        GridField::from_fn(spec, |x| (-x[0] * x[0] / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt())
    }

    #[test]
    fn quantile_particles_are_close_to_grid() {
        let spec = GridSpec::new(1, 512, 8.0).unwrap();
        let rho = gaussian(spec, 0.7);
        let n = 200;
        let xs: Vec<f64> = (1..=n).map(|k| grid_quantile(&rho, (k as f64 - 0.5) / n as f64).unwrap()).collect();
        let w = w1_vs_grid(&cloud(1, &xs), &rho, 0, 0).unwrap().value;
        assert!(w <= spec.dx(), "{w}");
    }

    #[test]
    fn point_mass_at_origin() {
        let spec = GridSpec::new(1, 64, 4.0).unwrap();
        let mut rho = GridField::zeros(spec, 1);
        rho.values_mut()[32] = 1.0 / spec.dx();
        // the cell around the node at 0 has width dx, so the distance is dx/4
        let w = w1_vs_grid(&cloud(1, &[0.0, 0.0, 0.0]), &rho, 0, 0).unwrap().value;
        assert!((w - 0.25 * spec.dx()).abs() < 1e-14, "{w}");
    }

    #[test]
    fn grid_distance_agrees_with_fine_sampling() {
        let spec = GridSpec::new(1, 256, 8.0).unwrap();
        let rho = gaussian(spec, 0.7);
        let xs = [0.1, -0.4, 1.2, 0.8, -1.5];
        let exact = w1_vs_grid(&cloud(1, &xs), &rho, 0, 0).unwrap().value;
        let samples = sample_grid(&rho, 200_000, 3).unwrap();
        let approx = w1_1d_unequal(&xs, &samples).unwrap();
        assert!((exact - approx).abs() < 5e-3, "{exact} vs {approx}");
    }

    #[test]
    fn sup_metric_cases() {
        assert_eq!(sup_metric(&[0.3, 0.3, 0.3]), 0.3);
        assert_eq!(sup_metric(&[0.0, 0.1, 2.5, 0.2]), 2.5);
        assert_eq!(sup_metric(&[0.0, 2.5]), 2.5);
    }

    fn points(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, n * d)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_matches_brute_force(n in 1usize..=6, seed in any::<u64>()) {
            let mut rng = keyed_rng(seed, 99, 0, 0);
            let mut draw = |k: usize| (0..k).map(|_| 6.0 * uniform(&mut rng) - 3.0).collect::<Vec<f64>>();
            let a = cloud(2, &draw(2 * n));
            let b = cloud(2, &draw(2 * n));
            prop_assert_eq!(w1_exact(&a, &b).unwrap().value, brute_force(&a, &b));
        }

        #[test]
        fn metric_axioms(a in points(5, 2), b in points(5, 2), c in points(5, 2)) {
            let (a, b, c) = (cloud(2, &a), cloud(2, &b), cloud(2, &c));
            let ab = w1_exact(&a, &b).unwrap().value;
            let ba = w1_exact(&b, &a).unwrap().value;
            let bc = w1_exact(&b, &c).unwrap().value;
            let ac = w1_exact(&a, &c).unwrap().value;
            prop_assert!((ab - ba).abs() <= 1e-15 * ab.max(1.0));
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(w1_exact(&a, &a).unwrap().value, 0.0);
        }

        #[test]
        fn one_dimensional_routes_agree(a in points(40, 1), b in points(40, 1)) {
            let sorted = w1_1d(&a, &b).unwrap().value;
            let exact = w1_exact(&cloud(1, &a), &cloud(1, &b)).unwrap().value;
            prop_assert!((sorted - exact).abs() < 1e-12);
        }

        #[test]
        fn translation_and_scaling(a in points(6, 2), b in points(6, 2), v in -2.0f64..2.0, s in -3.0f64..3.0) {
            let base = w1_exact(&cloud(2, &a), &cloud(2, &b)).unwrap().value;
            // a power of two keeps the shifted coordinates' differences exact
            let shift = (v * 4.0).round() / 4.0;
            let ta: Vec<f64> = a.iter().map(|x| x + shift).collect();
            let tb: Vec<f64> = b.iter().map(|x| x + shift).collect();
            let moved = w1_exact(&cloud(2, &ta), &cloud(2, &tb)).unwrap().value;
            prop_assert!((moved - base).abs() <= 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * s).collect();
            let scaled = w1_exact(&cloud(2, &sa), &cloud(2, &sb)).unwrap().value;
            prop_assert!((scaled - s.abs() * base).abs() <= 1e-12 * base.max(1.0));
        }
    }
}
