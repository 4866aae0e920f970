//! Convergence reports, log-log slope fits and their CSV/JSON renderings.

use std::path::Path;

use kslab_core::{Error, Result};
use serde::Serialize;

/// Least-squares fit of `ln y = intercept + slope ln x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (zero with two points).
    pub stderr: f64,
    /// `slope -/+ 1.96 stderr`.
    pub lower: f64,
    pub upper: f64,
    /// Largest absolute residual in log space.
    pub max_residual: f64,
}

/// Fits a power law through positive points; `None` with fewer than two.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<Option<SlopeFit>> {
    if xs.len() != ys.len() {
        return Err(Error::Shape("slope fit needs matching lengths".into()));
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("slope fit needs distinct abscissae".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = lx.iter().zip(&ly).map(|(x, y)| y - intercept - slope * x).collect();
    let stderr = if lx.len() > 2 { (resid.iter().map(|r| r * r).sum::<f64>() / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(Some(SlopeFit {
        slope,
        intercept,
        stderr,
        lower: slope - 1.96 * stderr,
        upper: slope + 1.96 * stderr,
        max_residual: resid.iter().fold(0.0_f64, |m, r| m.max(r.abs())),
    }))
}

/// One sweep point: the statistic over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    /// Cut-off used at this point (equals `x` on an `eps` sweep).
    pub eps: f64,
    pub mean: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

impl SweepPoint {
    pub fn from_values(x: f64, eps: f64, per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let stderr = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Self { x, eps, mean, stderr, per_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub study: String,
    /// `N` or `eps`.
    pub axis: String,
    pub statistic: String,
    pub points: Vec<SweepPoint>,
    pub fit: Option<SlopeFit>,
    pub config_hash: String,
    pub version: String,
    pub config: String,
}

impl ConvergenceReport {
    pub fn new(study: &str, axis: &str, statistic: &str, mut points: Vec<SweepPoint>, config: &crate::SimConfig) -> Result<Self> {
        points.sort_by(|a, b| a.x.total_cmp(&b.x));
        let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
        let fit = if ys.iter().all(|y| *y > 0.0) {
            fit_loglog(&xs, &ys)?
        } else {
            log::warn!("{study}: non-positive statistic, no slope fitted");
            None
        };
        Ok(Self {
            study: study.into(),
            axis: axis.into(),
            statistic: statistic.into(),
            fit,
            points,
            config_hash: config.hash(),
            version: crate::version(),
            config: config.canonical(),
        })
    }

    /// Whether the mean statistic strictly decreases along the axis.
    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].mean < w[0].mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# study={}\n# config_hash={}\n# version={}\n", self.study, self.config_hash, self.version);
        if let Some(f) = &self.fit {
            out.push_str(&format!("# slope={:.17e} stderr={:.17e}\n", f.slope, f.stderr));
        }
        out.push_str(&format!("{},eps,mean,stderr,n_seeds\n", self.axis));
        for p in &self.points {
            out.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e},{}\n", p.x, p.eps, p.mean, p.stderr, p.per_seed.len()));
        }
        out
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_laws() {
        let xs = [64.0, 256.0, 1024.0, 4096.0];
        let ys: Vec<f64> = xs.iter().map(|n: &f64| 3.0 * n.powf(-0.5)).collect();
        let f = fit_loglog(&xs, &ys).unwrap().unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!(f.max_residual < 1e-12);
        let eps = [0.05, 0.1, 0.2];
        let lin: Vec<f64> = eps.iter().map(|e| 0.7 * e).collect();
        assert!((fit_loglog(&eps, &lin).unwrap().unwrap().slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit_loglog(&[10.0], &[1.0]).unwrap(), None);
        assert!(fit_loglog(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn stderr_shrinks_with_more_seeds() {
        let a = SweepPoint::from_values(1.0, 0.1, vec![1.0, 2.0, 1.0, 2.0]);
        let b = SweepPoint::from_values(1.0, 0.1, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let ratio = a.stderr / b.stderr;
        assert!((ratio - 2f64.sqrt()).abs() < 0.3 * 2f64.sqrt(), "{ratio}");
    }
}
