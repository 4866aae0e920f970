//! Plain-text experiment configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Lists are comma
//! separated. Unknown keys are rejected. Recognized keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `d` | dimension | 1 |
//! | `N` | particles | 256 |
//! | `T` | final time | 0.5 |
//! | `dt` | time step | 0.01 |
//! | `eps` | cut-off, number or `auto` (schedule) | 0.2 |
//! | `lambda` | chemical decay rate | 1.0 |
//! | `lambda_cut` | schedule constant | 1.0 |
//! | `L` | box half-width | per dimension |
//! | `M` | cells per axis | per dimension |
//! | `seed` | base seed | 1 |
//! | `n_seeds` | independent replicas | 8 |
//! | `drift` | `fast` or `direct` | fast |
//! | `interaction` | density feeds the chemical | true |
//! | `init` | `gaussian` or `mixture` | gaussian |
//! | `rho_sigma` | density width | 0.5 (d=1), 0.4 (d>1) |
//! | `rho_mean` | density centre | origin |
//! | `mix_sep`, `mix_weight` | mixture separation and first weight | 1.0, 0.5 |
//! | `c0` | `zero` or `gaussian` | gaussian |
//! | `c0_amp`, `c0_width`, `c0_center` | initial chemical bump | 0.5, 1.0, 0.5 on axis 0 |
//! | `history_stride` | decimation of the direct path history | `max(1, ceil(eps/(8 dt)))` |
//! | `sample_every` | steps between recorded statistics | 5 |
//! | `w1_samples` | density draws per W1 evaluation in d >= 2 | 256 |
//! | `N_list`, `eps_list` | sweep axes | 64,256,1024,4096 / 0.05,0.1,0.2 |
//! | `output` | output directory | out |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use kslab_core::particles::{default_history_stride, ChemicalFamily, DensityFamily};
use kslab_core::{DriftPath, Error, GridSpec, InitialData, Result};
use sha2::{Digest, Sha256};

use crate::studies::epsilon_schedule;

/// Largest allowed image-charge factor `exp(-L^2 / (4 T))` and initial tail mass.
pub const DOMAIN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsSetting {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub d: usize,
    pub n: usize,
    pub t_final: f64,
    pub dt: f64,
    pub eps: EpsSetting,
    pub lambda: f64,
    pub lambda_cut: f64,
    pub half_width: f64,
    pub cells: usize,
    pub seed: u64,
    pub n_seeds: usize,
    pub drift: DriftPath,
    pub interaction: bool,
    pub init: String,
    pub rho_sigma: f64,
    pub rho_mean: Vec<f64>,
    pub mix_sep: f64,
    pub mix_weight: f64,
    pub c0: String,
    pub c0_amp: f64,
    pub c0_width: f64,
    pub c0_center: Vec<f64>,
    pub history_stride: Option<usize>,
    pub sample_every: usize,
    pub w1_samples: usize,
    pub n_list: Vec<usize>,
    pub eps_list: Vec<f64>,
    pub output: PathBuf,
}

impl SimConfig {
    pub fn defaults(d: usize) -> Self {
        let (m, l) = match d {
            1 => (512, 8.0),
            2 => (128, 6.0),
            _ => (32, 6.0),
        };
        let mut center = vec![0.0; d];
        if let Some(c) = center.first_mut() {
            *c = 0.5;
        }
        Self {
            d,
            n: 256,
            t_final: 0.5,
            dt: 0.01,
            eps: EpsSetting::Value(0.2),
            lambda: 1.0,
            lambda_cut: 1.0,
            half_width: l,
            cells: m,
            seed: 1,
            n_seeds: 8,
            drift: DriftPath::Fast,
            interaction: true,
            init: "gaussian".into(),
            rho_sigma: if d == 1 { 0.5 } else { 0.4 },
            rho_mean: vec![0.0; d],
            mix_sep: 1.0,
            mix_weight: 0.5,
            c0: "gaussian".into(),
            c0_amp: 0.5,
            c0_width: 1.0,
            c0_center: center,
            history_stride: None,
            sample_every: 5,
            w1_samples: 256,
            n_list: vec![64, 256, 1024, 4096],
            eps_list: vec![0.05, 0.1, 0.2],
            output: PathBuf::from("out"),
        }
    }

    /// Parses a configuration text on top of the defaults for its dimension.
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let d = match pairs.iter().find(|(k, _)| k == "d") {
            Some((_, v)) => parse_num::<usize>("d", v)?,
            None => 1,
        };
        if d == 0 || d > 3 {
            return Err(Error::Config(format!("d = {d} unsupported (1..=3)")));
        }
        let mut cfg = Self::defaults(d);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => {
                let d = parse_num::<usize>("d", v)?;
                if d != self.d {
                    return Err(Error::Config("d must be set in the configuration file, not overridden".into()));
                }
            }
            "N" => self.n = parse_num("N", v)?,
            "T" => self.t_final = parse_num("T", v)?,
            "dt" => self.dt = parse_num("dt", v)?,
            "eps" => self.eps = if v == "auto" { EpsSetting::Auto } else { EpsSetting::Value(parse_num("eps", v)?) },
            "lambda" => self.lambda = parse_num("lambda", v)?,
            "lambda_cut" => self.lambda_cut = parse_num("lambda_cut", v)?,
            "L" => self.half_width = parse_num("L", v)?,
            "M" => self.cells = parse_num("M", v)?,
            "seed" => self.seed = parse_num("seed", v)?,
            "n_seeds" => self.n_seeds = parse_num("n_seeds", v)?,
            "drift" => self.drift = v.parse()?,
            "interaction" => self.interaction = parse_bool("interaction", v)?,
            "init" => self.init = v.to_string(),
            "rho_sigma" => self.rho_sigma = parse_num("rho_sigma", v)?,
            "rho_mean" => self.rho_mean = parse_list("rho_mean", v)?,
            "mix_sep" => self.mix_sep = parse_num("mix_sep", v)?,
            "mix_weight" => self.mix_weight = parse_num("mix_weight", v)?,
            "c0" => self.c0 = v.to_string(),
            "c0_amp" => self.c0_amp = parse_num("c0_amp", v)?,
            "c0_width" => self.c0_width = parse_num("c0_width", v)?,
            "c0_center" => self.c0_center = parse_list("c0_center", v)?,
            "history_stride" => self.history_stride = Some(parse_num("history_stride", v)?),
            "sample_every" => self.sample_every = parse_num("sample_every", v)?,
            "w1_samples" => self.w1_samples = parse_num("w1_samples", v)?,
            "N_list" => self.n_list = parse_list("N_list", v)?,
            "eps_list" => self.eps_list = parse_list("eps_list", v)?,
            "output" => self.output = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Cut-off for a particle count: the explicit value or the schedule.
    pub fn eps_for(&self, n: usize) -> Result<f64> {
        match self.eps {
            EpsSetting::Value(e) => Ok(e),
            EpsSetting::Auto => epsilon_schedule(n, self.lambda_cut, self.d),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.d, self.cells, self.half_width).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn initial_data(&self) -> Result<InitialData> {
        let rho = DensityFamily::from_tag(&self.init, self.d, &self.rho_mean, self.rho_sigma, self.mix_sep, self.mix_weight)?;
        let c0 = ChemicalFamily::from_tag(&self.c0, self.d, self.c0_amp, &self.c0_center, self.c0_width)?;
        InitialData::new(self.d, rho, c0)
    }

    pub fn history_stride_for(&self, eps: f64) -> usize {
        self.history_stride.unwrap_or_else(|| default_history_stride(eps, self.dt))
    }

    /// Checks every invariant, with `n` particles and cut-off `eps`.
    pub fn validate_point(&self, n: usize, eps: f64) -> Result<()> {
        if !(self.t_final > 0.0) {
            return Err(Error::Config(format!("T > 0 required, got {}", self.t_final)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt > 0 required, got {}", self.dt)));
        }
        if eps < 0.0 {
            return Err(Error::Config(format!("eps >= 0 required, got {eps}")));
        }
        if eps > 0.0 && self.dt > 0.25 * eps * (1.0 + 1e-12) {
            return Err(Error::Config(format!("dt > eps/4 (dt = {}, eps = {eps})", self.dt)));
        }
        if n < 2 {
            return Err(Error::Config(format!("N >= 2 required for the interacting system, got {n}")));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda >= 0 required, got {}", self.lambda)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds >= 1 required".into()));
        }
        if self.sample_every == 0 {
            return Err(Error::Config("sample_every >= 1 required".into()));
        }
        kslab_core::pde::steps_to(self.t_final, self.dt)?;
        self.grid()?;
        let image = (-self.half_width * self.half_width / (4.0 * self.t_final)).exp();
        if image >= DOMAIN_TOLERANCE {
            return Err(Error::Config(format!(
                "image error exp(-L^2/4T) = {image:.2e} >= {DOMAIN_TOLERANCE:e}: enlarge L or shorten T"
            )));
        }
        let init = self.initial_data()?;
        let tail = init.rho0.tail_mass_bound(self.d, 0.5 * self.half_width);
        if tail >= DOMAIN_TOLERANCE {
            return Err(Error::Config(format!(
                "initial mass outside [-L/2, L/2]^d up to {tail:.2e} >= {DOMAIN_TOLERANCE:e}: enlarge L"
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_point(self.n, self.eps_for(self.n.max(3))?)
    }

    /// Seeds of the replica batch.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }

    /// Canonical `key = value` rendering (sorted keys, round-trip floats).
    pub fn canonical(&self) -> String {
        let list_f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("d", self.d.to_string());
        m.insert("N", self.n.to_string());
        m.insert("T", format!("{:?}", self.t_final));
        m.insert("dt", format!("{:?}", self.dt));
        m.insert(
            "eps",
            match self.eps {
                EpsSetting::Auto => "auto".into(),
                EpsSetting::Value(e) => format!("{e:?}"),
            },
        );
        m.insert("lambda", format!("{:?}", self.lambda));
        m.insert("lambda_cut", format!("{:?}", self.lambda_cut));
        m.insert("L", format!("{:?}", self.half_width));
        m.insert("M", self.cells.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("n_seeds", self.n_seeds.to_string());
        m.insert(
            "drift",
            match self.drift {
                DriftPath::Fast => "fast".into(),
                DriftPath::Direct => "direct".into(),
            },
        );
        m.insert("interaction", self.interaction.to_string());
        m.insert("init", self.init.clone());
        m.insert("rho_sigma", format!("{:?}", self.rho_sigma));
        m.insert("rho_mean", list_f(&self.rho_mean));
        m.insert("mix_sep", format!("{:?}", self.mix_sep));
        m.insert("mix_weight", format!("{:?}", self.mix_weight));
        m.insert("c0", self.c0.clone());
        m.insert("c0_amp", format!("{:?}", self.c0_amp));
        m.insert("c0_width", format!("{:?}", self.c0_width));
        m.insert("c0_center", list_f(&self.c0_center));
        if let Some(h) = self.history_stride {
            m.insert("history_stride", h.to_string());
        }
        m.insert("sample_every", self.sample_every.to_string());
        m.insert("w1_samples", self.w1_samples.to_string());
        m.insert("N_list", self.n_list.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
        m.insert("eps_list", list_f(&self.eps_list));
        let mut out = String::new();
        for (k, v) in m {
            // the output directory does not affect results and is left out
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}
