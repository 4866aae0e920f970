//! Binary snapshots and CSV exports.
//!
//! Grid snapshots: little-endian `b"KSGF"`, `u32` version, `u32` d, `u32` M,
//! `f64` L, `f64` time, then `M^d` row-major `f64` samples per component (the
//! component count follows from the payload length).
//!
//! Trajectories: `b"KSPT"`, `u32` version, `u32` d, `u32` N, `f64` L, `f64` first
//! time, then records of `f64` time followed by `N * d` `f64` coordinates.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{GridField, GridSpec};
use crate::particles::ParticleEnsemble;

pub const GRID_MAGIC: &[u8; 4] = b"KSGF";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"KSPT";
pub const FORMAT_VERSION: u32 = 1;

fn put_header(w: &mut impl Write, magic: &[u8; 4], d: usize, count: usize, l: f64, time: f64) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&(count as u32).to_le_bytes())?;
    w.write_all(&l.to_le_bytes())?;
    w.write_all(&time.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<(usize, usize, f64, f64)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&m))));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let d = read_u32(r)? as usize;
    let count = read_u32(r)? as usize;
    Ok((d, count, read_f64(r)?, read_f64(r)?))
}

pub fn write_grid(w: &mut impl Write, field: &GridField) -> Result<()> {
    let spec = field.spec();
    put_header(w, GRID_MAGIC, spec.dim(), spec.cells(), spec.half_width(), field.time())?;
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid(r: &mut impl Read) -> Result<GridField> {
    let (d, m, l, time) = get_header(r, GRID_MAGIC)?;
    let spec = GridSpec::new(d, m, l)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 || (bytes.len() / 8) % spec.n_nodes() != 0 || bytes.is_empty() {
        return Err(Error::Format(format!("payload of {} bytes does not fit a {m}^{d} grid", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let components = values.len() / spec.n_nodes();
    Ok(GridField::from_values(spec, components, values)?.with_time(time))
}

/// Streams ensemble snapshots into a trajectory file.
pub struct TrajectoryWriter<W: Write> {
    inner: W,
    dim: usize,
    n: usize,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(mut inner: W, ens: &ParticleEnsemble) -> Result<Self> {
        put_header(&mut inner, TRAJECTORY_MAGIC, ens.dim(), ens.len(), ens.half_width(), ens.time())?;
        Ok(Self { inner, dim: ens.dim(), n: ens.len() })
    }

    pub fn record(&mut self, ens: &ParticleEnsemble) -> Result<()> {
        if ens.dim() != self.dim || ens.len() != self.n {
            return Err(Error::Shape("ensemble does not match the trajectory header".into()));
        }
        self.inner.write_all(&ens.time().to_le_bytes())?;
        for v in ens.positions() {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Decoded trajectory file: `(time, positions)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
    pub records: Vec<(f64, Vec<f64>)>,
}

pub fn read_trajectory(r: &mut impl Read) -> Result<Trajectory> {
    let (dim, n, half_width, _t0) = get_header(r, TRAJECTORY_MAGIC)?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let record = 8 * (1 + n * dim);
    if bytes.len() % record != 0 {
        return Err(Error::Format("truncated trajectory record".into()));
    }
    let records = bytes
        .chunks_exact(record)
        .map(|c| {
            let vals: Vec<f64> = c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            (vals[0], vals[1..].to_vec())
        })
        .collect();
    Ok(Trajectory { dim, n, half_width, records })
}

/// `x,value` lines of a one-dimensional field (first component).
pub fn slice_csv(field: &GridField) -> Result<String> {
    let spec = field.spec();
    if spec.dim() != 1 {
        return Err(Error::Domain("CSV slices are one-dimensional".into()));
    }
    let mut out = String::from("x,value\n");
    for (k, v) in field.component(0).iter().enumerate() {
        out.push_str(&format!("{:.17e},{:.17e}\n", spec.axis_coord(k), v));
    }
    Ok(out)
}
