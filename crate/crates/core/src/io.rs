//! Binary containers for snapshot matrices and heatmap tensors, trial
//! datasets on disk, and the heatmap CSV export.
//!
//! Every record starts with the magic bytes `STAP` and a little-endian `u16`
//! version:
//!
//! * version 1, complex matrix: `rows: u32`, `cols: u32`, then `rows·cols`
//!   interleaved `(re, im)` f64 pairs in column-major order;
//! * version 2, real tensor: `rank: u32`, `rank` dims as `u32`, then the
//!   values as f64 with the last index varying fastest.
//!
//! Records can be concatenated; a trial file holds `Y_0, Z_0, …, Y_{κ−1},
//! Z_{κ−1}` followed by the `1 × K` signal row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::HeatmapTensor;
use crate::linalg::{CMatrix, C64};
use crate::scene::{SceneConfig, TargetTruth};
use crate::synth::{Role, SignalRow, SnapshotMatrix, TrialData};

const MAGIC: &[u8; 4] = b"STAP";
const MATRIX_VERSION: u16 = 1;
const TENSOR_VERSION: u16 = 2;

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated record".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(read_bytes(r)?) as usize)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_bytes(r)?))
}

fn dim(n: usize) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("dimension {n} does not fit in u32")))
}

/// Reads the magic and version; `Ok(None)` at a clean end of stream.
fn read_header(r: &mut impl Read) -> Result<Option<u16>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut magic[got..])?;
        if n == 0 {
            return if got == 0 { Ok(None) } else { Err(Error::Format("truncated record header".into())) };
        }
        got += n;
    }
    if &magic != MAGIC {
        return Err(Error::Format("missing STAP magic".into()));
    }
    Ok(Some(u16::from_le_bytes(read_bytes(r)?)))
}

pub fn write_matrix(w: &mut impl Write, m: &CMatrix) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&dim(m.nrows())?)?;
    w.write_all(&dim(m.ncols())?)?;
    for z in m.iter() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix_body(r: &mut impl Read) -> Result<CMatrix> {
    let rows = read_u32(r)?;
    let cols = read_u32(r)?;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
    for _ in 0..rows * cols {
        let re = read_f64(r)?;
        let im = read_f64(r)?;
        data.push(C64::new(re, im));
    }
    Ok(CMatrix::from_vec(rows, cols, data))
}

pub fn read_matrix(r: &mut impl Read) -> Result<CMatrix> {
    match read_header(r)? {
        Some(MATRIX_VERSION) => read_matrix_body(r),
        Some(v) => Err(Error::Format(format!("expected a matrix record, found version {v}"))),
        None => Err(Error::Format("empty stream".into())),
    }
}

/// Reads matrix records until the end of the stream.
pub fn read_matrices(r: &mut impl Read) -> Result<Vec<CMatrix>> {
    let mut out = Vec::new();
    while let Some(v) = read_header(r)? {
        if v != MATRIX_VERSION {
            return Err(Error::Format(format!("expected a matrix record, found version {v}")));
        }
        out.push(read_matrix_body(r)?);
    }
    Ok(out)
}

pub fn write_tensor(w: &mut impl Write, t: &HeatmapTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&dim(3)?)?;
    for d in [t.bins, t.n_az, t.n_vel] {
        w.write_all(&dim(d)?)?;
    }
    for x in &t.values {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a rank-3 tensor and attaches the grid of `cfg`, which must match
/// its shape.
pub fn read_tensor(r: &mut impl Read, cfg: &SceneConfig) -> Result<HeatmapTensor> {
    match read_header(r)? {
        Some(TENSOR_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("expected a tensor record, found version {v}"))),
        None => return Err(Error::Format("empty stream".into())),
    }
    let rank = read_u32(r)?;
    if rank != 3 {
        return Err(Error::Format(format!("expected rank 3, found {rank}")));
    }
    let dims = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let mut t = HeatmapTensor::zeros(cfg);
    if dims != [t.bins, t.n_az, t.n_vel] {
        return Err(Error::dims(format!("{:?}", t.shape()), format!("{dims:?}")));
    }
    for x in t.values.iter_mut() {
        *x = read_f64(r)?;
    }
    Ok(t)
}

pub fn save_tensor(path: &Path, t: &HeatmapTensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path, cfg: &SceneConfig) -> Result<HeatmapTensor> {
    read_tensor(&mut BufReader::new(File::open(path)?), cfg)
}

#[derive(Debug, Serialize)]
struct HeatmapRow {
    range_bin: usize,
    azimuth_deg: f64,
    velocity_mps: f64,
    gamma: f64,
}

/// One row per cell: `(range_bin, azimuth_deg, velocity_mps, gamma)`.
pub fn write_heatmap_csv(path: &Path, t: &HeatmapTensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (flat, gamma) in t.values.iter().enumerate() {
        let (b, j, l) = t.coordinates(flat);
        w.serialize(HeatmapRow { range_bin: b, azimuth_deg: t.azimuth_deg[j], velocity_mps: t.velocity_mps[l], gamma: *gamma })?;
    }
    w.flush()?;
    Ok(())
}

/// One line of a dataset's `truths.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub trial: usize,
    pub range_bin: usize,
    pub azimuth_deg: f64,
    pub velocity_mps: f64,
    pub rcs_db: f64,
    pub mean_signal_power: f64,
    pub snapshot_power: f64,
}

impl TruthRow {
    pub fn new(trial: usize, truth: &TargetTruth, signal: &SignalRow) -> Self {
        TruthRow {
            trial,
            range_bin: truth.range_bin,
            azimuth_deg: truth.azimuth_deg,
            velocity_mps: truth.velocity_mps,
            rcs_db: truth.rcs_db,
            mean_signal_power: signal.mean_power(),
            snapshot_power: signal.snapshot_power(),
        }
    }

    pub fn truth(&self) -> TargetTruth {
        TargetTruth {
            range_bin: self.range_bin,
            azimuth_deg: self.azimuth_deg,
            velocity_mps: self.velocity_mps,
            rcs_db: self.rcs_db,
        }
    }
}

/// A directory of simulated trials: `config.toml`, `truths.csv` and one
/// `trial_NNNNN.stap` per trial.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
}

impl Dataset {
    pub fn create(dir: &Path, cfg: &SceneConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
        Ok(Dataset { dir: dir.to_path_buf() })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.join("config.toml").is_file() || !dir.join("truths.csv").is_file() {
            return Err(Error::Format(format!("{} is not a dataset directory", dir.display())));
        }
        Ok(Dataset { dir: dir.to_path_buf() })
    }

    pub fn config(&self) -> Result<SceneConfig> {
        SceneConfig::load(&self.dir.join("config.toml"))
    }

    pub fn trial_path(&self, trial: usize) -> PathBuf {
        self.dir.join(format!("trial_{trial:05}.stap"))
    }

    pub fn write_truths(&self, rows: &[TruthRow]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join("truths.csv"))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn truths(&self) -> Result<Vec<TruthRow>> {
        let mut r = csv::Reader::from_path(self.dir.join("truths.csv"))?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<TruthRow>, _>>()?)
    }

    pub fn write_trial(&self, trial: usize, data: &TrialData) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.trial_path(trial))?);
        for (y, z) in data.y.iter().zip(&data.z) {
            write_matrix(&mut w, &y.values)?;
            write_matrix(&mut w, &z.values)?;
        }
        let s = CMatrix::from_row_slice(1, data.signal.values.len(), &data.signal.values);
        write_matrix(&mut w, &s)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_trial(&self, trial: usize, truth: TargetTruth) -> Result<TrialData> {
        let mut records = read_matrices(&mut BufReader::new(File::open(self.trial_path(trial))?))?;
        if records.len() < 3 || records.len() % 2 == 0 {
            return Err(Error::Format(format!("trial {trial}: {} records", records.len())));
        }
        let signal = records.pop().expect("checked length");
        let signal = SignalRow::new(signal.iter().copied().collect());
        let mut y = Vec::new();
        let mut z = Vec::new();
        for (bin, pair) in records.chunks(2).enumerate() {
            y.push(SnapshotMatrix { values: pair[0].clone(), role: Role::Y, range_bin: bin });
            z.push(SnapshotMatrix { values: pair[1].clone(), role: Role::Z, range_bin: bin });
        }
        Ok(TrialData { truth, y, z, signal })
    }
}
