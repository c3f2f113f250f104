//! On-disk artifact formats: dataset directories, model checkpoints, CSV
//! reports, and grayscale heatmaps.
//!
//! Rasters are raw little-endian 32-bit floats in row-major order; every
//! writer is deterministic, so identical inputs produce byte-identical
//! files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DomainSpec, FieldGrid, GridError, LayoutSpec, MpImage};
use crate::net::{param_shapes, ModelConfig, ModelParams};
use crate::reliability::ProbInterval;
use crate::solver::{extract_mp, solve_layout, SolverConfig, SolverError};
use crate::stochastic::{lhs_sample, SeededRng, StochasticError, Stream};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error("raster {path}: expected {want} bytes for the configured shape, found {got}")]
    RasterLength { path: PathBuf, want: usize, got: usize },
    #[error("dataset must contain at least one sample")]
    EmptyDataset,
    #[error("sample index {index} out of range (dataset has {total})")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("checkpoint {dir}: tensor count {got} does not match the model configuration ({want})")]
    CheckpointTensorCount { dir: PathBuf, got: usize, want: usize },
}

// ---------------------------------------------------------------------------
// Raw f32 rasters.
// ---------------------------------------------------------------------------

/// Write a raster as raw little-endian f32, row-major.
pub fn write_f32_raster(path: &Path, values: &Array2<f64>) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a raster written by [`write_f32_raster`].
pub fn read_f32_raster(path: &Path, shape: (usize, usize)) -> Result<Array2<f64>, IoError> {
    let bytes = fs::read(path)?;
    let want = shape.0 * shape.1 * 4;
    if bytes.len() != want {
        return Err(IoError::RasterLength {
            path: path.to_path_buf(),
            want,
            got: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(shape.0 * shape.1);
    for chunk in bytes.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok(Array2::from_shape_vec(shape, values).expect("length checked"))
}

fn flat_f32_bytes<S: crate::autodiff::Scalar>(t: &crate::autodiff::Tensor4<S>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for &v in t.iter() {
        bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    bytes
}

// ---------------------------------------------------------------------------
// Dataset directories.
// ---------------------------------------------------------------------------

/// Index document of a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: DomainSpec,
    pub layout: LayoutSpec,
    /// Root seed all named random streams derive from.
    pub seed: u64,
    /// Whether rasters are stored on the normalized scale (they are stored
    /// in Kelvin; readers must check).
    pub normalized: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Named stream ids derived from the root seed.
    pub streams: BTreeMap<String, u64>,
}

impl DatasetMeta {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

fn stream_table() -> BTreeMap<String, u64> {
    [
        (Stream::Data, "data"),
        (Stream::Tau, "tau"),
        (Stream::Noise, "noise"),
        (Stream::Mc, "mc"),
        (Stream::Init, "init"),
    ]
    .into_iter()
    .map(|(s, name)| (name.to_string(), s as u64))
    .collect()
}

fn field_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("field_{i:06}.f32"))
}

fn mp_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mp_{i:06}.f32"))
}

/// Sample component powers, solve each case, and write the dataset
/// directory: `meta.json` plus `field_%06d.f32` / `mp_%06d.f32` pairs in
/// Kelvin. Powers come from one Latin hypercube over all samples; sensor
/// noise uses a per-sample keyed stream.
pub fn generate_dataset(
    dir: &Path,
    domain: &DomainSpec,
    layout: &LayoutSpec,
    splits: (usize, usize, usize),
    seed: u64,
    solver_cfg: &SolverConfig,
) -> Result<DatasetMeta, IoError> {
    layout.validate(domain)?;
    let (n_train, n_val, n_test) = splits;
    let total = n_train + n_val + n_test;
    if total == 0 {
        return Err(IoError::EmptyDataset);
    }
    fs::create_dir_all(dir)?;

    let dists: Vec<_> = layout.components.iter().map(|c| c.dist).collect();
    let mut data_rng = SeededRng::new(seed, Stream::Data);
    let powers = lhs_sample(total, &dists, &mut data_rng)?;

    for i in 0..total {
        let row: Vec<f64> = powers.row(i).to_vec();
        let field = solve_layout(domain, layout, &row, solver_cfg)?;
        let mut noise_rng = SeededRng::keyed(seed, Stream::Noise, &[i as u64]);
        let mp = extract_mp(&field, layout, &mut noise_rng);
        write_f32_raster(&field_path(dir, i), &field.values)?;
        write_f32_raster(&mp_path(dir, i), &mp)?;
    }

    let meta = DatasetMeta {
        domain: *domain,
        layout: layout.clone(),
        seed,
        normalized: false,
        n_train,
        n_val,
        n_test,
        streams: stream_table(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(meta)
}

/// A dataset directory opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    dir: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        meta.layout.validate(&meta.domain)?;
        Ok(Dataset { meta, dir: dir.to_path_buf() })
    }

    fn check(&self, index: usize) -> Result<(), IoError> {
        if index >= self.meta.total() {
            return Err(IoError::IndexOutOfRange { index, total: self.meta.total() });
        }
        Ok(())
    }

    /// Ground-truth temperature field of one sample, Kelvin.
    pub fn field(&self, index: usize) -> Result<FieldGrid, IoError> {
        self.check(index)?;
        let values = read_f32_raster(&field_path(&self.dir, index), self.meta.domain.shape())?;
        Ok(FieldGrid::new(&self.meta.domain, values)?)
    }

    /// Monitor-point image of one sample, Kelvin at sensors, 0 elsewhere.
    pub fn mp(&self, index: usize) -> Result<MpImage, IoError> {
        self.check(index)?;
        read_f32_raster(&mp_path(&self.dir, index), self.meta.domain.shape())
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.meta.n_train
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.meta.n_train..self.meta.n_train + self.meta.n_val
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.meta.n_train + self.meta.n_val..self.meta.total()
    }
}

// ---------------------------------------------------------------------------
// JSON helpers.
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Model checkpoints.
// ---------------------------------------------------------------------------

/// Index document of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Tensor shapes in parameter order, for validation on load.
    pub shapes: Vec<(usize, usize, usize, usize)>,
    /// Training epochs completed when this checkpoint was written.
    pub epoch: usize,
    /// Root seed of the training run.
    pub seed: u64,
}

/// Write `meta.json` plus one `param_%03d.f32` file per parameter tensor.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams<f32>,
    epoch: usize,
    seed: u64,
) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config: params.config,
        shapes: params.tensors.iter().map(|t| t.dim()).collect(),
        epoch,
        seed,
    };
    write_json(&dir.join("meta.json"), &meta)?;
    for (i, t) in params.tensors.iter().enumerate() {
        fs::write(dir.join(format!("param_{i:03}.f32")), flat_f32_bytes(t))?;
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`], validating shapes
/// against the stored model configuration.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams<f32>, CheckpointMeta), IoError> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    let want_shapes = param_shapes(&meta.config);
    if meta.shapes != want_shapes {
        return Err(IoError::CheckpointTensorCount {
            dir: dir.to_path_buf(),
            got: meta.shapes.len(),
            want: want_shapes.len(),
        });
    }
    let mut tensors = Vec::with_capacity(want_shapes.len());
    for (i, &shape) in want_shapes.iter().enumerate() {
        let path = dir.join(format!("param_{i:03}.f32"));
        let bytes = fs::read(&path)?;
        let want = shape.0 * shape.1 * shape.2 * shape.3 * 4;
        if bytes.len() != want {
            return Err(IoError::RasterLength { path, want, got: bytes.len() });
        }
        let flat: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(
            crate::autodiff::Tensor4::from_shape_vec(shape, flat).expect("length checked"),
        );
    }
    Ok((ModelParams { config: meta.config, tensors }, meta))
}

// ---------------------------------------------------------------------------
// CSV reports.
// ---------------------------------------------------------------------------

/// One `history.csv` row: the unweighted loss terms and the weighted total
/// of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_tau: f64,
    pub loss_le: f64,
    pub loss_bc: f64,
    pub loss_tv: f64,
    pub total: f64,
}

pub fn write_history_csv(path: &Path, records: &[EpochRecord]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Write `metrics.csv` with a header row and one data row.
pub fn write_metrics_csv(path: &Path, m: &crate::predictor::MetricReport) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(m)?;
    w.flush()?;
    Ok(())
}

/// Write `component_intervals.csv` (`id,pr_lo,pr_hi`), rows in id order.
pub fn write_intervals_csv(
    path: &Path,
    intervals: &BTreeMap<String, ProbInterval>,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "pr_lo", "pr_hi"])?;
    for (id, p) in intervals {
        w.write_record([id.as_str(), &p.lo.to_string(), &p.hi.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Write an ECDF as `value,cdf` rows over the sample support.
pub fn write_ecdf_csv(path: &Path, ecdf: &crate::reliability::Ecdf) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["value", "cdf"])?;
    for &v in ecdf.support() {
        w.write_record([v.to_string(), ecdf.eval(v).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Grayscale heatmaps.
// ---------------------------------------------------------------------------

/// Min/max annotation stored next to a PGM heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub min: f64,
    pub max: f64,
    pub h: usize,
    pub w: usize,
}

/// Write an 8-bit binary PGM (P5) heatmap plus a `<name>.json` sidecar
/// carrying the value range. Values map linearly onto 0..=255; a constant
/// field maps to 0.
pub fn write_pgm_with_sidecar(path: &Path, values: &Array2<f64>) -> Result<(), IoError> {
    let (h, w) = values.dim();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = Vec::with_capacity(h * w + 32);
    write!(&mut bytes, "P5\n{w} {h}\n255\n")?;
    for &v in values.iter() {
        let g = if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 };
        bytes.push(g);
    }
    fs::write(path, bytes)?;
    let sidecar = PgmSidecar { min, max, h, w };
    let mut sidecar_path = path.as_os_str().to_os_string();
    sidecar_path.push(".json");
    write_json(Path::new(&sidecar_path), &sidecar)?;
    Ok(())
}
