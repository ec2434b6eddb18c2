//! Datasets: IDX ingestion, binarization, seeded sub-sampling, row normalization
//! and synthetic fixtures.
//!
//! A [`Dataset`] is immutable once built; every transform returns a new value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Magic prefix of the flat binary dataset cache.
pub const CACHE_MAGIC: [u8; 8] = *b"GFSDSET1";

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<f64>,
    class_ids: Option<Vec<u32>>,
    normalized: bool,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<f64>) -> Result<Self> {
        let (m, d) = features.dim();
        if m == 0 || d == 0 {
            return Err(Error::config(format!("dataset must be non-empty, got {m}x{d}")));
        }
        if labels.len() != m {
            return Err(Error::DimensionMismatch {
                what: "label count",
                expected: m,
                actual: labels.len(),
            });
        }
        Ok(Dataset {
            features,
            labels,
            class_ids: None,
            normalized: false,
            image_shape: None,
        })
    }

    pub fn with_class_ids(mut self, class_ids: Vec<u32>) -> Result<Self> {
        if class_ids.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "class id count",
                expected: self.len(),
                actual: class_ids.len(),
            });
        }
        self.class_ids = Some(class_ids);
        Ok(self)
    }

    /// Number of examples `m`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input dimension `d`.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn class_ids(&self) -> Option<&[u32]> {
        self.class_ids.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// Returns an error naming the first label that is not exactly 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&y| y != 0.0 && y != 1.0)
        {
            Some(row) => Err(Error::NonBinaryLabels {
                row,
                value: self.labels[row],
            }),
            None => Ok(()),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.check_binary().is_ok()
    }

    /// Rows in the order given; duplicates are allowed.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(Error::config("cannot select zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        Ok(Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_ids: self
                .class_ids
                .as_ref()
                .map(|ids| rows.iter().map(|&r| ids[r]).collect()),
            normalized: self.normalized,
            image_shape: self.image_shape,
        })
    }

    /// Seeded uniform split into `(train, held_out)`; `held_out` receives
    /// `round(fraction * m)` rows, each side keeps source order.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::config(format!(
                "held-out fraction must lie in [0, 1), got {held_out_fraction}"
            )));
        }
        let m = self.len();
        let n_out = (held_out_fraction * m as f64).round() as usize;
        if n_out == 0 || n_out == m {
            return Err(Error::config("split leaves one side empty"));
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (held, kept) = order.split_at_mut(n_out);
        held.sort_unstable();
        kept.sort_unstable();
        Ok((self.select(kept)?, self.select(held)?))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn idx_header(path: &Path, bytes: &[u8], magic: u32, header_len: usize) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair (MNIST layout, optionally gzip-compressed).
/// Pixels are scaled to `[0, 1]` by dividing by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;

    idx_header(images_path, &images, IDX_IMAGES_MAGIC, 16)?;
    idx_header(labels_path, &labels, IDX_LABELS_MAGIC, 8)?;

    let n_images = be_u32(&images, 4) as usize;
    let rows = be_u32(&images, 8) as usize;
    let cols = be_u32(&images, 12) as usize;
    let n_labels = be_u32(&labels, 4) as usize;
    let d = rows * cols;

    let need = 16 + n_images * d;
    if images.len() < need {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            expected: need,
            actual: images.len(),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            expected: 8 + n_labels,
            actual: labels.len(),
        });
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images_path: images_path.to_path_buf(),
            labels_path: labels_path.to_path_buf(),
            images: n_images,
            labels: n_labels,
        });
    }
    if n_images == 0 || d == 0 {
        return Err(Error::Format {
            what: "IDX file",
            detail: format!("{} declares an empty image set", images_path.display()),
        });
    }

    let pixels = images[16..need].iter().map(|&p| p as f64 / 255.0).collect();
    let features = Array2::from_shape_vec((n_images, d), pixels).expect("shape checked above");
    let class_ids: Vec<u32> = labels[8..8 + n_labels].iter().map(|&c| c as u32).collect();
    let y = class_ids.iter().map(|&c| c as f64).collect();

    let mut ds = Dataset::new(features, y)?.with_class_ids(class_ids)?;
    ds.image_shape = Some((rows, cols));
    Ok(ds)
}

fn write_maybe_gz(path: &Path, payload: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(payload).and_then(|_| enc.finish().map(|_| ()))
    } else {
        BufWriter::new(file).write_all(payload)
    };
    res.map_err(|e| Error::io(path, e))
}

/// Writes features back as IDX bytes (`round(255 v)`) alongside the class ids.
/// Requires a dataset that came from [`load_idx`] (or carries an image shape and class ids).
pub fn write_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (rows, cols) = ds
        .image_shape
        .ok_or_else(|| Error::config("dataset has no image shape"))?;
    let ids = ds.class_ids().ok_or(Error::MissingClassIds)?;

    let mut img = Vec::with_capacity(16 + ds.features.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.features
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ids.iter().map(|&c| c as u8));

    write_maybe_gz(images_path.as_ref(), &img)?;
    write_maybe_gz(labels_path.as_ref(), &lab)
}

/// Labels become 0.0 for class ids below five and 1.0 otherwise.
pub fn binarize_labels(ds: &Dataset) -> Result<Dataset> {
    let ids = ds.class_ids().ok_or(Error::MissingClassIds)?;
    if let Some(row) = ids.iter().position(|&c| c > 9) {
        return Err(Error::InvalidClassId { row, id: ids[row] });
    }
    let mut out = ds.clone();
    out.labels = ids.iter().map(|&c| if c < 5 { 0.0 } else { 1.0 }).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingSpec {
    pub target_size: usize,
    pub seed: u64,
    pub per_class_uniform: bool,
}

/// Draws `target_size` rows without replacement. With `per_class_uniform` every
/// class contributes the same count. Selected rows keep their source order.
pub fn subsample_uniform(ds: &Dataset, spec: &SamplingSpec) -> Result<Dataset> {
    let m = ds.len();
    if spec.target_size == 0 || spec.target_size > m {
        return Err(Error::config(format!(
            "target size {} must lie in [1, {m}]",
            spec.target_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = if spec.per_class_uniform {
        let ids = ds.class_ids().ok_or(Error::MissingClassIds)?;
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (row, &c) in ids.iter().enumerate() {
            by_class.entry(c).or_default().push(row);
        }
        let classes = by_class.len();
        if !spec.target_size.is_multiple_of(classes) {
            return Err(Error::IndivisibleTarget {
                target: spec.target_size,
                classes,
            });
        }
        let per_class = spec.target_size / classes;
        let mut picked = Vec::with_capacity(spec.target_size);
        for (&class, rows) in by_class.iter_mut() {
            if rows.len() < per_class {
                return Err(Error::InsufficientClass {
                    class,
                    available: rows.len(),
                    needed: per_class,
                });
            }
            let (chosen, _) = rows.partial_shuffle(&mut rng, per_class);
            picked.extend_from_slice(chosen);
        }
        picked
    } else {
        let mut rows: Vec<usize> = (0..m).collect();
        let (chosen, _) = rows.partial_shuffle(&mut rng, spec.target_size);
        chosen.to_vec()
    };
    picked.sort_unstable();
    ds.select(&picked)
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for (i, mut row) in out.features.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    out.normalized = true;
    out.image_shape = None;
    Ok(out)
}

/// True when every row norm is within `1 ± 1e-9`.
pub fn rows_have_unit_norm(ds: &Dataset) -> bool {
    ds.features
        .axis_iter(Axis(0))
        .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= NORM_TOLERANCE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Regression,
    Binary,
}

/// Gaussian features projected onto the unit sphere. Binary labels come from a
/// random homogeneous linear threshold; regression labels from a random linear
/// map plus uniform noise in `[-0.05, 0.05]`.
pub fn make_synthetic(m: usize, d: usize, seed: u64, task: SyntheticTask) -> Result<Dataset> {
    if m == 0 || d == 0 {
        return Err(Error::config(format!("synthetic dataset needs m, d >= 1 (got {m}, {d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut features = Array2::<f64>::zeros((m, d));
    for mut row in features.axis_iter_mut(Axis(0)) {
        loop {
            row.mapv_inplace(|_| rng.sample(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    let scores: Vec<f64> = features
        .axis_iter(Axis(0))
        .map(|r| r.iter().zip(&direction).map(|(a, b)| a * b).sum())
        .collect();
    let ds = match task {
        SyntheticTask::Binary => {
            let labels: Vec<f64> = scores.iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
            let ids = labels.iter().map(|&y| y as u32).collect();
            Dataset::new(features, labels)?.with_class_ids(ids)?
        }
        SyntheticTask::Regression => {
            let labels = scores
                .iter()
                .map(|&s| s + rng.random_range(-0.05..=0.05))
                .collect();
            Dataset::new(features, labels)?
        }
    };
    Ok(Dataset {
        normalized: true,
        ..ds
    })
}

/// Replaces a seeded random `fraction` of binary labels (and class ids) by their
/// complement. Used to build synthetic tasks whose fit difficulty grows with `m`.
pub fn flip_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    ds.check_binary()?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * ds.len() as f64).round() as usize;
    let mut rows: Vec<usize> = (0..ds.len()).collect();
    let (flipped, _) = rows.partial_shuffle(&mut ChaCha8Rng::seed_from_u64(seed), count);
    let mut out = ds.clone();
    for &r in flipped.iter() {
        out.labels[r] = 1.0 - out.labels[r];
    }
    out.class_ids = Some(out.labels.iter().map(|&y| y as u32).collect());
    Ok(out)
}

/// Writes the flat cache layout: magic, `u64 m`, `u64 d`, then little-endian
/// `f64` features (row-major) followed by the labels.
pub fn write_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        w.write_all(&CACHE_MAGIC)?;
        w.write_all(&(ds.len() as u64).to_le_bytes())?;
        w.write_all(&(ds.dim() as u64).to_le_bytes())?;
        for v in ds.features.iter().chain(ds.labels.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != CACHE_MAGIC {
        return Err(Error::Format {
            what: "dataset cache",
            detail: format!("{}: unexpected magic {:?}", path.display(), magic),
        });
    }
    let mut word = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        Ok(word)
    };
    let m = u64::from_le_bytes(next(&mut r)?) as usize;
    let d = u64::from_le_bytes(next(&mut r)?) as usize;
    let mut values = Vec::with_capacity(m * d);
    for _ in 0..m * d {
        values.push(f64::from_le_bytes(next(&mut r)?));
    }
    let mut labels = Vec::with_capacity(m);
    for _ in 0..m {
        labels.push(f64::from_le_bytes(next(&mut r)?));
    }
    let features = Array2::from_shape_vec((m, d), values).map_err(|e| Error::Format {
        what: "dataset cache",
        detail: e.to_string(),
    })?;
    let mut ds = Dataset::new(features, labels)?;
    ds.normalized = rows_have_unit_norm(&ds);
    Ok(ds)
}
