//! Where experiment data comes from: a synthetic pool or an IDX file pair,
//! plus the per-size sub-dataset draw.

use std::path::{Path, PathBuf};

use crate::data::{
    binarize_labels, flip_labels, load_idx, make_synthetic, normalize_rows, subsample_uniform, Dataset, SamplingSpec,
    SyntheticTask,
};
use crate::error::{Error, Result};

use super::config::Config;

pub const DATA_KEYS: &[&str] = &[
    "data",
    "data.images",
    "data.labels",
    "data.pool",
    "data.d",
    "data.task",
    "data.seed",
    "data.flip",
    "data.binarize",
    "data.normalize",
    "data.per_class",
];

/// The 5000-image MNIST subset shipped with the crate (500 images per digit).
pub fn bundled_mnist() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("mnist");
    (
        dir.join("mnist5k-images-idx3-ubyte.gz"),
        dir.join("mnist5k-labels-idx1-ubyte.gz"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        pool: usize,
        d: usize,
        seed: u64,
        task: SyntheticTask,
        /// Fraction of binary labels complemented after generation.
        flip: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub binarize: bool,
    pub normalize: bool,
    /// Equal counts per class when drawing sub-datasets.
    pub per_class: bool,
}

impl DataSpec {
    pub fn synthetic(pool: usize, d: usize, seed: u64, task: SyntheticTask) -> Self {
        DataSpec {
            source: DataSource::Synthetic {
                pool,
                d,
                seed,
                task,
                flip: 0.0,
            },
            binarize: false,
            normalize: false,
            per_class: false,
        }
    }

    pub fn mnist(images: PathBuf, labels: PathBuf) -> Self {
        DataSpec {
            source: DataSource::Idx { images, labels },
            binarize: true,
            normalize: false,
            per_class: true,
        }
    }

    pub fn from_config(cfg: &Config, base: Option<&Path>) -> Result<Self> {
        let kind = cfg.get_str("data").unwrap_or("synthetic");
        let mut spec = match kind {
            "synthetic" => {
                let task = match cfg.get_str("data.task").unwrap_or("binary") {
                    "binary" => SyntheticTask::Binary,
                    "regression" => SyntheticTask::Regression,
                    other => return Err(Error::config(format!("unknown data.task `{other}`"))),
                };
                let mut s = DataSpec::synthetic(
                    cfg.get_or("data.pool", 8192)?,
                    cfg.get_or("data.d", 32)?,
                    cfg.get_or("data.seed", 0)?,
                    task,
                );
                if let DataSource::Synthetic { flip, .. } = &mut s.source {
                    *flip = cfg.get_or("data.flip", 0.0)?;
                }
                s
            }
            "mnist" | "idx" => {
                let (di, dl) = bundled_mnist();
                DataSpec::mnist(
                    cfg.get_path("data.images", base).unwrap_or(di),
                    cfg.get_path("data.labels", base).unwrap_or(dl),
                )
            }
            other => return Err(Error::config(format!("unknown data source `{other}`"))),
        };
        spec.binarize = cfg.get_bool("data.binarize", spec.binarize)?;
        spec.normalize = cfg.get_bool("data.normalize", spec.normalize)?;
        spec.per_class = cfg.get_bool("data.per_class", spec.per_class)?;
        Ok(spec)
    }

    /// The full pool, binarized and normalized as configured.
    pub fn load_pool(&self) -> Result<Dataset> {
        let mut ds = match &self.source {
            DataSource::Synthetic {
                pool,
                d,
                seed,
                task,
                flip,
            } => {
                let ds = make_synthetic(*pool, *d, *seed, *task)?;
                if *flip > 0.0 {
                    flip_labels(&ds, *flip, seed.wrapping_add(1))?
                } else {
                    ds
                }
            }
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        if self.binarize {
            ds = binarize_labels(&ds)?;
        }
        if self.normalize && !ds.is_normalized() {
            ds = normalize_rows(&ds)?;
        }
        Ok(ds)
    }

    /// A seeded draw of `m` rows from the pool; the pool itself when `m` equals its size.
    pub fn subset(&self, pool: &Dataset, m: usize, seed: u64) -> Result<Dataset> {
        if m == pool.len() {
            return Ok(pool.clone());
        }
        subsample_uniform(
            pool,
            &SamplingSpec {
                target_size: m,
                seed,
                per_class_uniform: self.per_class,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_mnist_loads() {
        let (i, l) = bundled_mnist();
        let spec = DataSpec::mnist(i, l);
        let pool = spec.load_pool().unwrap();
        assert_eq!(pool.len(), 5000);
        assert_eq!(pool.dim(), 784);
        assert!(pool.is_binary());
        let sub = spec.subset(&pool, 500, 3).unwrap();
        let ids = sub.class_ids().unwrap();
        assert!((0..10).all(|c| ids.iter().filter(|&&x| x == c).count() == 50));
    }

    #[test]
    fn config_selects_source() {
        let cfg = Config::parse("data = synthetic\ndata.pool = 64\ndata.d = 5\ndata.flip = 0.25").unwrap();
        let spec = DataSpec::from_config(&cfg, None).unwrap();
        let pool = spec.load_pool().unwrap();
        assert_eq!((pool.len(), pool.dim()), (64, 5));
        assert!(DataSpec::from_config(&Config::parse("data = cifar").unwrap(), None).is_err());
    }
}
