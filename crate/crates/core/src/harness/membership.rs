//! Epoch-by-epoch check of whether some convex combination of the current
//! neurons already classifies the whole training set.

use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy, activation_matrix, ActivationKind, Criterion, OutputHead, TwoLayerNet};
use crate::polytope::{classification_membership_for, DEFAULT_MARGIN};
use crate::seed::derive_seed;
use crate::training::{init_weights, Sampling, TrainConfig, Trainer};

use super::config::Config;
use super::source::{bundled_mnist, DataSpec, DATA_KEYS};
use super::sweep::{train_config_from, with_threads, LrScale};

/// Smallest multiple of 100 with `N·d > m²`.
pub fn width_schedule(m: usize, d: usize) -> usize {
    assert!(d > 0, "input dimension must be positive");
    (m * m / (d * 100) + 1) * 100
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipConfig {
    pub data: DataSpec,
    pub sizes: Vec<usize>,
    /// One width per size; `None` uses [`width_schedule`].
    pub widths: Option<Vec<usize>>,
    pub trials: usize,
    /// Training budget in epochs; epoch 0 is the initialization.
    pub epochs: usize,
    pub train: TrainConfig,
    pub lr_scale: LrScale,
    pub activation: ActivationKind,
    pub margin: f64,
    /// Stop a run at its first satisfied epoch.
    pub stop_at_first: bool,
    pub base_seed: u64,
}

pub const MEMBERSHIP_KEYS: &[&str] = &[
    "sizes",
    "widths",
    "trials",
    "epochs",
    "seed",
    "activation",
    "margin",
    "stop_at_first",
    "train.lr",
    "train.lr_scale",
    "train.batch",
    "train.momentum",
    "train.weight_decay",
    "train.criterion",
    "train.sampling",
];

impl MembershipConfig {
    /// Bundled MNIST subsets, batch-1 cross-entropy SGD, scheduled widths.
    pub fn desk(sizes: Vec<usize>, trials: usize, epochs: usize, learning_rate: f64) -> Self {
        let (i, l) = bundled_mnist();
        let mut train = TrainConfig::empirical(0, learning_rate, 0);
        train.batch_size = 1;
        train.momentum = 0.0;
        train.sampling = Sampling::Shuffle;
        MembershipConfig {
            data: DataSpec::mnist(i, l),
            sizes,
            widths: None,
            trials,
            epochs,
            train,
            lr_scale: LrScale::Fixed,
            activation: ActivationKind::Sigmoid,
            margin: DEFAULT_MARGIN,
            stop_at_first: true,
            base_seed: 0,
        }
    }

    pub fn from_config(cfg: &Config, base: Option<&std::path::Path>) -> Result<Self> {
        let allowed: Vec<&str> = MEMBERSHIP_KEYS.iter().chain(DATA_KEYS).copied().collect();
        cfg.check_keys(&allowed)?;
        let mut c = MembershipConfig::desk(vec![500, 1000], 3, 10, 0.1);
        if cfg.contains("data") {
            c.data = DataSpec::from_config(cfg, base)?;
        }
        let (train, lr_scale) = train_config_from(cfg, c.train.clone())?;
        c.train = train;
        c.lr_scale = lr_scale;
        c.sizes = cfg.get_list("sizes")?.unwrap_or(c.sizes);
        c.widths = cfg.get_list("widths")?;
        c.trials = cfg.get_or("trials", c.trials)?;
        c.epochs = cfg.get_or("epochs", c.epochs)?;
        c.activation = cfg.get_or("activation", c.activation)?;
        c.margin = cfg.get_or("margin", c.margin)?;
        c.stop_at_first = cfg.get_bool("stop_at_first", c.stop_at_first)?;
        c.base_seed = cfg.get_or("seed", c.base_seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sizes must be non-empty and strictly ascending"));
        }
        if let Some(w) = &self.widths {
            if w.len() != self.sizes.len() || w.contains(&0) {
                return Err(Error::config("widths must list one positive width per size"));
            }
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if self.train.criterion == Criterion::L2 {
            // the sign test below assumes the logit of a sigmoid head
            return Err(Error::config("membership runs train with the bce criterion"));
        }
        Ok(())
    }

    pub fn width_for(&self, index: usize, d: usize) -> usize {
        match &self.widths {
            Some(w) => w[index],
            None => width_schedule(self.sizes[index], d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub m: usize,
    pub width: usize,
    pub trial: usize,
    pub epoch: usize,
    pub inside: bool,
    pub phase1_objective: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FirstEpoch {
    pub m: usize,
    pub width: usize,
    pub trial: usize,
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MembershipTable {
    pub rows: Vec<EpochRow>,
    pub first: Vec<FirstEpoch>,
}

fn fmt_epoch(e: Option<usize>) -> String {
    e.map(|e| e.to_string()).unwrap_or_else(|| "never".into())
}

impl MembershipTable {
    /// `m,N,trial,epoch,inside,phase1_objective,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,N,trial,epoch,inside,phase1_objective,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.16e},{:.16e}",
                r.m, r.width, r.trial, r.epoch, r.inside as u8, r.phase1_objective, r.accuracy
            );
        }
        out
    }

    /// `m,N,trial,first_epoch` with `never` for runs that exhausted the budget.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("m,N,trial,first_epoch\n");
        for f in &self.first {
            let _ = writeln!(out, "{},{},{},{}", f.m, f.width, f.trial, fmt_epoch(f.epoch));
        }
        out
    }

    /// Trial-averaged first epoch per size; infinite when any trial never got there.
    pub fn mean_first_epoch(&self, m: usize) -> Option<f64> {
        let runs: Vec<&FirstEpoch> = self.first.iter().filter(|f| f.m == m).collect();
        if runs.is_empty() {
            return None;
        }
        let sum: f64 = runs
            .iter()
            .map(|f| f.epoch.map_or(f64::INFINITY, |e| e as f64))
            .sum();
        Some(sum / runs.len() as f64)
    }
}

/// Trains `net` for up to `epochs` epochs, testing membership before the first
/// and after every epoch.
pub fn membership_trace(
    net: TwoLayerNet,
    ds: &Dataset,
    train: &TrainConfig,
    epochs: usize,
    margin: f64,
    stop_at_first: bool,
) -> Result<Vec<(usize, bool, f64, f64)>> {
    ds.check_binary()?;
    if net.head() != OutputHead::Sigmoid {
        return Err(Error::config("membership runs need the sigmoid head"));
    }
    let mut cfg = train.clone();
    cfg.batch_size = cfg.batch_size.min(ds.len());
    let mut trainer = Trainer::new(net, ds, cfg)?;
    let per_epoch = trainer.epoch_len();
    let mut out = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        for _ in 0..if epoch == 0 { 0 } else { per_epoch } {
            trainer.step()?;
        }
        let am = activation_matrix(trainer.net(), ds)?;
        let verdict = classification_membership_for(&am, margin)?;
        let acc = accuracy(trainer.net(), None, ds)?;
        out.push((epoch, verdict.inside, verdict.phase1_objective, acc));
        if verdict.inside && stop_at_first {
            break;
        }
    }
    Ok(out)
}

pub fn run_membership_experiment(cfg: &MembershipConfig, threads: Option<usize>) -> Result<MembershipTable> {
    cfg.validate()?;
    let pool = cfg.data.load_pool()?;
    pool.check_binary()?;
    let mut runs = Vec::new();
    for (i, &m) in cfg.sizes.iter().enumerate() {
        if m > pool.len() {
            return Err(Error::config(format!("size {m} exceeds the pool of {}", pool.len())));
        }
        for trial in 0..cfg.trials {
            runs.push((m, cfg.width_for(i, pool.dim()), trial));
        }
    }
    let run = |&(m, width, trial): &(usize, usize, usize)| -> Result<(Vec<EpochRow>, FirstEpoch)> {
        let wrap = |e: Error| Error::Cell {
            m,
            width,
            trial,
            checkpoint: 0,
            source: Box::new(e),
        };
        let base = cfg.base_seed;
        let ds = cfg
            .data
            .subset(&pool, m, derive_seed(&[base, 0x3e3b, m as u64, trial as u64]))
            .map_err(wrap)?;
        let net = init_weights(
            width,
            ds.dim(),
            derive_seed(&[base, 0x1417, m as u64, width as u64, trial as u64]),
            cfg.activation,
            OutputHead::Sigmoid,
        )
        .map_err(wrap)?;
        let mut tc = cfg.train.clone();
        tc.seed = derive_seed(&[base, 0x7a1d, m as u64, width as u64, trial as u64]);
        if cfg.lr_scale == LrScale::Width {
            tc.learning_rate *= width as f64;
        }
        let trace = membership_trace(net, &ds, &tc, cfg.epochs, cfg.margin, cfg.stop_at_first).map_err(wrap)?;
        let rows: Vec<EpochRow> = trace
            .iter()
            .map(|&(epoch, inside, phase1_objective, accuracy)| EpochRow {
                m,
                width,
                trial,
                epoch,
                inside,
                phase1_objective,
                accuracy,
            })
            .collect();
        let first = FirstEpoch {
            m,
            width,
            trial,
            epoch: rows.iter().find(|r| r.inside).map(|r| r.epoch),
        };
        info!("membership m={m} N={width} trial={trial}: first epoch {}", fmt_epoch(first.epoch));
        Ok((rows, first))
    };
    let results = with_threads(threads, || runs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let mut table = MembershipTable::default();
    for (rows, first) in results {
        table.rows.extend(rows);
        table.first.push(first);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticTask};
    use ndarray::{Array1, Array2};

    #[test]
    fn schedule_matches_overparameterization() {
        assert_eq!(width_schedule(500, 784), 400);
        assert_eq!(width_schedule(1000, 784), 1300);
        assert_eq!(width_schedule(10, 100), 100);
        for m in [100, 700, 2000] {
            let n = width_schedule(m, 784);
            assert!(n * 784 > m * m && (n - 100) * 784 <= m * m);
        }
    }

    #[test]
    fn perfect_neuron_is_inside_at_epoch_zero() {
        // label = [x₀ > 0], and the only neuron reads x₀ through a steep tanh
        let x = Array2::from_shape_fn((30, 3), |(i, j)| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            if j == 0 { s * (0.2 + i as f64 / 100.0) } else { (i * (j + 2)) as f64 % 7.0 / 7.0 }
        });
        let labels = (0..30).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let ds = Dataset::new(x, labels).unwrap();
        let inner = Array2::from_shape_vec((1, 3), vec![50.0, 0.0, 0.0]).unwrap();
        let net = TwoLayerNet::new(Array1::from(vec![1.0]), inner, ActivationKind::Tanh, OutputHead::Sigmoid).unwrap();
        let cfg = TrainConfig::empirical(0, 0.0, 0);
        let trace = membership_trace(net, &ds, &cfg, 3, DEFAULT_MARGIN, true).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].1);
        assert_eq!(trace[0].3, 1.0);
    }

    #[test]
    fn random_labels_with_tiny_width_never_fit() {
        let ds = make_synthetic(60, 4, 9, SyntheticTask::Binary).unwrap();
        let ds = crate::data::flip_labels(&ds, 0.5, 2).unwrap();
        let net = init_weights(2, 4, 1, ActivationKind::Sigmoid, OutputHead::Sigmoid).unwrap();
        let mut cfg = TrainConfig::empirical(0, 0.5, 3);
        cfg.batch_size = 1;
        cfg.momentum = 0.0;
        let trace = membership_trace(net, &ds, &cfg, 3, DEFAULT_MARGIN, true).unwrap();
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|r| !r.1));
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let mut cfg = MembershipConfig::desk(vec![20, 40], 2, 2, 0.5);
        cfg.data = DataSpec::synthetic(80, 6, 3, SyntheticTask::Binary);
        let a = run_membership_experiment(&cfg, Some(1)).unwrap();
        let b = run_membership_experiment(&cfg, Some(2)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.summary_csv(), b.summary_csv());
        assert_eq!(a.first.len(), 4);
        assert_eq!(a.first[0].width, width_schedule(20, 6));
        assert!(a.mean_first_epoch(20).is_some());
    }
}
