//! Dataset-size × pre-training-length sweep: train a dense network on each
//! sub-dataset, prune a deep copy at every checkpoint, and record how well the
//! pruned network fits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy, dataset_loss, pruned_loss, ActivationKind, Criterion, OutputHead};
use crate::pruning::{greedy_forward_selection, PruneConfig, Scoring, SelectionBatch, SelectionLoss};
use crate::seed::derive_seed;
use crate::training::{init_weights, TrainConfig, Trainer};

use super::config::Config;
use super::source::{DataSpec, DATA_KEYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScale {
    Fixed,
    /// The configured rate is multiplied by the width `N`, which offsets the
    /// `1/N` output scaling of the network.
    Width,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub data: DataSpec,
    pub sub_sizes: Vec<usize>,
    pub widths: Vec<usize>,
    pub trials: usize,
    pub checkpoint_every: usize,
    pub total_iterations: usize,
    pub prune: PruneConfig,
    /// `iterations` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub lr_scale: LrScale,
    pub activation: ActivationKind,
    pub head: OutputHead,
    pub base_seed: u64,
}

pub const SWEEP_KEYS: &[&str] = &[
    "sizes",
    "widths",
    "trials",
    "checkpoint_every",
    "iterations",
    "seed",
    "activation",
    "head",
    "prune.iterations",
    "prune.selection",
    "prune.batch",
    "prune.loss",
    "prune.scoring",
    "train.lr",
    "train.lr_scale",
    "train.batch",
    "train.momentum",
    "train.weight_decay",
    "train.criterion",
    "train.sampling",
];

/// Sweep defaults that differ from the generic `train.*`/`prune.*` ones.
const SWEEP_DEFAULTS: &[(&str, &str)] = &[
    ("train.lr", "0.1"),
    ("train.lr_scale", "width"),
    ("prune.loss", "head"),
    ("prune.selection", "minibatch"),
    ("prune.batch", "128"),
];

/// Reads the `train.*` keys on top of `base`.
pub fn train_config_from(cfg: &Config, mut base: TrainConfig) -> Result<(TrainConfig, LrScale)> {
    base.learning_rate = cfg.get_or("train.lr", base.learning_rate)?;
    base.batch_size = cfg.get_or("train.batch", base.batch_size)?;
    base.momentum = cfg.get_or("train.momentum", base.momentum)?;
    base.weight_decay = cfg.get_or("train.weight_decay", base.weight_decay)?;
    base.criterion = cfg.get_or("train.criterion", base.criterion)?;
    base.sampling = cfg.get_or("train.sampling", base.sampling)?;
    let scale = match cfg.get_str("train.lr_scale").unwrap_or("fixed") {
        "fixed" | "none" => LrScale::Fixed,
        "width" => LrScale::Width,
        other => return Err(Error::config(format!("unknown train.lr_scale `{other}`"))),
    };
    Ok((base, scale))
}

/// Reads the `prune.*` keys; `head`/`criterion` feed the head-output loss.
pub fn prune_config_from(cfg: &Config, head: OutputHead, criterion: Criterion) -> Result<PruneConfig> {
    let mut p = PruneConfig::new(cfg.get_or("prune.iterations", 200)?);
    p.selection = match cfg.get_str("prune.selection").unwrap_or("full") {
        "full" => SelectionBatch::Full,
        "minibatch" => SelectionBatch::Minibatch {
            size: cfg.require("prune.batch")?,
            seed: 0,
        },
        other => return Err(Error::config(format!("unknown prune.selection `{other}`"))),
    };
    p.loss = match cfg.get_str("prune.loss").unwrap_or("polytope") {
        "polytope" => SelectionLoss::Polytope,
        "head" => SelectionLoss::Head(head, criterion),
        other => return Err(Error::config(format!("unknown prune.loss `{other}`"))),
    };
    p.scoring = match cfg.get_str("prune.scoring").unwrap_or("direct") {
        "direct" => Scoring::Direct,
        "incremental" => Scoring::Incremental,
        other => return Err(Error::config(format!("unknown prune.scoring `{other}`"))),
    };
    p.validate()?;
    Ok(p)
}

impl SweepConfig {
    pub fn from_config(cfg: &Config, base: Option<&std::path::Path>) -> Result<Self> {
        let allowed: Vec<&str> = SWEEP_KEYS.iter().chain(DATA_KEYS).copied().collect();
        cfg.check_keys(&allowed)?;
        let mut cfg = cfg.clone();
        for (key, value) in SWEEP_DEFAULTS {
            if !cfg.contains(key) {
                cfg.set(key, value);
            }
        }
        let cfg = &cfg;
        let activation = cfg.get_or("activation", ActivationKind::Relu)?;
        let head = cfg.get_or("head", OutputHead::Sigmoid)?;
        let (train, lr_scale) = train_config_from(cfg, TrainConfig::empirical(0, 1.0, 0))?;
        let prune = prune_config_from(cfg, head, train.criterion)?;
        let sc = SweepConfig {
            data: DataSpec::from_config(cfg, base)?,
            sub_sizes: cfg.get_list("sizes")?.unwrap_or_else(|| vec![256, 1024, 4096]),
            widths: cfg.get_list("widths")?.unwrap_or_else(|| vec![512]),
            trials: cfg.get_or("trials", 3)?,
            checkpoint_every: cfg.get_or("checkpoint_every", 250)?,
            total_iterations: cfg.get_or("iterations", 2000)?,
            prune,
            train,
            lr_scale,
            activation,
            head,
            base_seed: cfg.get_or("seed", 0)?,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_sizes.is_empty() || self.sub_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sizes must be non-empty and strictly ascending"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("widths must be non-empty and positive"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be >= 1"));
        }
        self.prune.validate()
    }

    /// `0, every, 2·every, …`, always ending at the total.
    pub fn checkpoints(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = (0..=self.total_iterations).step_by(self.checkpoint_every).collect();
        if ts.last() != Some(&self.total_iterations) {
            ts.push(self.total_iterations);
        }
        ts
    }

    fn learning_rate(&self, width: usize) -> f64 {
        match self.lr_scale {
            LrScale::Fixed => self.train.learning_rate,
            LrScale::Width => self.train.learning_rate * width as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub m: usize,
    pub t: usize,
    pub width: usize,
    pub trial: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellValue {
    /// Pruned-network training accuracy over the whole sub-dataset.
    pub accuracy: f64,
    /// Pruned-network training loss under the training criterion.
    pub loss: f64,
    pub dense_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub cells: BTreeMap<CellKey, CellValue>,
}

impl SweepGrid {
    pub fn insert(&mut self, key: CellKey, value: CellValue) {
        self.cells.insert(key, value);
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Long form `m,t,N,trial,accuracy,loss`, rows sorted by key.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,t,N,trial,accuracy,loss\n");
        for (k, v) in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{:.16e},{:.16e}", k.m, k.t, k.width, k.trial, v.accuracy, v.loss);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format {
            what: "sweep csv",
            detail: format!("cannot parse `{line}`"),
        };
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "m,t,N,trial,accuracy,loss" => {}
            other => return Err(bad(other.unwrap_or(""))),
        }
        let mut grid = SweepGrid::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            let float = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            grid.insert(
                CellKey {
                    m: int(f[0])?,
                    t: int(f[1])?,
                    width: int(f[2])?,
                    trial: int(f[3])?,
                },
                CellValue {
                    accuracy: float(f[4])?,
                    loss: float(f[5])?,
                    dense_loss: f64::NAN,
                },
            );
        }
        Ok(grid)
    }

    /// Trial-averaged accuracy per checkpoint for one `(m, N)` row.
    pub fn mean_accuracy(&self, m: usize, width: usize) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (k, v) in self.cells.iter().filter(|(k, _)| k.m == m && k.width == width) {
            let e = acc.entry(k.t).or_insert((0.0, 0));
            e.0 += v.accuracy;
            e.1 += 1;
        }
        acc.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect()
    }

    fn rows(&self) -> Vec<(usize, usize)> {
        let mut rows: Vec<(usize, usize)> = self.cells.keys().map(|k| (k.m, k.width)).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

/// How the per-row accuracy target is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetRule {
    /// A fraction of the row's own final trial-averaged accuracy.
    FractionOfFinal(f64),
    /// The best trial-averaged accuracy reached on the largest dataset size
    /// of the same width.
    BestFullDataset,
    Absolute(f64),
}

impl std::str::FromStr for TargetRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "best_full" {
            return Ok(TargetRule::BestFullDataset);
        }
        let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::config(format!("bad target rule `{s}`")));
        if let Some(v) = s.strip_prefix("fraction:") {
            return Ok(TargetRule::FractionOfFinal(parse(v)?));
        }
        if let Some(v) = s.strip_prefix("absolute:") {
            return Ok(TargetRule::Absolute(parse(v)?));
        }
        Err(Error::config(format!("bad target rule `{s}` (fraction:<f>, absolute:<a> or best_full)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    pub m: usize,
    pub width: usize,
    pub target: f64,
    /// First checkpoint whose averaged accuracy reaches the target.
    pub threshold: Option<usize>,
}

/// For every `(m, N)` row, the smallest checkpoint whose trial-averaged pruned
/// accuracy reaches the target.
pub fn threshold_trace(grid: &SweepGrid, rule: TargetRule) -> Result<Vec<ThresholdRow>> {
    if grid.is_empty() {
        return Err(Error::config("threshold trace needs a non-empty grid"));
    }
    let rows = grid.rows();
    let mut out = Vec::with_capacity(rows.len());
    for &(m, width) in &rows {
        let curve = grid.mean_accuracy(m, width);
        let target = match rule {
            TargetRule::FractionOfFinal(f) => f * curve.last().map(|c| c.1).unwrap_or(0.0),
            TargetRule::Absolute(a) => a,
            TargetRule::BestFullDataset => {
                let largest = rows.iter().filter(|r| r.1 == width).map(|r| r.0).max().unwrap_or(m);
                grid.mean_accuracy(largest, width)
                    .iter()
                    .map(|c| c.1)
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        };
        let threshold = curve.iter().find(|c| c.1 >= target).map(|c| c.0);
        out.push(ThresholdRow {
            m,
            width,
            target,
            threshold,
        });
    }
    Ok(out)
}

pub fn thresholds_to_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("m,N,target,threshold\n");
    for r in rows {
        let t = r.threshold.map(|t| t.to_string()).unwrap_or_else(|| "never".into());
        let _ = writeln!(out, "{},{},{:.16e},{t}", r.m, r.width, r.target);
    }
    out
}

/// Pairs `i < j` with `threshold_i > threshold_j`; "never" counts as infinite.
pub fn count_inversions(thresholds: &[Option<usize>]) -> usize {
    let key = |t: &Option<usize>| t.unwrap_or(usize::MAX);
    let mut n = 0;
    for i in 0..thresholds.len() {
        for j in i + 1..thresholds.len() {
            if key(&thresholds[i]) > key(&thresholds[j]) {
                n += 1;
            }
        }
    }
    n
}

/// Seed of the sub-dataset draw; shared by all widths so they see the same data.
fn data_seed(base: u64, m: usize, trial: usize) -> u64 {
    derive_seed(&[base, 0x5eed_da7a, m as u64, trial as u64])
}

/// Seed driving everything inside one cell's pruning step.
pub fn cell_seed(base: u64, m: usize, width: usize, trial: usize, checkpoint: usize) -> u64 {
    derive_seed(&[base, m as u64, width as u64, trial as u64, checkpoint as u64])
}

fn run_seed(base: u64, m: usize, width: usize, trial: usize, purpose: u64) -> u64 {
    derive_seed(&[base, 0x7a1d, m as u64, width as u64, trial as u64, purpose])
}

fn prune_snapshot(
    cfg: &SweepConfig,
    trainer: &Trainer,
    ds: &Dataset,
    key: CellKey,
) -> Result<CellValue> {
    let net = trainer.net().clone();
    let mut prune = cfg.prune;
    if let SelectionBatch::Minibatch { size, .. } = prune.selection {
        prune.selection = SelectionBatch::Minibatch {
            size,
            seed: cell_seed(cfg.base_seed, key.m, key.width, key.trial, key.t),
        };
    }
    let (_, s) = greedy_forward_selection(&net, ds, &prune)?;
    let acc = if ds.is_binary() {
        accuracy(&net, Some(&s), ds)?
    } else {
        f64::NAN
    };
    Ok(CellValue {
        accuracy: acc,
        loss: pruned_loss(&net, &s, ds, cfg.train.criterion)?,
        dense_loss: dataset_loss(&net, ds, cfg.train.criterion)?,
    })
}

fn run_one(cfg: &SweepConfig, pool: &Dataset, m: usize, width: usize, trial: usize, only: Option<usize>) -> Result<Vec<(CellKey, CellValue)>> {
    let wrap = |t: usize| {
        move |e: Error| Error::Cell {
            m,
            width,
            trial,
            checkpoint: t,
            source: Box::new(e),
        }
    };
    let ds = cfg.data.subset(pool, m, data_seed(cfg.base_seed, m, trial)).map_err(wrap(0))?;
    if (width as u128) * (ds.dim() as u128) <= (m as u128) * (m as u128) {
        warn!("N·d = {} does not exceed m² = {} (m={m}, N={width})", width * ds.dim(), m * m);
    }
    let net = init_weights(width, ds.dim(), run_seed(cfg.base_seed, m, width, trial, 0), cfg.activation, cfg.head)
        .map_err(wrap(0))?;
    let mut tc = cfg.train.clone();
    tc.iterations = cfg.total_iterations;
    tc.seed = run_seed(cfg.base_seed, m, width, trial, 1);
    tc.learning_rate = cfg.learning_rate(width);
    tc.batch_size = tc.batch_size.min(ds.len());
    let mut trainer = Trainer::new(net, &ds, tc).map_err(wrap(0))?;
    let mut out = Vec::new();
    for t in cfg.checkpoints() {
        if only.is_some_and(|o| o < t) {
            break;
        }
        while trainer.iteration() < t {
            trainer.step().map_err(wrap(t))?;
        }
        if only.is_none_or(|o| o == t) {
            let key = CellKey { m, t, width, trial };
            out.push((key, prune_snapshot(cfg, &trainer, &ds, key).map_err(wrap(t))?));
        }
    }
    info!("sweep run m={m} N={width} trial={trial} done");
    Ok(out)
}

/// Runs the whole grid on `threads` workers (all cores when `None`). The
/// result does not depend on the thread count.
pub fn run_sweep(cfg: &SweepConfig, threads: Option<usize>) -> Result<SweepGrid> {
    cfg.validate()?;
    let pool = cfg.data.load_pool()?;
    if let Some(&m) = cfg.sub_sizes.iter().find(|&&m| m > pool.len()) {
        return Err(Error::config(format!("sub-dataset size {m} exceeds the pool of {}", pool.len())));
    }
    let mut runs = Vec::new();
    for &m in &cfg.sub_sizes {
        for &w in &cfg.widths {
            for trial in 0..cfg.trials {
                runs.push((m, w, trial));
            }
        }
    }
    let exec = || -> Result<Vec<Vec<(CellKey, CellValue)>>> {
        runs.par_iter()
            .map(|&(m, w, trial)| run_one(cfg, &pool, m, w, trial, None))
            .collect()
    };
    let results = with_threads(threads, exec)?;
    let mut grid = SweepGrid::default();
    for (k, v) in results.into_iter().flatten() {
        grid.insert(k, v);
    }
    Ok(grid)
}

/// Recomputes one cell from scratch.
pub fn run_cell(cfg: &SweepConfig, key: CellKey) -> Result<CellValue> {
    let pool = cfg.data.load_pool()?;
    let cells = run_one(cfg, &pool, key.m, key.width, key.trial, Some(key.t))?;
    cells
        .into_iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::config(format!("checkpoint {} is not on the grid", key.t)))
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Default-parameter constructor used by the acceptance suite and tests.
pub fn desk_sweep(data: DataSpec, sizes: Vec<usize>, width: usize, trials: usize) -> SweepConfig {
    let train = TrainConfig::empirical(0, 0.1, 0);
    let mut prune = PruneConfig::new(200);
    prune.loss = SelectionLoss::Head(OutputHead::Sigmoid, Criterion::Bce);
    prune.selection = SelectionBatch::Minibatch { size: 128, seed: 0 };
    SweepConfig {
        data,
        sub_sizes: sizes,
        widths: vec![width],
        trials,
        checkpoint_every: 250,
        total_iterations: 2000,
        prune,
        train,
        lr_scale: LrScale::Width,
        activation: ActivationKind::Relu,
        head: OutputHead::Sigmoid,
        base_seed: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;

    fn step_grid() -> SweepGrid {
        let mut g = SweepGrid::default();
        for m in [1, 2, 3] {
            for t in 0..6 {
                g.insert(
                    CellKey { m, t, width: 8, trial: 0 },
                    CellValue {
                        accuracy: if t >= 3 { 1.0 } else { 0.0 },
                        loss: 0.0,
                        dense_loss: 0.0,
                    },
                );
            }
        }
        g
    }

    #[test]
    fn step_function_thresholds() {
        let rows = threshold_trace(&step_grid(), TargetRule::FractionOfFinal(0.95)).unwrap();
        assert!(rows.iter().all(|r| r.threshold == Some(3)));
        let rows = threshold_trace(&step_grid(), TargetRule::BestFullDataset).unwrap();
        assert!(rows.iter().all(|r| r.threshold == Some(3)));
    }

    #[test]
    fn ramp_thresholds_equal_m() {
        let mut g = SweepGrid::default();
        for m in [2usize, 4, 8] {
            for t in 0..=10 {
                let acc = (t as f64 / m as f64).min(1.0);
                g.insert(CellKey { m, t, width: 1, trial: 0 }, CellValue { accuracy: acc, loss: 0.0, dense_loss: 0.0 });
            }
        }
        let rows = threshold_trace(&g, TargetRule::Absolute(1.0)).unwrap();
        let th: Vec<Option<usize>> = rows.iter().map(|r| r.threshold).collect();
        assert_eq!(th, vec![Some(2), Some(4), Some(8)]);
        assert_eq!(count_inversions(&th), 0);
    }

    #[test]
    fn raising_the_target_never_lowers_thresholds() {
        let g = step_grid();
        let mut prev = vec![Some(0); 3];
        for a in [0.0, 0.3, 0.9, 1.0, 1.1] {
            let rows = threshold_trace(&g, TargetRule::Absolute(a)).unwrap();
            for (p, r) in prev.iter().zip(&rows) {
                assert!(p.unwrap_or(usize::MAX) <= r.threshold.unwrap_or(usize::MAX));
            }
            prev = rows.iter().map(|r| r.threshold).collect();
        }
        assert!(thresholds_to_csv(&threshold_trace(&g, TargetRule::Absolute(2.0)).unwrap()).contains("never"));
    }

    #[test]
    fn inversions_are_pairwise() {
        assert_eq!(count_inversions(&[Some(1), Some(3), Some(2)]), 1);
        assert_eq!(count_inversions(&[None, Some(3), Some(2)]), 3);
        assert!(threshold_trace(&SweepGrid::default(), TargetRule::BestFullDataset).is_err());
    }

    fn tiny() -> SweepConfig {
        let mut c = desk_sweep(DataSpec::synthetic(64, 4, 1, SyntheticTask::Binary), vec![16, 32], 24, 1);
        c.checkpoint_every = 10;
        c.total_iterations = 20;
        c.prune.iterations = 5;
        c.train.batch_size = 8;
        c.train.learning_rate = 0.05;
        c
    }

    #[test]
    fn grid_has_every_cell_and_is_deterministic() {
        let cfg = tiny();
        let a = run_sweep(&cfg, Some(1)).unwrap();
        assert_eq!(a.len(), 2 * 3);
        let b = run_sweep(&cfg, Some(3)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        let key = CellKey { m: 32, t: 10, width: 24, trial: 0 };
        assert_eq!(run_cell(&cfg, key).unwrap(), a.cells[&key]);
        assert_eq!(SweepGrid::from_csv(&a.to_csv()).unwrap().to_csv(), a.to_csv());
    }

    #[test]
    fn config_roundtrip() {
        let text = "sizes = 16, 32\nwidths = 24\ntrials = 1\niterations = 20\ncheckpoint_every = 10\n\
                    data.pool = 64\ndata.d = 4\nprune.iterations = 5\nprune.loss = head\ntrain.lr = 0.05\ntrain.batch = 8";
        let cfg = SweepConfig::from_config(&Config::parse(text).unwrap(), None).unwrap();
        assert_eq!(cfg.checkpoints(), vec![0, 10, 20]);
        assert!(SweepConfig::from_config(&Config::parse("sizes = 4, 2").unwrap(), None).is_err());
        assert!(SweepConfig::from_config(&Config::parse("bogus = 1").unwrap(), None).is_err());
    }
}
