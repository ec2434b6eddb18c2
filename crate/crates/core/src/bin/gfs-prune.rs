use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfs_prune::data::Dataset;
use gfs_prune::harness::bound_report::{run_bound_report, BoundConfig};
use gfs_prune::harness::config::Config;
use gfs_prune::harness::gradcheck::run_gradcheck;
use gfs_prune::harness::membership::{run_membership_experiment, MembershipConfig};
use gfs_prune::harness::source::{DataSpec, DATA_KEYS};
use gfs_prune::harness::sweep::{
    prune_config_from, run_sweep, threshold_trace, thresholds_to_csv, train_config_from, with_threads, LrScale,
    SweepConfig, SweepGrid, TargetRule,
};
use gfs_prune::model::{ActivationKind, OutputHead, TwoLayerNet};
use gfs_prune::pruning::greedy_forward_selection;
use gfs_prune::seed::derive_seed;
use gfs_prune::training::{init_weights, train, TrainConfig};
use gfs_prune::{Error, Result};

/// Greedy forward selection pruning experiments. All outputs are CSV.
#[derive(Parser)]
#[command(name = "gfs-prune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset-size × pre-training grid (`m,t,N,trial,accuracy,loss`).
    Sweep(Common),
    /// First checkpoint reaching the target accuracy per row of a sweep grid.
    Trace {
        /// Grid CSV written by `sweep`.
        grid: PathBuf,
        /// `fraction:<f>`, `absolute:<a>` or `best_full`.
        #[arg(long, default_value = "fraction:0.95")]
        rule: String,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Per-epoch classification membership of the label vector.
    Membership {
        #[command(flatten)]
        common: Common,
        /// Also write the first-epoch summary here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Observed greedy losses next to both subnetwork bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Also write the training trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a dense network and print its loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Save the trained weights here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Greedy forward selection on a saved network.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Weights written by `train --save`.
        #[arg(long)]
        net: PathBuf,
        /// Also write the selected multiset (`index,count`) here.
        #[arg(long)]
        multiset: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

const TRAIN_KEYS: &[&str] = &[
    "N",
    "activation",
    "head",
    "iterations",
    "record_every",
    "seed",
    "train.lr",
    "train.lr_scale",
    "train.batch",
    "train.momentum",
    "train.weight_decay",
    "train.criterion",
    "train.sampling",
];

const PRUNE_KEYS: &[&str] = &["prune.iterations", "prune.selection", "prune.batch", "prune.loss", "prune.scoring", "train.criterion"];

fn load_config(common: &Common) -> Result<(Config, Option<PathBuf>)> {
    let (mut cfg, base) = match &common.config {
        Some(p) => (Config::load(p)?, p.parent().map(Path::to_path_buf)),
        None => (Config::default(), None),
    };
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    Ok((cfg, base))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn allowed(groups: &[&[&'static str]]) -> Vec<&'static str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn train_dataset(cfg: &Config, base: Option<&Path>) -> Result<Dataset> {
    DataSpec::from_config(cfg, base)?.load_pool()
}

fn run_train(common: &Common, save: Option<&Path>) -> Result<()> {
    let (cfg, base) = load_config(common)?;
    cfg.check_keys(&allowed(&[TRAIN_KEYS, DATA_KEYS]))?;
    let ds = train_dataset(&cfg, base.as_deref())?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let width: usize = cfg.get_or("N", 256)?;
    let (mut tc, scale) = train_config_from(&cfg, TrainConfig::theory(cfg.get_or("iterations", 1000)?, 0.5, seed))?;
    tc.record_every = cfg.get_or("record_every", tc.record_every)?;
    tc.seed = derive_seed(&[seed, 2]);
    if scale == LrScale::Width {
        tc.learning_rate *= width as f64;
    }
    let net = init_weights(
        width,
        ds.dim(),
        derive_seed(&[seed, 1]),
        cfg.get_or("activation", ActivationKind::Sigmoid)?,
        cfg.get_or("head", OutputHead::Linear)?,
    )?;
    let trace = train(net, &ds, &tc)?;
    if let Some(p) = save {
        trace.net.save(p)?;
    }
    emit(common.out.as_deref(), &trace.to_csv())
}

fn run_prune(common: &Common, net_path: &Path, multiset: Option<&Path>) -> Result<()> {
    let (cfg, base) = load_config(common)?;
    cfg.check_keys(&allowed(&[PRUNE_KEYS, DATA_KEYS]))?;
    let net = TwoLayerNet::load(net_path)?;
    let ds = train_dataset(&cfg, base.as_deref())?;
    let criterion = cfg.get_or("train.criterion", gfs_prune::model::Criterion::L2)?;
    let mut prune = prune_config_from(&cfg, net.head(), criterion)?;
    if let gfs_prune::pruning::SelectionBatch::Minibatch { size, .. } = prune.selection {
        prune.selection = gfs_prune::pruning::SelectionBatch::Minibatch {
            size,
            seed: cfg.get_or("seed", 0)?,
        };
    }
    let threads = common.threads;
    let (state, counts) = with_threads(threads, || greedy_forward_selection(&net, &ds, &prune))?;
    if let Some(p) = multiset {
        std::fs::write(p, counts.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    emit(common.out.as_deref(), &state.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sweep(common) => {
            let (cfg, base) = load_config(&common)?;
            let sc = SweepConfig::from_config(&cfg, base.as_deref())?;
            let grid = run_sweep(&sc, common.threads)?;
            emit(common.out.as_deref(), &grid.to_csv())
        }
        Command::Trace { grid, rule, out } => {
            let rule = rule.parse::<TargetRule>()?;
            let text = std::fs::read_to_string(&grid).map_err(|e| Error::io(&grid, e))?;
            let rows = threshold_trace(&SweepGrid::from_csv(&text)?, rule)?;
            emit(out.as_deref(), &thresholds_to_csv(&rows))
        }
        Command::Membership { common, summary } => {
            let (cfg, base) = load_config(&common)?;
            let mc = MembershipConfig::from_config(&cfg, base.as_deref())?;
            let table = run_membership_experiment(&mc, common.threads)?;
            if let Some(p) = summary {
                std::fs::write(&p, table.summary_csv()).map_err(|e| Error::io(&p, e))?;
            }
            emit(common.out.as_deref(), &table.to_csv())
        }
        Command::Bounds { common, trace } => {
            let (cfg, base) = load_config(&common)?;
            let bc = BoundConfig::from_config(&cfg, base.as_deref())?;
            let report = with_threads(common.threads, || run_bound_report(&bc))?;
            if let Some(p) = trace {
                std::fs::write(&p, &report.trace_csv).map_err(|e| Error::io(&p, e))?;
            }
            emit(common.out.as_deref(), &report.csv)
        }
        Command::Train { common, save } => run_train(&common, save.as_deref()),
        Command::Prune { common, net, multiset } => run_prune(&common, &net, multiset.as_deref()),
        Command::Gradcheck { pairs, coords, seed, out } => {
            let report = run_gradcheck(pairs, coords, seed)?;
            emit(out.as_deref(), &report.to_csv())?;
            let worst = report.max_rel_error();
            if worst >= 1e-5 {
                eprintln!("gradient check failed: max relative error {worst:e}");
                std::process::exit(2);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
