//! Central-difference check of the analytic batch gradient.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{ActivationKind, Criterion, OutputHead, TwoLayerNet};
use crate::seed::derive_seed;
use crate::training::init_weights;

pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of the relative error. Near-zero derivatives carry
/// about `1e-10` of central-difference roundoff, which would otherwise be
/// divided by something tiny.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckRow {
    pub pair: usize,
    pub activation: ActivationKind,
    pub criterion: Criterion,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    /// `pair,activation,criterion,index,analytic,numeric,rel_error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,activation,criterion,index,analytic,numeric,rel_error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.16e},{:.16e},{:.6e}",
                r.pair,
                r.activation.name(),
                r.criterion.name(),
                r.index,
                r.analytic,
                r.numeric,
                r.rel_error
            );
        }
        out
    }
}

/// Checks `coords` sampled coordinates of one net on one batch.
pub fn check_gradient(
    net: &TwoLayerNet,
    x: &Array2<f64>,
    y: &[f64],
    criterion: Criterion,
    coords: usize,
    seed: u64,
) -> Result<Vec<(usize, f64, f64)>> {
    let grad = net.gradient(x.view(), y, criterion)?;
    let total = net.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, total, coords.min(total)).into_vec();
    idx.sort_unstable();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(idx.len());
    for i in idx {
        let w = net.param(i);
        probe.set_param(i, w + FD_STEP);
        let up = probe.batch_loss(x.view(), y, criterion)?;
        probe.set_param(i, w - FD_STEP);
        let down = probe.batch_loss(x.view(), y, criterion)?;
        probe.set_param(i, w);
        out.push((i, grad.get(i), (up - down) / (2.0 * FD_STEP)));
    }
    Ok(out)
}

/// `pairs` random (net, batch) pairs cycling through sigmoid/tanh × l2/bce.
pub fn run_gradcheck(pairs: usize, coords: usize, seed: u64) -> Result<GradcheckReport> {
    let combos = [
        (ActivationKind::Sigmoid, Criterion::L2),
        (ActivationKind::Tanh, Criterion::L2),
        (ActivationKind::Sigmoid, Criterion::Bce),
        (ActivationKind::Tanh, Criterion::Bce),
    ];
    let mut report = GradcheckReport::default();
    for pair in 0..pairs {
        let (activation, criterion) = combos[pair % combos.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, pair as u64]));
        let width = rng.random_range(1..=24);
        let dim = rng.random_range(1..=10);
        let batch = rng.random_range(1..=16);
        // alternate heads under l2 so both branches are exercised
        let head = if criterion == Criterion::Bce || pair % 8 < 4 {
            OutputHead::Sigmoid
        } else {
            OutputHead::Linear
        };
        let net = init_weights(width, dim, rng.random(), activation, head)?;
        let x = Array2::from_shape_simple_fn((batch, dim), || rng.sample::<f64, _>(StandardNormal) / (dim as f64).sqrt());
        let y: Vec<f64> = (0..batch)
            .map(|_| match criterion {
                Criterion::Bce => f64::from(rng.random_bool(0.5)),
                Criterion::L2 => rng.random_range(-1.0..1.0),
            })
            .collect();
        for (index, analytic, numeric) in check_gradient(&net, &x, &y, criterion, coords, rng.random())? {
            report.rows.push(GradcheckRow {
                pair,
                activation,
                criterion,
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(report)
}
