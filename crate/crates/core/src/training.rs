//! Mini-batch SGD / full-batch GD for [`TwoLayerNet`], with loss traces and
//! geometric decay-rate fits.

use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bounds::RateMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy, dataset_loss, ActivationKind, Criterion, Gradient, OutputHead, TwoLayerNet};

/// Losses above this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// All weights i.i.d. standard normal from a seeded generator.
pub fn init_weights(
    width: usize,
    dim: usize,
    seed: u64,
    activation: ActivationKind,
    head: OutputHead,
) -> Result<TwoLayerNet> {
    if width == 0 || dim == 0 {
        return Err(Error::config(format!("init needs N, d >= 1 (got {width}, {dim})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = Array1::from_shape_simple_fn(width, || rng.sample(StandardNormal));
    let inner = Array2::from_shape_simple_fn((width, dim), || rng.sample(StandardNormal));
    TwoLayerNet::new(outer, inner, activation, head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Seeded permutation per epoch, consumed in consecutive batches.
    Shuffle,
    /// Every batch drawn i.i.d. uniformly with replacement.
    WithReplacement,
}

impl FromStr for Sampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(Sampling::Shuffle),
            "replacement" | "with_replacement" => Ok(Sampling::WithReplacement),
            other => Err(Error::config(format!("unknown sampling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub criterion: Criterion,
    pub record_every: usize,
    pub sampling: Sampling,
}

impl TrainConfig {
    /// Plain single-example SGD on the squared loss.
    pub fn theory(iterations: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            iterations,
            learning_rate,
            batch_size: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed,
            criterion: Criterion::L2,
            record_every: (iterations / 50).max(1),
            sampling: Sampling::Shuffle,
        }
    }

    /// Batch 128, momentum 0.9, cross-entropy on a sigmoid head.
    pub fn empirical(iterations: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            iterations,
            learning_rate,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
            criterion: Criterion::Bce,
            record_every: 1000,
            sampling: Sampling::Shuffle,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.batch_size > m {
            return Err(Error::config(format!("batch size {} must lie in [1, {m}]", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        if self.record_every == 0 {
            return Err(Error::config("record_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub checkpoints: Vec<TracePoint>,
    /// Full-dataset loss before the first step.
    pub initial_loss: f64,
    pub net: TwoLayerNet,
}

impl TrainTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| c.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,accuracy\n");
        for c in &self.checkpoints {
            let acc = c.accuracy.map(|a| format!("{a:.16e}")).unwrap_or_default();
            out.push_str(&format!("{},{:.16e},{acc}\n", c.iteration, c.loss));
        }
        out
    }
}

/// Stateful trainer that owns the network; lets callers interleave steps with
/// inspection (sweep checkpoints, per-epoch membership checks).
pub struct Trainer<'a> {
    ds: &'a Dataset,
    net: TwoLayerNet,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    velocity: Gradient,
    iteration: usize,
    binary: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(net: TwoLayerNet, ds: &'a Dataset, cfg: TrainConfig) -> Result<Self> {
        if net.dim() != ds.dim() {
            return Err(Error::DimensionMismatch {
                what: "input dimension",
                expected: net.dim(),
                actual: ds.dim(),
            });
        }
        cfg.validate(ds.len())?;
        if cfg.criterion == Criterion::Bce {
            if net.head() != OutputHead::Sigmoid {
                return Err(Error::config("bce requires the sigmoid output head"));
            }
            ds.check_binary()?;
        }
        let velocity = Gradient::zeros(net.width(), net.dim());
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: (0..ds.len()).collect(),
            cursor: ds.len(),
            velocity,
            iteration: 0,
            binary: ds.is_binary(),
            ds,
            net,
            cfg,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn net(&self) -> &TwoLayerNet {
        &self.net
    }

    pub fn into_net(self) -> TwoLayerNet {
        self.net
    }

    /// Steps per pass over the data.
    pub fn epoch_len(&self) -> usize {
        self.ds.len().div_ceil(self.cfg.batch_size)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let m = self.ds.len();
        let b = self.cfg.batch_size;
        match self.cfg.sampling {
            Sampling::WithReplacement => (0..b).map(|_| self.rng.random_range(0..m)).collect(),
            Sampling::Shuffle => {
                if self.cursor >= m {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + b).min(m);
                let rows = self.order[self.cursor..end].to_vec();
                self.cursor = end;
                rows
            }
        }
    }

    pub fn step(&mut self) -> Result<()> {
        let rows = self.next_batch();
        let grad = if rows.len() == self.ds.len() && self.cfg.sampling == Sampling::Shuffle {
            // full batch: row order does not change the mean gradient
            self.net
                .gradient(self.ds.features().view(), self.ds.labels(), self.cfg.criterion)?
        } else {
            let x = self.ds.features().select(Axis(0), &rows);
            let y: Vec<f64> = rows.iter().map(|&r| self.ds.labels()[r]).collect();
            self.net.gradient(x.view(), &y, self.cfg.criterion)?
        };
        let wd = self.cfg.weight_decay;
        let mu = self.cfg.momentum;
        if mu == 0.0 && wd == 0.0 {
            // plain SGD: skip the velocity buffer, which dominates the cost of
            // small batches on wide nets
            self.net.apply_update(&grad, self.cfg.learning_rate);
        } else {
            let v = &mut self.velocity;
            v.outer *= mu;
            v.outer += &grad.outer;
            v.inner *= mu;
            v.inner += &grad.inner;
            if wd > 0.0 {
                v.outer.scaled_add(wd, self.net.outer());
                v.inner.scaled_add(wd, self.net.inner());
            }
            self.net.apply_update(&self.velocity, self.cfg.learning_rate);
        }
        self.iteration += 1;
        // a non-finite inner weight reaches the outer gradient one step later
        if !(grad.outer.iter().all(|g| g.is_finite()) && self.net.outer().iter().all(|w| w.is_finite())) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                loss: f64::NAN,
            });
        }
        Ok(())
    }

    pub fn full_loss(&self) -> Result<f64> {
        dataset_loss(&self.net, self.ds, self.cfg.criterion)
    }

    pub fn record(&self) -> Result<TracePoint> {
        let loss = self.full_loss()?;
        if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT || !self.net.all_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                loss,
            });
        }
        let accuracy = if self.binary {
            Some(accuracy(&self.net, None, self.ds)?)
        } else {
            None
        };
        Ok(TracePoint {
            iteration: self.iteration,
            loss,
            accuracy,
        })
    }
}

/// Runs `cfg.iterations` steps, recording at 0, every `record_every` and at the end.
pub fn train(net: TwoLayerNet, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    let mut trainer = Trainer::new(net, ds, cfg.clone())?;
    let mut checkpoints = vec![trainer.record()?];
    while trainer.iteration() < cfg.iterations {
        trainer.step()?;
        let t = trainer.iteration();
        if t % cfg.record_every == 0 || t == cfg.iterations {
            checkpoints.push(trainer.record()?);
        }
    }
    Ok(TrainTrace {
        initial_loss: checkpoints[0].loss,
        checkpoints,
        net: trainer.into_net(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// Per-iteration geometric factor in (0, 1].
    pub rho: f64,
    /// Least-squares slope of ln(loss) against iteration.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ a + b x`; returns `(b, a, R²)`.
pub(crate) fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 && sxx > 0.0 {
        (sxy * sxy) / (sxx * syy)
    } else {
        1.0
    };
    (slope, my - slope * mx, r2)
}

/// Fits `loss_t ≈ A ρ^t` to `(iteration, loss)` pairs.
pub fn fit_decay_series(points: &[(f64, f64)]) -> Result<DecayFit> {
    if points.len() < 3 {
        return Err(Error::config(format!("decay fit needs >= 3 points, got {}", points.len())));
    }
    if let Some(i) = points.iter().position(|p| !(p.1 > 0.0)) {
        return Err(Error::NonPositiveLoss {
            index: i,
            value: points[i].1,
        });
    }
    let x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&x, &y);
    let rho = slope.exp().clamp(f64::MIN_POSITIVE, 1.0);
    Ok(DecayFit {
        rho,
        slope,
        intercept,
        r_squared,
    })
}

pub fn fit_decay_rate(trace: &TrainTrace) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = trace
        .checkpoints
        .iter()
        .map(|c| (c.iteration as f64, c.loss))
        .collect();
    fit_decay_series(&pts)
}

/// Inverts `ρ = 1 − c d/m²` (sgd) or `ρ = 1 − c d/m` (gd).
pub fn estimate_c(rho: f64, m: usize, d: usize, mode: RateMode) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::RateOutOfRange(rho));
    }
    let m = m as f64;
    let scale = match mode {
        RateMode::Sgd => m * m,
        RateMode::Gd => m,
    };
    Ok((1.0 - rho) * scale / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::sgd_threshold;
    use crate::data::{make_synthetic, SyntheticTask};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn init_is_seeded_standard_normal() {
        let a = init_weights(300, 400, 5, ActivationKind::Sigmoid, OutputHead::Linear).unwrap();
        let b = init_weights(300, 400, 5, ActivationKind::Sigmoid, OutputHead::Linear).unwrap();
        assert_eq!(a, b);
        let all: Vec<f64> = a.outer().iter().chain(a.inner().iter()).copied().collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let ds = make_synthetic(20, 4, 1, SyntheticTask::Regression).unwrap();
        let net = init_weights(8, 4, 2, ActivationKind::Tanh, OutputHead::Linear).unwrap();
        let mut cfg = TrainConfig::theory(30, 0.0, 3);
        cfg.record_every = 10;
        let trace = train(net.clone(), &ds, &cfg).unwrap();
        assert_eq!(trace.net, net);
        let losses = trace.losses();
        assert!(losses.iter().all(|&l| l == losses[0]));
        assert_eq!(trace.initial_loss, losses[0]);
        let iters: Vec<usize> = trace.checkpoints.iter().map(|c| c.iteration).collect();
        assert_eq!(iters, vec![0, 10, 20, 30]);
    }

    /// Single-example step written out by hand for one neuron, checked
    /// separately against finite differences.
    fn reference_step(b: f64, a: &[f64], x: &[f64], y: f64, lr: f64) -> (f64, Vec<f64>) {
        let h: f64 = a.iter().zip(x).map(|(p, q)| p * q).sum();
        let s = 1.0 / (1.0 + (-h).exp());
        let r = b * s - y;
        let gb = r * s;
        let ga: Vec<f64> = x.iter().map(|xi| r * b * s * (1.0 - s) * xi).collect();
        (b - lr * gb, a.iter().zip(&ga).map(|(p, g)| p - lr * g).collect())
    }

    #[test]
    fn reference_step_matches_finite_differences() {
        let (b, a, x, y) = (0.7, [0.3, -0.2], [0.6, 0.8], 1.0);
        let loss = |b: f64, a: &[f64]| {
            let h: f64 = a.iter().zip(&x).map(|(p, q)| p * q).sum();
            0.5 * (b / (1.0 + (-h).exp()) - y).powi(2)
        };
        let lr = 1.0;
        let (nb, na) = reference_step(b, &a, &x, y, lr);
        let eps = 1e-6;
        let fd_b = (loss(b + eps, &a) - loss(b - eps, &a)) / (2.0 * eps);
        assert_abs_diff_eq!(b - nb, fd_b, epsilon = 1e-9);
        for k in 0..2 {
            let mut ap = a;
            let mut am = a;
            ap[k] += eps;
            am[k] -= eps;
            let fd = (loss(b, &ap) - loss(b, &am)) / (2.0 * eps);
            assert_abs_diff_eq!(a[k] - na[k], fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn single_example_loss_decreases_and_matches_reference() {
        let ds = Dataset::new(ndarray::array![[0.6, 0.8]], vec![1.0]).unwrap();
        let net = TwoLayerNet::new(
            ndarray::array![0.7],
            ndarray::array![[0.3, -0.2]],
            ActivationKind::Sigmoid,
            OutputHead::Linear,
        )
        .unwrap();
        let mut cfg = TrainConfig::theory(100, 0.05, 0);
        cfg.record_every = 1;
        let trace = train(net, &ds, &cfg).unwrap();
        let losses = trace.losses();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));

        let (mut b, mut a) = (0.7, vec![0.3, -0.2]);
        for _ in 0..100 {
            (b, a) = reference_step(b, &a, &[0.6, 0.8], 1.0, 0.05);
        }
        assert_abs_diff_eq!(trace.net.outer()[0], b, epsilon = 1e-12);
        assert_abs_diff_eq!(trace.net.inner()[[0, 0]], a[0], epsilon = 1e-12);
        assert_abs_diff_eq!(trace.net.inner()[[0, 1]], a[1], epsilon = 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = make_synthetic(40, 5, 3, SyntheticTask::Binary).unwrap();
        let net = init_weights(16, 5, 4, ActivationKind::Relu, OutputHead::Sigmoid).unwrap();
        let mut cfg = TrainConfig::empirical(60, 0.5, 9);
        cfg.batch_size = 8;
        cfg.record_every = 7;
        let a = train(net.clone(), &ds, &cfg).unwrap();
        let b = train(net, &ds, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.net, b.net);
        assert!(a.checkpoints.iter().all(|c| c.accuracy.is_some()));
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let ds = make_synthetic(16, 4, 11, SyntheticTask::Regression).unwrap();
        let net = init_weights(64, 4, 12, ActivationKind::Sigmoid, OutputHead::Linear).unwrap();
        // the tangent kernel of the 1/N-scaled net is bounded by
        // (max σ² + max b² σ'² ‖x‖²)/N per entry; take a step well below 1/(m · that)
        let bmax = net.outer().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let entry = (1.0 + bmax * bmax / 16.0) / 64.0;
        let lr = 0.5 / (16.0 * entry);
        let mut cfg = TrainConfig::theory(200, lr, 0);
        cfg.batch_size = 16;
        cfg.record_every = 1;
        let trace = train(net, &ds, &cfg).unwrap();
        let l = trace.losses();
        assert!(l.windows(2).all(|w| w[1] <= w[0]), "{l:?}");
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = make_synthetic(10, 3, 1, SyntheticTask::Regression).unwrap();
        let net = init_weights(4, 3, 2, ActivationKind::Tanh, OutputHead::Linear).unwrap();
        let mut cfg = TrainConfig::theory(200, 1e9, 0);
        cfg.record_every = 1;
        assert!(matches!(train(net, &ds, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn config_validation() {
        let ds = make_synthetic(10, 3, 1, SyntheticTask::Regression).unwrap();
        let net = init_weights(4, 3, 2, ActivationKind::Tanh, OutputHead::Linear).unwrap();
        let mut cfg = TrainConfig::theory(5, 0.1, 0);
        cfg.batch_size = 11;
        assert!(matches!(train(net.clone(), &ds, &cfg), Err(Error::InvalidConfig(_))));
        let cfg = TrainConfig::empirical(5, 0.1, 0);
        assert!(train(net, &ds, &cfg).is_err());
    }

    fn geometric(a: f64, rho: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|t| (t as f64, a * rho.powi(t as i32))).collect()
    }

    #[test]
    fn decay_fit_examples() {
        let fit = fit_decay_series(&geometric(0.7, 0.9, 40)).unwrap();
        assert_abs_diff_eq!(fit.rho, 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.r_squared, 1.0, epsilon = 1e-9);
        let flat = fit_decay_series(&geometric(2.0, 1.0, 10)).unwrap();
        assert_eq!(flat.rho, 1.0);
        let rising = fit_decay_series(&geometric(1.0, 1.1, 10)).unwrap();
        assert_eq!(rising.rho, 1.0);
        assert!(matches!(
            fit_decay_series(&[(0.0, 1.0), (1.0, 0.0), (2.0, 0.5)]),
            Err(Error::NonPositiveLoss { index: 1, .. })
        ));
    }

    #[test]
    fn decay_fit_with_multiplicative_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for &rho in &[0.8, 0.95, 0.99] {
            let pts: Vec<(f64, f64)> = (0..200)
                .map(|t| {
                    let noise = 1.0 + rng.random_range(-0.01..0.01);
                    (t as f64, 3.0 * f64::powi(rho, t) * noise)
                })
                .collect();
            let fit = fit_decay_series(&pts).unwrap();
            assert!((fit.rho - rho).abs() < 0.01, "{} vs {rho}", fit.rho);
        }
    }

    #[test]
    fn estimate_c_examples() {
        assert_abs_diff_eq!(estimate_c(0.99, 100, 100, RateMode::Sgd).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(estimate_c(0.5, 100, 50, RateMode::Gd).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(estimate_c(1.0, 10, 1, RateMode::Sgd), Err(Error::RateOutOfRange(_))));
        assert!(estimate_c(0.0, 10, 1, RateMode::Gd).is_err());
    }

    #[test]
    fn threshold_from_fitted_series_recovers_generating_constant() {
        let (m, d, c) = (50usize, 10usize, 3.0);
        let rho = 1.0 - c * d as f64 / (m * m) as f64;
        let fit = fit_decay_series(&geometric(1.3, rho, 60)).unwrap();
        let c_hat = estimate_c(fit.rho, m, d, RateMode::Sgd).unwrap();
        assert_abs_diff_eq!(c_hat, c, epsilon = 1e-6);
        let t_hat = sgd_threshold(7, m, d, c_hat).unwrap();
        let t = sgd_threshold(7, m, d, c).unwrap();
        assert_abs_diff_eq!(t_hat, t, epsilon = 1e-3);
    }

    proptest! {
        #[test]
        fn decay_fit_is_scale_invariant(rho in 0.5f64..0.999, scale in 1e-3f64..1e3, wiggle in 0.0f64..0.05) {
            let pts: Vec<(f64, f64)> = (0..30)
                .map(|t| (t as f64, rho.powi(t) * (1.0 + wiggle * ((t * 7) % 5) as f64 / 5.0)))
                .collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(t, l)| (t, l * scale)).collect();
            let a = fit_decay_series(&pts).unwrap();
            let b = fit_decay_series(&scaled).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-10);
        }
    }
}
