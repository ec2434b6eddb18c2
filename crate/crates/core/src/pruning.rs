//! Greedy forward selection: starting from the empty subnetwork, repeatedly
//! add (with replacement) the neuron whose inclusion gives the lowest loss.
//!
//! With `z_k = Σ_{s≤k} Φ_{q_s}` and `u_k = z_k / k`, step `k` picks
//! `q_k = argmin_i ℓ((z_{k−1} + Φ_i)/k)`, where `ℓ(u) = ½‖u − y‖²`.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{activation_matrix, l2_loss, ActivationMatrix, Criterion, NeuronMultiset, OutputHead, TwoLayerNet};
use crate::seed::derive_seed;
use crate::training::least_squares;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionBatch {
    Full,
    /// Candidates are scored on `size` examples drawn afresh at every step.
    Minibatch { size: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// Evaluates every candidate iterate from scratch, `O(N m)` per step.
    Direct,
    /// Expands the squared norm with cached inner products.
    Incremental,
}

/// What a candidate is scored by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionLoss {
    /// `½‖u − y‖²` on the pre-head activations.
    Polytope,
    /// The training criterion applied to `head(√m u)` against the raw labels.
    Head(OutputHead, Criterion),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    pub iterations: usize,
    pub selection: SelectionBatch,
    pub scoring: Scoring,
    pub loss: SelectionLoss,
    /// Keep every `u_k` (needed by [`iterate_difference_check`]).
    pub record_iterates: bool,
}

impl PruneConfig {
    pub fn new(iterations: usize) -> Self {
        PruneConfig {
            iterations,
            selection: SelectionBatch::Full,
            scoring: Scoring::Direct,
            loss: SelectionLoss::Polytope,
            record_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("prune iterations must be >= 1"));
        }
        if let SelectionBatch::Minibatch { size: 0, .. } = self.selection {
            return Err(Error::config("selection batch size must be >= 1"));
        }
        if self.scoring == Scoring::Incremental && self.loss != SelectionLoss::Polytope {
            return Err(Error::config("incremental scoring only applies to the polytope loss"));
        }
        Ok(())
    }
}

/// Cached `‖Φ_i‖²`, `⟨Φ_i, y⟩` and the running `⟨Φ_i, z⟩`.
#[derive(Debug, Clone, PartialEq)]
struct InnerProducts {
    sq_norm: Array1<f64>,
    dot_y: Array1<f64>,
    dot_z: Array1<f64>,
    z_sq: f64,
    z_dot_y: f64,
    y_sq: f64,
}

impl InnerProducts {
    fn new(am: &ActivationMatrix) -> Self {
        let phi = am.phi();
        InnerProducts {
            sq_norm: phi.map_axis(Axis(1), |r| r.dot(&r)),
            dot_y: phi.dot(am.y_vec()),
            dot_z: Array1::zeros(am.width()),
            z_sq: 0.0,
            z_dot_y: 0.0,
            y_sq: am.y_vec().dot(am.y_vec()),
        }
    }

    fn absorb(&mut self, am: &ActivationMatrix, q: usize) {
        let phi = am.phi();
        let gram_q = phi.dot(&phi.row(q));
        self.z_sq += 2.0 * self.dot_z[q] + self.sq_norm[q];
        self.z_dot_y += self.dot_y[q];
        self.dot_z += &gram_q;
    }

    /// `ℓ((z + Φ_i)/k)` from the cached products.
    fn score(&self, i: usize, k: f64) -> f64 {
        let num = self.z_sq + 2.0 * self.dot_z[i] + self.sq_norm[i];
        0.5 * (num / (k * k) - 2.0 * (self.z_dot_y + self.dot_y[i]) / k + self.y_sq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyState {
    k: usize,
    z: Array1<f64>,
    u: Array1<f64>,
    counts: NeuronMultiset,
    /// `loss_history[k − 1] = ℓ(u_k)` on the full dataset.
    loss_history: Vec<f64>,
    chosen: Vec<usize>,
    iterates: Option<Vec<Array1<f64>>>,
    cache: Option<InnerProducts>,
}

impl GreedyState {
    pub fn new(width: usize, m: usize, record_iterates: bool) -> Self {
        GreedyState {
            k: 0,
            z: Array1::zeros(m),
            u: Array1::zeros(m),
            counts: NeuronMultiset::empty(width),
            loss_history: Vec::new(),
            chosen: Vec::new(),
            iterates: record_iterates.then(Vec::new),
            cache: None,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn z(&self) -> &Array1<f64> {
        &self.z
    }

    pub fn u(&self) -> &Array1<f64> {
        &self.u
    }

    pub fn counts(&self) -> &NeuronMultiset {
        &self.counts
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    /// `q_1, …, q_k`.
    pub fn chosen(&self) -> &[usize] {
        &self.chosen
    }

    /// `u_1, …, u_k` when recording was requested.
    pub fn iterates(&self) -> Option<&[Array1<f64>]> {
        self.iterates.as_deref()
    }

    /// `w_k = k (y − u_k)`, the scaled residual behind the faster rate.
    pub fn w(&self, y_vec: ArrayView1<f64>) -> Array1<f64> {
        (&y_vec - &self.u) * self.k as f64
    }

    /// Largest deviation from `u = z/k`, `Σ counts = k` and `u = Σ (counts_i/k) Φ_i`.
    pub fn invariant_residual(&self, am: &ActivationMatrix) -> Result<f64> {
        if self.counts.total() != self.k {
            return Ok(f64::INFINITY);
        }
        if self.k == 0 {
            return Ok(self.z.iter().chain(self.u.iter()).fold(0.0, |a, v| a.max(v.abs())));
        }
        let kf = self.k as f64;
        let mixture = am.combination(&self.counts)?;
        let mut worst = 0.0f64;
        for ((&z, &u), &c) in self.z.iter().zip(&self.u).zip(&mixture) {
            worst = worst.max((z / kf - u).abs()).max((u - c).abs());
        }
        Ok(worst)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,chosen_index,loss,distinct_count\n");
        let mut seen = vec![false; self.counts.width()];
        let mut distinct = 0;
        for (idx, (&q, &loss)) in self.chosen.iter().zip(&self.loss_history).enumerate() {
            if !seen[q] {
                seen[q] = true;
                distinct += 1;
            }
            out.push_str(&format!("{},{q},{loss:.16e},{distinct}\n", idx + 1));
        }
        out
    }
}

fn selection_columns(m: usize, k: usize, selection: SelectionBatch) -> Option<Vec<usize>> {
    match selection {
        SelectionBatch::Full => None,
        SelectionBatch::Minibatch { size, .. } if size >= m => None,
        SelectionBatch::Minibatch { size, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, k as u64]));
            let mut cols = sample(&mut rng, m, size).into_vec();
            cols.sort_unstable();
            Some(cols)
        }
    }
}

fn head_loss(pre: f64, y: f64, head: OutputHead, criterion: Criterion) -> f64 {
    let out = head.apply(pre);
    match criterion {
        Criterion::L2 => 0.5 * (out - y) * (out - y),
        Criterion::Bce => {
            let p = out.clamp(1e-15, 1.0 - 1e-15);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

/// Scores every candidate; lowest score wins, lowest index on ties.
fn argmin_candidate(
    am: &ActivationMatrix,
    state: &GreedyState,
    cfg: &PruneConfig,
    cols: Option<&[usize]>,
) -> usize {
    let k = (state.k + 1) as f64;
    let phi = am.phi();
    let y = am.y_vec();
    let scores: Vec<f64> = match (cfg.scoring, &state.cache) {
        (Scoring::Incremental, Some(cache)) => (0..am.width()).map(|i| cache.score(i, k)).collect(),
        _ => {
            let root = (am.len() as f64).sqrt();
            let score_one = |row: ArrayView1<f64>| -> f64 {
                let term = |j: usize| -> f64 {
                    let v = (state.z[j] + row[j]) / k;
                    match cfg.loss {
                        SelectionLoss::Polytope => {
                            let r = v - y[j];
                            0.5 * r * r
                        }
                        SelectionLoss::Head(head, crit) => head_loss(v * root, y[j] * root, head, crit),
                    }
                };
                match cols {
                    None => (0..row.len()).map(term).sum(),
                    Some(c) => c.iter().map(|&j| term(j)).sum(),
                }
            };
            (0..am.width())
                .into_par_iter()
                .map(|i| score_one(phi.row(i)))
                .collect()
        }
    };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// One greedy iteration; returns the chosen neuron index.
pub fn greedy_step(am: &ActivationMatrix, state: &mut GreedyState, cfg: &PruneConfig) -> Result<usize> {
    if state.counts.width() != am.width() || state.z.len() != am.len() {
        return Err(Error::DimensionMismatch {
            what: "greedy state",
            expected: am.width(),
            actual: state.counts.width(),
        });
    }
    if cfg.scoring == Scoring::Incremental && selection_columns(am.len(), state.k, cfg.selection).is_some() {
        return Err(Error::config("incremental scoring requires full-dataset selection"));
    }
    if cfg.scoring == Scoring::Incremental && state.cache.is_none() {
        let mut cache = InnerProducts::new(am);
        for &q in &state.chosen {
            cache.absorb(am, q);
        }
        state.cache = Some(cache);
    }

    let cols = selection_columns(am.len(), state.k, cfg.selection);
    let q = argmin_candidate(am, state, cfg, cols.as_deref());

    state.z += &am.phi().row(q);
    state.k += 1;
    state.u = &state.z / state.k as f64;
    state.counts.insert(q)?;
    state.chosen.push(q);
    state.loss_history.push(l2_loss(state.u.view(), am.y_vec().view())?);
    if let Some(it) = state.iterates.as_mut() {
        it.push(state.u.clone());
    }
    if let Some(cache) = state.cache.as_mut() {
        cache.absorb(am, q);
    }
    Ok(q)
}

/// Runs `cfg.iterations` greedy steps over a prebuilt activation matrix.
pub fn greedy_on_matrix(am: &ActivationMatrix, cfg: &PruneConfig) -> Result<GreedyState> {
    cfg.validate()?;
    let mut state = GreedyState::new(am.width(), am.len(), cfg.record_iterates);
    for _ in 0..cfg.iterations {
        greedy_step(am, &mut state, cfg)?;
    }
    Ok(state)
}

/// Builds the activation matrix once and runs the greedy loop.
pub fn greedy_forward_selection(net: &TwoLayerNet, ds: &Dataset, cfg: &PruneConfig) -> Result<(GreedyState, NeuronMultiset)> {
    let am = activation_matrix(net, ds)?;
    let state = greedy_on_matrix(&am, cfg)?;
    let s = state.counts.clone();
    Ok((state, s))
}

/// `max_k ‖(u_k − u_{k−1}) − (1/k)(Φ_{q_k} − u_{k−1})‖` over `k ≥ 2`.
pub fn iterate_difference_residual(phi: ArrayView2<f64>, iterates: &[Array1<f64>], chosen: &[usize]) -> Result<f64> {
    if iterates.len() < 2 || chosen.len() != iterates.len() {
        return Err(Error::config("iterate check needs >= 2 iterates with their chosen vertices"));
    }
    let mut worst = 0.0f64;
    for k in 2..=iterates.len() {
        let prev = &iterates[k - 2];
        let cur = &iterates[k - 1];
        let q = phi.row(chosen[k - 1]);
        let kf = k as f64;
        let r: f64 = (0..prev.len())
            .map(|j| {
                let d = (cur[j] - prev[j]) - (q[j] - prev[j]) / kf;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r);
    }
    Ok(worst)
}

pub fn iterate_difference_check(am: &ActivationMatrix, state: &GreedyState) -> Result<f64> {
    let it = state
        .iterates()
        .ok_or_else(|| Error::config("iterates were not recorded"))?;
    iterate_difference_residual(am.phi().view(), it, state.chosen())
}

/// Bound check slack.
pub const LEMMA1_SLACK: f64 = 1e-9;

/// For each recorded `k`: does `ℓ(u_k) ≤ (1/k)ℓ(u₁) + D²/(2k) + ((k−1)/k)L_N + 1e-9`?
pub fn lemma1_check(losses: &[f64], diameter: f64, dense_loss: f64) -> Vec<bool> {
    let Some(&l1) = losses.first() else {
        return Vec::new();
    };
    losses
        .iter()
        .enumerate()
        .map(|(i, &l)| l <= crate::bounds::lemma1_bound(i + 1, l1, diameter, dense_loss) + LEMMA1_SLACK)
        .collect()
}

/// First `k` where [`lemma1_check`] fails, as an error.
pub fn lemma1_enforce(losses: &[f64], diameter: f64, dense_loss: f64) -> Result<()> {
    for (i, ok) in lemma1_check(losses, diameter, dense_loss).into_iter().enumerate() {
        if !ok {
            let k = i + 1;
            return Err(Error::BoundViolation {
                k,
                loss: losses[i],
                bound: crate::bounds::lemma1_bound(k, losses[0], diameter, dense_loss),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Slope of `ln ℓ(u_k)` against `ln k`; `−∞` on an exact fit.
    pub exponent: f64,
    pub r_squared: f64,
    /// Some loss in range was zero (or negative through rounding).
    pub exact_fit: bool,
}

/// Power-law fit over `k ∈ [k_min, k_max]` (1-based, inclusive).
pub fn rate_fit_range(losses: &[f64], k_min: usize, k_max: usize) -> Result<RateFit> {
    let k_min = k_min.max(1);
    let k_max = k_max.min(losses.len());
    if k_max < k_min + 1 {
        return Err(Error::config(format!(
            "rate fit needs two points in [{k_min}, {k_max}] (history has {})",
            losses.len()
        )));
    }
    let slice = &losses[k_min - 1..k_max];
    if slice.iter().any(|&l| !(l > 0.0)) {
        return Ok(RateFit {
            exponent: f64::NEG_INFINITY,
            r_squared: 1.0,
            exact_fit: true,
        });
    }
    let x: Vec<f64> = (k_min..=k_max).map(|k| (k as f64).ln()).collect();
    let y: Vec<f64> = slice.iter().map(|l| l.ln()).collect();
    let (slope, _, r2) = least_squares(&x, &y);
    Ok(RateFit {
        exponent: slope,
        r_squared: r2,
        exact_fit: false,
    })
}

pub fn rate_fit(losses: &[f64], k_min: usize) -> Result<RateFit> {
    rate_fit_range(losses, k_min, losses.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticTask};
    use crate::model::ActivationKind;
    use crate::training::init_weights;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn am(phi: Array2<f64>, y: Array1<f64>) -> ActivationMatrix {
        ActivationMatrix::from_parts(phi, y).unwrap()
    }

    fn random_am(seed: u64, n: usize, m: usize) -> ActivationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        am(
            Array2::from_shape_simple_fn((n, m), || rng.random_range(-1.0..1.0)),
            Array1::from_shape_simple_fn(m, || rng.random_range(-0.5..0.5)),
        )
    }

    #[test]
    fn two_vertex_example() {
        let a = am(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, 0.0]);
        let mut st = GreedyState::new(2, 2, true);
        let cfg = PruneConfig::new(5);
        assert_eq!(greedy_step(&a, &mut st, &cfg).unwrap(), 0);
        assert_eq!(st.loss_history(), &[0.0]);
        for _ in 0..4 {
            greedy_step(&a, &mut st, &cfg).unwrap();
        }
        assert_eq!(st.counts().counts(), &[5, 0]);
        assert_eq!(st.u().to_vec(), vec![1.0, 0.0]);
        assert!(st.loss_history().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn two_vertex_greedy_path_is_optimal_among_all_sequences() {
        let a = am(array![[1.0, 0.0], [0.0, 1.0]], array![1.0, 0.0]);
        let best = (0..32u32)
            .map(|mask| {
                let mut z = Array1::<f64>::zeros(2);
                let mut worst = 0.0f64;
                for k in 1..=5 {
                    z += &a.phi().row(((mask >> (k - 1)) & 1) as usize);
                    let u = &z / k as f64;
                    worst = worst.max(l2_loss(u.view(), a.y_vec().view()).unwrap());
                }
                worst
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 0.0);
    }

    #[test]
    fn single_candidate() {
        let a = am(array![[0.3, -0.2, 0.9]], array![0.0, 0.0, 0.0]);
        let st = greedy_on_matrix(&a, &PruneConfig::new(4)).unwrap();
        assert_eq!(st.chosen(), &[0, 0, 0, 0]);
        assert_eq!(st.u(), &a.phi().row(0).to_owned());
    }

    #[test]
    fn iterate_identity_example_and_corruption() {
        let phi = array![[1.0, 0.0], [0.0, 1.0]];
        let its = vec![array![1.0, 0.0], array![1.0, 0.0], array![2.0 / 3.0, 1.0 / 3.0]];
        let chosen = vec![0, 0, 1];
        assert!(iterate_difference_residual(phi.view(), &its, &chosen).unwrap() < 1e-15);
        let mut bad = its.clone();
        bad[2][0] += 1e-6;
        assert!(iterate_difference_residual(phi.view(), &bad, &chosen).unwrap() > 1e-10);
    }

    #[test]
    fn recorded_runs_satisfy_identities() {
        let a = random_am(5, 30, 12);
        let mut cfg = PruneConfig::new(40);
        cfg.record_iterates = true;
        let st = greedy_on_matrix(&a, &cfg).unwrap();
        assert!(iterate_difference_check(&a, &st).unwrap() <= 1e-10);
        assert!(st.invariant_residual(&a).unwrap() <= 1e-12);
        assert_eq!(st.counts().total(), 40);
    }

    #[test]
    fn lemma1_detector() {
        let ok = lemma1_check(&[0.5], 1.0, 7.0);
        assert_eq!(ok, vec![true]);
        let bad = lemma1_check(&[0.5, 5.0], 1.0, 0.0);
        assert_eq!(bad, vec![true, false]);
        assert!(matches!(
            lemma1_enforce(&[0.5, 5.0], 1.0, 0.0),
            Err(Error::BoundViolation { k: 2, .. })
        ));
    }

    #[test]
    fn rate_fit_examples() {
        let inv: Vec<f64> = (1..=100).map(|k| 3.0 / k as f64).collect();
        assert!((rate_fit(&inv, 1).unwrap().exponent + 1.0).abs() < 1e-9);
        let inv2: Vec<f64> = (1..=100).map(|k| 3.0 / (k * k) as f64).collect();
        assert!((rate_fit(&inv2, 5).unwrap().exponent + 2.0).abs() < 1e-9);
        let exact = rate_fit(&[1.0, 0.5, 0.0, 0.0], 1).unwrap();
        assert!(exact.exact_fit && exact.exponent == f64::NEG_INFINITY);
    }

    #[test]
    fn incremental_agrees_with_direct() {
        let a = random_am(8, 40, 25);
        let mut cfg = PruneConfig::new(60);
        let direct = greedy_on_matrix(&a, &cfg).unwrap();
        cfg.scoring = Scoring::Incremental;
        let inc = greedy_on_matrix(&a, &cfg).unwrap();
        assert_eq!(direct.chosen(), inc.chosen());
        for (x, y) in direct.loss_history().iter().zip(inc.loss_history()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn minibatch_of_full_size_equals_full() {
        let a = random_am(9, 20, 10);
        let full = greedy_on_matrix(&a, &PruneConfig::new(15)).unwrap();
        let mut cfg = PruneConfig::new(15);
        cfg.selection = SelectionBatch::Minibatch { size: 10, seed: 4 };
        assert_eq!(greedy_on_matrix(&a, &cfg).unwrap(), full);
        cfg.selection = SelectionBatch::Minibatch { size: 3, seed: 4 };
        let mb = greedy_on_matrix(&a, &cfg).unwrap();
        assert_eq!(mb.loss_history().len(), 15);
        assert_eq!(mb, greedy_on_matrix(&a, &cfg).unwrap());
    }

    #[test]
    fn pruned_forward_reproduces_iterate() {
        let ds = make_synthetic(9, 4, 1, SyntheticTask::Regression).unwrap();
        let net = init_weights(16, 4, 2, ActivationKind::Tanh, OutputHead::Linear).unwrap();
        let (st, s) = greedy_forward_selection(&net, &ds, &PruneConfig::new(7)).unwrap();
        assert_eq!(s.total(), 7);
        let root = 3.0;
        for j in 0..9 {
            let f = net.forward_pruned(&s, ds.row(j)).unwrap();
            assert!((f - st.u()[j] * root).abs() <= 1e-10);
        }
    }

    #[test]
    fn csv_reports_distinct_counts() {
        let a = am(array![[1.0, 0.0], [0.0, 1.0]], array![0.5, 0.5]);
        let st = greedy_on_matrix(&a, &PruneConfig::new(3)).unwrap();
        let csv = st.to_csv();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows[0], "k,chosen_index,loss,distinct_count");
        assert!(rows[1].starts_with("1,0,"));
        assert!(rows[2].starts_with("2,1,") && rows[2].ends_with(",2"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn greedy_choice_attains_candidate_minimum(seed in 0u64..10_000, n in 1usize..12, m in 1usize..8, p in 1usize..8) {
            let a = random_am(seed, n, m);
            let mut st = GreedyState::new(n, m, false);
            let cfg = PruneConfig::new(p);
            for _ in 0..p {
                let prev_z = st.z().clone();
                let k = (st.k() + 1) as f64;
                greedy_step(&a, &mut st, &cfg).unwrap();
                let got = *st.loss_history().last().unwrap();
                for i in 0..n {
                    let cand = (&prev_z + &a.phi().row(i)) / k;
                    prop_assert!(got <= l2_loss(cand.view(), a.y_vec().view()).unwrap() + 1e-15);
                }
                let weights: f64 = st.counts().counts().iter().map(|&c| c as f64 / st.k() as f64).sum();
                prop_assert!((weights - 1.0).abs() < 1e-12);
            }
            prop_assert_eq!(st.counts().total(), p);
        }

        #[test]
        fn selection_is_deterministic(seed in 0u64..10_000) {
            let a = random_am(seed, 10, 6);
            let cfg = PruneConfig::new(12);
            let first = greedy_on_matrix(&a, &cfg).unwrap();
            let second = greedy_on_matrix(&a, &cfg).unwrap();
            prop_assert_eq!(first.chosen(), second.chosen());
        }
    }
}
