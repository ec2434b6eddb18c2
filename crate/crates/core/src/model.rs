//! The two-layer network `f(x) = (1/N) Σ b_i σ(a_i·x)`, its losses and
//! gradients, and the scaled per-neuron activation vectors that span the
//! marginal polytope.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"P2LN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Relu => x.max(0.0),
        }
    }

    /// First derivative; relu uses the subgradient 0 at the origin.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// A constant bounding both |σ'| and |σ''|; relu has none.
    pub fn derivative_bound(self) -> Option<f64> {
        match self {
            ActivationKind::Sigmoid => Some(1.0),
            ActivationKind::Tanh => Some(2.0),
            ActivationKind::Relu => None,
        }
    }

    /// Bound verification needs a twice-differentiable activation.
    pub fn require_smooth(self) -> Result<()> {
        match self.derivative_bound() {
            Some(_) => Ok(()),
            None => Err(Error::config(format!(
                "{} has no bounded second derivative and is rejected in theory mode",
                self.name()
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
        }
    }

    fn code(self) -> u8 {
        match self {
            ActivationKind::Sigmoid => 0,
            ActivationKind::Tanh => 1,
            ActivationKind::Relu => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ActivationKind::Sigmoid,
            1 => ActivationKind::Tanh,
            2 => ActivationKind::Relu,
            _ => return None,
        })
    }
}

impl FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputHead {
    Linear,
    Sigmoid,
}

impl OutputHead {
    #[inline]
    pub fn apply(self, pre: f64) -> f64 {
        match self {
            OutputHead::Linear => pre,
            OutputHead::Sigmoid => sigmoid(pre),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutputHead::Linear => "linear",
            OutputHead::Sigmoid => "sigmoid",
        }
    }
}

impl FromStr for OutputHead {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(OutputHead::Linear),
            "sigmoid" => Ok(OutputHead::Sigmoid),
            other => Err(Error::config(format!("unknown output head `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    L2,
    Bce,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::L2 => "l2",
            Criterion::Bce => "bce",
        }
    }

    fn check_head(self, head: OutputHead) -> Result<()> {
        if self == Criterion::Bce && head != OutputHead::Sigmoid {
            return Err(Error::config("bce requires the sigmoid output head"));
        }
        Ok(())
    }
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Criterion::L2),
            "bce" => Ok(Criterion::Bce),
            other => Err(Error::config(format!("unknown criterion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    outer: Array1<f64>,
    inner: Array2<f64>,
    activation: ActivationKind,
    head: OutputHead,
}

/// Gradient with the same shapes as the network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub outer: Array1<f64>,
    pub inner: Array2<f64>,
}

impl Gradient {
    pub fn zeros(width: usize, dim: usize) -> Self {
        Gradient {
            outer: Array1::zeros(width),
            inner: Array2::zeros((width, dim)),
        }
    }

    /// Coordinates in the flat order used by [`TwoLayerNet::param`].
    pub fn get(&self, index: usize) -> f64 {
        let n = self.outer.len();
        if index < n {
            self.outer[index]
        } else {
            let d = self.inner.ncols();
            self.inner[[(index - n) / d, (index - n) % d]]
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.outer
            .iter()
            .chain(self.inner.iter())
            .fold(0.0f64, |a, &g| a.max(g.abs()))
    }
}

impl TwoLayerNet {
    pub fn new(
        outer: Array1<f64>,
        inner: Array2<f64>,
        activation: ActivationKind,
        head: OutputHead,
    ) -> Result<Self> {
        if outer.is_empty() || inner.ncols() == 0 {
            return Err(Error::config("network needs N >= 1 and d >= 1"));
        }
        if inner.nrows() != outer.len() {
            return Err(Error::DimensionMismatch {
                what: "inner weight rows",
                expected: outer.len(),
                actual: inner.nrows(),
            });
        }
        if !outer.iter().chain(inner.iter()).all(|w| w.is_finite()) {
            return Err(Error::config("network weights must be finite"));
        }
        Ok(TwoLayerNet {
            outer,
            inner,
            activation,
            head,
        })
    }

    /// Width `N`.
    pub fn width(&self) -> usize {
        self.outer.len()
    }

    /// Input dimension `d`.
    pub fn dim(&self) -> usize {
        self.inner.ncols()
    }

    pub fn outer(&self) -> &Array1<f64> {
        &self.outer
    }

    pub fn inner(&self) -> &Array2<f64> {
        &self.inner
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.head = head;
        self
    }

    pub fn num_params(&self) -> usize {
        self.outer.len() + self.inner.len()
    }

    /// Flat parameter view: outer weights first, then inner row-major.
    pub fn param(&self, index: usize) -> f64 {
        let n = self.width();
        if index < n {
            self.outer[index]
        } else {
            self.inner[[(index - n) / self.dim(), (index - n) % self.dim()]]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let n = self.width();
        let d = self.dim();
        if index < n {
            self.outer[index] = value;
        } else {
            self.inner[[(index - n) / d, (index - n) % d]] = value;
        }
    }

    /// `w <- w - lr * step` applied to both layers.
    pub(crate) fn apply_update(&mut self, step: &Gradient, lr: f64) {
        self.outer.scaled_add(-lr, &step.outer);
        self.inner.scaled_add(-lr, &step.inner);
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.outer.iter().chain(self.inner.iter()).all(|w| w.is_finite())
    }

    fn check_input(&self, x: &ArrayView1<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "input length",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// `b_i σ(a_i·x)`.
    pub fn neuron_activation(&self, i: usize, x: ArrayView1<f64>) -> Result<f64> {
        if i >= self.width() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.width(),
            });
        }
        self.check_input(&x)?;
        Ok(self.outer[i] * self.activation.apply(self.inner.row(i).dot(&x)))
    }

    /// Mean of the neuron activations, before the output head.
    pub fn pre_head(&self, x: ArrayView1<f64>) -> Result<f64> {
        self.check_input(&x)?;
        let pre = self.inner.dot(&x);
        let sum: f64 = Zip::from(&pre)
            .and(&self.outer)
            .fold(0.0, |acc, &h, &b| acc + b * self.activation.apply(h));
        Ok(sum / self.width() as f64)
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.head.apply(self.pre_head(x)?))
    }

    /// Multiplicity-weighted mean over `s`, then the output head.
    pub fn forward_pruned(&self, s: &NeuronMultiset, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.head.apply(self.pre_head_pruned(s, x)?))
    }

    pub fn pre_head_pruned(&self, s: &NeuronMultiset, x: ArrayView1<f64>) -> Result<f64> {
        s.check_width(self.width())?;
        self.check_input(&x)?;
        let total = s.total();
        if total == 0 {
            return Err(Error::EmptySelection);
        }
        let mut sum = 0.0;
        for (i, &c) in s.counts().iter().enumerate() {
            if c > 0 {
                let act = self.outer[i] * self.activation.apply(self.inner.row(i).dot(&x));
                sum += c as f64 * act;
            }
        }
        Ok(sum / total as f64)
    }

    /// Hidden pre-activations `X Aᵀ` for a batch of rows, shape `B×N`.
    fn hidden(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "input width",
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        Ok(x.dot(&self.inner.t()))
    }

    /// Pre-head outputs for every row of `x`.
    pub fn pre_head_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut h = self.hidden(x)?;
        let act = self.activation;
        h.mapv_inplace(|v| act.apply(v));
        Ok(h.dot(&self.outer) / self.width() as f64)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let head = self.head;
        Ok(self.pre_head_batch(x)?.mapv(|p| head.apply(p)))
    }

    /// Pre-head outputs of the subnetwork selected by `s` for every row of `x`.
    pub fn pre_head_pruned_batch(&self, s: &NeuronMultiset, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        s.check_width(self.width())?;
        let total = s.total();
        if total == 0 {
            return Err(Error::EmptySelection);
        }
        let rows: Vec<usize> = s.distinct_indices().collect();
        let weights: Array1<f64> = rows
            .iter()
            .map(|&i| s.counts()[i] as f64 * self.outer[i])
            .collect();
        let sub = self.inner.select(Axis(0), &rows);
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "input width",
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        let act = self.activation;
        let h = x.dot(&sub.t()).mapv(|v| act.apply(v));
        Ok(h.dot(&weights) / total as f64)
    }

    /// Mean loss over a batch of rows.
    pub fn batch_loss(&self, x: ArrayView2<f64>, y: &[f64], criterion: Criterion) -> Result<f64> {
        criterion.check_head(self.head)?;
        check_labels(x.nrows(), y)?;
        let pre = self.pre_head_batch(x)?;
        mean_loss(&pre, y, self.head, criterion)
    }

    /// Exact gradient of the batch mean loss.
    pub fn gradient(&self, x: ArrayView2<f64>, y: &[f64], criterion: Criterion) -> Result<Gradient> {
        criterion.check_head(self.head)?;
        check_labels(x.nrows(), y)?;
        if criterion == Criterion::Bce {
            check_binary(y)?;
        }
        let b = x.nrows() as f64;
        let n = self.width() as f64;
        let act = self.activation;

        let h = self.hidden(x)?;
        let s = h.mapv(|v| act.apply(v));
        let pre = s.dot(&self.outer) / n;

        // dLoss/dpre for each example, already divided by the batch size
        let g: Array1<f64> = pre
            .iter()
            .zip(y)
            .map(|(&p, &t)| match (criterion, self.head) {
                (Criterion::L2, OutputHead::Linear) => (p - t) / b,
                (Criterion::L2, OutputHead::Sigmoid) => {
                    let o = sigmoid(p);
                    (o - t) * o * (1.0 - o) / b
                }
                (Criterion::Bce, _) => (sigmoid(p) - t) / b,
            })
            .collect();

        let outer = s.t().dot(&g) / n;

        let mut gh = h;
        Zip::from(gh.rows_mut()).and(&g).for_each(|mut row, &gj| {
            Zip::from(&mut row).and(&self.outer).for_each(|v, &bi| {
                *v = gj * bi * act.derivative(*v) / n;
            });
        });
        let inner = gh.t().dot(&x);
        Ok(Gradient { outer, inner })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            w.write_all(&CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(self.width() as u64).to_le_bytes())?;
            w.write_all(&(self.dim() as u64).to_le_bytes())?;
            w.write_all(&[self.activation.code(), self.head as u8])?;
            for v in self.outer.iter().chain(self.inner.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .map(BufReader::new)
            .and_then(|mut r| r.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            detail: format!("{}: {detail}", path.display()),
        };
        if bytes.len() < 26 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing P2LN header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let activation =
            ActivationKind::from_code(bytes[24]).ok_or_else(|| bad(format!("activation code {}", bytes[24])))?;
        let head = match bytes[25] {
            0 => OutputHead::Linear,
            1 => OutputHead::Sigmoid,
            other => return Err(bad(format!("head code {other}"))),
        };
        let count = n.checked_mul(d + 1).ok_or_else(|| bad("size overflow".into()))?;
        let payload = &bytes[26..];
        if payload.len() != count * 8 {
            return Err(bad(format!("expected {} weight bytes, found {}", count * 8, payload.len())));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let outer: Array1<f64> = values.by_ref().take(n).collect();
        let inner = Array2::from_shape_vec((n, d), values.collect()).map_err(|e| bad(e.to_string()))?;
        TwoLayerNet::new(outer, inner, activation, head)
    }
}

fn check_labels(rows: usize, y: &[f64]) -> Result<()> {
    if rows == 0 {
        return Err(Error::config("empty batch"));
    }
    if y.len() != rows {
        return Err(Error::DimensionMismatch {
            what: "batch labels",
            expected: rows,
            actual: y.len(),
        });
    }
    Ok(())
}

fn check_binary(y: &[f64]) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(row) => Err(Error::NonBinaryLabels { row, value: y[row] }),
        None => Ok(()),
    }
}

fn mean_loss(pre: &Array1<f64>, y: &[f64], head: OutputHead, criterion: Criterion) -> Result<f64> {
    let m = y.len() as f64;
    match criterion {
        Criterion::L2 => {
            let sq: f64 = pre
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    let r = head.apply(p) - t;
                    r * r
                })
                .sum();
            Ok(sq / (2.0 * m))
        }
        Criterion::Bce => {
            check_binary(y)?;
            // -[y ln σ(s) + (1-y) ln(1-σ(s))] = softplus(s) - y s
            let total: f64 = pre.iter().zip(y).map(|(&s, &t)| softplus(s) - t * s).sum();
            Ok(total / m)
        }
    }
}

/// `(1/2m) Σ (f(x) − y)²` for l2, mean binary cross-entropy for bce.
pub fn dataset_loss(net: &TwoLayerNet, ds: &Dataset, criterion: Criterion) -> Result<f64> {
    net.batch_loss(ds.features().view(), ds.labels(), criterion)
}

/// Loss of the subnetwork selected by `s` over the whole dataset.
pub fn pruned_loss(net: &TwoLayerNet, s: &NeuronMultiset, ds: &Dataset, criterion: Criterion) -> Result<f64> {
    criterion.check_head(net.head())?;
    let pre = net.pre_head_pruned_batch(s, ds.features().view())?;
    mean_loss(&pre, ds.labels(), net.head(), criterion)
}

/// Fraction of rows whose head output falls on the label's side of 0.5.
pub fn accuracy(net: &TwoLayerNet, s: Option<&NeuronMultiset>, ds: &Dataset) -> Result<f64> {
    ds.check_binary()?;
    let pre = match s {
        Some(s) => net.pre_head_pruned_batch(s, ds.features().view())?,
        None => net.pre_head_batch(ds.features().view())?,
    };
    let head = net.head();
    let correct = pre
        .iter()
        .zip(ds.labels())
        .filter(|(&p, &y)| (head.apply(p) > 0.5) == (y == 1.0))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Multiset of neuron indices stored as per-neuron counts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NeuronMultiset {
    counts: Vec<usize>,
}

impl NeuronMultiset {
    pub fn empty(width: usize) -> Self {
        NeuronMultiset {
            counts: vec![0; width],
        }
    }

    /// Every neuron exactly once.
    pub fn full(width: usize) -> Self {
        NeuronMultiset {
            counts: vec![1; width],
        }
    }

    pub fn from_counts(counts: Vec<usize>) -> Self {
        NeuronMultiset { counts }
    }

    pub fn from_indices(width: usize, indices: &[usize]) -> Result<Self> {
        let mut s = NeuronMultiset::empty(width);
        for &i in indices {
            s.insert(i)?;
        }
        Ok(s)
    }

    pub fn insert(&mut self, i: usize) -> Result<()> {
        let len = self.counts.len();
        *self
            .counts
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })? += 1;
        Ok(())
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn width(&self) -> usize {
        self.counts.len()
    }

    /// Total multiplicity `|S|`.
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn distinct_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| i)
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if self.counts.len() != width {
            return Err(Error::DimensionMismatch {
                what: "multiset width",
                expected: width,
                actual: self.counts.len(),
            });
        }
        Ok(())
    }

    /// `index,count` CSV, one row per selected neuron.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,count\n");
        for i in self.distinct_indices() {
            out.push_str(&format!("{i},{}\n", self.counts[i]));
        }
        out
    }

    pub fn from_csv(width: usize, text: &str) -> Result<Self> {
        let mut s = NeuronMultiset::empty(width);
        let bad = |line: &str| Error::Format {
            what: "multiset csv",
            detail: format!("cannot parse `{line}`"),
        };
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let (i, c) = line.split_once(',').ok_or_else(|| bad(line))?;
            let i: usize = i.trim().parse().map_err(|_| bad(line))?;
            let c: usize = c.trim().parse().map_err(|_| bad(line))?;
            if i >= width {
                return Err(Error::IndexOutOfRange { index: i, len: width });
            }
            s.counts[i] += c;
        }
        Ok(s)
    }
}

/// Rows `Φ_i = [b_i σ(a_i·x⁽ʲ⁾)]_j / √m` and the target `y / √m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    phi: Array2<f64>,
    y_vec: Array1<f64>,
    labels: Vec<f64>,
}

impl ActivationMatrix {
    /// Builds from already scaled vertices and target.
    pub fn from_parts(phi: Array2<f64>, y_vec: Array1<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::config("activation matrix needs N >= 1 and m >= 1"));
        }
        if phi.ncols() != y_vec.len() {
            return Err(Error::DimensionMismatch {
                what: "target length",
                expected: phi.ncols(),
                actual: y_vec.len(),
            });
        }
        if !phi.iter().chain(y_vec.iter()).all(|v| v.is_finite()) {
            return Err(Error::config("activation matrix entries must be finite"));
        }
        let root = (y_vec.len() as f64).sqrt();
        let labels = y_vec.iter().map(|&v| v * root).collect();
        Ok(ActivationMatrix { phi, y_vec, labels })
    }

    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn y_vec(&self) -> &Array1<f64> {
        &self.y_vec
    }

    /// The unscaled labels the target was built from.
    pub fn raw_labels(&self) -> &[f64] {
        &self.labels
    }

    /// Number of vertices `N`.
    pub fn width(&self) -> usize {
        self.phi.nrows()
    }

    /// Number of examples `m`.
    pub fn len(&self) -> usize {
        self.phi.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    /// `u = Σ w_i Φ_i / Σ w_i` for a multiset of vertices.
    pub fn combination(&self, s: &NeuronMultiset) -> Result<Array1<f64>> {
        s.check_width(self.width())?;
        let total = s.total();
        if total == 0 {
            return Err(Error::EmptySelection);
        }
        let mut u = Array1::zeros(self.len());
        for i in s.distinct_indices() {
            u.scaled_add(s.counts()[i] as f64, &self.phi.row(i));
        }
        Ok(u / total as f64)
    }
}

/// Evaluates every neuron over the dataset. The output head is not applied.
pub fn activation_matrix(net: &TwoLayerNet, ds: &Dataset) -> Result<ActivationMatrix> {
    if net.dim() != ds.dim() {
        return Err(Error::DimensionMismatch {
            what: "input dimension",
            expected: net.dim(),
            actual: ds.dim(),
        });
    }
    let root = (ds.len() as f64).sqrt();
    let act = net.activation();
    // N×m = A Xᵀ
    let mut phi = net.inner().dot(&ds.features().t());
    Zip::from(phi.rows_mut()).and(net.outer()).for_each(|mut row, &b| {
        row.mapv_inplace(|h| b * act.apply(h) / root);
    });
    let y_vec = ds.labels().iter().map(|&y| y / root).collect();
    Ok(ActivationMatrix {
        phi,
        y_vec,
        labels: ds.labels().to_vec(),
    })
}

/// `½ ‖z − y‖²`.
pub fn l2_loss(z: ArrayView1<f64>, y_vec: ArrayView1<f64>) -> Result<f64> {
    if z.len() != y_vec.len() {
        return Err(Error::DimensionMismatch {
            what: "loss operands",
            expected: y_vec.len(),
            actual: z.len(),
        });
    }
    Ok(0.5 * Zip::from(&z).and(&y_vec).fold(0.0, |a, &p, &q| a + (p - q) * (p - q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticTask};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn net(outer: Array1<f64>, inner: Array2<f64>, act: ActivationKind, head: OutputHead) -> TwoLayerNet {
        TwoLayerNet::new(outer, inner, act, head).unwrap()
    }

    fn random_net(n: usize, d: usize, seed: u64, act: ActivationKind, head: OutputHead) -> TwoLayerNet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let outer = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
        let inner = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        net(outer, inner, act, head)
    }

    #[test]
    fn neuron_activation_examples() {
        let x = array![0.3, -1.2];
        let n = net(array![2.0], Array2::zeros((1, 2)), ActivationKind::Sigmoid, OutputHead::Linear);
        assert_eq!(n.neuron_activation(0, x.view()).unwrap(), 1.0);

        let r = net(array![1.0], array![[3.0, 0.0]], ActivationKind::Relu, OutputHead::Linear);
        assert_eq!(r.neuron_activation(0, array![-1.0, 5.0].view()).unwrap(), 0.0);

        let z = net(array![0.0], array![[0.7, 0.1]], ActivationKind::Sigmoid, OutputHead::Linear);
        assert_eq!(z.neuron_activation(0, x.view()).unwrap(), 0.0);
        assert!(matches!(z.neuron_activation(1, x.view()), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn forward_is_mean_then_head() {
        // relu neurons producing 1.0 and 3.0 on x = (1)
        let lin = net(array![1.0, 3.0], array![[1.0], [1.0]], ActivationKind::Relu, OutputHead::Linear);
        let x = array![1.0];
        assert_eq!(lin.forward(x.view()).unwrap(), 2.0);
        let sig = lin.clone().with_head(OutputHead::Sigmoid);
        // 1 / (1 + e^-2)
        assert_abs_diff_eq!(sig.forward(x.view()).unwrap(), 0.8807970779778823, epsilon = 1e-15);

        let same = net(array![0.4, 0.4, 0.4], array![[0.5], [0.5], [0.5]], ActivationKind::Tanh, OutputHead::Linear);
        assert_abs_diff_eq!(
            same.forward(x.view()).unwrap(),
            same.neuron_activation(1, x.view()).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn forward_pruned_examples() {
        let n = net(array![3.0, 0.0, 1.0], array![[1.0], [1.0], [1.0]], ActivationKind::Relu, OutputHead::Linear);
        let x = array![1.0];
        let s = NeuronMultiset::from_indices(3, &[0, 0, 1]).unwrap();
        assert_eq!(n.forward_pruned(&s, x.view()).unwrap(), 2.0);
        let single = NeuronMultiset::from_indices(3, &[2]).unwrap();
        assert_eq!(n.forward_pruned(&single, x.view()).unwrap(), 1.0);
        assert!(matches!(
            n.forward_pruned(&NeuronMultiset::empty(3), x.view()),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn activation_matrix_examples() {
        let ds = Dataset::new(Array2::from_elem((4, 3), 0.5), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let n = net(array![1.0], Array2::zeros((1, 3)), ActivationKind::Sigmoid, OutputHead::Sigmoid);
        let am = activation_matrix(&n, &ds).unwrap();
        assert_eq!(am.phi().row(0).to_vec(), vec![0.25; 4]);
        assert_eq!(am.y_vec().to_vec(), vec![0.5, 0.0, 0.5, 0.0]);
        assert_eq!(am.raw_labels(), ds.labels());

        let wrong = net(array![1.0], Array2::zeros((1, 2)), ActivationKind::Sigmoid, OutputHead::Linear);
        assert!(matches!(activation_matrix(&wrong, &ds), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn activation_matrix_entries_match_direct_evaluation() {
        let ds = make_synthetic(17, 5, 3, SyntheticTask::Regression).unwrap();
        let n = random_net(9, 5, 4, ActivationKind::Tanh, OutputHead::Linear);
        let am = activation_matrix(&n, &ds).unwrap();
        let root = 17f64.sqrt();
        for i in 0..9 {
            for j in 0..17 {
                let direct = n.neuron_activation(i, ds.row(j)).unwrap() / root;
                assert_abs_diff_eq!(am.phi()[[i, j]], direct, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_dataset_rescales_target() {
        let ds = make_synthetic(6, 3, 8, SyntheticTask::Binary).unwrap();
        let twice = ds.select(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]).unwrap();
        let n = random_net(4, 3, 1, ActivationKind::Sigmoid, OutputHead::Linear);
        let a = activation_matrix(&n, &ds).unwrap();
        let b = activation_matrix(&n, &twice).unwrap();
        for j in 0..6 {
            assert_abs_diff_eq!(b.y_vec()[j], a.y_vec()[j] / 2f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn l2_loss_examples() {
        let y = array![1.0, 2.0];
        assert_eq!(l2_loss(y.view(), y.view()).unwrap(), 0.0);
        assert_eq!(l2_loss(array![4.0, 6.0].view(), y.view()).unwrap(), 12.5);
        assert!(l2_loss(array![1.0].view(), y.view()).is_err());
    }

    #[test]
    fn polytope_loss_of_full_average_is_dataset_loss() {
        let ds = make_synthetic(23, 4, 5, SyntheticTask::Regression).unwrap();
        let n = random_net(11, 4, 6, ActivationKind::Sigmoid, OutputHead::Linear);
        let am = activation_matrix(&n, &ds).unwrap();
        let u = am.combination(&NeuronMultiset::full(11)).unwrap();
        let poly = l2_loss(u.view(), am.y_vec().view()).unwrap();

        // (1/2m) Σ (f(x) - y)² evaluated one example at a time
        let mut direct = 0.0;
        for j in 0..ds.len() {
            let r = n.forward(ds.row(j)).unwrap() - ds.labels()[j];
            direct += r * r;
        }
        direct /= 2.0 * ds.len() as f64;
        assert_abs_diff_eq!(poly, direct, epsilon = 1e-10);
        assert_abs_diff_eq!(dataset_loss(&n, &ds, Criterion::L2).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn dataset_loss_examples() {
        let ds = Dataset::new(array![[1.0], [2.0]], vec![1.0, 0.0]).unwrap();
        let zero = net(array![0.0], array![[1.0]], ActivationKind::Sigmoid, OutputHead::Sigmoid);
        assert_abs_diff_eq!(
            dataset_loss(&zero, &ds, Criterion::Bce).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        let lin = zero.clone().with_head(OutputHead::Linear);
        // constant output 0 gives (1/2m) Σ y² = 0.25
        assert_eq!(dataset_loss(&lin, &ds, Criterion::L2).unwrap(), 0.25);
        assert!(dataset_loss(&lin, &ds, Criterion::Bce).is_err());
        let reg = Dataset::new(array![[1.0]], vec![0.3]).unwrap();
        assert!(matches!(
            dataset_loss(&zero, &reg, Criterion::Bce),
            Err(Error::NonBinaryLabels { .. })
        ));
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let ds = make_synthetic(5, 3, 2, SyntheticTask::Regression).unwrap();
        let n = random_net(4, 3, 2, ActivationKind::Tanh, OutputHead::Linear);
        let y = n.forward_batch(ds.features().view()).unwrap().to_vec();
        let g = n.gradient(ds.features().view(), &y, Criterion::L2).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn gradient_is_linear_in_labels_for_zero_output() {
        let ds = make_synthetic(6, 3, 2, SyntheticTask::Regression).unwrap();
        let mut n = random_net(4, 3, 9, ActivationKind::Sigmoid, OutputHead::Linear);
        for i in 0..4 {
            n.outer[i] = 0.0;
        }
        let y: Vec<f64> = ds.labels().to_vec();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let g1 = n.gradient(ds.features().view(), &y, Criterion::L2).unwrap();
        let g2 = n.gradient(ds.features().view(), &y2, Criterion::L2).unwrap();
        for p in 0..n.num_params() {
            assert_abs_diff_eq!(g2.get(p), 2.0 * g1.get(p), epsilon = 1e-14);
        }
    }

    #[test]
    fn accuracy_examples() {
        let ds = Dataset::new(array![[1.0], [-1.0], [2.0], [-2.0]], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let n = net(array![4.0], array![[1.0]], ActivationKind::Tanh, OutputHead::Sigmoid);
        assert_eq!(accuracy(&n, None, &ds).unwrap(), 0.75);
        let perfect = Dataset::new(array![[1.0], [-1.0]], vec![1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&n, None, &perfect).unwrap(), 1.0);
        let flipped = Dataset::new(array![[1.0], [-1.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(accuracy(&n, None, &flipped).unwrap(), 0.0);
        let s = NeuronMultiset::full(1);
        assert_eq!(accuracy(&n, Some(&s), &ds).unwrap(), 0.75);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let n = random_net(7, 3, 12, ActivationKind::Relu, OutputHead::Sigmoid);
        let p = dir.path().join("net.p2ln");
        n.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"P2LN");
        assert_eq!(bytes.len(), 26 + 8 * 7 * 4);
        let back = TwoLayerNet::load(&p).unwrap();
        assert_eq!(back, n);
        let p2 = dir.path().join("again.p2ln");
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), bytes);
    }

    #[test]
    fn multiset_csv_roundtrip() {
        let s = NeuronMultiset::from_indices(5, &[4, 1, 4, 4]).unwrap();
        let csv = s.to_csv();
        assert_eq!(csv, "index,count\n1,1\n4,3\n");
        assert_eq!(NeuronMultiset::from_csv(5, &csv).unwrap(), s);
        assert_eq!(s.total(), 4);
        assert_eq!(s.distinct(), 2);
    }

    #[test]
    fn theory_mode_rejects_relu() {
        assert!(ActivationKind::Relu.require_smooth().is_err());
        assert!(ActivationKind::Tanh.require_smooth().is_ok());
    }

    proptest! {
        #[test]
        fn full_multiset_matches_forward(seed in 0u64..500, n in 1usize..12, d in 1usize..6) {
            let ds = make_synthetic(3, d, seed, SyntheticTask::Regression).unwrap();
            let net = random_net(n, d, seed + 1, ActivationKind::Sigmoid, OutputHead::Sigmoid);
            let s = NeuronMultiset::full(n);
            for j in 0..3 {
                let a = net.forward(ds.row(j)).unwrap();
                let b = net.forward_pruned(&s, ds.row(j)).unwrap();
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn batch_pruned_matches_pointwise(seed in 0u64..500, picks in proptest::collection::vec(0usize..6, 1..10)) {
            let ds = make_synthetic(4, 3, seed, SyntheticTask::Regression).unwrap();
            let net = random_net(6, 3, seed, ActivationKind::Tanh, OutputHead::Linear);
            let s = NeuronMultiset::from_indices(6, &picks).unwrap();
            let batch = net.pre_head_pruned_batch(&s, ds.features().view()).unwrap();
            for j in 0..4 {
                prop_assert!((batch[j] - net.pre_head_pruned(&s, ds.row(j)).unwrap()).abs() <= 1e-12);
            }
        }
    }
}
