//! C interface to `gfs_prune`.
//!
//! Objects cross the boundary as opaque pointers created by a `*_new`/`*_load`
//! call and released by the matching `*_free`. Every fallible function
//! returns a [`GfsStatus`]; on failure [`gfs_last_error`] describes the most
//! recent error on the calling thread. Panics are caught and reported as
//! [`GfsStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gfs_prune::bounds::{gd_threshold, lemma1_bound, sgd_threshold};
use gfs_prune::data::{load_idx, make_synthetic, Dataset, SyntheticTask};
use gfs_prune::model::{accuracy, dataset_loss, ActivationKind, Criterion, OutputHead, TwoLayerNet};
use gfs_prune::pruning::{greedy_forward_selection, PruneConfig};
use gfs_prune::training::{init_weights, train, TrainConfig};
use gfs_prune::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BoundViolation = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfsActivation {
    Sigmoid = 0,
    Tanh = 1,
    Relu = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfsHead {
    Linear = 0,
    Sigmoid = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfsCriterion {
    L2 = 0,
    Bce = 1,
}

/// Training hyperparameters for [`gfs_net_train`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GfsTrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub criterion: GfsCriterion,
}

pub struct GfsDataset(Dataset);
pub struct GfsNet(TwoLayerNet);

/// Outcome of a greedy run: the per-step losses and the neuron multiset.
pub struct GfsPruneResult {
    losses: Vec<f64>,
    chosen: Vec<usize>,
    counts: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GfsStatus {
    match e {
        Error::Io { .. } => GfsStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } | Error::Format { .. } => {
            GfsStatus::Format
        }
        Error::Divergence { .. }
        | Error::NonPositiveLoss { .. }
        | Error::RateOutOfRange(_)
        | Error::IterationCap { .. }
        | Error::LpViolation { .. } => GfsStatus::Numerical,
        Error::BoundViolation { .. } => GfsStatus::BoundViolation,
        Error::Cell { source, .. } => status_of(source),
        _ => GfsStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GfsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GfsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_last_error(format!("null pointer passed for `{what}`"));
            GfsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            GfsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidConfig(format!("`{what}` is not valid UTF-8"))))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gfs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads an IDX image/label file pair (gzip accepted); pixels scaled to [0, 1].
///
/// # Safety
/// `images` and `labels` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut GfsDataset,
) -> GfsStatus {
    guard(|| {
        let ds = load_idx(path_arg(images, "images")?, path_arg(labels, "labels")?)?;
        write_out(out, GfsDataset(ds))
    })
}

/// Unit-norm Gaussian rows with linear-threshold (`binary != 0`) or noisy
/// linear labels.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_synthetic(
    m: usize,
    d: usize,
    seed: u64,
    binary: bool,
    out: *mut *mut GfsDataset,
) -> GfsStatus {
    guard(|| {
        let task = if binary { SyntheticTask::Binary } else { SyntheticTask::Regression };
        write_out(out, GfsDataset(make_synthetic(m, d, seed, task)?))
    })
}

/// Copies a row-major `m × d` feature block and `m` labels.
///
/// # Safety
/// `features` must point to `m * d` doubles and `labels` to `m` doubles.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_from_arrays(
    features: *const f64,
    labels: *const f64,
    m: usize,
    d: usize,
    out: *mut *mut GfsDataset,
) -> GfsStatus {
    guard(|| {
        if features.is_null() {
            return Err(Fail::Null("features"));
        }
        if labels.is_null() {
            return Err(Fail::Null("labels"));
        }
        let len = m
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidConfig("m * d overflows".into()))?;
        let x = std::slice::from_raw_parts(features, len).to_vec();
        let y = std::slice::from_raw_parts(labels, m).to_vec();
        let x = ndarray::Array2::from_shape_vec((m, d), x)
            .map_err(|e| Error::InvalidConfig(format!("feature shape: {e}")))?;
        write_out(out, GfsDataset(Dataset::new(x, y)?))
    })
}

/// # Safety
/// `ds` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_len(ds: *const GfsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_dim(ds: *const GfsDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.dim())
}

/// # Safety
/// `ds` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn gfs_dataset_free(ds: *mut GfsDataset) {
    free_box(ds);
}

fn activation(a: GfsActivation) -> ActivationKind {
    match a {
        GfsActivation::Sigmoid => ActivationKind::Sigmoid,
        GfsActivation::Tanh => ActivationKind::Tanh,
        GfsActivation::Relu => ActivationKind::Relu,
    }
}

fn head(h: GfsHead) -> OutputHead {
    match h {
        GfsHead::Linear => OutputHead::Linear,
        GfsHead::Sigmoid => OutputHead::Sigmoid,
    }
}

fn criterion(c: GfsCriterion) -> Criterion {
    match c {
        GfsCriterion::L2 => Criterion::L2,
        GfsCriterion::Bce => Criterion::Bce,
    }
}

/// Width-`width` network with i.i.d. standard normal weights.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_new(
    width: usize,
    dim: usize,
    seed: u64,
    act: GfsActivation,
    out_head: GfsHead,
    out: *mut *mut GfsNet,
) -> GfsStatus {
    guard(|| write_out(out, GfsNet(init_weights(width, dim, seed, activation(act), head(out_head))?)))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_load(path: *const c_char, out: *mut *mut GfsNet) -> GfsStatus {
    guard(|| write_out(out, GfsNet(TwoLayerNet::load(path_arg(path, "path")?)?)))
}

/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_save(net: *const GfsNet, path: *const c_char) -> GfsStatus {
    guard(|| {
        as_ref(net, "net")?.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_width(net: *const GfsNet) -> usize {
    net.as_ref().map_or(0, |n| n.0.width())
}

/// Output for one input of length `dim`.
///
/// # Safety
/// `x` must point to `dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_forward(net: *const GfsNet, x: *const f64, dim: usize, out: *mut f64) -> GfsStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.0;
        if x.is_null() {
            return Err(Fail::Null("x"));
        }
        let out = as_mut(out, "out")?;
        let x = ndarray::ArrayView1::from(std::slice::from_raw_parts(x, dim));
        *out = net.forward(x)?;
        Ok(())
    })
}

/// Trains `net` in place; the final full-dataset loss goes to `final_loss`
/// when it is not null. On failure the network is left unchanged.
///
/// # Safety
/// `net`, `ds` and `opts` must be valid; `final_loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_train(
    net: *mut GfsNet,
    ds: *const GfsDataset,
    opts: *const GfsTrainOptions,
    final_loss: *mut f64,
) -> GfsStatus {
    guard(|| {
        let net = as_mut(net, "net")?;
        let ds = &as_ref(ds, "ds")?.0;
        let o = *as_ref(opts, "opts")?;
        let mut cfg = TrainConfig::theory(o.iterations, o.learning_rate, o.seed);
        cfg.batch_size = o.batch_size;
        cfg.momentum = o.momentum;
        cfg.weight_decay = o.weight_decay;
        cfg.criterion = criterion(o.criterion);
        cfg.record_every = o.iterations.max(1);
        let trace = train(net.0.clone(), ds, &cfg)?;
        if let Some(l) = final_loss.as_mut() {
            *l = trace.checkpoints.last().map_or(f64::NAN, |c| c.loss);
        }
        net.0 = trace.net;
        Ok(())
    })
}

/// Mean loss of the dense network on `ds`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_loss(
    net: *const GfsNet,
    ds: *const GfsDataset,
    crit: GfsCriterion,
    out: *mut f64,
) -> GfsStatus {
    guard(|| {
        *as_mut(out, "out")? = dataset_loss(&as_ref(net, "net")?.0, &as_ref(ds, "ds")?.0, criterion(crit))?;
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn gfs_net_free(net: *mut GfsNet) {
    free_box(net);
}

/// `iterations` steps of full-batch greedy forward selection on the polytope loss.
///
/// # Safety
/// `net` and `ds` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune(
    net: *const GfsNet,
    ds: *const GfsDataset,
    iterations: usize,
    out: *mut *mut GfsPruneResult,
) -> GfsStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.0;
        let ds = &as_ref(ds, "ds")?.0;
        let (state, counts) = greedy_forward_selection(net, ds, &PruneConfig::new(iterations))?;
        write_out(
            out,
            GfsPruneResult {
                losses: state.loss_history().to_vec(),
                chosen: state.chosen().to_vec(),
                counts: counts.counts().to_vec(),
            },
        )
    })
}

/// Greedy steps taken.
///
/// # Safety
/// `res` must come from [`gfs_prune`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune_result_steps(res: *const GfsPruneResult) -> usize {
    res.as_ref().map_or(0, |r| r.losses.len())
}

/// Copies the loss after each step into `buf`, which holds `len` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune_result_losses(res: *const GfsPruneResult, buf: *mut f64, len: usize) -> GfsStatus {
    guard(|| copy_out(&as_ref(res, "res")?.losses, buf, len, |&v| v))
}

/// Copies the neuron chosen at each step into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune_result_chosen(res: *const GfsPruneResult, buf: *mut usize, len: usize) -> GfsStatus {
    guard(|| copy_out(&as_ref(res, "res")?.chosen, buf, len, |&v| v))
}

/// Copies the per-neuron selection counts (length = width) into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune_result_counts(res: *const GfsPruneResult, buf: *mut usize, len: usize) -> GfsStatus {
    guard(|| copy_out(&as_ref(res, "res")?.counts, buf, len, |&v| v))
}

unsafe fn copy_out<S, T>(src: &[S], buf: *mut T, len: usize, f: impl Fn(&S) -> T) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(Fail::Null("buf"));
    }
    if len < src.len() {
        return Err(Fail::Lib(Error::InvalidConfig(format!(
            "buffer holds {len} elements, {} needed",
            src.len()
        ))));
    }
    let dst = std::slice::from_raw_parts_mut(buf, src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = f(s);
    }
    Ok(())
}

/// # Safety
/// `res` must come from [`gfs_prune`] or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn gfs_prune_result_free(res: *mut GfsPruneResult) {
    free_box(res);
}

/// Training accuracy of the network restricted to the pruned multiset.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gfs_pruned_accuracy(
    net: *const GfsNet,
    res: *const GfsPruneResult,
    ds: *const GfsDataset,
    out: *mut f64,
) -> GfsStatus {
    guard(|| {
        let net = &as_ref(net, "net")?.0;
        let res = as_ref(res, "res")?;
        let s = gfs_prune::model::NeuronMultiset::from_counts(res.counts.clone());
        *as_mut(out, "out")? = accuracy(net, Some(&s), &as_ref(ds, "ds")?.0)?;
        Ok(())
    })
}

/// SGD pre-training threshold `−ln k / ln(1 − c d/m²)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_sgd_threshold(k: usize, m: usize, d: usize, c: f64, out: *mut f64) -> GfsStatus {
    guard(|| {
        *as_mut(out, "out")? = sgd_threshold(k, m, d, c)?;
        Ok(())
    })
}

/// GD pre-training threshold `−ln k / ln(1 − c d/m)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_gd_threshold(k: usize, m: usize, d: usize, c: f64, out: *mut f64) -> GfsStatus {
    guard(|| {
        *as_mut(out, "out")? = gd_threshold(k, m, d, c)?;
        Ok(())
    })
}

/// Deterministic bound on the greedy loss after `k` steps.
#[no_mangle]
pub extern "C" fn gfs_lemma1_bound(k: usize, loss_u1: f64, diameter: f64, dense_loss: f64) -> f64 {
    lemma1_bound(k, loss_u1, diameter, dense_loss)
}
