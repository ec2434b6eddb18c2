use std::ffi::{CStr, CString};
use std::ptr;

use gfs_prune_ffi::*;

fn last_error() -> String {
    let p = gfs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synthetic(m: usize, d: usize, binary: bool) -> *mut GfsDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { gfs_dataset_synthetic(m, d, 7, binary, &mut ds) }, GfsStatus::Ok);
    ds
}

fn net(width: usize, dim: usize, act: GfsActivation, head: GfsHead) -> *mut GfsNet {
    let mut n = ptr::null_mut();
    assert_eq!(unsafe { gfs_net_new(width, dim, 3, act, head, &mut n) }, GfsStatus::Ok);
    n
}

#[test]
fn dataset_shapes_and_free() {
    let ds = synthetic(20, 5, true);
    unsafe {
        assert_eq!(gfs_dataset_len(ds), 20);
        assert_eq!(gfs_dataset_dim(ds), 5);
        gfs_dataset_free(ds);
        gfs_dataset_free(ptr::null_mut());
        assert_eq!(gfs_dataset_len(ptr::null()), 0);
    }
}

#[test]
fn from_arrays_copies_row_major() {
    let x = [1.0, 0.0, 0.0, 1.0, 0.5, 0.5];
    let y = [0.0, 1.0, 1.0];
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(gfs_dataset_from_arrays(x.as_ptr(), y.as_ptr(), 3, 2, &mut ds), GfsStatus::Ok);
        assert_eq!(gfs_dataset_len(ds), 3);
        assert_eq!(gfs_dataset_dim(ds), 2);
        gfs_dataset_free(ds);
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        assert_eq!(gfs_dataset_synthetic(4, 2, 0, true, ptr::null_mut()), GfsStatus::NullPointer);
        assert!(last_error().contains("out"));
        let mut out = 0.0;
        assert_eq!(gfs_net_forward(ptr::null(), [0.0].as_ptr(), 1, &mut out), GfsStatus::NullPointer);
        assert!(last_error().contains("net"));
        let mut ds = ptr::null_mut();
        assert_eq!(gfs_dataset_from_arrays(ptr::null(), [0.0].as_ptr(), 1, 1, &mut ds), GfsStatus::NullPointer);
        assert!(ds.is_null());
        assert_eq!(gfs_sgd_threshold(10, 100, 10, 1.0, ptr::null_mut()), GfsStatus::NullPointer);
    }
}

#[test]
fn invalid_arguments_set_last_error() {
    let mut n = ptr::null_mut();
    unsafe {
        let st = gfs_net_new(0, 3, 0, GfsActivation::Sigmoid, GfsHead::Linear, &mut n);
        assert_eq!(st, GfsStatus::InvalidArgument);
        assert!(n.is_null());
        assert!(!last_error().is_empty());
    }
    let net = net(4, 3, GfsActivation::Tanh, GfsHead::Linear);
    let mut out = 0.0;
    unsafe {
        assert_eq!(gfs_net_forward(net, [0.0, 1.0].as_ptr(), 2, &mut out), GfsStatus::InvalidArgument);
        gfs_net_free(net);
    }
}

#[test]
fn missing_file_is_io_error() {
    let img = CString::new("/nonexistent/images.idx").unwrap();
    let lbl = CString::new("/nonexistent/labels.idx").unwrap();
    let mut ds = ptr::null_mut();
    unsafe {
        assert_eq!(gfs_dataset_load_idx(img.as_ptr(), lbl.as_ptr(), &mut ds), GfsStatus::Io);
        let mut n = ptr::null_mut();
        assert_eq!(gfs_net_load(img.as_ptr(), &mut n), GfsStatus::Io);
    }
}

#[test]
fn garbage_weights_file_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.net");
    std::fs::write(&path, b"not a network").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut n = ptr::null_mut();
    assert_eq!(unsafe { gfs_net_load(c.as_ptr(), &mut n) }, GfsStatus::Format);
}

#[test]
fn save_load_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.net").to_str().unwrap()).unwrap();
    let a = net(6, 3, GfsActivation::Sigmoid, GfsHead::Sigmoid);
    let x = [0.3, -0.2, 0.9];
    unsafe {
        assert_eq!(gfs_net_save(a, path.as_ptr()), GfsStatus::Ok);
        let mut b = ptr::null_mut();
        assert_eq!(gfs_net_load(path.as_ptr(), &mut b), GfsStatus::Ok);
        assert_eq!(gfs_net_width(b), 6);
        let (mut ya, mut yb) = (0.0, 0.0);
        assert_eq!(gfs_net_forward(a, x.as_ptr(), 3, &mut ya), GfsStatus::Ok);
        assert_eq!(gfs_net_forward(b, x.as_ptr(), 3, &mut yb), GfsStatus::Ok);
        assert_eq!(ya.to_bits(), yb.to_bits());
        gfs_net_free(a);
        gfs_net_free(b);
    }
}

#[test]
fn train_then_prune_end_to_end() {
    let ds = synthetic(16, 4, false);
    let n = net(64, 4, GfsActivation::Sigmoid, GfsHead::Linear);
    let opts = GfsTrainOptions {
        iterations: 200,
        learning_rate: 0.5,
        batch_size: 1,
        momentum: 0.0,
        weight_decay: 0.0,
        seed: 1,
        criterion: GfsCriterion::L2,
    };
    unsafe {
        let mut before = 0.0;
        assert_eq!(gfs_net_loss(n, ds, GfsCriterion::L2, &mut before), GfsStatus::Ok);
        let mut after = f64::NAN;
        assert_eq!(gfs_net_train(n, ds, &opts, &mut after), GfsStatus::Ok);
        assert!(after < before, "{after} !< {before}");

        let mut res = ptr::null_mut();
        assert_eq!(gfs_prune(n, ds, 12, &mut res), GfsStatus::Ok);
        assert_eq!(gfs_prune_result_steps(res), 12);
        let mut losses = [0.0; 12];
        let mut chosen = [0usize; 12];
        let mut counts = [0usize; 64];
        assert_eq!(gfs_prune_result_losses(res, losses.as_mut_ptr(), 12), GfsStatus::Ok);
        assert_eq!(gfs_prune_result_chosen(res, chosen.as_mut_ptr(), 12), GfsStatus::Ok);
        assert_eq!(gfs_prune_result_counts(res, counts.as_mut_ptr(), 64), GfsStatus::Ok);
        assert_eq!(counts.iter().sum::<usize>(), 12);
        assert!(chosen.iter().all(|&q| q < 64));
        assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));

        let mut short = [0.0; 4];
        assert_eq!(gfs_prune_result_losses(res, short.as_mut_ptr(), 4), GfsStatus::InvalidArgument);

        let mut acc = 0.0;
        assert_eq!(gfs_pruned_accuracy(n, res, ds, &mut acc), GfsStatus::InvalidArgument);

        gfs_prune_result_free(res);
        gfs_net_free(n);
        gfs_dataset_free(ds);
    }
}

#[test]
fn pruned_accuracy_on_binary_data() {
    let ds = synthetic(32, 4, true);
    let n = net(32, 4, GfsActivation::Tanh, GfsHead::Sigmoid);
    unsafe {
        let mut res = ptr::null_mut();
        assert_eq!(gfs_prune(n, ds, 10, &mut res), GfsStatus::Ok);
        let mut acc = -1.0;
        assert_eq!(gfs_pruned_accuracy(n, res, ds, &mut acc), GfsStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        gfs_prune_result_free(res);
        gfs_net_free(n);
        gfs_dataset_free(ds);
    }
}

#[test]
fn thresholds_match_closed_form() {
    let mut t = 0.0;
    unsafe {
        assert_eq!(gfs_sgd_threshold(10, 10, 1, 1.0, &mut t), GfsStatus::Ok);
        assert!((t - 229.105).abs() < 1e-3);
        assert_eq!(gfs_gd_threshold(1, 10, 1, 1.0, &mut t), GfsStatus::Ok);
        assert_eq!(t, 0.0);
        assert_eq!(gfs_sgd_threshold(10, 2, 8, 1.0, &mut t), GfsStatus::Numerical);
    }
    let b = gfs_lemma1_bound(1, 0.25, 1.0, 0.0);
    assert!(b.is_finite() && b >= 0.0);
}
