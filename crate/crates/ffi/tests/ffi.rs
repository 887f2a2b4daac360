use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use loranpac::lift::RandomEmbedding;
use loranpac::linalg::Matrix;
use loranpac_ffi::*;

fn last_error() -> String {
    let p = lrp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Two well-separated classes along the first two axes.
fn block(dim: usize, n: usize, label_of: impl Fn(usize) -> u32) -> (Vec<f64>, Vec<u32>) {
    let mut h = vec![0.0; dim * n];
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let l = label_of(j);
        h[j * dim + l as usize] = 5.0 + j as f64 * 0.01;
        h[j * dim + 2 + j % (dim - 2)] = 0.3;
        labels.push(l);
    }
    (h, labels)
}

unsafe fn new_learner(dim: usize) -> *mut LrpLearner {
    let mut l = ptr::null_mut();
    assert_eq!(lrp_learner_new(dim, 0.0, 100, &mut l), LrpStatus::Ok);
    assert!(!l.is_null());
    l
}

#[test]
fn learn_predict_and_inspect() {
    unsafe {
        let dim = 8;
        let l = new_learner(dim);
        let (h, labels) = block(dim, 6, |j| (j % 2) as u32);
        let mut rank = 0;
        assert_eq!(lrp_learner_observe(l, h.as_ptr(), 6, labels.as_ptr(), &mut rank), LrpStatus::Ok);
        assert!(rank >= 2);

        let mut pred = vec![99u32; 6];
        assert_eq!(lrp_learner_predict(l, h.as_ptr(), 6, pred.as_mut_ptr()), LrpStatus::Ok);
        assert_eq!(pred, labels);

        let mut count = 0;
        assert_eq!(lrp_learner_classes(l, ptr::null_mut(), 0, &mut count), LrpStatus::Ok);
        assert_eq!(count, 2);
        let mut small = [0u32; 1];
        assert_eq!(
            lrp_learner_classes(l, small.as_mut_ptr(), 1, &mut count),
            LrpStatus::BufferTooSmall
        );
        let mut ids = [0u32; 2];
        assert_eq!(lrp_learner_classes(l, ids.as_mut_ptr(), 2, &mut count), LrpStatus::Ok);
        assert_eq!(ids, [0, 1]);

        let (mut rows, mut cols) = (0, 0);
        assert_eq!(lrp_learner_weights(l, ptr::null_mut(), 0, &mut rows, &mut cols), LrpStatus::Ok);
        assert_eq!((rows, cols), (2, dim));
        let mut w = vec![0.0; rows * cols];
        assert_eq!(lrp_learner_weights(l, w.as_mut_ptr(), w.len(), &mut rows, &mut cols), LrpStatus::Ok);
        assert!(w.iter().any(|x| *x != 0.0));

        let (mut t, mut m, mut d) = (0, 0, 0);
        assert_eq!(lrp_learner_tasks(l, &mut t), LrpStatus::Ok);
        assert_eq!(lrp_learner_samples(l, &mut m), LrpStatus::Ok);
        assert_eq!(lrp_learner_dim(l, &mut d), LrpStatus::Ok);
        assert_eq!((t, m, d), (1, 6, dim));
        lrp_learner_free(l);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut l = ptr::null_mut();
        assert_eq!(lrp_learner_new(4, 1.5, 10, &mut l), LrpStatus::InvalidArgument);
        assert!(l.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(lrp_learner_new(4, 0.0, 10, ptr::null_mut()), LrpStatus::NullPointer);

        let l = new_learner(4);
        let mut out = [0u32; 1];
        let h = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(lrp_learner_predict(l, h.as_ptr(), 1, out.as_mut_ptr()), LrpStatus::InvalidState);
        assert_eq!(lrp_learner_observe(l, ptr::null(), 1, [0u32].as_ptr(), ptr::null_mut()), LrpStatus::NullPointer);

        let bad = [f64::NAN, 0.0, 0.0, 0.0];
        assert_eq!(
            lrp_learner_observe(l, bad.as_ptr(), 1, [0u32].as_ptr(), ptr::null_mut()),
            LrpStatus::InvalidInput
        );
        let mut t = 9;
        lrp_learner_tasks(l, &mut t);
        assert_eq!(t, 0, "failed observe leaves the learner untouched");

        assert_eq!(lrp_learner_observe(l, h.as_ptr(), 1, [3u32].as_ptr(), ptr::null_mut()), LrpStatus::Ok);
        assert!(lrp_last_error().is_null());
        lrp_learner_free(l);
        lrp_learner_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_round_trip() {
    unsafe {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("l.ckpt").to_str().unwrap()).unwrap();
        let dim = 6;
        let l = new_learner(dim);
        let (h, labels) = block(dim, 5, |j| (j % 2) as u32);
        assert_eq!(lrp_learner_observe(l, h.as_ptr(), 5, labels.as_ptr(), ptr::null_mut()), LrpStatus::Ok);
        assert_eq!(lrp_learner_save(l, path.as_ptr()), LrpStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(lrp_learner_load(path.as_ptr(), &mut back), LrpStatus::Ok);
        let (mut r1, mut c1, mut r2, mut c2) = (0, 0, 0, 0);
        let mut w1 = vec![0.0; 2 * dim];
        let mut w2 = vec![0.0; 2 * dim];
        lrp_learner_weights(l, w1.as_mut_ptr(), w1.len(), &mut r1, &mut c1);
        lrp_learner_weights(back, w2.as_mut_ptr(), w2.len(), &mut r2, &mut c2);
        assert_eq!(w1, w2);

        let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
        let mut x = ptr::null_mut();
        assert_eq!(lrp_learner_load(missing.as_ptr(), &mut x), LrpStatus::Io);
        std::fs::write(dir.path().join("junk"), b"not a checkpoint").unwrap();
        let junk = CString::new(dir.path().join("junk").to_str().unwrap()).unwrap();
        assert_eq!(lrp_learner_load(junk.as_ptr(), &mut x), LrpStatus::Format);
        lrp_learner_free(l);
        lrp_learner_free(back);
    }
}

#[test]
fn lift_matches_library() {
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut out = vec![0.0; 10 * 4];
    let status = unsafe { lrp_lift(3, 10, 42, x.as_ptr(), 4, out.as_mut_ptr()) };
    assert_eq!(status, LrpStatus::Ok);
    let want = RandomEmbedding::new(3, 10, 42)
        .unwrap()
        .lift(&Matrix::from_column_slice(3, 4, &x))
        .unwrap();
    assert_eq!(out.as_slice(), want.as_slice());
    assert_eq!(
        unsafe { lrp_lift(3, 2, 42, x.as_ptr(), 4, out.as_mut_ptr()) },
        LrpStatus::InvalidArgument
    );
}

#[test]
fn feature_files() {
    unsafe {
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("f.lrpf").to_str().unwrap()).unwrap();
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let labels = [7u32, 8];
        assert_eq!(lrp_features_write(path.as_ptr(), 3, 2, data.as_ptr(), labels.as_ptr()), LrpStatus::Ok);

        let mut f = ptr::null_mut();
        assert_eq!(lrp_features_read(path.as_ptr(), &mut f), LrpStatus::Ok);
        let (mut d, mut n) = (0, 0);
        assert_eq!(lrp_features_shape(f, &mut d, &mut n), LrpStatus::Ok);
        assert_eq!((d, n), (3, 2));
        assert_eq!(std::slice::from_raw_parts(lrp_features_data(f), 6), &data);
        assert_eq!(std::slice::from_raw_parts(lrp_features_labels(f), 2), &labels);
        lrp_features_free(f);

        let raw = std::fs::read(dir.path().join("f.lrpf")).unwrap();
        let mut flipped = raw.clone();
        flipped[30] ^= 0x10;
        std::fs::write(dir.path().join("g.lrpf"), flipped).unwrap();
        let g = CString::new(dir.path().join("g.lrpf").to_str().unwrap()).unwrap();
        let mut f = ptr::null_mut();
        assert_eq!(lrp_features_read(g.as_ptr(), &mut f), LrpStatus::Format);
        assert!(last_error().contains("checksum"));
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(lrp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/loranpac.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["lrp_learner_new", "lrp_learner_observe", "lrp_learner_predict", "lrp_last_error", "LRP_STATUS_OK"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
