use std::ffi::{CStr, CString};
use std::ptr;

use cda_ffi::*;

fn last_error() -> String {
    let p = cda_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn simulate(n: usize, len: usize, seed: u64) -> *mut CdaDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { cda_dataset_simulate(n, len, seed, &mut ds) }, CdaStatus::Ok);
    ds
}

const SMALL: &str = r#"{"model": {"d_h": 6, "d_k": 3, "window": 4},
  "train": {"epochs": 2, "batch_size": 4, "lambda": 0.5}}"#;

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(cda_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulate_counts() {
    let ds = simulate(7, 12, 3);
    unsafe {
        assert_eq!(cda_dataset_len(ds), 7);
        assert_eq!(cda_dataset_records(ds), 84);
        cda_dataset_free(ds);
        assert_eq!(cda_dataset_len(ptr::null()), 0);
        cda_dataset_free(ptr::null_mut());
    }
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        assert_eq!(cda_dataset_simulate(1, 5, 0, ptr::null_mut()), CdaStatus::NullPointer);
        assert!(last_error().contains("null"));
        let mut m = ptr::null_mut();
        assert_eq!(cda_model_train(ptr::null(), ptr::null(), ptr::null(), &mut m), CdaStatus::NullPointer);
        assert!(m.is_null());
        assert_eq!(cda_model_load(ptr::null(), &mut m), CdaStatus::NullPointer);
    }
}

#[test]
fn missing_csv_is_io_error() {
    let path = CString::new("/nonexistent/dir/data.csv").unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { cda_dataset_load_csv(path.as_ptr(), false, &mut ds) }, CdaStatus::Io);
    assert!(ds.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn bad_config_is_invalid_argument() {
    let ds = simulate(4, 10, 1);
    let cfg = CString::new(r#"{"train": {"epoch": 1}}"#).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cda_model_train(ds, ds, cfg.as_ptr(), &mut m), CdaStatus::InvalidArgument);
        assert!(last_error().contains("epoch"));
        cda_dataset_free(ds);
    }
}

#[test]
fn metrics_match_hand_values() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [1.0, 2.0, 3.0, 6.0];
    let mut m = CdaMetrics::default();
    assert_eq!(unsafe { cda_metrics(a.as_ptr(), b.as_ptr(), 4, &mut m) }, CdaStatus::Ok);
    assert!((m.rmse - 1.0).abs() < 1e-12);
    assert!((m.mae - 0.5).abs() < 1e-12);
    assert!(m.r2_defined);
    assert!((m.r2 - (1.0 - 4.0 / 5.0)).abs() < 1e-12);
    assert_eq!(m.n, 4);

    let c = [2.0; 3];
    assert_eq!(unsafe { cda_metrics(c.as_ptr(), c.as_ptr(), 3, &mut m) }, CdaStatus::Ok);
    assert!(!m.r2_defined);
    assert_eq!(unsafe { cda_metrics(c.as_ptr(), c.as_ptr(), 0, &mut m) }, CdaStatus::InvalidArgument);
}

#[test]
fn train_forecast_save_load() {
    let src = simulate(12, 16, 5);
    let tgt = simulate(4, 16, 6);
    let cfg = CString::new(SMALL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(cda_model_train(src, tgt, cfg.as_ptr(), &mut m), CdaStatus::Ok, "{}", last_error());
        assert_eq!(cda_model_steps(m), 2);

        let mut written = 0;
        assert_eq!(
            cda_model_forecast(m, tgt, 0, 10, ptr::null_mut(), 0, &mut written),
            CdaStatus::BufferTooSmall
        );
        assert_eq!(written, 6);
        let mut y = vec![0.0; 6];
        assert_eq!(cda_model_forecast(m, tgt, 0, 10, y.as_mut_ptr(), 6, &mut written), CdaStatus::Ok);
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(
            cda_model_forecast(m, tgt, 99, 10, y.as_mut_ptr(), 6, &mut written),
            CdaStatus::InvalidArgument
        );
        assert_eq!(
            cda_model_forecast(m, tgt, 0, 16, y.as_mut_ptr(), 6, &mut written),
            CdaStatus::InvalidArgument
        );

        let mut cate = [0.0; 16];
        assert_eq!(cda_model_cate(m, tgt, 0, 5, 2, 2, cate.as_mut_ptr(), 16), CdaStatus::Ok);
        assert!(cate.iter().all(|v| *v == 0.0));
        assert_eq!(cda_model_cate(m, tgt, 0, 5, 99, 0, cate.as_mut_ptr(), 16), CdaStatus::InvalidArgument);

        assert_eq!(cda_model_save(m, path.as_ptr()), CdaStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(cda_model_load(path.as_ptr(), &mut m2), CdaStatus::Ok);
        let mut y2 = vec![0.0; 6];
        assert_eq!(cda_model_forecast(m2, tgt, 0, 10, y2.as_mut_ptr(), 6, &mut written), CdaStatus::Ok);
        assert_eq!(y, y2);

        cda_model_free(m);
        cda_model_free(m2);
        cda_dataset_free(src);
        cda_dataset_free(tgt);
    }
}

#[test]
fn corrupt_checkpoint_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.ckpt");
    std::fs::write(&p, "not a checkpoint").unwrap();
    let path = CString::new(p.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cda_model_load(path.as_ptr(), &mut m) }, CdaStatus::Data);
    assert!(m.is_null());
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cda.h")).unwrap();
    for f in [
        "cda_last_error", "cda_version", "cda_dataset_simulate", "cda_dataset_load_csv",
        "cda_dataset_len", "cda_dataset_records", "cda_dataset_free", "cda_model_train",
        "cda_model_save", "cda_model_load", "cda_model_steps", "cda_model_forecast",
        "cda_model_cate", "cda_model_free", "cda_metrics",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct CdaModel CdaModel;"));
}
