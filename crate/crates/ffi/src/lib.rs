//! C ABI over the forecaster.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! style calls and released with the matching `*_free`. Every fallible call
//! returns a [`CdaStatus`]; the message of the most recent failure on the
//! calling thread is available through [`cda_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cda::checkpoint;
use cda::config::RunConfig;
use cda::dataset::{ingest_csv, normalize, DomainDataset, DomainTag, NormStats};
use cda::eval::{metrics, ModelForecaster, SuffixForecaster, CovariateFeed};
use cda::model::Dims;
use cda::scm::simulate_dataset;
use cda::trainer::{train, RunFiles, TrainState};
use serde::{Deserialize, Serialize};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Model = 5,
    Train = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A dataset of episodes in raw units.
pub struct CdaDataset {
    inner: DomainDataset,
}

/// A trained model together with the statistics used to normalise its
/// training data.
pub struct CdaModel {
    state: TrainState,
    stats: NormStats,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    state: TrainState,
    stats: NormStats,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CdaMetrics {
    /// Zero when R² is undefined (constant truth); see `r2_defined`.
    pub r2: f64,
    pub r2_defined: bool,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: CdaStatus, msg: impl std::fmt::Display) -> CdaStatus {
    set_error(msg.to_string());
    status
}

fn guard(f: impl FnOnce() -> CdaStatus) -> CdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == CdaStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(CdaStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, CdaStatus> {
    if p.is_null() {
        return Err(fail(CdaStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(CdaStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message of the last failure on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn cda_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulates `episodes` episodes of `length` steps from the default
/// structural model.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn cda_dataset_simulate(
    episodes: usize,
    length: usize,
    seed: u64,
    out: *mut *mut CdaDataset,
) -> CdaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdaStatus::NullPointer, "out is null");
        }
        let cfg = RunConfig::default();
        match simulate_dataset(&cfg.scm.spec, episodes, length, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CdaDataset { inner }));
                CdaStatus::Ok
            }
            Err(e) => fail(CdaStatus::InvalidArgument, e),
        }
    })
}

/// Reads a CSV file with the default treatment vocabulary.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_dataset_load_csv(path: *const c_char, target: bool, out: *mut *mut CdaDataset) -> CdaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdaStatus::NullPointer, "out is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let tag = if target { DomainTag::Target } else { DomainTag::Source };
        match ingest_csv(p, tag, &RunConfig::default().data.vocabulary) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(CdaDataset { inner }));
                CdaStatus::Ok
            }
            Err(cda::dataset::DataError::Io(e)) => fail(CdaStatus::Io, e),
            Err(e) => fail(CdaStatus::Data, e),
        }
    })
}

/// Number of episodes; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cda_dataset_len(ds: *const CdaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Total number of (episode, step) records; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cda_dataset_records(ds: *const CdaDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.records())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cda_dataset_free(ds: *mut CdaDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains on `source` and `target` (which may be the same handle).
/// `config_json` may be null for defaults; otherwise it is a run config
/// whose `model` and `train` sections are used.
///
/// # Safety
/// Handles must be live; `config_json` null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_model_train(
    source: *const CdaDataset,
    target: *const CdaDataset,
    config_json: *const c_char,
    out: *mut *mut CdaModel,
) -> CdaStatus {
    guard(|| {
        let (Some(s), Some(t)) = (source.as_ref(), target.as_ref()) else {
            return fail(CdaStatus::NullPointer, "dataset handle is null");
        };
        if out.is_null() {
            return fail(CdaStatus::NullPointer, "out is null");
        }
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            let text = match CStr::from_ptr(config_json).to_str() {
                Ok(t) => t,
                Err(_) => return fail(CdaStatus::InvalidArgument, "config is not valid UTF-8"),
            };
            match RunConfig::from_json(text) {
                Ok(c) => c,
                Err(e) => return fail(CdaStatus::InvalidArgument, e),
            }
        };
        let run = || -> Result<CdaModel, (CdaStatus, String)> {
            let data = |e: cda::dataset::DataError| (CdaStatus::Data, e.to_string());
            s.inner.check_compatible(&t.inner).map_err(data)?;
            let (src, stats) = normalize(&s.inner.clone().with_tag(DomainTag::Source), None).map_err(data)?;
            let (tgt, _) = normalize(&t.inner.clone().with_tag(DomainTag::Target), Some(&stats)).map_err(data)?;
            let dims = Dims {
                d_x: src.d_x,
                k: src.k(),
                u_dim: src.u_dim,
            };
            let model = cda::model::CdaModel::new(cfg.model.clone(), dims, cfg.train.seed)
                .map_err(|e| (CdaStatus::Model, e.to_string()))?;
            let state = TrainState::new(cfg.train.clone(), model, &src, &tgt)
                .and_then(|st| train(st, &src, &tgt, &RunFiles::default()))
                .map_err(|e| (CdaStatus::Train, e.to_string()))?;
            Ok(CdaModel { state, stats })
        };
        match run() {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                CdaStatus::Ok
            }
            Err((s, m)) => fail(s, m),
        }
    })
}

/// Writes a checkpoint of the model and its normalisation statistics.
///
/// # Safety
/// `model` must be live; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cda_model_save(model: *const CdaModel, path: *const c_char) -> CdaStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(CdaStatus::NullPointer, "model handle is null");
        };
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let stored = StoredModel {
            state: m.state.clone(),
            stats: m.stats.clone(),
        };
        match checkpoint::save(&stored, p) {
            Ok(()) => CdaStatus::Ok,
            Err(e) => fail(CdaStatus::Io, e),
        }
    })
}

/// # Safety
/// `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_model_load(path: *const c_char, out: *mut *mut CdaModel) -> CdaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CdaStatus::NullPointer, "out is null");
        }
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::load::<StoredModel>(p) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(CdaModel {
                    state: s.state,
                    stats: s.stats,
                }));
                CdaStatus::Ok
            }
            Err(checkpoint::CheckpointError::Io(e)) => fail(CdaStatus::Io, e),
            Err(e) => fail(CdaStatus::Data, e),
        }
    })
}

/// Number of optimiser steps the model was trained for.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn cda_model_steps(model: *const CdaModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.step)
}

/// Forecasts outcomes of episode `episode` for steps `split..len` from its
/// prefix, in raw units. `*written` receives the number of values; if
/// `capacity` is too small nothing is written and `BufferTooSmall` returned
/// with `*written` set to the required size.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` doubles; `written` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_model_forecast(
    model: *const CdaModel,
    data: *const CdaDataset,
    episode: usize,
    split: usize,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> CdaStatus {
    guard(|| {
        let (Some(m), Some(d)) = (model.as_ref(), data.as_ref()) else {
            return fail(CdaStatus::NullPointer, "handle is null");
        };
        if written.is_null() || (out.is_null() && capacity > 0) {
            return fail(CdaStatus::NullPointer, "output pointer is null");
        }
        let Some(ep) = d.inner.episodes.get(episode) else {
            return fail(
                CdaStatus::InvalidArgument,
                format!("episode {episode} out of range ({} episodes)", d.inner.len()),
            );
        };
        if split == 0 || split >= ep.len() {
            return fail(
                CdaStatus::InvalidArgument,
                format!("split {split} must lie in 1..{}", ep.len()),
            );
        }
        let need = ep.len() - split;
        *written = need;
        if capacity < need {
            return fail(CdaStatus::BufferTooSmall, format!("need {need} values, have {capacity}"));
        }
        let norm = m.stats.apply(ep);
        let f = ModelForecaster {
            model: &m.state.model,
            tag: d.inner.tag,
            covariates: CovariateFeed::Rollout,
        };
        match f.forecast_suffix(&norm, split) {
            Ok(y) => {
                for (i, v) in y.into_iter().enumerate() {
                    *out.add(i) = m.stats.y_to_raw(v);
                }
                CdaStatus::Ok
            }
            Err(e) => fail(CdaStatus::Model, e),
        }
    })
}

/// Estimated effect on the next covariates (raw units) of treatment `z`
/// against `z_ref` at step `t` of an episode. `out` must hold `d_x` values.
///
/// # Safety
/// Handles must be live; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn cda_model_cate(
    model: *const CdaModel,
    data: *const CdaDataset,
    episode: usize,
    t: usize,
    z: usize,
    z_ref: usize,
    out: *mut f64,
    capacity: usize,
) -> CdaStatus {
    guard(|| {
        let (Some(m), Some(d)) = (model.as_ref(), data.as_ref()) else {
            return fail(CdaStatus::NullPointer, "handle is null");
        };
        if out.is_null() {
            return fail(CdaStatus::NullPointer, "output pointer is null");
        }
        let model = &m.state.model;
        if capacity < model.dims.d_x {
            return fail(
                CdaStatus::BufferTooSmall,
                format!("need {} values, have {capacity}", model.dims.d_x),
            );
        }
        let Some(ep) = d.inner.episodes.get(episode) else {
            return fail(CdaStatus::InvalidArgument, format!("episode {episode} out of range"));
        };
        if t >= ep.len() || z >= model.dims.k || z_ref >= model.dims.k {
            return fail(CdaStatus::InvalidArgument, "step or treatment out of range");
        }
        let norm = m.stats.apply(ep);
        let res = model
            .encode(&norm, d.inner.tag)
            .and_then(|h| model.cate_hat(&h.h[t], z, z_ref, d.inner.tag));
        match res {
            Ok(c) => {
                for (i, v) in m.stats.x_delta_to_raw(&c).into_iter().enumerate() {
                    *out.add(i) = v;
                }
                CdaStatus::Ok
            }
            Err(e) => fail(CdaStatus::Model, e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cda_model_free(model: *mut CdaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// R², RMSE and MAE of `n` paired values.
///
/// # Safety
/// `y_true` and `y_pred` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_metrics(y_true: *const f64, y_pred: *const f64, n: usize, out: *mut CdaMetrics) -> CdaStatus {
    guard(|| {
        if y_true.is_null() || y_pred.is_null() || out.is_null() {
            return fail(CdaStatus::NullPointer, "null pointer argument");
        }
        if n == 0 {
            return fail(CdaStatus::InvalidArgument, "n must be positive");
        }
        let a = std::slice::from_raw_parts(y_true, n);
        let b = std::slice::from_raw_parts(y_pred, n);
        match metrics(a, b) {
            Ok(m) => {
                *out = CdaMetrics {
                    r2: m.r2.unwrap_or(0.0),
                    r2_defined: m.r2.is_some(),
                    rmse: m.rmse,
                    mae: m.mae,
                    n: m.n,
                };
                CdaStatus::Ok
            }
            Err(e) => fail(CdaStatus::InvalidArgument, e),
        }
    })
}
