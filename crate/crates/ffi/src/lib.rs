//! C interface to relicl: opaque store, model and prediction handles, status codes
//! and a per-thread last-error message. The header lives in `include/relicl.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use relicl::cli::{predict_query, CliError, QueryRequest};
use relicl::colstore::{ingest_dir, load_store, save_store, IngestOptions, Store};
use relicl::icl_model::{Model, ModelConfig, RunMode};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad query, arguments or input files.
    InvalidInput = 3,
    /// Failure while running.
    Runtime = 4,
    Panic = 5,
    /// The caller's buffer cannot hold the result; nothing was written.
    BufferTooSmall = 6,
    OutOfRange = 7,
}

/// A loaded store.
pub struct RlStore {
    inner: Store,
}

/// Model parameters and configuration.
pub struct RlModel {
    inner: Model,
}

/// Results of one prediction call.
pub struct RlPredictions {
    keys: Vec<String>,
    values: Vec<f64>,
    anchors: Vec<i64>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: RlStatus, msg: impl Into<String>) -> RlStatus {
    set_error(msg);
    status
}

fn from_cli(e: CliError) -> RlStatus {
    match e {
        CliError::Input(m) => fail(RlStatus::InvalidInput, m),
        CliError::Runtime(m) => fail(RlStatus::Runtime, m),
    }
}

/// Runs `f`, clearing the last error first and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> RlStatus) -> RlStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RlStatus::Panic, msg)
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, RlStatus> {
    if p.is_null() {
        return Err(fail(RlStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RlStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, RlStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

fn check_out<T>(out: *mut T) -> Result<(), RlStatus> {
    if out.is_null() {
        Err(fail(RlStatus::NullPointer, "output pointer is null"))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, without the NUL.
#[no_mangle]
pub extern "C" fn rl_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message, NUL-terminated, into `buf`.
///
/// # Safety
/// `buf` must be writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rl_last_error_message(buf: *mut c_char, cap: usize) -> RlStatus {
    if buf.is_null() {
        return RlStatus::NullPointer;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if cap < e.len() + 1 {
            return RlStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), e.len());
        *buf.add(e.len()) = 0;
        RlStatus::Ok
    })
}

/// Ingests a directory of CSV files into a new store.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_store_ingest_dir(dir: *const c_char, out: *mut *mut RlStore) -> RlStatus {
    guard(|| {
        let dir = tri!(text(dir, "dir"));
        tri!(check_out(out));
        match ingest_dir(Path::new(dir), &[], &IngestOptions::default()) {
            Ok((store, _)) => {
                *out = Box::into_raw(Box::new(RlStore { inner: store }));
                RlStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Opens a store file.
///
/// # Safety
/// `path` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_store_load(path: *const c_char, out: *mut *mut RlStore) -> RlStatus {
    guard(|| {
        let path = tri!(text(path, "path"));
        tri!(check_out(out));
        match load_store(Path::new(path)) {
            Ok(store) => {
                *out = Box::into_raw(Box::new(RlStore { inner: store }));
                RlStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Writes a store file.
///
/// # Safety
/// `store` is a live handle; `path` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn rl_store_save(store: *const RlStore, path: *const c_char) -> RlStatus {
    guard(|| {
        let Some(store) = store.as_ref() else {
            return fail(RlStatus::NullPointer, "store is null");
        };
        let path = tri!(text(path, "path"));
        match save_store(&store.inner, Path::new(path)) {
            Ok(()) => RlStatus::Ok,
            Err(e) => fail(RlStatus::Runtime, e.to_string()),
        }
    })
}

/// Number of rows of table `table`.
///
/// # Safety
/// `store` is a live handle; `table` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_store_row_count(store: *const RlStore, table: *const c_char, out: *mut usize) -> RlStatus {
    guard(|| {
        let Some(store) = store.as_ref() else {
            return fail(RlStatus::NullPointer, "store is null");
        };
        let table = tri!(text(table, "table"));
        tri!(check_out(out));
        match store.inner.graph.table_by_name(table) {
            Some(t) => {
                *out = t.row_count();
                RlStatus::Ok
            }
            None => fail(RlStatus::InvalidInput, format!("unknown table '{table}'")),
        }
    })
}

/// # Safety
/// `store` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_store_free(store: *mut RlStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Creates an untrained model with the preset of `run_mode` ("fast", "normal",
/// "best" or "toy").
///
/// # Safety
/// `run_mode` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_new(run_mode: *const c_char, seed: u64, out: *mut *mut RlModel) -> RlStatus {
    guard(|| {
        let mode = tri!(text(run_mode, "run_mode"));
        tri!(check_out(out));
        let config = if mode == "toy" {
            ModelConfig::toy()
        } else {
            match mode.parse::<RunMode>() {
                Ok(m) => ModelConfig::preset(m),
                Err(e) => return fail(RlStatus::InvalidInput, e.to_string()),
            }
        };
        match Model::new(config, seed) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(RlModel { inner: m }));
                RlStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_load(dir: *const c_char, out: *mut *mut RlModel) -> RlStatus {
    guard(|| {
        let dir = tri!(text(dir, "dir"));
        tri!(check_out(out));
        match Model::load(Path::new(dir)) {
            Ok((m, _)) => {
                *out = Box::into_raw(Box::new(RlModel { inner: m }));
                RlStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_model_param_count(model: *const RlModel, out: *mut usize) -> RlStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(RlStatus::NullPointer, "model is null");
        };
        tri!(check_out(out));
        *out = model.inner.param_count();
        RlStatus::Ok
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_model_free(model: *mut RlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts a query for entity keys `keys[0..n_keys]` (every visible entity when
/// `keys` is null) at `anchor_time` (ISO-8601; may be null for static queries)
/// with per-hop neighbor caps `fanouts[0..n_fanouts]`.
///
/// # Safety
/// Handles are live; strings are NUL-terminated; `keys` and `fanouts` point to
/// `n_keys` strings and `n_fanouts` values (or are null with a zero count);
/// `out` is writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rl_predict(
    model: *const RlModel,
    store: *const RlStore,
    query: *const c_char,
    anchor_time: *const c_char,
    keys: *const *const c_char,
    n_keys: usize,
    fanouts: *const usize,
    n_fanouts: usize,
    seed: u64,
    out: *mut *mut RlPredictions,
) -> RlStatus {
    guard(|| {
        let (Some(model), Some(store)) = (model.as_ref(), store.as_ref()) else {
            return fail(RlStatus::NullPointer, "model or store is null");
        };
        let query = tri!(text(query, "query"));
        let anchor = tri!(opt_text(anchor_time, "anchor_time"));
        tri!(check_out(out));
        let keys: Option<Vec<String>> = if keys.is_null() {
            None
        } else {
            let mut v = Vec::with_capacity(n_keys);
            for i in 0..n_keys {
                v.push(tri!(text(*keys.add(i), "key")).to_string());
            }
            Some(v)
        };
        let fanouts: Vec<usize> = if n_fanouts == 0 {
            Vec::new()
        } else if fanouts.is_null() {
            return fail(RlStatus::NullPointer, "fanouts is null");
        } else {
            std::slice::from_raw_parts(fanouts, n_fanouts).to_vec()
        };
        let req = QueryRequest {
            query,
            anchor_time: anchor,
            indices: keys.as_deref(),
            num_neighbors: &fanouts,
            run_mode: RunMode::Fast,
            lag_timesteps: None,
            seed,
        };
        match predict_query(&model.inner, &store.inner, &req) {
            Ok((plan, preds)) => {
                let table = store.inner.graph.table(plan.entity.table_index);
                let result = RlPredictions {
                    keys: preds
                        .iter()
                        .map(|p| {
                            table
                                .key_of_row(p.entity as usize)
                                .map_or_else(|| p.entity.to_string(), str::to_string)
                        })
                        .collect(),
                    values: preds.iter().map(|p| p.prediction).collect(),
                    anchors: preds.iter().map(|p| p.anchor_time).collect(),
                };
                *out = Box::into_raw(Box::new(result));
                RlStatus::Ok
            }
            Err(e) => from_cli(e),
        }
    })
}

/// Number of prediction rows, or 0 for a null handle.
///
/// # Safety
/// `preds` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rl_predictions_len(preds: *const RlPredictions) -> usize {
    preds.as_ref().map_or(0, |p| p.values.len())
}

/// Prediction value and anchor time (epoch ms) of row `i`.
///
/// # Safety
/// `preds` is a live handle; `value` and `anchor_ms` are writable.
#[no_mangle]
pub unsafe extern "C" fn rl_predictions_get(
    preds: *const RlPredictions,
    i: usize,
    value: *mut f64,
    anchor_ms: *mut i64,
) -> RlStatus {
    let Some(p) = preds.as_ref() else {
        return fail(RlStatus::NullPointer, "predictions is null");
    };
    if value.is_null() || anchor_ms.is_null() {
        return fail(RlStatus::NullPointer, "output pointer is null");
    }
    if i >= p.values.len() {
        return fail(RlStatus::OutOfRange, format!("row {i} of {}", p.values.len()));
    }
    *value = p.values[i];
    *anchor_ms = p.anchors[i];
    RlStatus::Ok
}

/// Copies the entity key of row `i`, NUL-terminated, into `buf`.
///
/// # Safety
/// `preds` is a live handle; `buf` is writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rl_predictions_entity(
    preds: *const RlPredictions,
    i: usize,
    buf: *mut c_char,
    cap: usize,
) -> RlStatus {
    let Some(p) = preds.as_ref() else {
        return fail(RlStatus::NullPointer, "predictions is null");
    };
    if buf.is_null() {
        return fail(RlStatus::NullPointer, "buffer is null");
    }
    let Some(key) = p.keys.get(i) else {
        return fail(RlStatus::OutOfRange, format!("row {i} of {}", p.keys.len()));
    };
    if cap < key.len() + 1 {
        return fail(
            RlStatus::BufferTooSmall,
            format!("entity key needs {} bytes", key.len() + 1),
        );
    }
    std::ptr::copy_nonoverlapping(key.as_ptr(), buf.cast::<u8>(), key.len());
    *buf.add(key.len()) = 0;
    RlStatus::Ok
}

/// # Safety
/// `preds` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rl_predictions_free(preds: *mut RlPredictions) {
    if !preds.is_null() {
        drop(Box::from_raw(preds));
    }
}

/// Area under the ROC curve of `scores` against 0/1 `labels`, both of length `n`.
///
/// # Safety
/// `scores` and `labels` point to `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn rl_auroc(scores: *const f64, labels: *const f64, n: usize, out: *mut f64) -> RlStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() {
            return fail(RlStatus::NullPointer, "scores or labels is null");
        }
        tri!(check_out(out));
        let s = std::slice::from_raw_parts(scores, n);
        let y = std::slice::from_raw_parts(labels, n);
        match relicl::metrics::auroc(s, y) {
            Ok(v) => {
                *out = v;
                RlStatus::Ok
            }
            Err(e) => fail(RlStatus::InvalidInput, e.to_string()),
        }
    })
}
