//! C ABI for the graphdive library.
//!
//! Conventions:
//! * Objects cross the boundary as opaque handles (`GdiveDataset`,
//!   `GdiveModel`) created and destroyed by this library.
//! * Every fallible call returns a [`GdiveStatus`]; on failure the message
//!   is retrievable with [`gdive_last_error`] (thread-local, valid until
//!   the next failing call on the same thread).
//! * Strings returned through out-parameters are heap-allocated and must
//!   be released with [`gdive_string_free`].

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use libc::{c_char, c_double};

use graphdive::graph::{Dataset, Split};
use graphdive::io;
use graphdive::metrics;
use graphdive::model::Model;
use graphdive::train::{self, Checkpoint};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GdiveStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    IoFailure = 4,
    TrainFailure = 5,
    EvalFailure = 6,
    GradCheckFailed = 7,
}

/// Opaque dataset handle.
pub struct GdiveDataset {
    ds: Dataset,
}

/// Opaque trained-model handle: the checkpoint plus the best-epoch model.
pub struct GdiveModel {
    ckpt: Checkpoint,
    best: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn fail(status: GdiveStatus, message: impl std::fmt::Display) -> GdiveStatus {
    let text = CString::new(message.to_string())
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
    status
}

/// Message for the most recent failure on this thread. Never null; empty
/// when no failure has occurred. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn gdive_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn gdive_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, GdiveStatus> {
    if ptr.is_null() {
        return Err(GdiveStatus::NullArgument);
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| GdiveStatus::InvalidUtf8)
}

fn return_string(out: *mut *mut c_char, text: String) -> GdiveStatus {
    let c = match CString::new(text) {
        Ok(c) => c,
        Err(e) => return fail(GdiveStatus::EvalFailure, e),
    };
    unsafe { *out = c.into_raw() };
    GdiveStatus::Ok
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned through one of this
/// library's string out-parameters, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gdive_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Load a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_load(
    path: *const c_char,
    out: *mut *mut GdiveDataset,
) -> GdiveStatus {
    if out.is_null() {
        return fail(GdiveStatus::NullArgument, "out pointer is null");
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path argument"),
    };
    match io::load_dataset(Path::new(path)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(GdiveDataset { ds }));
            GdiveStatus::Ok
        }
        Err(e) => fail(GdiveStatus::IoFailure, e),
    }
}

/// Generate a synthetic benchmark dataset from a flat key=value spec.
///
/// # Safety
/// `spec_text` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_synth(
    spec_text: *const c_char,
    out: *mut *mut GdiveDataset,
) -> GdiveStatus {
    if out.is_null() {
        return fail(GdiveStatus::NullArgument, "out pointer is null");
    }
    let text = match cstr_arg(spec_text) {
        Ok(t) => t,
        Err(s) => return fail(s, "spec argument"),
    };
    let spec = match io::parse_synth_spec(text) {
        Ok(s) => s,
        Err(e) => return fail(GdiveStatus::InvalidArgument, e),
    };
    match io::synth_generate(&spec) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(GdiveDataset { ds }));
            GdiveStatus::Ok
        }
        Err(e) => fail(GdiveStatus::InvalidArgument, e),
    }
}

/// Write a dataset to a file (atomic).
///
/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_save(
    ds: *const GdiveDataset,
    path: *const c_char,
) -> GdiveStatus {
    if ds.is_null() {
        return fail(GdiveStatus::NullArgument, "dataset handle is null");
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path argument"),
    };
    match io::save_dataset(&(*ds).ds, Path::new(path)) {
        Ok(()) => GdiveStatus::Ok,
        Err(e) => fail(GdiveStatus::IoFailure, e),
    }
}

/// Number of graphs, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_len(ds: *const GdiveDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).ds.len()
    }
}

/// Number of tasks, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_num_tasks(ds: *const GdiveDataset) -> usize {
    if ds.is_null() {
        0
    } else {
        (*ds).ds.num_tasks()
    }
}

/// Destroy a dataset handle.
///
/// # Safety
/// `ds` must be null or a handle produced by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gdive_dataset_free(ds: *mut GdiveDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---------------------------------------------------------------------------
// Training and models
// ---------------------------------------------------------------------------

fn model_from_checkpoint(ckpt: Checkpoint) -> Result<GdiveModel, train::TrainError> {
    let best = ckpt.best_model()?;
    Ok(GdiveModel { ckpt, best })
}

/// Train a model on `ds` with a flat key=value config.
///
/// # Safety
/// `ds` must be a live dataset handle; `config_text` a NUL-terminated
/// string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_train(
    ds: *const GdiveDataset,
    config_text: *const c_char,
    out: *mut *mut GdiveModel,
) -> GdiveStatus {
    if ds.is_null() || out.is_null() {
        return fail(GdiveStatus::NullArgument, "dataset or out pointer is null");
    }
    let text = match cstr_arg(config_text) {
        Ok(t) => t,
        Err(s) => return fail(s, "config argument"),
    };
    let cfg = match io::parse_train_config(text) {
        Ok(c) => c,
        Err(e) => return fail(GdiveStatus::InvalidArgument, e),
    };
    let ckpt = match train::train(&cfg, &(*ds).ds) {
        Ok(c) => c,
        Err(e) => return fail(GdiveStatus::TrainFailure, e),
    };
    match model_from_checkpoint(ckpt) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(m));
            GdiveStatus::Ok
        }
        Err(e) => fail(GdiveStatus::TrainFailure, e),
    }
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_model_load(
    path: *const c_char,
    out: *mut *mut GdiveModel,
) -> GdiveStatus {
    if out.is_null() {
        return fail(GdiveStatus::NullArgument, "out pointer is null");
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path argument"),
    };
    let ckpt = match io::load_checkpoint(Path::new(path)) {
        Ok(c) => c,
        Err(e) => return fail(GdiveStatus::IoFailure, e),
    };
    match model_from_checkpoint(ckpt) {
        Ok(m) => {
            *out = Box::into_raw(Box::new(m));
            GdiveStatus::Ok
        }
        Err(e) => fail(GdiveStatus::IoFailure, e),
    }
}

/// Write a checkpoint file (atomic, checksummed).
///
/// # Safety
/// `model` must be a live model handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gdive_model_save(
    model: *const GdiveModel,
    path: *const c_char,
) -> GdiveStatus {
    if model.is_null() {
        return fail(GdiveStatus::NullArgument, "model handle is null");
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return fail(s, "path argument"),
    };
    match io::save_checkpoint(&(*model).ckpt, Path::new(path)) {
        Ok(()) => GdiveStatus::Ok,
        Err(e) => fail(GdiveStatus::IoFailure, e),
    }
}

/// `p(y=1 | graph, task)` for one graph of `ds` under the best-epoch
/// parameters.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_prob` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_model_predict(
    model: *const GdiveModel,
    ds: *const GdiveDataset,
    graph_index: usize,
    task: usize,
    out_prob: *mut c_double,
) -> GdiveStatus {
    if model.is_null() || ds.is_null() || out_prob.is_null() {
        return fail(GdiveStatus::NullArgument, "handle or out pointer is null");
    }
    let dataset = &(*ds).ds;
    if graph_index >= dataset.len() {
        return fail(
            GdiveStatus::InvalidArgument,
            format!("graph index {graph_index} out of range ({})", dataset.len()),
        );
    }
    let handle = &*model;
    let mean_mix = handle.ckpt.cfg.variant.uses_mean_mix();
    match handle.best.predict(&dataset.graphs[graph_index], task, mean_mix) {
        Ok(p) => {
            *out_prob = p;
            GdiveStatus::Ok
        }
        Err(e) => fail(GdiveStatus::EvalFailure, e),
    }
}

/// Evaluate on a split ("train" | "valid" | "test"); returns the report as
/// a TSV string (free with [`gdive_string_free`]).
///
/// # Safety
/// `model` and `ds` must be live handles; `split` a NUL-terminated string;
/// `out_report` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_model_eval(
    model: *const GdiveModel,
    ds: *const GdiveDataset,
    split: *const c_char,
    out_report: *mut *mut c_char,
) -> GdiveStatus {
    if model.is_null() || ds.is_null() || out_report.is_null() {
        return fail(GdiveStatus::NullArgument, "handle or out pointer is null");
    }
    let split = match cstr_arg(split) {
        Ok(s) => s,
        Err(st) => return fail(st, "split argument"),
    };
    let split: Split = match split.parse() {
        Ok(s) => s,
        Err(e) => return fail(GdiveStatus::InvalidArgument, e),
    };
    let handle = &*model;
    let mean_mix = handle.ckpt.cfg.variant.uses_mean_mix();
    match metrics::evaluate(&handle.best, &(*ds).ds, split, mean_mix) {
        Ok(report) => return_string(out_report, io::render_eval_report(&report)),
        Err(e) => fail(GdiveStatus::EvalFailure, e),
    }
}

/// Per-class mean gate weights on a split, as a TSV string.
///
/// # Safety
/// Same contracts as [`gdive_model_eval`].
#[no_mangle]
pub unsafe extern "C" fn gdive_model_expert_usage(
    model: *const GdiveModel,
    ds: *const GdiveDataset,
    split: *const c_char,
    task: usize,
    out_report: *mut *mut c_char,
) -> GdiveStatus {
    if model.is_null() || ds.is_null() || out_report.is_null() {
        return fail(GdiveStatus::NullArgument, "handle or out pointer is null");
    }
    let split = match cstr_arg(split) {
        Ok(s) => s,
        Err(st) => return fail(st, "split argument"),
    };
    let split: Split = match split.parse() {
        Ok(s) => s,
        Err(e) => return fail(GdiveStatus::InvalidArgument, e),
    };
    let handle = &*model;
    match metrics::expert_usage(&handle.best, &(*ds).ds, split, task) {
        Ok(usage) => return_string(out_report, io::render_expert_usage(&usage)),
        Err(e) => fail(GdiveStatus::EvalFailure, e),
    }
}

/// Destroy a model handle.
///
/// # Safety
/// `model` must be null or a handle produced by this library, not freed.
#[no_mangle]
pub unsafe extern "C" fn gdive_model_free(model: *mut GdiveModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Run the finite-difference gradient-check suite over `seeds` seeds.
/// Writes the worst relative error and fails unless it is below 1e-4.
///
/// # Safety
/// `out_max_rel_error` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gdive_gradcheck(
    seeds: usize,
    out_max_rel_error: *mut c_double,
) -> GdiveStatus {
    if out_max_rel_error.is_null() {
        return fail(GdiveStatus::NullArgument, "out pointer is null");
    }
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    match train::gradcheck_suite(&seed_list) {
        Ok(cases) => {
            let worst = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            *out_max_rel_error = worst;
            if worst < 1e-4 {
                GdiveStatus::Ok
            } else {
                fail(
                    GdiveStatus::GradCheckFailed,
                    format!("worst relative error {worst:.3e} exceeds 1e-4"),
                )
            }
        }
        Err(e) => fail(GdiveStatus::TrainFailure, e),
    }
}
