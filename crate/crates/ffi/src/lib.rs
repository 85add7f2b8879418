//! C ABI over the entdiff library.
//!
//! Every fallible function returns an [`EntdiffStatus`]. On failure, a
//! description is available from [`entdiff_last_error`] on the same thread.
//! Strings returned through out-parameters are owned by the caller and must
//! be released with [`entdiff_string_free`]; models with
//! [`entdiff_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use entdiff::dataset::{read_jsonl, write_csv, write_jsonl};
use entdiff::evaluation::toy::toy_dataset;
use entdiff::generation::{generate, sample_batch, NumericMode, SampleConfig};
use entdiff::model::Model;
use entdiff::schema::{Cell, EntityInstance};
use entdiff::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntdiffStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Data = 3,
    Numerical = 4,
    Checkpoint = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model.
pub struct EntdiffModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EntdiffStatus {
    match e {
        Error::InvalidArgument(_) => EntdiffStatus::InvalidArgument,
        Error::Numerical(_) => EntdiffStatus::Numerical,
        Error::Checkpoint(_) => EntdiffStatus::Checkpoint,
        Error::Io(_) => EntdiffStatus::Io,
        Error::Schema(_) | Error::Data(_) | Error::Json(_) | Error::Csv(_) => EntdiffStatus::Data,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EntdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EntdiffStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed as `{what}`"));
            EntdiffStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            EntdiffStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Lib(Error::invalid(format!("`{what}` is not valid UTF-8"))))
}

unsafe fn model_arg<'a>(p: *const EntdiffModel) -> Result<&'a Model, Failure> {
    p.as_ref().map(|m| &m.model).ok_or(Failure::Null("model"))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    let c = CString::new(s).map_err(|_| Failure::Lib(Error::data("output contains a nul byte")))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the most recent failure on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn entdiff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn entdiff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn entdiff_model_load(path: *const c_char, out: *mut *mut EntdiffModel) -> EntdiffStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let model = Model::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(EntdiffModel { model }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`entdiff_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn entdiff_model_free(model: *mut EntdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of leaves in the model's schema, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn entdiff_model_leaf_count(model: *const EntdiffModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.dim())
}

/// Schema fingerprint of the model as a new string.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn entdiff_model_fingerprint(model: *const EntdiffModel, out: *mut *mut c_char) -> EntdiffStatus {
    guard(|| {
        let m = model_arg(model)?;
        put_string(out, m.schema.fingerprint())
    })
}

/// Draw `n` entities and return them as JSON lines. `leap` above the leaf
/// count is clamped.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn entdiff_sample_jsonl(
    model: *const EntdiffModel,
    n: usize,
    leap: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> EntdiffStatus {
    guard(|| {
        let m = model_arg(model)?;
        let cfg = SampleConfig { leap: leap.min(m.dim()), seed, ..SampleConfig::default() };
        let entities: Vec<EntityInstance> = generate(m, n, &cfg)?.into_iter().map(|o| o.entity).collect();
        put_string(out, write_jsonl(&entities, &m.schema))
    })
}

/// Fill the absent leaves of every JSON line in `input`. `point` selects
/// deterministic values instead of draws.
///
/// # Safety
/// `model` must be a live handle, `input` a nul-terminated string and `out`
/// a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn entdiff_impute_jsonl(
    model: *const EntdiffModel,
    input: *const c_char,
    leap: usize,
    seed: u64,
    point: bool,
    out: *mut *mut c_char,
) -> EntdiffStatus {
    guard(|| {
        let m = model_arg(model)?;
        let text = str_arg(input, "input")?;
        let rows: Vec<EntityInstance> = read_jsonl(text, &m.schema)?
            .into_iter()
            .map(|e| EntityInstance::new(e.cells.into_iter().map(|c| if c.is_missing() { Cell::Masked } else { c }).collect()))
            .collect();
        let cfg = SampleConfig {
            leap: leap.clamp(1, m.dim()),
            seed,
            numeric_mode: if point { NumericMode::Point } else { NumericMode::Sample },
            ..SampleConfig::default()
        };
        let done: Vec<EntityInstance> = sample_batch(m, &rows, &cfg, 0)?.into_iter().map(|o| o.entity).collect();
        put_string(out, write_jsonl(&done, &m.schema))
    })
}

/// Generate a built-in toy dataset as CSV text.
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn entdiff_toy_csv(
    name: *const c_char,
    n: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut c_char,
) -> EntdiffStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let toy = toy_dataset(name, n, noise, seed)?;
        put_string(out, write_csv(&toy.entities, &toy.schema)?)
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn entdiff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
