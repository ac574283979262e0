//! C ABI over `dks-core`.
//!
//! Models are opaque `DksModel` handles created by `dks_model_preset` or
//! `dks_model_load` and released with `dks_model_free`. Every fallible call
//! returns a `DksStatus`; on failure `dks_last_error` describes it.
//! Strings are NUL-terminated UTF-8. Model arithmetic is 32-bit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use dks_core::checkpoint;
use dks_core::config::{run_training, RunConfig};
use dks_core::model::{ModelSpec, MultiHeadModel};
use dks_core::suites::{self, Suite, SuiteOptions};
use dks_core::{Error, Tensor};

/// Status codes. Values 1-4 equal the `dks` process exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DksStatus {
    Ok = 0,
    VerificationFailed = 1,
    ConfigError = 2,
    TrainingAborted = 3,
    IoError = 4,
    /// Null pointer, bad UTF-8 or a buffer of the wrong size.
    InvalidArgument = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

/// Opaque model handle.
pub struct DksModel {
    inner: MultiHeadModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DksStatus {
    match e.exit_code() {
        1 => DksStatus::VerificationFailed,
        2 => DksStatus::ConfigError,
        3 => DksStatus::TrainingAborted,
        _ => DksStatus::IoError,
    }
}

enum Fail {
    Core(Error),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DksStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DksStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            DksStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".into());
            DksStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const DksModel) -> Result<&'a DksModel, Fail> {
    m.as_ref().ok_or_else(|| Fail::Arg("model is null".into()))
}

unsafe fn put_model(out: *mut *mut DksModel, model: MultiHeadModel<f32>) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Arg("out is null".into()));
    }
    *out = Box::into_raw(Box::new(DksModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dks_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a named preset (`cifar-mini`, `tiny-imagenet-mini`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dks_model_preset(
    name: *const c_char,
    num_classes: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut DksModel,
) -> DksStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let spec = ModelSpec::preset(name, num_classes, image_size)?;
        put_model(out, MultiHeadModel::build(&spec, seed)?)
    })
}

/// Loads a checkpoint manifest (the blob is read from `<path>.bin`).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dks_model_load(path: *const c_char, out: *mut *mut DksModel) -> DksStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put_model(out, checkpoint::load(&path)?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dks_model_save(model: *const DksModel, path: *const c_char) -> DksStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Ok(checkpoint::save(&m.inner, &path)?)
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dks_model_free(model: *mut DksModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classifier heads (1 + auxiliary heads); 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dks_model_num_heads(model: *const DksModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_heads())
}

/// Trainable parameter count; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dks_model_trainable_count(model: *const DksModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.trainable_count())
}

/// Number of classes; 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dks_model_num_classes(model: *const DksModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.spec().num_classes)
}

/// Number of floats in one input sample (channels x height x width); 0 for null.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn dks_model_sample_len(model: *const DksModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.inner.spec().input_shape.iter().product())
}

/// Eval-mode logits of head `head` (0 = C1, 1 = C2, ...) for `batch`
/// NCHW samples. `out` receives `batch * num_classes` floats.
///
/// # Safety
/// `input` must hold `batch * sample_len` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn dks_model_forward(
    model: *const DksModel,
    input: *const f32,
    batch: usize,
    head: usize,
    out: *mut f32,
    out_len: usize,
) -> DksStatus {
    guard(|| {
        let m = &model_ref(model)?.inner;
        if input.is_null() || out.is_null() {
            return Err(Fail::Arg("input or out is null".into()));
        }
        if head >= m.num_heads() {
            return Err(Fail::Arg(format!(
                "head {head} out of range ({} heads)",
                m.num_heads()
            )));
        }
        let [c, h, w] = m.spec().input_shape;
        let k = m.spec().num_classes;
        if batch == 0 || out_len != batch * k {
            return Err(Fail::Arg(format!("out_len must be batch * {k}")));
        }
        let x = std::slice::from_raw_parts(input, batch * c * h * w).to_vec();
        let x = Tensor::new(&[batch, c, h, w], x)?;
        let logits = m.predict(&x)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(logits[head].data());
        Ok(())
    })
}

/// New model holding only the backbone and C1.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dks_model_strip(
    model: *const DksModel,
    out: *mut *mut DksModel,
) -> DksStatus {
    guard(|| {
        let m = model_ref(model)?;
        put_model(out, m.inner.strip_aux()?)
    })
}

/// Runs a training config as `dks train` does. `out_dir` may be null to use
/// the config's `out`.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dks_train(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> DksStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(config_path, "config_path")?);
        let mut cfg = RunConfig::load(&path)?;
        if !out_dir.is_null() {
            cfg.out = Some(PathBuf::from(str_arg(out_dir, "out_dir")?));
        }
        cfg.validate()?;
        let dir = cfg
            .out
            .clone()
            .ok_or_else(|| Error::config("out: no output directory"))?;
        let (tr, te) = cfg.load_data()?;
        run_training(&cfg, &tr, &te, &dir, 32)?;
        Ok(())
    })
}

/// Runs a verification suite (`grads`, `synergy`, `all`) with default
/// options and `n_samples` Monte-Carlo samples per sigma. Reports go to
/// `out_dir` unless it is null.
///
/// # Safety
/// `suite` must be NUL-terminated; `out_dir` null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dks_verify(
    suite: *const c_char,
    n_samples: usize,
    out_dir: *const c_char,
) -> DksStatus {
    guard(|| {
        let suite: Suite = str_arg(suite, "suite")?.parse()?;
        let dir = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(str_arg(out_dir, "out_dir")?))
        };
        let opts = SuiteOptions {
            n_samples,
            ..Default::default()
        };
        let outcomes = suites::run(suite, &opts, dir.as_deref())?;
        Ok(suites::require_pass(&outcomes)?)
    })
}
