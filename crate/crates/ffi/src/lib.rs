//! C ABI over the `hqcnf` flow model.
//!
//! Models are opaque [`HqcnfModel`] handles created by `hqcnf_model_new` or
//! `hqcnf_model_load` and released with `hqcnf_model_free`. Every fallible
//! call returns an [`HqcnfStatus`]; on failure the message is available from
//! `hqcnf_last_error_message` on the same thread. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hqcnf::flow::{Checkpoint, FlowModel, ModelConfig};
use hqcnf::metrics::{fid_score, FeatureStats};
use hqcnf::qsim::AnsatzKind;
use hqcnf::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HqcnfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Numeric = 4,
    Parse = 5,
    Io = 6,
    Version = 7,
    Config = 8,
    Panic = 9,
}

/// Circuit layout of the quantum blocks.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HqcnfAnsatz {
    RyCnot = 0,
    RzRyRzCnot = 1,
}

/// Opaque model handle.
pub struct HqcnfModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(HqcnfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => HqcnfStatus::Dimension,
            Error::Numeric(_) | Error::NonFiniteLoss { .. } | Error::Degenerate(_) => HqcnfStatus::Numeric,
            Error::Parse { .. } => HqcnfStatus::Parse,
            Error::Io { .. } => HqcnfStatus::Io,
            Error::Version { .. } => HqcnfStatus::Version,
            Error::Config(_) => HqcnfStatus::Config,
            Error::Domain(_) | Error::Contract(_) => HqcnfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HqcnfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HqcnfStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HqcnfStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HqcnfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("panic: {msg}"));
            HqcnfStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const HqcnfModel) -> Result<&'a HqcnfModel, Failure> {
    model.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice_in<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(str::to_string)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

fn check_len(model: &FlowModel, len: usize, what: &str) -> Result<(), Failure> {
    if len != model.dim() {
        return Err(Failure(
            HqcnfStatus::Dimension,
            format!("{what} has length {len}, model dimension is {}", model.dim()),
        ));
    }
    Ok(())
}

fn emit(model: FlowModel, out: *mut *mut HqcnfModel) {
    let handle = Box::new(HqcnfModel {
        checkpoint: Checkpoint::new(model, None),
    });
    // SAFETY: caller checked `out` is non-null.
    unsafe { *out = Box::into_raw(handle) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hqcnf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if it succeeded.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn hqcnf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a freshly initialised model. With `hybrid` false the qubit and
/// circuit arguments are ignored.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_new(
    dim: usize,
    coupling_layers: usize,
    hybrid: bool,
    n_qubits: usize,
    ansatz: HqcnfAnsatz,
    circuit_layers: usize,
    seed: u64,
    out: *mut *mut HqcnfModel,
) -> HqcnfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = match ansatz {
            HqcnfAnsatz::RyCnot => AnsatzKind::RyCnot,
            HqcnfAnsatz::RzRyRzCnot => AnsatzKind::RzRyRzCnot,
        };
        let config = if hybrid {
            ModelConfig::hybrid(dim, coupling_layers, n_qubits, kind, circuit_layers)
        } else {
            ModelConfig::classical(dim, coupling_layers)
        };
        emit(FlowModel::new(&config, seed)?, out);
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_load(path: *const c_char, out: *mut *mut HqcnfModel) -> HqcnfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(HqcnfModel { checkpoint }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_save(model: *const HqcnfModel, path: *const c_char) -> HqcnfStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.checkpoint.save(path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_free(model: *mut HqcnfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_dim(model: *const HqcnfModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.dim())
}

/// Number of trainable scalars, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_param_count(model: *const HqcnfModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.param_count())
}

/// Data to latent: writes `z` (length `len`) and the log-determinant.
///
/// # Safety
/// `x` and `z_out` must hold `len` doubles; `logdet_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_forward(
    model: *const HqcnfModel,
    x: *const f64,
    len: usize,
    z_out: *mut f64,
    logdet_out: *mut f64,
) -> HqcnfStatus {
    guard(|| {
        let flow = &model_ref(model)?.checkpoint.model;
        check_len(flow, len, "x")?;
        let x = slice_in(x, len, "x")?;
        let z_out = slice_out(z_out, len, "z_out")?;
        if logdet_out.is_null() {
            return Err(null("logdet_out"));
        }
        let (z, logdet) = flow.forward(x)?;
        z_out.copy_from_slice(&z);
        *logdet_out = logdet;
        Ok(())
    })
}

/// Latent to data.
///
/// # Safety
/// `z` and `x_out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_inverse(
    model: *const HqcnfModel,
    z: *const f64,
    len: usize,
    x_out: *mut f64,
) -> HqcnfStatus {
    guard(|| {
        let flow = &model_ref(model)?.checkpoint.model;
        check_len(flow, len, "z")?;
        let z = slice_in(z, len, "z")?;
        let x_out = slice_out(x_out, len, "x_out")?;
        x_out.copy_from_slice(&flow.inverse(z)?);
        Ok(())
    })
}

/// Exact log-density of `x` under the model.
///
/// # Safety
/// `x` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_log_prob(
    model: *const HqcnfModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> HqcnfStatus {
    guard(|| {
        let flow = &model_ref(model)?.checkpoint.model;
        check_len(flow, len, "x")?;
        let x = slice_in(x, len, "x")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = flow.log_prob(x)?;
        Ok(())
    })
}

/// Draws `count` samples into `out`, row-major with `out_len == count * dim`.
/// Deterministic for a given seed.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_model_sample(
    model: *const HqcnfModel,
    count: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> HqcnfStatus {
    guard(|| {
        let flow = &model_ref(model)?.checkpoint.model;
        let need = count
            .checked_mul(flow.dim())
            .ok_or_else(|| invalid("count * dim overflows"))?;
        if out_len != need {
            return Err(Failure(
                HqcnfStatus::Dimension,
                format!("out has length {out_len}, need {count} x {} = {need}", flow.dim()),
            ));
        }
        let out = slice_out(out, out_len, "out")?;
        for (dst, row) in out.chunks_exact_mut(flow.dim().max(1)).zip(flow.sample(count, seed)?) {
            dst.copy_from_slice(&row);
        }
        Ok(())
    })
}

/// Fréchet distance between two row-major sample sets of width `dim`.
/// Each set needs at least two rows.
///
/// # Safety
/// `real` must hold `n_real * dim` doubles and `generated` `n_generated * dim`.
#[no_mangle]
pub unsafe extern "C" fn hqcnf_fid(
    real: *const f64,
    n_real: usize,
    generated: *const f64,
    n_generated: usize,
    dim: usize,
    out: *mut f64,
) -> HqcnfStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let rows = |p: *const f64, n: usize, what: &str| -> Result<Vec<Vec<f64>>, Failure> {
            let len = n.checked_mul(dim).ok_or_else(|| invalid("size overflows"))?;
            Ok(slice_in(p, len, what)?.chunks_exact(dim).map(<[f64]>::to_vec).collect())
        };
        let r = FeatureStats::from_rows(&rows(real, n_real, "real")?)?;
        let g = FeatureStats::from_rows(&rows(generated, n_generated, "generated")?)?;
        *out = fid_score(&r, &g)?;
        Ok(())
    })
}
