//! C ABI over `cpc-core`.
//!
//! Every fallible function returns a [`CpcStatus`]; on failure the message
//! is available from [`cpc_last_error`] on the same thread. Models are
//! opaque handles created by `cpc_model_new`/`cpc_model_load` and released
//! with `cpc_model_free`. Arrays are row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cpc_core::contrastive;
use cpc_core::model::{Checkpoint, CpcModel as CoreModel, ModelConfig, Representation};
use cpc_core::synthdata::GaussianPairTask;
use cpc_core::{autodiff::Tensor, CpcError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    /// The output buffer is too small; the required size was still written.
    BufferTooSmall = 4,
    Io = 5,
    Parse = 6,
    Config = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct CpcModel {
    inner: CoreModel,
}

/// Static dimensions of a model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CpcDims {
    pub input_channels: usize,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub horizons: usize,
    pub receptive_field: usize,
    pub total_stride: usize,
}

/// Values accepted by `which` in `cpc_model_representation`.
pub const CPC_REPR_C: u32 = 0;
pub const CPC_REPR_Z: u32 = 1;
pub const CPC_REPR_MEAN_C: u32 = 2;
pub const CPC_REPR_MEAN_Z: u32 = 3;

struct Failure(CpcStatus, String);

impl From<CpcError> for Failure {
    fn from(e: CpcError) -> Self {
        let status = match &e {
            CpcError::Shape { .. } => CpcStatus::Shape,
            CpcError::Io(_) => CpcStatus::Io,
            CpcError::Json(_) | CpcError::Checkpoint(_) | CpcError::Dataset(_) => CpcStatus::Parse,
            CpcError::Config(_) => CpcStatus::Config,
            _ => CpcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            CpcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            CpcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CpcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(model: *const CpcModel) -> Result<&'a CoreModel, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CpcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

unsafe fn fill(out: *mut f64, cap: usize, values: &[f64]) -> Result<(), Failure> {
    if values.len() > cap {
        return Err(Failure(
            CpcStatus::BufferTooSmall,
            format!("output needs {} values, capacity is {cap}", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

fn boxed(model: CoreModel) -> *mut CpcModel {
    Box::into_raw(Box::new(CpcModel { inner: model }))
}

/// Message of the last failed call on this thread, or "" after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn cpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a freshly initialized model. `config_json` is a model config
/// object; NULL selects the defaults.
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_new(config_json: *const c_char, seed: u64, out: *mut *mut CpcModel) -> CpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(CpcStatus::Config, format!("model config: {e}")))?
        };
        let model = CoreModel::new(config, seed)?;
        out.write(boxed(model));
        Ok(())
    })
}

/// Loads a model checkpoint written by `cpc-lab train` or `cpc_model_save`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_load(path: *const c_char, out: *mut *mut CpcModel) -> CpcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = Checkpoint::load(&path)?.into_model()?;
        out.write(boxed(model));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_save(model: *const CpcModel, path: *const c_char) -> CpcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Checkpoint::from_model(m).save(&path)?;
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_free(model: *mut CpcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_dims(model: *const CpcModel, out: *mut CpcDims) -> CpcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let c = m.config();
        let dims = CpcDims {
            input_channels: c.input_channels,
            latent_dim: c.latent_dim(),
            context_dim: c.context_dim,
            horizons: c.horizons,
            receptive_field: c.receptive_field(),
            total_stride: c.total_stride(),
        };
        write_out(out, dims, "out")
    })
}

/// Number of latent frames produced from `input_len` raw samples.
///
/// # Safety
/// `model` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_latent_len(model: *const CpcModel, input_len: usize, out: *mut usize) -> CpcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let frames = m.config().latent_len(input_len).filter(|&f| f > 0).ok_or_else(|| {
            Failure(
                CpcStatus::InvalidArgument,
                format!("input of length {input_len} is shorter than the receptive field {}", m.config().receptive_field()),
            )
        })?;
        write_out(out, frames, "out")
    })
}

/// Per-frame features of one sequence. `x` holds `input_channels × input_len`
/// values, channel-major. The result is `rows × cols` (frames × feature
/// width); `rows`/`cols` are written even when the buffer is too small.
///
/// # Safety
/// `model` is a live handle; `x` has `input_channels × input_len` values;
/// `out` has room for `out_cap` values; `rows` and `cols` are writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_representation(
    model: *const CpcModel,
    which: u32,
    x: *const f64,
    input_len: usize,
    out: *mut f64,
    out_cap: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> CpcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let which = match which {
            CPC_REPR_C => Representation::C,
            CPC_REPR_Z => Representation::Z,
            CPC_REPR_MEAN_C => Representation::MeanC,
            CPC_REPR_MEAN_Z => Representation::MeanZ,
            w => return Err(Failure(CpcStatus::InvalidArgument, format!("unknown representation {w}"))),
        };
        let channels = m.config().input_channels;
        let values = slice_arg(x, channels * input_len, "x")?.to_vec();
        let feats = m.representation(&Tensor::new(vec![channels, input_len], values)?, which)?;
        let (r, c) = feats.dims2().unwrap_or((0, 0));
        write_out(rows, r, "rows")?;
        write_out(cols, c, "cols")?;
        fill(out, out_cap, feats.values())
    })
}

/// `zᵀ W_k c` for horizon `k` (1-based).
///
/// # Safety
/// `model` is a live handle; `z` has `latent_dim` values; `c` has
/// `context_dim` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_score(
    model: *const CpcModel,
    k: usize,
    z: *const f64,
    c: *const f64,
    out: *mut f64,
) -> CpcStatus {
    guard(|| {
        let m = model_ref(model)?;
        let z = slice_arg(z, m.latent_dim(), "z")?;
        let c = slice_arg(c, m.context_dim(), "c")?;
        write_out(out, m.score(z, c, k)?, "out")
    })
}

/// InfoNCE loss of one candidate set of `n` log-scores.
///
/// # Safety
/// `log_scores` has `n` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_infonce_loss(log_scores: *const f64, n: usize, positive: usize, out: *mut f64) -> CpcStatus {
    guard(|| {
        let s = slice_arg(log_scores, n, "log_scores")?;
        write_out(out, contrastive::infonce_loss(s, positive)?, "out")
    })
}

/// `log(n) − mean_loss`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_mi_lower_bound(mean_loss: f64, n: usize, out: *mut f64) -> CpcStatus {
    guard(|| write_out(out, contrastive::mi_lower_bound(mean_loss, n)?, "out"))
}

/// Posterior over which of `n` candidates is the positive, given density
/// ratios; writes `n` values.
///
/// # Safety
/// `ratios` and `out` have `n` values.
#[no_mangle]
pub unsafe extern "C" fn cpc_optimal_posterior(ratios: *const f64, n: usize, out: *mut f64) -> CpcStatus {
    guard(|| {
        let r = slice_arg(ratios, n, "ratios")?;
        fill(out, n, &contrastive::optimal_posterior(r)?)
    })
}

/// Mutual information of `dim` independent pairs with correlation `rho`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpc_gaussian_mi(dim: usize, rho: f64, out: *mut f64) -> CpcStatus {
    guard(|| write_out(out, GaussianPairTask::new(dim, rho)?.true_mi(), "out"))
}
