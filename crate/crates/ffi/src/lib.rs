//! C ABI over `pt2t-core`.
//!
//! Every fallible call returns a [`Pt2tStatus`]; on failure a message for the
//! calling thread is available from [`pt2t_last_error`]. Packed tensors are
//! opaque [`Pt2tTensor`] handles released with [`pt2t_tensor_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pt2t::pipeline::{output_error, CalibGram, LayerQuantizer};
use pt2t::{dequantize, read_packed, write_packed, CalibBatch, DenseTensor, Error, PackedTernaryTensor, QuantConfig, ScaleDtype};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pt2tStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Checksum = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pt2tScaleDtype {
    F32 = 0,
    F16 = 1,
}

/// Quantization options. Obtain defaults from [`pt2t_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Pt2tConfig {
    pub group_size: usize,
    pub lambda_frac: f64,
    pub max_iters: usize,
    pub scale_dtype: Pt2tScaleDtype,
    pub ssr: bool,
    pub aga: bool,
    pub itf: bool,
    pub compensation: bool,
}

/// Errors measured right after quantization.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Pt2tStats {
    pub e_w: f64,
    pub e_x: f64,
    pub bits_per_weight: f64,
    pub itf_iters_mean: f64,
}

/// Opaque packed ternary tensor.
pub struct Pt2tTensor {
    inner: PackedTernaryTensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> Pt2tStatus {
    match err {
        Error::Io { .. } => Pt2tStatus::Io,
        Error::ChecksumMismatch { .. } => Pt2tStatus::Checksum,
        Error::BadMagic
        | Error::UnsupportedVersion(_)
        | Error::UnknownScaleDtype(_)
        | Error::TruncatedPayload { .. }
        | Error::TrailingBytes { .. }
        | Error::InvalidTritByte { .. }
        | Error::InvalidTrit { .. }
        | Error::BadPermutation(_)
        | Error::InvalidGrid(_) => Pt2tStatus::Format,
        Error::NonFinite { .. } | Error::GramNotSymmetric { .. } | Error::Factorization { .. } => Pt2tStatus::Numeric,
        _ => Pt2tStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (Pt2tStatus, String)>) -> Pt2tStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Pt2tStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            Pt2tStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (Pt2tStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (Pt2tStatus, String) {
    (Pt2tStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, (Pt2tStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (Pt2tStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

impl From<Pt2tConfig> for QuantConfig {
    fn from(c: Pt2tConfig) -> Self {
        QuantConfig {
            group_size: c.group_size,
            lambda_frac: c.lambda_frac,
            max_iters: c.max_iters,
            scale_dtype: match c.scale_dtype {
                Pt2tScaleDtype::F32 => ScaleDtype::F32,
                Pt2tScaleDtype::F16 => ScaleDtype::F16,
            },
            ssr: c.ssr,
            aga: c.aga,
            itf: c.itf,
            compensation: c.compensation,
            allow_identity_gram: true,
        }
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next pt2t call on the same thread.
#[no_mangle]
pub extern "C" fn pt2t_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn pt2t_config_default() -> Pt2tConfig {
    let d = QuantConfig::default();
    Pt2tConfig {
        group_size: d.group_size,
        lambda_frac: d.lambda_frac,
        max_iters: d.max_iters,
        scale_dtype: Pt2tScaleDtype::F32,
        ssr: d.ssr,
        aga: d.aga,
        itf: d.itf,
        compensation: d.compensation,
    }
}

/// Quantizes a row-major `rows x cols` f32 matrix.
///
/// `calib` holds `samples x cols` activations, row-major; pass null (with
/// `samples == 0`) to quantize against an identity Gram. `config` may be
/// null for defaults and `stats` may be null. On success `*out` receives a
/// handle owned by the caller.
///
/// # Safety
/// Non-null pointers must be valid for the stated element counts.
#[no_mangle]
pub unsafe extern "C" fn pt2t_quantize(
    weights: *const f32,
    rows: usize,
    cols: usize,
    calib: *const f32,
    samples: usize,
    config: *const Pt2tConfig,
    out: *mut *mut Pt2tTensor,
    stats: *mut Pt2tStats,
) -> Pt2tStatus {
    guard(|| {
        if weights.is_null() {
            return Err(null("weights"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l > 0)
            .ok_or((Pt2tStatus::InvalidArgument, "shape must be positive".to_string()))?;
        let w_data: Vec<f64> = std::slice::from_raw_parts(weights, len).iter().map(|&v| f64::from(v)).collect();
        let w = DenseTensor::new(rows, cols, w_data).map_err(core_err)?;
        if let Some(idx) = w.first_non_finite() {
            return Err(core_err(Error::NonFinite {
                name: "weights".into(),
                index: idx,
            }));
        }
        let gram = if samples == 0 {
            CalibGram::identity(cols)
        } else {
            if calib.is_null() {
                return Err(null("calib"));
            }
            let c = std::slice::from_raw_parts(calib, samples * cols).iter().map(|&v| f64::from(v)).collect();
            CalibGram::from_batch(&CalibBatch::new(samples, cols, c).map_err(core_err)?)
        };
        let cfg: QuantConfig = if config.is_null() { QuantConfig::default() } else { (*config).into() };
        cfg.validate().map_err(core_err)?;
        let outcome = LayerQuantizer::new(gram, cfg.lambda_frac).quantize(&w, &cfg).map_err(core_err)?;
        if !stats.is_null() {
            *stats = Pt2tStats {
                e_w: outcome.report.e_w,
                e_x: outcome.report.e_x_gram,
                bits_per_weight: outcome.report.total_bits_per_weight,
                itf_iters_mean: outcome.report.itf_iters_mean,
            };
        }
        *out = Box::into_raw(Box::new(Pt2tTensor { inner: outcome.packed }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_read(path: *const c_char, out: *mut *mut Pt2tTensor) -> Pt2tStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = path_arg(path)?;
        let t = read_packed(p).map_err(core_err)?;
        *out = Box::into_raw(Box::new(Pt2tTensor { inner: t }));
        Ok(())
    })
}

/// # Safety
/// `tensor` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_write(tensor: *const Pt2tTensor, path: *const c_char) -> Pt2tStatus {
    guard(|| {
        let t = tensor.as_ref().ok_or_else(|| null("tensor"))?;
        let p = path_arg(path)?;
        write_packed(&t.inner, p).map_err(core_err)
    })
}

/// Writes the shape and group size; any output pointer may be null.
///
/// # Safety
/// `tensor` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_shape(
    tensor: *const Pt2tTensor,
    rows: *mut usize,
    cols: *mut usize,
    group_size: *mut usize,
) -> Pt2tStatus {
    guard(|| {
        let t = &tensor.as_ref().ok_or_else(|| null("tensor"))?.inner;
        if !rows.is_null() {
            *rows = t.rows();
        }
        if !cols.is_null() {
            *cols = t.cols();
        }
        if !group_size.is_null() {
            *group_size = t.group_size();
        }
        Ok(())
    })
}

/// Expands the tensor into `out` (row-major f32, original column order).
/// `len` must be at least rows * cols.
///
/// # Safety
/// `tensor` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_dequantize(tensor: *const Pt2tTensor, out: *mut f32, len: usize) -> Pt2tStatus {
    guard(|| {
        let t = &tensor.as_ref().ok_or_else(|| null("tensor"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let need = t.rows() * t.cols();
        if len < need {
            return Err((Pt2tStatus::BufferTooSmall, format!("need {need} floats, got {len}")));
        }
        let w = dequantize(t);
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (d, &s) in dst.iter_mut().zip(w.data()) {
            *d = s as f32;
        }
        Ok(())
    })
}

/// Output error of the tensor against reference weights and activations,
/// recomputed from the packed data. Null `calib` uses an identity Gram.
///
/// # Safety
/// Pointers must be valid for the tensor's shape and `samples`.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_output_error(
    tensor: *const Pt2tTensor,
    weights: *const f32,
    calib: *const f32,
    samples: usize,
    e_x: *mut f64,
) -> Pt2tStatus {
    guard(|| {
        let t = &tensor.as_ref().ok_or_else(|| null("tensor"))?.inner;
        if weights.is_null() {
            return Err(null("weights"));
        }
        if e_x.is_null() {
            return Err(null("e_x"));
        }
        let (n, m) = (t.rows(), t.cols());
        let w = DenseTensor::new(n, m, std::slice::from_raw_parts(weights, n * m).iter().map(|&v| f64::from(v)).collect())
            .map_err(core_err)?;
        let gram = if calib.is_null() || samples == 0 {
            CalibGram::identity(m)
        } else {
            let c = std::slice::from_raw_parts(calib, samples * m).iter().map(|&v| f64::from(v)).collect();
            CalibGram::from_batch(&CalibBatch::new(samples, m, c).map_err(core_err)?)
        };
        *e_x = output_error(&w, &dequantize(t), &gram).map_err(core_err)?;
        Ok(())
    })
}

/// # Safety
/// `tensor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt2t_tensor_free(tensor: *mut Pt2tTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pt2t_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
