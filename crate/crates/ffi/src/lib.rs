//! C ABI over the `rffcil` engine.
//!
//! Every fallible function returns an [`RffcilStatus`]; on failure a message
//! is kept per thread and can be read with [`rffcil_last_error_message`].
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use rffcil::adapt::{mse_align, w2_gaussian, GaussianMoments};
use rffcil::cli::load_backbone;
use rffcil::corpus::Corpus;
use rffcil::engine::{run_scenario, ScenarioConfig};
use rffcil::gmm::{fit_em, storage_bytes, ClassBank, DiagGmm, EmConfig};
use rffcil::metrics::summary;
use rffcil::numeric::{kl_divergence, softmax, Rng};
use rffcil::signal::{mask_in_place, max_mask_len, sample_mask_spec, MaskSide, MaskSpec};
use rffcil::Error;

use num_complex::Complex64;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RffcilStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Calibration = 3,
    Io = 4,
    NullPointer = 5,
    Shape = 6,
    Numeric = 7,
    Format = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Edge of the frame a mask is anchored to.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RffcilMaskSide {
    Start = 0,
    End = 1,
}

/// Fitted diagonal Gaussian mixture.
pub struct RffcilGmm {
    inner: DiagGmm,
}

/// Per-class mixture bank.
pub struct RffcilBank {
    inner: ClassBank,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RffcilStatus {
    match e {
        Error::Config(_) | Error::ClassBudget { .. } => RffcilStatus::Config,
        Error::PretrainUnderfit { .. } => RffcilStatus::Calibration,
        Error::Io(_) => RffcilStatus::Io,
        Error::Format(_) => RffcilStatus::Format,
        Error::ShapeMismatch { .. } => RffcilStatus::Shape,
        Error::NonFiniteLogits => RffcilStatus::Numeric,
        Error::Class { source, .. } => status_of(source),
        _ => RffcilStatus::InvalidArgument,
    }
}

struct Failure(RffcilStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RffcilStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RffcilStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RffcilStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            RffcilStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RffcilStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn rows(data: &[f64], n: usize, dim: usize) -> Vec<&[f64]> {
    (0..n).map(|i| &data[i * dim..(i + 1) * dim]).collect()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rffcil_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn rffcil_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rffcil_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed to store one class's mixture parameters.
#[no_mangle]
pub extern "C" fn rffcil_gmm_storage_bytes(n_components: usize, dim: usize, bytes_per_float: usize) -> usize {
    storage_bytes(n_components, dim, bytes_per_float)
}

/// # Safety
/// `logits` and `out` must each hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn rffcil_softmax(logits: *const f64, n: usize, out: *mut f64) -> RffcilStatus {
    guard(|| {
        let l = input(logits, n, "logits")?;
        let o = output(out, n, "out")?;
        o.copy_from_slice(&softmax(l)?);
        Ok(())
    })
}

/// # Safety
/// `p` and `q` must each hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_kl_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> RffcilStatus {
    guard(|| {
        let v = kl_divergence(input(p, n, "p")?, input(q, n, "q")?)?;
        write(out, v, "out")
    })
}

/// Squared 2-Wasserstein distance between two diagonal Gaussians.
///
/// # Safety
/// All four arrays must hold `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_w2_diagonal(
    mean_a: *const f64,
    var_a: *const f64,
    mean_b: *const f64,
    var_b: *const f64,
    dim: usize,
    out: *mut f64,
) -> RffcilStatus {
    guard(|| {
        let a = GaussianMoments::new(
            input(mean_a, dim, "mean_a")?.to_vec(),
            input(var_a, dim, "var_a")?.to_vec(),
        )?;
        let b = GaussianMoments::new(
            input(mean_b, dim, "mean_b")?.to_vec(),
            input(var_b, dim, "var_b")?.to_vec(),
        )?;
        write(out, w2_gaussian(&a, &b)?, "out")
    })
}

/// Mean squared row distance between two row-major `n × dim` batches.
///
/// # Safety
/// `a` and `b` must each hold `n * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_mse_align(
    a: *const f64,
    b: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> RffcilStatus {
    guard(|| {
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Failure(RffcilStatus::InvalidArgument, "size overflow".into()))?;
        let to_rows = |s: &[f64]| rows(s, n, dim).into_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
        let v = mse_align(&to_rows(input(a, len, "a")?), &to_rows(input(b, len, "b")?))?;
        write(out, v, "out")
    })
}

/// Longest mask allowed for a frame of `len` samples.
#[no_mangle]
pub extern "C" fn rffcil_max_mask_len(len: usize) -> usize {
    max_mask_len(len)
}

/// Zero an edge-anchored run of `length` samples of an interleaved
/// (re, im) frame of `len` complex samples.
///
/// # Safety
/// `samples` must hold `2 * len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rffcil_mask_apply(
    samples: *mut f64,
    len: usize,
    side: RffcilMaskSide,
    length: usize,
) -> RffcilStatus {
    guard(|| {
        let buf = output(samples, 2 * len, "samples")?;
        let mut frame: Vec<Complex64> = buf.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        let side = match side {
            RffcilMaskSide::Start => MaskSide::Start,
            RffcilMaskSide::End => MaskSide::End,
        };
        mask_in_place(&mut frame, &MaskSpec { side, length })?;
        for (c, s) in buf.chunks_exact_mut(2).zip(&frame) {
            c[0] = s.re;
            c[1] = s.im;
        }
        Ok(())
    })
}

/// Draw a random mask for a frame of `len` samples.
///
/// # Safety
/// `side` and `length` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_mask_sample(
    len: usize,
    seed: u64,
    side: *mut RffcilMaskSide,
    length: *mut usize,
) -> RffcilStatus {
    guard(|| {
        let spec = sample_mask_spec(len, &mut Rng::new(seed, 0))?;
        let s = match spec.side {
            MaskSide::Start => RffcilMaskSide::Start,
            MaskSide::End => RffcilMaskSide::End,
        };
        write(side, s, "side")?;
        write(length, spec.length, "length")
    })
}

/// Fit a mixture to `n` row-major samples of dimension `dim`.
///
/// # Safety
/// `data` must hold `n * dim` doubles; `out` must be writable. The returned
/// handle must be released with [`rffcil_gmm_free`].
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_fit(
    data: *const f64,
    n: usize,
    dim: usize,
    n_components: usize,
    seed: u64,
    out: *mut *mut RffcilGmm,
) -> RffcilStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Failure(RffcilStatus::InvalidArgument, "dim must be positive".into()));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Failure(RffcilStatus::InvalidArgument, "size overflow".into()))?;
        let samples = rows(input(data, len, "data")?, n, dim);
        let config = EmConfig {
            n_components,
            ..EmConfig::default()
        };
        let (gmm, _) = fit_em(&samples, &config, &mut Rng::new(seed, 0))?;
        out.write(Box::into_raw(Box::new(RffcilGmm { inner: gmm })));
        Ok(())
    })
}

/// # Safety
/// `gmm` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_free(gmm: *mut RffcilGmm) {
    if !gmm.is_null() {
        drop(Box::from_raw(gmm));
    }
}

/// # Safety
/// `gmm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_n_components(gmm: *const RffcilGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.inner.n_components())
}

/// # Safety
/// `gmm` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_dim(gmm: *const RffcilGmm) -> usize {
    gmm.as_ref().map_or(0, |g| g.inner.dim())
}

/// Copy mixture weights into `weights` (capacity `n_components`).
///
/// # Safety
/// `gmm` must be a live handle; `weights` must hold `n_components` doubles.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_weights(gmm: *const RffcilGmm, weights: *mut f64, capacity: usize) -> RffcilStatus {
    guard(|| {
        let g = &gmm.as_ref().ok_or_else(|| null("gmm"))?.inner;
        if capacity < g.n_components() {
            return Err(Failure(
                RffcilStatus::BufferTooSmall,
                format!("need {} weights", g.n_components()),
            ));
        }
        output(weights, g.n_components(), "weights")?.copy_from_slice(g.weights());
        Ok(())
    })
}

/// # Safety
/// `gmm` must be a live handle; `x` must hold `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_log_density(
    gmm: *const RffcilGmm,
    x: *const f64,
    dim: usize,
    out: *mut f64,
) -> RffcilStatus {
    guard(|| {
        let g = &gmm.as_ref().ok_or_else(|| null("gmm"))?.inner;
        write(out, g.log_density(input(x, dim, "x")?)?, "out")
    })
}

/// Draw `n` samples, row-major, into `out` (capacity `capacity` doubles).
///
/// # Safety
/// `gmm` must be a live handle; `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rffcil_gmm_sample(
    gmm: *const RffcilGmm,
    n: usize,
    seed: u64,
    out: *mut f64,
    capacity: usize,
) -> RffcilStatus {
    guard(|| {
        let g = &gmm.as_ref().ok_or_else(|| null("gmm"))?.inner;
        let need = n * g.dim();
        if capacity < need {
            return Err(Failure(RffcilStatus::BufferTooSmall, format!("need {need} doubles")));
        }
        let dst = output(out, need, "out")?;
        for (row, s) in dst
            .chunks_exact_mut(g.dim().max(1))
            .zip(g.sample(n, &mut Rng::new(seed, 0)))
        {
            row.copy_from_slice(&s);
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable. The
/// returned handle must be released with [`rffcil_bank_free`].
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_load(path: *const c_char, out: *mut *mut RffcilBank) -> RffcilStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bank = ClassBank::load(&path_arg(path, "path")?)?;
        out.write(Box::into_raw(Box::new(RffcilBank { inner: bank })));
        Ok(())
    })
}

/// # Safety
/// `bank` must be a live handle; `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_save(bank: *const RffcilBank, path: *const c_char) -> RffcilStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.inner;
        b.save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_free(bank: *mut RffcilBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_len(bank: *const RffcilBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.len())
}

/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_storage_bytes(bank: *const RffcilBank, bytes_per_float: usize) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.storage_bytes(bytes_per_float))
}

/// Copy class ids in ascending order into `out` (capacity `capacity`).
///
/// # Safety
/// `bank` must be a live handle; `out` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_classes(bank: *const RffcilBank, out: *mut u32, capacity: usize) -> RffcilStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.inner;
        if capacity < b.len() {
            return Err(Failure(
                RffcilStatus::BufferTooSmall,
                format!("need {} entries", b.len()),
            ));
        }
        for (slot, c) in output(out, b.len(), "out")?.iter_mut().zip(b.classes()) {
            *slot = c;
        }
        Ok(())
    })
}

/// Copy of the mixture for `class`; release with [`rffcil_gmm_free`].
///
/// # Safety
/// `bank` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_bank_get(
    bank: *const RffcilBank,
    class: u32,
    out: *mut *mut RffcilGmm,
) -> RffcilStatus {
    guard(|| {
        let b = &bank.as_ref().ok_or_else(|| null("bank"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let gmm = b.require(class)?.gmm.clone();
        out.write(Box::into_raw(Box::new(RffcilGmm { inner: gmm })));
        Ok(())
    })
}

/// Run a scenario over a saved corpus and backbone. `config_path` may be
/// null for defaults. Writes final and mean accuracy over stages.
///
/// # Safety
/// Path arguments must be nul-terminated strings (or null where allowed);
/// `a_last` and `a_mean` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rffcil_run_scenario(
    corpus_dir: *const c_char,
    backbone_path: *const c_char,
    config_path: *const c_char,
    a_last: *mut f64,
    a_mean: *mut f64,
) -> RffcilStatus {
    guard(|| {
        if a_last.is_null() || a_mean.is_null() {
            return Err(null("result pointer"));
        }
        let config = if config_path.is_null() {
            ScenarioConfig::default()
        } else {
            ScenarioConfig::from_file(&path_arg(config_path, "config_path")?)?
        };
        config.validate()?;
        let corpus = Corpus::load(&path_arg(corpus_dir, "corpus_dir")?)?;
        let backbone = load_backbone(&path_arg(backbone_path, "backbone_path")?)?;
        let run = run_scenario(&config, &backbone, &corpus.incremental)?;
        let (last, mean) = summary(&run.rows);
        a_last.write(last);
        a_mean.write(mean);
        Ok(())
    })
}
