//! C ABI for the cineseg engine.
//!
//! Every function returns a [`CsegStatus`]; on failure a message for the
//! calling thread is available from [`cseg_last_error`]. Networks are opaque
//! handles created by `cseg_network_*` constructors and released with
//! [`cseg_network_free`]. Images cross the boundary as row-major `double`
//! buffers of shape `n × h × w`, masks as `uint8_t` buffers of 0 / 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cineseg::dataio::{load_checkpoint, save_checkpoint};
use cineseg::image::MaskImage;
use cineseg::metrics;
use cineseg::network::{Network, NetworkConfig};
use cineseg::tensor::{sigmoid, Dims, Tensor4D};
use cineseg::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Contract = 5,
    Numeric = 6,
    Io = 7,
    Parse = 8,
    Integrity = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for CsegStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config { .. } | Error::ConfigSyntax { .. } => CsegStatus::Config,
            Error::Shape(_) => CsegStatus::Shape,
            Error::Contract(_) | Error::State(_) => CsegStatus::Contract,
            Error::Numeric(_) | Error::DegenerateStatistics(_) | Error::UndefinedMetric(_) => CsegStatus::Numeric,
            Error::Io { .. } => CsegStatus::Io,
            Error::Parse { .. } => CsegStatus::Parse,
            Error::Integrity(_) => CsegStatus::Integrity,
        }
    }
}

/// Opaque network handle.
pub struct CsegNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(CsegStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(CsegStatus::from(&e), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> CsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CsegStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CsegStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CsegStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CsegStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *mut CsegNetwork) -> Result<&'a mut CsegNetwork, Failure> {
    p.as_mut().ok_or_else(|| null("network"))
}

unsafe fn publish(out: *mut *mut CsegNetwork, net: Network) -> Outcome {
    *out = Box::into_raw(Box::new(CsegNetwork { net }));
    Ok(())
}

/// Message describing the last failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn cseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized network from `key = value` config lines
/// (unset keys keep their defaults).
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_new(config: *const c_char, seed: u64, out: *mut *mut CsegNetwork) -> CsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = NetworkConfig::from_text(text(config, "config")?)?;
        publish(out, Network::build(cfg, seed)?)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_load(path: *const c_char, out: *mut *mut CsegNetwork) -> CsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(text(path, "path")?);
        publish(out, load_checkpoint(path)?)
    })
}

/// Writes a checkpoint file.
///
/// # Safety
/// `network` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_save(network: *mut CsegNetwork, path: *const c_char) -> CsegStatus {
    guard(|| {
        let h = handle(network)?;
        Ok(save_checkpoint(&h.net, PathBuf::from(text(path, "path")?))?)
    })
}

/// Releases a network; null is ignored.
///
/// # Safety
/// `network` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_free(network: *mut CsegNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Expected input size and the size of the produced masks.
///
/// # Safety
/// All pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_shape(
    network: *mut CsegNetwork,
    in_h: *mut usize,
    in_w: *mut usize,
    out_h: *mut usize,
    out_w: *mut usize,
) -> CsegStatus {
    guard(|| {
        let h = handle(network)?;
        if in_h.is_null() || in_w.is_null() || out_h.is_null() || out_w.is_null() {
            return Err(null("size output"));
        }
        let cfg = h.net.config();
        let (oh, ow) = cfg.output_size(cfg.input_height, cfg.input_width)?;
        (*in_h, *in_w, *out_h, *out_w) = (cfg.input_height, cfg.input_width, oh, ow);
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_num_parameters(network: *mut CsegNetwork, out: *mut usize) -> CsegStatus {
    guard(|| {
        let h = handle(network)?;
        *out.as_mut().ok_or_else(|| null("out"))? = h.net.num_parameters();
        Ok(())
    })
}

unsafe fn run_logits(
    h: &mut CsegNetwork,
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
) -> Result<Tensor4D, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let len = n
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| Failure(CsegStatus::Shape, "image buffer size overflows".into()))?;
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    let x = Tensor4D::new(Dims::new(n, 1, height, width), data)?;
    Ok(h.net.predict(&x)?)
}

fn check_room(have: usize, need: usize) -> Outcome {
    if have < need {
        return Err(Failure(
            CsegStatus::BufferTooSmall,
            format!("output buffer holds {have} values, {need} needed"),
        ));
    }
    Ok(())
}

/// Eval-mode logits for `n` images of `height × width`. `out` receives
/// `n × out_h × out_w` values (see [`cseg_network_shape`]).
///
/// # Safety
/// `pixels` must hold `n·height·width` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_logits(
    network: *mut CsegNetwork,
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> CsegStatus {
    guard(|| {
        let h = handle(network)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let logits = run_logits(h, pixels, n, height, width)?;
        check_room(out_len, logits.len())?;
        std::ptr::copy_nonoverlapping(logits.data().as_ptr(), out, logits.len());
        Ok(())
    })
}

/// Binary masks: 1 where `sigmoid(logit) > threshold`.
///
/// # Safety
/// `pixels` must hold `n·height·width` doubles and `out` `out_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn cseg_network_predict(
    network: *mut CsegNetwork,
    pixels: *const f64,
    n: usize,
    height: usize,
    width: usize,
    threshold: f64,
    out: *mut u8,
    out_len: usize,
) -> CsegStatus {
    guard(|| {
        let h = handle(network)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Failure(
                CsegStatus::Config,
                format!("threshold must lie in (0, 1), got {threshold}"),
            ));
        }
        let logits = run_logits(h, pixels, n, height, width)?;
        check_room(out_len, logits.len())?;
        let dst = std::slice::from_raw_parts_mut(out, logits.len());
        for (d, &l) in dst.iter_mut().zip(logits.data()) {
            *d = (sigmoid(l) > threshold) as u8;
        }
        Ok(())
    })
}

unsafe fn mask(p: *const u8, h: usize, w: usize, what: &str) -> Result<MaskImage, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let len = h
        .checked_mul(w)
        .ok_or_else(|| Failure(CsegStatus::Shape, "mask size overflows".into()))?;
    Ok(MaskImage::new(h, w, std::slice::from_raw_parts(p, len).to_vec())?)
}

/// Dice overlap of two `h × w` masks; 1 when both are empty.
///
/// # Safety
/// `pred` and `truth` must hold `h·w` bytes of 0 / 1; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cseg_dice(pred: *const u8, truth: *const u8, h: usize, w: usize, out: *mut f64) -> CsegStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = metrics::dice(&mask(pred, h, w, "pred")?, &mask(truth, h, w, "truth")?)?;
        Ok(())
    })
}

/// Average perpendicular distance in mm between the boundaries of two
/// `h × w` masks with the given pixel spacing.
///
/// # Safety
/// `pred` and `truth` must hold `h·w` bytes of 0 / 1; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cseg_apd(
    pred: *const u8,
    truth: *const u8,
    h: usize,
    w: usize,
    spacing_mm: f64,
    out: *mut f64,
) -> CsegStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let spacing = cineseg::image::Spacing::isotropic(spacing_mm)?;
        let a = metrics::extract_contour(&mask(pred, h, w, "pred")?, spacing);
        let b = metrics::extract_contour(&mask(truth, h, w, "truth")?, spacing);
        *out = metrics::apd(&a, &b)?;
        Ok(())
    })
}
