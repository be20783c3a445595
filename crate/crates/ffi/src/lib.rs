//! C ABI over the `weightalign` crate.
//!
//! Every function returns a [`WaStatus`]. On failure the message is kept in
//! thread-local storage and read with [`wa_last_error`]. Networks are opaque
//! handles owned by the caller and released with [`wa_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use weightalign::layers::{Network, NetworkSpec};
use weightalign::normalize::{self, Mode, WaConfig};
use weightalign::tensor::Tensor;
use weightalign::Error;

/// Bumped on any incompatible change to this header.
pub const WA_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Panic = 6,
}

/// Opaque network handle.
pub struct WaNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> WaStatus {
    match e {
        Error::Shape(_) | Error::Length(_) => WaStatus::Shape,
        Error::NonFinite(_) => WaStatus::NonFinite,
        Error::Precondition(_) => WaStatus::InvalidArgument,
        _ => WaStatus::Config,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (WaStatus, String)>) -> WaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => WaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WaStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (WaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (WaStatus, String) {
    (WaStatus::NullPointer, format!("`{what}` is null"))
}

fn bad(msg: impl Into<String>) -> (WaStatus, String) {
    (WaStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (WaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], (WaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn filter_len(len: usize, filters: usize) -> Result<usize, (WaStatus, String)> {
    if filters == 0 || len == 0 || len % filters != 0 {
        return Err(bad(format!("{len} weights do not split into {filters} filters")));
    }
    Ok(len / filters)
}

#[no_mangle]
pub extern "C" fn wa_abi_version() -> u32 {
    WA_ABI_VERSION
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// WeightAlign over `filters` contiguous filters of `len / filters` weights.
/// `gamma` holds one scale per filter. `out` may alias `w`.
///
/// # Safety
/// `w` and `out` must be valid for `len` doubles, `gamma` for `filters`.
#[no_mangle]
pub unsafe extern "C" fn wa_weight_align(
    w: *const f64,
    len: usize,
    filters: usize,
    gamma: *const f64,
    center: bool,
    scale: bool,
    eps: f64,
    scale_multiplier: f64,
    out: *mut f64,
) -> WaStatus {
    guard(|| {
        let n = filter_len(len, filters)?;
        let cfg = WaConfig {
            center,
            scale,
            eps,
            scale_multiplier,
            beta: false,
        };
        cfg.validate().map_err(lib_err)?;
        let src = slice(w, len, "w")?.to_vec();
        let g = slice(gamma, filters, "gamma")?;
        let dst = slice_mut(out, len, "out")?;
        for ((f, d), &gi) in src.chunks(n).zip(dst.chunks_mut(n)).zip(g) {
            d.copy_from_slice(&normalize::weight_align(f, gi, &cfg));
        }
        Ok(())
    })
}

/// WeightNorm `g * w / (||w|| + eps)` per filter. `out` may alias `w`.
///
/// # Safety
/// As for [`wa_weight_align`].
#[no_mangle]
pub unsafe extern "C" fn wa_weight_norm(
    w: *const f64,
    len: usize,
    filters: usize,
    g: *const f64,
    eps: f64,
    out: *mut f64,
) -> WaStatus {
    guard(|| {
        let n = filter_len(len, filters)?;
        if !(eps > 0.0) {
            return Err(bad("eps must be > 0"));
        }
        let src = slice(w, len, "w")?.to_vec();
        let g = slice(g, filters, "g")?;
        let dst = slice_mut(out, len, "out")?;
        for ((f, d), &gi) in src.chunks(n).zip(dst.chunks_mut(n)).zip(g) {
            d.copy_from_slice(&normalize::weight_norm(f, gi, eps));
        }
        Ok(())
    })
}

/// Builds a network from a JSON spec and stores the handle in `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wa_network_from_json(json: *const c_char, out: *mut *mut WaNetwork) -> WaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|_| bad("json is not UTF-8"))?;
        let spec = NetworkSpec::from_json(text).map_err(lib_err)?;
        let net = Network::build(spec).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(WaNetwork { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from [`wa_network_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wa_network_free(net: *mut WaNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Values per input sample (C*H*W).
///
/// # Safety
/// `net` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn wa_network_input_len(net: *const WaNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.spec().input_shape.iter().product())
}

/// Number of output classes.
///
/// # Safety
/// `net` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn wa_network_classes(net: *const WaNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.spec().classes)
}

/// Forward pass on `batch` NCHW samples. Writes `batch * classes` logits.
/// With `train_mode` set, batch normalization uses batch statistics and
/// updates its running averages.
///
/// # Safety
/// `net` must be a live handle; `input` valid for `batch * input_len` doubles,
/// `logits` for `batch * classes`.
#[no_mangle]
pub unsafe extern "C" fn wa_network_forward(
    net: *mut WaNetwork,
    input: *const f64,
    batch: usize,
    train_mode: bool,
    logits: *mut f64,
) -> WaStatus {
    guard(|| {
        let h = net.as_mut().ok_or_else(|| null("net"))?;
        if batch == 0 {
            return Err(bad("batch must be >= 1"));
        }
        let [c, hh, ww] = h.net.spec().input_shape;
        let classes = h.net.spec().classes;
        let x = slice(input, batch * c * hh * ww, "input")?;
        let dst = slice_mut(logits, batch * classes, "logits")?;
        let x = Tensor::new(vec![batch, c, hh, ww], x.to_vec()).map_err(lib_err)?;
        let mode = if train_mode { Mode::Train } else { Mode::Eval };
        let y = h.net.predict(&x, mode).map_err(lib_err)?;
        dst.copy_from_slice(y.data());
        Ok(())
    })
}
