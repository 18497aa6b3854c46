//! C interface to `repl-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible function
//! returns a [`ReplStatus`]; on failure the message is available from
//! [`repl_last_error`] on the same thread until the next failing call.
//! Panics never unwind into C: they are caught and reported as
//! [`ReplStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use repl_core::autodiff::Mode;
use repl_core::builder::{build_network, Network, NetworkSpec};
use repl_core::cost::{cost_report, FlopConvention};
use repl_core::deploy::{export_deploy, DeployModel};
use repl_core::error::ReplError;
use repl_core::harness::checkpoint::{load_checkpoint, save_deploy, save_dynamic, Checkpoint};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    InvalidArgument = 5,
    Dataset = 6,
    Checkpoint = 7,
    Io = 8,
    Runtime = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// A trainable network built from a spec and seed.
pub struct ReplNetwork {
    net: Network,
}

/// An inference-only model: folded, no tape, no coefficients.
pub struct ReplModel {
    model: DeployModel<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &ReplError) -> ReplStatus {
    match e {
        ReplError::Config { .. } => ReplStatus::Config,
        ReplError::Shape { .. } => ReplStatus::Shape,
        ReplError::InvalidArgument { .. } | ReplError::UnknownParam(_) => ReplStatus::InvalidArgument,
        ReplError::Dataset(_) => ReplStatus::Dataset,
        ReplError::Checkpoint(_) => ReplStatus::Checkpoint,
        ReplError::Io { .. } => ReplStatus::Io,
        _ => ReplStatus::Runtime,
    }
}

struct Fail(ReplStatus, String);

impl From<ReplError> for Fail {
    fn from(e: ReplError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type Res<T> = std::result::Result<T, Fail>;

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Res<()>) -> ReplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ReplStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            ReplStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ReplStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(ReplStatus::InvalidUtf8, format!("`{what}`: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Res<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn repl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn repl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a network from a TOML model description (the `[model]` table of
/// an experiment config, without the header) and an initialization seed.
///
/// # Safety
/// `spec_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_network_new(spec_toml: *const c_char, seed: u64, out: *mut *mut ReplNetwork) -> ReplStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(spec_toml, "spec_toml")?;
        let spec: NetworkSpec = toml::from_str(text).map_err(|e| {
            Fail(
                ReplStatus::Config,
                format!("config error at `model`: {}", e.message()),
            )
        })?;
        let net = build_network(&spec, seed)?;
        *out = Box::into_raw(Box::new(ReplNetwork { net }));
        Ok(())
    })
}

/// Loads a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_network_load(path: *const c_char, out: *mut *mut ReplNetwork) -> ReplStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        match load_checkpoint(&path)? {
            Checkpoint::Dynamic(st) => {
                *out = Box::into_raw(Box::new(ReplNetwork { net: st.net }));
                Ok(())
            }
            _ => Err(Fail(
                ReplStatus::Checkpoint,
                format!("{} is a deploy checkpoint; use repl_model_load", path.display()),
            )),
        }
    })
}

/// Writes a training checkpoint without optimizer state.
///
/// # Safety
/// `net` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn repl_network_save(net: *const ReplNetwork, path: *const c_char) -> ReplStatus {
    guard(|| {
        let net = handle(net, "net")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_dynamic(&path, &net.net, None, 0)?;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `net` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_network_trainable_count(net: *const ReplNetwork, out: *mut u64) -> ReplStatus {
    guard(|| {
        let net = handle(net, "net")?;
        *out_arg(out, "out")? = net.net.trainable_count() as u64;
        Ok(())
    })
}

/// Folds the network (eval mode) into an inference model.
///
/// # Safety
/// `net` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_network_export(net: *const ReplNetwork, out: *mut *mut ReplModel) -> ReplStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let net = handle(net, "net")?;
        let model = export_deploy(&net.net, Mode::Eval)?;
        *out = Box::into_raw(Box::new(ReplModel { model }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards. NULL is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn repl_network_free(net: *mut ReplNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Loads any checkpoint as an inference model; training checkpoints are
/// folded on load and single-precision ones are widened.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_model_load(path: *const c_char, out: *mut *mut ReplModel) -> ReplStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = match load_checkpoint(&path)? {
            Checkpoint::Dynamic(st) => export_deploy(&st.net, Mode::Eval)?,
            Checkpoint::Deploy64(m) => m,
            Checkpoint::Deploy32(m) => m.cast::<f64>(),
        };
        *out = Box::into_raw(Box::new(ReplModel { model }));
        Ok(())
    })
}

/// Writes a deploy checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn repl_model_save(model: *const ReplModel, path: *const c_char) -> ReplStatus {
    guard(|| {
        let m = handle(model, "model")?;
        save_deploy(&PathBuf::from(str_arg(path, "path")?), &m.model)?;
        Ok(())
    })
}

/// Input sample shape `[channels, height, width]` and class count.
///
/// # Safety
/// `model` must come from this library; `shape` must point to three
/// writable values and `classes` to one.
#[no_mangle]
pub unsafe extern "C" fn repl_model_dims(model: *const ReplModel, shape: *mut usize, classes: *mut usize) -> ReplStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        std::slice::from_raw_parts_mut(shape, 3).copy_from_slice(&m.model.input);
        *out_arg(classes, "classes")? = m.model.classes;
        Ok(())
    })
}

/// Logits for `batch` samples laid out `[batch, C, H, W]`. `out` receives
/// `batch * classes` values and must hold at least `out_len`.
///
/// # Safety
/// `input` must point to `batch * C * H * W` readable values and `out` to
/// `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn repl_model_forward(
    model: *const ReplModel,
    input: *const f64,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> ReplStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let need = batch * m.model.classes;
        if out_len < need {
            return Err(Fail(
                ReplStatus::BufferTooSmall,
                format!("output holds {out_len} values, {need} needed"),
            ));
        }
        let per: usize = m.model.input.iter().product();
        let x = std::slice::from_raw_parts(input, batch * per);
        let y = m.model.forward(batch, x)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&y);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn repl_model_free(model: *mut ReplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// JSON cost report (parameters, FLOPs, activation memory) for a TOML model
/// description. Copies at most `len` bytes including the terminating NUL
/// into `buf` and stores the full size needed in `needed`; returns
/// `BufferTooSmall` when it did not fit. `buf` may be NULL to query the size.
///
/// # Safety
/// `spec_toml` must be NUL-terminated; `buf` must hold `len` bytes unless
/// NULL; `needed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn repl_cost_report_json(
    spec_toml: *const c_char,
    batch: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> ReplStatus {
    guard(|| {
        let needed = out_arg(needed, "needed")?;
        let text = str_arg(spec_toml, "spec_toml")?;
        let spec: NetworkSpec =
            toml::from_str(text).map_err(|e| Fail(ReplStatus::Config, format!("config error at `model`: {}", e.message())))?;
        let report = cost_report(&spec, FlopConvention::default(), batch, 8)?;
        let json = serde_json::to_string(&report).map_err(|e| Fail(ReplStatus::Runtime, e.to_string()))?;
        *needed = json.len() + 1;
        if buf.is_null() || len < *needed {
            return Err(Fail(
                ReplStatus::BufferTooSmall,
                format!("report needs {} bytes, buffer has {len}", *needed),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(buf.cast::<u8>(), *needed);
        dst[..json.len()].copy_from_slice(json.as_bytes());
        dst[json.len()] = 0;
        Ok(())
    })
}
