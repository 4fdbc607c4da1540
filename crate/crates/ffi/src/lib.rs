//! C ABI for `gedi-core`.
//!
//! Models and generation configs cross the boundary as opaque handles. Every
//! fallible call returns a [`GediStatus`]; on failure the message is kept in a
//! thread-local slot readable through [`gedi_last_error`]. Token ids are
//! `size_t`. Output buffers are caller-owned: when one is too small the call
//! writes the required length and returns [`GediStatus::BufferTooSmall`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gedi_core::checkpoint::{load_checkpoint, save_checkpoint};
use gedi_core::decode::PriorBias;
use gedi_core::eval::classify;
use gedi_core::{decode, GediError, GenerationConfig, Preset, TabularCCLM};

/// Result codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GediStatus {
    Ok = 0,
    NullPointer = 1,
    /// Out-of-range ids, unknown names, bad hyperparameters, invalid UTF-8.
    InvalidArgument = 2,
    /// Unreadable files, parse errors, vocab mismatches.
    Data = 3,
    /// Non-finite or degenerate numbers.
    Numerical = 4,
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Opaque handle to a trained model.
pub struct GediModel(TabularCCLM);

/// Opaque handle to a generation config.
pub struct GediConfig(GenerationConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &GediError) -> GediStatus {
    use GediError::*;
    if err.is_numerical() {
        return GediStatus::Numerical;
    }
    match err {
        ClassOutOfRange { .. }
        | TokenOutOfRange { .. }
        | UnknownToken(_)
        | UnknownClass(_)
        | InvalidConfig(_)
        | EmptyInput(_)
        | NoFalseClass => GediStatus::InvalidArgument,
        _ => GediStatus::Data,
    }
}

struct Fail(GediStatus, String);

impl From<GediError> for Fail {
    fn from(e: GediError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GediStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> GediStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => GediStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            GediStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GediStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(null(what))
    } else {
        Ok(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn model_arg<'a>(p: *const GediModel, what: &str) -> Result<&'a TabularCCLM, Fail> {
    p.as_ref().map(|m| &m.0).ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies `src` into a caller buffer, always reporting the full length.
unsafe fn write_buffer<T: Copy>(src: &[T], out: *mut T, capacity: usize, out_len: *mut usize) -> Result<(), Fail> {
    *out_arg(out_len, "out_len")? = src.len();
    if src.len() > capacity {
        return Err(Fail(
            GediStatus::BufferTooSmall,
            format!("buffer holds {capacity} items, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Message for the last failed call on this thread, or null.
///
/// The pointer stays valid until the next call into this library from the
/// same thread.
#[no_mangle]
pub extern "C" fn gedi_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gedi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_load(path: *const c_char, out: *mut *mut GediModel) -> GediStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = load_checkpoint(path).map_err(|e| Fail::from(e).with_path(path))?;
        *out = Box::into_raw(Box::new(GediModel(model)));
        Ok(())
    })
}

impl Fail {
    fn with_path(self, path: &str) -> Self {
        Fail(self.0, format!("{path}: {}", self.1))
    }
}

/// Writes a model to a checkpoint file.
///
/// # Safety
/// `model` must come from [`gedi_model_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_save(model: *const GediModel, path: *const c_char) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let path = str_arg(path, "path")?;
        save_checkpoint(model, path).map_err(|e| Fail::from(e).with_path(path))
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`gedi_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_free(model: *mut GediModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of ordinary tokens, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_vocab_size(model: *const GediModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vocab().size())
}

/// Number of classes, or 0 for a null handle. A binarized model reports its
/// class names; an unconditional model reports 1.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_class_count(model: *const GediModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.codes().class_count())
}

/// Looks up a class id by name.
///
/// # Safety
/// `model` must be a live handle, `name` NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_class_id(
    model: *const GediModel,
    name: *const c_char,
    out: *mut usize,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let name = str_arg(name, "name")?;
        *out_arg(out, "out")? = model.codes().class_id(name)?;
        Ok(())
    })
}

/// Encodes whitespace-separated token names into ids.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must hold `capacity` ids.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_encode(
    model: *const GediModel,
    text: *const c_char,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let ids = model.vocab().encode(str_arg(text, "text")?)?;
        write_buffer(&ids, out, capacity, out_len)
    })
}

/// Decodes ids into space-separated token names, NUL-terminated.
///
/// `out_len` receives the byte length including the terminator.
///
/// # Safety
/// `tokens` must hold `len` ids; `out` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn gedi_model_decode(
    model: *const GediModel,
    tokens: *const usize,
    len: usize,
    out: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let tokens = slice_arg(tokens, len, "tokens")?;
        for &t in tokens {
            model.vocab().check(t)?;
        }
        let mut text = model.vocab().decode(tokens).join(" ").into_bytes();
        text.push(0);
        write_buffer(&text, out.cast::<u8>(), capacity, out_len)
    })
}

/// Sequence log-probability under control code `code`.
///
/// # Safety
/// `tokens` must hold `len` ids and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn gedi_sequence_logprob(
    model: *const GediModel,
    code: usize,
    tokens: *const usize,
    len: usize,
    out: *mut f64,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let tokens = slice_arg(tokens, len, "tokens")?;
        *out_arg(out, "out")? = model.sequence_logprob(code, tokens)?;
        Ok(())
    })
}

/// Classifies a token sequence.
///
/// `posterior` may be null; otherwise it receives one probability per class
/// and `capacity` must be at least [`gedi_model_class_count`].
///
/// # Safety
/// `tokens` must hold `len` ids; `out_class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gedi_classify(
    model: *const GediModel,
    tokens: *const usize,
    len: usize,
    out_class: *mut usize,
    posterior: *mut f64,
    capacity: usize,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let tokens = slice_arg(tokens, len, "tokens")?;
        let out_class = out_arg(out_class, "out_class")?;
        let c = classify(model, tokens)?;
        if !posterior.is_null() {
            if c.posterior.len() > capacity {
                return Err(Fail(
                    GediStatus::BufferTooSmall,
                    format!("posterior buffer holds {capacity} values, {} needed", c.posterior.len()),
                ));
            }
            ptr::copy_nonoverlapping(c.posterior.as_ptr(), posterior, c.posterior.len());
        }
        *out_class = c.class;
        Ok(())
    })
}

/// Creates a generation config from a named preset, or the defaults when
/// `preset` is null.
///
/// # Safety
/// `preset` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_new(preset: *const c_char, out: *mut *mut GediConfig) -> GediStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let config = if preset.is_null() {
            GenerationConfig::default()
        } else {
            str_arg(preset, "preset")?.parse::<Preset>()?.config()
        };
        *out = Box::into_raw(Box::new(GediConfig(config)));
        Ok(())
    })
}

/// Releases a config. Null is ignored.
///
/// # Safety
/// `config` must come from [`gedi_config_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_free(config: *mut GediConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Applies `edit`, keeping the old config if the result fails validation.
unsafe fn edit_config(config: *mut GediConfig, edit: impl FnOnce(&mut GenerationConfig)) -> GediStatus {
    guard(|| {
        let config = &mut out_arg(config, "config")?.0;
        let mut next = config.clone();
        edit(&mut next);
        next.validate()?;
        *config = next;
        Ok(())
    })
}

/// Sets the posterior exponent ω.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_omega(config: *mut GediConfig, omega: f64) -> GediStatus {
    edit_config(config, |c| c.omega = omega)
}

/// Sets the cumulative-mass floor ρ.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_rho(config: *mut GediConfig, rho: f64) -> GediStatus {
    edit_config(config, |c| c.rho = rho)
}

/// Sets the posterior keep threshold τ.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_tau(config: *mut GediConfig, tau: f64) -> GediStatus {
    edit_config(config, |c| c.tau = tau)
}

/// Sets the repetition penalty.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_repetition_penalty(config: *mut GediConfig, penalty: f64) -> GediStatus {
    edit_config(config, |c| c.repetition_penalty = penalty)
}

/// Sets the generation length limit.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_max_new_tokens(config: *mut GediConfig, max_new_tokens: usize) -> GediStatus {
    edit_config(config, |c| c.max_new_tokens = max_new_tokens)
}

/// Turns candidate filtering on or off.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_filter(config: *mut GediConfig, filter: bool) -> GediStatus {
    edit_config(config, |c| c.filter = filter)
}

/// Overrides the desired class's prior bias for guided generation.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gedi_config_set_target_bias(config: *mut GediConfig, bias: f64) -> GediStatus {
    edit_config(config, |c| c.prior_bias = PriorBias::Target(bias))
}

/// Guided greedy generation: `base` proposes, `guide` steers toward
/// `class_id`. Only the new tokens are written to `out`.
///
/// # Safety
/// Handles must be live; `prompt` must hold `prompt_len` ids and `out`
/// `capacity` ids.
#[no_mangle]
pub unsafe extern "C" fn gedi_generate(
    base: *const GediModel,
    guide: *const GediModel,
    config: *const GediConfig,
    class_id: usize,
    prompt: *const usize,
    prompt_len: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> GediStatus {
    guard(|| {
        let base = model_arg(base, "base")?;
        let guide = model_arg(guide, "guide")?;
        let config = &config.as_ref().ok_or_else(|| null("config"))?.0;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let generated = decode::gedi_generate(base, guide, class_id, prompt, config)?;
        write_buffer(&generated.tokens, out, capacity, out_len)
    })
}

/// Greedy class-conditional generation from one model.
///
/// # Safety
/// As for [`gedi_generate`].
#[no_mangle]
pub unsafe extern "C" fn gedi_direct_generate(
    model: *const GediModel,
    config: *const GediConfig,
    class_id: usize,
    prompt: *const usize,
    prompt_len: usize,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> GediStatus {
    guard(|| {
        let model = model_arg(model, "model")?;
        let config = &config.as_ref().ok_or_else(|| null("config"))?.0;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let tokens = decode::direct_generate(model, class_id, prompt, config)?;
        write_buffer(&tokens, out, capacity, out_len)
    })
}
