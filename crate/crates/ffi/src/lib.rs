//! C ABI over `mixloc`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`MixlocStatus`]; on failure [`mixloc_last_error`] describes
//! the problem for the calling thread. Outputs are written only on success.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mixloc::autodiff::Array;
use mixloc::metrics;
use mixloc::scenegen::{make_world, Mixture, Split, World, WorldSpec};
use mixloc::trainer::{self, Checkpoint, EvalConfig, TrainConfig};
use mixloc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixlocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Domain = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A generated world: class signatures plus the scene generator settings.
pub struct MixlocWorld {
    inner: World,
}

/// One sampled mixture of `k` scenes.
pub struct MixlocMixture {
    inner: Mixture,
    grid: usize,
}

/// A trained model with its training configuration.
pub struct MixlocModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(MixlocStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => MixlocStatus::Dimension,
            Error::Parameter(_) => MixlocStatus::InvalidArgument,
            Error::Domain(_) => MixlocStatus::Domain,
            Error::Config(_) | Error::Json(_) => MixlocStatus::Config,
            Error::NonFinite { .. } => MixlocStatus::NonFinite,
            Error::Format { .. } => MixlocStatus::Format,
            Error::Io { .. } => MixlocStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MixlocStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MixlocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MixlocStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MixlocStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MixlocStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write_buf(data: &[f64], buf: *mut f64, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(null("output buffer"));
    }
    if len < data.len() {
        return Err(Fail(
            MixlocStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {} needed", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

unsafe fn grid_arg(values: *const f64, n: usize, what: &str) -> Result<Array, Fail> {
    if values.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(values, n).to_vec();
    Ok(Array::new(vec![1, n], data)?)
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mixloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a world from a JSON world spec; null or `"{}"` gives the defaults.
#[no_mangle]
pub unsafe extern "C" fn mixloc_world_new(spec_json: *const c_char, out: *mut *mut MixlocWorld) -> MixlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec: WorldSpec = match opt_str_arg(spec_json, "spec_json")? {
            Some(text) => serde_json::from_str(text).map_err(Error::from)?,
            None => WorldSpec::default(),
        };
        let world = make_world(&spec)?;
        *out = Box::into_raw(Box::new(MixlocWorld { inner: world }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_world_free(world: *mut MixlocWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Grid side length `g`; maps and masks have `g*g` cells per image.
#[no_mangle]
pub unsafe extern "C" fn mixloc_world_grid(world: *const MixlocWorld, out: *mut usize) -> MixlocStatus {
    guard(|| {
        let w = handle(world, "world")?;
        *out_arg(out, "out")? = w.inner.spec.grid;
        Ok(())
    })
}

/// Samples a mixture of `k` distinct classes, fully determined by `seed`.
#[no_mangle]
pub unsafe extern "C" fn mixloc_mixture_sample(
    world: *const MixlocWorld,
    k: usize,
    seed: u64,
    out: *mut *mut MixlocMixture,
) -> MixlocStatus {
    guard(|| {
        let w = handle(world, "world")?;
        let out = out_arg(out, "out")?;
        let mix = w.inner.sample_mixture(k, seed)?;
        *out = Box::into_raw(Box::new(MixlocMixture { inner: mix, grid: w.inner.spec.grid }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_mixture_free(mixture: *mut MixlocMixture) {
    if !mixture.is_null() {
        drop(Box::from_raw(mixture));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_mixture_k(mixture: *const MixlocMixture, out: *mut usize) -> MixlocStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        *out_arg(out, "out")? = m.inner.k();
        Ok(())
    })
}

fn scene_index(m: &MixlocMixture, i: usize) -> Result<usize, Fail> {
    if i >= m.inner.k() {
        return Err(Fail(MixlocStatus::InvalidArgument, format!("scene {i} out of range for k = {}", m.inner.k())));
    }
    Ok(i)
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_mixture_class_id(
    mixture: *const MixlocMixture,
    scene: usize,
    out: *mut usize,
) -> MixlocStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        let i = scene_index(m, scene)?;
        *out_arg(out, "out")? = m.inner.scenes[i].class_id;
        Ok(())
    })
}

/// Copies the `g*g` ground-truth mask of scene `scene` (row-major, 0/1).
#[no_mangle]
pub unsafe extern "C" fn mixloc_mixture_mask(
    mixture: *const MixlocMixture,
    scene: usize,
    buf: *mut f64,
    len: usize,
) -> MixlocStatus {
    guard(|| {
        let m = handle(mixture, "mixture")?;
        let i = scene_index(m, scene)?;
        write_buf(m.inner.scenes[i].mask.data(), buf, len)
    })
}

/// Trains from a JSON config (null means all defaults).
#[no_mangle]
pub unsafe extern "C" fn mixloc_train(config_json: *const c_char, out: *mut *mut MixlocModel) -> MixlocStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = match opt_str_arg(config_json, "config_json")? {
            Some(text) => TrainConfig::from_json(text)?,
            None => TrainConfig::default(),
        };
        let ck = trainer::train(&cfg)?;
        *out = Box::into_raw(Box::new(MixlocModel { inner: ck }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_model_load(dir: *const c_char, out: *mut *mut MixlocModel) -> MixlocStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(&dir)?;
        *out = Box::into_raw(Box::new(MixlocModel { inner: ck }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_model_save(model: *const MixlocModel, dir: *const c_char) -> MixlocStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        Ok(m.inner.save(&dir)?)
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_model_free(model: *mut MixlocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of audio heads, i.e. maps per mixture.
#[no_mangle]
pub unsafe extern "C" fn mixloc_model_heads(model: *const MixlocModel, out: *mut usize) -> MixlocStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_arg(out, "out")? = m.inner.model.audio.k();
        Ok(())
    })
}

/// Writes one localization map per head, each `g × (k·g)` with the mixture's
/// images side by side, head-major: `len >= heads * g * k * g`.
#[no_mangle]
pub unsafe extern "C" fn mixloc_model_localize(
    model: *const MixlocModel,
    mixture: *const MixlocMixture,
    buf: *mut f64,
    len: usize,
) -> MixlocStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let mix = handle(mixture, "mixture")?;
        let sample = trainer::mixture_sample(&m.inner.model, &mix.inner, mix.grid)?;
        let flat: Vec<f64> = sample.maps.iter().flat_map(|a| a.data().iter().copied()).collect();
        write_buf(&flat, buf, len)
    })
}

/// Evaluates on `split` ("train", "val" or "test") of the model's own
/// dataset and returns the report as a JSON string; release it with
/// [`mixloc_string_free`]. `max_examples == 0` evaluates the whole split.
#[no_mangle]
pub unsafe extern "C" fn mixloc_model_evaluate(
    model: *const MixlocModel,
    split: *const c_char,
    max_examples: usize,
    out_json: *mut *mut c_char,
) -> MixlocStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let split = Split::parse(str_arg(split, "split")?)?;
        let out = out_arg(out_json, "out_json")?;
        let cfg = EvalConfig { max_examples: (max_examples > 0).then_some(max_examples), ..EvalConfig::default() };
        let report = trainer::evaluate(&m.inner, split, &cfg)?;
        let json = serde_json::to_string(&report).map_err(Error::from)?;
        *out = CString::new(json).map_err(|e| Fail(MixlocStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixloc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Average precision of `n` scores against a 0/1 mask of the same length.
#[no_mangle]
pub unsafe extern "C" fn mixloc_pixel_ap(
    scores: *const f64,
    mask: *const f64,
    n: usize,
    out: *mut f64,
) -> MixlocStatus {
    guard(|| {
        let s = grid_arg(scores, n, "scores")?;
        let m = grid_arg(mask, n, "mask")?;
        *out_arg(out, "out")? = metrics::pixel_ap(&s, &m)?;
        Ok(())
    })
}

/// IoU between `{scores >= t}` and a 0/1 mask.
#[no_mangle]
pub unsafe extern "C" fn mixloc_iou_at(
    scores: *const f64,
    mask: *const f64,
    n: usize,
    t: f64,
    out: *mut f64,
) -> MixlocStatus {
    guard(|| {
        let s = grid_arg(scores, n, "scores")?;
        let m = grid_arg(mask, n, "mask")?;
        *out_arg(out, "out")? = metrics::iou_at(&s, &m, t)?;
        Ok(())
    })
}
