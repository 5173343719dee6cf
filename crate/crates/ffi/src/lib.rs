//! C interface to maeface.
//!
//! Every fallible function returns a [`MaefaceStatus`]; on failure the message
//! is kept per thread and read back with [`maeface_last_error`]. Models are
//! opaque handles created by [`maeface_model_load`] and released with
//! [`maeface_model_free`]. Panics never cross the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use maeface::data::{to_model_input, Image};
use maeface::metrics::{f1_scores, icc31};
use maeface::ndgrad::Tensor;
use maeface::rng::{stream, Concern};
use maeface::train::predict;
use maeface::vitmae::{load_weights, sample_mask, ModelWeights, Task};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaefaceStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// What a loaded model was trained for.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaefaceTask {
    Pretrain = 0,
    Detect = 1,
    Intensity = 2,
}

impl From<Task> for MaefaceTask {
    fn from(t: Task) -> Self {
        match t {
            Task::Pretrain => MaefaceTask::Pretrain,
            Task::Detect => MaefaceTask::Detect,
            Task::Intensity => MaefaceTask::Intensity,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MaefaceModelInfo {
    pub image_size: u32,
    pub channels: u32,
    pub patch_size: u32,
    pub num_aus: u32,
    /// A `MaefaceTask` value.
    pub task: u32,
    pub num_parameters: u64,
}

/// Opaque model handle.
pub struct MaefaceModel {
    weights: ModelWeights,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

type Failure = (MaefaceStatus, String);

fn fail(status: MaefaceStatus, msg: impl Into<String>) -> Failure {
    (status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MaefaceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MaefaceStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MaefaceStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(MaefaceStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(fail(MaefaceStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a>(m: *const MaefaceModel) -> Result<&'a MaefaceModel, Failure> {
    m.as_ref().ok_or_else(|| fail(MaefaceStatus::NullPointer, "model handle is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn maeface_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
///
/// The pointer stays valid until the next maeface call on the same thread.
#[no_mangle]
pub extern "C" fn maeface_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file; on success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn maeface_model_load(path: *const c_char, out: *mut *mut MaefaceModel) -> MaefaceStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(MaefaceStatus::NullPointer, "path and out must not be null"));
        }
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(MaefaceStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let weights = load_weights(Path::new(path)).map_err(|e| {
            let status = match e {
                maeface::vitmae::CheckpointError::Io { .. } => MaefaceStatus::Io,
                _ => MaefaceStatus::Format,
            };
            fail(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(MaefaceModel { weights }));
        Ok(())
    })
}

/// Releases a handle from `maeface_model_load`; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn maeface_model_free(model: *mut MaefaceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn maeface_model_info(model: *const MaefaceModel, out: *mut MaefaceModelInfo) -> MaefaceStatus {
    guard(|| {
        let m = handle(model)?;
        let out = out.as_mut().ok_or_else(|| fail(MaefaceStatus::NullPointer, "out is null"))?;
        let c = &m.weights.config;
        *out = MaefaceModelInfo {
            image_size: c.image_size as u32,
            channels: c.channels as u32,
            patch_size: c.patch_size as u32,
            num_aus: c.num_aus as u32,
            task: MaefaceTask::from(c.task) as u32,
            num_parameters: m.weights.num_parameters() as u64,
        };
        Ok(())
    })
}

/// Runs a fine-tuned model on one 8-bit image stored row-major, channels last.
///
/// The image is resized to the model input. `out` receives `num_aus` values:
/// occurrence probabilities for a detection model, 0–5 intensities otherwise.
#[no_mangle]
pub unsafe extern "C" fn maeface_model_predict(
    model: *const MaefaceModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f64,
    out_len: usize,
) -> MaefaceStatus {
    guard(|| {
        let m = handle(model)?;
        let cfg = &m.weights.config;
        if !cfg.task.is_finetune() {
            return Err(fail(MaefaceStatus::InvalidArgument, "pre-training checkpoints cannot predict AUs"));
        }
        if out_len != cfg.num_aus {
            return Err(fail(MaefaceStatus::Shape, format!("out holds {out_len} values, model has {} AUs", cfg.num_aus)));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| fail(MaefaceStatus::Shape, "image size overflows"))?;
        let data = input(pixels, n, "pixels")?.to_vec();
        let img = Image::new(channels, height, width, data).map_err(|e| fail(MaefaceStatus::Shape, e.to_string()))?;
        let x: Tensor<f32> =
            to_model_input(&img, cfg.image_size, cfg.channels).map_err(|e| fail(MaefaceStatus::Shape, e.to_string()))?;
        let pred = predict(&m.weights, &[x]).map_err(|e| fail(MaefaceStatus::Numeric, e.to_string()))?;
        output(out, out_len, "out")?.copy_from_slice(&pred[0]);
        Ok(())
    })
}

/// Number of patches left visible when `n` patches are masked at `ratio`.
#[no_mangle]
pub extern "C" fn maeface_visible_count(n: usize, ratio: f64) -> usize {
    maeface::vitmae::visible_count(n, ratio)
}

/// Draws a random mask over `n` patches; `flags[i]` becomes 1 for hidden patches.
///
/// Draws are reproducible from `seed` and `draw`.
#[no_mangle]
pub unsafe extern "C" fn maeface_sample_mask(
    n: usize,
    ratio: f64,
    seed: u64,
    draw: u64,
    flags: *mut u8,
    flags_len: usize,
) -> MaefaceStatus {
    guard(|| {
        if flags_len != n {
            return Err(fail(MaefaceStatus::Shape, format!("flags holds {flags_len} entries for {n} patches")));
        }
        let plan = sample_mask(n, ratio, &mut stream(seed, Concern::Mask, draw, 0))
            .map_err(|e| fail(MaefaceStatus::InvalidArgument, e.to_string()))?;
        for (dst, hidden) in output(flags, flags_len, "flags")?.iter_mut().zip(plan.mask_flags()) {
            *dst = hidden as u8;
        }
        Ok(())
    })
}

/// Per-AU F1 from 0/1 predictions and labels, both `samples × num_aus` row-major.
#[no_mangle]
pub unsafe extern "C" fn maeface_f1(
    pred: *const u8,
    labels: *const u8,
    samples: usize,
    num_aus: usize,
    out: *mut f64,
) -> MaefaceStatus {
    guard(|| {
        if num_aus == 0 {
            return Err(fail(MaefaceStatus::InvalidArgument, "num_aus must be positive"));
        }
        let total = samples.checked_mul(num_aus).ok_or_else(|| fail(MaefaceStatus::Shape, "size overflows"))?;
        let rows = |s: &[u8]| s.chunks(num_aus).map(<[u8]>::to_vec).collect::<Vec<_>>();
        let p = rows(input(pred, total, "pred")?);
        let g = rows(input(labels, total, "labels")?);
        let scores = f1_scores(&p, &g).map_err(|e| fail(MaefaceStatus::InvalidArgument, e.to_string()))?;
        for (dst, s) in output(out, num_aus, "out")?.iter_mut().zip(scores) {
            *dst = s.f1;
        }
        Ok(())
    })
}

/// ICC(3,1) between two rating vectors.
///
/// When both are constant the value is undefined: `*defined` is set to 0 and
/// `*out` to NaN.
#[no_mangle]
pub unsafe extern "C" fn maeface_icc31(
    pred: *const f64,
    labels: *const f64,
    n: usize,
    out: *mut f64,
    defined: *mut u8,
) -> MaefaceStatus {
    guard(|| {
        let p = input(pred, n, "pred")?;
        let g = input(labels, n, "labels")?;
        if out.is_null() || defined.is_null() {
            return Err(fail(MaefaceStatus::NullPointer, "out and defined must not be null"));
        }
        let v = icc31(p, g).map_err(|e| fail(MaefaceStatus::InvalidArgument, e.to_string()))?;
        *out = v.unwrap_or(f64::NAN);
        *defined = v.is_some() as u8;
        Ok(())
    })
}
