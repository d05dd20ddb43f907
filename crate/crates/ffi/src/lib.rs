//! C interface to the emoedit toolkit.
//!
//! Models and images cross the boundary as opaque handles. Every fallible
//! call returns an [`EmoeditStatus`]; on failure a message is kept per thread
//! and can be read with [`emoedit_last_error`]. Pixel buffers are 8-bit RGB,
//! row-major, `height * width * 3` bytes.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use emoedit_core::diffusion::{EditorNets, LatentCodec};
use emoedit_core::domain::{EmotionLabel, ImageBuffer, NUM_EMOTIONS};
use emoedit_core::inference::{iterative_edit_with, CriticCriteria, SamplerConfig, StopReason, MAX_ITERATIONS};
use emoedit_core::metrics::{ess_images, ssim};
use emoedit_core::predictor::{EmotionPredictor, PredictorModel};
use emoedit_core::Error;

pub const EMOEDIT_NUM_EMOTIONS: u32 = 8;
pub const EMOEDIT_MAX_ITERATIONS: u32 = 20;

const _: () = assert!(EMOEDIT_NUM_EMOTIONS as usize == NUM_EMOTIONS);
const _: () = assert!(EMOEDIT_MAX_ITERATIONS as usize == MAX_ITERATIONS);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmoeditStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trained emotion predictor.
pub struct EmoeditPredictor {
    model: PredictorModel,
}

/// Trained editor with its latent codec.
pub struct EmoeditEditor {
    nets: EditorNets,
    codec: LatentCodec,
}

/// Owned RGB image.
pub struct EmoeditImage {
    image: ImageBuffer,
}

/// Sampler and critic settings for [`emoedit_edit`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EmoeditEditOptions {
    pub steps: u32,
    pub guidance_image: f64,
    pub guidance_emotion: f64,
    pub strength: f64,
    pub seed: u64,
    pub ssim_low: f64,
    pub ssim_high: f64,
    pub min_confidence: f64,
    pub max_iterations: u32,
}

/// Outcome of one critic-guided edit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EmoeditEditResult {
    pub iterations: u32,
    /// 1 when the critic accepted an iteration, 0 when the cap was reached.
    pub criteria_met: u8,
    pub predicted: u32,
    pub confidence: f64,
    pub ssim: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> EmoeditStatus {
    let mut e = err;
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    if e.is_validation() {
        EmoeditStatus::Validation
    } else if matches!(e, Error::Io { .. } | Error::Image { .. }) {
        EmoeditStatus::Io
    } else {
        EmoeditStatus::Runtime
    }
}

struct Fail(EmoeditStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> EmoeditStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => EmoeditStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            EmoeditStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EmoeditStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(EmoeditStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn image_arg(pixels: *const u8, height: usize, width: usize, what: &str) -> Result<ImageBuffer, Fail> {
    if pixels.is_null() {
        return Err(null(what));
    }
    let len = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Fail(EmoeditStatus::InvalidArgument, "image dimensions overflow".into()))?;
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    ImageBuffer::new(height, width, data).map_err(|e| Fail(EmoeditStatus::InvalidArgument, e.to_string()))
}

fn emotion_arg(index: u32) -> Result<EmotionLabel, Fail> {
    EmotionLabel::from_index(index as usize).map_err(|e| Fail(EmoeditStatus::InvalidArgument, e.to_string()))
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn emoedit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn emoedit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static, NUL-terminated emotion name, or null for an out-of-range index.
#[no_mangle]
pub extern "C" fn emoedit_emotion_name(index: u32) -> *const c_char {
    const NAMES: [&str; NUM_EMOTIONS] = [
        "amusement\0",
        "awe\0",
        "contentment\0",
        "excitement\0",
        "anger\0",
        "disgust\0",
        "fear\0",
        "sadness\0",
    ];
    NAMES.get(index as usize).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Looks up an emotion index by name.
///
/// # Safety
/// `name` must be a valid NUL-terminated string; `out_index` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emoedit_emotion_from_name(name: *const c_char, out_index: *mut u32) -> EmoeditStatus {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        if out_index.is_null() {
            return Err(null("out_index"));
        }
        let s = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Fail(EmoeditStatus::InvalidArgument, "name is not UTF-8".into()))?;
        let label: EmotionLabel = s.parse().map_err(|e: Error| Fail(EmoeditStatus::InvalidArgument, e.to_string()))?;
        *out_index = label.index() as u32;
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emoedit_predictor_load(path: *const c_char, out: *mut *mut EmoeditPredictor) -> EmoeditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = PredictorModel::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(EmoeditPredictor { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`emoedit_predictor_load`] and not be
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn emoedit_predictor_free(handle: *mut EmoeditPredictor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Writes the eight class probabilities to `out_probs` and the top-1 index
/// to `out_top1` (may be null).
///
/// # Safety
/// `pixels` must hold `height * width * 3` bytes; `out_probs` must have room
/// for [`EMOEDIT_NUM_EMOTIONS`] doubles.
#[no_mangle]
pub unsafe extern "C" fn emoedit_predict(
    predictor: *const EmoeditPredictor,
    pixels: *const u8,
    height: usize,
    width: usize,
    out_probs: *mut f64,
    out_top1: *mut u32,
) -> EmoeditStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let img = image_arg(pixels, height, width, "pixels")?;
        let dist = p.model.predict_distribution(&img)?;
        std::slice::from_raw_parts_mut(out_probs, NUM_EMOTIONS).copy_from_slice(dist.probs());
        if !out_top1.is_null() {
            *out_top1 = dist.top1().0.index() as u32;
        }
        Ok(())
    })
}

/// Loads an editor checkpoint. `codec_path` may be null, in which case the
/// codec recorded in the checkpoint is used.
///
/// # Safety
/// Paths must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emoedit_editor_load(
    editor_path: *const c_char,
    codec_path: *const c_char,
    out: *mut *mut EmoeditEditor,
) -> EmoeditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let editor_path = path_arg(editor_path, "editor_path")?;
        let nets = EditorNets::load(&editor_path)?;
        let codec = if codec_path.is_null() {
            nets.load_codec(&editor_path)?
        } else {
            let codec = LatentCodec::load(&path_arg(codec_path, "codec_path")?)?;
            nets.check_codec(&codec)?;
            codec
        };
        *out = Box::into_raw(Box::new(EmoeditEditor { nets, codec }));
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`emoedit_editor_load`] and not be
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn emoedit_editor_free(handle: *mut EmoeditEditor) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

#[no_mangle]
pub extern "C" fn emoedit_edit_options_default() -> EmoeditEditOptions {
    let s = SamplerConfig::default();
    let c = CriticCriteria::default();
    EmoeditEditOptions {
        steps: s.steps as u32,
        guidance_image: s.guidance_image,
        guidance_emotion: s.guidance_emotion,
        strength: s.strength,
        seed: s.seed,
        ssim_low: c.ssim_low,
        ssim_high: c.ssim_high,
        min_confidence: c.min_confidence,
        max_iterations: c.max_iterations as u32,
    }
}

/// Critic-guided edit towards emotion `target`. On success `*out_image`
/// receives a new image handle and `out_result` (may be null) the summary.
///
/// # Safety
/// Handles must be live; `pixels` must hold `height * width * 3` bytes;
/// `options` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn emoedit_edit(
    editor: *const EmoeditEditor,
    predictor: *const EmoeditPredictor,
    pixels: *const u8,
    height: usize,
    width: usize,
    target: u32,
    options: *const EmoeditEditOptions,
    out_image: *mut *mut EmoeditImage,
    out_result: *mut EmoeditEditResult,
) -> EmoeditStatus {
    guard(|| {
        let ed = editor.as_ref().ok_or_else(|| null("editor"))?;
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        if out_image.is_null() {
            return Err(null("out_image"));
        }
        *out_image = ptr::null_mut();
        let source = image_arg(pixels, height, width, "pixels")?;
        let target = emotion_arg(target)?;
        let o = options.as_ref().copied().unwrap_or_else(|| emoedit_edit_options_default());
        let sampler = SamplerConfig {
            steps: o.steps as usize,
            guidance_image: o.guidance_image,
            guidance_emotion: o.guidance_emotion,
            strength: o.strength,
            seed: o.seed,
        };
        let criteria = CriticCriteria {
            ssim_low: o.ssim_low,
            ssim_high: o.ssim_high,
            min_confidence: o.min_confidence,
            max_iterations: o.max_iterations as usize,
        };
        let session = iterative_edit_with(&source, target, &ed.nets, &ed.codec, &p.model, &sampler, &criteria)?;
        if !out_result.is_null() {
            let v = session.final_verdict();
            *out_result = EmoeditEditResult {
                iterations: session.iterations.len() as u32,
                criteria_met: u8::from(session.stop_reason == StopReason::CriteriaMet),
                predicted: v.predicted.index() as u32,
                confidence: v.confidence,
                ssim: v.ssim,
            };
        }
        *out_image = Box::into_raw(Box::new(EmoeditImage {
            image: session.final_image().clone(),
        }));
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoedit_image_height(image: *const EmoeditImage) -> usize {
    image.as_ref().map_or(0, |i| i.image.height())
}

/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoedit_image_width(image: *const EmoeditImage) -> usize {
    image.as_ref().map_or(0, |i| i.image.width())
}

/// Borrowed pointer to `height * width * 3` pixel bytes, valid while the
/// handle lives.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emoedit_image_data(image: *const EmoeditImage) -> *const u8 {
    image.as_ref().map_or(ptr::null(), |i| i.image.pixels().as_ptr())
}

/// # Safety
/// `image` must be null or a handle not freed already.
#[no_mangle]
pub unsafe extern "C" fn emoedit_image_free(image: *mut EmoeditImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// SSIM between two images of equal size.
///
/// # Safety
/// Both buffers must hold `height * width * 3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emoedit_ssim(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> EmoeditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (a, b) = (image_arg(a, height, width, "a")?, image_arg(b, height, width, "b")?);
        *out = ssim(&a, &b)?;
        Ok(())
    })
}

/// Edge-structure difference (0..100) between two images of equal size.
///
/// # Safety
/// Both buffers must hold `height * width * 3` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn emoedit_ess(
    source: *const u8,
    generated: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> EmoeditStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = image_arg(source, height, width, "source")?;
        let b = image_arg(generated, height, width, "generated")?;
        *out = ess_images(&a, &b)?;
        Ok(())
    })
}
