//! C ABI over the servotrack tracker.
//!
//! Every fallible call returns an [`StStatus`]; on failure the message is kept
//! per thread and can be read with [`st_last_error_message`]. Trackers are
//! opaque heap handles released with [`st_tracker_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use servotrack::img::GrayFrame;
use servotrack::pipeline::{ibvs_step, init_tracker, PoseSource, Tracker, TrackerConfig, TrackerWeights};
use servotrack::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    PatchOutOfFrame = 3,
    DegenerateTemplate = 4,
    WeightLoad = 5,
    Config = 6,
    Uncontrollable = 7,
    Numerical = 8,
    Panic = 9,
    Other = 10,
}

/// Where a pose came from.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StPoseSource {
    Aligned = 0,
    Predicted = 1,
    Held = 2,
}

/// Per-frame tracker output. `tx, ty` is the template center in frame pixels;
/// `theta` and `scale` are relative to the template.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StPose {
    pub frame_index: u64,
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub scale: f64,
    pub source: StPoseSource,
    pub op_percent: f64,
    pub ncc_score: f64,
    pub elapsed_ms: f64,
}

/// Opaque tracker handle.
pub struct StTracker {
    inner: Tracker,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> StStatus {
    match err {
        Error::InvalidInput(_) | Error::Shape(_) | Error::DegenerateWarp(_) => StStatus::InvalidInput,
        Error::PatchOutOfFrame { .. } => StStatus::PatchOutOfFrame,
        Error::DegenerateTemplate(_) | Error::UndefinedOcclusion => StStatus::DegenerateTemplate,
        Error::WeightLoad(_) | Error::Format { .. } => StStatus::WeightLoad,
        Error::Config(_) => StStatus::Config,
        Error::Uncontrollable { .. } => StStatus::Uncontrollable,
        Error::Numerical(_) | Error::Divergence { .. } => StStatus::Numerical,
        _ => StStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (StStatus, String)>) -> StStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            StStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (StStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (StStatus, String) {
    (StStatus::NullPointer, format!("{what} is null"))
}

unsafe fn gray_frame(pixels: *const u8, width: u32, height: u32) -> Result<GrayFrame, (StStatus, String)> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let n = (width as usize)
        .checked_mul(height as usize)
        .ok_or((StStatus::InvalidInput, "frame size overflows".to_string()))?;
    if n == 0 {
        return Err((StStatus::InvalidInput, format!("empty frame {width}x{height}")));
    }
    let bytes = std::slice::from_raw_parts(pixels, n);
    GrayFrame::from_u8(width as usize, height as usize, bytes).map_err(lib_err)
}

/// Message for the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn st_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn st_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a tracker from an 8-bit grayscale frame (row-major, `width * height`
/// bytes) and the template center. `config_json` may be null for defaults.
///
/// # Safety
/// `pixels` must point to `width * height` readable bytes, `config_json` must be
/// null or a NUL-terminated string, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_new(
    pixels: *const u8,
    width: u32,
    height: u32,
    cx: f64,
    cy: f64,
    config_json: *const c_char,
    out: *mut *mut StTracker,
) -> StStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = if config_json.is_null() {
            TrackerConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|e| (StStatus::Config, format!("config is not UTF-8: {e}")))?;
            TrackerConfig::from_json(text).map_err(lib_err)?
        };
        let frame = gray_frame(pixels, width, height)?;
        let weights = Arc::new(TrackerWeights::load(&cfg).map_err(lib_err)?);
        let inner = init_tracker(&frame, [cx, cy], &cfg, weights).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(StTracker { inner }));
        Ok(())
    })
}

/// Tracks one frame and writes the pose to `out`.
///
/// # Safety
/// `tracker` must come from [`st_tracker_new`] and not be freed; `pixels` must
/// point to `width * height` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn st_tracker_track(
    tracker: *mut StTracker,
    pixels: *const u8,
    width: u32,
    height: u32,
    out: *mut StPose,
) -> StStatus {
    guard(|| {
        if tracker.is_null() {
            return Err(null("tracker"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let frame = gray_frame(pixels, width, height)?;
        let pose = (*tracker).inner.track(&frame).map_err(lib_err)?;
        *out = StPose {
            frame_index: pose.frame_index,
            tx: pose.params.tx,
            ty: pose.params.ty,
            theta: pose.params.theta,
            scale: pose.params.scale,
            source: match pose.source {
                PoseSource::Aligned => StPoseSource::Aligned,
                PoseSource::Predicted => StPoseSource::Predicted,
                PoseSource::Held => StPoseSource::Held,
            },
            op_percent: pose.op_percent,
            ncc_score: pose.ncc_score,
            elapsed_ms: pose.elapsed_ms,
        };
        Ok(())
    })
}

/// Releases a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must be null or a live handle from [`st_tracker_new`].
#[no_mangle]
pub unsafe extern "C" fn st_tracker_free(tracker: *mut StTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// One servo step `v = -lambda * pinv(L) * e`. `l` is row-major `rows x cols`,
/// `error` has `rows` entries and `velocity_out` receives `cols` entries.
///
/// # Safety
/// All pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn st_ibvs_step(
    error: *const f64,
    l: *const f64,
    rows: u32,
    cols: u32,
    lambda: f64,
    velocity_out: *mut f64,
) -> StStatus {
    guard(|| {
        if error.is_null() || l.is_null() || velocity_out.is_null() {
            return Err(null("argument"));
        }
        let (r, c) = (rows as usize, cols as usize);
        if r == 0 || c == 0 {
            return Err((StStatus::InvalidInput, format!("empty matrix {r}x{c}")));
        }
        let e = DVector::from_column_slice(std::slice::from_raw_parts(error, r));
        let m = DMatrix::from_row_slice(r, c, std::slice::from_raw_parts(l, r * c));
        let v = ibvs_step(&e, &m, lambda).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(velocity_out, c).copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Converts interleaved 8-bit RGB to gray with BT.601 weights. `gray_out`
/// receives `width * height` values in `[0, 255]`.
///
/// # Safety
/// `rgb` must hold `3 * width * height` bytes and `gray_out` `width * height` doubles.
#[no_mangle]
pub unsafe extern "C" fn st_rgb_to_gray(rgb: *const u8, width: u32, height: u32, gray_out: *mut f64) -> StStatus {
    guard(|| {
        if rgb.is_null() || gray_out.is_null() {
            return Err(null("argument"));
        }
        let n = width as usize * height as usize;
        let bytes = std::slice::from_raw_parts(rgb, 3 * n).to_vec();
        let img = image::RgbImage::from_raw(width, height, bytes)
            .ok_or((StStatus::InvalidInput, "rgb buffer size mismatch".to_string()))?;
        let gray = servotrack::img::to_gray(&img).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(gray_out, n).copy_from_slice(gray.data());
        Ok(())
    })
}
