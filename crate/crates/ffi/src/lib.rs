//! C interface to the bgsnetd library.
//!
//! Every fallible function returns a [`BgsStatus`]. On failure a message is
//! stored per thread and can be read with [`bgs_last_error`]. Images are
//! passed as row-major buffers of `width * height` elements; sequences as
//! `count` such images back to back.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use bgsnetd::depth_io::{decode_groundtruth, Grid, MaskLabel};
use bgsnetd::infer::{predict_frame, InferConfig};
use bgsnetd::metrics::{accumulate, compute_metrics, ConfusionCounts};
use bgsnetd::nn::{load_model, Model};
use bgsnetd::preprocess::{
    compute_frame_stats, extract_background_from, normalize_frame, DepthStats, NormConfig,
};
use bgsnetd::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NoData = 6,
    Internal = 7,
}

/// Opaque trained classifier.
pub struct BgsModel {
    inner: Precision,
}

enum Precision {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Change-detection metrics. Undefined (0/0) entries are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgsMetrics {
    pub recall: f64,
    pub specificity: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub pwc: f64,
    pub precision: f64,
    pub f_measure: f64,
}

/// Pixel counts of a mask against ground truth.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BgsCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BgsStatus, String);

type FfiResult<T = ()> = Result<T, Failure>;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => BgsStatus::Io,
            Error::DimensionMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::GtCountMismatch { .. } => BgsStatus::DimensionMismatch,
            Error::InvalidConfig(_) | Error::UnknownGtCode { .. } => BgsStatus::InvalidArgument,
            Error::EmptySequence(_)
            | Error::NoValidDepth
            | Error::MissingGroundTruth
            | Error::EmptyDataset => BgsStatus::NoData,
            Error::MalformedHeader(_)
            | Error::UnsupportedMaxval { .. }
            | Error::TruncatedData { .. }
            | Error::Corrupt(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::PrecisionMismatch { .. }
            | Error::Json(_)
            | Error::Csv(_) => BgsStatus::Format,
            _ => BgsStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> FfiResult) -> BgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BgsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            BgsStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BgsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BgsStatus::InvalidArgument, msg.into())
}

fn image_len(width: usize, height: usize, count: usize) -> FfiResult<usize> {
    if width == 0 || height == 0 {
        return Err(invalid(format!("empty image {width}x{height}")));
    }
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(count))
        .ok_or_else(|| invalid("image size overflows"))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn frames_from(
    data: *const u16,
    width: usize,
    height: usize,
    count: usize,
) -> FfiResult<Vec<Grid<u16>>> {
    if count == 0 {
        return Err(Failure(BgsStatus::NoData, "no frames".into()));
    }
    let n = image_len(width, height, 1)?;
    let all = input(data, n * count, "frames")?;
    all.chunks_exact(n)
        .map(|c| Grid::from_vec(width, height, c.to_vec()).map_err(Failure::from))
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bgs_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint written by `bgsnetd train`. On success `*out` owns a
/// model that must be released with [`bgs_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn bgs_model_load(path: *const c_char, out: *mut *mut BgsModel) -> BgsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = match load_model::<f32>(path) {
            Ok(m) => Precision::F32(m),
            Err(Error::PrecisionMismatch { .. }) => Precision::F64(load_model::<f64>(path)?),
            Err(e) => return Err(e.into()),
        };
        *out = Box::into_raw(Box::new(BgsModel { inner }));
        Ok(())
    })
}

/// Releases a model. NULL is a no-op.
///
/// # Safety
/// `model` must come from [`bgs_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn bgs_model_free(model: *mut BgsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Patch side length the model expects, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live model.
#[no_mangle]
pub unsafe extern "C" fn bgs_model_patch_size(model: *const BgsModel) -> u32 {
    match model.as_ref().map(|m| &m.inner) {
        Some(Precision::F32(m)) => m.architecture().input_size as u32,
        Some(Precision::F64(m)) => m.architecture().input_size as u32,
        None => 0,
    }
}

/// Smallest nonzero and largest depth over `count` frames.
///
/// # Safety
/// `frames` must hold `width * height * count` values; the outputs must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bgs_depth_stats(
    frames: *const u16,
    width: usize,
    height: usize,
    count: usize,
    min_valid: *mut u16,
    max: *mut u16,
) -> BgsStatus {
    guard(|| {
        if min_valid.is_null() || max.is_null() {
            return Err(null("output"));
        }
        let frames = frames_from(frames, width, height, count)?;
        let stats = compute_frame_stats(&frames)?;
        *min_valid = stats.min_valid;
        *max = stats.max;
        Ok(())
    })
}

/// Normalizes one depth frame into `out`. Absent (0) pixels map to 0.
///
/// # Safety
/// `depth` and `out` must hold `width * height` values.
#[no_mangle]
pub unsafe extern "C" fn bgs_normalize(
    depth: *const u16,
    width: usize,
    height: usize,
    min_valid: u16,
    max: u16,
    alpha: f64,
    out: *mut f64,
) -> BgsStatus {
    guard(|| {
        let n = image_len(width, height, 1)?;
        let frame = Grid::from_vec(width, height, input(depth, n, "depth")?.to_vec())?;
        let dst = output(out, n, "out")?;
        let stats = DepthStats::new(min_valid, max)?;
        let norm = normalize_frame(&frame, stats, NormConfig { alpha })?;
        dst.copy_from_slice(&norm.data);
        Ok(())
    })
}

/// Per-pixel average of the nonzero observations over `count` frames.
///
/// # Safety
/// `frames` must hold `width * height * count` values and `out`
/// `width * height`.
#[no_mangle]
pub unsafe extern "C" fn bgs_extract_background(
    frames: *const u16,
    width: usize,
    height: usize,
    count: usize,
    out: *mut u16,
) -> BgsStatus {
    guard(|| {
        let frames = frames_from(frames, width, height, count)?;
        let dst = output(out, width * height, "out")?;
        dst.copy_from_slice(&extract_background_from(&frames)?.data);
        Ok(())
    })
}

/// Classifies every pixel of a normalized frame against a normalized
/// background. `probs` (may be NULL) receives foreground probabilities,
/// `mask` (may be NULL) receives 255 for foreground and 0 otherwise.
///
/// # Safety
/// `model` must be a live model; `frame`, `background` and the non-NULL
/// outputs must hold `width * height` values.
#[no_mangle]
pub unsafe extern "C" fn bgs_predict(
    model: *const BgsModel,
    frame: *const f64,
    background: *const f64,
    width: usize,
    height: usize,
    threshold: f64,
    probs: *mut f64,
    mask: *mut u8,
) -> BgsStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let n = image_len(width, height, 1)?;
        let f = Grid::from_vec(width, height, input(frame, n, "frame")?.to_vec())?;
        let b = Grid::from_vec(width, height, input(background, n, "background")?.to_vec())?;
        let cfg = InferConfig {
            threshold,
            ..InferConfig::default()
        };
        let (p, m) = match &model.inner {
            Precision::F32(m) => predict_frame(m, &f, &b, &cfg)?,
            Precision::F64(m) => predict_frame(m, &f, &b, &cfg)?,
        };
        if !probs.is_null() {
            output(probs, n, "probs")?.copy_from_slice(&p.data);
        }
        if !mask.is_null() {
            for (d, l) in output(mask, n, "mask")?.iter_mut().zip(&m.data) {
                *d = if *l == MaskLabel::Foreground { 255 } else { 0 };
            }
        }
        Ok(())
    })
}

/// Adds the confusion counts of a binary mask (nonzero = foreground)
/// against a ground-truth frame with byte codes 0/50/85/170/255 into
/// `counts`. `roi` may be NULL; otherwise only its nonzero pixels count.
///
/// # Safety
/// `mask`, `gt` and a non-NULL `roi` must hold `width * height` values;
/// `counts` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bgs_accumulate(
    mask: *const u8,
    gt: *const u8,
    roi: *const u8,
    width: usize,
    height: usize,
    counts: *mut BgsCounts,
) -> BgsStatus {
    guard(|| {
        let n = image_len(width, height, 1)?;
        let acc = counts.as_mut().ok_or_else(|| null("counts"))?;
        let to_mask = |s: &[u8]| {
            let labels = s
                .iter()
                .map(|&v| if v != 0 { MaskLabel::Foreground } else { MaskLabel::Background })
                .collect();
            Grid::from_vec(width, height, labels)
        };
        let m = to_mask(input(mask, n, "mask")?)?;
        let g = decode_groundtruth(&Grid::from_vec(width, height, input(gt, n, "gt")?.to_vec())?)?;
        let r = if roi.is_null() {
            None
        } else {
            Some(to_mask(input(roi, n, "roi")?)?)
        };
        let c = accumulate(&m, &g, r.as_ref())?;
        acc.tp += c.tp;
        acc.fp += c.fp;
        acc.fn_ += c.fn_;
        acc.tn += c.tn;
        Ok(())
    })
}

/// Metrics from confusion counts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bgs_metrics(counts: BgsCounts, out: *mut BgsMetrics) -> BgsStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = compute_metrics(ConfusionCounts {
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            tn: counts.tn,
        });
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        *out = BgsMetrics {
            recall: v(r.recall),
            specificity: v(r.specificity),
            fpr: v(r.fpr),
            fnr: v(r.fnr),
            pwc: v(r.pwc),
            precision: v(r.precision),
            f_measure: v(r.f_measure),
        };
        Ok(())
    })
}
