//! C ABI over the corrlab library.
//!
//! Every function returns a [`CorrlabStatus`]; outputs go through pointer
//! arguments. Handles are opaque and must be released with the matching
//! `*_free` function. The message of the last failure on the calling thread
//! is available from [`corrlab_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use corrlab::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use corrlab::dataset::Dataset;
use corrlab::eval::{evaluate_report, pck, Frame, PckNorm, PckSpec, PredictionSource};
use corrlab::formats::{load_params, save_params};
use corrlab::manifest::Split;
use corrlab::matcher::{match_pair, transfer_keypoints, MatcherParams};
use corrlab::trainer::TrainConfig;
use corrlab::{Error, Image, Point2};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    NotFound = 6,
    Geometry = 7,
    Data = 8,
    Panic = 9,
}

pub struct CorrlabDataset(Dataset);

pub struct CorrlabParams(MatcherParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> CorrlabStatus {
    match e {
        Error::Io { .. } => CorrlabStatus::Io,
        Error::Format { .. } | Error::Codec { .. } | Error::InvalidManifest(_) | Error::ManifestMismatch(_) => {
            CorrlabStatus::Format
        }
        Error::Config(_) | Error::InvalidSpec(_) => CorrlabStatus::Config,
        Error::UnknownClass(_) | Error::UnknownPair(_) | Error::UnknownImage(_) | Error::MissingGroundTruth(_) => {
            CorrlabStatus::NotFound
        }
        Error::SingularTransform { .. } | Error::InvalidTransform(_) | Error::OutOfBounds { .. } | Error::ImageTooSmall { .. } => {
            CorrlabStatus::Geometry
        }
        Error::EmptySupervision
        | Error::EmptyPairSet
        | Error::EmptyKeypoints
        | Error::LengthMismatch { .. }
        | Error::DimensionMismatch { .. } => CorrlabStatus::Data,
        _ => CorrlabStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CorrlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CorrlabStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CorrlabStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            CorrlabStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CorrlabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn image_arg(rgb: *const f32, width: usize, height: usize, what: &'static str) -> Result<Image, Fail> {
    let len = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| Fail::Arg(format!("{what} is too large")))?;
    if len == 0 {
        return Err(Fail::Arg(format!("{what} is empty")));
    }
    Ok(Image::from_raw(width, height, slice_arg(rgb, len, what)?.to_vec())?)
}

fn points(xy: &[f64]) -> Vec<Point2> {
    xy.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn corrlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn corrlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn corrlab_dataset_load(manifest_path: *const c_char, out: *mut *mut CorrlabDataset) -> CorrlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(manifest_path, "manifest_path")?);
        *out = Box::into_raw(Box::new(CorrlabDataset(Dataset::load(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`corrlab_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn corrlab_dataset_free(ds: *mut CorrlabDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle; the counts are written through the pointers.
#[no_mangle]
pub unsafe extern "C" fn corrlab_dataset_counts(ds: *const CorrlabDataset, images: *mut usize, pairs: *mut usize) -> CorrlabStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        *out_arg(images, "images")? = ds.0.manifest.images.len();
        *out_arg(pairs, "pairs")? = ds.0.manifest.pairs.len();
        Ok(())
    })
}

/// Untrained benchmark parameters for `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn corrlab_params_initial(seed: u64, out: *mut *mut CorrlabParams) -> CorrlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = TrainConfig { seed, ..TrainConfig::benchmark() }.initial_params();
        *out = Box::into_raw(Box::new(CorrlabParams(p)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn corrlab_params_load(path: *const c_char, out: *mut *mut CorrlabParams) -> CorrlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = load_params(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CorrlabParams(p)));
        Ok(())
    })
}

/// # Safety
/// `params` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn corrlab_params_save(params: *const CorrlabParams, path: *const c_char) -> CorrlabStatus {
    guard(|| {
        let p = ref_arg(params, "params")?;
        save_params(&p.0, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `params` must come from a `corrlab_params_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn corrlab_params_free(params: *mut CorrlabParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Transfers `n` target keypoints (interleaved x, y) to the source image.
/// Images are interleaved RGB `f32` in [0, 1], row-major.
///
/// # Safety
/// Buffers must hold `3 * width * height` floats and `2 * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn corrlab_match_keypoints(
    params: *const CorrlabParams,
    src_rgb: *const f32,
    src_width: usize,
    src_height: usize,
    tgt_rgb: *const f32,
    tgt_width: usize,
    tgt_height: usize,
    tgt_xy: *const f64,
    n: usize,
    out_src_xy: *mut f64,
) -> CorrlabStatus {
    guard(|| {
        let p = ref_arg(params, "params")?;
        let src = image_arg(src_rgb, src_width, src_height, "src_rgb")?;
        let tgt = image_arg(tgt_rgb, tgt_width, tgt_height, "tgt_rgb")?;
        let pts = points(slice_arg(tgt_xy, 2 * n, "tgt_xy")?);
        if n > 0 && out_src_xy.is_null() {
            return Err(Fail::Null("out_src_xy"));
        }
        let field = match_pair(&p.0, &src, &tgt)?;
        let pred = transfer_keypoints(&field, &pts)?;
        for (i, q) in pred.iter().enumerate() {
            *out_src_xy.add(2 * i) = q.x;
            *out_src_xy.add(2 * i + 1) = q.y;
        }
        Ok(())
    })
}

/// PCK of `n` predictions against ground truth (interleaved x, y) with the
/// threshold `alpha * max(height, width)`.
///
/// # Safety
/// Both buffers must hold `2 * n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn corrlab_pck(
    pred_xy: *const f64,
    gt_xy: *const f64,
    n: usize,
    alpha: f64,
    height: f64,
    width: f64,
    out: *mut f64,
) -> CorrlabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pred = points(slice_arg(pred_xy, 2 * n, "pred_xy")?);
        let gt = points(slice_arg(gt_xy, 2 * n, "gt_xy")?);
        *out = pck(&pred, &gt, PckSpec::new(alpha, PckNorm::Bbox)?, Frame { height, width })?;
        Ok(())
    })
}

/// Bounding-box PCK of `params` over a split (0 train, 1 val, 2 test).
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn corrlab_evaluate(
    params: *const CorrlabParams,
    ds: *const CorrlabDataset,
    split: u32,
    alpha: f64,
    out: *mut f64,
) -> CorrlabStatus {
    guard(|| {
        let p = ref_arg(params, "params")?;
        let ds = ref_arg(ds, "dataset")?;
        let out = out_arg(out, "out")?;
        let split = match split {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            s => return Err(Fail::Arg(format!("unknown split {s}"))),
        };
        let report = evaluate_report(
            PredictionSource::Model { params: &p.0, dataset: &ds.0 },
            &ds.0.manifest,
            split,
            &[alpha],
            PckNorm::Bbox,
        )?;
        *out = report.primary_pck();
        Ok(())
    })
}

/// Applies corruption `kind` (e.g. "fog") at `severity` 1..=5 with `seed`.
///
/// # Safety
/// `rgb` and `out_rgb` must hold `3 * width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn corrlab_corrupt(
    rgb: *const f32,
    width: usize,
    height: usize,
    kind: *const c_char,
    severity: u8,
    seed: u64,
    out_rgb: *mut f32,
) -> CorrlabStatus {
    guard(|| {
        let img = image_arg(rgb, width, height, "rgb")?;
        let kind: CorruptionKind = str_arg(kind, "kind")?.parse()?;
        if out_rgb.is_null() {
            return Err(Fail::Null("out_rgb"));
        }
        let res = corrupt(&img, &CorruptionSpec::new(kind, severity, seed)?)?;
        std::ptr::copy_nonoverlapping(res.data().as_ptr(), out_rgb, res.data().len());
        Ok(())
    })
}
