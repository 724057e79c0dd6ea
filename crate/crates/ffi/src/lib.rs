//! C ABI over `gcm-core`.
//!
//! Objects are opaque heap handles created by `gcm_*_load`/`gcm_*_read`/
//! `gcm_match_*` and released with the matching `gcm_*_free`. Every fallible
//! call returns a [`GcmStatus`]; on failure the message is available from
//! [`gcm_last_error_message`] on the same thread until the next failing call.
//! Panics never cross the boundary and are reported as `GCM_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gcm_core::distill::distillation_loss;
use gcm_core::feature_io::{load_image, read_pyramid};
use gcm_core::geometry::PointPair;
use gcm_core::matcher::RatioScope;
use gcm_core::pipeline::{self, Diagnostics, PipelineConfig};
use gcm_core::{Error, FeaturePyramid, Image};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed image, pyramid or homography file.
    Format = 4,
    ShapeMismatch = 5,
    /// Matching ran but found too few matches or no geometric consensus.
    MatchingFailure = 6,
    OutOfRange = 7,
    Panic = 8,
}

impl From<&Error> for GcmStatus {
    fn from(e: &Error) -> Self {
        match e {
            _ if e.is_matching_failure() => GcmStatus::MatchingFailure,
            Error::Io { .. } => GcmStatus::Io,
            Error::BadMagic
            | Error::BadVersion(_)
            | Error::TruncatedFile { .. }
            | Error::InconsistentSizes(_)
            | Error::NonFinite { .. }
            | Error::UnsupportedFormat(_)
            | Error::MalformedHeader(_)
            | Error::MalformedDataset(_)
            | Error::MalformedHomography { .. } => GcmStatus::Format,
            Error::ShapeMismatch(_) | Error::DepthMismatch(..) | Error::LengthMismatch(..) | Error::ChannelMismatch(..) => {
                GcmStatus::ShapeMismatch
            }
            Error::OutOfBounds { .. } => GcmStatus::OutOfRange,
            _ => GcmStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: GcmStatus, msg: impl Into<String>) -> GcmStatus {
    set_last_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), GcmStatus>) -> GcmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcmStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(GcmStatus::Panic, "internal panic"),
    }
}

fn check(e: Error) -> GcmStatus {
    let status = GcmStatus::from(&e);
    fail(status, e.to_string())
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, GcmStatus> {
    if p.is_null() {
        return Err(fail(GcmStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GcmStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, GcmStatus> {
    p.as_ref()
        .ok_or_else(|| fail(GcmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, GcmStatus> {
    p.as_mut()
        .ok_or_else(|| fail(GcmStatus::NullPointer, format!("{what} is null")))
}

/// Message of the most recent failure on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gcm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |m| m.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gcm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

pub struct GcmImage(Image);
pub struct GcmPyramid(FeaturePyramid);
pub struct GcmMatchResult(pipeline::MatchOutput);

/// Loads a binary PGM (P5) or PPM (P6) image with maxval 255.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_image_load(path: *const c_char, out: *mut *mut GcmImage) -> GcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let img = load_image(path_arg(path)?).map_err(check)?;
        *out = Box::into_raw(Box::new(GcmImage(img)));
        Ok(())
    })
}

/// Creates a grayscale image from `height * width` row-major values in [0, 1].
///
/// # Safety
/// `data` must point to `height * width` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_image_from_gray(
    height: usize,
    width: usize,
    data: *const f32,
    out: *mut *mut GcmImage,
) -> GcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(fail(GcmStatus::NullPointer, "data is null"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| fail(GcmStatus::InvalidArgument, "image size overflows"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let img = Image::new(height, width, 1, values).map_err(check)?;
        *out = Box::into_raw(Box::new(GcmImage(img)));
        Ok(())
    })
}

/// # Safety
/// `img` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gcm_image_free(img: *mut GcmImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// # Safety
/// `img` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_image_dims(
    img: *const GcmImage,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> GcmStatus {
    guard(|| {
        let img = &obj(img, "image")?.0;
        *out_ptr(height, "height")? = img.height();
        *out_ptr(width, "width")? = img.width();
        *out_ptr(channels, "channels")? = img.channels();
        Ok(())
    })
}

/// Reads a GCMF feature pyramid; every level is L2-normalized per cell.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_pyramid_read(path: *const c_char, out: *mut *mut GcmPyramid) -> GcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pyr = read_pyramid(path_arg(path)?).map_err(check)?;
        *out = Box::into_raw(Box::new(GcmPyramid(pyr)));
        Ok(())
    })
}

/// # Safety
/// `pyr` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gcm_pyramid_free(pyr: *mut GcmPyramid) {
    if !pyr.is_null() {
        drop(Box::from_raw(pyr));
    }
}

/// # Safety
/// `pyr` must be a live handle; `levels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_pyramid_num_levels(pyr: *const GcmPyramid, levels: *mut usize) -> GcmStatus {
    guard(|| {
        *out_ptr(levels, "levels")? = obj(pyr, "pyramid")?.0.levels().len();
        Ok(())
    })
}

/// Dimensions of one level and a pointer to its row-major `h * w * c` data.
/// The data pointer stays valid while `pyr` is alive.
///
/// # Safety
/// `pyr` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_pyramid_level(
    pyr: *const GcmPyramid,
    level: usize,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    data: *mut *const f32,
) -> GcmStatus {
    guard(|| {
        let pyr = &obj(pyr, "pyramid")?.0;
        let map = pyr.levels().get(level).ok_or_else(|| {
            fail(
                GcmStatus::OutOfRange,
                format!("level {level} out of range (pyramid has {})", pyr.levels().len()),
            )
        })?;
        *out_ptr(height, "height")? = map.height();
        *out_ptr(width, "width")? = map.width();
        *out_ptr(channels, "channels")? = map.channels();
        *out_ptr(data, "data")? = map.data().as_ptr();
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmMatchConfig {
    /// Final ratio-test threshold in (0, 1].
    pub ratio: f64,
    /// Non-zero selects whole-map ratio-test candidates instead of the parent patch.
    pub ratio_global: u8,
    pub levels: usize,
    pub patch_radius: usize,
    pub ransac_threshold: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    pub ransac_seed: u64,
    /// Stage-1 RANSAC threshold in deepest-level cells.
    pub coarse_threshold_cells: f64,
}

impl From<&PipelineConfig> for GcmMatchConfig {
    fn from(c: &PipelineConfig) -> Self {
        GcmMatchConfig {
            ratio: c.fhr.final_ratio.threshold,
            ratio_global: u8::from(c.fhr.final_ratio.scope == RatioScope::Global),
            levels: c.descriptor.pyramid_depth,
            patch_radius: c.descriptor.patch_radius,
            ransac_threshold: c.ransac.inlier_threshold,
            ransac_max_iterations: c.ransac.max_iterations,
            ransac_confidence: c.ransac.confidence,
            ransac_seed: c.ransac.rng_seed,
            coarse_threshold_cells: c.coarse_threshold_cells,
        }
    }
}

impl GcmMatchConfig {
    fn to_pipeline(self) -> Result<PipelineConfig, GcmStatus> {
        let mut cfg = PipelineConfig::default();
        cfg.fhr.final_ratio.threshold = self.ratio;
        cfg.fhr.final_ratio.scope = if self.ratio_global != 0 {
            RatioScope::Global
        } else {
            RatioScope::Patch
        };
        cfg.descriptor.pyramid_depth = self.levels;
        cfg.descriptor.patch_radius = self.patch_radius;
        cfg.ransac.inlier_threshold = self.ransac_threshold;
        cfg.ransac.max_iterations = self.ransac_max_iterations;
        cfg.ransac.confidence = self.ransac_confidence;
        cfg.ransac.rng_seed = self.ransac_seed;
        cfg.coarse_threshold_cells = self.coarse_threshold_cells;
        cfg.validate().map_err(check)?;
        Ok(cfg)
    }
}

/// Fills `cfg` with the library defaults.
///
/// # Safety
/// `cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_config_default(cfg: *mut GcmMatchConfig) -> GcmStatus {
    guard(|| {
        *out_ptr(cfg, "cfg")? = GcmMatchConfig::from(&PipelineConfig::default());
        Ok(())
    })
}

unsafe fn config_arg(cfg: *const GcmMatchConfig) -> Result<PipelineConfig, GcmStatus> {
    match cfg.as_ref() {
        Some(c) => c.to_pipeline(),
        None => Ok(PipelineConfig::default()),
    }
}

/// Two-stage matching with the built-in descriptor. `cfg` may be null for defaults.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_images(
    a: *const GcmImage,
    b: *const GcmImage,
    cfg: *const GcmMatchConfig,
    out: *mut *mut GcmMatchResult,
) -> GcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (a, b) = (&obj(a, "image a")?.0, &obj(b, "image b")?.0);
        let cfg = config_arg(cfg)?;
        let res = pipeline::match_images(a, b, &cfg).map_err(check)?;
        *out = Box::into_raw(Box::new(GcmMatchResult(res)));
        Ok(())
    })
}

/// Two-stage matching from ingested pyramids. Stage 2 describes A and the
/// warped image with the built-in descriptor (`mixed_features` is set).
///
/// # Safety
/// All handles must be live; `out` must be writable. `cfg` may be null.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_pyramids(
    pyr_a: *const GcmPyramid,
    pyr_b: *const GcmPyramid,
    a: *const GcmImage,
    b: *const GcmImage,
    cfg: *const GcmMatchConfig,
    out: *mut *mut GcmMatchResult,
) -> GcmStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (pa, pb) = (&obj(pyr_a, "pyramid a")?.0, &obj(pyr_b, "pyramid b")?.0);
        let (a, b) = (&obj(a, "image a")?.0, &obj(b, "image b")?.0);
        let mut cfg = config_arg(cfg)?;
        cfg.feature_source = pipeline::FeatureSource::PyramidFiles;
        let res = pipeline::match_pyramids(pa, pb, a, b, None, &cfg).map_err(check)?;
        *out = Box::into_raw(Box::new(GcmMatchResult(res)));
        Ok(())
    })
}

/// # Safety
/// `res` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_result_free(res: *mut GcmMatchResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmPointPair {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub distance: f64,
}

impl From<&PointPair> for GcmPointPair {
    fn from(p: &PointPair) -> Self {
        GcmPointPair {
            xa: p.a.x,
            ya: p.a.y,
            xb: p.b.x,
            yb: p.b.y,
            distance: p.distance,
        }
    }
}

/// # Safety
/// `res` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_result_len(res: *const GcmMatchResult, len: *mut usize) -> GcmStatus {
    guard(|| {
        *out_ptr(len, "len")? = obj(res, "result")?.0.pairs.len();
        Ok(())
    })
}

/// # Safety
/// `res` must be a live handle; `pair` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_result_get(
    res: *const GcmMatchResult,
    index: usize,
    pair: *mut GcmPointPair,
) -> GcmStatus {
    guard(|| {
        let pairs = &obj(res, "result")?.0.pairs;
        let p = pairs.get(index).ok_or_else(|| {
            fail(
                GcmStatus::OutOfRange,
                format!("index {index} out of range ({} pairs)", pairs.len()),
            )
        })?;
        *out_ptr(pair, "pair")? = GcmPointPair::from(p);
        Ok(())
    })
}

/// Stage-1 homography (A to B) as 9 row-major values, scaled to unit Frobenius norm.
///
/// # Safety
/// `res` must be a live handle; `out` must point to 9 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_result_homography(res: *const GcmMatchResult, out: *mut f64) -> GcmStatus {
    guard(|| {
        let m = obj(res, "result")?.0.homography.matrix();
        if out.is_null() {
            return Err(fail(GcmStatus::NullPointer, "out is null"));
        }
        let out = std::slice::from_raw_parts_mut(out, 9);
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = m[(r, c)];
            }
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GcmDiagnostics {
    pub coarse_matches: usize,
    pub coarse_inliers: usize,
    pub inlier_ratio: f64,
    pub fallback: u8,
    pub mixed_features: u8,
    /// Level-0 matches before the ratio test.
    pub pre_ratio_count: usize,
    /// Level-0 matches after the ratio test.
    pub level0_count: usize,
    pub dropped_by_traceback: usize,
}

impl From<&Diagnostics> for GcmDiagnostics {
    fn from(d: &Diagnostics) -> Self {
        GcmDiagnostics {
            coarse_matches: d.coarse_matches,
            coarse_inliers: d.coarse_inliers,
            inlier_ratio: d.inlier_ratio,
            fallback: u8::from(d.fallback),
            mixed_features: u8::from(d.mixed_features),
            pre_ratio_count: d.pre_ratio_count(),
            level0_count: d.level0_count,
            dropped_by_traceback: d.dropped_by_traceback,
        }
    }
}

/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_match_result_diagnostics(res: *const GcmMatchResult, out: *mut GcmDiagnostics) -> GcmStatus {
    guard(|| {
        *out_ptr(out, "out")? = GcmDiagnostics::from(&obj(res, "result")?.0.diagnostics);
        Ok(())
    })
}

/// Distillation loss between the level-0 maps of two pyramids.
///
/// # Safety
/// Both handles must be live; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gcm_distillation_loss(
    teacher: *const GcmPyramid,
    student: *const GcmPyramid,
    loss: *mut f64,
) -> GcmStatus {
    guard(|| {
        let t = &obj(teacher, "teacher")?.0;
        let s = &obj(student, "student")?.0;
        let out = out_ptr(loss, "loss")?;
        *out = distillation_loss(t.level(0), s.level(0)).map_err(check)?;
        Ok(())
    })
}
