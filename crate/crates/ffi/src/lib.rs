//! C ABI over the mopflow pipeline.
//!
//! Objects cross the boundary as opaque handles created by `*_new`, `*_read`
//! or computing functions and released with the matching `*_free`. Every
//! fallible function returns an [`MfStatus`]; on failure
//! [`mopflow_last_error`] describes the problem. Outputs are written through
//! out-pointers only on success. Panics are caught at the boundary and
//! reported as [`MfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mopflow::energy::EnergyConfig;
use mopflow::imaging::{to_grayscale, BinaryMask, FlowField, Image};
use mopflow::mop::{MopConfig, ThresholdMode};
use mopflow::segnet::NetParams;
use mopflow::solver::SolverConfig;
use mopflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Panic = 7,
}

impl From<&Error> for MfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::ShapeMismatch(_) | Error::UnsupportedChannels(_) => MfStatus::ShapeMismatch,
            Error::TooSmall(_) | Error::InvalidArgument(_) | Error::Config(_) => MfStatus::InvalidArgument,
            Error::NonFinite { .. } => MfStatus::Numerical,
            Error::BadMagic(_) | Error::Truncated { .. } | Error::Decode { .. } | Error::Checkpoint(_) => {
                MfStatus::Format
            }
            Error::Io(_) | Error::Dataset(_) => MfStatus::Io,
            Error::Stage { source, .. } => MfStatus::from(source.as_ref()),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MfStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MfStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, converting errors and panics into a status and the thread's
/// last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MfStatus::Panic
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MfStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn checked_len(a: usize, b: usize, c: usize) -> Result<usize, Failure> {
    a.checked_mul(b)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Failure(MfStatus::InvalidArgument, "dimensions overflow".into()))
}

/// Opaque image, row-major with interleaved channels.
pub struct MfImage(Image);
/// Opaque flow field.
pub struct MfFlow(FlowField);
/// Opaque binary mask.
pub struct MfMask(BinaryMask);
/// Opaque trained network.
pub struct MfSegnet(NetParams);

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MfEnergyConfig {
    pub epsilon: f64,
    pub lambda: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MfSolverConfig {
    pub levels: usize,
    pub steps_per_level: usize,
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub occlusion_alpha1: f64,
    pub occlusion_alpha2: f64,
    pub bidirectional: bool,
    pub occlusion_refine: bool,
}

/// `threshold < 0` selects Otsu; otherwise it is a fixed magnitude threshold.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MfMopConfig {
    pub threshold: f64,
    pub morph_radius: usize,
    pub min_area: usize,
}

impl From<MfEnergyConfig> for EnergyConfig {
    fn from(c: MfEnergyConfig) -> Self {
        EnergyConfig { epsilon: c.epsilon, lambda: c.lambda }
    }
}

impl From<MfSolverConfig> for SolverConfig {
    fn from(c: MfSolverConfig) -> Self {
        SolverConfig {
            levels: c.levels,
            steps_per_level: c.steps_per_level,
            step_size: c.step_size,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
            occlusion_alpha1: c.occlusion_alpha1,
            occlusion_alpha2: c.occlusion_alpha2,
            bidirectional: c.bidirectional,
            occlusion_refine: c.occlusion_refine,
        }
    }
}

impl From<MfMopConfig> for MopConfig {
    fn from(c: MfMopConfig) -> Self {
        let threshold_mode = if c.threshold < 0.0 { ThresholdMode::Otsu } else { ThresholdMode::Fixed(c.threshold) };
        MopConfig { threshold_mode, morph_radius: c.morph_radius, min_area: c.min_area }
    }
}

#[no_mangle]
pub extern "C" fn mopflow_energy_config_default() -> MfEnergyConfig {
    let d = EnergyConfig::default();
    MfEnergyConfig { epsilon: d.epsilon, lambda: d.lambda }
}

#[no_mangle]
pub extern "C" fn mopflow_solver_config_default() -> MfSolverConfig {
    let d = SolverConfig::default();
    MfSolverConfig {
        levels: d.levels,
        steps_per_level: d.steps_per_level,
        step_size: d.step_size,
        adam_beta1: d.adam_beta1,
        adam_beta2: d.adam_beta2,
        occlusion_alpha1: d.occlusion_alpha1,
        occlusion_alpha2: d.occlusion_alpha2,
        bidirectional: d.bidirectional,
        occlusion_refine: d.occlusion_refine,
    }
}

#[no_mangle]
pub extern "C" fn mopflow_mop_config_default() -> MfMopConfig {
    let d = MopConfig::default();
    let threshold = match d.threshold_mode {
        ThresholdMode::Otsu => -1.0,
        ThresholdMode::Fixed(t) => t,
    };
    MfMopConfig { threshold, morph_radius: d.morph_radius, min_area: d.min_area }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mopflow_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next mopflow call on the same thread.
#[no_mangle]
pub extern "C" fn mopflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Copies `height * width * channels` doubles from `data` into a new image.
/// `channels` must be 1 or 3.
///
/// # Safety
/// `data` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_image_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    out: *mut *mut MfImage,
) -> MfStatus {
    guard(|| {
        let n = checked_len(height, width, channels)?;
        let img = Image::new(height, width, channels, slice(data, n, "data")?.to_vec())?;
        put(out, MfImage(img))
    })
}

/// # Safety
/// `img` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mopflow_image_free(img: *mut MfImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Copies the two planes into a new flow field of `height * width` vectors.
///
/// # Safety
/// `u` and `v` must each point to `height * width` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flow_new(
    height: usize,
    width: usize,
    u: *const f64,
    v: *const f64,
    out: *mut *mut MfFlow,
) -> MfStatus {
    guard(|| {
        let n = checked_len(height, width, 1)?;
        let flow = FlowField::new(height, width, slice(u, n, "u")?.to_vec(), slice(v, n, "v")?.to_vec())?;
        put(out, MfFlow(flow))
    })
}

/// # Safety
/// `flow` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flow_dims(flow: *const MfFlow, height: *mut usize, width: *mut usize) -> MfStatus {
    guard(|| {
        let f = &get(flow, "flow")?.0;
        if height.is_null() || width.is_null() {
            return Err(null("output pointer"));
        }
        *height = f.height;
        *width = f.width;
        Ok(())
    })
}

/// Copies the planes into caller buffers of `len` doubles each; `len` must
/// equal `height * width`.
///
/// # Safety
/// `flow` must be a live handle; `u` and `v` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flow_copy(flow: *const MfFlow, u: *mut f64, v: *mut f64, len: usize) -> MfStatus {
    guard(|| {
        let f = &get(flow, "flow")?.0;
        if len != f.u.len() {
            return Err(Failure(MfStatus::ShapeMismatch, format!("buffer holds {len}, flow has {}", f.u.len())));
        }
        if u.is_null() || v.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(f.u.as_ptr(), u, len);
        ptr::copy_nonoverlapping(f.v.as_ptr(), v, len);
        Ok(())
    })
}

/// # Safety
/// `flow` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flow_free(flow: *mut MfFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// New mask from `height * width` bytes; nonzero is foreground.
///
/// # Safety
/// `bits` must point to `height * width` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn mopflow_mask_new(
    height: usize,
    width: usize,
    bits: *const u8,
    out: *mut *mut MfMask,
) -> MfStatus {
    guard(|| {
        let n = checked_len(height, width, 1)?;
        let mask = BinaryMask::from_bits(height, width, slice(bits, n, "bits")?.iter().map(|b| *b != 0).collect())?;
        put(out, MfMask(mask))
    })
}

/// # Safety
/// `mask` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_mask_dims(
    mask: *const MfMask,
    height: *mut usize,
    width: *mut usize,
    count: *mut usize,
) -> MfStatus {
    guard(|| {
        let m = &get(mask, "mask")?.0;
        if height.is_null() || width.is_null() || count.is_null() {
            return Err(null("output pointer"));
        }
        *height = m.height;
        *width = m.width;
        *count = m.count();
        Ok(())
    })
}

/// Writes 0/1 bytes into a caller buffer of `len == height * width` bytes.
///
/// # Safety
/// `mask` must be a live handle; `bits` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mopflow_mask_copy(mask: *const MfMask, bits: *mut u8, len: usize) -> MfStatus {
    guard(|| {
        let m = &get(mask, "mask")?.0;
        if len != m.bits.len() {
            return Err(Failure(MfStatus::ShapeMismatch, format!("buffer holds {len}, mask has {}", m.bits.len())));
        }
        if bits.is_null() {
            return Err(null("output buffer"));
        }
        for (i, b) in m.bits.iter().enumerate() {
            *bits.add(i) = *b as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `mask` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mopflow_mask_free(mask: *mut MfMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Coarse-to-fine forward flow from `first` to `second`. Colour frames are
/// converted to gray. NULL configs select the defaults.
///
/// # Safety
/// Handles must be live; config pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn mopflow_solve_pyramid(
    first: *const MfImage,
    second: *const MfImage,
    energy: *const MfEnergyConfig,
    solver: *const MfSolverConfig,
    out: *mut *mut MfFlow,
) -> MfStatus {
    guard(|| {
        let a = to_grayscale(&get(first, "first")?.0)?;
        let b = to_grayscale(&get(second, "second")?.0)?;
        let cfg: EnergyConfig = energy.as_ref().map_or_else(EnergyConfig::default, |c| (*c).into());
        let scfg: SolverConfig = solver.as_ref().map_or_else(SolverConfig::default, |c| (*c).into());
        cfg.validate()?;
        scfg.validate()?;
        let flow = mopflow::solver::solve_pyramid(&a, &b, &cfg, &scfg)?;
        put(out, MfFlow(flow))
    })
}

/// Forward-backward occlusion mask.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_occlusion_mask(
    forward: *const MfFlow,
    backward: *const MfFlow,
    alpha1: f64,
    alpha2: f64,
    out: *mut *mut MfMask,
) -> MfStatus {
    guard(|| {
        let f = &get(forward, "forward")?.0;
        let b = &get(backward, "backward")?.0;
        put(out, MfMask(mopflow::solver::occlusion_mask(f, b, alpha1, alpha2)?))
    })
}

/// Union of moving-object proposals; `proposals` (nullable) receives their
/// number. NULL config selects the defaults.
///
/// # Safety
/// `flow` must be live; `config` NULL or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_segment_flow(
    flow: *const MfFlow,
    config: *const MfMopConfig,
    out: *mut *mut MfMask,
    proposals: *mut usize,
) -> MfStatus {
    guard(|| {
        let f = &get(flow, "flow")?.0;
        let cfg: MopConfig = config.as_ref().map_or_else(MopConfig::default, |c| (*c).into());
        cfg.validate()?;
        let (mask, props) = mopflow::mop::segment_flow(f, &cfg)?;
        put(out, MfMask(mask))?;
        if !proposals.is_null() {
            *proposals = props.len();
        }
        Ok(())
    })
}

/// Intersection over union; 1.0 when both masks are empty.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_iou(a: *const MfMask, b: *const MfMask, out: *mut f64) -> MfStatus {
    guard(|| {
        let v = mopflow::evaluation::iou(&get(a, "a")?.0, &get(b, "b")?.0)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = v;
        Ok(())
    })
}

/// Reads a Middlebury `.flo` file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flo_read(path: *const c_char, out: *mut *mut MfFlow) -> MfStatus {
    guard(|| put(out, MfFlow(mopflow::dataset::read_flo(&to_path(path)?)?)))
}

/// Writes a Middlebury `.flo` file atomically.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `flow` live.
#[no_mangle]
pub unsafe extern "C" fn mopflow_flo_write(path: *const c_char, flow: *const MfFlow) -> MfStatus {
    guard(|| Ok(mopflow::dataset::write_flo(&to_path(path)?, &get(flow, "flow")?.0)?))
}

/// Loads a network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_segnet_load(path: *const c_char, out: *mut *mut MfSegnet) -> MfStatus {
    guard(|| put(out, MfSegnet(NetParams::load(&to_path(path)?)?)))
}

/// Foreground mask predicted from a flow field, same size as the flow.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mopflow_segnet_predict(
    net: *const MfSegnet,
    flow: *const MfFlow,
    out: *mut *mut MfMask,
) -> MfStatus {
    guard(|| {
        let mask = mopflow::segnet::predict_mask(&get(net, "net")?.0, &get(flow, "flow")?.0)?;
        put(out, MfMask(mask))
    })
}

/// # Safety
/// `net` must be NULL or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mopflow_segnet_free(net: *mut MfSegnet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
