//! C ABI over the volseg toolkit.
//!
//! Every fallible entry point returns a [`VsStatus`]; on failure the message
//! is available from [`vs_last_error`] on the same thread. Volumes cross the
//! boundary as opaque [`VsVolume`] handles that the caller releases with
//! [`vs_volume_free`]. Panics never unwind into C: they are caught and
//! reported as `VS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use volseg::losses::{LossError, LossKind, NoSquareGradient};
use volseg::metrics::{self, MetricsError};
use volseg::theory::{self, DistributionPair};
use volseg::volgrid::{self, BinaryMask, Dims, Dtype, Spacing, Volume, VolumeError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimsMismatch = 3,
    Io = 4,
    Format = 5,
    EmptyMask = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsLoss {
    Dsc = 0,
    Jaccard = 1,
    WeightedCe = 2,
    Ce = 3,
    /// No-square Dice with the exact derivative.
    DscNoSquare = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsDtype {
    U8 = 0,
    F32 = 1,
}

/// Evaluation measures. Distances are in millimetres; entries that are
/// undefined for an empty mask are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsMetrics {
    pub dsc: f64,
    pub arvd_pct: f64,
    pub abd_mm: f64,
    pub hd95_mm: f64,
}

/// Opaque volume handle.
pub struct VsVolume {
    inner: Volume,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(VsStatus, String);

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        let status = match e {
            VolumeError::Io { .. } | VolumeError::MissingRawFile(_) => VsStatus::Io,
            VolumeError::DimsMismatch { .. } => VsStatus::DimsMismatch,
            VolumeError::InvalidDims(_)
            | VolumeError::InvalidSpacing(_)
            | VolumeError::DataLength { .. }
            | VolumeError::NotBinary { .. }
            | VolumeError::NotProbability { .. }
            | VolumeError::NonIntegralVoxel { .. } => VsStatus::InvalidArgument,
            _ => VsStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        let status = match e {
            LossError::LengthMismatch { .. } | LossError::DimsMismatch { .. } => VsStatus::DimsMismatch,
            _ => VsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        let status = match e {
            MetricsError::DimsMismatch(..) => VsStatus::DimsMismatch,
            MetricsError::EmptyMask(_) => VsStatus::EmptyMask,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            VsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            VsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(VsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn volume<'a>(v: *const VsVolume, what: &str) -> Result<&'a Volume, Failure> {
    v.as_ref().map(|h| &h.inner).ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(VsStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn emit(out: *mut *mut VsVolume, v: Volume) {
    // SAFETY: callers check `out` for null before computing `v`.
    unsafe { *out = Box::into_raw(Box::new(VsVolume { inner: v })) };
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next `vs_*` call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `len` voxels (x fastest, then y, then z) into a new volume.
///
/// # Safety
/// `data` must point to `len` readable floats and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_new(
    nx: usize,
    ny: usize,
    nz: usize,
    sx: f64,
    sy: f64,
    sz: f64,
    data: *const f32,
    len: usize,
    out: *mut *mut VsVolume,
) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = input(data, len, "data")?.to_vec();
        let v = Volume::new(Dims::new(nx, ny, nz), Spacing::new(sx, sy, sz)?, data)?;
        emit(out, v);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_read(path: *const c_char, out: *mut *mut VsVolume) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path)?;
        let v = match path.extension().and_then(|e| e.to_str()) {
            Some("mhd") => volgrid::read_mhd_subset(&path)?,
            _ => volgrid::read_vvf(&path)?,
        };
        emit(out, v);
        Ok(())
    })
}

/// Writes a VVF file.
///
/// # Safety
/// `vol` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_write_vvf(vol: *const VsVolume, dtype: VsDtype, path: *const c_char) -> VsStatus {
    guard(|| {
        let v = volume(vol, "vol")?;
        let path = path_arg(path)?;
        let dtype = match dtype {
            VsDtype::U8 => Dtype::U8,
            VsDtype::F32 => Dtype::F32,
        };
        volgrid::write_vvf(v, dtype, path)?;
        Ok(())
    })
}

/// # Safety
/// `vol` must be a live handle; `dims` and `spacing`, when non-null, must
/// each hold three writable elements.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_shape(vol: *const VsVolume, dims: *mut usize, spacing: *mut f64) -> VsStatus {
    guard(|| {
        let v = volume(vol, "vol")?;
        if !dims.is_null() {
            let d = v.dims();
            ptr::copy_nonoverlapping([d.nx, d.ny, d.nz].as_ptr(), dims, 3);
        }
        if !spacing.is_null() {
            let s = v.spacing();
            ptr::copy_nonoverlapping([s.sx, s.sy, s.sz].as_ptr(), spacing, 3);
        }
        Ok(())
    })
}

/// Copies the voxels into `data`, which must hold exactly the voxel count.
///
/// # Safety
/// `vol` must be a live handle and `data` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_copy_data(vol: *const VsVolume, data: *mut f32, len: usize) -> VsStatus {
    guard(|| {
        let v = volume(vol, "vol")?;
        if len != v.len() {
            return Err(Failure(
                VsStatus::InvalidArgument,
                format!("buffer holds {len} floats, volume has {}", v.len()),
            ));
        }
        if data.is_null() {
            return Err(null("data"));
        }
        ptr::copy_nonoverlapping(v.data().as_ptr(), data, len);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `vol` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_volume_free(vol: *mut VsVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Evaluates a loss on flat arrays. `grad` may be null; otherwise it receives
/// `n` partial derivatives with respect to `pred`.
///
/// # Safety
/// `pred` and `truth` must hold `n` readable doubles, `value` must be
/// writable, and `grad` must be null or hold `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_loss(
    kind: VsLoss,
    pred: *const f64,
    truth: *const f64,
    n: usize,
    value: *mut f64,
    grad: *mut f64,
) -> VsStatus {
    guard(|| {
        if value.is_null() {
            return Err(null("value"));
        }
        let p = input(pred, n, "pred")?;
        let t = input(truth, n, "truth")?;
        let kind = match kind {
            VsLoss::Dsc => LossKind::Dsc,
            VsLoss::Jaccard => LossKind::Jaccard,
            VsLoss::WeightedCe => LossKind::WeightedCe,
            VsLoss::Ce => LossKind::Ce,
            VsLoss::DscNoSquare => LossKind::DscNoSquare(NoSquareGradient::Exact),
        };
        let eval = kind.evaluate(p, t)?;
        *value = eval.value;
        if !grad.is_null() {
            ptr::copy_nonoverlapping(eval.grad.as_ptr(), grad, n);
        }
        Ok(())
    })
}

/// Compares a binary prediction with a binary reference.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_metrics(pred: *const VsVolume, truth: *const VsVolume, out: *mut VsMetrics) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = BinaryMask::new(volume(pred, "pred")?.clone())?;
        let t = BinaryMask::new(volume(truth, "truth")?.clone())?;
        let r = metrics::evaluate(&p, &t)?;
        *out = VsMetrics {
            dsc: r.dsc,
            arvd_pct: r.arvd_pct.unwrap_or(f64::NAN),
            abd_mm: r.abd_mm.unwrap_or(f64::NAN),
            hd95_mm: r.hd95_mm.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

unsafe fn pair(p: *const f64, q: *const f64, n: usize) -> Result<DistributionPair, Failure> {
    let p = input(p, n, "p")?.to_vec();
    let q = input(q, n, "q")?.to_vec();
    DistributionPair::new(p, q).map_err(|e| Failure(VsStatus::InvalidArgument, e.to_string()))
}

/// `KL(p || q)`; infinite when q vanishes where p does not.
///
/// # Safety
/// `p` and `q` must hold `n` readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_kl_divergence(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = theory::kl_divergence(&pair(p, q, n)?);
        Ok(())
    })
}

/// Supremum distance `max_i |p_i - q_i|`.
///
/// # Safety
/// `p` and `q` must hold `n` readable doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vs_tv_distance(p: *const f64, q: *const f64, n: usize, out: *mut f64) -> VsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = theory::tv_distance(&pair(p, q, n)?);
        Ok(())
    })
}
