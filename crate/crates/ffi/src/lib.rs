//! C ABI for kdseg.
//!
//! Every object crosses the boundary as an opaque handle owned by the caller
//! and released with its `*_free` function. Every fallible call returns a
//! [`KdsegStatus`]; on failure a description of the last error on the calling
//! thread is available from [`kdseg_last_error`]. Panics never unwind into C:
//! they are caught and reported as `KDSEG_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kdseg::infer::{predict, Blend, SlidingWindowConfig};
use kdseg::metrics::{evaluate, EvalConfig, SurfaceSpec};
use kdseg::nifti::{encode_for_path, read_labelmap, read_volume, write_labelmap};
use kdseg::unet::{capacity, checkpoint_hash, load_checkpoint, Network};
use kdseg::volume::{LabelMap, Volume};
use kdseg::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Checkpoint = 4,
    Nifti = 5,
    Io = 6,
    /// The destination buffer is too small; nothing was written.
    BufferTooSmall = 7,
    /// A panic or otherwise unexpected failure inside the library.
    Internal = 8,
}

/// A loaded network (frozen; inference only).
pub struct KdsegNetwork(Network);

/// A single-channel image with voxel spacing.
pub struct KdsegVolume(Volume);

/// An integer label map with voxel spacing.
pub struct KdsegLabelMap(LabelMap);

/// Static facts about a network.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct KdsegNetworkInfo {
    pub num_classes: u32,
    pub input_channels: u32,
    pub num_stages: u32,
    pub patch_size: [u32; 3],
    /// Channel-width scale as a decimal, e.g. 0.25.
    pub alpha: f64,
    pub params: u64,
    /// Multiply-accumulates x2 for one patch.
    pub flops_per_patch: u64,
    pub peak_activation_bytes: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KdsegBlend {
    Uniform = 0,
    Gaussian = 1,
}

/// Sliding-window settings. A zero patch size means the network's own.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KdsegWindowConfig {
    pub patch_size: [u32; 3],
    pub overlap: f64,
    pub blend: KdsegBlend,
    pub gaussian_sigma_scale: f64,
}

/// Class-mean metrics; NaN marks a mean over no defined classes.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct KdsegMetrics {
    pub mean_dice: f64,
    pub mean_nsd: f64,
    pub mean_hd95: f64,
    /// Classes scored (background excluded unless requested).
    pub classes_scored: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(KdsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => KdsegStatus::Shape,
            Error::InvalidArgument(_)
            | Error::Data(_)
            | Error::Frozen
            | Error::NonFiniteLoss { .. } => KdsegStatus::InvalidArgument,
            Error::Checkpoint(_) => KdsegStatus::Checkpoint,
            Error::Nifti(_) => KdsegStatus::Nifti,
            Error::Io(_) => KdsegStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: KdsegStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, records any error, and turns panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KdsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            KdsegStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(&format!("internal error: {msg}"));
            KdsegStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass handles produced by this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| fail(KdsegStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(fail(KdsegStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(p)
    }
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(KdsegStatus::NullPointer, "path is null"));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(KdsegStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn read(path: &PathBuf) -> Result<Vec<u8>, Fail> {
    std::fs::read(path).map_err(|e| fail(KdsegStatus::Io, format!("{}: {e}", path.display())))
}

fn boxed<T>(out: *mut *mut T, value: T) {
    // SAFETY: `out` was checked non-null by the caller of this helper.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kdseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn kdseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file. The network is frozen.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_network_load(
    path: *const c_char,
    out: *mut *mut KdsegNetwork,
) -> KdsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bytes = read(&path_arg(path)?)?;
        let mut net = load_checkpoint(&bytes).map_err(|e| Fail::from(Error::from(e)))?;
        net.freeze();
        boxed(out, KdsegNetwork(net));
        Ok(())
    })
}

/// Loads a checkpoint from memory. The network is frozen.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_network_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut KdsegNetwork,
) -> KdsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(fail(KdsegStatus::NullPointer, "data is null"));
        }
        // SAFETY: caller guarantees `len` readable bytes.
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        let mut net = load_checkpoint(bytes).map_err(|e| Fail::from(Error::from(e)))?;
        net.freeze();
        boxed(out, KdsegNetwork(net));
        Ok(())
    })
}

/// # Safety
/// `net` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdseg_network_free(net: *mut KdsegNetwork) {
    if !net.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(net) });
    }
}

/// # Safety
/// `net` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_network_info(
    net: *const KdsegNetwork,
    info: *mut KdsegNetworkInfo,
) -> KdsegStatus {
    guard(|| {
        let net = &non_null(net, "net")?.0;
        let info = out_ptr(info, "info")?;
        let plan = net.plan();
        let cap = capacity(plan)?;
        let value = KdsegNetworkInfo {
            num_classes: plan.num_classes as u32,
            input_channels: plan.input_channels as u32,
            num_stages: plan.num_stages as u32,
            patch_size: plan.patch_size.map(|p| p as u32),
            alpha: plan.scale.as_f64(),
            params: cap.params,
            flops_per_patch: cap.flops_per_patch,
            peak_activation_bytes: cap.peak_activation_bytes,
        };
        // SAFETY: checked non-null.
        unsafe { *info = value };
        Ok(())
    })
}

/// Writes the SHA-256 of the checkpoint encoding as 64 hex digits plus a NUL.
///
/// # Safety
/// `net` must be a live handle; `buf` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn kdseg_network_hash(
    net: *const KdsegNetwork,
    buf: *mut c_char,
    len: usize,
) -> KdsegStatus {
    guard(|| {
        let net = &non_null(net, "net")?.0;
        let buf = out_ptr(buf, "buf")?;
        let hash = checkpoint_hash(net);
        if len < hash.len() + 1 {
            return Err(fail(
                KdsegStatus::BufferTooSmall,
                format!("need {} bytes, got {len}", hash.len() + 1),
            ));
        }
        // SAFETY: `len` bytes are writable and the hash plus NUL fits.
        unsafe {
            ptr::copy_nonoverlapping(hash.as_ptr().cast(), buf, hash.len());
            *buf.add(hash.len()) = 0;
        }
        Ok(())
    })
}

/// Reads a NIfTI-1 image (`.nii` or `.nii.gz`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_volume_read(
    path: *const c_char,
    out: *mut *mut KdsegVolume,
) -> KdsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let vol = read_volume(&read(&path_arg(path)?)?).map_err(|e| Fail::from(Error::from(e)))?;
        boxed(out, KdsegVolume(vol));
        Ok(())
    })
}

/// Copies a `D*H*W` float buffer (x fastest) into a new volume.
///
/// # Safety
/// `dims` and `spacing` must point to 3 values; `data` to `D*H*W` floats.
#[no_mangle]
pub unsafe extern "C" fn kdseg_volume_from_data(
    dims: *const usize,
    spacing: *const f64,
    data: *const f32,
    out: *mut *mut KdsegVolume,
) -> KdsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if dims.is_null() || spacing.is_null() || data.is_null() {
            return Err(fail(
                KdsegStatus::NullPointer,
                "dims, spacing and data must be non-null",
            ));
        }
        // SAFETY: caller guarantees 3 readable values each.
        let (d, s) = unsafe {
            (
                std::slice::from_raw_parts(dims, 3),
                std::slice::from_raw_parts(spacing, 3),
            )
        };
        let n = d
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .filter(|&n| n > 0)
            .ok_or_else(|| fail(KdsegStatus::InvalidArgument, format!("bad dims {d:?}")))?;
        // SAFETY: caller guarantees `n` readable floats.
        let values = unsafe { std::slice::from_raw_parts(data, n) }.to_vec();
        let t = Tensor::new(vec![1, d[0], d[1], d[2]], values)?;
        boxed(out, KdsegVolume(Volume::new(t, [s[0], s[1], s[2]])?));
        Ok(())
    })
}

/// # Safety
/// `vol` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdseg_volume_free(vol: *mut KdsegVolume) {
    if !vol.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(vol) });
    }
}

/// # Safety
/// `vol` must be a live handle; `dims` must hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn kdseg_volume_dims(
    vol: *const KdsegVolume,
    dims: *mut usize,
) -> KdsegStatus {
    guard(|| {
        let vol = &non_null(vol, "vol")?.0;
        let dims = out_ptr(dims, "dims")?;
        // SAFETY: 3 writable values.
        unsafe { ptr::copy_nonoverlapping(vol.dims().as_ptr(), dims, 3) };
        Ok(())
    })
}

/// Reads a NIfTI-1 label map.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_labelmap_read(
    path: *const c_char,
    out: *mut *mut KdsegLabelMap,
) -> KdsegStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let lm = read_labelmap(&read(&path_arg(path)?)?).map_err(|e| Fail::from(Error::from(e)))?;
        boxed(out, KdsegLabelMap(lm));
        Ok(())
    })
}

/// Writes a label map; gzipped when the path ends in `.gz`.
///
/// # Safety
/// `lm` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn kdseg_labelmap_write(
    lm: *const KdsegLabelMap,
    path: *const c_char,
) -> KdsegStatus {
    guard(|| {
        let lm = &non_null(lm, "labelmap")?.0;
        let path = path_arg(path)?;
        let bytes = write_labelmap(lm).map_err(|e| Fail::from(Error::from(e)))?;
        std::fs::write(&path, encode_for_path(&path, bytes))
            .map_err(|e| fail(KdsegStatus::Io, format!("{}: {e}", path.display())))
    })
}

/// # Safety
/// `lm` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kdseg_labelmap_free(lm: *mut KdsegLabelMap) {
    if !lm.is_null() {
        // SAFETY: produced by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(lm) });
    }
}

/// # Safety
/// `lm` must be a live handle; `dims` must hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn kdseg_labelmap_dims(
    lm: *const KdsegLabelMap,
    dims: *mut usize,
) -> KdsegStatus {
    guard(|| {
        let lm = &non_null(lm, "labelmap")?.0;
        let dims = out_ptr(dims, "dims")?;
        // SAFETY: 3 writable values.
        unsafe { ptr::copy_nonoverlapping(lm.dims().as_ptr(), dims, 3) };
        Ok(())
    })
}

/// Copies the labels (x fastest) into `buf`, which must hold `D*H*W` values.
///
/// # Safety
/// `lm` must be a live handle; `buf` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn kdseg_labelmap_labels(
    lm: *const KdsegLabelMap,
    buf: *mut u16,
    len: usize,
) -> KdsegStatus {
    guard(|| {
        let lm = &non_null(lm, "labelmap")?.0;
        let buf = out_ptr(buf, "buf")?;
        let labels = lm.labels();
        if len < labels.len() {
            return Err(fail(
                KdsegStatus::BufferTooSmall,
                format!("need {} labels, got {len}", labels.len()),
            ));
        }
        // SAFETY: `len >= labels.len()` writable values.
        unsafe { ptr::copy_nonoverlapping(labels.as_ptr(), buf, labels.len()) };
        Ok(())
    })
}

/// Default window settings: the network's patch, overlap 0.5, Gaussian blend.
#[no_mangle]
pub extern "C" fn kdseg_window_config_default() -> KdsegWindowConfig {
    let d = SlidingWindowConfig::new([0; 3]);
    KdsegWindowConfig {
        patch_size: [0; 3],
        overlap: d.overlap,
        blend: KdsegBlend::Gaussian,
        gaussian_sigma_scale: d.gaussian_sigma_scale,
    }
}

/// Sliding-window prediction of a label map. `config` may be null for defaults.
///
/// # Safety
/// `net` and `vol` must be live handles; `config` null or readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_predict(
    net: *const KdsegNetwork,
    vol: *const KdsegVolume,
    config: *const KdsegWindowConfig,
    out: *mut *mut KdsegLabelMap,
) -> KdsegStatus {
    guard(|| {
        let net = &non_null(net, "net")?.0;
        let vol = &non_null(vol, "vol")?.0;
        let out = out_ptr(out, "out")?;
        // SAFETY: null or readable per the contract.
        let c = unsafe { config.as_ref() }
            .copied()
            .unwrap_or_else(|| kdseg_window_config_default());
        let patch = if c.patch_size == [0; 3] {
            net.plan().patch_size
        } else {
            c.patch_size.map(|p| p as usize)
        };
        let cfg = SlidingWindowConfig {
            patch_size: patch,
            overlap: c.overlap,
            blend: match c.blend {
                KdsegBlend::Uniform => Blend::Uniform,
                KdsegBlend::Gaussian => Blend::Gaussian,
            },
            gaussian_sigma_scale: c.gaussian_sigma_scale,
        };
        let (labels, _) = predict(net, vol, &cfg)?;
        boxed(out, KdsegLabelMap(labels));
        Ok(())
    })
}

/// Dice / NSD / HD95 class means of `pred` against `reference`.
/// `num_classes == 0` infers the class count from the largest label.
///
/// # Safety
/// `pred` and `reference` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kdseg_evaluate(
    pred: *const KdsegLabelMap,
    reference: *const KdsegLabelMap,
    nsd_tolerance_mm: f64,
    include_background: bool,
    num_classes: u32,
    out: *mut KdsegMetrics,
) -> KdsegStatus {
    guard(|| {
        let pred = &non_null(pred, "pred")?.0;
        let reference = &non_null(reference, "reference")?.0;
        let out = out_ptr(out, "out")?;
        let cfg = EvalConfig {
            surface: SurfaceSpec {
                nsd_tolerance_mm,
                ..Default::default()
            },
            include_background,
            num_classes: (num_classes > 0).then_some(num_classes as usize),
        };
        let report = evaluate(pred, reference, &cfg)?;
        let value = KdsegMetrics {
            mean_dice: report.mean_dice.value.unwrap_or(f64::NAN),
            mean_nsd: report.mean_nsd.value.unwrap_or(f64::NAN),
            mean_hd95: report.mean_hd95.value.unwrap_or(f64::NAN),
            classes_scored: report.per_class.len() as u32,
        };
        // SAFETY: checked non-null.
        unsafe { *out = value };
        Ok(())
    })
}
