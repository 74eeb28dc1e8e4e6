//! C interface to partfield: semantic-field files, rigid propagation,
//! farthest-point sampling, visualization and trained-policy inference.
//!
//! Every fallible call returns a [`PfStatus`]; the message of the most
//! recent failure on the calling thread is available through
//! [`pf_last_error_message`]. Handles are opaque and must be released with
//! their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use nalgebra::{Matrix3, Vector3};
use partfield::condition::{LiftedSources, Observation};
use partfield::geometry::{farthest_point_sample, Point3, PointCloud, RigidTransform};
use partfield::linalg::Matrix;
use partfield::policy::{load_checkpoint, Policy};
use partfield::semlift::{propagate, SemanticField};
use partfield::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Io = 3,
    Format = 4,
    Load = 5,
    NullPointer = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// Opaque semantic field.
pub struct PfField {
    inner: SemanticField,
}

/// Opaque trained policy.
pub struct PfPolicy {
    inner: Policy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PfStatus {
    match e {
        Error::InvalidArgument(_) | Error::BehindCamera { .. } | Error::ExpertFailure(_) => PfStatus::InvalidArgument,
        Error::Config(_) => PfStatus::Config,
        Error::Io { .. } => PfStatus::Io,
        Error::Format { .. } | Error::Ingestion { .. } => PfStatus::Format,
        Error::Load(_) => PfStatus::Load,
    }
}

struct Fail(PfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PfStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PfStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn points_from(xyz: &[f64]) -> Vec<Point3> {
    xyz.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

/// Row-major 3×3 rotation plus translation.
fn transform_from(rotation: &[f64], translation: &[f64]) -> Result<RigidTransform, Fail> {
    let r = Matrix3::from_row_slice(rotation);
    let t = Vector3::from_column_slice(translation);
    Ok(RigidTransform::new(r, t)?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length, or 0 when no
/// error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Builds a field from `n` points (`xyz`, 3n values) and an `n × dim`
/// row-major feature block.
///
/// # Safety
/// `xyz` and `features` must hold `3n` and `n·dim` readable values; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_field_new(
    xyz: *const f64,
    features: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut PfField,
) -> PfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let p = slice_arg(xyz, 3 * n, "xyz")?;
        let f = slice_arg(features, n * dim, "features")?;
        let field = SemanticField::new(points_from(p), Matrix::new(n, dim, f.to_vec()), 0)?;
        *out = Box::into_raw(Box::new(PfField { inner: field }));
        Ok(())
    })
}

/// Reads a field text file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_field_read(path: *const c_char, out: *mut *mut PfField) -> PfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let field = SemanticField::read_text(&path_arg(path, "path")?, 0)?;
        *out = Box::into_raw(Box::new(PfField { inner: field }));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pf_field_write(field: *const PfField, path: *const c_char) -> PfStatus {
    guard(|| {
        let f = field.as_ref().ok_or_else(|| null("field"))?;
        Ok(f.inner.write_text(&path_arg(path, "path")?)?)
    })
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_field_len(field: *const PfField) -> usize {
    field.as_ref().map_or(0, |f| f.inner.len())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_field_feature_dim(field: *const PfField) -> usize {
    field.as_ref().map_or(0, |f| f.inner.feature_dim())
}

/// Copies positions (3 per point) and features (`dim` per point) out.
/// Either buffer may be null to skip it.
///
/// # Safety
/// Non-null buffers must hold `xyz_len` / `features_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pf_field_copy(
    field: *const PfField,
    xyz: *mut f64,
    xyz_len: usize,
    features: *mut f64,
    features_len: usize,
) -> PfStatus {
    guard(|| {
        let f = &field.as_ref().ok_or_else(|| null("field"))?.inner;
        if !xyz.is_null() {
            if xyz_len < 3 * f.len() {
                return Err(Fail(PfStatus::BufferTooSmall, format!("xyz needs {} values", 3 * f.len())));
            }
            let dst = slice::from_raw_parts_mut(xyz, 3 * f.len());
            for (c, p) in dst.chunks_exact_mut(3).zip(f.points()) {
                c.copy_from_slice(p.as_slice());
            }
        }
        if !features.is_null() {
            let src = f.features().data();
            if features_len < src.len() {
                return Err(Fail(PfStatus::BufferTooSmall, format!("features needs {} values", src.len())));
            }
            slice::from_raw_parts_mut(features, src.len()).copy_from_slice(src);
        }
        Ok(())
    })
}

/// Moves the field rigidly by a row-major rotation (9 values) and a
/// translation (3 values); features are copied unchanged.
///
/// # Safety
/// `rotation` and `translation` must hold 9 and 3 readable values.
#[no_mangle]
pub unsafe extern "C" fn pf_field_propagate(
    field: *const PfField,
    rotation: *const f64,
    translation: *const f64,
    out: *mut *mut PfField,
) -> PfStatus {
    guard(|| {
        let f = &field.as_ref().ok_or_else(|| null("field"))?.inner;
        let out = out_arg(out, "out")?;
        let pose = transform_from(slice_arg(rotation, 9, "rotation")?, slice_arg(translation, 3, "translation")?)?;
        *out = Box::into_raw(Box::new(PfField {
            inner: propagate(f, &pose),
        }));
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_field_free(field: *mut PfField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Farthest-point sampling of `k` indices from `n` points.
///
/// # Safety
/// `xyz` must hold `3n` readable values and `out_indices` `k` writable ones.
#[no_mangle]
pub unsafe extern "C" fn pf_farthest_point_sample(
    xyz: *const f64,
    n: usize,
    k: usize,
    seed: u64,
    out_indices: *mut usize,
) -> PfStatus {
    guard(|| {
        let cloud = PointCloud::new(points_from(slice_arg(xyz, 3 * n, "xyz")?))?;
        let idx = farthest_point_sample(&cloud, k, seed)?;
        if out_indices.is_null() {
            return Err(null("out_indices"));
        }
        slice::from_raw_parts_mut(out_indices, k).copy_from_slice(&idx);
        Ok(())
    })
}

/// Writes `<out_prefix>.txt` and `<out_prefix>.png` for a field file.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pf_visualize_field(field_path: *const c_char, out_prefix: *const c_char) -> PfStatus {
    guard(|| {
        let field = path_arg(field_path, "field_path")?;
        let prefix = path_arg(out_prefix, "out_prefix")?;
        partfield::bench::visualize_field(&field, &prefix)?;
        Ok(())
    })
}

/// Loads a policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_policy_load(path: *const c_char, out: *mut *mut PfPolicy) -> PfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let policy = load_checkpoint(&path_arg(path, "path")?, None)?;
        *out = Box::into_raw(Box::new(PfPolicy { inner: policy }));
        Ok(())
    })
}

/// Action chunk shape (`horizon × action_dim`) and the expected feature and
/// robot-state dimensions.
///
/// # Safety
/// `policy` must be a live handle; outputs may be null to skip them.
#[no_mangle]
pub unsafe extern "C" fn pf_policy_dims(
    policy: *const PfPolicy,
    horizon: *mut usize,
    action_dim: *mut usize,
    feature_dim: *mut usize,
    robot_dim: *mut usize,
) -> PfStatus {
    guard(|| {
        let c = &policy.as_ref().ok_or_else(|| null("policy"))?.inner.config;
        for (p, v) in [
            (horizon, c.denoiser.horizon),
            (action_dim, c.denoiser.action_dim),
            (feature_dim, c.condition.feature_dim),
            (robot_dim, c.condition.robot_dim),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// One observation as flat arrays. `part_of[i]` names the part (`0..num_parts`)
/// of point `i`; the rotation is row-major.
#[repr(C)]
pub struct PfObservation {
    pub num_points: usize,
    pub feature_dim: usize,
    pub xyz: *const f64,
    pub source_a: *const f64,
    pub source_b: *const f64,
    pub num_parts: usize,
    pub part_of: *const usize,
    pub pose_rotation: *const f64,
    pub pose_translation: *const f64,
    pub robot_dim: usize,
    pub robot: *const f64,
}

unsafe fn observation_from(o: &PfObservation) -> Result<Observation, Fail> {
    let n = o.num_points;
    let d = o.feature_dim;
    let xyz = slice_arg(o.xyz, 3 * n, "xyz")?;
    let a = slice_arg(o.source_a, n * d, "source_a")?;
    let b = slice_arg(o.source_b, n * d, "source_b")?;
    let part_of = slice_arg(o.part_of, n, "part_of")?;
    let mut parts = vec![Vec::new(); o.num_parts];
    for (i, &p) in part_of.iter().enumerate() {
        parts
            .get_mut(p)
            .ok_or_else(|| Fail(PfStatus::InvalidArgument, format!("point {i} names part {p}")))?
            .push(i);
    }
    Ok(Observation {
        scene: LiftedSources::new(points_from(xyz), Matrix::new(n, d, a.to_vec()), Matrix::new(n, d, b.to_vec()))?,
        part_indices: parts,
        part_pose: transform_from(
            slice_arg(o.pose_rotation, 9, "pose_rotation")?,
            slice_arg(o.pose_translation, 3, "pose_translation")?,
        )?,
        robot: slice_arg(o.robot, o.robot_dim, "robot")?.to_vec(),
    })
}

/// Samples an action chunk (row-major `horizon × action_dim`) into `out`.
///
/// # Safety
/// `policy` must be a live handle, `obs` must describe readable arrays of the
/// stated sizes, and `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn pf_policy_act(
    policy: *const PfPolicy,
    obs: *const PfObservation,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> PfStatus {
    guard(|| {
        let p = &policy.as_ref().ok_or_else(|| null("policy"))?.inner;
        let o = observation_from(obs.as_ref().ok_or_else(|| null("obs"))?)?;
        let (h, d) = p.action_shape();
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < h * d {
            return Err(Fail(PfStatus::BufferTooSmall, format!("out needs {} values", h * d)));
        }
        let a = p.act(&o, seed)?;
        slice::from_raw_parts_mut(out, h * d).copy_from_slice(a.data());
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_policy_free(policy: *mut PfPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
