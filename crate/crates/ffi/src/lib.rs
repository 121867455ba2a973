//! C ABI over the primscene library.
//!
//! Every fallible function returns a [`PsStatus`]; on failure the message is
//! available from [`ps_last_error`] on the same thread. Layouts and noise
//! schedules are opaque handles released with their `_free` function.
//! Matrices are row-major `double` arrays.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use primscene::detection::{iou3d, OrientedBox3};
use primscene::diffusion::{self, Denoiser, GaussianDenoiser, LatentGrid, LatentMask, NoiseSchedule, RepaintParams};
use primscene::generative::{frechet_distance, precision_recall, FeatureSet, Moments};
use primscene::geometry::{cholesky_decode, encode_pose, CholeskyParams, Rotation3, Scale3};
use primscene::matching::hungarian;
use primscene::scene::{load_layout, save_layout, synth_scene, DensityLabel, SceneLayout, SynthConfig};
use primscene::voxel::{self, memory_footprint, voxelize, MiouClasses, Representation, VoxelSpec};
use primscene::Error;

use nalgebra::{DMatrix, DVector, Matrix3};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Format = 5,
    Numeric = 6,
    DenoiserUnavailable = 7,
    Protocol = 8,
    Callback = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::Io { .. } => PsStatus::Io,
        Error::Parse { .. } => PsStatus::Parse,
        Error::Format { .. } | Error::UnsupportedVersion { .. } => PsStatus::Format,
        Error::NotPositiveDefinite { .. }
        | Error::InvalidCholesky(_)
        | Error::InvalidRotation(_)
        | Error::InvalidScale(_)
        | Error::InvalidMoments(_)
        | Error::InvalidVariance(_)
        | Error::Geometry { .. } => PsStatus::Numeric,
        Error::DenoiserUnavailable(_) => PsStatus::DenoiserUnavailable,
        Error::Protocol(_) => PsStatus::Protocol,
        _ => PsStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            PsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            let status = match &e {
                Error::Protocol(m) if m.starts_with("callback") => PsStatus::Callback,
                e => status_of(e),
            };
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return if n == 0 { Ok(&[]) } else { Err(Fail::Null(what)) };
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Lib(Error::Config("path is not UTF-8".into())))
}

fn label_arg(label: i32) -> Result<Option<DensityLabel>, Fail> {
    if label < 0 {
        return Ok(None);
    }
    DensityLabel::from_index(label as u32)
        .map(Some)
        .ok_or_else(|| Fail::Lib(Error::Config(format!("unknown density label {label}"))))
}

/// Message of the last failed call on this thread; valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------------------
// Layouts

/// Opaque scene layout.
pub struct PsLayout(SceneLayout);

#[no_mangle]
pub unsafe extern "C" fn ps_layout_load(path: *const c_char, out: *mut *mut PsLayout) -> PsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let layout = load_layout(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PsLayout(layout)));
        Ok(())
    })
}

/// Deterministic synthetic street scene for `seed`.
#[no_mangle]
pub unsafe extern "C" fn ps_layout_synth(seed: u64, out: *mut *mut PsLayout) -> PsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let layout = synth_scene(seed, &SynthConfig::default())?;
        *out = Box::into_raw(Box::new(PsLayout(layout)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_layout_save(layout: *const PsLayout, path: *const c_char) -> PsStatus {
    guard(|| {
        let layout = layout.as_ref().ok_or(Fail::Null("layout"))?;
        save_layout(&layout.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Number of existing (non-padding) primitives.
#[no_mangle]
pub unsafe extern "C" fn ps_layout_primitive_count(layout: *const PsLayout, out: *mut usize) -> PsStatus {
    guard(|| {
        let layout = layout.as_ref().ok_or(Fail::Null("layout"))?;
        *out_ref(out, "out")? = layout.0.real_primitives().count();
        Ok(())
    })
}

/// Releases a layout; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_layout_free(layout: *mut PsLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// Voxel IoU and mIoU (percent) of two layouts on a grid of `dims` voxels
/// of edge `voxel` meters, with the default origin.
#[no_mangle]
pub unsafe extern "C" fn ps_voxel_iou(
    truth: *const PsLayout,
    pred: *const PsLayout,
    dims: *const usize,
    voxel: f64,
    out_iou: *mut f64,
    out_miou: *mut f64,
) -> PsStatus {
    guard(|| {
        let truth = truth.as_ref().ok_or(Fail::Null("truth"))?;
        let pred = pred.as_ref().ok_or(Fail::Null("pred"))?;
        let d = input(dims, 3, "dims")?;
        let spec = VoxelSpec {
            dims: [d[0], d[1], d[2]],
            voxel,
            ..VoxelSpec::default()
        };
        spec.validate()?;
        let r = voxel::iou(
            &voxelize(&truth.0, spec)?,
            &voxelize(&pred.0, spec)?,
            MiouClasses::PresentInTruth,
        )?;
        *out_ref(out_iou, "out_iou")? = r.iou;
        *out_ref(out_miou, "out_miou")? = r.miou;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Geometry and matching

fn matrix3(m: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(m)
}

/// Cholesky code `(l11, l21, l22, l31, l32, l33)` of rotation `rotation`
/// (3×3) and full edge lengths `scale`.
#[no_mangle]
pub unsafe extern "C" fn ps_cholesky_encode(rotation: *const f64, scale: *const f64, out: *mut f64) -> PsStatus {
    guard(|| {
        let r = Rotation3::from_matrix(matrix3(input(rotation, 9, "rotation")?))?;
        let s = input(scale, 3, "scale")?;
        let code = encode_pose(&r, &Scale3::new([s[0], s[1], s[2]])?)?;
        output(out, 6, "out")?.copy_from_slice(&code.0);
        Ok(())
    })
}

/// Rotation (3×3) and descending edge lengths of a Cholesky code.
#[no_mangle]
pub unsafe extern "C" fn ps_cholesky_decode(code: *const f64, out_rotation: *mut f64, out_scale: *mut f64) -> PsStatus {
    guard(|| {
        let c = input(code, 6, "code")?;
        let pose = cholesky_decode(&CholeskyParams([c[0], c[1], c[2], c[3], c[4], c[5]]))?;
        let m = pose.rotation.matrix();
        let rot = output(out_rotation, 9, "out_rotation")?;
        for i in 0..3 {
            for j in 0..3 {
                rot[3 * i + j] = m[(i, j)];
            }
        }
        output(out_scale, 3, "out_scale")?.copy_from_slice(&pose.scale.values());
        Ok(())
    })
}

/// Minimum-cost assignment of an `n × n` cost matrix: row `i` goes to
/// column `out_perm[i]`.
#[no_mangle]
pub unsafe extern "C" fn ps_hungarian(
    cost: *const f64,
    n: usize,
    out_perm: *mut usize,
    out_cost: *mut f64,
) -> PsStatus {
    guard(|| {
        let c = input(cost, n * n, "cost")?;
        let a = hungarian(c, n)?;
        output(out_perm, n, "out_perm")?.copy_from_slice(&a.perm);
        *out_ref(out_cost, "out_cost")? = a.cost;
        Ok(())
    })
}

/// Oriented box: center, row-major rotation and full extents.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PsBox {
    pub center: [f64; 3],
    pub rotation: [f64; 9],
    pub extents: [f64; 3],
}

fn to_box(b: &PsBox) -> Result<OrientedBox3, Fail> {
    let r = Rotation3::from_matrix(matrix3(&b.rotation))?;
    if b.extents.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
        return Err(Fail::Lib(Error::InvalidScale(format!("{:?}", b.extents))));
    }
    Ok(OrientedBox3::new(b.center, &r, b.extents))
}

#[no_mangle]
pub unsafe extern "C" fn ps_iou3d(a: *const PsBox, b: *const PsBox, out: *mut f64) -> PsStatus {
    guard(|| {
        let a = to_box(a.as_ref().ok_or(Fail::Null("a"))?)?;
        let b = to_box(b.as_ref().ok_or(Fail::Null("b"))?)?;
        *out_ref(out, "out")? = iou3d(&a, &b);
        Ok(())
    })
}

/// Bytes and MiB of a dense voxel grid with 4-byte cells.
#[no_mangle]
pub unsafe extern "C" fn ps_memory_voxel(dims: *const usize, out_bytes: *mut u64, out_mib: *mut f64) -> PsStatus {
    guard(|| {
        let d = input(dims, 3, "dims")?;
        let r = memory_footprint(Representation::Voxel([d[0], d[1], d[2]]));
        *out_ref(out_bytes, "out_bytes")? = r.bytes;
        *out_ref(out_mib, "out_mib")? = r.mib;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Generative metrics

/// Fréchet distance between two `d`-dimensional Gaussians.
#[no_mangle]
pub unsafe extern "C" fn ps_frechet(
    d: usize,
    mean_a: *const f64,
    cov_a: *const f64,
    mean_b: *const f64,
    cov_b: *const f64,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let a = Moments::new(
            DVector::from_column_slice(input(mean_a, d, "mean_a")?),
            DMatrix::from_row_slice(d, d, input(cov_a, d * d, "cov_a")?),
        )?;
        let b = Moments::new(
            DVector::from_column_slice(input(mean_b, d, "mean_b")?),
            DMatrix::from_row_slice(d, d, input(cov_b, d * d, "cov_b")?),
        )?;
        *out_ref(out, "out")? = frechet_distance(&a, &b)?;
        Ok(())
    })
}

/// k-NN manifold precision and recall of `n_gen` generated against
/// `n_real` real feature rows of dimension `d`.
#[no_mangle]
pub unsafe extern "C" fn ps_precision_recall(
    real: *const f32,
    n_real: usize,
    generated: *const f32,
    n_gen: usize,
    d: usize,
    k: usize,
    out_precision: *mut f64,
    out_recall: *mut f64,
) -> PsStatus {
    guard(|| {
        let r = FeatureSet::new(n_real, d, input(real, n_real * d, "real")?.to_vec())?;
        let g = FeatureSet::new(n_gen, d, input(generated, n_gen * d, "generated")?.to_vec())?;
        let pr = precision_recall(&r, &g, k)?;
        *out_ref(out_precision, "out_precision")? = pr.precision;
        *out_ref(out_recall, "out_recall")? = pr.recall;
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Diffusion

/// Opaque noise schedule, remembering the base schedule it was strided from.
pub struct PsSchedule {
    base: NoiseSchedule,
    steps: NoiseSchedule,
}

/// Linear beta schedule with `steps` steps.
#[no_mangle]
pub unsafe extern "C" fn ps_schedule_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut PsSchedule,
) -> PsStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let base = NoiseSchedule::linear(steps, beta_start, beta_end)?;
        *out = Box::into_raw(Box::new(PsSchedule {
            steps: base.clone(),
            base,
        }));
        Ok(())
    })
}

/// Uniformly strided copy of `schedule`'s base with `steps` steps.
#[no_mangle]
pub unsafe extern "C" fn ps_schedule_respaced(
    schedule: *const PsSchedule,
    steps: usize,
    out: *mut *mut PsSchedule,
) -> PsStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or(Fail::Null("schedule"))?;
        let out = out_ref(out, "out")?;
        let strided = s.base.respaced(steps)?;
        *out = Box::into_raw(Box::new(PsSchedule {
            base: s.base.clone(),
            steps: strided,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_schedule_len(schedule: *const PsSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.steps.len())
}

/// `ᾱ_t` for `0 ≤ t ≤ len`.
#[no_mangle]
pub unsafe extern "C" fn ps_schedule_alpha_bar(schedule: *const PsSchedule, t: usize, out: *mut f64) -> PsStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or(Fail::Null("schedule"))?;
        if t > s.steps.len() {
            return Err(Fail::Lib(Error::Config(format!(
                "timestep {t} beyond {}",
                s.steps.len()
            ))));
        }
        *out_ref(out, "out")? = s.steps.alpha_bar(t);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_schedule_free(schedule: *mut PsSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Noise-prediction callback. Reads `h·w·c` values from `z_t` (channels
/// fastest), writes as many to `out` and returns 0 on success. `t` is a
/// base-schedule timestep and `label` is −1 when unconditioned. It may be
/// called from any thread.
pub type PsDenoiseFn = Option<
    unsafe extern "C" fn(
        user: *mut c_void,
        z_t: *const f64,
        h: usize,
        w: usize,
        c: usize,
        t: usize,
        label: i32,
        out: *mut f64,
    ) -> i32,
>;

struct CallbackDenoiser {
    f: unsafe extern "C" fn(*mut c_void, *const f64, usize, usize, usize, usize, i32, *mut f64) -> i32,
    user: *mut c_void,
}

// The callback contract requires thread safety from the caller.
unsafe impl Send for CallbackDenoiser {}
unsafe impl Sync for CallbackDenoiser {}

impl Denoiser for CallbackDenoiser {
    fn predict_noise(&self, z: &LatentGrid, t: usize, label: Option<DensityLabel>) -> primscene::Result<LatentGrid> {
        let mut out = LatentGrid::zeros(z.h, z.w, z.c);
        out.split = z.split;
        let y = label.map_or(-1, |l| l.index() as i32);
        let rc = unsafe { (self.f)(self.user, z.data.as_ptr(), z.h, z.w, z.c, t, y, out.data.as_mut_ptr()) };
        if rc != 0 {
            return Err(Error::Protocol(format!("callback returned {rc}")));
        }
        if out.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Protocol("callback produced non-finite values".into()));
        }
        Ok(out)
    }
}

/// Callback denoiser when `denoise` is set, otherwise the analytic
/// Gaussian one with mean `mean` and variance `variance`.
unsafe fn make_denoiser(
    denoise: PsDenoiseFn,
    user: *mut c_void,
    mean: f64,
    variance: f64,
    shape: (usize, usize, usize),
    base: &NoiseSchedule,
) -> Result<Box<dyn Denoiser>, Fail> {
    Ok(match denoise {
        Some(f) => Box::new(CallbackDenoiser { f, user }),
        None => Box::new(GaussianDenoiser::new(
            LatentGrid::filled(shape.0, shape.1, shape.2, mean),
            variance,
            base.clone(),
        )?),
    })
}

/// Ancestral sampling of an `h × w × c` latent into `out`.
#[no_mangle]
pub unsafe extern "C" fn ps_sample(
    denoise: PsDenoiseFn,
    user: *mut c_void,
    mean: f64,
    variance: f64,
    schedule: *const PsSchedule,
    h: usize,
    w: usize,
    c: usize,
    label: i32,
    seed: u64,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or(Fail::Null("schedule"))?;
        let out = output(out, h * w * c, "out")?;
        let model = make_denoiser(denoise, user, mean, variance, (h, w, c), &s.base)?;
        let z = diffusion::sample(model.as_ref(), (h, w, c), label_arg(label)?, &s.steps, seed)?;
        out.copy_from_slice(&z.data);
        Ok(())
    })
}

/// Masked sampling: entries with `mask[i] != 0` are synthesized, the others
/// reproduce `known`. `jump`/`resample` control the resampling schedule.
#[no_mangle]
pub unsafe extern "C" fn ps_repaint(
    denoise: PsDenoiseFn,
    user: *mut c_void,
    mean: f64,
    variance: f64,
    schedule: *const PsSchedule,
    known: *const f64,
    mask: *const u8,
    h: usize,
    w: usize,
    c: usize,
    label: i32,
    jump: usize,
    resample: usize,
    seed: u64,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or(Fail::Null("schedule"))?;
        let n = h * w * c;
        let known = LatentGrid::from_data(h, w, c, input(known, n, "known")?.to_vec())?;
        let m = input(mask, n, "mask")?;
        if let Some(v) = m.iter().find(|v| **v > 1) {
            return Err(Fail::Lib(Error::Config(format!("mask value {v} is not binary"))));
        }
        let mask = LatentMask {
            h,
            w,
            c,
            data: m.iter().map(|v| *v == 1).collect(),
        };
        let out = output(out, n, "out")?;
        let model = make_denoiser(denoise, user, mean, variance, (h, w, c), &s.base)?;
        let params = RepaintParams { jump, resample };
        let z = diffusion::repaint(model.as_ref(), &known, &mask, label_arg(label)?, &s.steps, params, seed)?;
        out.copy_from_slice(&z.data);
        Ok(())
    })
}
