use std::ffi::{c_void, CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use primscene_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ps_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn layout_handles_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("a.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut layout: *mut PsLayout = ptr::null_mut();
        assert_eq!(ps_layout_synth(4, &mut layout), PsStatus::Ok);
        assert_eq!(ps_layout_save(layout, path.as_ptr()), PsStatus::Ok);
        let mut loaded: *mut PsLayout = ptr::null_mut();
        assert_eq!(ps_layout_load(path.as_ptr(), &mut loaded), PsStatus::Ok);
        let (mut a, mut b) = (0usize, 0usize);
        assert_eq!(ps_layout_primitive_count(layout, &mut a), PsStatus::Ok);
        assert_eq!(ps_layout_primitive_count(loaded, &mut b), PsStatus::Ok);
        assert_eq!(a, b);
        assert!(a > 0);
        let dims = [64usize, 64, 8];
        let (mut iou, mut miou) = (0.0, 0.0);
        assert_eq!(
            ps_voxel_iou(layout, loaded, dims.as_ptr(), 1.0, &mut iou, &mut miou),
            PsStatus::Ok
        );
        assert_eq!((iou, miou), (100.0, 100.0));
        ps_layout_free(layout);
        ps_layout_free(loaded);
        ps_layout_free(ptr::null_mut());
    }
}

#[test]
fn errors_set_status_and_message() {
    let missing = CString::new("/nonexistent/layout.json").unwrap();
    unsafe {
        let mut layout: *mut PsLayout = ptr::null_mut();
        assert_eq!(ps_layout_load(missing.as_ptr(), &mut layout), PsStatus::Io);
        assert!(layout.is_null());
        assert!(last_error().contains("nonexistent"));
        assert_eq!(ps_layout_load(ptr::null(), &mut layout), PsStatus::NullPointer);
        assert_eq!(last_error(), "path is null");
        let bad_scale = [1.0, -1.0, 1.0];
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut code = [0.0; 6];
        assert_eq!(
            ps_cholesky_encode(eye.as_ptr(), bad_scale.as_ptr(), code.as_mut_ptr()),
            PsStatus::Numeric
        );
    }
}

#[test]
fn cholesky_round_trip() {
    let c = 0.6f64;
    let s = 0.8f64;
    let rot = [c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0];
    let scale = [4.0, 2.0, 1.0];
    let mut code = [0.0; 6];
    let (mut r2, mut s2) = ([0.0; 9], [0.0; 3]);
    unsafe {
        assert_eq!(
            ps_cholesky_encode(rot.as_ptr(), scale.as_ptr(), code.as_mut_ptr()),
            PsStatus::Ok
        );
        assert_eq!(
            ps_cholesky_decode(code.as_ptr(), r2.as_mut_ptr(), s2.as_mut_ptr()),
            PsStatus::Ok
        );
    }
    for (a, b) in s2.iter().zip(scale) {
        assert!((a - b).abs() < 1e-9);
    }
    // Columns agree up to sign.
    for j in 0..3 {
        let dot: f64 = (0..3).map(|i| rot[3 * i + j] * r2[3 * i + j]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "column {j}: {dot}");
    }
}

#[test]
fn hungarian_iou_and_memory() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut perm = [0usize; 3];
    let mut total = 0.0;
    unsafe {
        assert_eq!(
            ps_hungarian(cost.as_ptr(), 3, perm.as_mut_ptr(), &mut total),
            PsStatus::Ok
        );
    }
    assert_eq!(perm, [1, 0, 2]);
    assert_eq!(total, 5.0);

    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let a = PsBox {
        center: [0.0; 3],
        rotation: eye,
        extents: [1.0; 3],
    };
    let b = PsBox {
        center: [0.5, 0.0, 0.0],
        rotation: eye,
        extents: [1.0; 3],
    };
    let mut iou = 0.0;
    unsafe {
        assert_eq!(ps_iou3d(&a, &b, &mut iou), PsStatus::Ok);
    }
    assert!((iou - 1.0 / 3.0).abs() < 1e-12);

    let dims = [256usize, 256, 32];
    let (mut bytes, mut mib) = (0u64, 0.0);
    unsafe {
        assert_eq!(ps_memory_voxel(dims.as_ptr(), &mut bytes, &mut mib), PsStatus::Ok);
    }
    assert_eq!((bytes, mib), (8 << 20, 8.0));
}

#[test]
fn generative_metrics() {
    let mean_a = [0.0, 0.0];
    let mean_b = [3.0, 4.0];
    let cov = [1.0, 0.2, 0.2, 2.0];
    let mut fd = -1.0;
    unsafe {
        assert_eq!(
            ps_frechet(2, mean_a.as_ptr(), cov.as_ptr(), mean_b.as_ptr(), cov.as_ptr(), &mut fd),
            PsStatus::Ok
        );
    }
    assert!((fd - 25.0).abs() < 1e-9);

    let feats: Vec<f32> = (0..20).map(|i| (i as f32 * 0.37).sin()).collect();
    let (mut p, mut r) = (0.0, 0.0);
    unsafe {
        assert_eq!(
            ps_precision_recall(feats.as_ptr(), 10, feats.as_ptr(), 10, 2, 3, &mut p, &mut r),
            PsStatus::Ok
        );
    }
    assert_eq!((p, r), (1.0, 1.0));
}

unsafe extern "C" fn zero_noise(
    _user: *mut c_void,
    _z: *const f64,
    h: usize,
    w: usize,
    c: usize,
    _t: usize,
    _label: i32,
    out: *mut f64,
) -> i32 {
    std::slice::from_raw_parts_mut(out, h * w * c).fill(0.0);
    0
}

unsafe extern "C" fn counting_failure(
    user: *mut c_void,
    _z: *const f64,
    _h: usize,
    _w: usize,
    _c: usize,
    _t: usize,
    _label: i32,
    _out: *mut f64,
) -> i32 {
    *(user as *mut usize) += 1;
    7
}

#[test]
fn diffusion_through_callbacks() {
    unsafe {
        let mut sched: *mut PsSchedule = ptr::null_mut();
        assert_eq!(ps_schedule_linear(1000, 0.0015, 0.015, &mut sched), PsStatus::Ok);
        let mut strided: *mut PsSchedule = ptr::null_mut();
        assert_eq!(ps_schedule_respaced(sched, 50, &mut strided), PsStatus::Ok);
        assert_eq!(ps_schedule_len(strided), 50);
        let (mut ab1, mut ab20) = (0.0, 0.0);
        assert_eq!(ps_schedule_alpha_bar(sched, 1, &mut ab1), PsStatus::Ok);
        assert_eq!(ps_schedule_alpha_bar(strided, 1, &mut ab20), PsStatus::Ok);
        assert!((ab1 - 0.9985).abs() < 1e-15);
        let mut ab_base20 = 0.0;
        ps_schedule_alpha_bar(sched, 20, &mut ab_base20);
        assert_eq!(ab20, ab_base20);

        // Zero predicted noise: each step scales by 1/√α_t and adds noise;
        // two runs with one seed agree.
        let (h, w, c) = (2, 3, 2);
        let mut a = vec![0.0; h * w * c];
        let mut b = vec![1.0; h * w * c];
        assert_eq!(
            ps_sample(
                Some(zero_noise),
                ptr::null_mut(),
                0.0,
                1.0,
                strided,
                h,
                w,
                c,
                -1,
                9,
                a.as_mut_ptr()
            ),
            PsStatus::Ok
        );
        assert_eq!(
            ps_sample(
                Some(zero_noise),
                ptr::null_mut(),
                0.0,
                1.0,
                strided,
                h,
                w,
                c,
                -1,
                9,
                b.as_mut_ptr()
            ),
            PsStatus::Ok
        );
        assert_eq!(a, b);

        // Masked sampling keeps known entries exactly.
        let known: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.25 - 1.0).collect();
        let mask: Vec<u8> = (0..h * w * c).map(|i| (i % 2) as u8).collect();
        let mut out = vec![0.0; h * w * c];
        assert_eq!(
            ps_repaint(
                None,
                ptr::null_mut(),
                0.5,
                2.0,
                strided,
                known.as_ptr(),
                mask.as_ptr(),
                h,
                w,
                c,
                1,
                5,
                3,
                11,
                out.as_mut_ptr()
            ),
            PsStatus::Ok
        );
        for i in (0..h * w * c).step_by(2) {
            assert_eq!(out[i], known[i]);
        }
        let bad_mask = vec![2u8; h * w * c];
        assert_eq!(
            ps_repaint(
                None,
                ptr::null_mut(),
                0.0,
                1.0,
                strided,
                known.as_ptr(),
                bad_mask.as_ptr(),
                h,
                w,
                c,
                -1,
                5,
                3,
                11,
                out.as_mut_ptr()
            ),
            PsStatus::InvalidArgument
        );

        let mut calls = 0usize;
        assert_eq!(
            ps_sample(
                Some(counting_failure),
                &mut calls as *mut usize as *mut c_void,
                0.0,
                1.0,
                strided,
                h,
                w,
                c,
                -1,
                9,
                a.as_mut_ptr()
            ),
            PsStatus::Callback
        );
        assert_eq!(calls, 1);
        assert!(last_error().contains("callback returned 7"));

        ps_schedule_free(strided);
        ps_schedule_free(sched);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/primscene.h")).unwrap();
    for name in [
        "ps_last_error",
        "ps_version",
        "ps_layout_load",
        "ps_layout_synth",
        "ps_layout_save",
        "ps_layout_primitive_count",
        "ps_layout_free",
        "ps_voxel_iou",
        "ps_cholesky_encode",
        "ps_cholesky_decode",
        "ps_hungarian",
        "ps_iou3d",
        "ps_memory_voxel",
        "ps_frechet",
        "ps_precision_recall",
        "ps_schedule_linear",
        "ps_schedule_respaced",
        "ps_schedule_len",
        "ps_schedule_alpha_bar",
        "ps_schedule_free",
        "ps_sample",
        "ps_repaint",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct PsLayout PsLayout;"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "primscene.h"

static int32_t zero(void *user, const double *z, size_t h, size_t w, size_t c,
                    size_t t, int32_t label, double *out) {
    (void)user; (void)z; (void)t; (void)label;
    memset(out, 0, sizeof(double) * h * w * c);
    return 0;
}

int main(void) {
    PsLayout *layout = NULL;
    size_t count = 0;
    if (ps_layout_synth(1, &layout) != PS_STATUS_OK) return 1;
    if (ps_layout_primitive_count(layout, &count) != PS_STATUS_OK || count == 0) return 2;
    ps_layout_free(layout);

    double cost[4] = {1.0, 0.0, 0.0, 1.0};
    size_t perm[2];
    double total = -1.0;
    if (ps_hungarian(cost, 2, perm, &total) != PS_STATUS_OK || perm[0] != 1 || total != 0.0) return 3;

    PsSchedule *s = NULL;
    if (ps_schedule_linear(20, 0.0015, 0.015, &s) != PS_STATUS_OK) return 4;
    double z[8];
    if (ps_sample(zero, NULL, 0.0, 1.0, s, 2, 2, 2, -1, 3, z) != PS_STATUS_OK) return 5;
    ps_schedule_free(s);

    if (ps_layout_load(NULL, &layout) != PS_STATUS_NULL_POINTER) return 6;
    printf("%s %zu\n", ps_last_error(), count);
    return 0;
}
"#;

/// Compiles and runs a C client against the static library when a C
/// compiler and the library artifact are available.
#[test]
fn c_client_links_against_static_library() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir: PathBuf = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libprimscene_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or {} missing", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let bin = dir.path().join("client");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C client exited with {:?}", out.status);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("path is null "));
}
