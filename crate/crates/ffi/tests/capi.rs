use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mopflow_ffi::*;

fn last_error() -> String {
    let p = mopflow_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn texture(x: f64, y: f64) -> f64 {
    0.5 + 0.2 * (0.31 * x + 0.17 * y).sin() + 0.15 * (0.23 * y - 0.11 * x).cos() + 0.1 * (0.9 * x).sin() * (0.7 * y).cos()
}

unsafe fn gray(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> *mut MfImage {
    let data: Vec<f64> = (0..h * w).map(|i| f((i % w) as f64, (i / w) as f64)).collect();
    let mut img = ptr::null_mut();
    assert_eq!(mopflow_image_new(h, w, 1, data.as_ptr(), &mut img), MfStatus::Ok);
    img
}

unsafe fn flow_planes(flow: *const MfFlow) -> (usize, usize, Vec<f64>, Vec<f64>) {
    let (mut h, mut w) = (0, 0);
    assert_eq!(mopflow_flow_dims(flow, &mut h, &mut w), MfStatus::Ok);
    let (mut u, mut v) = (vec![0.0; h * w], vec![0.0; h * w]);
    assert_eq!(mopflow_flow_copy(flow, u.as_mut_ptr(), v.as_mut_ptr(), h * w), MfStatus::Ok);
    (h, w, u, v)
}

#[test]
fn solve_pyramid_recovers_shift() {
    unsafe {
        let a = gray(32, 32, texture);
        let b = gray(32, 32, |x, y| texture(x - 1.0, y));
        let mut scfg = mopflow_solver_config_default();
        scfg.levels = 1;
        let mut flow = ptr::null_mut();
        assert_eq!(mopflow_solve_pyramid(a, b, ptr::null(), &scfg, &mut flow), MfStatus::Ok);
        assert!(mopflow_last_error().is_null());
        let (h, w, u, v) = flow_planes(flow);
        let mut epe = 0.0;
        for y in 6..h - 6 {
            for x in 6..w - 6 {
                epe += (u[y * w + x] - 1.0).hypot(v[y * w + x]);
            }
        }
        assert!(epe / (((h - 12) * (w - 12)) as f64) < 0.5);
        mopflow_flow_free(flow);
        mopflow_image_free(a);
        mopflow_image_free(b);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut img = ptr::null_mut();
        let data = [0.0; 8];
        assert_eq!(mopflow_image_new(2, 2, 2, data.as_ptr(), &mut img), MfStatus::ShapeMismatch);
        assert!(img.is_null());
        assert!(last_error().contains("channel"));
        assert_eq!(mopflow_image_new(2, 2, 1, ptr::null(), &mut img), MfStatus::NullPointer);
        assert!(last_error().contains("data"));
        assert_eq!(mopflow_image_new(usize::MAX, 2, 1, data.as_ptr(), &mut img), MfStatus::InvalidArgument);

        let a = gray(8, 8, texture);
        let b = gray(8, 6, texture);
        let mut flow = ptr::null_mut();
        assert_eq!(mopflow_solve_pyramid(a, b, ptr::null(), ptr::null(), &mut flow), MfStatus::ShapeMismatch);
        let mut bad = mopflow_energy_config_default();
        bad.epsilon = -1.0;
        assert_eq!(mopflow_solve_pyramid(a, a, &bad, ptr::null(), &mut flow), MfStatus::InvalidArgument);
        assert!(flow.is_null());
        mopflow_image_free(a);
        mopflow_image_free(b);

        mopflow_image_free(ptr::null_mut());
        mopflow_flow_free(ptr::null_mut());
        mopflow_mask_free(ptr::null_mut());
        mopflow_segnet_free(ptr::null_mut());
    }
}

#[test]
fn flo_round_trip_and_bad_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("x.flo").to_str().unwrap()).unwrap();
    unsafe {
        let u: Vec<f64> = (0..12).map(|i| i as f64 * 0.25).collect();
        let v: Vec<f64> = (0..12).map(|i| -(i as f64)).collect();
        let mut flow = ptr::null_mut();
        assert_eq!(mopflow_flow_new(3, 4, u.as_ptr(), v.as_ptr(), &mut flow), MfStatus::Ok);
        assert_eq!(mopflow_flo_write(path.as_ptr(), flow), MfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(mopflow_flo_read(path.as_ptr(), &mut back), MfStatus::Ok);
        assert_eq!(flow_planes(back), (3, 4, u, v));
        let mut small = [0.0; 4];
        assert_eq!(mopflow_flow_copy(back, small.as_mut_ptr(), small.as_mut_ptr(), 4), MfStatus::ShapeMismatch);
        mopflow_flow_free(flow);
        mopflow_flow_free(back);

        std::fs::write(dir.path().join("x.flo"), [0u8; 20]).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(mopflow_flo_read(path.as_ptr(), &mut none), MfStatus::Format);
        assert!(last_error().contains("magic"));
        let missing = CString::new(dir.path().join("nope.flo").to_str().unwrap()).unwrap();
        assert_eq!(mopflow_flo_read(missing.as_ptr(), &mut none), MfStatus::Io);
        assert_eq!(mopflow_flo_read(ptr::null(), &mut none), MfStatus::NullPointer);
    }
}

#[test]
fn masks_iou_occlusion_and_segmentation() {
    unsafe {
        let sq = |left: usize| -> Vec<u8> {
            (0..100).map(|i| ((i % 10) >= left && (i % 10) < left + 3 && (2..5).contains(&(i / 10))) as u8).collect()
        };
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mopflow_mask_new(10, 10, sq(2).as_ptr(), &mut a), MfStatus::Ok);
        assert_eq!(mopflow_mask_new(10, 10, sq(3).as_ptr(), &mut b), MfStatus::Ok);
        let mut iou = 0.0;
        assert_eq!(mopflow_iou(a, b, &mut iou), MfStatus::Ok);
        assert_eq!(iou, 0.5);
        let mut bits = vec![9u8; 100];
        assert_eq!(mopflow_mask_copy(a, bits.as_mut_ptr(), 100), MfStatus::Ok);
        assert_eq!(bits, sq(2));
        mopflow_mask_free(a);
        mopflow_mask_free(b);

        let n = 36;
        let (mut fwd, mut zero) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(mopflow_flow_new(6, 6, [5.0; 36].as_ptr(), [0.0; 36].as_ptr(), &mut fwd), MfStatus::Ok);
        assert_eq!(mopflow_flow_new(6, 6, [0.0; 36].as_ptr(), [0.0; 36].as_ptr(), &mut zero), MfStatus::Ok);
        let mut occ = ptr::null_mut();
        assert_eq!(mopflow_occlusion_mask(fwd, zero, 0.01, 0.5, &mut occ), MfStatus::Ok);
        let (mut h, mut w, mut count) = (0, 0, 0);
        assert_eq!(mopflow_mask_dims(occ, &mut h, &mut w, &mut count), MfStatus::Ok);
        assert_eq!((h, w, count), (6, 6, n));
        mopflow_mask_free(occ);
        mopflow_flow_free(fwd);
        mopflow_flow_free(zero);

        let u: Vec<f64> = (0..32 * 32).map(|i| if (8..20).contains(&(i % 32)) && (8..20).contains(&(i / 32)) { 3.0 } else { 0.0 }).collect();
        let mut flow = ptr::null_mut();
        assert_eq!(mopflow_flow_new(32, 32, u.as_ptr(), vec![0.0; 32 * 32].as_ptr(), &mut flow), MfStatus::Ok);
        let mut mask = ptr::null_mut();
        let mut proposals = 0;
        assert_eq!(mopflow_segment_flow(flow, ptr::null(), &mut mask, &mut proposals), MfStatus::Ok);
        assert_eq!(mopflow_mask_dims(mask, &mut h, &mut w, &mut count), MfStatus::Ok);
        let rust_flow = mopflow::imaging::FlowField::new(32, 32, u.clone(), vec![0.0; 32 * 32]).unwrap();
        let (expected, props) = mopflow::mop::segment_flow(&rust_flow, &Default::default()).unwrap();
        assert_eq!((proposals, count), (props.len(), expected.count()));
        assert_eq!(proposals, 1);
        mopflow_mask_free(mask);
        let mut cfg = mopflow_mop_config_default();
        cfg.min_area = 0;
        assert_eq!(mopflow_segment_flow(flow, &cfg, &mut mask, ptr::null_mut()), MfStatus::InvalidArgument);
        mopflow_flow_free(flow);
    }
}

#[test]
fn segnet_checkpoint_predicts_flow_sized_mask() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    mopflow::segnet::NetParams::init(3).save(&ckpt).unwrap();
    let path = CString::new(ckpt.to_str().unwrap()).unwrap();
    unsafe {
        let mut net = ptr::null_mut();
        assert_eq!(mopflow_segnet_load(path.as_ptr(), &mut net), MfStatus::Ok);
        let mut flow = ptr::null_mut();
        let n = 13 * 21;
        assert_eq!(mopflow_flow_new(13, 21, vec![1.0; n].as_ptr(), vec![0.5; n].as_ptr(), &mut flow), MfStatus::Ok);
        let mut mask = ptr::null_mut();
        assert_eq!(mopflow_segnet_predict(net, flow, &mut mask), MfStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(mopflow_mask_dims(mask, &mut h, &mut w, &mut c), MfStatus::Ok);
        assert_eq!((h, w), (13, 21));
        mopflow_mask_free(mask);
        mopflow_flow_free(flow);
        mopflow_segnet_free(net);

        std::fs::write(&ckpt, b"garbage").unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(mopflow_segnet_load(path.as_ptr(), &mut none), MfStatus::Format);
    }
}

#[test]
fn version_and_defaults() {
    let v = unsafe { CStr::from_ptr(mopflow_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let s = mopflow_solver_config_default();
    assert_eq!((s.levels, s.steps_per_level), (4, 250));
    assert_eq!((s.occlusion_alpha1, s.occlusion_alpha2), (0.01, 0.5));
    assert!(mopflow_mop_config_default().threshold < 0.0);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libmopflow_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.is_file() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mopflow.h"

int main(void) {
    double u[4] = {1, 1, 1, 1}, v[4] = {0, 0, 0, 0};
    MfFlow *f = NULL, *b = NULL;
    MfMask *m = NULL;
    size_t h = 0, w = 0, n = 0;
    if (mopflow_flow_new(2, 2, u, v, &f) != MF_STATUS_OK) return 1;
    if (mopflow_flow_new(2, 2, v, v, &b) != MF_STATUS_OK) return 2;
    if (mopflow_occlusion_mask(f, b, 0.01, 0.5, &m) != MF_STATUS_OK) return 3;
    if (mopflow_mask_dims(m, &h, &w, &n) != MF_STATUS_OK) return 4;
    if (mopflow_flo_read("/nonexistent.flo", &b) == MF_STATUS_OK) return 5;
    printf("%zu %zu %zu %s\n", h, w, n, mopflow_last_error() ? "err" : "none");
    mopflow_mask_free(m);
    mopflow_flow_free(f);
    mopflow_flow_free(b);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "2 2 4 err\n");
}
