use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use volseg_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vs_last_error()) }.to_string_lossy().into_owned()
}

fn cube(n: usize, lo: usize, hi: usize) -> Vec<f32> {
    let mut v = vec![0.0; n * n * n];
    for z in lo..hi {
        for y in lo..hi {
            for x in lo..hi {
                v[x + n * (y + n * z)] = 1.0;
            }
        }
    }
    v
}

fn new_volume(n: usize, data: &[f32]) -> *mut VsVolume {
    let mut out = ptr::null_mut();
    let s = unsafe { vs_volume_new(n, n, n, 1.0, 1.0, 1.0, data.as_ptr(), data.len(), &mut out) };
    assert_eq!(s, VsStatus::Ok, "{}", last_error());
    out
}

#[test]
fn loss_matches_core() {
    let pred = [0.2, 0.7, 0.9, 0.1];
    let truth = [0.0, 1.0, 1.0, 0.0];
    let mut value = 0.0;
    let mut grad = [0.0; 4];
    let s = unsafe { vs_loss(VsLoss::Dsc, pred.as_ptr(), truth.as_ptr(), 4, &mut value, grad.as_mut_ptr()) };
    assert_eq!(s, VsStatus::Ok);
    let core = volseg::losses::dsc(&pred, &truth).unwrap();
    assert_eq!(value, core.value);
    assert_eq!(grad.to_vec(), core.grad);
    let s = unsafe { vs_loss(VsLoss::Jaccard, pred.as_ptr(), truth.as_ptr(), 4, &mut value, ptr::null_mut()) };
    assert_eq!(s, VsStatus::Ok);
}

#[test]
fn null_arguments_are_reported() {
    let mut value = 0.0;
    let s = unsafe { vs_loss(VsLoss::Dsc, ptr::null(), ptr::null(), 3, &mut value, ptr::null_mut()) };
    assert_eq!(s, VsStatus::NullPointer);
    assert!(last_error().contains("pred"));
    let s = unsafe { vs_metrics(ptr::null(), ptr::null(), ptr::null_mut()) };
    assert_eq!(s, VsStatus::NullPointer);
    unsafe { vs_volume_free(ptr::null_mut()) };
}

#[test]
fn metrics_on_shifted_cubes() {
    let a = new_volume(12, &cube(12, 2, 8));
    let b = new_volume(12, &cube(12, 3, 9));
    let mut m = VsMetrics {
        dsc: 0.0,
        arvd_pct: 0.0,
        abd_mm: 0.0,
        hd95_mm: 0.0,
    };
    assert_eq!(unsafe { vs_metrics(a, b, &mut m) }, VsStatus::Ok);
    assert!((m.dsc - 125.0 / 216.0).abs() < 1e-12);
    assert_eq!(m.arvd_pct, 0.0);
    assert!(m.hd95_mm > 0.0);

    let empty = new_volume(12, &vec![0.0; 12 * 12 * 12]);
    assert_eq!(unsafe { vs_metrics(empty, b, &mut m) }, VsStatus::Ok);
    assert_eq!(m.dsc, 0.0);
    assert!(m.hd95_mm.is_nan());

    let small = new_volume(4, &[0.0; 64]);
    assert_eq!(unsafe { vs_metrics(a, small, &mut m) }, VsStatus::DimsMismatch);
    unsafe {
        vs_volume_free(a);
        vs_volume_free(b);
        vs_volume_free(empty);
        vs_volume_free(small);
    }
}

#[test]
fn volume_round_trips_through_vvf() {
    let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.5).collect();
    let mut v = ptr::null_mut();
    let s = unsafe { vs_volume_new(5, 4, 3, 0.5, 1.0, 2.0, data.as_ptr(), 60, &mut v) };
    assert_eq!(s, VsStatus::Ok);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("v.vvf").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vs_volume_write_vvf(v, VsDtype::F32, path.as_ptr()) }, VsStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { vs_volume_read(path.as_ptr(), &mut back) }, VsStatus::Ok);
    let (mut dims, mut spacing) = ([0usize; 3], [0f64; 3]);
    assert_eq!(
        unsafe { vs_volume_shape(back, dims.as_mut_ptr(), spacing.as_mut_ptr()) },
        VsStatus::Ok
    );
    assert_eq!(dims, [5, 4, 3]);
    assert_eq!(spacing, [0.5, 1.0, 2.0]);
    let mut out = vec![0f32; 60];
    assert_eq!(unsafe { vs_volume_copy_data(back, out.as_mut_ptr(), 60) }, VsStatus::Ok);
    assert_eq!(out, data);
    assert_eq!(unsafe { vs_volume_copy_data(back, out.as_mut_ptr(), 59) }, VsStatus::InvalidArgument);

    let missing = CString::new(dir.path().join("nope.vvf").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { vs_volume_read(missing.as_ptr(), &mut none) }, VsStatus::Io);
    assert!(none.is_null());
    unsafe {
        vs_volume_free(v);
        vs_volume_free(back);
    }
}

#[test]
fn bad_volume_arguments() {
    let mut v = ptr::null_mut();
    let data = [1.0f32; 8];
    let s = unsafe { vs_volume_new(2, 2, 2, 0.0, 1.0, 1.0, data.as_ptr(), 8, &mut v) };
    assert_eq!(s, VsStatus::InvalidArgument);
    let s = unsafe { vs_volume_new(2, 2, 3, 1.0, 1.0, 1.0, data.as_ptr(), 8, &mut v) };
    assert_eq!(s, VsStatus::InvalidArgument);
    assert!(last_error().contains("does not match"));
    assert!(v.is_null());
}

#[test]
fn divergences() {
    let p = [0.5, 0.5, 0.0];
    let q = [0.25, 0.25, 0.5];
    let mut kl = 0.0;
    let mut tv = 0.0;
    unsafe {
        assert_eq!(vs_kl_divergence(p.as_ptr(), q.as_ptr(), 3, &mut kl), VsStatus::Ok);
        assert_eq!(vs_tv_distance(p.as_ptr(), q.as_ptr(), 3, &mut tv), VsStatus::Ok);
    }
    assert!((kl - 2f64.ln()).abs() < 1e-12);
    assert_eq!(tv, 0.5);
    unsafe {
        assert_eq!(vs_kl_divergence(q.as_ptr(), p.as_ptr(), 3, &mut kl), VsStatus::Ok);
    }
    assert!(kl.is_infinite());
    let bad = [-0.1, 1.1, 0.0];
    let s = unsafe { vs_tv_distance(bad.as_ptr(), q.as_ptr(), 3, &mut tv) };
    assert_eq!(s, VsStatus::InvalidArgument);
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(vs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"volseg.h\"\n\
         int main(void) {\n\
           VsStatus (*f)(const VsVolume *, size_t *, double *) = vs_volume_shape;\n\
           VsMetrics m = {0};\n\
           (void)f;\n\
           return (int)m.dsc + VS_STATUS_OK;\n\
         }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&header)
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
