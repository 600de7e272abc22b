use std::ffi::{CStr, CString};
use std::ptr;

use corrlab::synthetic::{generate_dataset, SynthSpec};
use corrlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(corrlab_last_error()) }.to_string_lossy().into_owned()
}

fn texture(w: usize, h: usize) -> Vec<f32> {
    (0..w * h)
        .flat_map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            [0.5 + 0.4 * (x * 0.3).sin(), 0.5 + 0.4 * (y * 0.2).cos(), 0.5 + 0.4 * ((x + y) * 0.15).sin()]
        })
        .collect()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(corrlab_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn pck_matches_hand_count() {
    let pred = [0.0, 0.0, 3.0, 4.0, 10.0, 0.0];
    let gt = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut out = -1.0;
    let s = unsafe { corrlab_pck(pred.as_ptr(), gt.as_ptr(), 3, 0.05, 100.0, 50.0, &mut out) };
    assert_eq!(s, CorrlabStatus::Ok);
    assert!((out - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = 0.0;
    let s = unsafe { corrlab_pck(ptr::null(), ptr::null(), 1, 0.1, 10.0, 10.0, &mut out) };
    assert_eq!(s, CorrlabStatus::NullPointer);
    assert!(last_error().contains("pred_xy"));

    let p = [0.0, 0.0];
    let s = unsafe { corrlab_pck(p.as_ptr(), p.as_ptr(), 1, 0.0, 10.0, 10.0, &mut out) };
    assert_ne!(s, CorrlabStatus::Ok);
    assert!(!last_error().is_empty());

    let img = texture(8, 8);
    let mut dst = vec![0.0f32; img.len()];
    let kind = CString::new("motion_blur").unwrap();
    let s = unsafe { corrlab_corrupt(img.as_ptr(), 8, 8, kind.as_ptr(), 3, 0, dst.as_mut_ptr()) };
    assert_eq!(s, CorrlabStatus::InvalidArgument);

    let missing = CString::new("/nonexistent/manifest.json").unwrap();
    let mut ds = ptr::null_mut();
    let s = unsafe { corrlab_dataset_load(missing.as_ptr(), &mut ds) };
    assert_eq!(s, CorrlabStatus::Io);
    assert!(ds.is_null());
}

#[test]
fn corrupt_is_deterministic_and_in_range() {
    let img = texture(32, 24);
    let kind = CString::new("gaussian_noise").unwrap();
    let run = || {
        let mut dst = vec![0.0f32; img.len()];
        let s = unsafe { corrlab_corrupt(img.as_ptr(), 32, 24, kind.as_ptr(), 4, 7, dst.as_mut_ptr()) };
        assert_eq!(s, CorrlabStatus::Ok);
        dst
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(a, img);
}

#[test]
fn params_round_trip_and_evaluate_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_classes: 2,
        images_per_class: 3,
        val_per_class: 1,
        test_per_class: 2,
        width: 40,
        height: 40,
        object_half_size: 14.0,
        ..SynthSpec::default()
    };
    generate_dataset(&spec).unwrap().dataset.save(tmp.path(), "manifest.json").unwrap();
    let manifest = CString::new(tmp.path().join("manifest.json").to_str().unwrap()).unwrap();
    let params_path = CString::new(tmp.path().join("p.bin").to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(corrlab_dataset_load(manifest.as_ptr(), &mut ds), CorrlabStatus::Ok, "{}", last_error());
        let (mut n_img, mut n_pairs) = (0, 0);
        assert_eq!(corrlab_dataset_counts(ds, &mut n_img, &mut n_pairs), CorrlabStatus::Ok);
        assert_eq!(n_img, 12);
        assert!(n_pairs > 0);

        let mut p = ptr::null_mut();
        assert_eq!(corrlab_params_initial(3, &mut p), CorrlabStatus::Ok);
        assert_eq!(corrlab_params_save(p, params_path.as_ptr()), CorrlabStatus::Ok);
        let mut q = ptr::null_mut();
        assert_eq!(corrlab_params_load(params_path.as_ptr(), &mut q), CorrlabStatus::Ok);

        let (mut a, mut b) = (-1.0, -1.0);
        assert_eq!(corrlab_evaluate(p, ds, 2, 0.1, &mut a), CorrlabStatus::Ok, "{}", last_error());
        assert_eq!(corrlab_evaluate(q, ds, 2, 0.1, &mut b), CorrlabStatus::Ok);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, b);
        assert_eq!(corrlab_evaluate(p, ds, 7, 0.1, &mut a), CorrlabStatus::InvalidArgument);

        let src = texture(40, 40);
        let tgt = texture(40, 40);
        let pts = [10.0, 12.0, 25.5, 30.0];
        let mut out = [0.0; 4];
        let s = corrlab_match_keypoints(q, src.as_ptr(), 40, 40, tgt.as_ptr(), 40, 40, pts.as_ptr(), 2, out.as_mut_ptr());
        assert_eq!(s, CorrlabStatus::Ok, "{}", last_error());
        assert!(out.iter().all(|v| v.is_finite() && (0.0..40.0).contains(v)));

        corrlab_params_free(p);
        corrlab_params_free(q);
        corrlab_dataset_free(ds);
    }
}
