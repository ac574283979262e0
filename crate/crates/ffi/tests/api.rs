use std::ffi::{CStr, CString};
use std::ptr;

use dks_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dks_last_error()) }
        .to_str()
        .unwrap()
        .to_owned()
}

fn preset() -> *mut DksModel {
    let mut m = ptr::null_mut();
    let st = unsafe { dks_model_preset(c("cifar-mini").as_ptr(), 4, 8, 3, &mut m) };
    assert_eq!(st, DksStatus::Ok);
    m
}

fn input(n: usize, len: usize) -> Vec<f32> {
    (0..n * len).map(|i| ((i as f32) * 0.173).sin()).collect()
}

#[test]
fn preset_strip_forward_round_trip() {
    let m = preset();
    unsafe {
        assert_eq!(dks_model_num_heads(m), 3);
        assert_eq!(dks_model_num_classes(m), 4);
        let len = dks_model_sample_len(m);
        assert_eq!(len, 3 * 8 * 8);

        let mut s = ptr::null_mut();
        assert_eq!(dks_model_strip(m, &mut s), DksStatus::Ok);
        assert_eq!(dks_model_num_heads(s), 1);
        assert!(dks_model_trainable_count(s) < dks_model_trainable_count(m));

        let x = input(5, len);
        let mut a = vec![0f32; 20];
        let mut b = vec![0f32; 20];
        assert_eq!(
            dks_model_forward(m, x.as_ptr(), 5, 0, a.as_mut_ptr(), 20),
            DksStatus::Ok
        );
        assert_eq!(
            dks_model_forward(s, x.as_ptr(), 5, 0, b.as_mut_ptr(), 20),
            DksStatus::Ok
        );
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let p = c(dir.path().join("s.ckpt").to_str().unwrap());
        assert_eq!(dks_model_save(s, p.as_ptr()), DksStatus::Ok);
        let mut r = ptr::null_mut();
        assert_eq!(dks_model_load(p.as_ptr(), &mut r), DksStatus::Ok);
        let mut d = vec![0f32; 20];
        assert_eq!(
            dks_model_forward(r, x.as_ptr(), 5, 0, d.as_mut_ptr(), 20),
            DksStatus::Ok
        );
        assert_eq!(a, d);

        dks_model_free(r);
        dks_model_free(s);
        dks_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    unsafe {
        let st = dks_model_preset(c("resnet-9000").as_ptr(), 4, 8, 0, &mut m);
        assert_eq!(st, DksStatus::ConfigError);
        assert!(m.is_null());
        assert!(last_error().contains("resnet-9000"), "{}", last_error());

        assert_eq!(
            dks_model_preset(ptr::null(), 4, 8, 0, &mut m),
            DksStatus::InvalidArgument
        );

        let st = dks_model_load(c("/nonexistent/x.ckpt").as_ptr(), &mut m);
        assert_eq!(st, DksStatus::IoError);

        let p = preset();
        let x = input(2, dks_model_sample_len(p));
        let mut out = vec![0f32; 3];
        let st = dks_model_forward(p, x.as_ptr(), 2, 0, out.as_mut_ptr(), 3);
        assert_eq!(st, DksStatus::InvalidArgument);
        let st = dks_model_forward(p, x.as_ptr(), 2, 3, out.as_mut_ptr(), 8);
        assert_eq!(st, DksStatus::InvalidArgument);
        dks_model_free(p);
        dks_model_free(ptr::null_mut());
        assert_eq!(dks_model_num_heads(ptr::null()), 0);
    }
}

#[test]
fn corrupt_checkpoint_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, "{ not json").unwrap();
    std::fs::write(dir.path().join("bad.ckpt.bin"), [0u8; 4]).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { dks_model_load(c(path.to_str().unwrap()).as_ptr(), &mut m) };
    assert_eq!(st, DksStatus::IoError);
    assert!(last_error().contains("corrupt"));
}

#[test]
fn train_and_verify_entry_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"version": 1, "model": {"preset": "cifar-mini"},
            "data": {"synthetic": {"classes": 4, "per_class": 4, "test_per_class": 2, "image_size": 8}},
            "train": {"epochs": 1, "batch_size": 8}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    unsafe {
        let st = dks_train(
            c(cfg.to_str().unwrap()).as_ptr(),
            c(out.to_str().unwrap()).as_ptr(),
        );
        assert_eq!(st, DksStatus::Ok, "{}", last_error());
        assert!(out.join("final.ckpt").exists());
        assert!(out.join("config.resolved.json").exists());

        assert_eq!(
            dks_train(c(cfg.to_str().unwrap()).as_ptr(), ptr::null()),
            DksStatus::ConfigError
        );
        assert_eq!(
            dks_verify(c("everything").as_ptr(), 10, ptr::null()),
            DksStatus::ConfigError
        );
        let st = dks_verify(c("synergy").as_ptr(), 20_000, ptr::null());
        assert_eq!(st, DksStatus::VerificationFailed);
        assert!(last_error().contains("cubic-slope"), "{}", last_error());
    }
}
