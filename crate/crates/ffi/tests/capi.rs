use std::ffi::{CStr, CString};
use std::ptr;

use coda_core::config::RunConfig;
use coda_core::model::ModelConfig;
use coda_core::scenegen::DatasetConfig;
use coda_ffi::*;

fn tiny_json() -> CString {
    let mut c = RunConfig::default();
    c.dataset = DatasetConfig {
        size: 16,
        source: 4,
        m1: 4,
        m2: 2,
        target: 4,
        eval_per_scene: 1,
        ..DatasetConfig::default()
    };
    c.model = ModelConfig::for_image(16);
    CString::new(c.with_iters(6).to_json()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(coda_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn train_save_resume_predict() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(coda_config_from_json(tiny_json().as_ptr(), &mut cfg), CodaStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(coda_dataset_generate(cfg, &mut ds), CodaStatus::Ok);
        let (mut n_train, mut n_eval) = (0, 0);
        assert_eq!(coda_dataset_sizes(ds, &mut n_train, &mut n_eval), CodaStatus::Ok);
        assert_eq!((n_train, n_eval), (14, 4));

        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(coda_trainer_new(cfg, ds, &mut a), CodaStatus::Ok);
        assert_eq!(coda_trainer_new(cfg, ds, &mut b), CodaStatus::Ok);
        coda_dataset_free(ds);

        let mut s = CodaStepStats::default();
        for t in 0..3 {
            assert_eq!(coda_trainer_step(a, &mut s), CodaStatus::Ok);
            assert_eq!(s.iter, t);
            assert!(s.total.is_finite() && s.stage <= CodaStage::Mixed as u32);
            assert_eq!(coda_trainer_step(b, ptr::null_mut()), CodaStatus::Ok);
        }
        let dir = tempfile::tempdir().unwrap();
        let ck = CString::new(dir.path().join("mid.coda").to_str().unwrap()).unwrap();
        assert_eq!(coda_trainer_save(a, ck.as_ptr()), CodaStatus::Ok);

        let mut ds2 = ptr::null_mut();
        assert_eq!(coda_dataset_generate(cfg, &mut ds2), CodaStatus::Ok);
        let mut r = ptr::null_mut();
        assert_eq!(coda_trainer_resume(cfg, ds2, ck.as_ptr(), &mut r), CodaStatus::Ok);
        let mut done = false;
        while !done {
            let (mut x, mut y) = (CodaStepStats::default(), CodaStepStats::default());
            assert_eq!(coda_trainer_step(b, &mut x), CodaStatus::Ok);
            assert_eq!(coda_trainer_step(r, &mut y), CodaStatus::Ok);
            assert_eq!(x, y);
            assert_eq!(coda_trainer_done(r, &mut done), CodaStatus::Ok);
        }
        assert_eq!(coda_trainer_step(r, ptr::null_mut()), CodaStatus::Training);
        assert!(last_error().contains("complete"));

        let mut m = ptr::null_mut();
        assert_eq!(coda_trainer_model(r, &mut m), CodaStatus::Ok);
        let rgb = vec![0.5f32; 3 * 16 * 16];
        let mut labels = vec![9u8; 16 * 16];
        for savpt in [false, true] {
            assert_eq!(
                coda_model_predict(m, rgb.as_ptr(), 16, 16, savpt, labels.as_mut_ptr()),
                CodaStatus::Ok
            );
            assert!(labels.iter().all(|&l| l < 5));
        }
        assert_eq!(
            coda_model_predict(m, rgb.as_ptr(), 8, 8, true, labels.as_mut_ptr()),
            CodaStatus::InvalidArgument
        );
        let mut miou = -1.0;
        assert_eq!(coda_model_evaluate(m, ds2, true, &mut miou), CodaStatus::Ok);
        assert!((0.0..=1.0).contains(&miou));

        let mut from_disk = ptr::null_mut();
        assert_eq!(coda_model_load(ck.as_ptr(), &mut from_disk), CodaStatus::Ok);

        for h in [a, b, r] {
            coda_trainer_free(h);
        }
        coda_model_free(m);
        coda_model_free(from_disk);
        coda_dataset_free(ds2);
        coda_config_free(cfg);
    }
}

#[test]
fn errors_are_codes_not_crashes() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(coda_config_default(ptr::null_mut()), CodaStatus::NullPointer);
        let bad = CString::new("{\"seed\": \"x\"}").unwrap();
        assert_eq!(coda_config_from_json(bad.as_ptr(), &mut cfg), CodaStatus::Config);
        assert!(cfg.is_null());
        assert!(!last_error().is_empty());

        let missing = CString::new("/nonexistent/ck.coda").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(coda_model_load(missing.as_ptr(), &mut m), CodaStatus::Checkpoint);
        let mut ds = ptr::null_mut();
        assert_ne!(coda_dataset_load(missing.as_ptr(), &mut ds), CodaStatus::Ok);

        assert_eq!(coda_config_default(&mut cfg), CodaStatus::Ok);
        let mut short = [0 as std::ffi::c_char; 10];
        assert_eq!(
            coda_config_hash(cfg, short.as_mut_ptr(), short.len()),
            CodaStatus::InvalidArgument
        );
        let mut buf = [0 as std::ffi::c_char; 65];
        assert_eq!(coda_config_hash(cfg, buf.as_mut_ptr(), buf.len()), CodaStatus::Ok);
        assert_eq!(
            CStr::from_ptr(buf.as_ptr()).to_str().unwrap(),
            RunConfig::default().hash()
        );
        assert_eq!(coda_config_set_iters(cfg, 0), CodaStatus::InvalidArgument);
        coda_config_free(cfg);
        coda_config_free(ptr::null_mut());

        let mut high = false;
        let dark = vec![0.0f32; 3 * 4 * 4];
        assert_eq!(
            coda_severity_classify(dark.as_ptr(), 4, 4, 0.5, 0.38, &mut high),
            CodaStatus::Ok
        );
        assert!(high);
        assert_eq!(
            coda_severity_classify(dark.as_ptr(), 4, 4, 1.5, 0.38, &mut high),
            CodaStatus::InvalidArgument
        );
        let out_of_range = vec![2.0f32; 3 * 4 * 4];
        assert_eq!(
            coda_severity_classify(out_of_range.as_ptr(), 4, 4, 0.5, 0.38, &mut high),
            CodaStatus::InvalidArgument
        );
        assert!(!CStr::from_ptr(coda_version()).to_bytes().is_empty());
    }
}
