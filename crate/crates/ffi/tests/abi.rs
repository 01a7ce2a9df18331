//! Exercises the C ABI end to end: synth -> save/load -> train -> predict
//! -> eval -> expert usage -> checkpoint round trip, plus error paths.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::ptr;

use graphdive_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(ptr: *mut c_char) -> String {
    assert!(!ptr.is_null());
    let s = CStr::from_ptr(ptr).to_str().unwrap().to_string();
    gdive_string_free(ptr);
    s
}

const SPEC: &str = "n=120\npositive_ratio=0.25\nnode_min=6\nnode_max=10\nnoise_sigma=0.2\ndiversity=0.0\nseed=3\n";
const CONFIG: &str = "variant=pri\nexperts=2\nhidden=8\nlayers=2\nepochs=3\nbatch_size=32\nlr=0.01\nseed=0\n";

#[test]
fn full_lifecycle_through_the_c_abi() {
    unsafe {
        let mut ds: *mut GdiveDataset = ptr::null_mut();
        let spec = c(SPEC);
        assert_eq!(gdive_dataset_synth(spec.as_ptr(), &mut ds), GdiveStatus::Ok);
        assert_eq!(gdive_dataset_len(ds), 120);
        assert_eq!(gdive_dataset_num_tasks(ds), 1);

        // Dataset round trip through a file.
        let dir = tempfile::tempdir().unwrap();
        let ds_path = c(dir.path().join("ds.jsonl").to_str().unwrap());
        assert_eq!(gdive_dataset_save(ds, ds_path.as_ptr()), GdiveStatus::Ok);
        let mut ds2: *mut GdiveDataset = ptr::null_mut();
        assert_eq!(gdive_dataset_load(ds_path.as_ptr(), &mut ds2), GdiveStatus::Ok);
        assert_eq!(gdive_dataset_len(ds2), 120);

        // Train.
        let cfg = c(CONFIG);
        let mut model: *mut GdiveModel = ptr::null_mut();
        assert_eq!(gdive_train(ds, cfg.as_ptr(), &mut model), GdiveStatus::Ok);

        // Predict.
        let mut prob = -1.0f64;
        assert_eq!(
            gdive_model_predict(model, ds, 0, 0, &mut prob),
            GdiveStatus::Ok
        );
        assert!((0.0..=1.0).contains(&prob), "prob = {prob}");

        // Evaluate.
        let split = c("test");
        let mut report: *mut c_char = ptr::null_mut();
        assert_eq!(
            gdive_model_eval(model, ds, split.as_ptr(), &mut report),
            GdiveStatus::Ok
        );
        let report = take_string(report);
        assert!(report.starts_with("task\t"), "{report}");
        assert!(report.contains("aggregate"));

        // Expert usage.
        let mut usage: *mut c_char = ptr::null_mut();
        assert_eq!(
            gdive_model_expert_usage(model, ds, split.as_ptr(), 0, &mut usage),
            GdiveStatus::Ok
        );
        let usage = take_string(usage);
        assert!(usage.contains("mean_gate_weight"), "{usage}");

        // Checkpoint round trip.
        let ckpt_path = c(dir.path().join("m.ckpt").to_str().unwrap());
        assert_eq!(gdive_model_save(model, ckpt_path.as_ptr()), GdiveStatus::Ok);
        let mut model2: *mut GdiveModel = ptr::null_mut();
        assert_eq!(
            gdive_model_load(ckpt_path.as_ptr(), &mut model2),
            GdiveStatus::Ok
        );
        let mut prob2 = -1.0f64;
        assert_eq!(
            gdive_model_predict(model2, ds, 0, 0, &mut prob2),
            GdiveStatus::Ok
        );
        assert_eq!(prob.to_bits(), prob2.to_bits());

        gdive_model_free(model);
        gdive_model_free(model2);
        gdive_dataset_free(ds);
        gdive_dataset_free(ds2);
    }
}

#[test]
fn error_paths_set_messages() {
    unsafe {
        // Null out-pointer.
        assert_eq!(
            gdive_dataset_load(c("/nonexistent").as_ptr(), ptr::null_mut()),
            GdiveStatus::NullArgument
        );

        // Missing file.
        let mut ds: *mut GdiveDataset = ptr::null_mut();
        let status = gdive_dataset_load(c("/nonexistent/file.jsonl").as_ptr(), &mut ds);
        assert_eq!(status, GdiveStatus::IoFailure);
        let msg = CStr::from_ptr(gdive_last_error()).to_str().unwrap();
        assert!(!msg.is_empty());

        // Bad spec.
        let status = gdive_dataset_synth(c("positive_ratio=2.0\n").as_ptr(), &mut ds);
        assert_eq!(status, GdiveStatus::InvalidArgument);

        // Bad config on a real dataset.
        let spec = c(SPEC);
        assert_eq!(gdive_dataset_synth(spec.as_ptr(), &mut ds), GdiveStatus::Ok);
        let mut model: *mut GdiveModel = ptr::null_mut();
        let status = gdive_train(ds, c("epochs=0\n").as_ptr(), &mut model);
        assert_eq!(status, GdiveStatus::TrainFailure);

        // Out-of-range prediction index.
        let cfg = c(CONFIG);
        assert_eq!(gdive_train(ds, cfg.as_ptr(), &mut model), GdiveStatus::Ok);
        let mut prob = 0.0f64;
        assert_eq!(
            gdive_model_predict(model, ds, 10_000, 0, &mut prob),
            GdiveStatus::InvalidArgument
        );

        // Unknown split string.
        let mut report: *mut c_char = ptr::null_mut();
        assert_eq!(
            gdive_model_eval(model, ds, c("holdout").as_ptr(), &mut report),
            GdiveStatus::InvalidArgument
        );

        gdive_model_free(model);
        gdive_dataset_free(ds);
    }
}

#[test]
fn gradcheck_through_the_abi() {
    unsafe {
        let mut worst = f64::NAN;
        assert_eq!(gdive_gradcheck(1, &mut worst), GdiveStatus::Ok);
        assert!(worst.is_finite() && worst < 1e-4, "worst = {worst}");
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let manifest = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/graphdive.h");
    assert!(header.exists(), "header not generated at {header:?}");
    let dir = tempfile::tempdir().unwrap();
    let main_c = dir.path().join("smoke.c");
    std::fs::write(
        &main_c,
        "#include \"graphdive.h\"\nint main(void) { return GDIVE_STATUS_OK; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&main_c)
        .output()
        .expect("cc is available");
    assert!(
        out.status.success(),
        "header failed to compile:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
