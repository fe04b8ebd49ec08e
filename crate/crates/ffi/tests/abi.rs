use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use hst_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        hst_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn new_model(seed: u64) -> *mut HstModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { hst_model_new_default(seed, &mut m) }, HstStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn classify_matches_the_library() {
    let m = new_model(3);
    let size = unsafe { hst_model_image_size(m) };
    let classes = unsafe { hst_model_num_classes(m) };
    assert_eq!((size, classes), (32, 10));
    let images: Vec<f32> = (0..2 * 3 * size * size).map(|i| (i % 17) as f32 / 17.0).collect();
    let mut logits = vec![0f32; 2 * classes];
    let st = unsafe { hst_model_classify(m, images.as_ptr(), 2, size, size, logits.as_mut_ptr(), logits.len()) };
    assert_eq!(st, HstStatus::Ok, "{}", last_error());

    let cfg = hst_core::RunConfig::default();
    let mut reference = hst_core::HstModel::<f32>::new(&cfg.model(), 3).unwrap();
    reference.apply_freeze_policy();
    let x = hst_core::Tensor::new(vec![2, 3, size, size], images).unwrap();
    let expect = reference.forward_classify(&x).unwrap();
    assert_eq!(expect.data(), &logits[..]);
    unsafe { hst_model_free(m) };
}

#[test]
fn pyramid_shapes_and_values() {
    let m = new_model(0);
    let images = vec![0.5f32; 3 * 64 * 64];
    let mut shape = [0usize; 4];
    for stage in 0..4 {
        let st = unsafe { hst_model_pyramid_shape(m, stage, 1, 32, 32, shape.as_mut_ptr()) };
        assert_eq!(st, HstStatus::Ok);
        assert_eq!(shape, [1, [16, 32, 64, 128][stage], 8 >> stage, 8 >> stage]);
        let mut out = vec![f32::NAN; shape.iter().product()];
        let st = unsafe { hst_model_pyramid(m, images.as_ptr(), 1, 32, 32, stage, out.as_mut_ptr(), out.len()) };
        assert_eq!(st, HstStatus::Ok, "{}", last_error());
        assert!(out.iter().all(|v| v.is_finite()));
    }
    let mut small = [0f32; 4];
    let st = unsafe { hst_model_pyramid(m, images.as_ptr(), 1, 32, 32, 0, small.as_mut_ptr(), small.len()) };
    assert_eq!(st, HstStatus::BufferTooSmall);
    assert_eq!(
        unsafe { hst_model_pyramid_shape(m, 4, 1, 32, 32, shape.as_mut_ptr()) },
        HstStatus::InvalidArgument
    );
    unsafe { hst_model_free(m) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { hst_model_new_default(0, ptr::null_mut()) },
        HstStatus::NullPointer
    );
    let bad = cstr("[hsn]\ndepht = 3\n");
    assert_eq!(unsafe { hst_model_from_toml(bad.as_ptr(), &mut m) }, HstStatus::Config);
    assert!(last_error().contains("hsn.depht"), "{}", last_error());
    assert!(m.is_null());

    let m = new_model(0);
    let images = vec![0f32; 3 * 16 * 16];
    let mut logits = [0f32; 10];
    let st = unsafe { hst_model_classify(m, images.as_ptr(), 1, 16, 16, logits.as_mut_ptr(), 10) };
    assert_eq!(st, HstStatus::Dimension);
    let st = unsafe { hst_model_classify(ptr::null(), images.as_ptr(), 1, 16, 16, logits.as_mut_ptr(), 10) };
    assert_eq!(st, HstStatus::NullPointer);
    unsafe { hst_model_free(m) };
    unsafe { hst_model_free(ptr::null_mut()) };
}

#[test]
fn save_load_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.toml");
    std::fs::write(&cfg_path, hst_core::RunConfig::default().to_toml()).unwrap();
    let ck_path = dir.path().join("m.hstc");
    let data_path = dir.path().join("d.hstd");

    let m = new_model(0);
    assert_eq!(
        unsafe { hst_model_save(m, cstr(ck_path.to_str().unwrap()).as_ptr()) },
        HstStatus::Ok
    );
    let mut loaded = ptr::null_mut();
    let st = unsafe {
        hst_model_load(
            cstr(cfg_path.to_str().unwrap()).as_ptr(),
            cstr(ck_path.to_str().unwrap()).as_ptr(),
            &mut loaded,
        )
    };
    assert_eq!(st, HstStatus::Ok, "{}", last_error());

    let mut data = ptr::null_mut();
    assert_eq!(
        unsafe { hst_dataset_generate(10, 3, 32, 4, 0.1, 7, &mut data) },
        HstStatus::Ok
    );
    assert_eq!(unsafe { hst_dataset_len(data) }, 30);
    assert_eq!(
        unsafe { hst_dataset_write(data, cstr(data_path.to_str().unwrap()).as_ptr()) },
        HstStatus::Ok
    );
    let mut reread = ptr::null_mut();
    assert_eq!(
        unsafe { hst_dataset_read(cstr(data_path.to_str().unwrap()).as_ptr(), &mut reread) },
        HstStatus::Ok
    );
    let mut label = 99;
    assert_eq!(unsafe { hst_dataset_label(reread, 13, &mut label) }, HstStatus::Ok);
    assert_eq!(label, 3);
    let mut img = vec![0f32; 3 * 32 * 32];
    assert_eq!(
        unsafe { hst_dataset_image(reread, 0, img.as_mut_ptr(), img.len()) },
        HstStatus::Ok
    );
    assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));

    let (mut a, mut b) = (-1.0, -2.0);
    assert_eq!(unsafe { hst_model_evaluate(m, data, &mut a) }, HstStatus::Ok);
    assert_eq!(unsafe { hst_model_evaluate(loaded, reread, &mut b) }, HstStatus::Ok);
    assert_eq!(a.to_bits(), b.to_bits());

    let (mut t, mut f) = (0u64, 0u64);
    assert_eq!(unsafe { hst_model_param_counts(loaded, &mut t, &mut f) }, HstStatus::Ok);
    assert!(t > 0 && f > 0);

    std::fs::write(&ck_path, b"HSTC-truncated").unwrap();
    let mut none = ptr::null_mut();
    let st = unsafe {
        hst_model_load(
            cstr(cfg_path.to_str().unwrap()).as_ptr(),
            cstr(ck_path.to_str().unwrap()).as_ptr(),
            &mut none,
        )
    };
    assert_eq!(st, HstStatus::Format);
    assert!(none.is_null());

    unsafe {
        hst_dataset_free(data);
        hst_dataset_free(reread);
        hst_model_free(m);
        hst_model_free(loaded);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(hst_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn generated_header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/hst.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "hst_model_new_default",
        "hst_model_classify",
        "hst_model_pyramid",
        "hst_dataset_read",
        "hst_last_error",
        "HST_STATUS_OK",
        "typedef struct HstModel HstModel",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    match Command::new(&cc)
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    {
        Ok(status) => assert!(status.success(), "{cc} rejected the generated header"),
        Err(_) => eprintln!("no C compiler found; skipped compiling the header"),
    }
}
