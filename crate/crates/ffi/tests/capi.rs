use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plada_core::attention::SelectMode;
use plada_core::data::{gen_fake, gen_real, images_to_tensor};
use plada_core::harness::checkpoint;
use plada_core::harness::eval::inference_plan;
use plada_core::model::{build_model, BackboneConfig};
use plada_core::jpeg;
use plada_ffi::*;

fn last_error() -> String {
    let p = plada_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &Path) -> CString {
    let model = build_model(&BackboneConfig::desk(), 3).unwrap();
    let path = dir.join("m.plada");
    checkpoint::save(&model, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn predict_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { plada_model_load(path.as_ptr(), &mut handle) }, PladaStatus::Ok);
    assert!(plada_last_error().is_null());

    let mut dim = 0;
    assert_eq!(unsafe { plada_model_feature_dim(handle, &mut dim) }, PladaStatus::Ok);
    assert_eq!(dim, BackboneConfig::desk().dim);

    let mut images = gen_real(40, 3);
    images.extend(gen_fake(43, 2, 0.5).unwrap());
    let rgb: Vec<u8> = images.iter().flat_map(|i| i.pixels().to_vec()).collect();
    let mut probs = vec![0.0; images.len()];
    let st = unsafe { plada_model_predict(handle, rgb.as_ptr(), images.len(), 64, 64, probs.as_mut_ptr()) };
    assert_eq!(st, PladaStatus::Ok);

    let model = checkpoint::load(Path::new(path.to_str().unwrap()), None).unwrap();
    let plan = inference_plan(&model, SelectMode::FullAverage, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let refs: Vec<_> = images.iter().collect();
    let (want, _) = model.infer(&images_to_tensor(&refs).unwrap(), &plan).unwrap();
    assert_eq!(probs, want);
    unsafe { plada_model_free(handle) };
}

#[test]
fn load_errors_carry_codes_and_messages() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/x.plada").unwrap();
    assert_eq!(unsafe { plada_model_load(missing.as_ptr(), &mut handle) }, PladaStatus::Io);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.plada");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { plada_model_load(junk.as_ptr(), &mut handle) }, PladaStatus::Checkpoint);

    assert_eq!(unsafe { plada_model_load(ptr::null(), &mut handle) }, PladaStatus::NullPointer);
    assert!(last_error().contains("path"));
    unsafe { plada_model_free(ptr::null_mut()) };
}

#[test]
fn predict_rejects_bad_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { plada_model_load(path.as_ptr(), &mut handle) }, PladaStatus::Ok);
    let rgb = vec![0u8; 32 * 32 * 3];
    let mut p = [0.0];
    let st = unsafe { plada_model_predict(handle, rgb.as_ptr(), 1, 32, 32, p.as_mut_ptr()) };
    assert_eq!(st, PladaStatus::InvalidArgument);
    let st = unsafe { plada_model_predict(ptr::null(), rgb.as_ptr(), 1, 32, 32, p.as_mut_ptr()) };
    assert_eq!(st, PladaStatus::NullPointer);
    unsafe { plada_model_free(handle) };
}

#[test]
fn jpeg_and_blockiness_match_the_library() {
    let img = &gen_real(7, 1)[0];
    let mut out = vec![0u8; img.pixels().len()];
    let st = unsafe { plada_jpeg_compress(img.pixels().as_ptr(), 64, 64, 30, out.as_mut_ptr()) };
    assert_eq!(st, PladaStatus::Ok);
    let want = jpeg::compress(img, 30).unwrap();
    assert_eq!(out, want.pixels());

    let mut b = 0.0;
    assert_eq!(unsafe { plada_blockiness(out.as_ptr(), 64, 64, &mut b) }, PladaStatus::Ok);
    assert_eq!(b, jpeg::blockiness(&want).unwrap());

    let st = unsafe { plada_jpeg_compress(img.pixels().as_ptr(), 64, 64, 0, out.as_mut_ptr()) };
    assert_eq!(st, PladaStatus::InvalidArgument);
    assert!(last_error().contains("quality"));
    let st = unsafe { plada_blockiness(img.pixels().as_ptr(), 60, 60, &mut b) };
    assert_eq!(st, PladaStatus::InvalidArgument);
}

#[test]
fn metrics_on_the_toy_curve() {
    let s = [0.9, 0.8, 0.7, 0.6];
    let y = [1u8, 0, 1, 1];
    let (mut acc, mut ap) = (0.0, 0.0);
    assert_eq!(unsafe { plada_metrics(s.as_ptr(), y.as_ptr(), 4, &mut acc, &mut ap) }, PladaStatus::Ok);
    assert!((acc - 0.75).abs() < 1e-12);
    assert!((ap - (1.0 + 2.0 / 3.0 + 0.75) / 3.0).abs() < 1e-12);
    let bad = [2u8, 0, 1, 1];
    assert_eq!(unsafe { plada_metrics(s.as_ptr(), bad.as_ptr(), 4, &mut acc, &mut ap) }, PladaStatus::InvalidArgument);
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/plada.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["plada_model_load", "plada_model_predict", "plada_last_error", "PLADA_STATUS_DIVERGENCE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, "#include \"plada.h\"\nint main(void) { return PLADA_STATUS_OK; }\n").unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-I").arg(header.parent().unwrap()).arg(&src).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler; skipped syntax check"),
    }
}
