use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use cinet::config::TrainConfig;
use cinet::model::Cinet;
use cinet::train::AnyModel;
use cinet_ffi::*;

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = cin_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_model(dir: &Path) -> (CString, CString) {
    let mut cfg = TrainConfig::default();
    cfg.set("input_size", "32").unwrap();
    cfg.set("unified_channels", "8").unwrap();
    cfg.set("attention_reduction", "2").unwrap();
    let model = AnyModel::F32(Cinet::new(cfg.model.clone()).unwrap());
    let ckpt = dir.join("m.cin");
    let conf = dir.join("m.txt");
    model.save(&ckpt).unwrap();
    std::fs::write(&conf, cfg.to_text()).unwrap();
    (c(&conf), c(&ckpt))
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (conf, ckpt) = tiny_model(dir.path());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cin_model_load(conf.as_ptr(), ckpt.as_ptr(), &mut m) }, CinStatus::Ok);
    assert!(!m.is_null());

    let mut size = 0usize;
    assert_eq!(unsafe { cin_model_input_size(m, &mut size) }, CinStatus::Ok);
    assert_eq!(size, 32);

    let (h, w) = (20usize, 24usize);
    let rgb: Vec<f32> = (0..3 * h * w).map(|i| (i % 17) as f32 / 16.0).collect();
    let mut out = vec![-1.0f32; h * w];
    assert_eq!(unsafe { cin_model_predict(m, rgb.as_ptr(), h, w, out.as_mut_ptr()) }, CinStatus::Ok);
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));

    let bad = vec![2.0f32; 3 * h * w];
    assert_eq!(
        unsafe { cin_model_predict(m, bad.as_ptr(), h, w, out.as_mut_ptr()) },
        CinStatus::InvalidArgument
    );
    assert!(last_error().contains("[0, 1]"));
    unsafe { cin_model_free(m) };
    unsafe { cin_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (conf, _) = tiny_model(dir.path());
    let missing = c(&dir.path().join("nope.cin"));
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cin_model_load(conf.as_ptr(), missing.as_ptr(), &mut m) }, CinStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nope.cin"));

    let junk = dir.path().join("junk.cin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = c(&junk);
    assert_eq!(unsafe { cin_model_load(conf.as_ptr(), junk.as_ptr(), &mut m) }, CinStatus::Checkpoint);

    let bad_conf = dir.path().join("bad.txt");
    std::fs::write(&bad_conf, "lr = -1\n").unwrap();
    let bad_conf = c(&bad_conf);
    assert_eq!(unsafe { cin_model_load(bad_conf.as_ptr(), junk.as_ptr(), &mut m) }, CinStatus::Config);

    assert_eq!(unsafe { cin_model_load(ptr::null(), junk.as_ptr(), &mut m) }, CinStatus::NullPointer);
    assert_eq!(unsafe { cin_model_load(conf.as_ptr(), junk.as_ptr(), ptr::null_mut()) }, CinStatus::NullPointer);
}

#[test]
fn edge_band_of_a_centred_square() {
    // 3x3 square inside 5x5, radius 1: the centre pixel is the only one kept
    // inside, the outer ring beyond distance 1 is kept outside.
    let mask: Vec<u8> = (0..25).map(|i| u8::from((1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)))).collect();
    let mut band = vec![9u8; 25];
    let (mut e, mut k) = (0usize, 0usize);
    let s = unsafe { cin_edge_band(mask.as_ptr(), 5, 5, 1, band.as_mut_ptr(), &mut e, &mut k) };
    assert_eq!(s, CinStatus::Ok);
    assert_eq!((e, k), (20, 5));
    assert_eq!(band.iter().map(|&b| b as usize).sum::<usize>(), 20);
    assert_eq!(band[12], 0);
    assert_eq!(
        unsafe { cin_edge_band(mask.as_ptr(), 0, 5, 1, band.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) },
        CinStatus::InvalidArgument
    );
}

#[test]
fn distortion_and_mae() {
    let board: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 2) as f64).collect();
    let mut d = -1.0;
    assert_eq!(unsafe { cin_roundtrip_distortion(board.as_ptr(), 1, 8, 8, 4, 4, &mut d) }, CinStatus::Ok);
    assert_eq!(d, 0.5);
    let flat = vec![0.3; 64];
    assert_eq!(unsafe { cin_roundtrip_distortion(flat.as_ptr(), 1, 8, 8, 3, 5, &mut d) }, CinStatus::Ok);
    assert_eq!(d, 0.0);

    let pred = [0.5, 0.25, 1.0, 0.0];
    let gt = [1u8, 0, 255, 0];
    let mut m = -1.0;
    assert_eq!(unsafe { cin_mae(pred.as_ptr(), gt.as_ptr(), 2, 2, &mut m) }, CinStatus::Ok);
    assert_eq!(m, 0.1875);
    let bad = [1.5, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { cin_mae(bad.as_ptr(), gt.as_ptr(), 2, 2, &mut m) }, CinStatus::InvalidArgument);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/cinet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "cin_last_error",
        "cin_model_load",
        "cin_model_free",
        "cin_model_input_size",
        "cin_model_predict",
        "cin_edge_band",
        "cin_roundtrip_distortion",
        "cin_mae",
        "CIN_STATUS_OK",
        "typedef struct CinModel CinModel",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    // Syntax-check with the system C compiler when one is available.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
