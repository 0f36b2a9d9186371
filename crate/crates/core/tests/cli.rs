use std::path::Path;
use std::process::{Command, Output};

use cinet::data::{load_dataset, load_mask, save_mask};
use cinet::labels::BinaryMask;

fn cinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinet")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_writes_loadable_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = cinet(&["synth", "--count", "3", "--size", "32", "--seed", "4", "--out", s(dir.path())]);
    assert!(o.status.success());
    let pairs = load_dataset(dir.path()).unwrap();
    let ids: Vec<_> = pairs.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["00000", "00001", "00002"]);
    assert!(pairs.iter().all(|p| p.height() == 32 && p.width() == 32 && p.mask.count() > 0));
}

#[test]
fn erode_writes_band_and_keep() {
    let dir = tempfile::tempdir().unwrap();
    let mask = dir.path().join("m.png");
    save_mask(&mask, &BinaryMask::from_fn(5, 5, |y, x| (1..4).contains(&y) && (1..4).contains(&x))).unwrap();
    let (band, keep) = (dir.path().join("band.png"), dir.path().join("keep.png"));
    let o = cinet(&["erode", "--mask", s(&mask), "--radius", "1", "--out-band", s(&band), "--out-keep", s(&keep)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "band = 20\nkeep = 5\n");
    let (b, k) = (load_mask(&band).unwrap(), load_mask(&keep).unwrap());
    assert_eq!((b.count(), k.count()), (20, 5));
    assert_eq!(b.not(), k);
    assert!(k.get(2, 2) && k.get(0, 0) && !k.get(1, 1));
}

#[test]
fn gradcheck_exits_zero() {
    let o = cinet(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("gaa"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.cin");
    let o = cinet(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path()), "--report", s(&dir.path().join("r.txt"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config.txt"));

    let o = cinet(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("o")), "--set", "lr"]);
    assert!(!o.status.success());
    let o = cinet(&["train", "--data", s(dir.path()), "--out", s(&dir.path().join("o")), "--attention", "bogus"]);
    assert!(!o.status.success());
    let o = cinet(&["gradcheck", "--seeds", "0"]);
    assert!(!o.status.success());
}

#[test]
fn train_then_predict_with_explicit_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(cinet(&["synth", "--count", "4", "--size", "40", "--out", s(&data)]).status.success());
    let conf = dir.path().join("tiny.txt");
    std::fs::write(&conf, "# small model\ninput_size = 32\nunified_channels = 8\nattention_reduction = 2\nepochs = 2\nbatch_size = 2\n").unwrap();
    let run = dir.path().join("run");
    let o = cinet(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&run), "--cascade-depth", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("epoch,total,final_bce,final_iou,side_bce_sum,side_iou_sum\n0,"));
    assert!(text.contains("mae = "));

    // Predictions come back at the image's own resolution.
    let ckpt = run.join("checkpoint.cin");
    let moved = dir.path().join("elsewhere.cin");
    std::fs::copy(&ckpt, &moved).unwrap();
    let out = dir.path().join("p.png");
    let img = data.join("images/00001.png");
    let o = cinet(&["predict", "--checkpoint", s(&moved), "--image", s(&img), "--out", s(&out)]);
    assert!(!o.status.success(), "no sidecar config next to the copy");
    let o = cinet(&[
        "predict", "--checkpoint", s(&moved), "--image", s(&img), "--out", s(&out),
        "--config", s(&run.join("config.txt")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = image::open(&out).unwrap();
    assert_eq!((map.width(), map.height()), (40, 40));
}
