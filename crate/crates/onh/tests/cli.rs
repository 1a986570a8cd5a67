use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use onh::tables::read_manifest;
use onh::volume::{encode_volume, read_volume, write_volume};
use onh_core::geometry::LabelVolume;

fn onh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onh"))
        .args(args)
        .output()
        .expect("failed to launch onh")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, frac: &str, extra: &[&str]) -> Output {
    let mut args = vec!["synth", "--out", p(dir), "--n", n, "--glaucoma-frac", frac, "--profile", "combined"];
    args.extend_from_slice(extra);
    onh(&args)
}

const TINY: &str = "\
s_points = 64
mlp1_widths = 8,8
mlp2_widths = 8,16,32
head_widths = 16,8
max_epochs = 3
batch_size = 4
seed = 9
";

#[test]
fn synth_writes_requested_labels_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = synth(d, "10", "0.5", &["--seed", "4"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m = read_manifest(&a.join("manifest.csv")).unwrap();
    assert_eq!(m.len(), 10);
    assert_eq!(m.labels().iter().filter(|&&l| l == 1).count(), 5);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "10", "1.5", &[])), 2);
    assert_eq!(code(&synth(tmp.path(), "10", "-0.1", &[])), 2);
    assert_eq!(code(&onh(&["synth", "--out", p(tmp.path()), "--n", "4", "--glaucoma-frac", "0.5", "--profile", "vascular"])), 2);
    let o = onh(&["cv", "--manifest", "m.csv", "--k", "1"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&onh(&["frobnicate"])), 2);
    assert!(!tmp.path().join("manifest.csv").exists());
}

#[test]
fn extract_writes_full_or_subsampled_clouds() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(tmp.path(), "1", "0", &["--seed", "2"])), 0);
    let vol = tmp.path().join("S0001_1.onhv");
    let full = tmp.path().join("full.csv");
    let o = onh(&["extract", "--in", p(&vol), "--out", p(&full)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&full).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x_um,y_um,z_um,class"));
    assert!(lines.count() > 1000);

    let sub = tmp.path().join("sub.csv");
    let o = onh(&["extract", "--in", p(&vol), "--out", p(&sub), "--points", "1000", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&sub).unwrap();
    assert_eq!(text.lines().count(), 1001);
    for row in text.lines().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 4);
        let class: u8 = fields[3].parse().unwrap();
        assert!((1..=8).contains(&class));
    }
}

#[test]
fn extract_of_background_volume_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("empty.onhv");
    write_volume(&vol, &LabelVolume::new([6, 6, 6], [10.0; 3], vec![0; 216], None).unwrap()).unwrap();
    let out = tmp.path().join("empty.csv");
    let o = onh(&["extract", "--in", p(&vol), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(fs::read_to_string(&out).unwrap().trim_end(), "x_um,y_um,z_um,class");
}

#[test]
fn corrupt_volumes_exit_1_with_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = LabelVolume::new([4, 4, 4], [10.0; 3], vec![1; 64], None).unwrap();
    let bytes = encode_volume(&vol);
    let short = tmp.path().join("short.onhv");
    fs::write(&short, &bytes[..bytes.len() - 5]).unwrap();
    let o = onh(&["extract", "--in", p(&short), "--out", p(&tmp.path().join("x.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte"));

    let bad = tmp.path().join("bad.onhv");
    let mut b = bytes.clone();
    b[0] = b'X';
    fs::write(&bad, &b).unwrap();
    let o = onh(&["extract", "--in", p(&bad), "--out", p(&tmp.path().join("y.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at byte 0"));

    let o = onh(&["extract", "--in", p(&tmp.path().join("missing.onhv")), "--out", p(&tmp.path().join("z.csv"))]);
    assert_eq!(code(&o), 1);
    assert!(read_volume(&short).is_err());
}

#[test]
fn train_eval_and_baseline_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "24", "0.5", &["--seed", "6"])), 0);
    let manifest = data.join("manifest.csv");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, TINY).unwrap();

    let mut histories = Vec::new();
    for run in ["r1", "r2"] {
        let dir = tmp.path().join(run);
        fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("model.onhm");
        let o = onh(&["train", "--manifest", p(&manifest), "--config", p(&cfg), "--out", p(&ckpt)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("final val AUC"));
        histories.push(fs::read(dir.join("history.csv")).unwrap());
        assert!(dir.join("test_manifest.csv").exists());
    }
    assert_eq!(histories[0], histories[1]);
    let text = String::from_utf8(histories[0].clone()).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,train_loss,val_auc"));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(
        fs::read(tmp.path().join("r1/model.onhm")).unwrap(),
        fs::read(tmp.path().join("r2/model.onhm")).unwrap()
    );

    let ckpt = tmp.path().join("r1/model.onhm");
    let test = tmp.path().join("r1/test_manifest.csv");
    let roc = tmp.path().join("r1/roc.csv");
    let eval = |roc: &Path| onh(&["eval", "--manifest", p(&test), "--ckpt", p(&ckpt), "--roc", p(roc)]);
    let (a, b) = (eval(&roc), eval(&roc));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(stdout(&a).contains("held-out AUC"));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(fs::read_to_string(&roc).unwrap().starts_with("threshold,fpr,tpr"));
    let test_rows = read_manifest(&test).unwrap();
    assert!(!test_rows.is_empty() && test_rows.len() < 24);

    let o = onh(&["baseline", "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("baseline AUC"));
    assert!(data.join("baseline_roc.csv").exists());
}

#[test]
fn cv_writes_fold_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "30", "0.5", &["--seed", "8"])), 0);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, TINY.replace("max_epochs = 3", "max_epochs = 1")).unwrap();
    let out = tmp.path().join("cv");
    let o = onh(&[
        "cv", "--manifest", p(&data.join("manifest.csv")), "--config", p(&cfg), "--k", "3", "--out-dir", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("over 3 folds"));
    for f in 0..3 {
        assert!(out.join(format!("fold{f}_history.csv")).exists());
        assert!(out.join(format!("fold{f}_roc.csv")).exists());
    }
    let folds = fs::read_to_string(out.join("folds.csv")).unwrap();
    assert_eq!(folds.lines().count(), 1 + 3 + 2);
}

#[test]
fn data_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&synth(&data, "1", "0", &["--second-scan-prob", "1"])), 0);
    let o = onh(&["train", "--manifest", p(&data.join("manifest.csv")), "--out", p(&tmp.path().join("m.onhm"))]);
    assert_eq!(code(&o), 1);

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rat = 0.1\n").unwrap();
    let o = onh(&["cv", "--manifest", p(&data.join("manifest.csv")), "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let junk = tmp.path().join("junk.onhm");
    fs::write(&junk, b"ONHM\x02\0\0\0").unwrap();
    let o = onh(&["eval", "--manifest", p(&data.join("manifest.csv")), "--ckpt", p(&junk)]);
    assert_eq!(code(&o), 1);
}
