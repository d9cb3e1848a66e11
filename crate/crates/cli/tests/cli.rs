use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aisformer::data::{load_annotations, Image};

const SMALL: &[&str] = &[
    "--embed-dim", "8", "--roi-size", "3", "--heads", "2", "--ffn-dim", "16",
    "--synth-images", "2", "--synth-size", "32", "--synth-seed", "3",
];

fn aisf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aisf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn train(dir: &Path, name: &str, iterations: &str, extra: &[&str]) -> Output {
    let out = dir.join(name);
    let mut args = vec!["train", "--out", p(&out), "--iterations", iterations, "--checkpoint-interval", "3"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    aisf(&args)
}

#[test]
fn help_and_unknown_flags() {
    assert_eq!(code(&aisf(&["--help"])), 0);
    for sub in ["synth", "train", "eval", "viz-attention", "ablate"] {
        let o = aisf(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub} --help");
        assert!(!o.stdout.is_empty());
    }
    let o = aisf(&["train", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn synth_is_byte_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = aisf(&["synth", "--seed", "11", "--images", "3", "--size", "48", "--out", p(d)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let ds = load_annotations(&a.join("annotations.json")).unwrap();
    assert_eq!(ds.images.len(), 3);
    for entry in &ds.images {
        let img = Image::load(&a.join(&entry.info.file)).unwrap();
        assert_eq!((img.channels, img.height, img.width), (3, 48, 48));
        for inst in &entry.instances {
            assert!(inst.visible.is_subset_of(&inst.amodal).unwrap());
        }
    }
}

#[test]
fn resumed_training_reproduces_the_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "full.ckpt", "6", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = train(dir.path(), "half.ckpt", "3", &[]);
    assert_eq!(code(&o), 0);
    let half = dir.path().join("half.ckpt");
    let o = train(dir.path(), "half.ckpt", "6", &["--resume", p(&half)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let full = fs::read_to_string(dir.path().join("full.csv")).unwrap();
    let resumed = fs::read_to_string(dir.path().join("half.csv")).unwrap();
    assert_eq!(full.lines().next().unwrap(), "iteration,occluder,visible,amodal,invisible,total");
    assert_eq!(full.lines().count(), 7);
    assert_eq!(full, resumed);
    assert_eq!(
        fs::read(dir.path().join("full.ckpt")).unwrap(),
        fs::read(dir.path().join("half.ckpt")).unwrap()
    );
}

#[test]
fn disabled_heads_leave_log_cells_empty() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "a.ckpt", "2", &["--no-occluder", "--no-visible", "--no-invisible"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    for row in log.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 6);
        assert!(cells[1].is_empty() && cells[2].is_empty() && cells[4].is_empty());
        assert!(cells[3].parse::<f64>().is_ok() && cells[5].parse::<f64>().is_ok());
    }
}

#[test]
fn eval_writes_reports_and_scores_ground_truth_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "m.ckpt", "1", &[])), 0);
    let ck = dir.path().join("m.ckpt");
    let out = dir.path().join("eval");
    let o = aisf(&["eval", "--checkpoint", p(&ck), "--synth-images", "2", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["AP", "AP50", "AP75", "AR"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(out.join("report.txt").exists());

    let gt = dir.path().join("gt");
    let o = aisf(&["eval", "--checkpoint", p(&ck), "--synth-images", "2", "--out-dir", p(&gt), "--gt-as-predictions"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(gt.join("report.json")).unwrap()).unwrap();
    for key in ["AP", "AP50", "AP75", "AR"] {
        assert_eq!(report[key].as_f64().unwrap(), 1.0, "{key}");
    }
}

#[test]
fn viz_writes_normalized_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "m.ckpt", "1", &[])), 0);
    let data = dir.path().join("data");
    assert_eq!(code(&aisf(&["synth", "--seed", "1", "--images", "1", "--size", "32", "--out", p(&data)])), 0);
    let out = dir.path().join("viz");
    let ck = dir.path().join("m.ckpt");
    let img = data.join("img_0001.ppm");
    let o = aisf(&["viz-attention", "--checkpoint", p(&ck), "--image", p(&img), "--box", "2,3,20,18", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("roi.ppm").exists());
    for kind in ["occluder", "visible", "amodal"] {
        let map = Image::load(&out.join(format!("attn_{kind}.pgm"))).unwrap();
        assert_eq!((map.channels, map.height, map.width), (1, 6, 6));
        assert_eq!(map.data.iter().min(), Some(&0));
        assert_eq!(map.data.iter().max(), Some(&255));
    }

    let o = aisf(&["viz-attention", "--checkpoint", p(&ck), "--image", p(&img), "--box", "20,20,30,30", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 4);
}

#[test]
fn failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("m.ckpt");
    let mut args = vec!["train", "--out", p(&out), "--iterations", "1", "--dataset", p(&missing)];
    args.extend_from_slice(&SMALL[..8]);
    assert_eq!(code(&aisf(&args)), 2);

    let o = train(dir.path(), "d.ckpt", "2", &["--lr", "1e300"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = aisf(&["eval", "--checkpoint", p(&bad), "--out-dir", p(dir.path())]);
    assert_ne!(code(&o), 0);
}
