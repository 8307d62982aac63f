use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use count2density::bank::HistoricalMapBank;
use count2density::dataset::{write_split, ImageRecord};
use count2density::manifest::{RunManifest, RUN_MANIFEST_FILE};
use count2density::metrics::EvalReport;
use count2density::pseudo::{render_pseudo_density, CountAnnotation, Point, PointSet};
use count2density::Grid2D;

fn c2d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2d"))
        .args(args)
        .env("C2D_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = c2d(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join(RUN_MANIFEST_FILE)).unwrap()
}

fn synth(dir: &Path, n: &str) {
    ok(&["synth", "--n", n, "--size", "32", "--counts", "2:12", "--seed", "7", "--split", "0.5:0.25:0.25", "--out", p(dir)]);
}

#[test]
fn synth_is_reproducible_and_validates_flags() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "8");
    synth(&b, "8");
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert!(ma.artifacts.contains_key("manifest.json"));
    assert_eq!(ma.artifacts.keys().filter(|k| k.ends_with(".c2dg") && k.contains("/images/")).count(), 8);
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.seed, Some(7));

    let bad = c2d(&["synth", "--n", "4", "--counts", "50:5", "--out", p(&t.path().join("c"))]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("--counts"), "{}", stderr(&bad));
    assert!(!t.path().join("c").exists());

    let bad = c2d(&["synth", "--n", "4", "--size", "8", "--out", p(&t.path().join("c"))]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("--size"), "{}", stderr(&bad));
    assert_eq!(code(&c2d(&["synth", "--bogus"])), 1);
    assert_eq!(code(&c2d(&["--help"])), 0);
}

#[test]
fn train_predict_replay_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8");
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "3", "--seed", "7", "--snapshot-every", "2"]);

    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert_eq!(records[1]["bank_snapshot"], "bank_snapshots/epoch_0002");
    assert!(records[0]["val_mae"].is_number());
    let m = manifest(&run);
    assert_eq!(m.command, "train");
    assert_eq!(m.config["alpha"], 0.7);
    assert!(m.artifacts.contains_key("checkpoint.c2dp"));
    assert_eq!(HistoricalMapBank::load(&run.join("bank")).unwrap().len(), 4);

    // replay from another working directory reproduces every artifact
    let again = t.path().join("again");
    let out = Command::new(env!("CARGO_BIN_EXE_c2d"))
        .args(["replay", "--manifest", p(&run.join(RUN_MANIFEST_FILE)), "--out", p(&again)])
        .current_dir(t.path().join("data/test"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(manifest(&again).artifacts, m.artifacts);

    // tampering with the recorded checksums makes the replay fail
    let mut forged = m.clone();
    forged.artifacts.insert("checkpoint.c2dp".into(), "00".into());
    let forged_path = t.path().join("forged.json");
    forged.save_atomic(&forged_path).unwrap();
    let out = c2d(&["replay", "--manifest", p(&forged_path), "--out", p(&t.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checkpoint.c2dp"));

    let preds = t.path().join("preds");
    let out = ok(&["predict", "--model", p(&run), "--images", p(&data.join("test")), "--out", p(&preds)]);
    let csv = fs::read_to_string(preds.join("counts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
    let preds2 = t.path().join("preds2");
    ok(&["predict", "--model", p(&run), "--images", p(&data.join("test")), "--out", p(&preds2)]);
    assert_eq!(manifest(&preds).artifacts, manifest(&preds2).artifacts);

    let report = t.path().join("report");
    ok(&["eval", "--pred", p(&preds), "--gt", p(&data.join("test")), "--out", p(&report)]);
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r.n_images, 2);
    assert!(r.mae.is_finite() && r.f1.is_some());
}

#[test]
fn train_variants_and_failures() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "4");
    for extra in [&["--bank-init", "none"][..], &["--labeled-fraction", "0.5"], &["--sampler", "topk", "--no-contrastive"]] {
        let run = t.path().join("run");
        let mut args = vec!["train", "--data", p(&data), "--out", p(&run), "--epochs", "1"];
        args.extend_from_slice(extra);
        ok(&args);
        assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 1);
    }

    let out = c2d(&["train", "--data", p(&t.path().join("missing")), "--out", p(&t.path().join("r"))]);
    assert_eq!(code(&out), 2);
    let out = c2d(&["train", "--data", p(&data), "--out", p(&t.path().join("r")), "--alpha", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--alpha"));
    let out = c2d(&["train", "--data", p(&data), "--out", p(&t.path().join("r")), "--sampler", "best"]);
    assert_eq!(code(&out), 1);

    let out = c2d(&["train", "--data", p(&data), "--out", p(&t.path().join("r")), "--epochs", "1", "--lr", "1e38", "--optimizer", "sgd"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch 0"), "{}", stderr(&out));
}

fn separated_split(dir: &Path) {
    let mut items = Vec::new();
    for k in 0..3usize {
        let pts: Vec<Point> = (0..=k).map(|j| Point { u: 3 + 6 * j, v: 4 + 5 * j }).collect();
        let points = PointSet::new(pts).unwrap();
        let density = render_pseudo_density(&points, 0.8, 24, 24).unwrap();
        items.push(ImageRecord {
            name: format!("img{k}"),
            image: Grid2D::from_fn(24, 24, |u, v| ((u * 7 + v * 3 + k) % 11) as f32 / 11.0).unwrap(),
            count: CountAnnotation(points.len()),
            points: Some(points),
            density: Some(density),
        });
    }
    write_split(dir, &items, false).unwrap();
}

#[test]
fn eval_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let gt = t.path().join("gt");
    separated_split(&gt);
    let out = ok(&["eval", "--pred", p(&gt.join("density")), "--gt", p(&gt), "--tile", "8"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let json = &text[text.find('{').unwrap()..];
    let r: EvalReport = serde_json::from_str(json).unwrap();
    assert!(r.mae < 1e-4, "{r:?}");
    assert_eq!(r.ssim, 1.0);
    assert_eq!(r.f1, Some(1.0));
    assert!(r.subregion_mae.unwrap() < 1e-4);

    let out = ok(&["eval", "--pred", p(&gt.join("density")), "--gt", p(&gt)]);
    let text = String::from_utf8_lossy(&out.stdout);
    let r: EvalReport = serde_json::from_str(&text[text.find('{').unwrap()..]).unwrap();
    assert_eq!(r.subregion_mae, None);

    fs::remove_file(gt.join("density/img1.c2dg")).unwrap();
    fs::copy(gt.join("density/img0.c2dg"), gt.join("density/extra.c2dg")).unwrap();
    let out = c2d(&["eval", "--pred", p(&gt.join("density")), "--gt", p(&gt)]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("img1") && msg.contains("extra"), "{msg}");
}

#[test]
fn bank_inspection() {
    let t = tempfile::tempdir().unwrap();
    let snaps = t.path().join("snaps");
    for (e, scale) in [("epoch_0001", 1.0f32), ("epoch_0002", 2.0)] {
        let entries = vec![
            Grid2D::zeros(8, 8).unwrap(),
            Grid2D::from_fn(8, 8, |u, v| scale * (u + v) as f32).unwrap(),
        ];
        HistoricalMapBank::from_entries(entries, 0.7).unwrap().save(&snaps.join(e)).unwrap();
    }
    let export = t.path().join("export");
    let out = ok(&["bank", "--bank", p(&snaps), "--export", p(&export)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("epoch_0001\t0\t0.000000\t0.000000\t0"), "{text}");
    let pgms = fs::read_dir(&export).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, 4);
    assert!(export.join("entry_000001_epoch_0002.pgm").is_file());

    ok(&["bank", "--bank", p(&snaps.join("epoch_0002")), "--entries", "1", "--prior-blur", "1.0"]);
    let out = c2d(&["bank", "--bank", p(&snaps), "--entries", "5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("entry 5"));

    fs::write(snaps.join("epoch_0002/manifest.json"), "{not json").unwrap();
    assert_eq!(code(&c2d(&["bank", "--bank", p(&snaps)])), 2);
    assert_eq!(code(&c2d(&["bank", "--bank", p(&t.path().join("nothing"))])), 2);
}
