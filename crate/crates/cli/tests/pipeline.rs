use std::path::Path;
use std::process::Command;

use gala_core::dataset::DatasetManifest;
use gala_core::retrieval::load_index;

fn gala(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gala"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run gala");
    assert!(
        out.status.success(),
        "gala {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_to_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, data, model) = (d.join("corpus"), d.join("data"), d.join("model"));
    std::fs::create_dir_all(&data).unwrap();
    let manifest = data.join("manifest.jsonl");

    gala(&["synth", "--n", "30", "--seed", "3", "--out", p(&corpus)]);
    assert!(corpus.join("annotations.jsonl").exists());

    gala(&["ingest", "--corpus", p(&corpus), "--out", p(&manifest), "--split", "0.7", "--seed", "1"]);
    let m = DatasetManifest::read(&manifest).unwrap();
    let (train, eval) = m.split_counts();
    assert!(train > 4 && eval > 2, "{train} train / {eval} eval");

    let pre = d.join("pre.ckpt");
    gala(&["pretrain", "--manifest", p(&manifest), "--out", p(&pre), "--epochs", "1"]);

    let log = d.join("train.jsonl");
    gala(&[
        "train", "--manifest", p(&manifest), "--out", p(&model), "--init", p(&pre), "--epochs", "1",
        "--batch-size", "8", "--lr", "1e-3", "--rounds", "1", "--log", p(&log), "--seed", "2",
    ]);
    assert!(model.join("background.ckpt").exists() && model.join("foreground.ckpt").exists());
    let lines = std::fs::read_to_string(&log).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["step", "stage", "L_t", "L_c", "total"] {
        assert!(first.get(key).is_some(), "log line lacks {key}");
    }
    let stages: Vec<String> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    let switch = stages.iter().position(|s| s == "foreground").expect("foreground stage ran");
    assert!(stages[..switch].iter().all(|s| s == "background"));

    let index = d.join("gallery/index.gidx");
    std::fs::create_dir_all(index.parent().unwrap()).unwrap();
    gala(&["embed", "--manifest", p(&manifest), "--weights", p(&model), "--out", p(&index), "--split", "eval"]);
    let ix = load_index(&index).unwrap();
    assert_eq!(ix.len(), eval);
    let thumb = ix.meta(0).thumbnail_path.clone().unwrap();
    assert!(index.parent().unwrap().join(thumb).exists());

    let entry = m.entries.iter().find(|e| e.split == gala_core::dataset::Split::Eval).unwrap();
    let bg = data.join(&entry.bg_path);
    let b = entry.bbox;
    let boxed = d.join("boxed.json");
    let box_arg = format!("{},{},{},{}", b.left, b.top, b.width, b.height);
    gala(&[
        "query", "--index", p(&index), "--weights", p(&model), "--bg", p(&bg), "--box", &box_arg, "--k", "3",
        "--out", p(&boxed),
    ]);
    let v = json(&boxed);
    assert_eq!(v["results"].as_array().unwrap().len(), 3);

    let stdout = gala(&["query", "--index", p(&index), "--weights", p(&model), "--bg", p(&bg), "--grid", "3"]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["box"].is_array() && v["heatmap_png_b64"].is_string());

    let placed = d.join("placement.json");
    gala(&["place", "--index", p(&index), "--weights", p(&model), "--bg", p(&bg), "--grid", "3", "--out", p(&placed)]);
    let v = json(&placed);
    assert_eq!(v["grid_scores"].as_array().unwrap().len(), 9);
    assert_eq!(v["scale_scores"].as_array().unwrap().len(), 9);

    let report = d.join("report.json");
    let csv = d.join("report.csv");
    gala(&[
        "eval", "--index", p(&index), "--weights", p(&model), "--manifest", p(&manifest), "--m-transforms", "3",
        "--grid", "3", "--out", p(&report), "--csv", p(&csv),
    ]);
    let v = json(&report);
    for key in ["mAP", "mAP-100", "R@1", "R@1%", "geometry_sensitivity", "lighting_R@5", "mean_ns", "mean_iou"] {
        assert!(v["overall"][key].is_number(), "report lacks {key}");
    }
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("section,key,value"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_gala"))
        .args(["query", "--index", "missing.gidx", "--weights", "missing", "--bg", "missing.png"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_gala"))
        .args(["query", "--index", "i", "--weights", "w", "--bg", "b", "--box", "1,2,3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
