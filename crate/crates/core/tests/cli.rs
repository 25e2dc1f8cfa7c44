use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use consent::image::RgbImage;

const CONFIG: &str = r#"{
  "synth": {"words_mean": 8, "words_std": 3, "words_max": 16, "glyphs_per_word": [3, 5],
            "line_width": [300, 500], "bold_ratio": 0.25},
  "model": {"block_height": 16, "block_width": 12, "embed_dim": 8, "num_heads": 2,
            "num_stacks": 1, "ffn_hidden": 16, "max_seq_len": 32},
  "train": {"epochs": 1, "learning_rate": 0.001}
}"#;

fn consent(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consent"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    dir
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_is_deterministic_and_validates() {
    let d = setup();
    let p = d.path();
    for out in ["a", "b"] {
        let o = consent(&["--quiet", "gen", "--images", "10", "--seed", "7", "--out", out], p);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(read_dir_sorted(&p.join("a")), read_dir_sorted(&p.join("b")));

    let o = consent(&["gen", "--images", "0", "--out", "z"], p);
    assert_eq!(code(&o), 2);
    let o = consent(&["gen", "--config", "absent.json", "--out", "z"], p);
    assert_eq!(code(&o), 3);
    fs::write(p.join("typo.json"), r#"{"train": {"epoch": 2}}"#).unwrap();
    let o = consent(&["gen", "--config", "typo.json", "--out", "z"], p);
    assert_eq!(code(&o), 2);
    let o = consent(&["gen", "--bogus-flag"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn gen_rps_writes_labeled_games() {
    let d = setup();
    let o = consent(
        &["--quiet", "gen", "--rps", "--images", "100", "--out", "rps"],
        d.path(),
    );
    assert_eq!(code(&o), 0);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("rps/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["task"], "rps");
    let images = m["images"].as_array().unwrap();
    assert_eq!(images.len(), 100);
    for img in images {
        let words = img["words"].as_array().unwrap();
        assert_eq!(words.len(), 2);
        let pose = |i: usize| words[i]["pose"].as_str().unwrap().to_string();
        let beats =
            |a: &str, b: &str| matches!((a, b), ("rock", "scissors") | ("scissors", "paper") | ("paper", "rock"));
        let want = [beats(&pose(0), &pose(1)) as u64, beats(&pose(1), &pose(0)) as u64];
        assert_eq!(
            [words[0]["label"].as_u64().unwrap(), words[1]["label"].as_u64().unwrap()],
            want
        );
    }
}

#[test]
fn train_eval_predict_round_trip() {
    let d = setup();
    let p = d.path();
    let o = consent(&["train", "--data", "missing", "--out", "m"], p);
    assert_eq!(code(&o), 3);

    assert_eq!(
        code(&consent(
            &["--quiet", "gen", "--config", "cfg.json", "--images", "20", "--seed", "3", "--out", "data"],
            p
        )),
        0
    );
    for out in ["m1", "m2"] {
        let o = consent(
            &[
                "--quiet", "train", "--config", "cfg.json", "--data", "data", "--out", out,
            ],
            p,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let bytes = |f: &str| fs::read(p.join(f)).unwrap();
    assert_eq!(bytes("m1/model.cnsnt"), bytes("m2/model.cnsnt"));
    assert_eq!(bytes("m1/run_manifest.json"), bytes("m2/run_manifest.json"));
    consent::model::load_model(&p.join("m1/model.cnsnt")).unwrap();
    let run: serde_json::Value = serde_json::from_slice(&bytes("m1/run_manifest.json")).unwrap();
    assert_eq!(run["config"]["model"]["embed_dim"], 8);
    for line in String::from_utf8(bytes("m1/train_log.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["train_loss"].is_number() && rec["rng_digest"].is_string());
    }

    let o = consent(
        &[
            "--quiet",
            "eval",
            "--data",
            "data",
            "--model",
            "m1/model.cnsnt",
            "--report",
            "r.json",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&bytes("r.json")).unwrap();
    assert!(r["f1"].as_f64().is_some_and(|f| (0.0..=1.0).contains(&f)));

    let o = consent(
        &[
            "--quiet",
            "eval",
            "--data",
            "data",
            "--ground-truth",
            "--report",
            "gt.json",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let gt: serde_json::Value = serde_json::from_slice(&bytes("gt.json")).unwrap();
    for k in ["precision", "recall", "f1", "word_accuracy", "image_accuracy"] {
        assert_eq!(gt[k], 1.0, "{k}");
    }

    let o = consent(
        &["baseline-vote", "--data", "data", "--alpha", "1.0", "--split", "train"],
        p,
    );
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("morphology voting"));

    // predict on one generated image with its own boxes
    let manifest: serde_json::Value = serde_json::from_slice(&bytes("data/manifest.json")).unwrap();
    let first = &manifest["images"][0];
    let boxes: Vec<&serde_json::Value> = first["words"].as_array().unwrap().iter().collect();
    fs::write(p.join("boxes.json"), serde_json::to_string(&boxes).unwrap()).unwrap();
    let image = format!("data/{}", first["file"].as_str().unwrap());
    let args = [
        "predict",
        "--model",
        "m1/model.cnsnt",
        "--image",
        &image,
        "--boxes",
        "boxes.json",
        "--annotate",
        "a.ppm",
    ];
    let o1 = consent(&args, p);
    assert_eq!(code(&o1), 0, "{}", String::from_utf8_lossy(&o1.stderr));
    let ann1 = bytes("a.ppm");
    let o2 = consent(&args, p);
    assert_eq!(o1.stdout, o2.stdout);
    assert_eq!(ann1, bytes("a.ppm"));

    let out: serde_json::Value = serde_json::from_slice(&o1.stdout).unwrap();
    let words = out["words"].as_array().unwrap();
    assert_eq!(words.len(), boxes.len());
    let ann = RgbImage::decode_ppm(&ann1).unwrap();
    for w in words {
        let b: Vec<u32> = w["box"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as u32)
            .collect();
        let want = if w["label"] == 1 { [0, 0, 255] } else { [0, 255, 0] };
        // two-pixel outline on the left edge
        assert_eq!(ann.get(b[0], b[1] + b[3] / 2), want);
        assert_eq!(ann.get(b[0] + 1, b[1] + b[3] / 2), want);
    }

    fs::write(p.join("none.json"), "[]").unwrap();
    let o = consent(
        &[
            "predict",
            "--model",
            "m1/model.cnsnt",
            "--image",
            &image,
            "--boxes",
            "none.json",
            "--annotate",
            "c.ppm",
        ],
        p,
    );
    assert_eq!(code(&o), 0);
    let out: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(out["words"].as_array().unwrap().is_empty());
    assert_eq!(bytes("c.ppm"), bytes(&image));

    fs::write(p.join("far.json"), "[[0, 0, 100000, 4]]").unwrap();
    let o = consent(
        &[
            "predict",
            "--model",
            "m1/model.cnsnt",
            "--image",
            &image,
            "--boxes",
            "far.json",
        ],
        p,
    );
    assert_eq!(code(&o), 2);

    fs::write(p.join("junk.cnsnt"), b"junk").unwrap();
    let o = consent(
        &[
            "predict",
            "--model",
            "junk.cnsnt",
            "--image",
            &image,
            "--boxes",
            "none.json",
        ],
        p,
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_emits_a_row_major_grid() {
    let d = setup();
    let p = d.path();
    assert_eq!(
        code(&consent(
            &["--quiet", "gen", "--config", "cfg.json", "--images", "20", "--seed", "3", "--out", "data"],
            p
        )),
        0
    );
    let o = consent(
        &[
            "--quiet",
            "ablate",
            "--config",
            "cfg.json",
            "--data",
            "data",
            "--embed-dims",
            "8,16",
            "--stacks",
            "0,1",
            "--out",
            "grid.json",
        ],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let g: serde_json::Value = serde_json::from_slice(&fs::read(p.join("grid.json")).unwrap()).unwrap();
    let cells = g["cells"].as_array().unwrap();
    let dims: Vec<(u64, u64)> = cells
        .iter()
        .map(|c| (c["embed_dim"].as_u64().unwrap(), c["num_stacks"].as_u64().unwrap()))
        .collect();
    assert_eq!(dims, vec![(8, 0), (8, 1), (16, 0), (16, 1)]);
}
