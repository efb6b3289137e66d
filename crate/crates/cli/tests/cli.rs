use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn aomd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aomd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("AOMD_DATA_DIR")
        .output()
        .expect("run aomd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let digest = hex::encode(Sha256::digest(fs::read(&path).unwrap()));
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

const SMALL: [&str; 10] = [
    "--set",
    "synthetic.object_dim=6",
    "--set",
    "synthetic.global_dim=3",
    "--set",
    "synthetic.embed_dim=6",
    "--set",
    "synthetic.vocab_size=20",
    "--set",
    "synthetic.seed=7",
];

/// Writes a small synthetic corpus and returns its manifest path.
fn corpus(dir: &Path, n: usize) -> PathBuf {
    let n = format!("synthetic.n_posts={n}");
    let mut args = vec!["gen-synthetic", "--out", p(dir), "--set", &n];
    args.extend(SMALL);
    ok(aomd(&args));
    dir.join("manifest.jsonl")
}

const TINY_MODEL: [&str; 8] = [
    "--set",
    "model.d=6",
    "--set",
    "model.h=6",
    "--set",
    "model.mlp_hidden=6",
    "--set",
    "train.epochs=3",
];

#[test]
fn help_exits_zero_everywhere() {
    ok(aomd(&["--help"]));
    for cmd in [
        "gen-synthetic",
        "train",
        "eval",
        "predict",
        "ablate",
        "cluster-tokens",
        "agreement",
    ] {
        let o = ok(aomd(&[cmd, "--help"]));
        assert!(
            String::from_utf8_lossy(&o.stdout).contains("Usage"),
            "{cmd}"
        );
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&aomd(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&aomd(&["no-such-command"])), 2);
    assert_eq!(code(&aomd(&["agreement"])), 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = aomd(&[
        "gen-synthetic",
        "--out",
        p(&out),
        "--set",
        "synthetic.bogus=1",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = aomd(&[
        "gen-synthetic",
        "--out",
        p(&out),
        "--set",
        "synthetic.analogy_rate=2",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_or_bad_manifest_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        code(&aomd(&["train", "--data", p(&missing), "--out", p(&out)])),
        3
    );

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{not json\n").unwrap();
    let o = aomd(&["train", "--data", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.jsonl:1"));
}

#[test]
fn gen_synthetic_writes_requested_posts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let manifest = corpus(&a, 10);
    corpus(&b, 10);
    let text = fs::read_to_string(&manifest).unwrap();
    // A header line, then one record per post.
    assert_eq!(text.lines().count(), 11);
    assert!(text.lines().next().unwrap().contains("aomd-manifest"));
    let (ha, hb) = (tree_hashes(&a), tree_hashes(&b));
    assert_eq!(ha, hb);
    assert!(
        ha.contains_key(Path::new("embeddings.txt")) && ha.contains_key(Path::new("spec.json"))
    );
}

#[test]
fn gen_synthetic_spec_file_and_positive_rate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"n_posts": 1000, "seed": 2, "analogy_rate": 0.8, "object_dim": 4, "global_dim": 2, "embed_dim": 4}"#).unwrap();
    let out = dir.path().join("data");
    ok(aomd(&[
        "gen-synthetic",
        "--spec",
        p(&spec),
        "--out",
        p(&out),
    ]));
    let text = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let labels: Vec<u64> = text
        .lines()
        .skip(1)
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["label"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(labels.len(), 1000);
    let rate = labels.iter().sum::<u64>() as f64 / 1000.0;
    assert!((rate - 0.35).abs() <= 0.05, "{rate}");
}

#[test]
fn agreement_on_unanimous_fixture_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ann.jsonl");
    fs::write(
        &f,
        "{\"post_id\":\"a\",\"ratings\":[1,1,1]}\n{\"post_id\":\"b\",\"ratings\":[0,0,0]}\n{\"post_id\":\"c\",\"ratings\":[1,1,1]}\n",
    )
    .unwrap();
    let o = ok(aomd(&["agreement", "--annotations", p(&f)]));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["fleiss_kappa"], 1.0);
    assert_eq!(v["records"], 3);

    fs::write(&f, "{\"post_id\":\"a\",\"ratings\":[1,1,0]}\n").unwrap();
    assert_eq!(code(&aomd(&["agreement", "--annotations", p(&f)])), 3);
}

#[test]
fn eval_on_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("preds.jsonl");
    let lines: String = [(0.9, 1), (0.2, 0), (0.7, 1), (0.1, 0), (0.5, 1)]
        .iter()
        .enumerate()
        .map(|(i, (y, l))| {
            format!(
                "{{\"id\":\"p{i}\",\"y_hat\":{y},\"label\":{l},\"alpha_v\":[],\"alpha_c\":[]}}\n"
            )
        })
        .collect();
    fs::write(&f, lines).unwrap();
    let out = dir.path().join("report");
    let o = ok(aomd(&["eval", "--predictions", p(&f), "--out", p(&out)]));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["accuracy", "f1", "cohen_kappa", "auc"] {
        assert_eq!(report[key], 1.0, "{key}");
    }
    assert!(out.join("report.json").exists());
    assert!(fs::read_to_string(out.join("roc.csv"))
        .unwrap()
        .starts_with("fpr,tpr\n"));
}

#[test]
fn cluster_tokens_groups_nearby_words() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("tokens.json");
    fs::write(
        &input,
        r#"[
            {"word": "BLACK", "box": [0,0,50,0,50,10,0,10]},
            {"word": "PEOPLE", "box": [0,12,60,12,60,22,0,22]},
            {"word": "far", "box": [0,300,30,300,30,310,0,310]}
        ]"#,
    )
    .unwrap();
    let out = dir.path().join("clusters.json");
    ok(aomd(&[
        "cluster-tokens",
        "--in",
        p(&input),
        "--out",
        p(&out),
    ]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let phrases: Vec<&serde_json::Value> =
        v.as_array().unwrap().iter().map(|c| &c["phrase"]).collect();
    assert_eq!(
        phrases,
        [
            &serde_json::json!(["BLACK", "PEOPLE"]),
            &serde_json::json!(["far"])
        ]
    );

    // Zero padding splits the stacked pair.
    ok(aomd(&[
        "cluster-tokens",
        "--in",
        p(&input),
        "--out",
        p(&out),
        "--set",
        "model.cluster.pad_factor=0",
    ]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend(TINY_MODEL);
    args.extend(extra);
    aomd(&args)
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"), 60);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(train(&data, &a, &[]));
    ok(train(&data, &b, &[]));
    let ha = tree_hashes(&a);
    assert_eq!(ha, tree_hashes(&b));
    for name in [
        "model.ckpt",
        "history.csv",
        "config.json",
        "report.json",
        "roc.csv",
    ] {
        assert!(ha.contains_key(Path::new(name)), "{name}");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,"));
    assert_eq!(history.lines().count(), 4);
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["d"], 6);
    assert_eq!(echoed["model"]["object_dim"], 6);
    assert_eq!(echoed["train"]["optim"]["batch_size"], 32);

    // A different seed changes the run.
    let c = dir.path().join("c");
    ok(train(&data, &c, &["--set", "train.seed=1"]));
    assert_ne!(
        tree_hashes(&c)[Path::new("model.ckpt")],
        ha[Path::new("model.ckpt")]
    );

    // Resuming trains further from the checkpoint and leaves a usable model.
    let r = dir.path().join("r");
    let ckpt = a.join("model.ckpt");
    ok(train(&data, &r, &["--resume", p(&ckpt)]));
    assert_ne!(
        fs::read(&ckpt).unwrap(),
        fs::read(r.join("model.ckpt")).unwrap()
    );
    let resumed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(r.join("config.json")).unwrap()).unwrap();
    assert_eq!(resumed["model"], echoed["model"]);
    ok(aomd(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&r.join("model.ckpt")),
        "--split",
        "val",
    ]));
}

#[test]
fn eval_and_predict_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"), 40);
    let run = dir.path().join("run");
    ok(train(&data, &run, &[]));
    let ckpt = run.join("model.ckpt");

    let o = ok(aomd(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--split",
        "test",
    ]));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report, saved);

    let preds = dir.path().join("preds").join("all.jsonl");
    ok(aomd(&[
        "predict",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&preds),
    ]));
    let text = fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 40);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "y_hat", "label", "alpha_v", "alpha_c"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }

    // Scoring the test predictions reproduces the checkpoint evaluation.
    let test_preds = dir.path().join("test.jsonl");
    ok(aomd(&[
        "predict",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--split",
        "test",
        "--out",
        p(&test_preds),
    ]));
    let o = ok(aomd(&["eval", "--predictions", p(&test_preds)]));
    let from_preds: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(from_preds, report);

    assert_eq!(code(&aomd(&["eval", "--data", p(&data)])), 2);
}

#[test]
fn data_dir_env_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    corpus(&dir.path().join("data"), 20);
    let out = dir.path().join("preds.jsonl");
    let run = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_aomd"))
        .args(["train", "--data", "data/manifest.jsonl", "--out", p(&run)])
        .args(TINY_MODEL)
        .env("AOMD_DATA_DIR", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(o);
    let o = Command::new(env!("CARGO_BIN_EXE_aomd"))
        .args([
            "predict",
            "--data",
            "data/manifest.jsonl",
            "--checkpoint",
            p(&run.join("model.ckpt")),
            "--out",
            p(&out),
        ])
        .env("AOMD_DATA_DIR", dir.path())
        .output()
        .unwrap();
    ok(o);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 20);
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(&dir.path().join("data"), 40);
    let out = dir.path().join("ablate");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&out)];
    args.extend(TINY_MODEL);
    ok(aomd(&args));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "variant,accuracy,f1,kappa,auc");
    assert_eq!(rows.len(), 6);
    let names: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        ["full", "no_visual", "no_ocr", "no_context", "no_attention"]
    );
    assert!(out.join("config.json").exists() && out.join("ablation.json").exists());

    args.extend(["--variants", "full,no_ocr"]);
    ok(aomd(&args));
    assert_eq!(
        fs::read_to_string(out.join("ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}
