use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use offense_core::transfer::Checkpoint;
use serde_json::{json, Value};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn offense(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_offense"))
            .args(args)
            .current_dir(self.dir.path())
            .env("OFFENSE_OUTPUT_ROOT", self.path("root"))
            .env_remove("RUST_LOG")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.offense(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn generate(&self, profile: &str, lang: &str, size: usize, seed: u64, file: &str) {
        let size = size.to_string();
        let seed = seed.to_string();
        self.ok(&[
            "generate", "--profile", profile, "--language", lang, "--size", &size, "--seed", &seed, "-o", file,
        ]);
    }

    fn config(&self, file: &str, value: Value) -> String {
        fs::write(self.path(file), serde_json::to_string_pretty(&value).unwrap()).unwrap();
        file.to_string()
    }
}

fn small_encoder() -> Value {
    json!({"mini": {"vocab_size": 512, "hidden_size": 16, "num_layers": 1, "num_heads": 2, "ff_size": 32, "max_len": 12}})
}

fn english_config(sb: &Sandbox) -> String {
    sb.generate("olid-en", "en", 200, 1, "en-train.tsv");
    sb.generate("olid-en", "en", 60, 2, "en-test.tsv");
    sb.config(
        "en.json",
        json!({
            "name": "en",
            "seed": 3,
            "data": {
                "train": {"path": "en-train.tsv", "profile": "olid-en"},
                "eval": {"path": "en-test.tsv", "profile": "olid-en"}
            },
            "encoder": small_encoder(),
            "train": {"learning_rate": 0.003, "epochs": 2}
        }),
    )
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn strip_wall_time(history: &str) -> Vec<Value> {
    history
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_secs");
            v
        })
        .collect()
}

fn ckpt_bytes(path: &Path) -> Vec<u8> {
    Checkpoint::load(path).unwrap().without_timestamp().to_bytes()
}

#[test]
fn train_writes_a_complete_run_directory_under_the_output_root() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    let printed = sb.ok(&["train", "-c", &cfg]);
    let run = sb.path("root/en-train");
    assert_eq!(PathBuf::from(printed.trim()), run);
    for file in ["config.json", "model.ckpt", "history.jsonl", "report.json", "confusion.csv", "confusion.png"] {
        assert!(run.join(file).is_file(), "missing {file}");
    }
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["label"], "en");
    assert_eq!(report["instances"], 60);
    let snapshot: Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["train"]["seed"], 3);
    let leftovers: Vec<_> = fs::read_dir(sb.path("root"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers, vec!["en-train"]);
}

#[test]
fn training_twice_is_identical_up_to_timing() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["train", "-c", &cfg, "-o", "a"]);
    sb.ok(&["train", "-c", &cfg, "-o", "b"]);
    let read = |d: &str, f: &str| fs::read_to_string(sb.path(d).join(f)).unwrap();
    assert_eq!(strip_wall_time(&read("a", "history.jsonl")), strip_wall_time(&read("b", "history.jsonl")));
    assert_eq!(read("a", "report.json"), read("b", "report.json"));
    assert_eq!(read("a", "config.json"), read("b", "config.json"));
    assert_eq!(ckpt_bytes(&sb.path("a/model.ckpt")), ckpt_bytes(&sb.path("b/model.ckpt")));

    // A second run into the same directory replaces it.
    sb.ok(&["train", "-c", &cfg, "-o", "a", "--set", "seed=4"]);
    assert_ne!(ckpt_bytes(&sb.path("a/model.ckpt")), ckpt_bytes(&sb.path("b/model.ckpt")));
}

#[test]
fn encoder_only_transfer_to_three_classes() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["train", "-c", &cfg, "-o", "en-run"]);
    sb.generate("trac2-bn", "bn", 80, 5, "bn-train.tsv");
    let bn = sb.config(
        "bn.json",
        json!({
            "name": "bn-tl",
            "data": {"train": {"path": "bn-train.tsv", "profile": "trac2-bn"}},
            "train": {"learning_rate": 0.003, "epochs": 2},
            "transfer": {"source_checkpoint": "en-run/model.ckpt", "strategy": "encoder_only"}
        }),
    );
    let run = PathBuf::from(sb.ok(&["transfer", "-c", &bn]).trim());
    let ckpt = Checkpoint::load(&run.join("model.ckpt")).unwrap();
    let head = ckpt.head.unwrap();
    assert_eq!(head.scheme.len(), 3);
    assert_eq!(head.state.weight.dim(), (3, 16));
    let source = Checkpoint::load(&sb.path("en-run/model.ckpt")).unwrap();
    assert_eq!(ckpt.encoder.config(), source.encoder.config());
}

#[test]
fn full_transfer_with_mismatched_classes_fails_before_training() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["train", "-c", &cfg, "-o", "en-run"]);
    sb.generate("trac2-bn", "bn", 40, 5, "bn-train.tsv");
    let bn = sb.config(
        "bn.json",
        json!({
            "name": "bn-full",
            "data": {"train": {"path": "bn-train.tsv", "profile": "trac2-bn"}},
            "train": {"epochs": 50},
            "transfer": {"source_checkpoint": "en-run/model.ckpt", "strategy": "full"}
        }),
    );
    let out = sb.offense(&["transfer", "-c", &bn, "-v"]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "checkpoint");
    assert!(err["error"]["message"].as_str().unwrap().contains("class count"));
    assert!(!String::from_utf8_lossy(&out.stderr).contains("epoch 1/"));
    assert!(!sb.path("root/bn-full-transfer").exists());
}

#[test]
fn full_transfer_between_binary_tasks() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["train", "-c", &cfg, "-o", "en-run"]);
    sb.generate("hasoc-hi", "hi", 60, 6, "hi.tsv");
    let hi = sb.config(
        "hi.json",
        json!({
            "name": "hi-full",
            "data": {"train": {"path": "hi.tsv", "profile": "hasoc-hi"}, "eval": {"path": "hi.tsv", "profile": "hasoc-hi"}},
            "train": {"learning_rate": 0.003, "epochs": 1},
            "transfer": {
                "source_checkpoint": "en-run/model.ckpt",
                "strategy": "full",
                "label_mapping": {"offensive": "hate offensive", "non-offensive": "non hate-offensive"}
            }
        }),
    );
    let run = PathBuf::from(sb.ok(&["transfer", "-c", &hi]).trim());
    assert!(run.join("report.json").is_file());
}

#[test]
fn predict_with_zero_head_prints_uniform_probabilities() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["init", "-c", &cfg, "--set", "head.init=zeros", "-o", "blank"]);
    fs::write(sb.path("lines.txt"), "you are great\n\n@USER something else entirely\n").unwrap();
    let stdout = sb.ok(&["predict", "--checkpoint", "blank/model.ckpt", "--input", "lines.txt"]);
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for line in lines {
        assert_eq!(line["probabilities"]["offensive"], 0.5);
        assert_eq!(line["probabilities"]["non-offensive"], 0.5);
        assert_eq!(line["label"], "offensive");
    }
}

#[test]
fn evaluate_baseline_and_report() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    sb.ok(&["train", "-c", &cfg, "-o", "trained"]);
    let eval_run = PathBuf::from(sb.ok(&["evaluate", "-c", &cfg, "--checkpoint", "trained/model.ckpt"]).trim());
    for file in ["report.json", "confusion.csv", "confusion.png", "table.txt", "table.csv"] {
        assert!(eval_run.join(file).is_file(), "missing {file}");
    }
    assert_eq!(
        fs::read_to_string(eval_run.join("report.json")).unwrap(),
        fs::read_to_string(sb.path("trained/report.json")).unwrap()
    );
    let csv = fs::read_to_string(eval_run.join("confusion.csv")).unwrap();
    assert!(csv.starts_with("gold \\ predicted,offensive,non-offensive"));

    let base = PathBuf::from(sb.ok(&["baseline", "-c", &cfg]).trim());
    let report: Value = serde_json::from_str(&fs::read_to_string(base.join("report.json")).unwrap()).unwrap();
    assert!(report["label"].as_str().unwrap().starts_with("Baseline ("));

    let base_str = base.to_str().unwrap();
    let eval_str = eval_run.to_str().unwrap();
    let table = sb.ok(&["report", eval_str, base_str, "--language", "english", "--references", "-o", "table"]);
    assert!(table.contains("Baseline ("));
    assert!(table.contains("en"));
    assert!(sb.path("table/table.csv").is_file());
    // Published reference rows exist for the other three languages only.
    assert!(!table.contains("Risch and Krestel"));
    let bengali = sb.ok(&["report", eval_str, "--language", "bn", "--references", "-o", "table-bn"]);
    assert!(bengali.contains("Risch and Krestel (2020)"));
}

#[test]
fn pretrained_adapter_reference_is_a_config_error() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    let out = sb.offense(&["train", "-c", &cfg, "--set", "encoder={\"pretrained\": \"xlm-roberta-base\"}"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("xlm-roberta-base"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    for overrides in [
        vec!["--set", "train.epochs=0"],
        vec!["--set", "trian.epochs=2"],
        vec!["--set", "data.train.path=missing.tsv"],
        vec!["--set", "data.train.profile=nope"],
        vec!["--set", "novalue"],
    ] {
        let mut args = vec!["train", "-c", &cfg];
        args.extend(overrides.iter().copied());
        let out = sb.offense(&args);
        assert_eq!(out.status.code(), Some(2), "{overrides:?}");
        assert_eq!(error_json(&out)["error"]["code"], 2);
    }
    let out = sb.offense(&["train", "-c", "absent.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_carry_file_and_line() {
    let sb = Sandbox::new();
    let cfg = english_config(&sb);
    fs::write(sb.path("bad.tsv"), "1\tfine text\tOFF\n2\tother text\tMAYBE\n").unwrap();
    let out = sb.offense(&["train", "-c", &cfg, "--set", "data.train.path=bad.tsv"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = error_json(&out)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("bad.tsv") && msg.contains("MAYBE"), "{msg}");
    assert!(msg.contains('2'), "{msg}");
}

#[test]
fn corrupt_checkpoint_exits_with_code_four() {
    let sb = Sandbox::new();
    fs::write(sb.path("junk.ckpt"), b"definitely not a checkpoint").unwrap();
    let out = sb.offense(&["predict", "--checkpoint", "junk.ckpt", "--input", "junk.ckpt"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"]["kind"], "checkpoint");
}

#[test]
fn schema_lists_every_top_level_field() {
    let sb = Sandbox::new();
    let schema: Value = serde_json::from_str(&sb.ok(&["schema"])).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for key in ["name", "seed", "output_dir", "data", "encoder", "head", "train", "transfer"] {
        assert!(props.contains_key(key), "{key}");
    }
}

#[test]
fn generate_creates_missing_directories() {
    let sb = Sandbox::new();
    sb.generate("trac2-bn", "bn", 25, 0, "data/nested/bn.tsv");
    let text = fs::read_to_string(sb.path("data/nested/bn.tsv")).unwrap();
    assert_eq!(text.lines().count(), 25);
}
