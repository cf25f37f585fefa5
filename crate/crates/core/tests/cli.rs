//! End-to-end runs of the command line binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use macroformer::data::DatasetManifest;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_macroformer"));
    c.env_remove("MACRO_SEED");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, replays: usize, extra: &[&str]) -> Output {
    let mut c = bin();
    c.args(["gen-data", "--replays", &replays.to_string(), "--len-min", "10", "--len-max", "20", "--out-dir"])
        .arg(dir)
        .args(extra);
    run(&mut c)
}

fn manifest_bytes(dir: &Path) -> Vec<u8> {
    fs::read(dir.join("manifest.json")).unwrap()
}

#[test]
fn gen_data_writes_the_split_and_validates_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    let o = run(bin().args(["gen-data", "--seed", "1", "--out-dir"]).arg(&dir));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = DatasetManifest::load(&dir).unwrap();
    assert_eq!((m.counts.train, m.counts.val, m.counts.test), (420, 60, 120));
    assert_eq!(m.files.len(), 600);
    assert!(stdout(&o).contains("train 420, val 60, test 120"));

    let bad = gen(&tmp.path().join("none"), 0, &[]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("replays"), "{}", stderr(&bad));
    assert_eq!(code(&run(bin().args(["gen-data", "--noise", "1.5"]).current_dir(tmp.path()))), 2);
    assert_eq!(code(&run(bin().args(["gen-data", "--matchup", "TvX"]))), 2);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |n: &str| tmp.path().join(n);
    assert_eq!(code(&gen(&d("flag5"), 12, &["--seed", "5"])), 0);
    let env5 = run(bin()
        .env("MACRO_SEED", "5")
        .args(["gen-data", "--replays", "12", "--len-min", "10", "--len-max", "20", "--out-dir"])
        .arg(d("env5")));
    assert_eq!(code(&env5), 0);
    let both = run(bin()
        .env("MACRO_SEED", "5")
        .args(["gen-data", "--replays", "12", "--len-min", "10", "--len-max", "20", "--seed", "6", "--out-dir"])
        .arg(d("both")));
    assert_eq!(code(&both), 0);
    assert_eq!(code(&gen(&d("flag6"), 12, &["--seed", "6"])), 0);
    assert_eq!(manifest_bytes(&d("flag5")), manifest_bytes(&d("env5")));
    assert_eq!(manifest_bytes(&d("flag6")), manifest_bytes(&d("both")));
    assert_ne!(manifest_bytes(&d("flag5")), manifest_bytes(&d("flag6")));

    let garbage = run(bin().env("MACRO_SEED", "abc").args(["gen-data", "--out-dir"]).arg(d("x")));
    assert_eq!(code(&garbage), 2);
    assert!(stderr(&garbage).contains("MACRO_SEED"));
}

#[test]
fn train_eval_and_transfer_produce_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("tvt");
    assert_eq!(code(&gen(&data, 30, &["--seed", "2"])), 0);
    let out = tmp.path().join("run");
    let o = run(bin().args(["train", "--preset", "toy", "--seed", "3", "--data"]).arg(&data).arg("--out").arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.json", "checkpoints/best.ckpt", "checkpoints/final.ckpt", "metrics.jsonl", "report.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let cfg: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["preset"], "toy");
    assert_eq!(cfg["train"]["seed"], 3);
    assert_eq!(cfg["model"]["action_count"], 75);
    let log: Vec<Value> = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 2);

    // Evaluating the final checkpoint on val reproduces the last logged epoch.
    let ev = tmp.path().join("eval");
    let o = run(bin()
        .args(["eval", "--split", "val", "--checkpoint"])
        .arg(out.join("checkpoints/final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ev));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["gsp_mean_acc"], log[1]["val_gsp"]);
    assert_eq!(report["bop_mean_acc"], log[1]["val_bop"]);
    assert!(ev.join("report.csv").is_file());

    // Transfer onto a Protoss corpus.
    let pvt = tmp.path().join("pvt");
    assert_eq!(code(&gen(&pvt, 30, &["--seed", "4", "--matchup", "PvT"])), 0);
    let tr = tmp.path().join("transfer");
    let o = run(bin()
        .args(["transfer", "--from"])
        .arg(out.join("checkpoints/final.ckpt"))
        .arg("--data")
        .arg(&pvt)
        .arg("--out")
        .arg(&tr));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("intact"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(tr.join("transfer.json")).unwrap()).unwrap();
    assert_eq!(summary["frozen_intact"], true);
    assert!(summary["changed"].as_array().unwrap().iter().all(|n| {
        let n = n.as_str().unwrap();
        n.starts_with("head_win.") || n.starts_with("head_build.")
    }));

    let o = run(bin()
        .args(["transfer", "--epochs", "2", "--from"])
        .arg(out.join("checkpoints/final.ckpt"))
        .arg("--data")
        .arg(&pvt));
    assert_eq!(code(&o), 2);
}

#[test]
fn same_seed_same_bytes_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, 20, &["--seed", "8"])), 0);
    for name in ["a", "b"] {
        let o = run(bin()
            .env("MACRO_SEED", "9")
            .args(["train", "--preset", "toy", "--no-causal-mask", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(tmp.path().join(name)));
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["checkpoints/final.ckpt", "checkpoints/best.ckpt", "metrics.jsonl", "report.csv"] {
        let same = fs::read(tmp.path().join("a").join(f)).unwrap() == fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(same, "{f} differs between identical runs");
    }
    // The configs differ only in the output directory they record.
    let config = |name: &str| -> Value {
        let mut v: Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join(name).join("config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("out");
        v
    };
    assert_eq!(config("a"), config("b"));
    let cfg = config("a");
    assert_eq!(cfg["model"]["causal_mask"], false);
    assert_eq!(cfg["train"]["seed"], 9);
}

#[test]
fn config_and_io_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, 10, &[])), 0);
    let train = |extra: &[&str]| run(bin().args(["train", "--preset", "toy", "--data"]).arg(&data).args(extra));

    let o = train(&["--set", "model.bogus=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.bogus"), "{}", stderr(&o));
    assert_eq!(code(&train(&["--dropout", "1.5"])), 2);
    assert_eq!(code(&train(&["--lr", "-1"])), 2);

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "typo": 3}}"#).unwrap();
    assert_eq!(code(&train(&["--config", cfg.to_str().unwrap()])), 2);

    let missing = tmp.path().join("nowhere");
    let o = run(bin().args(["train", "--preset", "toy", "--data"]).arg(&missing));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    let o = run(bin().args(["eval", "--checkpoint"]).arg(tmp.path().join("x.ckpt")).arg("--data").arg(&data));
    assert_eq!(code(&o), 3);
    assert_eq!(code(&run(bin().args(["train", "--no-such-flag"]))), 2);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let o = run(bin().arg("gradcheck"));
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("layer families checked"));
    let o = run(bin().args(["gradcheck", "--inject-fault", "layernorm"]));
    assert_eq!(code(&o), 1);
    let failed = stdout(&o).lines().find(|l| l.starts_with("FAILED:")).unwrap_or_default().to_string();
    assert!(failed.contains("layernorm"), "{failed}");
    assert_eq!(code(&run(bin().args(["gradcheck", "--inject-fault", "nonsense"]))), 2);
}

#[test]
fn ablate_reports_every_variant_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&gen(&data, 20, &["--seed", "10"])), 0);
    let out = tmp.path().join("ablate");
    let o = run(bin()
        .args(["ablate", "--preset", "toy", "--epochs", "1", "--set", "train.separate_heads=true", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let variants: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_skip", "no_decoder", "self_attn_only", "gru_baseline"]);
    for ck in ["full", "no_skip", "no_decoder", "self_attn_only", "gru_baseline_gsp", "gru_baseline_bop"] {
        assert!(out.join("checkpoints").join(format!("{ck}.ckpt")).is_file(), "{ck}");
    }
    let tagged = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(tagged.lines().count(), 6);
    assert!(tagged.lines().all(|l| serde_json::from_str::<Value>(l).unwrap()["variant"].is_string()));
}
