use std::path::Path;
use std::process::{Command, Output};

fn evroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evroute")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = evroute(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--seed", "7", "--routes", "200", "--out", s(&a)]);
    ok(&["generate", "--seed", "7", "--routes", "200", "--out", s(&b), "--threads", "3"]);
    for f in ["routes.jsonl", "schema.json", "dataset.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["subcommand"], "generate");
    assert_eq!(manifest["seeds"]["generator"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    assert!(!String::from_utf8(read(a.join("manifest.json"))).unwrap().contains("time"));

    // Replaying the manifest regenerates the same files.
    let c = tmp.path().join("c");
    ok(&["generate", "--config", s(&a.join("manifest.json")), "--out", s(&c)]);
    assert_eq!(read(a.join("routes.jsonl")), read(c.join("routes.jsonl")));
}

#[test]
fn empty_generation_is_valid() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["generate", "--routes", "0", "--out", s(tmp.path())]);
    assert!(read(tmp.path().join("routes.jsonl")).is_empty());
}

#[test]
fn usage_errors_exit_with_2() {
    let out = evroute(&["generate", "--routes", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let out = evroute(&["train", "--model", "gpt", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ret-300k") && err.contains("distance"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let out = evroute(&["generate", "--min-len", "9", "--max-len", "3", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(evroute(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = evroute(&["train", "--model", "ffn", "--data", s(&tmp.path().join("missing")), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_supplies_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.json");
    let out = tmp.path().join("data");
    std::fs::write(&cfg, format!(r#"{{"seed": 3, "routes": 12, "out": {:?}}}"#, s(&out))).unwrap();
    ok(&["generate", "--config", s(&cfg), "--routes", "15"]);
    assert_eq!(String::from_utf8(read(out.join("routes.jsonl"))).unwrap().lines().count(), 15);

    std::fs::write(&cfg, r#"{"sede": 3}"#).unwrap();
    assert_eq!(evroute(&["generate", "--config", s(&cfg)]).status.code(), Some(2));
}

#[test]
fn train_then_eval_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let models = tmp.path().join("models");
    ok(&["generate", "--seed", "5", "--routes", "300", "--min-len", "3", "--max-len", "8", "--out", s(&data)]);
    let kinds = ["ret-3m", "rnn", "distance", "ret-20k", "ffn", "physics", "ret-300k"];
    for k in kinds {
        ok(&["train", "--model", k, "--data", s(&data), "--out", s(&models), "--epochs", "1"]);
        assert!(models.join(format!("{k}.ckpt")).exists());
        assert!(models.join(format!("{k}.manifest.json")).exists());
    }
    let history = String::from_utf8(read(models.join("ffn.history.csv"))).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(history.starts_with("epoch,train_loss,val_mape"));

    let ckpts: Vec<String> = kinds.iter().map(|k| s(&models.join(format!("{k}.ckpt"))).to_string()).collect();
    let report = tmp.path().join("report.csv");
    ok(&["eval", "--data", s(&data), "--checkpoints", &ckpts.join(","), "--out", s(&report)]);
    let text = String::from_utf8(read(&report)).unwrap();
    let order: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(order, ["distance", "physics", "ffn", "rnn", "ret-20k", "ret-300k", "ret-3m"]);
    assert!(text.lines().nth(3).unwrap().starts_with("ffn,route,") && text.lines().nth(3).unwrap().split(',').nth(4) == Some("0"));
    assert!(tmp.path().join("report.csv.manifest.json").exists());

    // Without an FFN checkpoint the deltas cannot be taken.
    let out = evroute(&["eval", "--data", s(&data), "--checkpoints", &ckpts[1]]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ffn"));
    let seg = ok(&["eval", "--data", s(&data), "--checkpoints", &ckpts[1], "--no-bps", "--level", "segment"]);
    assert!(seg.lines().nth(1).unwrap().starts_with("rnn,segment,"));

    // Same seed, same checkpoint bytes.
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&models.join("ffn.manifest.json")), "--out", s(&again)]);
    assert_eq!(read(models.join("ffn.ckpt")), read(again.join("ffn.ckpt")));
}

#[test]
fn foreign_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, m) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("m"));
    ok(&["generate", "--seed", "1", "--routes", "60", "--min-len", "3", "--max-len", "5", "--out", s(&a)]);
    ok(&["generate", "--seed", "2", "--routes", "60", "--min-len", "3", "--max-len", "5", "--out", s(&b)]);
    ok(&["train", "--model", "ffn", "--data", s(&a), "--out", s(&m), "--epochs", "1"]);
    let out = evroute(&["eval", "--data", s(&b), "--checkpoints", s(&m.join("ffn.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn scale_prints_formula_and_note() {
    let text = ok(&["scale", "--segments", "48000000"]);
    assert!(text.contains("9531"), "{text}");
    assert!(text.contains("preset: ret-20k"));
    assert!(text.contains("note:") && text.contains("3.795e12"), "{text}");
    assert_eq!(evroute(&["scale"]).status.code(), Some(2));
    assert_eq!(evroute(&["scale", "--segments", "0.5"]).status.code(), Some(2));
}

#[test]
fn bench_and_export_fig() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--seed", "4", "--routes", "40", "--out", s(&data)]);

    let csv = tmp.path().join("bench.csv");
    ok(&["bench", "--models", "physics,ffn", "--checkpoints", s(&tmp.path().join("nope.ckpt")), "--routes", "50", "--min-len", "2", "--max-len", "4", "--repeats", "2", "--warmups", "1", "--out", s(&csv)]);
    let text = String::from_utf8(read(&csv)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model,n_routes,threads,warmups,repeats,mean_s,throughput_routes_per_s");
    assert!(lines[1].starts_with("physics,50,1,1,2,"));
    assert!(lines[3].starts_with("nope,") && lines[3].ends_with("failed,failed"));

    let fig = tmp.path().join("fig/soc.csv");
    ok(&["export-fig", "--data", s(&data), "--out", s(&fig)]);
    let text = String::from_utf8(read(&fig)).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert_eq!(text.lines().next(), Some("norm_distance,returning_soc_pct,mean_temp_c"));
    assert!(text.lines().skip(1).any(|l| l.starts_with("1,")));
    assert!(tmp.path().join("fig/soc.csv.manifest.json").exists());
}

#[test]
fn help_lists_every_subcommand() {
    let text = ok(&["--help"]);
    for c in ["generate", "train", "eval", "bench", "scale", "export-fig"] {
        assert!(text.contains(c), "{c}");
    }
    assert!(ok(&["train", "--help"]).contains("--no-early-stop"));
}
