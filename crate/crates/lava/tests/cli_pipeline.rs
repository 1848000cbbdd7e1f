//! Drives the installed binary through the whole pipeline: data
//! generation, teacher training, distillation, student training, decoding,
//! evaluation, benchmarking, and the gradient self-check.

use serde_json::Value;
use std::path::Path;
use std::process::Command;

fn lava(args: &[&str]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_lava"))
        .args(args)
        .output()
        .expect("binary runs");
    let code = out.status.code().unwrap_or(-1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let value = if stdout.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&stdout).unwrap_or_else(|e| {
            panic!(
                "stdout is not json ({e}):\n{stdout}\nstderr:\n{}",
                String::from_utf8_lossy(&out.stderr)
            )
        })
    };
    (code, value)
}

fn ok(args: &[&str]) -> Value {
    let (code, value) = lava(args);
    assert_eq!(code, 0, "command failed: {args:?}\n{value}");
    value
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();
    let data = p("data");

    let gen = ok(&[
        "gen-data", "--task", "copy", "--pairs", "40", "--min-len", "2", "--max-len", "6",
        "--vocab-size", "16", "--seed", "1", "--out", &data,
    ]);
    assert_eq!(gen["pairs"], 40);
    let src = gen["source"].as_str().unwrap().to_string();
    let tgt = gen["target"].as_str().unwrap().to_string();
    let vocab = gen["vocab"].as_str().unwrap().to_string();
    assert!(Path::new(&src).exists() && Path::new(&tgt).exists() && Path::new(&vocab).exists());

    let tiny = [
        "--d-model", "8", "--n-heads", "2", "--d-ff", "16", "--blocks", "1",
        "--rel-clip", "2", "--max-len", "10", "--dropout", "0.0",
    ];
    let train_common = [
        "--epochs", "1", "--batch-size", "8", "--warmup-steps", "4",
        "--dev-fraction", "0.1", "--average-best", "1", "--seed", "7",
    ];

    let teacher_ckpt = p("teacher.ckpt");
    let mut args: Vec<&str> = vec![
        "train-teacher", "--src", &src, "--tgt", &tgt, "--vocab", &vocab, "--out", &teacher_ckpt,
    ];
    args.extend(tiny);
    args.extend(train_common);
    let summary = ok(&args);
    assert_eq!(summary["epochs"], 1);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());

    let distilled = p("distilled");
    let d = ok(&[
        "distill", "--teacher", &teacher_ckpt, "--src", &src, "--tgt", &tgt,
        "--out", &distilled, "--beam", "2",
    ]);
    assert_eq!(d["pairs"], 40);
    assert!(d["changed_fraction"].as_f64().unwrap() <= 1.0);

    let nat_ckpt = p("nat.ckpt");
    let log1 = p("nat1.jsonl");
    let mut args: Vec<&str> = vec![
        "train-nat", "--src", &src, "--tgt", &tgt, "--vocab", &vocab, "--out", &nat_ckpt,
        "--la", "1,1", "--va", "on", "--kd", "on", "--kd-beam", "2",
        "--init-encoder", "on", "--teacher", &teacher_ckpt,
        "--sampling", "dss", "--alpha", "10", "--metrics-log", &log1,
    ];
    args.extend(tiny);
    args.extend(train_common);
    let summary = ok(&args);
    assert_eq!(summary["epochs"], 1);
    assert_eq!(summary["metrics"].as_array().unwrap().len(), 1);

    // identical seeds reproduce the metrics stream and the checkpoint bytes
    let nat_ckpt2 = p("nat2.ckpt");
    let log2 = p("nat2.jsonl");
    let mut args: Vec<&str> = vec![
        "train-nat", "--src", &src, "--tgt", &tgt, "--vocab", &vocab, "--out", &nat_ckpt2,
        "--la", "1,1", "--va", "on", "--kd", "on", "--kd-beam", "2",
        "--init-encoder", "on", "--teacher", &teacher_ckpt,
        "--sampling", "dss", "--alpha", "10", "--metrics-log", &log2,
    ];
    args.extend(tiny);
    args.extend(train_common);
    ok(&args);
    assert_eq!(
        std::fs::read_to_string(&log1).unwrap(),
        std::fs::read_to_string(&log2).unwrap(),
        "seeded training must log identical metrics"
    );
    assert_eq!(
        std::fs::read(&nat_ckpt).unwrap(),
        std::fs::read(&nat_ckpt2).unwrap(),
        "seeded training must reproduce the checkpoint bitwise"
    );

    let dec = ok(&[
        "decode", "--model", &nat_ckpt, "--input", &src,
        "--strategy", "dynamic", "--threshold", "0.5", "--max-rounds", "4",
    ]);
    let sentences = dec["sentences"].as_array().unwrap();
    assert_eq!(sentences.len(), 40);
    assert!(sentences[0]["tokens"].as_array().unwrap().len() >= 1);
    assert!(sentences[0]["latency_ms"].as_f64().unwrap() > 0.0);

    let dec = ok(&[
        "decode", "--model", &nat_ckpt, "--input", &src,
        "--strategy", "npd", "--candidates", "3", "--teacher", &teacher_ckpt,
    ]);
    assert_eq!(dec["sentences"][0]["candidates_scored"], 3);

    let eval = ok(&[
        "eval", "--model", &nat_ckpt, "--src", &src, "--tgt", &tgt, "--strategy", "greedy",
    ]);
    assert!(eval["bleu"].as_f64().unwrap().is_finite());
    assert!(eval["exact_match"].as_f64().unwrap() <= 1.0);

    let bench = ok(&[
        "bench", "--model", &nat_ckpt, "--teacher", &teacher_ckpt, "--src", &src, "--tgt", &tgt,
        "--strategies", "greedy,npd,at-beam", "--warmup", "1",
        "--candidates", "2", "--samples", "2", "--limit", "5",
    ]);
    assert_eq!(bench["sentences"], 5);
    let rows = bench["strategies"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(bench["at_mean_latency_ms"].as_f64().unwrap() > 0.0);
    for row in rows {
        assert!(row["speedup_vs_at"].as_f64().unwrap() > 0.0);
    }

    let gc = ok(&["grad-check", "--seed", "3"]);
    assert_eq!(gc["ok"], true);
    assert!(gc["worst"].as_f64().unwrap() < 1e-6);
}

#[test]
fn config_file_drives_a_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    let out = dir.path().join("corpus");
    std::fs::write(
        &cfg,
        "task = reverse\npairs = 12\nmin-len = 2\nmax-len = 5\nvocab-size = 16\nseed = 5\n",
    )
    .unwrap();
    let value = ok(&[
        "gen-data",
        "--config",
        &cfg.display().to_string(),
        "--out",
        &out.display().to_string(),
        "--pairs",
        "9",
    ]);
    // config applies, explicit flag wins
    assert_eq!(value["task"], "reverse");
    assert_eq!(value["pairs"], 9);
    let src = std::fs::read_to_string(out.join("source.txt")).unwrap();
    assert_eq!(src.lines().count(), 9);
}

#[test]
fn usage_errors_exit_with_two() {
    let (code, _) = lava(&["decode", "--model", "/nope", "--input", "/nope", "--strategy", "warp"]);
    assert_eq!(code, 2);
    let (code, _) = lava(&["nonsense"]);
    assert_eq!(code, 2);
}
