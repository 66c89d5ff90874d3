use std::path::Path;
use std::process::{Command, Output};

use ernn_core::model::load_checkpoint;
use ernn_core::training::{load_wav, write_wav};
use serde_json::Value;

fn ernn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ernn"));
    c.env_remove("ERNN_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn synth(dir: &Path, pairs: usize, seconds: f64) {
    let out = run(ernn().args(["synth", "--pairs", &pairs.to_string(), "--seconds", &seconds.to_string(), "--seed", "3", "--out-dir"]).arg(dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_tiny(data: &Path, ckdir: &Path, extra: &[&str]) -> Output {
    run(ernn()
        .args(["train", "--ns", "8", "--nh", "4", "--k", "1", "--epochs", "2", "--batch-size", "2", "--segment-len", "2000", "--data"])
        .arg(data)
        .arg("--checkpoint-dir")
        .arg(ckdir)
        .args(extra))
}

#[test]
fn params_reports_exact_and_rounded_counts() {
    for (args, exact, rounded) in [
        (vec![], 329_476u64, "329k"),
        (vec!["--arch", "lstm2", "--ns", "256"], 1_117_697, "1.12M"),
        (vec!["--arch", "lstm2", "--ns", "512"], 3_808_001, "3.81M"),
        (vec!["--ns", "256", "--nh", "32", "--k", "1"], 214_562, "215k"),
    ] {
        let out = run(ernn().arg("params").args(&args));
        assert!(out.status.success());
        let v = &json_lines(&out)[0];
        assert_eq!(v["parameters"], exact);
        assert_eq!(v["rounded"], rounded);
    }
    let out = run(ernn().args(["params", "--arch", "lstm2", "--k", "3"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_2_and_names_path() {
    let out = run(ernn().args(["train", "--data", "/definitely/not/here"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here"));
}

#[test]
fn train_enhance_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3, 0.5);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = train_tiny(&data, &a, &["--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["summary"]["steps"], 4);
    assert!(train_tiny(&data, &b, &["--seed", "5"]).status.success());
    let fa = std::fs::read(a.join("final.ckpt")).unwrap();
    assert_eq!(fa, std::fs::read(b.join("final.ckpt")).unwrap());
    let ck = load_checkpoint(a.join("final.ckpt")).unwrap();
    assert_eq!(ck.model.config().seed, 5);

    let input = data.join("syn0000_noisy.wav");
    let n = load_wav(&input).unwrap().len();
    let off = tmp.path().join("off.wav");
    let on = tmp.path().join("on.wav");
    for (path, stream) in [(&off, false), (&on, true)] {
        let mut cmd = ernn();
        cmd.arg("enhance").arg("--checkpoint").arg(a.join("final.ckpt")).arg("--input").arg(&input).arg("--output").arg(path);
        if stream {
            cmd.args(["--stream", "--chunk", "100"]);
        }
        let out = run(&mut cmd);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json_lines(&out)[0]["samples"], n as u64);
    }
    let y0 = load_wav(&off).unwrap();
    let y1 = load_wav(&on).unwrap();
    assert_eq!(y0.len(), n);
    let max = y0.iter().zip(&y1).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
    assert!(max < 1e-5, "{max}");

    let silent = tmp.path().join("silent.wav");
    write_wav(&silent, &vec![0.0; 3000]).unwrap();
    let out_path = tmp.path().join("silent_out.wav");
    let out = run(ernn().arg("enhance").arg("--checkpoint").arg(a.join("final.ckpt")).arg("--input").arg(&silent).arg("--output").arg(&out_path));
    assert!(out.status.success());
    assert!(load_wav(&out_path).unwrap().iter().all(|&v| v == 0.0));

    let out = run(ernn().arg("evaluate").arg("--checkpoint").arg(a.join("final.ckpt")).arg("--data").arg(&data));
    assert!(out.status.success());
    let lines = json_lines(&out);
    assert_eq!(lines.len(), 4);
    assert!(lines[3]["summary"].is_object());
}

#[test]
fn seed_precedence_flag_file_env() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 0.3);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 11, "epochs": 1}"#).unwrap();

    let seed_of = |dir: &str, extra: &[&str], env: Option<&str>, config: bool| {
        let ck = tmp.path().join(dir);
        let mut cmd = ernn();
        if let Some(e) = env {
            cmd.env("ERNN_SEED", e);
        }
        if config {
            cmd.arg("--config").arg(&cfg);
        }
        cmd.args(["train", "--ns", "4", "--nh", "4", "--k", "1", "--batch-size", "1", "--segment-len", "1000", "--epochs", "1", "--data"])
            .arg(&data)
            .arg("--checkpoint-dir")
            .arg(&ck)
            .args(extra);
        let out = run(&mut cmd);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        load_checkpoint(ck.join("final.ckpt")).unwrap().model.config().seed
    };
    assert_eq!(seed_of("d", &[], None, false), 0);
    assert_eq!(seed_of("e", &[], Some("7"), false), 7);
    assert_eq!(seed_of("f", &[], Some("7"), true), 11);
    assert_eq!(seed_of("g", &["--seed", "2"], Some("7"), true), 2);

    std::fs::write(&cfg, r#"{"learning_rate": 1}"#).unwrap();
    let out = run(ernn().arg("--config").arg(&cfg).arg("params"));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = run(ernn().arg("gradcheck"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let v = &json_lines(&out)[0];
    assert_eq!(v["passed"], true);
    assert!(v["probes"].as_u64().unwrap() >= 200);
}

#[test]
fn bench_writes_three_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("bench.json");
    let out = run(ernn()
        .arg("--out")
        .arg(&report)
        .args(["bench", "--ns", "32", "--nh", "16", "--seconds", "10", "--reps", "1", "--trace-ns", "8", "--trace-nh", "4", "--trace-distance", "20"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    assert!(v["rtf"]["rtf"].as_f64().unwrap() > 0.0);
    for cell in ["ernn", "lstm", "vanilla"] {
        let csv = std::fs::read_to_string(tmp.path().join(format!("norms_{cell}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 21);
        if cell == "vanilla" {
            let last: f64 = rows[20].split(',').nth(1).unwrap().parse().unwrap();
            assert!(last < 1e-6, "{last}");
        }
    }
}
