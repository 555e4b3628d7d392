mod common;

use common::{constant_stream, data, hand, jsonl, read, s, xdex};
use serde_json::Value;

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(f).collect()
}

/// Synthetic dataset plus a basis with `k` components, in `dir`.
fn basis(dir: &std::path::Path, n: usize, k: usize) -> std::path::PathBuf {
    let poses = dir.join("poses.bin");
    let out = dir.join("basis.json");
    xdex(["synth-dataset", "--n", &n.to_string(), "--rank", "5", "--out", s(&poses)]).ok();
    xdex(["eigengrasp", "--dataset", s(&poses), "--k", &k.to_string(), "--out", s(&out)]).ok();
    out
}

#[test]
fn two_row_csv_gives_closed_form_basis() {
    let dir = tempfile::tempdir().unwrap();
    let a: Vec<f64> = (0..45).map(|i| 0.01 * i as f64 - 0.2).collect();
    let b: Vec<f64> = (0..45).map(|i| 0.3 * ((i * 7 % 11) as f64 / 11.0) - 0.1).collect();
    let row = |r: &[f64]| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    let csv = dir.path().join("two.csv");
    std::fs::write(&csv, format!("{}\n{}\n", row(&a), row(&b))).unwrap();
    let out = dir.path().join("basis.json");
    let summary = xdex(["eigengrasp", "--dataset", s(&csv), "--k", "1", "--out", s(&out)]).ok().json();
    assert_eq!(summary["k"], 1);

    let basis: Value = serde_json::from_slice(&read(&out)).unwrap();
    let d: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
    let norm2: f64 = d.iter().map(|v| v * v).sum();
    let eig = floats(&basis["eigenvalues"]);
    assert!((eig[0] - norm2 / 4.0).abs() < 1e-10, "{} vs {}", eig[0], norm2 / 4.0);
    let comp = floats(&basis["components"]);
    let cos: f64 = comp.iter().zip(&d).map(|(c, v)| c * v).sum::<f64>() / norm2.sqrt();
    assert!((cos.abs() - 1.0).abs() < 1e-10);
    let mean = floats(&basis["mean"]);
    for i in 0..45 {
        assert!((mean[i] - 0.5 * (a[i] + b[i])).abs() < 1e-12);
    }
    assert!(dir.path().join("basis.json.manifest.json").exists());
}

#[test]
fn eigengrasp_k_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let poses = dir.path().join("p.bin");
    xdex(["synth-dataset", "--n", "100", "--out", s(&poses)]).ok();
    let run = xdex(["eigengrasp", "--dataset", s(&poses), "--k", "46", "--out", s(&dir.path().join("b.json"))]);
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("out of range"));
}

#[test]
fn corrupt_magic_names_the_expected_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"XDEXJUNK\x01\x00\x00\x00").unwrap();
    let run = xdex(["eigengrasp", "--dataset", s(&bad), "--k", "1", "--out", s(&dir.path().join("b.json"))]);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("XDEXPOSE"), "{}", run.stderr);

    let basis = basis(dir.path(), 500, 3);
    let run = xdex([
        "retarget", "--basis", s(&basis), "--hand", s(&hand("four_finger")),
        "--weights", s(&bad), "--out", s(&dir.path().join("t.jsonl")),
    ]);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("XDEXWSTR"), "{}", run.stderr);
}

#[test]
fn truncated_csv_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let row = vec!["0.1"; 45].join(",");
    std::fs::write(&csv, format!("{row}\n{row}\n0.1,0.2\n")).unwrap();
    let run = xdex(["eigengrasp", "--dataset", s(&csv), "--k", "1", "--out", s(&dir.path().join("b.json"))]);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("line 3"), "{}", run.stderr);
}

#[test]
fn constant_stream_converges() {
    let dir = tempfile::tempdir().unwrap();
    let basis = basis(dir.path(), 1000, 4);
    let stream = dir.path().join("w.csv");
    constant_stream(&stream, &[0.4, -0.2, 0.1, 0.05], 15);
    for smoothness in ["0", "0.001"] {
        let out = dir.path().join(format!("t{smoothness}.jsonl"));
        xdex([
            "retarget", "--basis", s(&basis), "--hand", s(&hand("four_finger")),
            "--weights", s(&stream), "--out", s(&out), "--smoothness", smoothness,
        ])
        .ok();
        let records = jsonl(&out);
        assert_eq!(records.len(), 15);
        let last = &records[14];
        assert!(f(&last["delta"]) < 1e-6, "smoothness {smoothness}: delta {}", last["delta"]);
        assert!(last.get("elapsed_us").is_none());
        assert_eq!(last["t"], 14);
    }
}

#[test]
fn objective_flag_routes_to_distinct_objectives() {
    let dir = tempfile::tempdir().unwrap();
    let basis = basis(dir.path(), 1000, 3);
    let stream = dir.path().join("w.csv");
    std::fs::write(&stream, "0.5,0.1,-0.3\n-0.2,0.4,0.1\n").unwrap();
    let mut finals = Vec::new();
    for objective in ["position", "dexpilot", "vector"] {
        let out = dir.path().join(format!("{objective}.jsonl"));
        xdex([
            "retarget", "--basis", s(&basis), "--hand", s(&hand("five_finger")), "--weights", s(&stream),
            "--out", s(&out), "--objective", objective, "--timing",
        ])
        .ok();
        let records = jsonl(&out);
        assert!(records.iter().all(|r| r["objective"].is_number() && r["elapsed_us"].is_number()));
        finals.push(f(&records[1]["objective"]));
    }
    assert!(finals[0] != finals[1] && finals[1] != finals[2], "{finals:?}");

    let run = xdex([
        "retarget", "--basis", s(&basis), "--hand", s(&hand("five_finger")), "--weights", s(&stream),
        "--out", s(&dir.path().join("x.jsonl")), "--objective", "cosine",
    ]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("dexpilot"), "{}", run.stderr);
}

#[test]
fn retarget_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let basis = basis(dir.path(), 500, 3);
    let stream = dir.path().join("w.csv");
    constant_stream(&stream, &[0.1, 0.2], 3);
    let out = dir.path().join("t.jsonl");
    let four = hand("four_finger");
    let base = ["retarget", "--basis", s(&basis), "--hand", s(&four), "--weights", s(&stream), "--out", s(&out)];

    let run = xdex(base);
    assert_eq!(run.code, 3, "k mismatch: {}", run.stderr);
    assert!(run.stderr.contains("expected 3, got 2"), "{}", run.stderr);

    constant_stream(&stream, &[0.1, 0.2, 0.3], 3);
    let run = xdex(base.iter().copied().chain(["--backend", "surrogate"]));
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("--surrogate"));

    let run = xdex(base.iter().copied().chain(["--smoothness", "-1"]));
    assert_eq!(run.code, 2);
    assert!(!out.exists());
}

#[test]
fn surrogate_train_smoke_and_backend() {
    let dir = tempfile::tempdir().unwrap();
    let poses = dir.path().join("poses.bin");
    xdex(["synth-dataset", "--n", "5000", "--out", s(&poses), "--seed", "4"]).ok();
    let train = |name: &str| {
        let out = dir.path().join(name);
        let report = xdex([
            "train-surrogate", "--hand", s(&hand("four_finger")), "--dataset", s(&poses),
            "--out", s(&out), "--epochs", "20", "--seed", "9",
        ])
        .ok()
        .json();
        (out, report)
    };
    let (weights, report) = train("a.json");
    let (again, _) = train("b.json");
    assert_eq!(read(&weights), read(&again));
    assert_eq!(read(&dir.path().join("a.json.loss.csv")), read(&dir.path().join("b.json.loss.csv")));

    let loss = String::from_utf8(read(&dir.path().join("a.json.loss.csv"))).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert!(lines.len() < 20 + 2);
    assert_eq!(lines[0], "epoch,train_mse,validation_mse");
    let train_mse = |l: &str| l.split(',').nth(1).unwrap().parse::<f64>().unwrap();
    assert!(train_mse(lines[lines.len() - 1]) < train_mse(lines[1]));
    assert_eq!(report["predictions_feasible"], true);
    assert_eq!(report["train"]["rows"], 4500);

    let manifest: Value = serde_json::from_slice(&read(&dir.path().join("a.json.manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train-surrogate");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);

    let basis = dir.path().join("basis.json");
    xdex(["eigengrasp", "--dataset", s(&poses), "--k", "5", "--out", s(&basis)]).ok();
    let stream = dir.path().join("w.csv");
    constant_stream(&stream, &[0.3, 0.1, 0.0, -0.1, 0.2], 4);
    let out = dir.path().join("t.jsonl");
    xdex([
        "retarget", "--basis", s(&basis), "--hand", s(&hand("four_finger")), "--weights", s(&stream),
        "--out", s(&out), "--backend", "surrogate", "--surrogate", s(&weights),
    ])
    .ok();
    let records = jsonl(&out);
    assert!(records.iter().all(|r| r.get("objective").is_none()));
    assert_eq!(f(&records[3]["delta"]), 0.0);

    let run = xdex([
        "retarget", "--basis", s(&basis), "--hand", s(&hand("five_finger")), "--weights", s(&stream),
        "--out", s(&out), "--backend", "surrogate", "--surrogate", s(&weights),
    ]);
    assert_eq!(run.code, 3, "{}", run.stderr);

    let eval = xdex([
        "eval-surrogate", "--hand", s(&hand("four_finger")), "--weights", s(&weights), "--dataset", s(&poses),
    ])
    .ok()
    .json();
    assert_eq!(eval["errors"]["rows"], 5000);
    assert!(f(&eval["errors"]["mean_tip_error"]) < 0.05);
}

#[test]
fn binary_weights_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let poses = dir.path().join("poses.csv");
    xdex(["synth-dataset", "--n", "300", "--out", s(&poses)]).ok();
    let weights = dir.path().join("w.bin");
    xdex([
        "train-surrogate", "--hand", s(&hand("four_finger")), "--dataset", s(&poses), "--out", s(&weights),
        "--epochs", "2", "--hidden", "16,16",
    ])
    .ok();
    assert_eq!(&read(&weights)[..8], b"XDEXMLP1");
    let eval = dir.path().join("eval.json");
    xdex([
        "eval-surrogate", "--hand", s(&hand("four_finger")), "--weights", s(&weights), "--dataset", s(&poses),
        "--out", s(&eval),
    ])
    .ok();
    assert!(dir.path().join("eval.json.manifest.json").exists());
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let run = xdex([
        "train-surrogate", "--hand", s(&hand("four_finger")), "--dataset", s(&empty),
        "--out", s(&dir.path().join("w.json")), "--epochs", "1",
    ]);
    assert_eq!(run.code, 3, "{}", run.stderr);
    assert!(!dir.path().join("w.json").exists());
}

#[test]
fn golden_rollout_matches_scalar_reference() {
    let expected: Value = serde_json::from_slice(&read(&data("golden_rollout.expected.json"))).unwrap();
    for mode in ["test", "train"] {
        let got = xdex(["score", "--rollout", s(&data("golden_rollout.jsonl")), "--mode", mode]).ok().json();
        let want = &expected[mode];
        assert!((f(&got["total_reward"]) - f(&want["total_reward"])).abs() < 1e-9, "{mode}: {got} vs {want}");
        assert_eq!(got["success"], want["success"]);
        assert_eq!(got["steps"], want["steps"]);
    }
    assert_eq!(expected["test"]["success"], true);
    assert_eq!(expected["train"]["success"], false);
}

fn lift_record(z: f64) -> String {
    serde_json::json!({
        "palm": [0.0, 0.0, z + 0.08],
        "tips": [[0.04, 0.0, z], [-0.04, 0.0, z]],
        "object_center": [0.0, 0.0, z],
        "object_xy0": [0.0, 0.0],
    })
    .to_string()
}

#[test]
fn score_mode_decides_success_on_a_45_step_hold() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hold.jsonl");
    std::fs::write(&path, (0..45).map(|_| lift_record(0.6) + "\n").collect::<String>()).unwrap();
    let test = xdex(["score", "--rollout", s(&path), "--mode", "test"]).ok().json();
    let train = xdex(["score", "--rollout", s(&path), "--mode", "train"]).ok().json();
    assert_eq!(test["success"], true);
    assert_eq!(test["steps"], 30);
    assert_eq!(train["success"], false);
    assert_eq!(train["steps"], 45);

    let out = dir.path().join("score.json");
    xdex(["score", "--rollout", s(&path), "--out", s(&out)]).ok();
    let written: Value = serde_json::from_slice(&read(&out)).unwrap();
    assert_eq!(written, test);
}

#[test]
fn score_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(xdex(["score", "--rollout", s(&empty)]).code, 3);

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, format!("{}\n{{\"palm\": [0, 0]}}\n", lift_record(0.3))).unwrap();
    let run = xdex(["score", "--rollout", s(&bad)]);
    assert_eq!(run.code, 3);
    assert!(run.stderr.contains("line 2"), "{}", run.stderr);

    assert_eq!(xdex(["score", "--rollout", s(&empty), "--mode", "eval"]).code, 2);
    assert_eq!(xdex(["score", "--rollout", s(&dir.path().join("missing.jsonl"))]).code, 3);
}

#[test]
fn synth_dataset_properties() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.bin");
    xdex(["synth-dataset", "--n", "1", "--out", s(&one)]).ok();
    let bytes = read(&one);
    assert_eq!(&bytes[..8], b"XDEXPOSE");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 45);
    assert_eq!(bytes.len(), 16 + 45 * 4);

    let big = dir.path().join("big.bin");
    xdex(["synth-dataset", "--n", "10000", "--rank", "5", "--out", s(&big), "--seed", "11"]).ok();
    let summary = xdex(["eigengrasp", "--dataset", s(&big), "--k", "5", "--out", s(&dir.path().join("b.json"))])
        .ok()
        .json();
    assert!(f(&summary["explained_ratio"]) >= 0.9999, "{}", summary["explained_ratio"]);

    let again = dir.path().join("again.bin");
    xdex(["synth-dataset", "--n", "10000", "--rank", "5", "--out", s(&again), "--seed", "11"]).ok();
    assert_eq!(read(&big), read(&again));

    assert_eq!(xdex(["synth-dataset", "--n", "0", "--out", s(&one)]).code, 2);
    assert_eq!(xdex(["synth-dataset", "--n", "5", "--rank", "46", "--out", s(&one)]).code, 2);
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = ["flag", "env", "default"].iter().map(|n| dir.path().join(format!("{n}.csv"))).collect();
    xdex(["synth-dataset", "--n", "3", "--out", s(&paths[0]), "--seed", "7"]).ok();
    let env = std::process::Command::new(env!("CARGO_BIN_EXE_xdex"))
        .args(["synth-dataset", "--n", "3", "--out", s(&paths[1])])
        .env("CROSSDEX_SEED", "7")
        .status()
        .unwrap();
    assert!(env.success());
    xdex(["synth-dataset", "--n", "3", "--out", s(&paths[2])]).ok();
    assert_eq!(read(&paths[0]), read(&paths[1]));
    assert_ne!(read(&paths[0]), read(&paths[2]));
    let manifest: Value = serde_json::from_slice(&read(&dir.path().join("default.csv.manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn fk_reports_tips_and_mount_shift() {
    let h = hand("four_finger");
    let base = xdex(["fk", "--hand", s(&h), "--jacobian"]).ok().json();
    assert_eq!(base["tips"].as_array().unwrap().len(), 4);
    assert_eq!(base["tips"][0]["finger"], "thumb");
    assert_eq!(base["jacobian"].as_array().unwrap().len(), 15);

    let zero = xdex(["fk", "--hand", s(&h), "--jacobian", "--randomize-mount", "0"]).ok().json();
    assert_eq!(zero, base);

    let moved = xdex(["fk", "--hand", s(&h), "--randomize-mount", "0.01", "--seed", "3"]).ok().json();
    let shift: Vec<f64> = (0..3).map(|i| f(&moved["palm"][i]) - f(&base["palm"][i])).collect();
    assert!(shift.iter().any(|v| v.abs() > 1e-6));
    for tip in 0..4 {
        for i in 0..3 {
            let d = f(&moved["tips"][tip]["position"][i]) - f(&base["tips"][tip]["position"][i]);
            assert!((d - shift[i]).abs() < 1e-12);
        }
    }

    assert_eq!(xdex(["fk", "--hand", s(&h), "--q", "0,0,0"]).code, 3);
    assert_eq!(xdex(["fk", "--hand", s(&hand("nope"))]).code, 3);
}
