use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use prosody_cli::main_with_args;
use prosody_core::data::{load_jsonl, UtteranceRecord};
use prosody_core::eval::pooled_std;
use serde_json::Value;
use tempfile::TempDir;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["prosody"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny corpus with all three heads trained on it, shared by the tests below.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn corpus(&self) -> PathBuf {
        self.dir.path().join("corpus")
    }

    fn ckpt(&self, model: &str) -> PathBuf {
        self.dir.path().join(model)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        let cfg = tiny_config();
        assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&f.corpus())]), 0);
        for m in ["l2", "flow", "diff"] {
            let code = run(&[
                "train",
                "--config",
                s(&cfg),
                "--corpus",
                s(&f.corpus()),
                "--model",
                m,
                "--out",
                s(&f.ckpt(m)),
            ]);
            assert_eq!(code, 0, "{m}");
        }
        f
    })
}

fn sample(f: &Fixture, model: &str, extra: &[&str], out: &Path) -> Vec<UtteranceRecord> {
    let ckpt = f.ckpt(model);
    let corpus = f.corpus();
    let mut args = vec!["sample", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--out", s(out)];
    args.extend_from_slice(extra);
    assert_eq!(run(&args), 0);
    load_jsonl(out).unwrap()
}

fn log_f0_std(recs: &[UtteranceRecord]) -> f64 {
    let v: Vec<f64> = recs.iter().flat_map(|r| r.log_f0.iter().copied()).collect();
    pooled_std(&v).unwrap()
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&a)]), 0);
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&b)]), 0);
    for (split, n) in [("train", 100), ("dev", 10), ("test", 20)] {
        let name = format!("{split}.jsonl");
        assert_eq!(load_jsonl::<UtteranceRecord>(&a.join(&name)).unwrap().len(), n);
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["data"]["n_train"], 100);

    let c = dir.path().join("c");
    assert_eq!(
        run(&["gen-data", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]),
        0
    );
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(c.join("train.jsonl")).unwrap()
    );
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(
        run(&["gen-data", "--config", "/nonexistent/config.json", "--out", s(&out)]),
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"flow": {"n_steps": 0}}"#).unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&out)]), 2);
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["gen-data", "--config", s(&bad), "--out", s(&out)]), 2);
}

#[test]
fn every_head_lowers_its_loss() {
    let f = fixture();
    for m in ["l2", "flow", "diff"] {
        let csv = fs::read_to_string(f.ckpt(m).join("loss.csv")).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        let expected = if m == "diff" {
            "step,loss,score_term,l1_term"
        } else {
            "step,loss"
        };
        assert_eq!(header, expected);
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 150);
        assert!(
            rows.last().unwrap()[1] < rows[0][1],
            "{m}: {} -> {}",
            rows[0][1],
            rows.last().unwrap()[1]
        );
        let prov: Value = serde_json::from_slice(&fs::read(f.ckpt(m).join("provenance.json")).unwrap()).unwrap();
        assert_eq!(prov["model"], m);
        assert_eq!(prov["seed"], 7);
    }
}

#[test]
fn retraining_reproduces_the_checkpoint_bitwise() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("flow");
    let cfg = tiny_config();
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&f.corpus()),
            "--model",
            "flow",
            "--out",
            s(&again)
        ]),
        0
    );
    for file in [
        "weights.bin",
        "adam_m.bin",
        "adam_v.bin",
        "manifest.json",
        "model.json",
        "loss.csv",
        "provenance.json",
    ] {
        assert_eq!(
            fs::read(f.ckpt("flow").join(file)).unwrap(),
            fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn unknown_model_is_a_usage_error() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let out = dir.path().join("x");
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&f.corpus()),
            "--model",
            "gan",
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&f.corpus()),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn diverging_training_exits_with_the_numeric_code() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    let mut v: Value = serde_json::from_slice(&fs::read(tiny_config()).unwrap()).unwrap();
    v["training"]["lr"] = Value::from(1e300);
    v["training"]["clip"] = Value::from(1e300);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = dir.path().join("x");
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&f.corpus()),
            "--model",
            "l2",
            "--out",
            s(&out)
        ]),
        4
    );
}

#[test]
fn frame_task_flow_trains_on_eight_dims() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("frames.json");
    let mut v: Value = serde_json::from_slice(&fs::read(tiny_config()).unwrap()).unwrap();
    v["task"] = Value::from("frames");
    v["training"]["steps"] = Value::from(40);
    fs::write(&cfg, v.to_string()).unwrap();
    let corpus = dir.path().join("corpus");
    let ckpt = dir.path().join("flow");
    assert_eq!(run(&["gen-data", "--config", s(&cfg), "--out", s(&corpus)]), 0);
    assert_eq!(
        run(&[
            "train",
            "--config",
            s(&cfg),
            "--corpus",
            s(&corpus),
            "--model",
            "flow",
            "--out",
            s(&ckpt)
        ]),
        0
    );
    let model = prosody_core::model::Model::load(&ckpt).unwrap();
    assert_eq!(model.config.target_dim(), 8);
    // each coupling step transforms one half of four features from the other
    let w = model.params.get("flow.0.out.weight").unwrap();
    assert_eq!(w.shape()[1], 8);
    let out = dir.path().join("gen.jsonl");
    assert_eq!(
        run(&["sample", "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--out", s(&out)]),
        2
    );
}

#[test]
fn l2_sampling_ignores_seed_tau_and_draws() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = sample(f, "l2", &["--seed", "1", "--tau", "0.1"], &dir.path().join("a.jsonl"));
    let b = sample(
        f,
        "l2",
        &["--seed", "2", "--tau", "0.9", "--draws", "3"],
        &dir.path().join("b.jsonl"),
    );
    assert_eq!(a, b);
    assert_eq!(a.len(), 20);
}

#[test]
fn flow_at_zero_temperature_ignores_the_seed() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = sample(f, "flow", &["--seed", "1", "--tau", "0"], &dir.path().join("a.jsonl"));
    let b = sample(f, "flow", &["--seed", "2", "--tau", "0"], &dir.path().join("b.jsonl"));
    assert_eq!(a, b);
    let c = sample(f, "flow", &["--seed", "2", "--tau", "0.5"], &dir.path().join("c.jsonl"));
    assert_ne!(a, c);
}

#[test]
fn higher_temperature_spreads_flow_samples() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let lo = sample(
        f,
        "flow",
        &["--tau", "0.2", "--draws", "5"],
        &dir.path().join("lo.jsonl"),
    );
    let hi = sample(
        f,
        "flow",
        &["--tau", "0.8", "--draws", "5"],
        &dir.path().join("hi.jsonl"),
    );
    assert_eq!(lo.len(), 100);
    assert!(log_f0_std(&hi) > log_f0_std(&lo));
}

#[test]
fn sampling_details() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    assert_eq!(
        run(&[
            "sample",
            "--ckpt",
            s(&f.ckpt("diff")),
            "--corpus",
            s(&f.corpus()),
            "--out",
            s(&out),
            "--tau",
            "-0.5"
        ]),
        2
    );
    let seq = sample(f, "diff", &["--draws", "2"], &out);
    let par = sample(f, "diff", &["--draws", "2", "--parallel"], &dir.path().join("p.jsonl"));
    assert_eq!(seq, par);
    assert_eq!(seq.len(), 40);
    assert!(seq.iter().all(|r| r.duration.iter().all(|&d| d >= 1)));
    let side: Value = serde_json::from_slice(&fs::read(dir.path().join("d.provenance.json")).unwrap()).unwrap();
    assert_eq!(side["tau"], 0.8);
    assert_eq!(side["draws"], 2);
    assert_eq!(side["checkpoint"]["model"], "diff");
}

#[test]
fn eval_self_comparison_and_mismatch() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.jsonl");
    fs::copy(f.corpus().join("test.jsonl"), &copy).unwrap();
    let flow = dir.path().join("flow.jsonl");
    sample(f, "flow", &[], &flow);
    let report = dir.path().join("report.json");
    assert_eq!(
        run(&[
            "eval",
            "--oracle",
            s(&f.corpus()),
            "--generated",
            s(&copy),
            s(&flow),
            "--out",
            s(&report)
        ]),
        0
    );
    let rep: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(rep["models"]["copy"]["jsd_logf0"].as_f64().unwrap() < 1e-9);
    assert!(rep["models"]["copy"]["jsd_dur"].as_f64().unwrap() < 1e-9);
    assert_eq!(rep["models"]["copy"]["std_logf0"], rep["oracle"]["std_logf0"]);
    assert!(rep["models"]["flow"]["hist_logf0"]["edges"].as_array().unwrap().len() == 65);
    assert_eq!(rep["provenance"]["generated"]["flow"]["provenance"]["model"], "flow");
    let table = fs::read_to_string(report.with_extension("txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 6));

    assert_eq!(
        run(&[
            "eval",
            "--oracle",
            s(&f.corpus()),
            "--split",
            "dev",
            "--generated",
            s(&flow),
            "--out",
            s(&report)
        ]),
        5
    );
}

#[test]
fn sweep_reports_both_families_on_the_default_grid() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.json");
    let code = run(&[
        "sweep-tau",
        "--ckpt",
        s(&f.ckpt("flow")),
        s(&f.ckpt("diff")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let rep: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    for m in ["flow", "diff"] {
        let taus: Vec<f64> = rep["models"][m]["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["tau"].as_f64().unwrap())
            .collect();
        assert_eq!(taus, vec![0.2, 0.4, 0.6, 0.8]);
        assert!(rep["models"][m]["std_logf0_range"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(
        run(&[
            "sweep-tau",
            "--ckpt",
            s(&f.ckpt("l2")),
            "--corpus",
            s(&f.corpus()),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_prosody");
    let st = Command::new(bin)
        .args(["gen-data", "--config", "/nonexistent.json", "--out", "/tmp/unused"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
    let st = Command::new(bin).arg("--help").output().unwrap();
    assert!(st.status.success());
    assert!(String::from_utf8_lossy(&st.stdout).contains("sweep-tau"));
}
