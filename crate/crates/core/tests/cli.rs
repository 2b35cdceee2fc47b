mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use extsub::adapter::{assemble, compose_delta, OrientationPolicy, SuffixConvention};
use extsub::{DType, DeltaModel, TensorStore};
use serde_json::Value;

fn extsub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_extsub")).args(args).output().expect("run binary")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_code(out: &Output) -> (i32, String) {
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    (out.status.code().unwrap(), v["code"].as_str().unwrap().to_string())
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(dtype: DType) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_store(&lora_store(1, 3, 24, 20, 4, dtype), &dir.path().join("expert.safetensors"));
        write_store(&lora_store(2, 3, 24, 20, 4, dtype), &dir.path().join("anti.safetensors"));
        write_store(&lora_store(3, 3, 24, 20, 4, dtype), &dir.path().join("anti2.safetensors"));
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn composed(path: &Path) -> DeltaModel<f64> {
    let store = TensorStore::load(path).unwrap();
    compose_delta(&assemble(&store, &SuffixConvention::default(), OrientationPolicy::Auto).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert!(extsub(&["--help"]).status.success());
    assert!(extsub(&["--version"]).status.success());
}

#[test]
fn usage_error_exits_two() {
    let out = extsub(&["subtract", "--bogus"]);
    assert_eq!(err_code(&out), (2, "Usage".to_string()));
}

#[test]
fn lambda_zero_reproduces_expert() {
    let f = Fixture::new(DType::BF16);
    let out = extsub(&["subtract", "--expert", &f.s("expert.safetensors"), "--anti", &f.s("anti.safetensors"),
        "--lambda", "0", "-o", &f.s("out.safetensors")]);
    let summary = ok_json(&out);
    assert_eq!(summary["layers"], 3);
    assert_eq!(std::fs::read(f.path("out.safetensors")).unwrap(), std::fs::read(f.path("expert.safetensors")).unwrap());
}

#[test]
fn extract_then_direct_equals_ext() {
    let f = Fixture::new(DType::F64);
    let (expert, anti, def) = (f.s("expert.safetensors"), f.s("anti.safetensors"), f.s("def.safetensors"));
    let args = ["extract", "--expert", &expert, "--anti", &anti, "-o", &def, "--full", "--out-dtype", "f64"];
    ok_json(&extsub(&args));
    for lambda in ["1", "0.6"] {
        let direct = extsub(&["subtract", "--mode", "direct", "--lambda", lambda, "--expert", &f.s("expert.safetensors"),
            "--anti", &f.s("def.safetensors"), "-o", &f.s("two.safetensors"), "--full", "--out-dtype", "f64"]);
        ok_json(&direct);
        let ext = extsub(&["subtract", "--mode", "ext", "--lambda", lambda, "--expert", &f.s("expert.safetensors"),
            "--anti", &f.s("anti.safetensors"), "-o", &f.s("one.safetensors"), "--full", "--out-dtype", "f64"]);
        ok_json(&ext);
        assert!(composed(&f.path("one.safetensors")).bit_eq(&composed(&f.path("two.safetensors"))));
    }
}

#[test]
fn compose_single_step_matches_subtract() {
    let f = Fixture::new(DType::F32);
    ok_json(&extsub(&["subtract", "--mode", "direct", "--expert", &f.s("expert.safetensors"),
        "--anti", &f.s("anti.safetensors"), "-o", &f.s("sub.safetensors")]));
    let spec = r#"{"expert": "expert.safetensors", "steps": [{"mode": "direct", "anti": "anti.safetensors"}],
        "output": "comp.safetensors"}"#;
    std::fs::write(f.path("spec.json"), spec).unwrap();
    let summary = ok_json(&extsub(&["compose", &f.s("spec.json")]));
    assert_eq!(summary["steps"][0]["lambda"], 0.2);
    assert_eq!(std::fs::read(f.path("sub.safetensors")).unwrap(), std::fs::read(f.path("comp.safetensors")).unwrap());
}

#[test]
fn compose_two_steps_runs_in_order() {
    let f = Fixture::new(DType::F64);
    let spec = r#"{"expert": "expert.safetensors", "full": true,
        "steps": [{"mode": "ext", "anti": "anti.safetensors", "lambda": 0.5},
                  {"mode": "direct", "anti": "anti2.safetensors", "lambda": 0.3}],
        "output": "comp.safetensors"}"#;
    std::fs::write(f.path("spec.json"), spec).unwrap();
    let summary = ok_json(&extsub(&["compose", &f.s("spec.json")]));
    assert_eq!(summary["steps"].as_array().unwrap().len(), 2);

    let (e, a, a2) = (composed(&f.path("expert.safetensors")), composed(&f.path("anti.safetensors")),
        composed(&f.path("anti2.safetensors")));
    let (s1, _) = extsub::ext_sub(&e, &a, &extsub::UnlearnConfig::new(extsub::Mode::Ext, 0.5)).unwrap();
    let want = extsub::direct_subtract(&s1, &a2, 0.3).unwrap();
    let got = composed(&f.path("comp.safetensors"));
    for (k, m) in want.iter() {
        assert!(max_abs_diff(m, got.get(k).unwrap()) < 1e-12);
    }
}

#[test]
fn compose_empty_steps_rejected() {
    let f = Fixture::new(DType::F32);
    std::fs::write(f.path("spec.json"), r#"{"expert": "expert.safetensors", "steps": [], "output": "o.safetensors"}"#)
        .unwrap();
    assert_eq!(err_code(&extsub(&["compose", &f.s("spec.json")])), (1, "InvalidPipeline".into()));
    assert!(!f.path("o.safetensors").exists());
}

#[test]
fn error_codes() {
    let f = Fixture::new(DType::F32);
    let out = extsub(&["inspect", &f.s("missing.safetensors")]);
    assert_eq!(err_code(&out), (1, "IoFailure".into()));

    std::fs::write(f.path("bad.safetensors"), [200, 0, 0, 0, 0, 0, 0, 0, b'{']).unwrap();
    assert_eq!(err_code(&extsub(&["inspect", &f.s("bad.safetensors")])).1, "MalformedHeader");

    write_store(&lora_store(4, 2, 24, 20, 4, DType::F32), &f.path("short.safetensors"));
    let out = extsub(&["subtract", "--expert", &f.s("expert.safetensors"), "--anti", &f.s("short.safetensors"),
        "-o", &f.s("o.safetensors")]);
    assert_eq!(err_code(&out), (1, "KeySetMismatch".into()));

    let out = extsub(&["subtract", "--expert", &f.s("expert.safetensors"), "--anti", &f.s("anti.safetensors"),
        "--lambda", "-1", "-o", &f.s("o.safetensors")]);
    assert_eq!(err_code(&out), (1, "InvalidPipeline".into()));

    let out = extsub(&["truncate", &f.s("expert.safetensors"), "--rank", "50", "-o", &f.s("o.safetensors")]);
    assert_eq!(err_code(&out), (1, "RankTooLarge".into()));
}

#[test]
fn inspect_and_stats() {
    let f = Fixture::new(DType::F16);
    let report = ok_json(&extsub(&["inspect", &f.s("expert.safetensors")]));
    assert_eq!(report["layers"].as_object().unwrap().len(), 3);
    assert_eq!(report["passthrough"].as_array().unwrap().len(), 2);
    let layer = &report["layers"][layer_key(0)];
    assert_eq!((layer["rank"].as_u64(), layer["d"].as_u64(), layer["k"].as_u64()), (Some(4), Some(24), Some(20)));

    let stats = ok_json(&extsub(&["stats", "--expert", &f.s("expert.safetensors"), "--anti", &f.s("anti.safetensors")]));
    let l0 = &stats["layers"][layer_key(0)];
    assert_eq!(l0["rows"], 24);
    let hist: u64 = l0["cos_hist"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(hist, 24);
}

#[test]
fn truncate_reports_error() {
    let f = Fixture::new(DType::F64);
    let out = ok_json(&extsub(&["truncate", &f.s("expert.safetensors"), "--rank", "2", "-o", &f.s("t.safetensors")]));
    let l0 = &out["layers"][layer_key(0)];
    assert_eq!(l0["rank"], 2);
    assert!(l0["rel_frobenius_error"].as_f64().unwrap() > 0.0);
    let store = TensorStore::load(f.path("t.safetensors")).unwrap();
    let b = store.get(&format!("{}{B_SUFFIX}", layer_key(0))).unwrap();
    assert_eq!(b.shape(), &[24, 2]);
}

#[test]
fn repn_reports() {
    let f = Fixture::new(DType::F32);
    std::fs::write(f.path("gen.jsonl"), "{\"text\": \"a a a a a\"}\n{\"text\": \"a b c d\"}\n").unwrap();
    let out = ok_json(&extsub(&["repn", &f.s("gen.jsonl")]));
    assert_eq!(out["count"], 2);
    assert_eq!(out["mean"], 25.0);
    assert_eq!(out["max"], 50.0);
    assert_eq!(out["over_threshold_count"], 1);
    assert_eq!(out["over_threshold"], true);
}

#[test]
fn thread_count_does_not_change_output() {
    let f = Fixture::new(DType::F32);
    let mut outputs = Vec::new();
    for t in ["1", "3"] {
        let o = f.s(&format!("o{t}.safetensors"));
        ok_json(&extsub(&["--threads", t, "subtract", "--expert", &f.s("expert.safetensors"),
            "--anti", &f.s("anti.safetensors"), "-o", &o]));
        outputs.push(std::fs::read(o).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}
