use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn outage(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_outage"))
        .args(args)
        .current_dir(cwd)
        .env("OUTAGE_LOG", "error")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = outage(args, cwd);
    assert!(
        out.status.success(),
        "outage {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn step_by_step_commands_agree_with_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["gen-corpus", "--seed", "3", "--n", "2", "--out", "corpus"],
        d,
    );
    ok(&["run", "--corpus", "corpus", "--out", "all"], d);

    for id in ["mixed-s3-00", "mixed-s3-01"] {
        let trace = format!("corpus/{id}.meta.json");
        let gt = format!("step/{id}.gt.json");
        ok(
            &[
                "build-gt",
                "--trace",
                &trace,
                "--playbooks",
                "corpus/playbooks",
                "--out",
                &gt,
            ],
            d,
        );
        ok(
            &[
                "replay",
                "--trace",
                &trace,
                "--playbooks",
                "corpus/playbooks",
                "--out",
                "step",
            ],
            d,
        );
        assert_eq!(
            json(&d.join(&gt)),
            json(&d.join(format!("all/{id}.gt.json")))
        );
        let recs = format!("{id}.recs.jsonl");
        assert_eq!(
            std::fs::read(d.join("step").join(&recs)).unwrap(),
            std::fs::read(d.join("all").join(&recs)).unwrap()
        );
    }
    let stdout = ok(
        &[
            "evaluate",
            "--recs",
            "step",
            "--gt",
            "step",
            "--coverage",
            "step/coverage.jsonl",
            "--playbooks",
            "corpus/playbooks",
            "--out",
            "step/report.json",
        ],
        d,
    );
    assert!(stdout.contains("2 traces"), "{stdout}");

    let (step, all) = (
        json(&d.join("step/report.json")),
        json(&d.join("all/report.json")),
    );
    for key in ["traces", "counts", "g1", "g2"] {
        assert_eq!(step[key], all[key], "{key}");
    }
    assert_eq!(step["embedding_export_ref"], "step/coverage.jsonl");
    assert_eq!(
        std::fs::read(d.join("step/coverage.jsonl")).unwrap(),
        std::fs::read(d.join("all/coverage.jsonl")).unwrap()
    );

    ok(
        &[
            "export-coverage",
            "--recs",
            "step",
            "--gt",
            "step",
            "--out",
            "bare.jsonl",
        ],
        d,
    );
    let text = std::fs::read_to_string(d.join("bare.jsonl")).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(
        header["n_rows"].as_u64().unwrap() as usize,
        text.lines().count() - 1
    );
}

#[test]
fn invalid_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-corpus",
            "--seed",
            "1",
            "--n",
            "1",
            "--profile",
            "thermal",
            "--out",
            "corpus",
        ],
        d,
    );
    let out = outage(
        &[
            "run",
            "--corpus",
            "corpus",
            "--threshold",
            "1.5",
            "--out",
            "x",
        ],
        d,
    );
    assert!(!out.status.success());
    let out = outage(&["gen-corpus", "--profile", "nonsense", "--out", "y"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn distill_then_consolidate_a_memory_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "gen-corpus",
            "--seed",
            "42",
            "--n",
            "1",
            "--profile",
            "thermal",
            "--out",
            "corpus",
        ],
        d,
    );
    ok(
        &[
            "distill",
            "--playbooks",
            "corpus/playbooks",
            "--memory",
            "mem",
        ],
        d,
    );
    ok(
        &[
            "replay",
            "--trace",
            "corpus/thermal-s42-00.meta.json",
            "--memory-snapshot",
            "mem",
            "--memory-out",
            "mem2",
            "--out",
            "r",
        ],
        d,
    );
    let first: Value = serde_json::from_str(&ok(&["consolidate", "--memory", "mem2"], d)).unwrap();
    let again: Value = serde_json::from_str(&ok(&["consolidate", "--memory", "mem2"], d)).unwrap();
    assert!(!first["created"].as_array().unwrap().is_empty(), "{first}");
    assert!(again["created"].as_array().unwrap().is_empty(), "{again}");
}
