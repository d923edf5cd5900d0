//! Black-box tests of the `avi` binary: exit codes, output formats, and
//! bitwise idempotence of seeded subcommands.

use std::path::Path;
use std::process::{Command, Output};

fn avi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avi"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn avi")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    std::fs::write(dir.join(name), contents).unwrap();
    name.to_string()
}

const CLOUD: &str = "# five surface samples\n0.30 0.30 0.10\n0.35 0.32 0.12\n0.40 0.30 0.15\n0.33 0.36 0.11\n0.38 0.34 0.13\n";

#[test]
fn help_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&avi(&["--help"], d)), 0);
    assert_eq!(code(&avi(&["icp", "--help"], d)), 0);

    let bad_subcommand = avi(&["frobnicate"], d);
    assert_eq!(code(&bad_subcommand), 1);
    assert!(!stderr(&bad_subcommand).is_empty());

    let missing_file = avi(&["voxelize", "no-such.xyz", "--out", "g.aviv"], d);
    assert_eq!(code(&missing_file), 1, "unreadable input is a usage error");
    assert!(!d.join("g.aviv").exists());

    let bad_box = avi(&["voxelize", &write(d, "c.xyz", CLOUD), "--box", "1,2,3", "--out", "g.aviv"], d);
    assert_eq!(code(&bad_box), 1);

    // A parseable but inverted box is still a bad argument value.
    let inverted = avi(
        &["voxelize", "c.xyz", "--box", "1,1,1,0,0,0", "--out", "g.aviv"],
        d,
    );
    assert_eq!(code(&inverted), 1);

    // Well-formed input the pipeline itself rejects: nothing to summarize.
    let empty = avi(&["summarize", &write(d, "empty.json", "[]")], d);
    assert_eq!(code(&empty), 2, "pipeline rejection is exit 2");
    assert!(!stderr(&empty).is_empty());
}

#[test]
fn table1_prints_the_four_configs() {
    let dir = tempfile::tempdir().unwrap();
    let out = avi(&["locquant", "table1"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in ["no-lq", "B=64", "B=128", "B=256", "  64", "128", "256"] {
        assert!(text.contains(needle), "table1 output missing {needle:?}:\n{text}");
    }
}

#[test]
fn voxel_round_trip_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.xyz", CLOUD);

    let vox = avi(&["voxelize", "c.xyz", "--out", "g.aviv"], d);
    assert_eq!(code(&vox), 0, "{}", stderr(&vox));
    let first = std::fs::read(d.join("g.aviv")).unwrap();

    // Same input, same bytes.
    assert_eq!(code(&avi(&["voxelize", "c.xyz", "--out", "g.aviv"], d)), 0);
    assert_eq!(std::fs::read(d.join("g.aviv")).unwrap(), first);

    let devox = avi(
        &["devoxelize", "g.aviv", "--box", "0.28,0.26,0.065,0.42,0.40,0.205", "--out", "back.xyz"],
        d,
    );
    assert_eq!(code(&devox), 0, "{}", stderr(&devox));
    let back = std::fs::read_to_string(d.join("back.xyz")).unwrap();
    let lines: Vec<_> = back.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 5, "five occupied voxels for five sparse points");
}

#[test]
fn icp_identity_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.xyz", CLOUD);
    let out = avi(&["icp", "c.xyz", "c.xyz", "--out", "xf.json"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("rmse 0.000000"));
    assert!(stdout(&out).contains("converged: true"));

    let xf: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("xf.json")).unwrap()).unwrap();
    assert!(xf["converged"].as_bool().unwrap());
    let t = xf["translation"].as_array().unwrap();
    for v in t {
        assert!(v.as_f64().unwrap().abs() <= 1e-9);
    }
}

#[test]
fn summarize_formats_published_style() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let outcomes: Vec<bool> = (0..20).map(|i| i < 18).collect();
    write(d, "o.json", &serde_json::to_string(&outcomes).unwrap());
    let out = avi(&["summarize", "o.json"], d);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "0.90 ± 0.07");

    let garbage = avi(&["summarize", &write(d, "bad.json", "not json")], d);
    assert_eq!(code(&garbage), 1);
}

#[test]
fn rollout_writes_traces_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "scene.json", r#"{"object_count":2,"min_points":250,"max_points":400}"#);
    write(
        d,
        "task.json",
        r#"{"instruction":"move the red cube to the goal region","target_object":1,"goal":[0.5,0.5,0.3]}"#,
    );
    write(
        d,
        "pred.json",
        r#"{"kind":"goal_oracle","target_object":1,"goal":[0.5,0.5,0.3]}"#,
    );

    let run = |out_dir: &str| {
        let out = avi(
            &[
                "rollout", "--scene", "scene.json", "--task", "task.json", "--predictor",
                "pred.json", "--trials", "3", "--seed", "7", "--out-dir", out_dir,
            ],
            d,
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout(&out)
    };
    let first = run("a");
    assert_eq!(first.trim(), "1.00 ± 0.00");
    let second = run("b");
    assert_eq!(first, second);

    for trial in ["trial_000", "trial_001", "trial_002"] {
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(d.join("a").join(trial).join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["schema"], "avi-trace/1");
        let a = std::fs::read(d.join("a").join(trial).join("manifest.json")).unwrap();
        let b = std::fs::read(d.join("b").join(trial).join("manifest.json")).unwrap();
        assert_eq!(a, b, "{trial} manifests must be bitwise identical");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["successes"], 3);
    assert_eq!(summary["trials"], 3);

    // Everything the run produced stayed inside the two --out-dir trees.
    let entries: Vec<String> = std::fs::read_dir(d)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let mut sorted = entries.clone();
    sorted.sort();
    assert_eq!(sorted, ["a", "b", "pred.json", "scene.json", "task.json"]);
}

#[test]
fn predict_round_trips_token_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "scene.json", r#"{"object_count":1,"min_points":250,"max_points":400}"#);
    write(
        d,
        "task.json",
        r#"{"instruction":"lift the ball","target_object":1,"goal":[0.5,0.5,0.4],"max_steps":1}"#,
    );
    write(
        d,
        "pred.json",
        r#"{"kind":"goal_oracle","target_object":1,"goal":[0.5,0.5,0.4]}"#,
    );
    let out = avi(
        &[
            "rollout", "--scene", "scene.json", "--task", "task.json", "--predictor", "pred.json",
            "--trials", "1", "--seed", "3", "--out-dir", "t",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tokens = std::fs::read_to_string(d.join("t/trial_000/step_000.tokens.txt")).unwrap();
    let ids: Vec<u32> = tokens
        .lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|f| f.parse().unwrap())
        .collect();
    // text + separator + one 8196-token object block.
    assert!(ids.len() > 8196, "step tokens too short: {}", ids.len());
}
