use std::fs;
use std::path::Path;
use std::process::Command;

use anchorroute::cli::{run_bench, run_refine, run_sample, RunConfig};
use anchorroute::io::ArrayDoc;
use anchorroute::scaffold::AnchorSet;
use anchorroute::tmd::TmdSchedule;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorroute"))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

#[test]
fn oracle_sampling_recovers_the_task_tokens() {
    let out = run_sample(&RunConfig::standard()).unwrap();
    assert!(out.summary.token_match >= 0.95, "{}", out.summary.token_match);
    assert_eq!(out.run.trace.len(), 64);
}

#[test]
fn frozen_sampler_matches_at_chance() {
    // one step of negligible size leaves the uniform initial state in place
    let v = 32.0;
    let seeds = 60;
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut cfg = RunConfig::standard();
        cfg.seed = seed;
        cfg.schedule = TmdSchedule { steps: 1, step_size: Some(1e-12), ..TmdSchedule::default() };
        let out = run_sample(&cfg).unwrap();
        assert_eq!(out.run.trace[0].updates, 0);
        total += out.summary.token_match;
    }
    let n = seeds as f64 * 16.0;
    let p = 1.0 / v;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let mean = total / seeds as f64;
    assert!((mean - p).abs() < 4.0 * sigma, "mean match {mean}, chance {p}");
}

#[test]
fn zero_refine_steps_change_nothing() {
    let mut cfg = RunConfig::standard();
    cfg.solver.steps = 0;
    let out = run_refine(&cfg).unwrap();
    assert_eq!(out.summary.control_error_before, out.summary.control_error_after);
    assert_eq!(out.before, out.after);
    assert!(out.refine.trace.is_empty());
}

#[test]
fn refine_traces_are_monotone_in_anchor_loss_early_on() {
    let out = run_refine(&RunConfig::standard()).unwrap();
    let t = &out.refine.trace;
    assert_eq!(t.len(), 200);
    assert!(t[t.len() - 1].anchor_loss < 0.01 * t[0].anchor_loss);
    assert!(t.iter().all(|r| (0.0..=1.0).contains(&r.mean_activity)));
}

#[test]
fn each_control_family_refines() {
    for (family, joint) in [("root3d", None), ("planar_root", None), ("body_point", Some(3))] {
        let mut v = serde_json::to_value(RunConfig::standard()).unwrap();
        v["anchors"]["family"] = family.into();
        v["anchors"]["joint"] = serde_json::to_value(joint).unwrap();
        let cfg = RunConfig::from_json(&v.to_string()).unwrap();
        let s = run_refine(&cfg).unwrap().summary;
        assert!(s.control_error_after <= 0.1 * s.control_error_before, "{family}: {s:?}");
    }
}

#[test]
fn bench_cost_grows_with_steps() {
    let mut cfg = RunConfig::standard();
    cfg.bench.refine_steps = vec![0, 100, 200, 500];
    let rows = run_bench(&cfg).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(names, ["sample", "rs0", "rs100", "rs200", "rs500"]);
    assert!(rows[0].time_per_sample_s > 0.0);
    assert!(rows[1].time_per_sample_s < rows[2].time_per_sample_s);
    assert!(rows[2].time_per_sample_s < rows[3].time_per_sample_s);
    assert!(rows[3].time_per_sample_s < rows[4].time_per_sample_s);
}

#[test]
fn sample_command_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin().args(["sample", "--seed", "3", "--out"]).arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,t,updates,mean_d\n"));
    assert_eq!(trace.lines().count(), 65);
    let motion = ArrayDoc::load(&out.join("motion.json")).unwrap().into_motion().unwrap();
    assert_eq!((motion.frames(), motion.joints()), (64, 6));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["token_match"].as_f64().unwrap() >= 0.95);
}

#[test]
fn refine_command_with_preset_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &RunConfig::standard());
    let out = dir.path().join("run");
    let status = bin().args(["refine", "--preset", "rs100", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 100);
    assert!(summary["control_error_after"].as_f64().unwrap() <= 0.1 * summary["control_error_before"].as_f64().unwrap());
    let header = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(header.starts_with("step,objective,anchor_loss,mean_activity,update_norm\n"));
    AnchorSet::from_json(&fs::read_to_string(out.join("anchors.json")).unwrap()).unwrap();
    let timing: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert!(timing["wall_time_s"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_command_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::standard();
    cfg.bench.repeats = 1;
    cfg.bench.refine_steps = vec![0, 10];
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let status = bin().arg("bench").arg("--config").arg(&path).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("setting,steps,time_per_sample_s"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"task": {"motion": {"kind": "line", "velocity": [0, 0, 0]}, "frames": 64, "joints": 6}, "nope": 1}"#).unwrap();
    let out = bin().arg("sample").arg("--config").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let missing = bin().args(["refine", "--config", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let mut cfg = RunConfig::standard();
    cfg.task.frames = 40;
    let p = write_config(dir.path(), &cfg);
    assert_eq!(bin().arg("refine").arg("--config").arg(&p).status().unwrap().code(), Some(2));

    assert_eq!(bin().args(["refine", "--preset", "rs300"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    // a regular file where the output directory should go
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = bin().arg("sample").arg("--out").arg(blocker.join("sub")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("anchorroute:"));
}

#[test]
fn binary_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["sample", "refine"] {
        let mut files = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{cmd}{k}"));
            assert!(bin().args([cmd, "--seed", "99", "--out"]).arg(&out).status().unwrap().success());
            let mut names: Vec<_> = fs::read_dir(&out)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.file_name().unwrap() != "timing.json")
                .collect();
            names.sort();
            files.push(names.iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap())).collect::<Vec<_>>());
        }
        assert_eq!(files[0], files[1], "{cmd}");
    }
    let a = fs::read(dir.path().join("sample0/tokens.json")).unwrap();
    let other = dir.path().join("other");
    assert!(bin().args(["sample", "--seed", "100", "--out"]).arg(&other).status().unwrap().success());
    assert_ne!(fs::read(other.join("motion.json")).unwrap(), fs::read(dir.path().join("sample0/motion.json")).unwrap());
    assert!(!a.is_empty());
}
