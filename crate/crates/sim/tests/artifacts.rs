use drift_core::analysis::{compute_metrics, DriftCriteria};
use drift_core::qp::solve;
use drift_core::sim::RunOutcome;
use drift_sim::output::{self, MetricsBody, MetricsDocument, METRICS_SCHEMA};
use drift_sim::{qpdump, run_scenario, RunArtifacts, RunOptions, Scenario};
use std::fs;
use std::path::{Path, PathBuf};

fn shipped(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::load(&path).unwrap()
}

fn validate_against_schema(text: &str) {
    let schema: serde_json::Value = serde_json::from_str(METRICS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: serde_json::Value = serde_json::from_str(text).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap()
}

#[test]
fn shipped_scenarios_are_byte_deterministic() {
    for name in ["circle30.toml", "variable_curvature.toml", "straight.toml"] {
        let scenario = shipped(name);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        output::emit(&run_scenario(&scenario, &RunOptions::default()).unwrap(), a.path()).unwrap();
        output::emit(&run_scenario(&scenario, &RunOptions::default()).unwrap(), b.path()).unwrap();
        for file in [output::TIMESERIES_FILE, output::METRICS_FILE, output::SCENARIO_FILE] {
            assert_eq!(read(a.path(), file), read(b.path(), file), "{name}: {file}");
        }
    }
}

#[test]
fn preset_metrics_validate_and_round_trip() {
    let artifacts = run_scenario(&shipped("circle30.toml"), &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    output::emit(&artifacts, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(output::METRICS_FILE)).unwrap();
    validate_against_schema(&text);
    let stored = MetricsDocument::load(&dir.path().join(output::METRICS_FILE)).unwrap();
    assert_eq!(stored, output::metrics_document(&artifacts));
    assert_eq!(stored.to_json(), text);

    // metrics recomputed from the CSV are exactly the stored ones
    let samples = output::read_samples(&dir.path().join(output::TIMESERIES_FILE)).unwrap();
    assert_eq!(samples, artifacts.samples());
    let recomputed = compute_metrics(&samples, 0.05, &DriftCriteria::default());
    assert_eq!(MetricsBody::from(&recomputed), stored.metrics);

    let echoed = Scenario::load(&dir.path().join(output::SCENARIO_FILE)).unwrap();
    assert_eq!(echoed, artifacts.scenario);
}

#[test]
fn empty_run_has_header_only_csv_and_null_metrics() {
    let scenario = shipped("straight.toml");
    let metrics = compute_metrics(&[], 0.05, &DriftCriteria::default());
    let artifacts = RunArtifacts {
        scenario,
        outcome: RunOutcome {
            records: Vec::new(),
            aborted: None,
            qp_problems: Vec::new(),
        },
        metrics,
    };
    let dir = tempfile::tempdir().unwrap();
    output::emit(&artifacts, dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join(output::TIMESERIES_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with('#'));
    assert!(lines[1].starts_with("step,time,"));
    let text = fs::read_to_string(dir.path().join(output::METRICS_FILE)).unwrap();
    validate_against_schema(&text);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    let m = &json["metrics"];
    for key in [
        "drift_onset_time",
        "steady_sideslip_deg",
        "steady_yaw_rate",
        "max_abs_lateral_error",
    ] {
        assert!(m[key].is_null(), "{key}");
    }
    assert_eq!(m["sustained_drift"], serde_json::Value::Bool(false));
    assert!(output::read_samples(&dir.path().join(output::TIMESERIES_FILE))
        .unwrap()
        .is_empty());
}

#[test]
fn aborted_run_keeps_completed_steps_and_reason() {
    let mut scenario = shipped("straight.toml");
    scenario.path = drift_sim::scenario::PathSpec::Straight { length: 30.0 };
    let artifacts = run_scenario(&scenario, &RunOptions::default()).unwrap();
    let abort = artifacts.outcome.aborted.as_ref().expect("the path is too short");
    let dir = tempfile::tempdir().unwrap();
    output::emit(&artifacts, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(output::METRICS_FILE)).unwrap();
    validate_against_schema(&text);
    let doc = MetricsDocument::load(&dir.path().join(output::METRICS_FILE)).unwrap();
    let info = doc.aborted.unwrap();
    assert_eq!(info.step, abort.step);
    assert!(!info.reason.is_empty());
    assert_eq!(doc.metrics.steps, abort.step);
}

#[test]
fn schema_rejects_malformed_documents() {
    let schema: serde_json::Value = serde_json::from_str(METRICS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let artifacts = run_scenario(&shipped("straight.toml"), &RunOptions::default()).unwrap();
    let good: serde_json::Value = serde_json::from_str(&output::metrics_document(&artifacts).to_json()).unwrap();
    assert!(validator.is_valid(&good));
    let mut bad = good.clone();
    bad["schema_version"] = 2.into();
    assert!(!validator.is_valid(&bad));
    let mut bad = good.clone();
    bad["metrics"].as_object_mut().unwrap().remove("rms_lateral_error");
    assert!(!validator.is_valid(&bad));
    let mut bad = good;
    bad["metrics"]["steady_rear_utilization_share"] = 1.5.into();
    assert!(!validator.is_valid(&bad));
}

#[test]
fn dumped_controller_qp_reproduces_the_solution() {
    let options = RunOptions {
        dump_qp_steps: vec![0, 250],
        ..Default::default()
    };
    let artifacts = run_scenario(&shipped("circle30.toml"), &options).unwrap();
    assert_eq!(artifacts.outcome.qp_problems.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    output::emit(&artifacts, dir.path()).unwrap();
    for (step, problem) in &artifacts.outcome.qp_problems {
        let loaded = qpdump::load(&dir.path().join(format!("qp_step_{step}.txt"))).unwrap();
        assert_eq!(&loaded, problem);
        let a = solve(problem, 1e-8, 200).unwrap();
        let b = solve(&loaded, 1e-8, 200).unwrap();
        assert_eq!(a.x, b.x);
        // the recorded increment is the first block of the solution
        let du = artifacts.outcome.records[*step].increment.to_array();
        for (x, d) in a.x.iter().zip(du) {
            assert!((x - d).abs() <= 1e-9 * (1.0 + d.abs()), "step {step}");
        }
    }
}
