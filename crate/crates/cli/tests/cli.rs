use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_retrieval-lab");

fn quick_spec(dir: &Path, arms: &str, extra: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    let text = format!(
        "arms = {arms}\noutput_dir = \"{}\"\n{extra}\n\
         [dataset.synthetic]\nsamples_per_class = 10\n\
         [schedule]\noriginal_count = 8\ngroup_sizes = [8]\n\
         [train]\nepochs = 2\nstage_a_epochs = 2\n",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn reports(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("report-"))
        .collect();
    v.sort();
    v
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/report.schema.json");
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).expect("schema compiles")
}

#[test]
fn run_writes_reports_that_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(
        dir.path(),
        r#"["ours", "lwf", "finetune", "l2feat", "ewc", "joint_reference"]"#,
        "",
    );
    let o = run(&["run", spec.to_str().unwrap(), "--jobs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "summary.csv",
        "manifest.json",
        "pr-ours.csv",
        "trace-ewc.csv",
        "report-initial-s0.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let validator = schema();
    let files = reports(&out);
    assert_eq!(files.len(), 7);
    for f in files {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&f).unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{}: {errors:?}", f.display());
    }
}

#[test]
fn schema_rejects_a_broken_report() {
    let validator = schema();
    let bad = serde_json::json!({ "arm": "ours", "step": -1 });
    assert!(!validator.is_valid(&bad));
}

#[test]
fn feature_extraction_reports_only_new_groups() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["feature_extraction"]"#, "");
    let o = run(&["run", spec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("out/report-feature_extraction-s1.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let groups: Vec<u64> = v["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["group"].as_u64().unwrap())
        .collect();
    assert_eq!(groups, vec![1]);
    assert!(v["trace"].as_array().unwrap().is_empty());
}

#[test]
fn empty_arm_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), "[]", "");
    let o = run(&["run", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("arms"), "{}", stderr(&o));
}

#[test]
fn unknown_field_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["ours"]"#, "colour = 1");
    let o = run(&["run", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let spec = quick_spec(dir.path(), r#"["ours"]"#, "");
    assert_eq!(
        run(&["run", spec.to_str().unwrap(), "--arm", "alasso"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["run", spec.to_str().unwrap(), "--epochs", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["sweep", spec.to_str().unwrap(), "--alpha", "1"]).status.code(),
        Some(2)
    );
}

#[test]
fn output_dir_is_not_overwritten_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["finetune"]"#, "");
    let s = spec.to_str().unwrap();
    assert!(run(&["run", s]).status.success());
    let o = run(&["run", s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    assert!(run(&["run", s, "--force"]).status.success());
}

#[test]
fn same_spec_and_seed_give_identical_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["ours", "ewc"]"#, "");
    let s = spec.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, jobs) in [(&a, "1"), (&b, "2")] {
        let o = run(&["run", s, "--seed", "7", "--jobs", jobs, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert!(run(&["run", s, "--seed", "8", "--out", c.to_str().unwrap()])
        .status
        .success());
    let read = |d: &PathBuf| fs::read(d.join("summary.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn runtime_failure_exits_1_and_names_the_arm() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["ours"]"#, "");
    let text = fs::read_to_string(&spec)
        .unwrap()
        .replace("[train]\n", "[train]\nlr_extractor = 1e300\n");
    fs::write(&spec, text).unwrap();
    let o = run(&["run", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("arm `initial`"), "{}", stderr(&o));
}

#[test]
fn ablate_and_sweep_emit_one_report_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = quick_spec(dir.path(), r#"["ours"]"#, "");
    let s = spec.to_str().unwrap();
    let abl = dir.path().join("abl");
    assert!(run(&["ablate", s, "--out", abl.to_str().unwrap()]).status.success());
    let names: Vec<String> = reports(&abl)
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for arm in ["ce_trip", "ce_trip_dist", "ce_trip_mmd", "ce_trip_dist_mmd"] {
        assert!(names.contains(&format!("report-{arm}-s1.json")), "{names:?}");
    }
    assert_eq!(names.len(), 5);

    let sw = dir.path().join("sweep");
    let o = run(&[
        "sweep",
        s,
        "--alpha",
        "0.1,1",
        "--beta",
        "0.1,1,10",
        "--out",
        sw.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let grid: Vec<PathBuf> = reports(&sw)
        .into_iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("report-sweep-"))
        .collect();
    assert_eq!(grid.len(), 6);
    assert!(sw.join("report-sweep-a0.1_b10_s1.json").exists());
}

#[test]
fn eval_csv_scores_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    fs::write(&path, "label,f0,f1\n3,1,0\n3,0.9,0.1\n5,0,1\n5,0.1,0.9\n").unwrap();
    let o = run(&["eval-csv", path.to_str().unwrap(), "--k", "1,2", "--pr"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["items"], 4);
    assert_eq!(v["recall"]["1"], 1.0);
    assert_eq!(v["map"], 1.0);
    assert_eq!(v["pr"].as_array().unwrap().len(), 3);

    fs::write(&path, "label,f0\n1,oops\n").unwrap();
    let o = run(&["eval-csv", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn shipped_sample_spec_is_valid() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let spec = retrieval_lab::experiment::ExperimentSpec::from_path(&path).unwrap();
    assert_eq!(spec.arms.len(), 7);
    assert!(spec.sweep.unwrap().ablation);
}
