use std::path::Path;
use std::process::{Command, Output};

fn avimesh(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avimesh")).args(args).current_dir(dir).output().expect("spawn avimesh")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn fixture(dir: &Path) {
    std::fs::write(dir.join("fast.toml"), "iterations = 20\nglobal_iterations = 5\nrender_size = 32\n").unwrap();
    let out = avimesh(&["make-fixture", "--out", "fx", "--count", "2", "--views", "3", "--seed", "4"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&avimesh(&["--help"], d)), 0);
    assert_eq!(code(&avimesh(&["fit-multi", "--help"], d)), 0);
    assert_eq!(code(&avimesh(&["no-such-command"], d)), 1);
    assert_eq!(code(&avimesh(&["fit-multi", "--out", "o"], d)), 1);
    assert_eq!(code(&avimesh(&["fit-multi", "--annotations", "missing.json", "--out", "o"], d)), 1);
    assert_eq!(code(&avimesh(&["--template-variant", "wide", "init-template", "--out", "t.json"], d)), 1);
    std::fs::write(d.join("bad.toml"), "iterationz = 3\n").unwrap();
    fixture(d);
    let out = avimesh(&["fit-multi", "--annotations", "fx/annotations.json", "--out", "o", "--config", "bad.toml"], d);
    assert_eq!(code(&out), 1);
    assert!(!d.join("o/results.json").exists());
}

#[test]
fn refinement_without_prior_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    std::fs::write(d.join("reg.json"), "{}").unwrap();
    let out = avimesh(&["fit-single", "--annotations", "fx/annotations.json", "--regressor", "reg.json", "--out", "s"], d);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prior"));
}

#[test]
fn zero_successful_fits_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    std::fs::create_dir(d.join("empty")).unwrap();
    let out = avimesh(
        &["fit-multi", "--annotations", "fx/annotations.json", "--mask-root", "empty", "--out", "o", "--config", "fast.toml", "--no-obj"],
        d,
    );
    assert_eq!(code(&out), 2);
    let results = std::fs::read_to_string(d.join("o/results.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&results).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 0);
    assert_eq!(v["failures"].as_array().unwrap().len(), 2);
}

#[test]
fn fixture_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    for f in ["fx/annotations.json", "fx/rig.json", "fx/ground_truth.json"] {
        assert!(d.join(f).is_file(), "{f}");
    }
    let common = ["--config", "fast.toml", "--seed", "1", "--jobs", "2"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = args.iter().chain(common.iter()).copied().collect();
        let out = avimesh(&all, d);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["fit-multi", "--annotations", "fx/annotations.json", "--rig", "fx/rig.json", "--out", "multi"]);
    for f in ["results.json", "report.tsv", "summary.txt", "obj/scene-00000.obj", "obj/scene-00001.obj"] {
        assert!(d.join("multi").join(f).is_file(), "{f}");
    }
    let tsv = std::fs::read_to_string(d.join("multi/report.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(tsv.starts_with("split\tinstance\tpck05"));

    let eval = run(&["eval", "--annotations", "fx/annotations.json", "--results", "multi/results.json", "--out", "eval.tsv"]);
    assert!(!eval.stdout.is_empty());
    assert_eq!(std::fs::read_to_string(d.join("eval.tsv")).unwrap(), tsv);

    run(&["synth", "--fits", "multi/results.json", "--per-instance", "20", "--prior-out", "prior.json", "--out", "synthetic.json"]);
    let synthetic: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("synthetic.json")).unwrap()).unwrap();
    assert_eq!(synthetic["records"].as_array().unwrap().len(), 40);

    run(&["train-reg", "--synthetic", "synthetic.json", "--epochs", "2", "--hidden", "16", "--out", "reg.json", "--report", "train.json"]);
    assert!(d.join("train.json").is_file());

    run(&["fit-single", "--annotations", "fx/annotations.json", "--regressor", "reg.json", "--prior", "prior.json", "--no-refine", "--out", "raw", "--no-obj"]);
    run(&["fit-single", "--annotations", "fx/annotations.json", "--regressor", "reg.json", "--prior", "prior.json", "--out", "refined", "--no-obj"]);
    for dir in ["raw", "refined"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join(dir).join("results.json")).unwrap()).unwrap();
        assert_eq!(v["records"].as_array().unwrap().len(), 6, "{dir}");
        assert!(!d.join(dir).join("obj").exists());
    }

    run(&["export-obj", "--results", "refined/results.json", "--out", "meshes"]);
    assert_eq!(std::fs::read_dir(d.join("meshes")).unwrap().count(), 6);
}

#[test]
fn init_template_round_trips_through_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&avimesh(&["init-template", "--out", "t.json", "--rig-out", "r.json"], d)), 0);
    fixture(d);
    let out = avimesh(
        &[
            "fit-multi",
            "--annotations",
            "fx/annotations.json",
            "--template",
            "t.json",
            "--rig",
            "r.json",
            "--template-variant",
            "both",
            "--config",
            "fast.toml",
            "--no-obj",
            "--out",
            "o",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
