use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = include_str!("fixtures/tiny.conf");

fn ddlab(dir: &Path, extra_config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.conf");
    std::fs::write(&cfg, format!("{TINY}\n{extra_config}\n")).unwrap();
    Command::new(env!("CARGO_BIN_EXE_ddlab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Vec<PathBuf> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(PathBuf::from).collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Relative path to file bytes for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn run_dir(dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir.join("out")).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(entries.len(), 1);
    entries.pop().unwrap()
}

#[test]
fn report_on_empty_directory_lists_every_missing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddlab(dir.path(), "", &["report"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    for f in ["inverse.csv", "mix_curve.csv", "grid.csv", "trials.csv", "pixels_real.csv", "ipc_sweep.csv"] {
        assert!(err.contains(f), "{f} not listed in: {err}");
    }
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddlab(dir.path(), "train.learning_rate = 0.1", &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.learning_rate"));
}

#[test]
fn bad_value_and_unknown_method_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ddlab(dir.path(), "train.lr = fast", &["gen-data"]).status.code(), Some(2));
    assert_eq!(ddlab(dir.path(), "", &["--method", "kmeans", "distill"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_and_missing_inputs_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ddlab"))
        .args(["--config", dir.path().join("absent.conf").to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let out = ddlab(dir.path(), "", &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("train.ddlb"));
}

#[test]
fn overflowing_run_exits_with_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    // a linear model has no dead units to absorb the step, so parameters overflow
    let extra = "train.lr = 1e300\nmodel.kind = linear\ndistill.methods = trajectory_matching";
    ok(ddlab(dir.path(), extra, &["gen-data"]));
    let out = ddlab(dir.path(), extra, &["distill"]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    let leftovers: Vec<_> =
        snapshot(&dir.path().join("out")).into_keys().filter(|p| p.to_string_lossy().contains("partial")).collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn distill_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddlab(dir.path(), "", &["gen-data"]));
    ok(ddlab(dir.path(), "", &["distill"]));
    let distilled = run_dir(dir.path()).join("distill");
    let sa = snapshot(&distilled);
    ok(ddlab(dir.path(), "", &["--jobs", "1", "distill"]));
    let sb = snapshot(&distilled);
    assert!(sa.keys().any(|p| p.ends_with("trajectory_matching.ddls")));
    assert_eq!(sa.len(), sb.len());
    for (p, bytes) in &sa {
        assert!(sb.get(p) == Some(bytes), "{} differs", p.display());
    }
}

#[test]
fn full_pipeline_renders_every_figure_and_rerenders_identically() {
    let dir = tempfile::tempdir().unwrap();
    let steps =
        ["gen-data", "distill", "train", "influence", "curvature", "landscape", "agree", "mix", "recognize", "search"];
    for s in steps {
        ok(ddlab(dir.path(), "", &[s]));
    }
    let figures = ok(ddlab(dir.path(), "", &["report"]));
    let svgs: Vec<&PathBuf> = figures.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
    assert_eq!(svgs.len(), 22);

    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.csv")).unwrap();
    let plots = manifest.lines().filter(|l| l.split(',').nth(3) == Some("plot")).count();
    assert_eq!(plots, svgs.len());
    assert!(manifest.lines().skip(1).all(|l| l.split(',').count() == 6));

    let report = run_dir(dir.path()).join("report");
    let first = snapshot(&report);
    ok(ddlab(dir.path(), "", &["report"]));
    assert_eq!(first, snapshot(&report));
    for (p, bytes) in &first {
        let text = String::from_utf8_lossy(bytes);
        if p.extension().is_some_and(|e| e == "svg") {
            assert!(text.starts_with("<svg") && text.ends_with("</svg>\n"), "{}", p.display());
            assert!(!text.contains("NaN") && !text.contains("\"inf") && !text.contains("-inf"), "{}", p.display());
        }
    }
}

#[test]
fn method_flag_restricts_distillation() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddlab(dir.path(), "", &["gen-data"]));
    let written = ok(ddlab(dir.path(), "", &["--method", "dm", "distill"]));
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert!(names.contains(&"distribution_matching.ddls".to_string()));
    assert!(!names.iter().any(|n| n.starts_with("bptt") || n == "experts"));
}
