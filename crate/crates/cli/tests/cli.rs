use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn patrep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrep"))
        .args(args)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, "seed = 3\n\n[synth]\nn_patients = 400\n\n[rss]\nmin_support = 5\n").unwrap();
    path.to_string_lossy().into_owned()
}

fn output_hashes(out: &Output) -> BTreeMap<String, String> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut hashes = BTreeMap::new();
    for stage in manifest["stages"].as_array().unwrap() {
        for (file, hash) in stage["outputs"].as_object().unwrap() {
            hashes.insert(file.clone(), hash.as_str().unwrap().to_string());
        }
    }
    hashes
}

#[test]
fn run_all_is_reproducible_and_strategy_independent() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = output_hashes(&patrep(a.path(), &["--config", &small_config(a.path()), "run-all"]));
    let second = output_hashes(&patrep(b.path(), &["--config", &small_config(b.path()), "run-all"]));
    let sequential =
        output_hashes(&patrep(c.path(), &["--config", &small_config(c.path()), "--sequential", "run-all"]));
    assert!(first.len() > 20);
    assert_eq!(first, second);
    assert_eq!(first, sequential);
    let out = a.path().join("out");
    for f in ["metrics.json", "rss.json", "geometry.json", "run_manifest.json", "config.resolved.toml"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(out.join("plots").join("ablation.tsv").exists());
}

#[test]
fn missing_upstream_artifact_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let out = patrep(dir.path(), &["--config", &small_config(dir.path()), "evaluate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fit-probe"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\nlearning_rat = 0.1\n").unwrap();
    let out = patrep(dir.path(), &["--config", path.to_str().unwrap(), "show-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn stages_resume_from_files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for stage in ["synth", "ingest", "build-cohort", "textualize"] {
        let out = patrep(dir.path(), &["--config", &cfg, stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = dir.path().join("out");
    assert!(out.join("texts.jsonl").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 4);

    let shown = patrep(dir.path(), &["--config", &cfg, "--seed", "11", "show-config"]);
    assert!(shown.status.success());
    assert!(String::from_utf8_lossy(&shown.stdout).contains("seed = 11"));
}
