use std::fs;

use patrep_core::pipeline::{Artifact, PipelineConfig, Runner, Stage};
use patrep_core::synth::SynthConfig;
use patrep_core::Error;

fn small() -> PipelineConfig {
    PipelineConfig {
        seed: 5,
        synth: Some(SynthConfig { n_patients: 300, ..SynthConfig::default() }),
        ..PipelineConfig::default()
    }
}

#[test]
fn downstream_stage_without_inputs_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(&small(), dir.path()).unwrap();
    match runner.run(Stage::Evaluate) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "fit-probe"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
    match runner.run(Stage::Textualize) {
        Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "build-cohort"),
        other => panic!("expected a missing-artifact error, got {other:?}"),
    }
}

#[test]
fn stages_resume_across_runner_instances() {
    let dir = tempfile::tempdir().unwrap();
    {
        let r = Runner::new(&small(), dir.path()).unwrap();
        for s in [Stage::Synth, Stage::Ingest, Stage::BuildCohort] {
            r.run(s).unwrap();
        }
    }
    let r = Runner::new(&small(), dir.path()).unwrap();
    let rec = r.run(Stage::Textualize).unwrap();
    assert!(rec.inputs.keys().any(|k| k.contains("cohort.jsonl")));
    let first = r.run(Stage::BuildCohort).unwrap();
    let again = r.run(Stage::BuildCohort).unwrap();
    assert_eq!(first.outputs, again.outputs);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run_manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, ["synth", "ingest", "build-cohort", "textualize"]);
}

#[test]
fn plan_follows_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    assert_eq!(Runner::new(&cfg, dir.path()).unwrap().plan()[0], Stage::Synth);
    assert!(!Runner::new(&cfg, dir.path()).unwrap().plan().contains(&Stage::TrainPooler));
    cfg.pooler.enabled = true;
    assert!(Runner::new(&cfg, dir.path()).unwrap().plan().contains(&Stage::TrainPooler));
    let events = dir.path().join("mine.csv");
    let r = Runner::new(&cfg, dir.path()).unwrap().with_override(Artifact::Events, events);
    assert_eq!(r.plan()[0], Stage::Ingest);
}

#[test]
fn stage_names_round_trip() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert!("train".parse::<Stage>().is_err());
}
