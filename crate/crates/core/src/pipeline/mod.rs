//! Stage wiring, configuration and run manifests.

mod config;
mod experiment;
mod plots;
mod stages;

pub use config::{
    desk_simcse, load_toml, stage_seed, FactorFile, GeometryConfig, PipelineConfig, PoolerSection, RepresentationConfig, RssConfig,
};
pub use experiment::{
    concept_seed, concept_texts, encode_concept, fit_and_test, fit_transform, geometry_settings, make_split,
    merge_pooled, pool_sequences, represent_cohort, run_experiment, train_concept, train_encoders, train_scorer,
    visit_sequences, BaselineFeatures, EncodedConcept, Experiment, GeometrySettings, PooledMap, ProbeOutcome,
};
pub use plots::write_tables;
pub use stages::{
    load_encoder, sha256_bytes, sha256_file, Artifact, IngestReport, MetricsEntry, MetricsReport, PersistedBaseline,
    PersistedProbe, PlotRow, RssOutput, RunManifest, Runner, Stage, StageOptions, StageRecord,
};
