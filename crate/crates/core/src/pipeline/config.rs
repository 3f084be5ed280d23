use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::downstream::{ProbeConfig, SplitSpec};
use crate::encoder::{fnv1a, EncoderConfig, EncoderSpec, SimCseConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest::{DiagnosisTaxonomy, Schema};
use crate::pooling::{PoolingConfig, ScorerTrainConfig};
use crate::represent::BaselineConfig;
use crate::rss::{FactorSpec, Subgroup};
use crate::synth::SynthConfig;
use crate::text::TemporalScheme;

/// Parse a TOML file into any config fragment (schema, taxonomy, factors).
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// A list of factors as written in a factor file: `[[factors]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorFile {
    pub factors: Vec<FactorSpec>,
}

/// Seed for a named stage: `fnv1a(stage) ^ global`.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    fnv1a(stage.as_bytes()) ^ global
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PoolerSection {
    /// Train a scorer MLP that replaces the context term in attention.
    pub enabled: bool,
    pub train: ScorerTrainConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationConfig {
    pub variance_target: f64,
    pub include_demographics: bool,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self { variance_target: 0.95, include_demographics: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub t: f64,
    /// Embeddings per setting are subsampled to this many rows.
    pub max_points: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { t: 2.0, max_points: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RssConfig {
    pub min_support: usize,
    /// `key=value` over sex, race or label.
    pub subgroup: Option<String>,
    /// Explicit factors. When empty and a synth section is present, the
    /// generator's own term list plus `windows` is used.
    pub factors: Vec<FactorSpec>,
    pub windows: Vec<u32>,
}

impl Default for RssConfig {
    fn default() -> Self {
        Self { min_support: 20, subgroup: None, factors: Vec::new(), windows: vec![30, 90, 180, 365] }
    }
}

/// Every knob of a run in one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallel: bool,
    /// Delimited event file. Optional when `synth` is set.
    pub events: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub schema: Schema,
    /// Defaults to the generator's taxonomy when `synth` is set.
    pub taxonomy: Option<DiagnosisTaxonomy>,
    pub window_radius_days: u32,
    pub scheme: TemporalScheme,
    pub train_encoder: bool,
    pub encoder: EncoderConfig,
    /// Replaces the reference encoder for inference; disables adaptation.
    pub external_encoder: Option<EncoderSpec>,
    pub simcse: SimCseConfig,
    pub pooling: PoolingConfig,
    pub pooler: PoolerSection,
    pub representation: RepresentationConfig,
    pub split: SplitSpec,
    pub probe: ProbeConfig,
    pub baselines: BaselineConfig,
    pub geometry: GeometryConfig,
    pub rss: RssConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            parallel: true,
            events: None,
            synth: Some(SynthConfig::default()),
            schema: Schema::default(),
            taxonomy: None,
            window_radius_days: 3,
            scheme: TemporalScheme::Gap,
            train_encoder: true,
            encoder: EncoderConfig::default(),
            external_encoder: None,
            simcse: desk_simcse(),
            pooling: PoolingConfig::default(),
            pooler: PoolerSection::default(),
            representation: RepresentationConfig::default(),
            split: SplitSpec::default(),
            probe: ProbeConfig::default(),
            baselines: BaselineConfig::default(),
            geometry: GeometryConfig::default(),
            rss: RssConfig::default(),
        }
    }
}

/// Contrastive settings sized for a laptop-scale run.
pub fn desk_simcse() -> SimCseConfig {
    SimCseConfig {
        epochs: 1,
        batch_size: 64,
        learning_rate: 1e-3,
        max_training_samples: 4000,
        grad_accum_steps: 1,
        ..SimCseConfig::default()
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(events), Some(dir)) = (cfg.events.as_mut(), path.parent()) {
            if events.is_relative() {
                *events = dir.join(&*events);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn taxonomy(&self) -> Result<DiagnosisTaxonomy> {
        match (&self.taxonomy, &self.synth) {
            (Some(t), _) => Ok(t.clone()),
            (None, Some(s)) => Ok(s.taxonomy()),
            (None, None) => Err(Error::Config("a taxonomy is required when no synth section is given".into())),
        }
    }

    pub fn factors(&self) -> Vec<FactorSpec> {
        match (&self.synth, self.rss.factors.is_empty()) {
            (Some(s), true) => s.factors(&self.rss.windows),
            _ => self.rss.factors.clone(),
        }
    }

    pub fn subgroup(&self) -> Result<Option<Subgroup>> {
        self.rss.subgroup.as_deref().map(str::parse).transpose()
    }

    /// Copy with every per-stage seed overwritten from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = self.seed;
        if let Some(synth) = c.synth.as_mut() {
            synth.seed = stage_seed(s, "synth");
        }
        c.encoder.seed = stage_seed(s, "encoder-init");
        c.simcse.seed = stage_seed(s, "train-encoder");
        c.pooler.train.seed = stage_seed(s, "train-pooler");
        c.split.seed = stage_seed(s, "split");
        c.probe.seed = stage_seed(s, "fit-probe");
        c
    }

    /// Checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        if self.events.is_none() && self.synth.is_none() {
            return Err(Error::Config("either `events` or a `[synth]` section is required".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.schema.validate()?;
        self.taxonomy()?.validate()?;
        self.encoder.validate()?;
        self.simcse.validate()?;
        self.pooling.validate()?;
        self.split.validate()?;
        let v = self.representation.variance_target;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Config(format!("variance_target must lie in (0, 1], got {v}")));
        }
        if self.probe.lambda_grid.is_empty() || self.probe.lambda_grid.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("probe lambda_grid must be non-empty and positive".into()));
        }
        if !(self.geometry.t > 0.0) || self.geometry.max_points < 2 {
            return Err(Error::Config("geometry needs t > 0 and max_points >= 2".into()));
        }
        for f in self.factors() {
            f.validate()?;
        }
        self.subgroup()?;
        Ok(())
    }
}
