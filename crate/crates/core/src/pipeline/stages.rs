//! File-backed stages, each resumable from the artifacts of its predecessors.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::PipelineConfig;
use super::experiment::{
    encode_concept, fit_transform, make_split, merge_pooled, pool_sequences, represent_cohort,
    train_concept, train_scorer, visit_sequences, BaselineFeatures, EncodedConcept, GeometrySettings,
};
use super::plots;
use crate::cohort::{build_cohort, cohort_summary, Cohort, PatientRecord};
use crate::downstream::{evaluate, fit_probe, ProbeFit, Split};
use crate::encoder::io::{is_params_file, load_params, load_prgt, save_params, save_prgt, sidecar_path, RowMeta};
use crate::encoder::{ConceptEncoders, EmbeddingMatrix, EncoderSpec, ExternalEncoder, ReferenceEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::ingest::{parse_events, read_jsonl, write_events_csv, write_jsonl, EventRecord, RejectReason, Rejection};
use crate::pooling::{AttentionScorer, ScorerReport};
use crate::represent::{BaselineKind, FittedTransform, RepresentationMatrix};
use crate::rss::{attribute_patients, cohort_attribution, AttributionReport, FactorSpec, FrozenPipeline};
use crate::synth::generate;
use crate::text::{render_cohort, Concept, VisitText};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    BuildCohort,
    Textualize,
    TrainEncoder,
    Encode,
    TrainPooler,
    Pool,
    Represent,
    FitProbe,
    Evaluate,
    Geometry,
    Rss,
    EmitPlots,
}

impl Stage {
    pub const ALL: [Stage; 14] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::BuildCohort,
        Stage::Textualize,
        Stage::TrainEncoder,
        Stage::Encode,
        Stage::TrainPooler,
        Stage::Pool,
        Stage::Represent,
        Stage::FitProbe,
        Stage::Evaluate,
        Stage::Geometry,
        Stage::Rss,
        Stage::EmitPlots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::BuildCohort => "build-cohort",
            Stage::Textualize => "textualize",
            Stage::TrainEncoder => "train-encoder",
            Stage::Encode => "encode",
            Stage::TrainPooler => "train-pooler",
            Stage::Pool => "pool",
            Stage::Represent => "represent",
            Stage::FitProbe => "fit-probe",
            Stage::Evaluate => "evaluate",
            Stage::Geometry => "geometry",
            Stage::Rss => "rss",
            Stage::EmitPlots => "emit-plots",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Every file a stage may read or write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Artifact {
    Events,
    SynthManifest,
    Records,
    IngestReport,
    Cohort,
    CohortSummary,
    Split,
    Texts,
    Encoder(Concept),
    EncoderReport(Concept),
    Embeddings(Concept),
    Scorer(Concept),
    ScorerReport(Concept),
    Pooled(Concept),
    Transform,
    Representation,
    Probe,
    Baselines,
    Metrics,
    Geometry,
    Rss,
    Plots,
}

impl Artifact {
    pub fn file_name(self) -> String {
        match self {
            Artifact::Events => "events.csv".into(),
            Artifact::SynthManifest => "synth_manifest.json".into(),
            Artifact::Records => "records.jsonl".into(),
            Artifact::IngestReport => "ingest_report.json".into(),
            Artifact::Cohort => "cohort.jsonl".into(),
            Artifact::CohortSummary => "cohort_summary.json".into(),
            Artifact::Split => "split.json".into(),
            Artifact::Texts => "texts.jsonl".into(),
            Artifact::Encoder(c) => format!("encoder.{}.prge", c.short()),
            Artifact::EncoderReport(c) => format!("encoder.{}.report.json", c.short()),
            Artifact::Embeddings(c) => format!("embeddings.{}.prgt", c.short()),
            Artifact::Scorer(c) => format!("scorer.{}.json", c.short()),
            Artifact::ScorerReport(c) => format!("scorer.{}.report.json", c.short()),
            Artifact::Pooled(c) => format!("pooled.{}.prgt", c.short()),
            Artifact::Transform => "transform.json".into(),
            Artifact::Representation => "representation.json".into(),
            Artifact::Probe => "probe.json".into(),
            Artifact::Baselines => "baselines.json".into(),
            Artifact::Metrics => "metrics.json".into(),
            Artifact::Geometry => "geometry.json".into(),
            Artifact::Rss => "rss.json".into(),
            Artifact::Plots => "plots".into(),
        }
    }

    /// The stage that writes this artifact.
    pub fn producer(self) -> Stage {
        match self {
            Artifact::Events | Artifact::SynthManifest => Stage::Synth,
            Artifact::Records | Artifact::IngestReport => Stage::Ingest,
            Artifact::Cohort | Artifact::CohortSummary | Artifact::Split => Stage::BuildCohort,
            Artifact::Texts => Stage::Textualize,
            Artifact::Encoder(_) | Artifact::EncoderReport(_) => Stage::TrainEncoder,
            Artifact::Embeddings(_) => Stage::Encode,
            Artifact::Scorer(_) | Artifact::ScorerReport(_) => Stage::TrainPooler,
            Artifact::Pooled(_) => Stage::Pool,
            Artifact::Transform | Artifact::Representation => Stage::Represent,
            Artifact::Probe | Artifact::Baselines => Stage::FitProbe,
            Artifact::Metrics => Stage::Evaluate,
            Artifact::Geometry => Stage::Geometry,
            Artifact::Rss => Stage::Rss,
            Artifact::Plots => Stage::EmitPlots,
        }
    }
}

/// Per-invocation knobs that are not part of the persisted config.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Factor removed while textualizing.
    pub exclude: Option<FactorSpec>,
    /// Restrict encoder training, encoding and pooling to one concept.
    pub concept: Option<Concept>,
    /// Parameter file or external-encoder spec used by `encode` and `rss`.
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// Every output hash keyed by file, for reproducibility checks.
    pub fn output_hashes(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.outputs.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub data_rows: usize,
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedProbe {
    pub fit: ProbeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedBaseline {
    pub features: BaselineFeatures,
    pub fit: ProbeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
    pub lambda: f64,
    /// Validation AUC per CV fold at the selected strength.
    pub per_fold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub model: MetricsEntry,
    pub baselines: BTreeMap<String, MetricsEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub factor: String,
    pub mean_abs: f64,
    pub mean_signed: f64,
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssOutput {
    pub report: AttributionReport,
    pub plot: Vec<PlotRow>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(items, BufWriter::new(File::create(path)?))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

/// Load an encoder from a parameter file or a JSON/TOML external spec.
pub fn load_encoder(path: &Path) -> Result<Arc<dyn TextEncoder>> {
    if is_params_file(path) {
        return Ok(Arc::new(load_params(path)?));
    }
    let text = fs::read_to_string(path)?;
    let spec: EncoderSpec = serde_json::from_str(&text)
        .or_else(|_| toml::from_str(&text))
        .map_err(|e| Error::Config(format!("{} is neither encoder parameters nor an encoder spec: {e}", path.display())))?;
    spec_encoder(&spec)
}

fn spec_encoder(spec: &EncoderSpec) -> Result<Arc<dyn TextEncoder>> {
    match (ExternalEncoder::from_spec(spec)?, spec) {
        (Some(e), _) => Ok(Arc::new(e)),
        (None, EncoderSpec::Reference { path }) => Ok(Arc::new(load_params(path)?)),
        (None, _) => unreachable!("non-reference specs always build an external encoder"),
    }
}

/// A pipeline bound to an output directory.
pub struct Runner {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
    pub overrides: BTreeMap<Artifact, PathBuf>,
    pub options: StageOptions,
    touched: RefCell<Vec<PathBuf>>,
}

impl Runner {
    /// Validates and resolves `cfg`, and creates `out_dir`.
    pub fn new(cfg: &PipelineConfig, out_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            cfg: cfg.resolved(),
            out_dir: out_dir.to_path_buf(),
            overrides: BTreeMap::new(),
            options: StageOptions::default(),
            touched: RefCell::new(Vec::new()),
        })
    }

    pub fn with_override(mut self, a: Artifact, path: PathBuf) -> Self {
        self.overrides.insert(a, path);
        self
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.overrides.get(&a).cloned().unwrap_or_else(|| self.out_dir.join(a.file_name()))
    }

    fn events_input(&self) -> PathBuf {
        match (self.overrides.get(&Artifact::Events), &self.cfg.events) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => p.clone(),
            (None, None) => self.path(Artifact::Events),
        }
    }

    fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("run_manifest.json")
    }

    pub fn config_sha256(&self) -> Result<String> {
        Ok(sha256_bytes(self.cfg.to_toml()?.as_bytes()))
    }

    /// Path of an upstream artifact, or an error naming the stage to run.
    fn require(&self, a: Artifact) -> Result<PathBuf> {
        let p = if a == Artifact::Events { self.events_input() } else { self.path(a) };
        if !p.exists() {
            return Err(Error::MissingArtifact { stage: a.producer().name().into(), path: p });
        }
        self.touched.borrow_mut().push(p.clone());
        Ok(p)
    }

    fn concepts(&self) -> Vec<Concept> {
        match self.options.concept {
            Some(c) => vec![c],
            None => Concept::ALL.to_vec(),
        }
    }

    pub fn run(&self, stage: Stage) -> Result<StageRecord> {
        log::info!("stage {stage}");
        self.touched.borrow_mut().clear();
        let start = Instant::now();
        let outputs = self.execute(stage)?;
        let wall_time_ms = start.elapsed().as_millis() as u64;
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            let mut out = BTreeMap::new();
            for p in paths {
                let files: Vec<PathBuf> = if p.is_dir() {
                    let mut v: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
                    v.sort();
                    v
                } else {
                    vec![p.clone()]
                };
                for f in files {
                    let key = f.strip_prefix(&self.out_dir).unwrap_or(&f).display().to_string();
                    out.insert(key, sha256_file(&f)?);
                }
            }
            Ok(out)
        };
        let inputs = self.touched.borrow().clone();
        let record = StageRecord {
            stage: stage.name().into(),
            inputs: hash_all(&inputs)?,
            outputs: hash_all(&outputs)?,
            wall_time_ms,
        };
        self.record(record.clone())?;
        Ok(record)
    }

    fn record(&self, rec: StageRecord) -> Result<()> {
        let path = self.manifest_path();
        let config_sha256 = self.config_sha256()?;
        let mut m = match read_json::<RunManifest>(&path) {
            Ok(m) if m.config_sha256 == config_sha256 => m,
            _ => RunManifest { config_sha256, seed: self.cfg.seed, stages: Vec::new() },
        };
        m.stages.retain(|s| s.stage != rec.stage);
        m.stages.push(rec);
        m.stages.sort_by_key(|s| s.stage.parse::<Stage>().ok());
        write_json(&path, &m)
    }

    /// Stages executed by `run-all` for this config.
    pub fn plan(&self) -> Vec<Stage> {
        let mut plan = Vec::new();
        if self.cfg.synth.is_some() && self.cfg.events.is_none() && !self.overrides.contains_key(&Artifact::Events) {
            plan.push(Stage::Synth);
        }
        plan.extend([Stage::Ingest, Stage::BuildCohort, Stage::Textualize]);
        if self.cfg.external_encoder.is_none() {
            plan.push(Stage::TrainEncoder);
        }
        plan.push(Stage::Encode);
        if self.cfg.pooler.enabled {
            plan.push(Stage::TrainPooler);
        }
        plan.extend([
            Stage::Pool,
            Stage::Represent,
            Stage::FitProbe,
            Stage::Evaluate,
            Stage::Geometry,
            Stage::Rss,
            Stage::EmitPlots,
        ]);
        plan
    }

    pub fn run_all(&self) -> Result<RunManifest> {
        let _ = fs::remove_file(self.manifest_path());
        fs::write(self.out_dir.join("config.resolved.toml"), self.cfg.to_toml()?)?;
        for stage in self.plan() {
            self.run(stage)?;
        }
        read_json(&self.manifest_path())
    }

    fn execute(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Ingest => self.ingest(),
            Stage::BuildCohort => self.build_cohort(),
            Stage::Textualize => self.textualize(),
            Stage::TrainEncoder => self.train_encoder(),
            Stage::Encode => self.encode(),
            Stage::TrainPooler => self.train_pooler(),
            Stage::Pool => self.pool(),
            Stage::Represent => self.represent(),
            Stage::FitProbe => self.fit_probe(),
            Stage::Evaluate => self.evaluate(),
            Stage::Geometry => self.geometry(),
            Stage::Rss => self.rss(),
            Stage::EmitPlots => self.emit_plots(),
        }
    }

    fn synth(&self) -> Result<Vec<PathBuf>> {
        let sc = self
            .cfg
            .synth
            .as_ref()
            .ok_or_else(|| Error::Config("the synth stage needs a [synth] section".into()))?;
        let (events, manifest) = generate(sc)?;
        let (ep, mp) = (self.path(Artifact::Events), self.path(Artifact::SynthManifest));
        write_events_csv(&events, BufWriter::new(File::create(&ep)?))?;
        write_json(&mp, &manifest)?;
        Ok(vec![ep, mp])
    }

    fn ingest(&self) -> Result<Vec<PathBuf>> {
        let input = self.require(Artifact::Events)?;
        let outcome = parse_events(BufReader::new(File::open(&input)?), &self.cfg.schema)?;
        let mut by_reason: BTreeMap<RejectReason, usize> = RejectReason::ALL.iter().map(|&r| (r, 0)).collect();
        for r in &outcome.rejected {
            *by_reason.entry(r.reason).or_default() += 1;
        }
        if !outcome.rejected.is_empty() {
            log::warn!("{} of {} rows rejected", outcome.rejected.len(), outcome.data_rows);
        }
        let (rp, ip) = (self.path(Artifact::Records), self.path(Artifact::IngestReport));
        write_lines(&rp, &outcome.records)?;
        write_json(
            &ip,
            &IngestReport {
                data_rows: outcome.data_rows,
                accepted: outcome.records.len(),
                rejected_by_reason: by_reason,
                rejected: outcome.rejected,
            },
        )?;
        Ok(vec![rp, ip])
    }

    fn build_cohort(&self) -> Result<Vec<PathBuf>> {
        let records: Vec<EventRecord> = read_lines(&self.require(Artifact::Records)?)?;
        let build = build_cohort(&records, &self.cfg.taxonomy()?, self.cfg.window_radius_days)?;
        if build.dropped_without_anchor > 0 {
            log::info!("{} patients have no anchor diagnosis and were dropped", build.dropped_without_anchor);
        }
        let cohort = build.cohort;
        let split = make_split(&cohort, &self.cfg)?;
        let (cp, sp, xp) = (self.path(Artifact::Cohort), self.path(Artifact::CohortSummary), self.path(Artifact::Split));
        write_lines(&cp, &cohort.patients)?;
        write_json(&sp, &cohort_summary(&cohort)?)?;
        write_json(&xp, &split)?;
        Ok(vec![cp, sp, xp])
    }

    fn cohort(&self) -> Result<Cohort> {
        let patients: Vec<PatientRecord> = read_lines(&self.require(Artifact::Cohort)?)?;
        Ok(Cohort { patients, taxonomy: self.cfg.taxonomy()?, window_radius_days: self.cfg.window_radius_days })
    }

    fn split(&self) -> Result<Split> {
        read_json(&self.require(Artifact::Split)?)
    }

    fn textualize(&self) -> Result<Vec<PathBuf>> {
        let cohort = self.cohort()?;
        let texts = render_cohort(&cohort, self.cfg.scheme, self.options.exclude.as_ref())?;
        let p = self.path(Artifact::Texts);
        write_lines(&p, &texts)?;
        Ok(vec![p])
    }

    fn texts(&self) -> Result<Vec<VisitText>> {
        read_lines(&self.require(Artifact::Texts)?)
    }

    fn train_encoder(&self) -> Result<Vec<PathBuf>> {
        if self.cfg.external_encoder.is_some() {
            return Err(Error::Config("an external encoder is configured; it cannot be trained here".into()));
        }
        let texts = self.texts()?;
        let mut encoders = ConceptEncoders::new(&self.cfg.encoder)?;
        let mut out = Vec::new();
        for c in self.concepts() {
            if self.cfg.train_encoder {
                let report = train_concept(&texts, &self.cfg, c, &mut encoders)?;
                let rp = self.path(Artifact::EncoderReport(c));
                write_json(&rp, &report)?;
                out.push(rp);
            }
            let p = self.path(Artifact::Encoder(c));
            save_params(encoders.get(c), &p)?;
            out.push(p);
        }
        Ok(out)
    }

    /// The encoder used for inference on concept `c`.
    fn encoder_for(&self, c: Concept) -> Result<Arc<dyn TextEncoder>> {
        if let Some(p) = &self.options.encoder {
            return load_encoder(p);
        }
        if let Some(spec) = &self.cfg.external_encoder {
            return spec_encoder(spec);
        }
        Ok(Arc::new(load_params(&self.require(Artifact::Encoder(c))?)?))
    }

    fn encode(&self) -> Result<Vec<PathBuf>> {
        let texts = self.texts()?;
        let mut out = Vec::new();
        for c in self.concepts() {
            let enc = self.encoder_for(c)?;
            let e = encode_concept(&texts, c, enc.as_ref(), self.cfg.execution())?;
            let p = self.path(Artifact::Embeddings(c));
            save_prgt(&e.matrix, &p)?;
            write_lines(&sidecar_path(&p), &e.rows)?;
            out.extend([sidecar_path(&p), p]);
        }
        Ok(out)
    }

    fn embeddings(&self, c: Concept) -> Result<EncodedConcept> {
        let p = self.require(Artifact::Embeddings(c))?;
        Ok(EncodedConcept { matrix: load_prgt(&p)?, rows: read_lines(&sidecar_path(&p))? })
    }

    fn train_pooler(&self) -> Result<Vec<PathBuf>> {
        let cohort = self.cohort()?;
        let split = self.split()?;
        let mut out = Vec::new();
        for c in self.concepts() {
            let seqs = visit_sequences(&self.embeddings(c)?)?;
            let (scorer, report): (AttentionScorer, ScorerReport) = train_scorer(&seqs, &cohort, &split, &self.cfg, c)?;
            let (sp, rp) = (self.path(Artifact::Scorer(c)), self.path(Artifact::ScorerReport(c)));
            write_json(&sp, &scorer)?;
            write_json(&rp, &report)?;
            out.extend([sp, rp]);
        }
        Ok(out)
    }

    fn scorer(&self, c: Concept) -> Result<Option<AttentionScorer>> {
        if !self.cfg.pooler.enabled {
            return Ok(None);
        }
        read_json(&self.require(Artifact::Scorer(c))?).map(Some)
    }

    fn pool(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for c in self.concepts() {
            let seqs = visit_sequences(&self.embeddings(c)?)?;
            let scorer = self.scorer(c)?;
            let pooled = pool_sequences(&seqs, &self.cfg, scorer.as_ref(), self.cfg.execution())?;
            let dim = pooled.values().next().map_or(0, Vec::len);
            let (ids, rows): (Vec<String>, Vec<Vec<f64>>) = pooled.into_iter().unzip();
            let p = self.path(Artifact::Pooled(c));
            save_prgt(&EmbeddingMatrix::from_rows(dim, &rows)?, &p)?;
            let meta: Vec<RowMeta> = ids
                .into_iter()
                .enumerate()
                .map(|(row, patient_id)| RowMeta { row, patient_id, visit_date: None, concept: Some(c) })
                .collect();
            write_lines(&sidecar_path(&p), &meta)?;
            out.extend([sidecar_path(&p), p]);
        }
        Ok(out)
    }

    fn pooled(&self, c: Concept) -> Result<BTreeMap<String, Vec<f64>>> {
        let p = self.require(Artifact::Pooled(c))?;
        let m = load_prgt(&p)?;
        let meta: Vec<RowMeta> = read_lines(&sidecar_path(&p))?;
        if meta.len() != m.len() {
            return Err(Error::Format(format!("{} and its sidecar disagree on row count", p.display())));
        }
        Ok(meta.into_iter().zip(m.to_rows()).map(|(r, v)| (r.patient_id, v)).collect())
    }

    fn represent(&self) -> Result<Vec<PathBuf>> {
        let cohort = self.cohort()?;
        let split = self.split()?;
        let pooled = merge_pooled(self.pooled(Concept::Medication)?, self.pooled(Concept::Comorbidity)?);
        let tp = self.path(Artifact::Transform);
        let mut out = fit_transform(&cohort, &split, &pooled, &self.cfg)?.save(&tp)?;
        // downstream stages see exactly what was persisted
        let transform = FittedTransform::load(&tp)?;
        let rp = self.path(Artifact::Representation);
        write_json(&rp, &represent_cohort(&cohort, &pooled, &transform)?)?;
        out.push(rp);
        Ok(out)
    }

    fn representation(&self) -> Result<RepresentationMatrix> {
        read_json(&self.require(Artifact::Representation)?)
    }

    fn fit_probe(&self) -> Result<Vec<PathBuf>> {
        let split = self.split()?;
        let train = self.representation()?.select(&split.train);
        let exec = self.cfg.execution();
        let pp = self.path(Artifact::Probe);
        write_json(&pp, &PersistedProbe { fit: fit_probe(&train.rows, &train.labels, &self.cfg.probe, exec)? })?;
        let cohort = self.cohort()?;
        let mut baselines = Vec::new();
        for kind in [BaselineKind::OneHot, BaselineKind::CountBoc] {
            let features = BaselineFeatures::fit(&cohort, &split, &self.cfg, kind)?;
            let m = features.matrix(&cohort)?.select(&split.train);
            baselines.push(PersistedBaseline { fit: fit_probe(&m.rows, &m.labels, &self.cfg.probe, exec)?, features });
        }
        let bp = self.path(Artifact::Baselines);
        write_json(&bp, &baselines)?;
        Ok(vec![pp, bp])
    }

    fn probe(&self) -> Result<ProbeFit> {
        Ok(read_json::<PersistedProbe>(&self.require(Artifact::Probe)?)?.fit)
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let fit = self.probe()?;
        let split = self.split()?;
        let test = self.representation()?.select(&split.test);
        let entry = |fit: &ProbeFit, m: &RepresentationMatrix| -> Result<MetricsEntry> {
            let metrics = evaluate(&fit.model, &m.rows, &m.labels)?;
            Ok(MetricsEntry {
                acc: metrics.acc,
                auc: metrics.auc,
                n: metrics.n,
                lambda: fit.model.l2_strength,
                per_fold: fit
                    .cv
                    .iter()
                    .find(|s| s.lambda == fit.model.l2_strength)
                    .map(|s| s.fold_auc.clone())
                    .unwrap_or_default(),
            })
        };
        let mut report = MetricsReport { model: entry(&fit, &test)?, baselines: BTreeMap::new() };
        let bp = self.path(Artifact::Baselines);
        if bp.exists() {
            self.touched.borrow_mut().push(bp.clone());
            let cohort = self.cohort()?;
            for b in read_json::<Vec<PersistedBaseline>>(&bp)? {
                let m = b.features.matrix(&cohort)?.select(&split.test);
                report.baselines.insert(b.features.name().into(), entry(&b.fit, &m)?);
            }
        }
        let p = self.path(Artifact::Metrics);
        write_json(&p, &report)?;
        Ok(vec![p])
    }

    fn geometry(&self) -> Result<Vec<PathBuf>> {
        let cohort = self.cohort()?;
        let settings = match &self.cfg.external_encoder {
            Some(spec) => {
                let enc = spec_encoder(spec)?;
                super::experiment::geometry_settings(&cohort, self.cfg.scheme, enc.as_ref(), None, &self.cfg)?
            }
            None => {
                let initial = ConceptEncoders::new(&self.cfg.encoder)?.medication;
                let adapted: Option<ReferenceEncoder> = if self.cfg.train_encoder {
                    Some(load_params(&self.require(Artifact::Encoder(Concept::Medication))?)?)
                } else {
                    None
                };
                super::experiment::geometry_settings(
                    &cohort,
                    self.cfg.scheme,
                    &initial,
                    adapted.as_ref().map(|a| a as &dyn TextEncoder),
                    &self.cfg,
                )?
            }
        };
        let p = self.path(Artifact::Geometry);
        write_json::<GeometrySettings>(&p, &settings)?;
        Ok(vec![p])
    }

    fn frozen(&self) -> Result<FrozenPipeline> {
        Ok(FrozenPipeline {
            scheme: self.cfg.scheme,
            medication_encoder: self.encoder_for(Concept::Medication)?,
            comorbidity_encoder: self.encoder_for(Concept::Comorbidity)?,
            pooling: self.cfg.pooling.clone(),
            medication_scorer: self.scorer(Concept::Medication)?,
            comorbidity_scorer: self.scorer(Concept::Comorbidity)?,
            transform: FittedTransform::load(&self.require(Artifact::Transform)?)?,
            probe: self.probe()?.model,
        })
    }

    fn rss(&self) -> Result<Vec<PathBuf>> {
        let cohort = self.cohort()?;
        let split = self.split()?;
        let pipeline = self.frozen()?;
        let factors = self.cfg.factors();
        let patients: Vec<&PatientRecord> =
            cohort.patients.iter().filter(|p| split.attribution.contains(&p.patient_id)).collect();
        let att = attribute_patients(&pipeline, &patients, &factors, self.cfg.execution())?;
        let subgroup = self.cfg.subgroup()?;
        let report = cohort_attribution(&patients, &att, &factors, self.cfg.rss.min_support, subgroup.as_ref())?;
        let plot = report
            .aggregates
            .iter()
            .map(|a| PlotRow {
                factor: a.factor_name.clone(),
                mean_abs: a.mean_abs,
                mean_signed: a.mean_signed,
                dispersion: a.dispersion,
            })
            .collect();
        let p = self.path(Artifact::Rss);
        write_json(&p, &RssOutput { report, plot })?;
        Ok(vec![p])
    }

    fn emit_plots(&self) -> Result<Vec<PathBuf>> {
        let metrics: MetricsReport = read_json(&self.require(Artifact::Metrics)?)?;
        let rss: RssOutput = read_json(&self.require(Artifact::Rss)?)?;
        let dir = self.path(Artifact::Plots);
        fs::create_dir_all(&dir)?;
        plots::write_tables(&dir, &metrics, &rss, &self.cfg.factors())?;
        Ok(vec![dir])
    }
}

