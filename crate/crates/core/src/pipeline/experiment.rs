//! The whole model path held in memory: texts to test metrics.
//!
//! The artifact-backed stages call into these same functions, so an
//! in-memory run and a `run-all` over files produce the same numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{stage_seed, PipelineConfig};
use crate::cohort::{Cohort, PatientRecord};
use crate::downstream::{self, evaluate, fit_probe, GeometryReport, Metrics, ProbeFit, Split};
use crate::encoder::io::RowMeta;
use crate::encoder::{encode_corpus, train_simcse, ConceptEncoders, EmbeddingMatrix, TextEncoder, TrainReport};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pooling::{hybrid_pool, train_attention_scorer, AttentionScorer, ScorerReport, VisitSequence};
use crate::represent::{
    assemble, build_baseline, BaselineKind, BaselineVocab, FittedTransform, RepresentationMatrix, Standardizer,
};
use crate::rss::FrozenPipeline;
use crate::text::{full_text_document, render_cohort, Concept, TemporalScheme, VisitText};

/// Per-concept seed offset so the two encoders never see the same stream.
const COMORBIDITY_SEED_MASK: u64 = 0x5bd1_e995_0000_0001;

pub fn concept_seed(seed: u64, c: Concept) -> u64 {
    match c {
        Concept::Medication => seed,
        Concept::Comorbidity => seed ^ COMORBIDITY_SEED_MASK,
    }
}

pub fn concept_texts(texts: &[VisitText], c: Concept) -> (Vec<String>, Vec<RowMeta>) {
    texts
        .iter()
        .filter(|t| t.concept == c)
        .enumerate()
        .map(|(row, t)| {
            (
                t.text.clone(),
                RowMeta { row, patient_id: t.patient_id.clone(), visit_date: Some(t.visit_date), concept: Some(c) },
            )
        })
        .unzip()
}

/// Fresh encoders, adapted per concept unless training is switched off.
pub fn train_encoders(texts: &[VisitText], cfg: &PipelineConfig) -> Result<(ConceptEncoders, Vec<(Concept, TrainReport)>)> {
    let mut encoders = ConceptEncoders::new(&cfg.encoder)?;
    let mut reports = Vec::new();
    if cfg.train_encoder {
        for c in Concept::ALL {
            reports.push((c, train_concept(texts, cfg, c, &mut encoders)?));
        }
    }
    Ok((encoders, reports))
}

pub fn train_concept(texts: &[VisitText], cfg: &PipelineConfig, c: Concept, encoders: &mut ConceptEncoders) -> Result<TrainReport> {
    let (corpus, _) = concept_texts(texts, c);
    let mut sc = cfg.simcse.clone();
    sc.seed = concept_seed(sc.seed, c);
    log::info!("adapting the {} encoder on {} sentences", c.short(), corpus.len());
    train_simcse(&corpus, &sc, encoders.get_mut(c))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedConcept {
    pub matrix: EmbeddingMatrix,
    pub rows: Vec<RowMeta>,
}

pub fn encode_concept(texts: &[VisitText], c: Concept, encoder: &dyn TextEncoder, exec: Execution) -> Result<EncodedConcept> {
    let (sentences, rows) = concept_texts(texts, c);
    Ok(EncodedConcept { matrix: encode_corpus(&sentences, encoder, exec)?, rows })
}

/// Group embedding rows into per-patient visit sequences, in row order.
pub fn visit_sequences(enc: &EncodedConcept) -> Result<BTreeMap<String, VisitSequence>> {
    if enc.rows.len() != enc.matrix.len() {
        return Err(Error::Dimension { expected: enc.rows.len(), got: enc.matrix.len() });
    }
    let mut out: BTreeMap<String, VisitSequence> = BTreeMap::new();
    for (i, meta) in enc.rows.iter().enumerate() {
        let date = meta
            .visit_date
            .ok_or_else(|| Error::Format(format!("row {i} of the embedding sidecar has no visit date")))?;
        let seq = out
            .entry(meta.patient_id.clone())
            .or_insert_with(|| VisitSequence { embeddings: Vec::new(), times: Vec::new() });
        seq.embeddings.push(enc.matrix.row(i).iter().map(|&x| x as f64).collect());
        seq.times.push(date);
    }
    Ok(out)
}

pub fn pool_sequences(
    seqs: &BTreeMap<String, VisitSequence>,
    cfg: &PipelineConfig,
    scorer: Option<&AttentionScorer>,
    exec: Execution,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let items: Vec<(&String, &VisitSequence)> = seqs.iter().collect();
    let pooled = exec.try_map(&items, |(id, s)| {
        hybrid_pool(&s.embeddings, &s.times, &cfg.pooling, scorer).map(|p| ((*id).clone(), p.vector))
    })?;
    Ok(pooled.into_iter().collect())
}

pub fn make_split(cohort: &Cohort, cfg: &PipelineConfig) -> Result<Split> {
    let ids: Vec<(String, bool)> = cohort.patients.iter().map(|p| (p.patient_id.clone(), p.label.is_positive())).collect();
    downstream::split(&ids, &cfg.split)
}

/// Scorer trained on training-split patients only.
pub fn train_scorer(
    seqs: &BTreeMap<String, VisitSequence>,
    cohort: &Cohort,
    split: &Split,
    cfg: &PipelineConfig,
    c: Concept,
) -> Result<(AttentionScorer, ScorerReport)> {
    let mut train_seqs = Vec::new();
    let mut labels = Vec::new();
    for p in cohort.patients.iter().filter(|p| split.train.contains(&p.patient_id)) {
        let s = seqs
            .get(&p.patient_id)
            .ok_or_else(|| Error::Data(format!("patient {} has no {} embeddings", p.patient_id, c.label())))?;
        train_seqs.push(s.clone());
        labels.push(p.label.is_positive());
    }
    let mut tc = cfg.pooler.train.clone();
    tc.seed = concept_seed(tc.seed, c);
    train_attention_scorer(&train_seqs, &labels, &cfg.pooling, &tc)
}

pub type PooledMap = BTreeMap<(String, Concept), Vec<f64>>;

pub fn merge_pooled(meds: BTreeMap<String, Vec<f64>>, comorb: BTreeMap<String, Vec<f64>>) -> PooledMap {
    let mut out = PooledMap::new();
    for (c, m) in [(Concept::Medication, meds), (Concept::Comorbidity, comorb)] {
        out.extend(m.into_iter().map(|(id, v)| ((id, c), v)));
    }
    out
}

fn members<'a>(cohort: &'a Cohort, ids: &BTreeSet<String>) -> Vec<&'a PatientRecord> {
    cohort.patients.iter().filter(|p| ids.contains(&p.patient_id)).collect()
}

/// Fit the standardize+PCA transform on training patients.
pub fn fit_transform(cohort: &Cohort, split: &Split, pooled: &PooledMap, cfg: &PipelineConfig) -> Result<FittedTransform> {
    let train = members(cohort, &split.train);
    let get = |p: &PatientRecord, c: Concept| {
        pooled
            .get(&(p.patient_id.clone(), c))
            .cloned()
            .ok_or_else(|| Error::Data(format!("patient {} has no pooled {} vector", p.patient_id, c.label())))
    };
    let meds: Vec<Vec<f64>> = train.iter().map(|p| get(p, Concept::Medication)).collect::<Result<_>>()?;
    let comorb: Vec<Vec<f64>> = train.iter().map(|p| get(p, Concept::Comorbidity)).collect::<Result<_>>()?;
    FittedTransform::fit(
        &train,
        &meds,
        &comorb,
        cfg.representation.variance_target,
        cfg.representation.include_demographics,
    )
}

pub fn represent_cohort(cohort: &Cohort, pooled: &PooledMap, transform: &FittedTransform) -> Result<RepresentationMatrix> {
    let all: Vec<&PatientRecord> = cohort.patients.iter().collect();
    assemble(&all, pooled, transform)
}

/// A probe fitted on the training split and scored on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub fit: ProbeFit,
    pub test: Metrics,
}

impl ProbeOutcome {
    /// Validation AUC per fold at the selected strength.
    pub fn per_fold(&self) -> Vec<f64> {
        self.fit
            .cv
            .iter()
            .find(|s| s.lambda == self.fit.model.l2_strength)
            .map(|s| s.fold_auc.clone())
            .unwrap_or_default()
    }
}

pub fn fit_and_test(m: &RepresentationMatrix, split: &Split, cfg: &PipelineConfig, exec: Execution) -> Result<ProbeOutcome> {
    let train = m.select(&split.train);
    let test = m.select(&split.test);
    let fit = fit_probe(&train.rows, &train.labels, &cfg.probe, exec)?;
    let test = evaluate(&fit.model, &test.rows, &test.labels)?;
    Ok(ProbeOutcome { fit, test })
}

/// Baseline vocabulary plus the feature standardizer fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFeatures {
    pub kind: BaselineKind,
    pub vocab: BaselineVocab,
    pub standardizer: Standardizer,
}

impl BaselineFeatures {
    pub fn name(&self) -> &'static str {
        match self.kind {
            BaselineKind::OneHot => "one_hot",
            BaselineKind::CountBoc => "count_boc",
        }
    }

    pub fn fit(cohort: &Cohort, split: &Split, cfg: &PipelineConfig, kind: BaselineKind) -> Result<Self> {
        let train = members(cohort, &split.train);
        let vocab = BaselineVocab::fit(&train, &cfg.baselines);
        let raw = build_baseline(&train, &vocab, kind);
        Ok(Self { kind, standardizer: Standardizer::fit(&raw.rows)?, vocab })
    }

    pub fn matrix(&self, cohort: &Cohort) -> Result<RepresentationMatrix> {
        let all: Vec<&PatientRecord> = cohort.patients.iter().collect();
        let mut m = build_baseline(&all, &self.vocab, self.kind);
        for r in &mut m.rows {
            *r = self.standardizer.apply(r)?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub split: Split,
    pub texts: Vec<VisitText>,
    pub encoders: ConceptEncoders,
    pub simcse: Vec<(Concept, TrainReport)>,
    pub scorers: [Option<AttentionScorer>; 2],
    pub transform: FittedTransform,
    pub representation: RepresentationMatrix,
    pub probe: ProbeOutcome,
    pub baselines: BTreeMap<String, ProbeOutcome>,
}

impl Experiment {
    pub fn frozen(&self, cfg: &PipelineConfig) -> FrozenPipeline {
        FrozenPipeline {
            scheme: cfg.scheme,
            medication_encoder: Arc::new(self.encoders.medication.clone()),
            comorbidity_encoder: Arc::new(self.encoders.comorbidity.clone()),
            pooling: cfg.pooling.clone(),
            medication_scorer: self.scorers[0].clone(),
            comorbidity_scorer: self.scorers[1].clone(),
            transform: self.transform.clone(),
            probe: self.probe.fit.model.clone(),
        }
    }
}

/// Run textualize through evaluation in memory. `cfg` should be resolved.
pub fn run_experiment(cohort: &Cohort, cfg: &PipelineConfig, with_baselines: bool) -> Result<Experiment> {
    let exec = cfg.execution();
    let split = make_split(cohort, cfg)?;
    let texts = render_cohort(cohort, cfg.scheme, None)?;
    let (encoders, simcse) = train_encoders(&texts, cfg)?;
    let mut pooled = Vec::new();
    let mut scorers: [Option<AttentionScorer>; 2] = [None, None];
    for (slot, c) in Concept::ALL.into_iter().enumerate() {
        let seqs = visit_sequences(&encode_concept(&texts, c, encoders.get(c), exec)?)?;
        if cfg.pooler.enabled {
            scorers[slot] = Some(train_scorer(&seqs, cohort, &split, cfg, c)?.0);
        }
        pooled.push(pool_sequences(&seqs, cfg, scorers[slot].as_ref(), exec)?);
    }
    let comorb = pooled.pop().expect("two concepts");
    let meds = pooled.pop().expect("two concepts");
    let pooled = merge_pooled(meds, comorb);
    let transform = fit_transform(cohort, &split, &pooled, cfg)?;
    let representation = represent_cohort(cohort, &pooled, &transform)?;
    let probe = fit_and_test(&representation, &split, cfg, exec)?;
    let mut baselines = BTreeMap::new();
    if with_baselines {
        for kind in [BaselineKind::OneHot, BaselineKind::CountBoc] {
            let b = BaselineFeatures::fit(cohort, &split, cfg, kind)?;
            baselines.insert(b.name().to_string(), fit_and_test(&b.matrix(cohort)?, &split, cfg, exec)?);
        }
    }
    Ok(Experiment { split, texts, encoders, simcse, scorers, transform, representation, probe, baselines })
}

/// Uniformity and spectrum of three embedding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySettings {
    pub full_text: GeometryReport,
    pub visit_text: GeometryReport,
    /// Absent when the encoder was not adapted.
    pub visit_text_simcse: Option<GeometryReport>,
    pub points: usize,
}

fn subsample(items: Vec<String>, max: usize, seed: u64) -> Vec<String> {
    if items.len() <= max {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, items.len(), max).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

/// Full-text documents and visit sentences both go through the medication
/// encoder; visit sentences are the medication sentences.
pub fn geometry_settings(
    cohort: &Cohort,
    scheme: TemporalScheme,
    initial: &dyn TextEncoder,
    adapted: Option<&dyn TextEncoder>,
    cfg: &PipelineConfig,
) -> Result<GeometrySettings> {
    let exec = cfg.execution();
    let g = &cfg.geometry;
    let seed = stage_seed(cfg.seed, "geometry");
    let docs: Vec<String> = cohort.patients.iter().map(|p| full_text_document(p, scheme)).collect::<Result<_>>()?;
    let docs = subsample(docs, g.max_points, seed);
    let (sentences, _) = concept_texts(&render_cohort(cohort, scheme, None)?, Concept::Medication);
    let sentences = subsample(sentences, g.max_points, seed ^ 1);
    let report = |texts: &[String], enc: &dyn TextEncoder| -> Result<GeometryReport> {
        downstream::geometry(&encode_corpus(texts, enc, exec)?.to_rows(), g.t, exec)
    };
    Ok(GeometrySettings {
        full_text: report(&docs, initial)?,
        visit_text: report(&sentences, initial)?,
        visit_text_simcse: adapted.map(|a| report(&sentences, a)).transpose()?,
        points: docs.len().min(sentences.len()),
    })
}
