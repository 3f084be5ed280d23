//! Representation-shift attribution.
//!
//! A factor is removed from a patient's record, the frozen pipeline recomputes
//! the representation, and the score is the change in the probe's decision
//! value. For the logistic probe that change is `cᵀ(r − r′)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cohort::{PatientRecord, VisitRow};
use crate::downstream::{sigmoid, ProbeModel};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pooling::{hybrid_pool, AttentionScorer, PoolingConfig};
use crate::represent::FittedTransform;
use crate::text::{gap_days, matches_any, render_patient, Concept, TemporalScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptScope {
    Medication,
    Comorbidity,
    Both,
}

impl ConceptScope {
    pub fn covers(self, c: Concept) -> bool {
        matches!(
            (self, c),
            (ConceptScope::Both, _)
                | (ConceptScope::Medication, Concept::Medication)
                | (ConceptScope::Comorbidity, Concept::Comorbidity)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorKind {
    TermSet { terms: Vec<String>, concept_scope: ConceptScope },
    RecencyWindow { window_days: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FactorKind,
}

/// True iff the observation span exceeds twice the window.
pub fn temporal_eligibility(patient: &PatientRecord, window_days: u32) -> bool {
    patient.span_days() > 2 * i64::from(window_days)
}

impl FactorSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            FactorKind::TermSet { terms, .. } if terms.iter().all(|t| t.trim().is_empty()) => {
                Err(Error::Config(format!("factor `{}` has no terms", self.name)))
            }
            FactorKind::RecencyWindow { window_days: 0 } => {
                Err(Error::Config(format!("factor `{}` needs a positive window", self.name)))
            }
            _ => Ok(()),
        }
    }

    /// Visits kept after removal. Term factors keep every visit.
    pub fn retained_visits<'a>(&self, patient: &'a PatientRecord) -> Vec<&'a VisitRow> {
        match &self.kind {
            FactorKind::TermSet { .. } => patient.visits.iter().collect(),
            FactorKind::RecencyWindow { window_days } => {
                let latest = patient.latest_date();
                patient
                    .visits
                    .iter()
                    .filter(|v| gap_days(v.visit_date, latest).map_or(true, |g| g > i64::from(*window_days)))
                    .collect()
            }
        }
    }

    /// Terms to drop from the given concept's lists.
    pub fn exclusions_for(&self, concept: Concept) -> &[String] {
        match &self.kind {
            FactorKind::TermSet { terms, concept_scope } if concept_scope.covers(concept) => terms,
            _ => &[],
        }
    }

    /// Term factors: some scoped item matches. Window factors: the patient is eligible.
    pub fn is_present(&self, patient: &PatientRecord) -> bool {
        match &self.kind {
            FactorKind::TermSet { terms, concept_scope } => {
                let lowered: Vec<String> = terms.iter().map(|t| t.to_lowercase()).collect();
                patient.visits.iter().any(|v| {
                    Concept::ALL
                        .iter()
                        .filter(|c| concept_scope.covers(**c))
                        .any(|c| c.items(v).iter().any(|i| matches_any(i, &lowered)))
                })
            }
            FactorKind::RecencyWindow { window_days } => temporal_eligibility(patient, *window_days),
        }
    }
}

/// A model's native decision value on a representation.
pub trait DecisionScore: Sync {
    fn score(&self, r: &[f64]) -> f64;
}

impl DecisionScore for ProbeModel {
    fn score(&self, r: &[f64]) -> f64 {
        self.logit(r)
    }
}

/// Positive-class probability as the decision value.
pub struct ProbabilityScore<'a>(pub &'a ProbeModel);

impl DecisionScore for ProbabilityScore<'_> {
    fn score(&self, r: &[f64]) -> f64 {
        sigmoid(self.0.logit(r))
    }
}

/// `cᵀ(r − r′)`; the intercept cancels.
pub fn rss_score(r_clean: &[f64], r_perturbed: &[f64], probe: &ProbeModel) -> f64 {
    probe.coefficients.iter().zip(r_clean.iter().zip(r_perturbed)).map(|(c, (a, b))| c * (a - b)).sum()
}

/// `f(r) − f(r′)` for any decision score.
pub fn score_shift(f: &dyn DecisionScore, r_clean: &[f64], r_perturbed: &[f64]) -> f64 {
    f.score(r_clean) - f.score(r_perturbed)
}

/// Everything needed to recompute a representation, fixed after training.
#[derive(Clone)]
pub struct FrozenPipeline {
    pub scheme: TemporalScheme,
    pub medication_encoder: Arc<dyn TextEncoder>,
    pub comorbidity_encoder: Arc<dyn TextEncoder>,
    pub pooling: PoolingConfig,
    pub medication_scorer: Option<AttentionScorer>,
    pub comorbidity_scorer: Option<AttentionScorer>,
    pub transform: FittedTransform,
    pub probe: ProbeModel,
}

impl FrozenPipeline {
    fn encoder(&self, c: Concept) -> &dyn TextEncoder {
        match c {
            Concept::Medication => self.medication_encoder.as_ref(),
            Concept::Comorbidity => self.comorbidity_encoder.as_ref(),
        }
    }

    fn scorer(&self, c: Concept) -> Option<&AttentionScorer> {
        match c {
            Concept::Medication => self.medication_scorer.as_ref(),
            Concept::Comorbidity => self.comorbidity_scorer.as_ref(),
        }
    }

    /// Pooled vector per concept for the (possibly perturbed) record.
    pub fn pooled(&self, patient: &PatientRecord, factor: Option<&FactorSpec>) -> Result<[Vec<f64>; 2]> {
        let texts = render_patient(patient, self.scheme, factor)?;
        if texts.is_empty() {
            return Err(Error::Degenerate(format!(
                "removing `{}` leaves patient {} without visits",
                factor.map(|f| f.name.as_str()).unwrap_or(""),
                patient.patient_id
            )));
        }
        let mut out: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (slot, c) in Concept::ALL.into_iter().enumerate() {
            let (sentences, times): (Vec<String>, Vec<_>) =
                texts.iter().filter(|t| t.concept == c).map(|t| (t.text.clone(), t.visit_date)).unzip();
            let embeddings = self.encoder(c).encode_batch(&sentences, Execution::Sequential)?;
            out[slot] = hybrid_pool(&embeddings, &times, &self.pooling, self.scorer(c))?.vector;
        }
        Ok(out)
    }

    pub fn represent(&self, patient: &PatientRecord, factor: Option<&FactorSpec>) -> Result<Vec<f64>> {
        let [m, c] = self.pooled(patient, factor)?;
        self.transform.apply(patient, &m, &c)
    }

    pub fn perturb_and_represent(&self, patient: &PatientRecord, factor: &FactorSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.represent(patient, None)?, self.represent(patient, Some(factor))?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub patient_id: String,
    pub factor_name: String,
    pub score: f64,
    pub factor_present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub factor_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientAttributions {
    pub scores: Vec<AttributionScore>,
    pub excluded: Vec<Exclusion>,
}

/// Score every (patient, factor) pair. Absent factors score exactly 0 without
/// re-encoding; patients emptied by a window removal are excluded and listed.
pub fn attribute_patients(
    pipeline: &FrozenPipeline,
    patients: &[&PatientRecord],
    factors: &[FactorSpec],
    exec: Execution,
) -> Result<PatientAttributions> {
    for f in factors {
        f.validate()?;
    }
    let per_patient = exec.map(patients, |p| -> Result<(Vec<AttributionScore>, Vec<Exclusion>)> {
        let mut scores = Vec::new();
        let mut excluded = Vec::new();
        let mut clean: Option<Vec<f64>> = None;
        for f in factors {
            if !f.is_present(p) {
                scores.push(AttributionScore {
                    patient_id: p.patient_id.clone(),
                    factor_name: f.name.clone(),
                    score: 0.0,
                    factor_present: false,
                });
                continue;
            }
            if clean.is_none() {
                clean = Some(pipeline.represent(p, None)?);
            }
            match pipeline.represent(p, Some(f)) {
                Ok(perturbed) => scores.push(AttributionScore {
                    patient_id: p.patient_id.clone(),
                    factor_name: f.name.clone(),
                    score: rss_score(clean.as_ref().expect("set above"), &perturbed, &pipeline.probe),
                    factor_present: true,
                }),
                Err(Error::Degenerate(reason)) => excluded.push(Exclusion {
                    patient_id: p.patient_id.clone(),
                    factor_name: f.name.clone(),
                    reason,
                }),
                Err(e) => return Err(e),
            }
        }
        Ok((scores, excluded))
    });
    let mut out = PatientAttributions { scores: Vec::new(), excluded: Vec::new() };
    for r in per_patient {
        let (s, e) = r?;
        out.scores.extend(s);
        out.excluded.extend(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgroup {
    pub key: String,
    pub value: String,
}

impl std::str::FromStr for Subgroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("subgroup must look like key=value, got `{s}`")))?;
        let key = k.trim().to_ascii_lowercase();
        if !["sex", "race", "label"].contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown subgroup key `{key}` (sex, race, label)")));
        }
        Ok(Subgroup { key, value: v.trim().to_string() })
    }
}

impl Subgroup {
    pub fn matches(&self, p: &PatientRecord) -> bool {
        match self.key.as_str() {
            "sex" => p.sex == self.value,
            "race" => p.race == self.value,
            "label" => {
                let positive = matches!(self.value.to_ascii_lowercase().as_str(), "positive" | "1" | "true");
                p.label.is_positive() == positive
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortAttribution {
    pub factor_name: String,
    pub n_patients_with_factor: usize,
    pub mean_abs: f64,
    pub mean_signed: f64,
    /// Sample standard deviation of the scores.
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressedFactor {
    pub factor_name: String,
    pub n_patients_with_factor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub subgroup: Option<Subgroup>,
    pub min_support: usize,
    pub aggregates: Vec<CohortAttribution>,
    pub suppressed: Vec<SuppressedFactor>,
    pub patient_scores: Vec<AttributionScore>,
    pub excluded: Vec<Exclusion>,
}

pub fn aggregate(factor_name: &str, scores: &[f64]) -> CohortAttribution {
    let n = scores.len();
    let nf = n.max(1) as f64;
    let mean_signed = scores.iter().sum::<f64>() / nf;
    let mean_abs = scores.iter().map(|s| s.abs()).sum::<f64>() / nf;
    let dispersion = if n > 1 {
        (scores.iter().map(|s| (s - mean_signed).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    CohortAttribution { factor_name: factor_name.to_string(), n_patients_with_factor: n, mean_abs, mean_signed, dispersion }
}

/// Presence-conditioned aggregates over the attribution split, optionally
/// restricted to a subgroup. Factors under `min_support` are suppressed from
/// the aggregates but their patient-level scores are kept.
pub fn cohort_attribution(
    patients: &[&PatientRecord],
    attributions: &PatientAttributions,
    factors: &[FactorSpec],
    min_support: usize,
    subgroup: Option<&Subgroup>,
) -> Result<AttributionReport> {
    if patients.is_empty() {
        return Err(Error::Data("attribution split is empty".into()));
    }
    let members: BTreeSet<&str> = patients
        .iter()
        .filter(|p| subgroup.is_none_or(|s| s.matches(p)))
        .map(|p| p.patient_id.as_str())
        .collect();
    let mut by_factor: BTreeMap<&str, Vec<f64>> = factors.iter().map(|f| (f.name.as_str(), Vec::new())).collect();
    for s in &attributions.scores {
        if s.factor_present && members.contains(s.patient_id.as_str()) {
            if let Some(v) = by_factor.get_mut(s.factor_name.as_str()) {
                v.push(s.score);
            }
        }
    }
    let mut report = AttributionReport {
        subgroup: subgroup.cloned(),
        min_support,
        aggregates: Vec::new(),
        suppressed: Vec::new(),
        patient_scores: attributions
            .scores
            .iter()
            .filter(|s| members.contains(s.patient_id.as_str()))
            .cloned()
            .collect(),
        excluded: attributions.excluded.clone(),
    };
    for f in factors {
        let scores = &by_factor[f.name.as_str()];
        if scores.len() < min_support {
            report.suppressed.push(SuppressedFactor { factor_name: f.name.clone(), n_patients_with_factor: scores.len() });
        } else {
            report.aggregates.push(aggregate(&f.name, scores));
        }
    }
    Ok(report)
}
