//! Synthetic longitudinal cohorts with planted label associations.
//!
//! Every visit carries an anchor diagnosis. Positive patients switch to a
//! positive-label anchor term from a late visit onwards. Medication and
//! comorbidity terms are assigned per patient with class-conditional
//! probabilities and then spread over that patient's visits. Positive
//! patients may also get a shorter inter-visit gap range, which is the only
//! purely temporal signal in the generator.

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DiagnosisTaxonomy, EventRecord};
use crate::rss::{ConceptScope, FactorKind, FactorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTerm {
    /// Canonical name; also the substring used to find the term again.
    pub name: String,
    /// Strings written to the events file. Empty means `name` itself.
    #[serde(default)]
    pub variants: Vec<String>,
    pub p_positive: f64,
    pub p_negative: f64,
    /// Restrict positive patients' mentions to the last `recency_days` before their latest visit.
    #[serde(default)]
    pub recency_days: Option<u32>,
    /// Overrides the config-wide per-visit rate for this term.
    #[serde(default)]
    pub per_visit_rate: Option<f64>,
}

impl SynthTerm {
    fn new(name: &str, variants: &[&str], p_positive: f64, p_negative: f64) -> Self {
        Self {
            name: name.into(),
            variants: variants.iter().map(|s| s.to_string()).collect(),
            p_positive,
            p_negative,
            recency_days: None,
            per_visit_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub value: String,
    pub weight: f64,
}

fn cats(items: &[(&str, f64)]) -> Vec<Category> {
    items.iter().map(|(v, w)| Category { value: v.to_string(), weight: *w }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub positive_rate: f64,
    /// Inclusive range of visits per patient.
    pub visits: [usize; 2],
    /// Inclusive inter-visit gap range in days.
    pub gap_days: [u32; 2],
    /// Gap range leading into each visit from chronic onset onward (positives only).
    pub positive_gap_days: Option<[u32; 2]>,
    /// Probability that a patient holding a term mentions it on a given visit.
    pub per_visit_rate: f64,
    /// Events are dated up to this many days away from their visit.
    pub event_offset_days: u32,
    /// Probability of an unrelated diagnosis between two visits at least 10 days apart.
    pub noise_rate: f64,
    pub noise_diagnosis: String,
    pub start_date: NaiveDate,
    pub start_spread_days: u32,
    pub anchor_terms: Vec<String>,
    pub positive_terms: Vec<String>,
    pub medications: Vec<SynthTerm>,
    pub comorbidities: Vec<SynthTerm>,
    pub sex: Vec<Category>,
    pub race: Vec<Category>,
    pub age: [i32; 2],
    pub missing_age_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut erenumab = SynthTerm::new("erenumab", &["erenumab-aooe 70 MG/ML Auto-Injector"], 0.35, 0.1);
        erenumab.recency_days = Some(90);
        let mut botox = SynthTerm::new(
            "onabotulinumtoxinA",
            &["onabotulinumtoxinA 100 UNT Injection", "onabotulinumtoxinA 200 UNT Injection"],
            0.8,
            0.05,
        );
        botox.per_visit_rate = Some(0.9);
        Self {
            n_patients: 2000,
            positive_rate: 0.19,
            visits: [3, 10],
            gap_days: [30, 150],
            positive_gap_days: Some([7, 45]),
            per_visit_rate: 0.5,
            event_offset_days: 2,
            noise_rate: 0.2,
            noise_diagnosis: "Flu".into(),
            start_date: NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date"),
            start_spread_days: 1500,
            anchor_terms: vec![
                "Migraine without aura".into(),
                "Migraine with aura".into(),
                "Unspecified migraine".into(),
                "Menstrual migraine".into(),
            ],
            positive_terms: vec!["Chronic migraine without aura".into(), "Chronic migraine with aura".into()],
            medications: vec![
                botox,
                SynthTerm::new("topiramate", &["topiramate 25 MG Oral Tablet", "topiramate 50 MG Oral Tablet"], 0.45, 0.2),
                SynthTerm::new(
                    "acetaminophen",
                    &["acetaminophen 325 MG Oral Tablet", "acetaminophen 500 MG Oral Tablet"],
                    0.4,
                    0.4,
                ),
                erenumab,
                SynthTerm::new("ibuprofen", &["ibuprofen 400 MG Oral Tablet", "ibuprofen 600 MG Oral Tablet"], 0.3, 0.3),
                SynthTerm::new("sumatriptan", &["sumatriptan 50 MG Oral Tablet", "sumatriptan 6 MG/0.5ML Injection"], 0.35, 0.3),
            ],
            comorbidities: vec![
                SynthTerm::new("Depression", &[], 0.5, 0.25),
                SynthTerm::new("Insomnia", &[], 0.3, 0.3),
                SynthTerm::new("Anxiety", &[], 0.35, 0.3),
                SynthTerm::new("Hypertension", &[], 0.2, 0.2),
            ],
            sex: cats(&[("Female", 0.8), ("Male", 0.2)]),
            race: cats(&[("White", 0.6), ("Black", 0.15), ("Asian", 0.05), ("Other", 0.1), ("Unknown", 0.1)]),
            age: [18, 80],
            missing_age_rate: 0.02,
            seed: 42,
        }
    }
}

fn check_prob(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{what} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_range<T: PartialOrd + std::fmt::Debug>(what: &str, r: &[T; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(Error::Config(format!("{what} range is empty: {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 4 {
            return Err(Error::Config("n_patients must be >= 4".into()));
        }
        if self.visits[0] == 0 {
            return Err(Error::Config("patients need at least one visit".into()));
        }
        check_range("visits", &self.visits)?;
        check_range("gap_days", &self.gap_days)?;
        check_range("age", &self.age)?;
        check_prob("positive_rate", self.positive_rate)?;
        check_prob("per_visit_rate", self.per_visit_rate)?;
        check_prob("noise_rate", self.noise_rate)?;
        check_prob("missing_age_rate", self.missing_age_rate)?;
        for g in std::iter::once(&self.gap_days).chain(self.positive_gap_days.as_ref()) {
            check_range("gap_days", g)?;
            if g[0] <= 2 * self.event_offset_days {
                return Err(Error::Config(format!(
                    "minimum gap {} must exceed twice the event offset {}",
                    g[0], self.event_offset_days
                )));
            }
        }
        if self.anchor_terms.is_empty() || self.positive_terms.is_empty() {
            return Err(Error::Config("anchor_terms and positive_terms must be non-empty".into()));
        }
        for t in self.medications.iter().chain(&self.comorbidities) {
            check_prob(&format!("{} p_positive", t.name), t.p_positive)?;
            check_prob(&format!("{} p_negative", t.name), t.p_negative)?;
            if let Some(r) = t.per_visit_rate {
                check_prob(&format!("{} per_visit_rate", t.name), r)?;
            }
        }
        for (what, c) in [("sex", &self.sex), ("race", &self.race)] {
            if c.is_empty() || c.iter().any(|x| !(x.weight >= 0.0)) || c.iter().all(|x| x.weight == 0.0) {
                return Err(Error::Config(format!("{what} needs non-negative weights with a positive total")));
            }
        }
        self.taxonomy().validate()
    }

    pub fn taxonomy(&self) -> DiagnosisTaxonomy {
        DiagnosisTaxonomy {
            anchor_terms: self.anchor_terms.iter().chain(&self.positive_terms).cloned().collect(),
            positive_label_terms: self.positive_terms.iter().cloned().collect(),
            comorbidity_terms: self.comorbidities.iter().flat_map(term_strings).collect(),
        }
    }

    /// One term factor per medication and comorbidity, plus recency windows.
    pub fn factors(&self, windows: &[u32]) -> Vec<FactorSpec> {
        let mut out = Vec::new();
        for (terms, scope) in [(&self.medications, ConceptScope::Medication), (&self.comorbidities, ConceptScope::Comorbidity)] {
            for t in terms {
                out.push(FactorSpec {
                    name: t.name.clone(),
                    kind: FactorKind::TermSet { terms: vec![t.name.clone()], concept_scope: scope },
                });
            }
        }
        for &w in windows {
            out.push(FactorSpec { name: format!("last_{w}_days"), kind: FactorKind::RecencyWindow { window_days: w } });
        }
        out
    }
}

fn term_strings(t: &SynthTerm) -> Vec<String> {
    if t.variants.is_empty() {
        vec![t.name.clone()]
    } else {
        t.variants.clone()
    }
}

fn pick<'a, R: Rng>(c: &'a [Category], rng: &mut R) -> &'a str {
    &c.choose_weighted(rng, |x| x.weight).expect("validated weights").value
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub name: String,
    pub p_positive: f64,
    pub p_negative: f64,
    pub recency_days: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub patient_id: String,
    pub positive: bool,
    pub n_visits: usize,
    pub factors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_patients: usize,
    pub realized_positive_rate: f64,
    pub effects: Vec<PlantedEffect>,
    pub patients: Vec<ManifestPatient>,
}

pub fn generate(config: &SynthConfig) -> Result<(Vec<EventRecord>, SynthManifest)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.n_patients.to_string().len().max(5);
    let mut events = Vec::new();
    let mut patients = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let id = format!("S{:0width$}", i + 1);
        let positive = rng.random_bool(config.positive_rate);
        let n = rng.random_range(config.visits[0]..=config.visits[1]);
        let onset = if positive { rng.random_range(n / 3..n) } else { n };
        let mut dates = Vec::with_capacity(n);
        let mut d = config.start_date + Duration::days(rng.random_range(0..=i64::from(config.start_spread_days)));
        for v in 0..n {
            if v > 0 {
                let gaps = match config.positive_gap_days {
                    Some(g) if v >= onset => g,
                    _ => config.gap_days,
                };
                d += Duration::days(rng.random_range(gaps[0]..=gaps[1]) as i64);
            }
            dates.push(d);
        }
        let latest = dates[n - 1];
        let sex = pick(&config.sex, &mut rng).to_string();
        let race = pick(&config.race, &mut rng).to_string();
        let age_last = rng.random_range(config.age[0]..=config.age[1]);
        let age_missing = rng.random_bool(config.missing_age_rate);
        let age_at = |date: NaiveDate| (!age_missing).then(|| age_last - ((latest - date).num_days() / 365) as i32);

        // (date, sequence, record) so same-day events keep generation order
        let mut rows: Vec<(NaiveDate, EventRecord)> = Vec::new();
        let mut push = |date: NaiveDate, medication: Option<String>, diagnosis: Option<String>| {
            rows.push((
                date,
                EventRecord {
                    patient_id: id.clone(),
                    age: age_at(date),
                    sex: sex.clone(),
                    race: race.clone(),
                    visit_date: date,
                    medication,
                    diagnosis,
                },
            ));
        };
        for (v, &date) in dates.iter().enumerate() {
            let pool = if v >= onset { &config.positive_terms } else { &config.anchor_terms };
            push(date, None, Some(pool.choose(&mut rng).expect("non-empty").clone()));
        }
        let mut held = Vec::new();
        for (terms, is_med) in [(&config.medications, true), (&config.comorbidities, false)] {
            for t in terms {
                let p = if positive { t.p_positive } else { t.p_negative };
                if !rng.random_bool(p) {
                    continue;
                }
                held.push(t.name.clone());
                let eligible: Vec<usize> = match (t.recency_days, positive) {
                    (Some(r), true) => (0..n).filter(|&v| (latest - dates[v]).num_days() <= i64::from(r)).collect(),
                    _ => (0..n).collect(),
                };
                let rate = t.per_visit_rate.unwrap_or(config.per_visit_rate);
                let mut chosen: Vec<usize> = eligible.iter().copied().filter(|_| rng.random_bool(rate)).collect();
                if chosen.is_empty() {
                    chosen.push(*eligible.choose(&mut rng).expect("latest visit is always eligible"));
                }
                let variants = term_strings(t);
                for v in chosen {
                    let off = rng.random_range(-(config.event_offset_days as i64)..=config.event_offset_days as i64);
                    let s = variants.choose(&mut rng).expect("non-empty").clone();
                    let date = dates[v] + Duration::days(off);
                    if is_med {
                        push(date, Some(s), None);
                    } else {
                        push(date, None, Some(s));
                    }
                }
            }
        }
        for w in dates.windows(2) {
            let gap = (w[1] - w[0]).num_days();
            if gap >= 10 && rng.random_bool(config.noise_rate) {
                push(w[0] + Duration::days(gap / 2), None, Some(config.noise_diagnosis.clone()));
            }
        }
        rows.sort_by_key(|(d, _)| *d);
        events.extend(rows.into_iter().map(|(_, r)| r));
        patients.push(ManifestPatient { patient_id: id, positive, n_visits: n, factors: held });
    }
    let realized = patients.iter().filter(|p| p.positive).count() as f64 / config.n_patients as f64;
    let effects = config
        .medications
        .iter()
        .chain(&config.comorbidities)
        .map(|t| PlantedEffect {
            name: t.name.clone(),
            p_positive: t.p_positive,
            p_negative: t.p_negative,
            recency_days: t.recency_days,
        })
        .collect();
    Ok((
        events,
        SynthManifest { seed: config.seed, n_patients: config.n_patients, realized_positive_rate: realized, effects, patients },
    ))
}
