//! Anchor-centred collapse of raw events into per-visit rows.
//!
//! Every distinct date carrying an anchor diagnosis becomes one visit. A
//! medication or comorbidity event attaches to the nearest anchor within
//! `window_radius_days`; ties go to the earlier anchor.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DiagnosisTaxonomy, EventRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRow {
    pub visit_date: NaiveDate,
    pub medications: Vec<String>,
    pub comorbidities: Vec<String>,
    pub anchor_diagnoses: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: Option<i32>,
    pub sex: String,
    pub race: String,
    pub visits: Vec<VisitRow>,
    pub label: Label,
}

impl PatientRecord {
    pub fn first_date(&self) -> NaiveDate {
        self.visits[0].visit_date
    }

    pub fn latest_date(&self) -> NaiveDate {
        self.visits[self.visits.len() - 1].visit_date
    }

    /// Days between the first and the latest visit.
    pub fn span_days(&self) -> i64 {
        (self.latest_date() - self.first_date()).num_days()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub taxonomy: DiagnosisTaxonomy,
    pub window_radius_days: u32,
}

impl Cohort {
    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients
            .binary_search_by(|p| p.patient_id.as_str().cmp(patient_id))
            .ok()
            .map(|i| &self.patients[i])
    }

    /// Restrict to a subset of ids, keeping cohort order.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Cohort {
        Cohort {
            patients: self.patients.iter().filter(|p| ids.contains(&p.patient_id)).cloned().collect(),
            taxonomy: self.taxonomy.clone(),
            window_radius_days: self.window_radius_days,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortBuild {
    pub cohort: Cohort,
    /// Patients present in the events but without any anchor diagnosis.
    pub dropped_without_anchor: usize,
}

/// Collapse raw events into one [`PatientRecord`] per anchored patient.
///
/// Patients are emitted sorted by id.
pub fn build_cohort(
    events: &[EventRecord],
    taxonomy: &DiagnosisTaxonomy,
    window_radius_days: u32,
) -> Result<CohortBuild> {
    taxonomy.validate()?;
    let mut by_patient: BTreeMap<&str, Vec<(usize, &EventRecord)>> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        by_patient.entry(e.patient_id.as_str()).or_default().push((i, e));
    }

    let mut patients = Vec::with_capacity(by_patient.len());
    let mut dropped = 0;
    for (pid, evs) in by_patient {
        match build_patient(pid, &evs, taxonomy, window_radius_days) {
            Some(p) => patients.push(p),
            None => dropped += 1,
        }
    }
    Ok(CohortBuild {
        cohort: Cohort { patients, taxonomy: taxonomy.clone(), window_radius_days },
        dropped_without_anchor: dropped,
    })
}

fn nearest_anchor(anchors: &[NaiveDate], date: NaiveDate, radius: i64) -> Option<usize> {
    let mut best: Option<(i64, usize)> = None;
    for (i, a) in anchors.iter().enumerate() {
        let d = (date - *a).num_days().abs();
        if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}

fn push_unique(list: &mut Vec<String>, item: &str) {
    if !list.iter().any(|x| x == item) {
        list.push(item.to_string());
    }
}

fn build_patient(
    pid: &str,
    events: &[(usize, &EventRecord)],
    taxonomy: &DiagnosisTaxonomy,
    radius: u32,
) -> Option<PatientRecord> {
    let mut anchors: BTreeMap<NaiveDate, Vec<String>> = BTreeMap::new();
    for (_, e) in events {
        if let Some(d) = e.diagnosis.as_deref().filter(|d| taxonomy.is_anchor(d)) {
            push_unique(anchors.entry(e.visit_date).or_default(), d);
        }
    }
    if anchors.is_empty() {
        return None;
    }
    let anchor_dates: Vec<NaiveDate> = anchors.keys().copied().collect();
    let mut visits: Vec<VisitRow> = anchors
        .into_iter()
        .map(|(visit_date, anchor_diagnoses)| VisitRow {
            visit_date,
            medications: Vec::new(),
            comorbidities: Vec::new(),
            anchor_diagnoses,
        })
        .collect();

    // first occurrence by (date, input order)
    let mut ordered: Vec<&(usize, &EventRecord)> = events.iter().collect();
    ordered.sort_by_key(|(i, e)| (e.visit_date, *i));
    for (_, e) in ordered {
        let Some(slot) = nearest_anchor(&anchor_dates, e.visit_date, radius as i64) else {
            continue;
        };
        if let Some(m) = &e.medication {
            push_unique(&mut visits[slot].medications, m);
        } else if let Some(d) = e.diagnosis.as_deref().filter(|d| taxonomy.is_comorbidity(d)) {
            push_unique(&mut visits[slot].comorbidities, d);
        }
    }

    // demographics from the most recent record; later input rows win ties
    let (_, latest) = events
        .iter()
        .max_by_key(|(i, e)| (e.visit_date, *i))
        .expect("patient has events");
    let age = events
        .iter()
        .filter(|(_, e)| e.visit_date == latest.visit_date)
        .rev()
        .find_map(|(_, e)| e.age);

    let label = Label::from_bool(
        visits.iter().flat_map(|v| &v.anchor_diagnoses).any(|d| taxonomy.is_positive(d)),
    );
    Some(PatientRecord {
        patient_id: pid.to_string(),
        age,
        sex: latest.sex.clone(),
        race: latest.race.clone(),
        visits,
        label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub count: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeSummary {
    pub known: usize,
    pub missing: usize,
    pub mean: Option<f64>,
    pub min: Option<i32>,
    pub max: Option<i32>,
    /// Bands `<18`, `18-64`, `>=65` over patients with known age.
    pub bands: BTreeMap<String, CategoryShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub positives: usize,
    pub prevalence: f64,
    pub mean_visits: f64,
    pub sex: BTreeMap<String, CategoryShare>,
    pub race: BTreeMap<String, CategoryShare>,
    pub age: AgeSummary,
}

fn shares<'a>(values: impl Iterator<Item = &'a str>) -> BTreeMap<String, CategoryShare> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for v in values {
        *counts.entry(v.to_string()).or_default() += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|(k, count)| (k, CategoryShare { count, proportion: count as f64 / total as f64 }))
        .collect()
}

pub fn cohort_summary(cohort: &Cohort) -> Result<CohortSummary> {
    let n = cohort.patients.len();
    if n == 0 {
        return Err(Error::Data("cannot summarize an empty cohort".into()));
    }
    let positives = cohort.patients.iter().filter(|p| p.label.is_positive()).count();
    let ages: Vec<i32> = cohort.patients.iter().filter_map(|p| p.age).collect();
    let band = |a: i32| match a {
        a if a < 18 => "<18",
        a if a < 65 => "18-64",
        _ => ">=65",
    };
    let age = AgeSummary {
        known: ages.len(),
        missing: n - ages.len(),
        mean: (!ages.is_empty()).then(|| ages.iter().map(|&a| a as f64).sum::<f64>() / ages.len() as f64),
        min: ages.iter().copied().min(),
        max: ages.iter().copied().max(),
        bands: if ages.is_empty() { BTreeMap::new() } else { shares(ages.iter().map(|&a| band(a))) },
    };
    Ok(CohortSummary {
        patients: n,
        positives,
        prevalence: positives as f64 / n as f64,
        mean_visits: cohort.patients.iter().map(|p| p.visits.len()).sum::<usize>() as f64 / n as f64,
        sex: shares(cohort.patients.iter().map(|p| p.sex.as_str())),
        race: shares(cohort.patients.iter().map(|p| p.race.as_str())),
        age,
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn ev(d: &str, med: Option<&str>, dx: Option<&str>) -> EventRecord {
        EventRecord {
            patient_id: "1".into(),
            age: Some(33),
            sex: "Male".into(),
            race: "Asian".into(),
            visit_date: date(d),
            medication: med.map(Into::into),
            diagnosis: dx.map(Into::into),
        }
    }

    pub const ACETAMINOPHEN: &str = "acetaminophen 325 MG Oral Tablet";
    pub const LASMIDITAN: &str = "lasmiditan 100 MG Oral Tablet";

    /// The illustrative raw-event table, one patient.
    pub fn example_events() -> Vec<EventRecord> {
        vec![
            ev("2021-06-01", None, Some("Unspecified migraine")),
            ev("2021-06-01", Some(ACETAMINOPHEN), None),
            ev("2021-06-03", None, Some("Depression")),
            ev("2021-07-01", None, Some("Flu")),
            ev("2021-07-02", Some(ACETAMINOPHEN), None),
            ev("2021-09-01", None, Some("Migraine without Aura")),
            ev("2021-09-01", None, Some("Depression")),
            ev("2021-09-02", Some(LASMIDITAN), None),
            ev("2021-09-02", None, Some("Insomnia")),
            ev("2021-12-01", None, Some("Chronic Migraine without Aura")),
            ev("2021-12-01", Some(LASMIDITAN), None),
            ev("2021-12-02", Some("ibuprofen"), None),
            ev("2021-12-01", None, Some("Depression")),
            ev("2021-12-01", None, Some("Insomnia")),
        ]
    }

    pub fn example_taxonomy() -> DiagnosisTaxonomy {
        DiagnosisTaxonomy {
            anchor_terms: [
                "Unspecified migraine",
                "Migraine without Aura",
                "Chronic Migraine without Aura",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            positive_label_terms: ["Chronic Migraine without Aura".to_string()].into(),
            comorbidity_terms: ["Depression", "Insomnia", "Flu"].into_iter().map(String::from).collect(),
        }
    }

    /// The preprocessed per-visit table, reproduced literally (first row dated 2021-07-01).
    pub fn example_patient_table() -> PatientRecord {
        let v = |d: &str, meds: &[&str], com: &[&str], anchor: &str| VisitRow {
            visit_date: date(d),
            medications: meds.iter().map(|s| s.to_string()).collect(),
            comorbidities: com.iter().map(|s| s.to_string()).collect(),
            anchor_diagnoses: vec![anchor.to_string()],
        };
        PatientRecord {
            patient_id: "1".into(),
            age: Some(33),
            sex: "Male".into(),
            race: "Asian".into(),
            visits: vec![
                v("2021-07-01", &[ACETAMINOPHEN], &["Depression"], "Unspecified migraine"),
                v("2021-09-01", &[LASMIDITAN], &["Depression", "Insomnia"], "Migraine without Aura"),
                v(
                    "2021-12-01",
                    &[LASMIDITAN, "ibuprofen"],
                    &["Depression", "Insomnia"],
                    "Chronic Migraine without Aura",
                ),
            ],
            label: Label::Positive,
        }
    }
}
