//! Visit-level templated sentences.
//!
//! One sentence per (visit, concept). The temporal prefix depends on the
//! [`TemporalScheme`]; the body is `meds: a, b` or `comorbidities: a, b`.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientRecord, VisitRow};
use crate::error::{Error, Result};
use crate::rss::FactorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalScheme {
    Date,
    Gap,
    Month,
    Last,
    Without,
}

impl TemporalScheme {
    pub const ALL: [TemporalScheme; 5] = [
        TemporalScheme::Date,
        TemporalScheme::Gap,
        TemporalScheme::Month,
        TemporalScheme::Last,
        TemporalScheme::Without,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemporalScheme::Date => "date",
            TemporalScheme::Gap => "gap",
            TemporalScheme::Month => "month",
            TemporalScheme::Last => "last",
            TemporalScheme::Without => "without",
        }
    }
}

impl fmt::Display for TemporalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemporalScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown temporal scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concept {
    Medication,
    Comorbidity,
}

impl Concept {
    pub const ALL: [Concept; 2] = [Concept::Medication, Concept::Comorbidity];

    /// Word used inside the rendered sentence.
    pub fn label(self) -> &'static str {
        match self {
            Concept::Medication => "meds",
            Concept::Comorbidity => "comorbidities",
        }
    }

    /// Short name used on the command line and in artifact file names.
    pub fn short(self) -> &'static str {
        match self {
            Concept::Medication => "meds",
            Concept::Comorbidity => "comorb",
        }
    }

    pub fn items(self, visit: &VisitRow) -> &[String] {
        match self {
            Concept::Medication => &visit.medications,
            Concept::Comorbidity => &visit.comorbidities,
        }
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meds" | "medication" | "medications" => Ok(Concept::Medication),
            "comorb" | "comorbidity" | "comorbidities" => Ok(Concept::Comorbidity),
            other => Err(Error::Config(format!("unknown concept `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitText {
    pub patient_id: String,
    pub visit_date: NaiveDate,
    pub concept: Concept,
    pub text: String,
    pub scheme: TemporalScheme,
}

pub fn gap_days(earlier: NaiveDate, later: NaiveDate) -> Result<i64> {
    if later < earlier {
        return Err(Error::Ordering(format!("{later} precedes {earlier}")));
    }
    Ok((later - earlier).num_days())
}

/// Calendar-month difference; a partial month does not count.
pub fn gap_months(earlier: NaiveDate, later: NaiveDate) -> Result<i64> {
    if later < earlier {
        return Err(Error::Ordering(format!("{later} precedes {earlier}")));
    }
    let mut months = (later.year() as i64 - earlier.year() as i64) * 12
        + (later.month() as i64 - earlier.month() as i64);
    if later.day() < earlier.day() {
        months -= 1;
    }
    Ok(months)
}

/// Case-insensitive substring match of any term against an item.
pub fn matches_any(item: &str, lowered_terms: &[String]) -> bool {
    let item = item.to_lowercase();
    lowered_terms.iter().any(|t| !t.is_empty() && item.contains(t.as_str()))
}

fn lowered(terms: &[String]) -> Vec<String> {
    terms.iter().map(|t| t.to_lowercase()).collect()
}

fn render_list(items: &[String], lowered_excludes: &[String]) -> String {
    let kept: Vec<&str> = items
        .iter()
        .filter(|i| !matches_any(i, lowered_excludes))
        .map(String::as_str)
        .collect();
    if kept.is_empty() {
        "none".to_string()
    } else {
        kept.join(", ")
    }
}

fn temporal_prefix(
    visit_date: NaiveDate,
    prev_date: Option<NaiveDate>,
    latest_date: NaiveDate,
    scheme: TemporalScheme,
) -> Result<Option<String>> {
    if latest_date < visit_date {
        return Err(Error::Ordering(format!("latest visit {latest_date} precedes visit {visit_date}")));
    }
    Ok(match scheme {
        TemporalScheme::Without => None,
        TemporalScheme::Date => Some(visit_date.format("%Y-%m-%d").to_string()),
        TemporalScheme::Gap => Some(match prev_date {
            None => "First visit".to_string(),
            Some(p) => format!("{} days after previous", gap_days(p, visit_date)?),
        }),
        TemporalScheme::Month => Some(match prev_date {
            None => "First visit".to_string(),
            Some(p) => format!("{} months after previous", gap_months(p, visit_date)?),
        }),
        TemporalScheme::Last => Some(match gap_days(visit_date, latest_date)? {
            0 => "Latest visit".to_string(),
            k => format!("{k} days before the latest visit"),
        }),
    })
}

/// Render one sentence.
pub fn render(
    patient_id: &str,
    visit: &VisitRow,
    prev_date: Option<NaiveDate>,
    latest_date: NaiveDate,
    concept: Concept,
    scheme: TemporalScheme,
    exclude_terms: &[String],
) -> Result<VisitText> {
    let body = format!("{}: {}", concept.label(), render_list(concept.items(visit), &lowered(exclude_terms)));
    let text = match temporal_prefix(visit.visit_date, prev_date, latest_date, scheme)? {
        Some(prefix) => format!("{prefix}, {body}"),
        None => body,
    };
    Ok(VisitText {
        patient_id: patient_id.to_string(),
        visit_date: visit.visit_date,
        concept,
        text,
        scheme,
    })
}

/// Render all sentences of one patient in (date, concept) order.
///
/// A term-set factor removes matching list items; a recency-window factor
/// removes whole visits, keeping the original latest visit as the reference
/// date for the `Last` scheme.
pub fn render_patient(
    patient: &PatientRecord,
    scheme: TemporalScheme,
    factor: Option<&FactorSpec>,
) -> Result<Vec<VisitText>> {
    let latest = patient.latest_date();
    let kept = match factor {
        Some(f) => f.retained_visits(patient),
        None => patient.visits.iter().collect(),
    };
    let mut out = Vec::with_capacity(kept.len() * 2);
    let mut prev: Option<NaiveDate> = None;
    for visit in kept {
        for concept in Concept::ALL {
            let excludes = factor.map(|f| f.exclusions_for(concept)).unwrap_or(&[]);
            out.push(render(&patient.patient_id, visit, prev, latest, concept, scheme, excludes)?);
        }
        prev = Some(visit.visit_date);
    }
    Ok(out)
}

pub fn render_cohort(
    cohort: &Cohort,
    scheme: TemporalScheme,
    exclude: Option<&FactorSpec>,
) -> Result<Vec<VisitText>> {
    let mut out = Vec::new();
    for p in &cohort.patients {
        out.extend(render_patient(p, scheme, exclude)?);
    }
    Ok(out)
}

/// One document per patient: every visit sentence of both concepts, in order.
pub fn full_text_document(patient: &PatientRecord, scheme: TemporalScheme) -> Result<String> {
    let texts = render_patient(patient, scheme, None)?;
    Ok(texts.into_iter().map(|t| t.text).collect::<Vec<_>>().join(". "))
}
