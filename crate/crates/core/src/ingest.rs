//! Long-format event ingestion.
//!
//! Input is comma-delimited text with a header row. Each data row carries one
//! event: either a medication or a diagnosis, never both. Empty fields and the
//! literal `-` both mean null for the nullable columns.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw event row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: String,
    pub age: Option<i32>,
    pub sex: String,
    pub race: String,
    pub visit_date: NaiveDate,
    pub medication: Option<String>,
    pub diagnosis: Option<String>,
}

impl EventRecord {
    pub fn is_medication(&self) -> bool {
        self.medication.is_some()
    }
}

/// Maps logical fields onto header names in the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub patient_id: String,
    pub age: String,
    pub sex: String,
    pub race: String,
    pub visit_date: String,
    pub medication: String,
    pub diagnosis: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            patient_id: "patient_id".into(),
            age: "age".into(),
            sex: "sex".into(),
            race: "race".into(),
            visit_date: "visit_date".into(),
            medication: "medication".into(),
            diagnosis: "diagnosis".into(),
        }
    }
}

impl Schema {
    /// Column names must be non-empty and distinct.
    pub fn validate(&self) -> Result<()> {
        let cols = self.columns();
        for (i, (field, name)) in cols.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(Error::Schema(format!("column name for `{field}` is empty")));
            }
            if cols[..i].iter().any(|(_, other)| other == name) {
                return Err(Error::Schema(format!("column `{name}` is mapped twice")));
            }
        }
        Ok(())
    }

    fn columns(&self) -> [(&'static str, &str); 7] {
        [
            ("patient_id", &self.patient_id),
            ("age", &self.age),
            ("sex", &self.sex),
            ("race", &self.race),
            ("visit_date", &self.visit_date),
            ("medication", &self.medication),
            ("diagnosis", &self.diagnosis),
        ]
    }
}

/// Why a data row was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MalformedDate,
    MalformedAge,
    MissingPatientId,
    BothEvents,
    NoEvent,
    FieldCount,
}

impl RejectReason {
    pub const ALL: [RejectReason; 6] = [
        RejectReason::MalformedDate,
        RejectReason::MalformedAge,
        RejectReason::MissingPatientId,
        RejectReason::BothEvents,
        RejectReason::NoEvent,
        RejectReason::FieldCount,
    ];

    fn is_parse_error(self) -> bool {
        matches!(
            self,
            RejectReason::MalformedDate | RejectReason::MalformedAge | RejectReason::FieldCount
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number in the source, header included.
    pub line: u64,
    pub reason: RejectReason,
    pub message: String,
}

impl Rejection {
    pub fn into_error(self) -> Error {
        if self.reason.is_parse_error() {
            Error::Parse { line: self.line, message: self.message }
        } else {
            Error::Validation { line: self.line, message: self.message }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOutcome {
    pub records: Vec<EventRecord>,
    pub rejected: Vec<Rejection>,
    pub data_rows: usize,
}

fn null_if_empty(raw: &str) -> Option<String> {
    let t = raw.trim();
    if t.is_empty() || t == "-" {
        None
    } else {
        Some(t.to_string())
    }
}

/// Parse all rows, collecting rejected rows instead of failing on them.
///
/// Only structural problems (unreadable input, missing header columns) are
/// returned as errors.
pub fn parse_events<R: Read>(source: R, schema: &Schema) -> Result<IngestOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 7];
    for (slot, (field, column)) in schema.columns().iter().enumerate() {
        index[slot] = headers
            .iter()
            .position(|h| h.trim() == *column)
            .ok_or_else(|| {
                Error::Schema(format!("missing required column `{column}` (for {field})"))
            })?;
    }
    let width = headers.len();

    let mut out = IngestOutcome::default();
    for row in reader.records() {
        let row = row?;
        out.data_rows += 1;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row, &index, width) {
            Ok(rec) => out.records.push(rec),
            Err((reason, message)) => out.rejected.push(Rejection { line, reason, message }),
        }
    }
    Ok(out)
}

/// Parse all rows and fail on the first rejected row.
pub fn parse_events_strict<R: Read>(source: R, schema: &Schema) -> Result<Vec<EventRecord>> {
    let outcome = parse_events(source, schema)?;
    match outcome.rejected.into_iter().next() {
        Some(r) => Err(r.into_error()),
        None => Ok(outcome.records),
    }
}

fn parse_row(
    row: &csv::StringRecord,
    index: &[usize; 7],
    width: usize,
) -> std::result::Result<EventRecord, (RejectReason, String)> {
    if row.len() != width {
        return Err((
            RejectReason::FieldCount,
            format!("expected {width} fields, found {}", row.len()),
        ));
    }
    let get = |slot: usize| row.get(index[slot]).unwrap_or("").trim();

    let patient_id = get(0);
    if patient_id.is_empty() {
        return Err((RejectReason::MissingPatientId, "empty patient id".into()));
    }
    let age = match null_if_empty(get(1)) {
        None => None,
        Some(a) => Some(a.parse::<i32>().map_err(|_| {
            (RejectReason::MalformedAge, format!("age `{a}` is not an integer"))
        })?),
    };
    let raw_date = get(4);
    let visit_date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|e| {
        (RejectReason::MalformedDate, format!("invalid date `{raw_date}`: {e}"))
    })?;
    let medication = null_if_empty(get(5));
    let diagnosis = null_if_empty(get(6));
    match (&medication, &diagnosis) {
        (Some(_), Some(_)) => {
            return Err((
                RejectReason::BothEvents,
                "row carries both a medication and a diagnosis".into(),
            ))
        }
        (None, None) => {
            return Err((RejectReason::NoEvent, "row carries neither a medication nor a diagnosis".into()))
        }
        _ => {}
    }
    Ok(EventRecord {
        patient_id: patient_id.to_string(),
        age,
        sex: get(2).to_string(),
        race: get(3).to_string(),
        visit_date,
        medication,
        diagnosis,
    })
}

/// Write records in the delimited input format (default column names).
pub fn write_events_csv<W: Write>(records: &[EventRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["patient_id", "age", "sex", "race", "visit_date", "medication", "diagnosis"])?;
    for r in records {
        let age = r.age.map(|a| a.to_string()).unwrap_or_default();
        let date = r.visit_date.format("%Y-%m-%d").to_string();
        w.write_record([
            r.patient_id.as_str(),
            age.as_str(),
            r.sex.as_str(),
            r.race.as_str(),
            date.as_str(),
            r.medication.as_deref().unwrap_or(""),
            r.diagnosis.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut sink: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut sink, item)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(source: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in source.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Diagnosis vocabulary that defines the target disease and the label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisTaxonomy {
    pub anchor_terms: BTreeSet<String>,
    pub positive_label_terms: BTreeSet<String>,
    /// Diagnoses tracked as comorbidities. Empty means every non-anchor diagnosis.
    #[serde(default)]
    pub comorbidity_terms: BTreeSet<String>,
}

impl DiagnosisTaxonomy {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_terms.is_empty() {
            return Err(Error::Config("taxonomy has no anchor terms".into()));
        }
        if let Some(t) = self.positive_label_terms.iter().find(|t| !self.anchor_terms.contains(*t)) {
            return Err(Error::Config(format!("positive label term `{t}` is not an anchor term")));
        }
        if let Some(t) = self.comorbidity_terms.iter().find(|t| self.anchor_terms.contains(*t)) {
            return Err(Error::Config(format!("`{t}` is both an anchor and a comorbidity term")));
        }
        Ok(())
    }

    pub fn is_anchor(&self, diagnosis: &str) -> bool {
        self.anchor_terms.contains(diagnosis)
    }

    pub fn is_positive(&self, diagnosis: &str) -> bool {
        self.positive_label_terms.contains(diagnosis)
    }

    pub fn is_comorbidity(&self, diagnosis: &str) -> bool {
        if self.is_anchor(diagnosis) {
            return false;
        }
        self.comorbidity_terms.is_empty() || self.comorbidity_terms.contains(diagnosis)
    }
}
