//! Tab-separated (x, y, err) tables for ablation and attribution charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::stages::{MetricsReport, RssOutput};
use crate::error::Result;
use crate::rss::{FactorKind, FactorSpec};

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `ablation.tsv`, `attribution.tsv` and `windows.tsv` under `dir`.
pub fn write_tables(dir: &Path, metrics: &MetricsReport, rss: &RssOutput, factors: &[FactorSpec]) -> Result<()> {
    let mut t = String::from("x\ty\terr\tacc\n");
    writeln!(t, "model\t{}\t{}\t{}", metrics.model.auc, sample_std(&metrics.model.per_fold), metrics.model.acc).ok();
    for (name, m) in &metrics.baselines {
        writeln!(t, "{name}\t{}\t{}\t{}", m.auc, sample_std(&m.per_fold), m.acc).ok();
    }
    fs::write(dir.join("ablation.tsv"), t)?;

    let window_of = |name: &str| {
        factors.iter().find(|f| f.name == name).and_then(|f| match f.kind {
            FactorKind::RecencyWindow { window_days } => Some(window_days),
            FactorKind::TermSet { .. } => None,
        })
    };
    let mut terms = String::from("x\ty\terr\tmean_signed\n");
    let mut windows: Vec<(u32, String)> = Vec::new();
    for row in &rss.plot {
        match window_of(&row.factor) {
            Some(w) => windows.push((w, format!("{w}\t{}\t{}\t{}\n", row.mean_abs, row.dispersion, row.mean_signed))),
            None => {
                writeln!(terms, "{}\t{}\t{}\t{}", row.factor, row.mean_abs, row.dispersion, row.mean_signed).ok();
            }
        }
    }
    fs::write(dir.join("attribution.tsv"), terms)?;
    windows.sort_by_key(|(w, _)| *w);
    let mut w = String::from("x\ty\terr\tmean_signed\n");
    windows.into_iter().for_each(|(_, line)| w.push_str(&line));
    fs::write(dir.join("windows.tsv"), w)?;
    Ok(())
}
