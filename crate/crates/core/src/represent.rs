//! Patient feature assembly: per-concept standardize + PCA, demographics,
//! and the one-hot / count bag-of-codes baselines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cohort::PatientRecord;
use crate::encoder::io::{load_prgt, save_prgt};
use crate::encoder::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::text::{matches_any, Concept};

/// Column-wise z-scoring with population statistics; σ = 0 is replaced by 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Data("cannot standardize zero rows".into()));
        };
        let d = first.len();
        check_rows(rows, d)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(v, (x, m))| *v += (x - m) * (x - m));
        }
        let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension { expected: self.mean.len(), got: x.len() });
        }
        Ok(x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect())
    }
}

fn check_rows(rows: &[Vec<f64>], d: usize) -> Result<()> {
    for r in rows {
        if r.len() != d {
            return Err(Error::Dimension { expected: d, got: r.len() });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()));
        }
    }
    Ok(())
}

/// Standardizer plus PCA basis for one concept block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTransform {
    pub name: String,
    pub standardizer: Standardizer,
    /// Retained components, one row per component, each of input width.
    #[serde(skip)]
    pub components: Vec<Vec<f64>>,
    /// Full descending eigen-spectrum of the standardized covariance.
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub k: usize,
}

/// Smallest k whose cumulative explained-variance ratio reaches `target`.
pub fn retained_components(ratios: &[f64], target: f64) -> usize {
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= target - 1e-12 {
            return i + 1;
        }
    }
    ratios.len()
}

/// Eigenpairs of the sample covariance (n−1), sorted by decreasing eigenvalue.
pub fn covariance_eigen(rows: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if rows.len() < 2 {
        return Err(Error::Data(format!("need at least 2 rows, got {}", rows.len())));
    }
    let d = rows[0].len();
    check_rows(rows, d)?;
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
    }
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((values, vectors))
}

impl BlockTransform {
    pub fn fit(name: &str, rows: &[Vec<f64>], variance_target: f64) -> Result<Self> {
        if !(variance_target > 0.0 && variance_target <= 1.0) {
            return Err(Error::Config(format!("variance_target must lie in (0, 1], got {variance_target}")));
        }
        if rows.len() < 2 {
            return Err(Error::Data(format!("block `{name}` needs at least 2 training rows, got {}", rows.len())));
        }
        let standardizer = Standardizer::fit(rows)?;
        let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect::<Result<_>>()?;
        let (eigenvalues, vectors) = covariance_eigen(&z)?;
        let total: f64 = eigenvalues.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("block `{name}` has zero variance")));
        }
        let explained_variance_ratio: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();
        let k = retained_components(&explained_variance_ratio, variance_target);
        Ok(Self {
            name: name.to_string(),
            standardizer,
            components: vectors.into_iter().take(k).collect(),
            eigenvalues,
            explained_variance_ratio,
            k,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(x)?;
        Ok(self.components.iter().map(|c| crate::encoder::dot(c, &z)).collect())
    }

    /// Map a projection back to standardized input space.
    pub fn reconstruct_standardized(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        for (c, w) in self.components.iter().zip(y) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += w * ci);
        }
        out
    }
}

/// Standardized age, then one-hot sex, then one-hot race.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsEncoder {
    pub age_mean: f64,
    pub age_std: f64,
    pub sex_vocab: Vec<String>,
    pub race_vocab: Vec<String>,
}

impl DemographicsEncoder {
    pub fn fit(patients: &[&PatientRecord]) -> Self {
        let ages: Vec<f64> = patients.iter().filter_map(|p| p.age.map(f64::from)).collect();
        let (age_mean, age_std) = if ages.is_empty() {
            (0.0, 1.0)
        } else {
            let m = ages.iter().sum::<f64>() / ages.len() as f64;
            let s = (ages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / ages.len() as f64).sqrt();
            (m, if s > 0.0 { s } else { 1.0 })
        };
        let sex_vocab = patients.iter().map(|p| p.sex.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let race_vocab = patients.iter().map(|p| p.race.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        Self { age_mean, age_std, sex_vocab, race_vocab }
    }

    pub fn width(&self) -> usize {
        1 + self.sex_vocab.len() + self.race_vocab.len()
    }

    /// Missing age maps to the training mean, i.e. 0 after standardization.
    pub fn encode(&self, p: &PatientRecord) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        out.push(p.age.map(|a| (f64::from(a) - self.age_mean) / self.age_std).unwrap_or(0.0));
        out.extend(self.sex_vocab.iter().map(|s| if *s == p.sex { 1.0 } else { 0.0 }));
        out.extend(self.race_vocab.iter().map(|r| if *r == p.race { 1.0 } else { 0.0 }));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub name: String,
    pub offset: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedTransform {
    pub meds: BlockTransform,
    pub comorb: BlockTransform,
    pub demographics: Option<DemographicsEncoder>,
}

impl FittedTransform {
    /// Fit on training rows only. `pooled_*` rows align with `patients`.
    pub fn fit(
        patients: &[&PatientRecord],
        pooled_meds: &[Vec<f64>],
        pooled_comorb: &[Vec<f64>],
        variance_target: f64,
        include_demographics: bool,
    ) -> Result<Self> {
        Ok(Self {
            meds: BlockTransform::fit("meds_pca", pooled_meds, variance_target)?,
            comorb: BlockTransform::fit("comorb_pca", pooled_comorb, variance_target)?,
            demographics: include_demographics.then(|| DemographicsEncoder::fit(patients)),
        })
    }

    pub fn layout(&self) -> Vec<BlockSpan> {
        let mut spans = vec![
            BlockSpan { name: "meds_pca".into(), offset: 0, width: self.meds.k },
            BlockSpan { name: "comorb_pca".into(), offset: self.meds.k, width: self.comorb.k },
        ];
        if let Some(d) = &self.demographics {
            spans.push(BlockSpan { name: "demographics".into(), offset: self.meds.k + self.comorb.k, width: d.width() });
        }
        spans
    }

    pub fn width(&self) -> usize {
        self.layout().iter().map(|b| b.width).sum()
    }

    pub fn apply(&self, patient: &PatientRecord, meds: &[f64], comorb: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.meds.apply(meds)?;
        out.extend(self.comorb.apply(comorb)?);
        if let Some(d) = &self.demographics {
            out.extend(d.encode(patient));
        }
        Ok(out)
    }

    fn basis_paths(path: &Path) -> (PathBuf, PathBuf) {
        let stem = path.with_extension("");
        let s = stem.to_string_lossy();
        (PathBuf::from(format!("{s}.meds.prgt")), PathBuf::from(format!("{s}.comorb.prgt")))
    }

    /// JSON statistics at `path`, bases beside it as `<stem>.meds.prgt` / `<stem>.comorb.prgt`.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        let (m, c) = Self::basis_paths(path);
        for (block, p) in [(&self.meds, &m), (&self.comorb, &c)] {
            save_prgt(&EmbeddingMatrix::from_rows(block.input_dim(), &block.components)?, p)?;
        }
        Ok(vec![path.to_path_buf(), m, c])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut t: FittedTransform = serde_json::from_slice(&fs::read(path)?)?;
        let (m, c) = Self::basis_paths(path);
        for (block, p) in [(&mut t.meds, &m), (&mut t.comorb, &c)] {
            let basis = load_prgt(p)?;
            if basis.len() != block.k || (block.k > 0 && basis.dim != block.input_dim()) {
                return Err(Error::Format(format!("basis file {} does not match the transform", p.display())));
            }
            block.components = basis.to_rows();
        }
        Ok(t)
    }
}

/// Patient rows with a shared block layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMatrix {
    pub layout: Vec<BlockSpan>,
    pub patient_ids: Vec<String>,
    pub labels: Vec<bool>,
    pub rows: Vec<Vec<f64>>,
}

impl RepresentationMatrix {
    pub fn select(&self, ids: &BTreeSet<String>) -> RepresentationMatrix {
        let keep: Vec<usize> = (0..self.patient_ids.len()).filter(|&i| ids.contains(&self.patient_ids[i])).collect();
        RepresentationMatrix {
            layout: self.layout.clone(),
            patient_ids: keep.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.layout.iter().map(|b| b.width).sum()
    }
}

/// Combine pooled per-concept vectors through a fitted transform.
pub fn assemble(
    patients: &[&PatientRecord],
    pooled: &BTreeMap<(String, Concept), Vec<f64>>,
    transform: &FittedTransform,
) -> Result<RepresentationMatrix> {
    let mut rows = Vec::with_capacity(patients.len());
    for p in patients {
        let get = |c: Concept| {
            pooled.get(&(p.patient_id.clone(), c)).ok_or_else(|| {
                Error::Data(format!("patient {} has no pooled {} vector", p.patient_id, c.label()))
            })
        };
        rows.push(transform.apply(p, get(Concept::Medication)?, get(Concept::Comorbidity)?)?);
    }
    Ok(RepresentationMatrix {
        layout: transform.layout(),
        patient_ids: patients.iter().map(|p| p.patient_id.clone()).collect(),
        labels: patients.iter().map(|p| p.label.is_positive()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    OneHot,
    CountBoc,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Medication class name → case-insensitive substrings. Unmapped items keep their raw string.
    pub medication_classes: BTreeMap<String, Vec<String>>,
    pub max_medication_terms: Option<usize>,
    pub max_comorbidity_terms: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineVocab {
    pub medications: Vec<String>,
    pub comorbidities: Vec<String>,
    pub demographics: DemographicsEncoder,
    /// Class name and lowercased match terms, in lookup order.
    pub classes: Vec<(String, Vec<String>)>,
}

impl BaselineVocab {
    fn classify<'a>(&'a self, item: &'a str) -> &'a str {
        self.classes
            .iter()
            .find(|(_, terms)| matches_any(item, terms))
            .map(|(c, _)| c.as_str())
            .unwrap_or(item)
    }

    pub fn fit(train: &[&PatientRecord], config: &BaselineConfig) -> Self {
        let classes: Vec<(String, Vec<String>)> = config
            .medication_classes
            .iter()
            .map(|(c, t)| (c.clone(), t.iter().map(|x| x.to_lowercase()).collect()))
            .collect();
        let mut vocab = Self {
            medications: Vec::new(),
            comorbidities: Vec::new(),
            demographics: DemographicsEncoder::fit(train),
            classes,
        };
        let mut meds: BTreeMap<String, usize> = BTreeMap::new();
        let mut comorb: BTreeMap<String, usize> = BTreeMap::new();
        for p in train {
            for v in &p.visits {
                for m in &v.medications {
                    *meds.entry(vocab.classify(m).to_string()).or_default() += 1;
                }
                for c in &v.comorbidities {
                    *comorb.entry(c.clone()).or_default() += 1;
                }
            }
        }
        vocab.medications = top_terms(meds, config.max_medication_terms);
        vocab.comorbidities = top_terms(comorb, config.max_comorbidity_terms);
        vocab
    }

    pub fn width(&self) -> usize {
        self.medications.len() + self.comorbidities.len() + self.demographics.width()
    }

    pub fn encode(&self, p: &PatientRecord, kind: BaselineKind) -> Vec<f64> {
        let mut med_counts = vec![0.0; self.medications.len()];
        let mut com_counts = vec![0.0; self.comorbidities.len()];
        for v in &p.visits {
            for m in &v.medications {
                if let Ok(i) = self.medications.binary_search_by(|t| t.as_str().cmp(self.classify(m))) {
                    med_counts[i] += 1.0;
                }
            }
            for c in &v.comorbidities {
                if let Ok(i) = self.comorbidities.binary_search(c) {
                    com_counts[i] += 1.0;
                }
            }
        }
        if kind == BaselineKind::OneHot {
            for x in med_counts.iter_mut().chain(com_counts.iter_mut()) {
                *x = f64::min(*x, 1.0);
            }
        }
        let mut out = med_counts;
        out.extend(com_counts);
        out.extend(self.demographics.encode(p));
        out
    }

    pub fn layout(&self) -> Vec<BlockSpan> {
        let m = self.medications.len();
        let c = self.comorbidities.len();
        vec![
            BlockSpan { name: "medications".into(), offset: 0, width: m },
            BlockSpan { name: "comorbidities".into(), offset: m, width: c },
            BlockSpan { name: "demographics".into(), offset: m + c, width: self.demographics.width() },
        ]
    }
}

/// Most frequent terms (ties broken by name), returned sorted by name.
fn top_terms(counts: BTreeMap<String, usize>, cap: Option<usize>) -> Vec<String> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    if let Some(cap) = cap {
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(cap);
    }
    let mut terms: Vec<String> = v.into_iter().map(|(t, _)| t).collect();
    terms.sort();
    terms
}

pub fn build_baseline(patients: &[&PatientRecord], vocab: &BaselineVocab, kind: BaselineKind) -> RepresentationMatrix {
    RepresentationMatrix {
        layout: vocab.layout(),
        patient_ids: patients.iter().map(|p| p.patient_id.clone()).collect(),
        labels: patients.iter().map(|p| p.label.is_positive()).collect(),
        rows: patients.iter().map(|p| vocab.encode(p, kind)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::*;
    use crate::cohort::{Label, VisitRow};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Rows drawn with independent axis variances `spectrum`, then rotated.
    fn with_spectrum(spectrum: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
        let d = spectrum.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = spectrum.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
                (0..d).map(|i| (0..d).map(|j| q[(i, j)] * z[j]).sum()).collect()
            })
            .collect()
    }

    #[test]
    fn single_direction_keeps_one_component() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let t = BlockTransform::fit("b", &rows, 0.95).unwrap();
        assert_eq!(t.k, 1);
    }

    #[test]
    fn isotropic_spectrum_keeps_all() {
        let ratios = vec![0.1; 10];
        assert_eq!(retained_components(&ratios, 0.95), 10);
    }

    #[test]
    fn hand_computed_spectrum() {
        // cumulative ratios: 0.5, 0.8, 0.9, 0.95, 1.0
        let spectrum = [5.0, 3.0, 1.0, 0.5, 0.5];
        let ratios: Vec<f64> = spectrum.iter().map(|x| x / 10.0).collect();
        assert_eq!(retained_components(&ratios, 0.95), 4);
        assert_eq!(retained_components(&ratios, 0.9), 3);
        assert_eq!(retained_components(&ratios, 0.91), 4);
    }

    #[test]
    fn components_are_orthonormal_with_sign_convention() {
        let rows = with_spectrum(&[5.0, 3.0, 1.0, 0.5, 0.5], 400, 3);
        let t = BlockTransform::fit("b", &rows, 1.0).unwrap();
        for (i, a) in t.components.iter().enumerate() {
            let lead = a.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(lead > 0.0);
            for (j, b) in t.components.iter().enumerate() {
                let g = crate::encoder::dot(a, b);
                assert!((g - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn projection_reproduces_ratios_and_reconstruction_error() {
        let rows = with_spectrum(&[6.0, 2.0, 1.0, 0.3, 0.2, 0.1], 300, 9);
        let t = BlockTransform::fit("b", &rows, 0.95).unwrap();
        let n = rows.len() as f64;
        let proj: Vec<Vec<f64>> = rows.iter().map(|r| t.apply(r).unwrap()).collect();
        let total: f64 = t.eigenvalues.iter().sum();
        for j in 0..t.k {
            let mean = proj.iter().map(|p| p[j]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            let var = proj.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var / total - t.explained_variance_ratio[j]).abs() < 1e-9);
        }
        let mut err = 0.0;
        for (r, p) in rows.iter().zip(&proj) {
            let z = t.standardizer.apply(r).unwrap();
            let back = t.reconstruct_standardized(p);
            err += z.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let discarded: f64 = t.eigenvalues[t.k..].iter().sum();
        assert_relative_eq!(err / (n - 1.0), discarded, max_relative = 1e-6);
    }

    #[test]
    fn zero_vector_maps_to_negative_projected_mean() {
        let rows = with_spectrum(&[3.0, 1.0], 50, 1);
        let t = BlockTransform::fit("b", &rows, 1.0).unwrap();
        let y = t.apply(&[0.0, 0.0]).unwrap();
        let z: Vec<f64> = t.standardizer.mean.iter().zip(&t.standardizer.std).map(|(m, s)| -m / s).collect();
        for (c, yi) in t.components.iter().zip(&y) {
            assert!((crate::encoder::dot(c, &z) - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_columns_standardize_with_unit_sigma() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![2.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.std[1], 1.0);
        assert_eq!(s.apply(&[2.0, 5.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn too_few_rows_and_dimension_mismatch() {
        assert!(BlockTransform::fit("b", &[vec![1.0]], 0.95).is_err());
        let t = BlockTransform::fit("b", &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0]], 0.95).unwrap();
        assert!(matches!(t.apply(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn table_patient_baselines() {
        let p = example_patient_table();
        let vocab = BaselineVocab::fit(&[&p], &BaselineConfig::default());
        let mut v = vocab.clone();
        v.comorbidities = vec!["Depression".into(), "Insomnia".into(), "Flu".into()];
        // explicit taxonomy order for the oracle; binary search needs sorted terms
        v.comorbidities.sort();
        let onehot = v.encode(&p, BaselineKind::OneHot);
        let counts = v.encode(&p, BaselineKind::CountBoc);
        let m = v.medications.len();
        let idx = |t: &str| m + v.comorbidities.iter().position(|x| x == t).unwrap();
        assert_eq!([onehot[idx("Depression")], onehot[idx("Insomnia")], onehot[idx("Flu")]], [1.0, 1.0, 0.0]);
        assert_eq!(counts[idx("Depression")], 3.0);
    }

    #[test]
    fn empty_medication_history_gives_zero_block() {
        let mut p = example_patient_table();
        let vocab = BaselineVocab::fit(&[&p], &BaselineConfig::default());
        for v in &mut p.visits {
            v.medications.clear();
        }
        let row = vocab.encode(&p, BaselineKind::CountBoc);
        assert!(row[..vocab.medications.len()].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn medication_classes_group_products() {
        let p = example_patient_table();
        let cfg = BaselineConfig {
            medication_classes: [("triptan-like".to_string(), vec!["LASMIDITAN".to_string()])].into(),
            ..Default::default()
        };
        let vocab = BaselineVocab::fit(&[&p], &cfg);
        assert!(vocab.medications.contains(&"triptan-like".to_string()));
        assert!(!vocab.medications.iter().any(|m| m.contains("lasmiditan")));
    }

    fn patient(id: &str, age: Option<i32>, sex: &str, race: &str) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            age,
            sex: sex.into(),
            race: race.into(),
            visits: vec![VisitRow {
                visit_date: date("2021-01-01"),
                medications: vec![],
                comorbidities: vec![],
                anchor_diagnoses: vec!["m".into()],
            }],
            label: Label::Negative,
        }
    }

    #[test]
    fn demographics_block() {
        let a = patient("a", Some(30), "Female", "X");
        let b = patient("b", Some(50), "Male", "Y");
        let enc = DemographicsEncoder::fit(&[&a, &b]);
        assert_eq!(enc.encode(&a), vec![-1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(enc.encode(&patient("c", None, "Other", "Y")), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn assemble_layout_and_missing_vector() {
        let a = patient("a", Some(30), "Female", "X");
        let b = patient("b", Some(50), "Male", "Y");
        let c = patient("c", Some(40), "Male", "X");
        let ps = [&a, &b, &c];
        let meds = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let com = vec![vec![0.5, 0.1, 0.0], vec![0.2, 0.3, 0.9], vec![0.0, 0.0, 1.0]];
        let t = FittedTransform::fit(&ps, &meds, &com, 0.95, true).unwrap();
        let mut pooled = BTreeMap::new();
        for (i, p) in ps.iter().enumerate() {
            pooled.insert((p.patient_id.clone(), Concept::Medication), meds[i].clone());
            pooled.insert((p.patient_id.clone(), Concept::Comorbidity), com[i].clone());
        }
        let m = assemble(&ps, &pooled, &t).unwrap();
        assert_eq!(m.width(), t.meds.k + t.comorb.k + 5);
        assert!(m.rows.iter().all(|r| r.len() == m.width()));
        pooled.remove(&("b".to_string(), Concept::Comorbidity));
        let err = assemble(&ps, &pooled, &t).unwrap_err().to_string();
        assert!(err.contains("patient b"), "{err}");
    }

    #[test]
    fn transform_round_trips_through_disk() {
        let rows = with_spectrum(&[4.0, 2.0, 1.0], 60, 5);
        let ps: Vec<PatientRecord> = (0..60).map(|i| patient(&format!("p{i}"), Some(20 + i), "F", "R")).collect();
        let refs: Vec<&PatientRecord> = ps.iter().collect();
        let t = FittedTransform::fit(&refs, &rows, &rows, 0.95, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transform.json");
        assert_eq!(t.save(&path).unwrap().len(), 3);
        let back = FittedTransform::load(&path).unwrap();
        assert_eq!(back.meds.k, t.meds.k);
        for (a, b) in back.meds.components.iter().flatten().zip(t.meds.components.iter().flatten()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn retained_k_is_minimal(raw in prop::collection::vec(0.001f64..10.0, 1..12), target in 0.05f64..=1.0) {
            let mut spec = raw;
            spec.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = spec.iter().sum();
            let ratios: Vec<f64> = spec.iter().map(|x| x / total).collect();
            let k = retained_components(&ratios, target);
            let cum = |k: usize| ratios[..k].iter().sum::<f64>();
            prop_assert!(cum(k) >= target - 1e-12);
            if k > 1 {
                prop_assert!(cum(k - 1) < target - 1e-12);
            }
        }
    }
}
