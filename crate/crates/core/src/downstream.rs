//! Splits, SMOTE inside CV folds, the logistic-regression probe, metrics and
//! embedding geometry.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::norm;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::represent::covariance_eigen;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub attribution: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, test: 0.2, attribution: 0.1, seed: 42 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.test, self.attribution];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be in [0,1] and sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub attribution: BTreeSet<String>,
}

/// Stratified three-way split. Per class of size n: round(train·n) to train,
/// round(test·n) to test (capped by what is left), the rest to attribution.
pub fn split(patients: &[(String, bool)], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Split { train: BTreeSet::new(), test: BTreeSet::new(), attribution: BTreeSet::new() };
    for class in [false, true] {
        let mut ids: Vec<&String> = patients.iter().filter(|(_, l)| *l == class).map(|(id, _)| id).collect();
        if ids.len() < 3 {
            return Err(Error::Data(format!(
                "class {} has {} members; stratified splitting needs at least 3",
                if class { "positive" } else { "negative" },
                ids.len()
            )));
        }
        ids.sort();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((spec.train * n as f64).round() as usize).min(n);
        let n_test = ((spec.test * n as f64).round() as usize).min(n - n_train);
        for (i, id) in ids.into_iter().enumerate() {
            let bucket = if i < n_train {
                &mut out.train
            } else if i < n_train + n_test {
                &mut out.test
            } else {
                &mut out.attribution
            };
            bucket.insert(id.clone());
        }
    }
    Ok(out)
}

/// Rows of the input that took part in synthesis, as a base point or a neighbour.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoteAudit {
    pub participants: BTreeSet<usize>,
    pub synthesized: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<bool>,
    pub audit: SmoteAudit,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Oversample the minority class to the majority count by interpolating
/// towards one of its `k` nearest same-class neighbours.
pub fn smote<R: Rng>(x: &[Vec<f64>], y: &[bool], k: usize, rng: &mut R) -> Result<Balanced> {
    if x.len() != y.len() {
        return Err(Error::Data("features and labels differ in length".into()));
    }
    let npos = y.iter().filter(|&&l| l).count();
    let nneg = y.len() - npos;
    let mut out = Balanced { x: x.to_vec(), y: y.to_vec(), audit: SmoteAudit::default() };
    if npos == nneg {
        return Ok(out);
    }
    let minority_label = npos < nneg;
    let minority: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority_label).collect();
    if minority.len() < 2 {
        return Err(Error::Data(format!("SMOTE needs at least 2 minority rows, got {}", minority.len())));
    }
    if k == 0 {
        return Err(Error::Config("k_neighbors must be >= 1".into()));
    }
    let k = k.min(minority.len() - 1);
    let need = npos.max(nneg) - minority.len();
    let mut order = minority.clone();
    order.shuffle(rng);
    let mut neighbours: Vec<Option<Vec<usize>>> = vec![None; x.len()];
    for s in 0..need {
        let base = order[s % order.len()];
        let nn = neighbours[base].get_or_insert_with(|| {
            let mut d: Vec<(f64, usize)> =
                minority.iter().filter(|&&j| j != base).map(|&j| (sq_dist(&x[base], &x[j]), j)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        });
        let other = nn[rng.random_range(0..nn.len())];
        // u strictly inside (0, 1)
        let u: f64 = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        out.x.push(x[base].iter().zip(&x[other]).map(|(a, b)| a + u * (b - a)).collect());
        out.y.push(minority_label);
        out.audit.participants.insert(base);
        out.audit.participants.insert(other);
    }
    out.audit.synthesized = need;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub l2_strength: f64,
}

impl ProbeModel {
    pub fn logit(&self, r: &[f64]) -> f64 {
        crate::encoder::dot(&self.coefficients, r) + self.intercept
    }

    pub fn probability(&self, r: &[f64]) -> f64 {
        sigmoid(self.logit(r))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_finite(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(|r| r.len()).unwrap_or(0);
    for r in x {
        if r.len() != d {
            return Err(Error::Dimension { expected: d, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
    }
    Ok(d)
}

/// Mean log-loss plus `λ/(2n)·‖c‖²`; the intercept is not penalized.
fn objective(x: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let eta = x * w;
    let loss: f64 = eta.iter().zip(y).map(|(e, t)| softplus(*e) - t * e).sum::<f64>() / n;
    let d = w.len() - 1;
    let pen: f64 = w.rows(0, d).iter().map(|c| c * c).sum::<f64>();
    loss + lambda / (2.0 * n) * pen
}

/// L2 logistic regression by damped Newton steps until the gradient norm of
/// the mean objective drops below `tol`.
pub fn fit_logistic(
    x: &[Vec<f64>],
    y: &[bool],
    lambda: f64,
    warm_start: Option<&ProbeModel>,
    tol: f64,
) -> Result<ProbeModel> {
    let d = check_finite(x)?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Data("empty or misaligned training data".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config("l2 strength must be >= 0".into()));
    }
    let n = x.len();
    let xm = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
    let t: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut w = match warm_start {
        Some(m) if m.coefficients.len() == d => {
            DVector::from_iterator(d + 1, m.coefficients.iter().copied().chain([m.intercept]))
        }
        _ => DVector::zeros(d + 1),
    };
    let nf = n as f64;
    let mut f = objective(&xm, &t, &w, lambda);
    for iter in 0..200 {
        let eta = &xm * &w;
        let p: Vec<f64> = eta.iter().map(|e| sigmoid(*e)).collect();
        let resid = DVector::from_iterator(n, p.iter().zip(&t).map(|(p, t)| p - t));
        let mut grad = xm.tr_mul(&resid) / nf;
        for j in 0..d {
            grad[j] += lambda / nf * w[j];
        }
        if grad.norm() < tol {
            break;
        }
        let mut weighted = xm.clone();
        for i in 0..n {
            let s = p[i] * (1.0 - p[i]);
            weighted.row_mut(i).scale_mut(s / nf);
        }
        let mut h = xm.tr_mul(&weighted);
        for j in 0..d {
            h[(j, j)] += lambda / nf;
        }
        for j in 0..=d {
            h[(j, j)] += 1e-12;
        }
        let step = match h.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => h.lu().solve(&grad).ok_or_else(|| Error::Numeric("singular Hessian".into()))?,
        };
        let mut t_step = 1.0;
        let slope = -grad.dot(&step);
        loop {
            let cand = &w - &step * t_step;
            let fc = objective(&xm, &t, &cand, lambda);
            if fc <= f + 1e-4 * t_step * slope || t_step < 1e-10 {
                w = cand;
                f = fc;
                break;
            }
            t_step *= 0.5;
        }
        if iter == 199 {
            log::warn!("logistic regression stopped at the iteration cap (λ = {lambda})");
        }
    }
    Ok(ProbeModel { coefficients: w.rows(0, d).iter().copied().collect(), intercept: w[d], l2_strength: lambda })
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Degenerate("AUC is undefined for a single-class set".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let (p, q) = (npos as f64, nneg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
}

pub fn evaluate(model: &ProbeModel, x: &[Vec<f64>], y: &[bool]) -> Result<Metrics> {
    let d = check_finite(x)?;
    if !x.is_empty() && d != model.coefficients.len() {
        return Err(Error::Dimension { expected: model.coefficients.len(), got: d });
    }
    let scores: Vec<f64> = x.iter().map(|r| model.logit(r)).collect();
    let correct = scores.iter().zip(y).filter(|(s, l)| (sigmoid(**s) >= 0.5) == **l).count();
    Ok(Metrics { acc: correct as f64 / y.len() as f64, auc: auc(&scores, y)?, n: y.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub smote_k: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lambda_grid: vec![0.01, 0.1, 1.0, 10.0], cv_folds: 5, smote_k: 5, tolerance: 1e-8, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub validation_rows: BTreeSet<usize>,
    /// Original row indices that SMOTE used inside this fold.
    pub smote_rows: BTreeSet<usize>,
}

impl FoldAudit {
    pub fn leaked(&self) -> usize {
        self.smote_rows.intersection(&self.validation_rows).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub fold_auc: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub model: ProbeModel,
    pub cv: Vec<LambdaScore>,
    pub audits: Vec<FoldAudit>,
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds<R: Rng>(y: &[bool], k: usize, rng: &mut R) -> Vec<usize> {
    let mut fold = vec![0; y.len()];
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold[i] = j % k;
        }
    }
    fold
}

/// Select λ by stratified CV AUC (SMOTE inside each training partition), then
/// refit on the SMOTE-balanced full training set.
pub fn fit_probe(x: &[Vec<f64>], y: &[bool], config: &ProbeConfig, exec: Execution) -> Result<ProbeFit> {
    check_finite(x)?;
    let npos = y.iter().filter(|&&l| l).count();
    if npos == 0 || npos == y.len() {
        return Err(Error::Data("probe training needs both classes".into()));
    }
    if config.cv_folds < 2 || config.lambda_grid.is_empty() {
        return Err(Error::Config("cv_folds must be >= 2 and lambda_grid non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let folds = stratified_folds(y, config.cv_folds, &mut rng);
    let fold_seeds: Vec<u64> = (0..config.cv_folds).map(|_| rng.random()).collect();
    let per_fold = exec.map_range(config.cv_folds, |f| -> Result<(Vec<f64>, FoldAudit)> {
        let train_rows: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let val_rows: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let tx: Vec<Vec<f64>> = train_rows.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train_rows.iter().map(|&i| y[i]).collect();
        let mut frng = ChaCha8Rng::seed_from_u64(fold_seeds[f]);
        let bal = smote(&tx, &ty, config.smote_k, &mut frng)?;
        let audit = FoldAudit {
            fold: f,
            validation_rows: val_rows.iter().copied().collect(),
            smote_rows: bal.audit.participants.iter().map(|&j| train_rows[j]).collect(),
        };
        let vx: Vec<Vec<f64>> = val_rows.iter().map(|&i| x[i].clone()).collect();
        let vy: Vec<bool> = val_rows.iter().map(|&i| y[i]).collect();
        let mut warm: Option<ProbeModel> = None;
        let mut aucs = Vec::with_capacity(config.lambda_grid.len());
        for &lambda in &config.lambda_grid {
            let m = fit_logistic(&bal.x, &bal.y, lambda, warm.as_ref(), config.tolerance)?;
            let scores: Vec<f64> = vx.iter().map(|r| m.logit(r)).collect();
            aucs.push(auc(&scores, &vy)?);
            warm = Some(m);
        }
        Ok((aucs, audit))
    });
    let per_fold: Vec<(Vec<f64>, FoldAudit)> = per_fold.into_iter().collect::<Result<_>>()?;
    let cv: Vec<LambdaScore> = config
        .lambda_grid
        .iter()
        .enumerate()
        .map(|(li, &lambda)| {
            let fold_auc: Vec<f64> = per_fold.iter().map(|(a, _)| a[li]).collect();
            let mean_auc = fold_auc.iter().sum::<f64>() / fold_auc.len() as f64;
            LambdaScore { lambda, fold_auc, mean_auc }
        })
        .collect();
    let best = cv.iter().fold(&cv[0], |b, c| if c.mean_auc > b.mean_auc { c } else { b });
    let bal = smote(x, y, config.smote_k, &mut rng)?;
    let model = fit_logistic(&bal.x, &bal.y, best.lambda, None, config.tolerance)?;
    Ok(ProbeFit { model, cv, audits: per_fold.into_iter().map(|(_, a)| a).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub uniformity: f64,
    pub spectral_flatness: f64,
    pub top1: f64,
}

/// `log mean_{i≠j} exp(−t‖x_i − x_j‖²)` over L2-normalized rows.
pub fn uniformity(x: &[Vec<f64>], t: f64, exec: Execution) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::Data("uniformity needs at least 2 embeddings".into()));
    }
    let units: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            let n = norm(r);
            if !(n > 0.0) {
                return Err(Error::Numeric("zero-norm embedding".into()));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect::<Result<_>>()?;
    let n = units.len();
    let partial = exec.map_range(n, |i| {
        (i + 1..n).map(|j| (-t * sq_dist(&units[i], &units[j])).exp()).sum::<f64>()
    });
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((partial.iter().sum::<f64>() / pairs).ln())
}

pub fn geometry(x: &[Vec<f64>], t: f64, exec: Execution) -> Result<GeometryReport> {
    let (mut eig, _) = covariance_eigen(x)?;
    let max = eig.first().copied().unwrap_or(0.0);
    if !(max > 1e-300) {
        return Err(Error::Degenerate("embedding covariance has rank 0".into()));
    }
    for l in &mut eig {
        if *l < max * 1e-12 {
            *l = 0.0;
        }
    }
    let total: f64 = eig.iter().sum();
    let arith = total / eig.len() as f64;
    let flatness = if eig.contains(&0.0) {
        0.0
    } else {
        (eig.iter().map(|l| l.ln()).sum::<f64>() / eig.len() as f64).exp() / arith
    };
    Ok(GeometryReport { uniformity: uniformity(x, t, exec)?, spectral_flatness: flatness, top1: max / total })
}
