//! Hybrid temporal pooling of visit embeddings into one patient vector.
//!
//! Time weights decay exponentially with the (optionally log-transformed) gap
//! to the latest visit. Attention weights score each visit against the mean
//! direction of the sequence, damp the score by the same decay factor, centre
//! the scores and apply a tempered softmax. A trained MLP scorer can replace
//! the context-similarity term.

use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoder::{dot, norm};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    Identity,
    Log1p,
}

impl DeltaMode {
    pub fn apply(self, days: f64) -> f64 {
        match self {
            DeltaMode::Identity => days,
            DeltaMode::Log1p => days.ln_1p(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMethod {
    Time,
    Attention,
    Hybrid,
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "time" => Ok(PoolingMethod::Time),
            "attention" => Ok(PoolingMethod::Attention),
            "hybrid" => Ok(PoolingMethod::Hybrid),
            other => Err(Error::Config(format!("unknown pooling method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolingConfig {
    pub gamma: f64,
    pub delta_mode: DeltaMode,
    pub alpha: f64,
    pub tau: f64,
    pub method: PoolingMethod,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { gamma: 0.05, delta_mode: DeltaMode::Log1p, alpha: 0.5, tau: 1.0, method: PoolingMethod::Hybrid }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    // zero is allowed and yields uniform time weights
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    Ok(())
}

/// Days from each visit to the last one. Dates must be ascending.
pub fn gaps_to_latest(times: &[NaiveDate]) -> Result<Vec<f64>> {
    let Some(&last) = times.last() else {
        return Err(Error::Data("empty visit sequence".into()));
    };
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Ordering("visit dates must be ascending".into()));
    }
    Ok(times.iter().map(|t| (last - *t).num_days() as f64).collect())
}

/// Decay factors `exp(-γ δ(gap))`.
pub fn decay_factors(gaps: &[f64], gamma: f64, mode: DeltaMode) -> Vec<f64> {
    gaps.iter().map(|&g| (-gamma * mode.apply(g)).exp()).collect()
}

fn normalize_weights(r: &[f64]) -> Vec<f64> {
    let total: f64 = r.iter().sum();
    r.iter().map(|x| x / total).collect()
}

pub fn time_weights(times: &[NaiveDate], gamma: f64, mode: DeltaMode) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    Ok(normalize_weights(&decay_factors(&gaps_to_latest(times)?, gamma, mode)))
}

fn tempered_softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let centred: Vec<f64> = scores.iter().map(|s| (s - mean) / tau).collect();
    let max = centred.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = centred.iter().map(|c| (c - max).exp()).collect();
    normalize_weights(&e)
}

fn unit_rows(embeddings: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    embeddings
        .iter()
        .map(|v| {
            let n = norm(v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric("zero-norm visit embedding".into()));
            }
            Ok(v.iter().map(|x| x / n).collect())
        })
        .collect()
}

/// Mean of the unit-normalized embeddings (not renormalized).
pub fn context_vector(units: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; units[0].len()];
    for u in units {
        c.iter_mut().zip(u).for_each(|(a, b)| *a += b);
    }
    let n = units.len() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

/// Decay-damped raw attention scores, before centring and softmax.
fn attention_scores(
    embeddings: &[Vec<f64>],
    gaps: &[f64],
    config: &PoolingConfig,
    scorer: Option<&AttentionScorer>,
) -> Result<Vec<f64>> {
    let units = unit_rows(embeddings)?;
    let r = decay_factors(gaps, config.gamma, config.delta_mode);
    let raw: Vec<f64> = match scorer {
        None => {
            let c = context_vector(&units);
            units.iter().map(|u| dot(u, &c)).collect()
        }
        Some(s) => {
            if s.dim != embeddings[0].len() {
                return Err(Error::Dimension { expected: s.dim, got: embeddings[0].len() });
            }
            embeddings.iter().zip(gaps).map(|(v, &g)| s.forward(v, g).out).collect()
        }
    };
    Ok(raw.iter().zip(&r).map(|(s, r)| s * r).collect())
}

pub fn attention_weights(
    embeddings: &[Vec<f64>],
    times: &[NaiveDate],
    config: &PoolingConfig,
    scorer: Option<&AttentionScorer>,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_sequence(embeddings, times)?;
    let gaps = gaps_to_latest(times)?;
    Ok(tempered_softmax(&attention_scores(embeddings, &gaps, config, scorer)?, config.tau))
}

fn check_sequence(embeddings: &[Vec<f64>], times: &[NaiveDate]) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::Data("empty visit sequence".into()));
    }
    if embeddings.len() != times.len() {
        return Err(Error::Data(format!("{} embeddings but {} dates", embeddings.len(), times.len())));
    }
    let dim = embeddings[0].len();
    if let Some(v) = embeddings.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension { expected: dim, got: v.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub vector: Vec<f64>,
    pub time_weights: Vec<f64>,
    pub attention_weights: Vec<f64>,
    /// Weights actually used for the sum.
    pub weights: Vec<f64>,
}

/// Pool one visit sequence into a unit vector.
pub fn hybrid_pool(
    embeddings: &[Vec<f64>],
    times: &[NaiveDate],
    config: &PoolingConfig,
    scorer: Option<&AttentionScorer>,
) -> Result<Pooled> {
    config.validate()?;
    check_sequence(embeddings, times)?;
    let gaps = gaps_to_latest(times)?;
    let wt = normalize_weights(&decay_factors(&gaps, config.gamma, config.delta_mode));
    let wa = match config.method {
        PoolingMethod::Time => Vec::new(),
        _ => tempered_softmax(&attention_scores(embeddings, &gaps, config, scorer)?, config.tau),
    };
    let weights: Vec<f64> = match config.method {
        PoolingMethod::Time => wt.clone(),
        PoolingMethod::Attention => wa.clone(),
        PoolingMethod::Hybrid => wt.iter().zip(&wa).map(|(t, a)| config.alpha * t + (1.0 - config.alpha) * a).collect(),
    };
    let vector = weighted_unit_sum(embeddings, &weights)?;
    Ok(Pooled { vector, time_weights: wt, attention_weights: wa, weights })
}

fn weighted_unit_sum(embeddings: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let mut z = vec![0.0; embeddings[0].len()];
    for (v, w) in embeddings.iter().zip(weights) {
        z.iter_mut().zip(v).for_each(|(a, b)| *a += w * b);
    }
    let n = norm(&z);
    if !(n > 0.0) {
        return Err(Error::Degenerate("pooled vector is exactly zero".into()));
    }
    z.iter_mut().for_each(|a| *a /= n);
    Ok(z)
}

/// One-hidden-layer scorer over `embedding ⊕ δ(gap)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionScorer {
    pub dim: usize,
    pub hidden_dim: usize,
    pub delta_mode: DeltaMode,
    /// `hidden × (dim + 1)`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

struct ScorerForward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    out: f64,
}

impl AttentionScorer {
    pub fn new(dim: usize, hidden_dim: usize, delta_mode: DeltaMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = dim + 1;
        let a1 = (6.0 / (fan_in + hidden_dim) as f64).sqrt();
        let a2 = (6.0 / (hidden_dim + 1) as f64).sqrt();
        let u1 = Uniform::new_inclusive(-a1, a1).expect("finite bound");
        let u2 = Uniform::new_inclusive(-a2, a2).expect("finite bound");
        Self {
            dim,
            hidden_dim,
            delta_mode,
            w1: (0..hidden_dim * fan_in).map(|_| u1.sample(&mut rng)).collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..hidden_dim).map(|_| u2.sample(&mut rng)).collect(),
            b2: 0.0,
        }
    }

    fn forward(&self, v: &[f64], gap_days: f64) -> ScorerForward {
        let mut input = v.to_vec();
        input.push(self.delta_mode.apply(gap_days));
        let fan_in = self.dim + 1;
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| (dot(&self.w1[j * fan_in..(j + 1) * fan_in], &input) + self.b1[j]).tanh())
            .collect();
        let out = dot(&self.w2, &hidden) + self.b2;
        ScorerForward { input, hidden, out }
    }

    pub fn score(&self, v: &[f64], gap_days: f64) -> f64 {
        self.forward(v, gap_days).out
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.w1.len() + 2 * self.hidden_dim + 1);
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.push(self.b2);
        p
    }

    fn set_params(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.hidden_dim);
        let (c, d) = rest.split_at(self.hidden_dim);
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2 = d[0];
    }

    /// Accumulate `g · ∂out/∂θ` into a flat gradient laid out like `params()`.
    fn backward(&self, f: &ScorerForward, g: f64, grad: &mut [f64]) {
        let fan_in = self.dim + 1;
        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(self.hidden_dim);
        let (gw2, gb2) = rest.split_at_mut(self.hidden_dim);
        gb2[0] += g;
        for j in 0..self.hidden_dim {
            gw2[j] += g * f.hidden[j];
            let dpre = g * self.w2[j] * (1.0 - f.hidden[j] * f.hidden[j]);
            if dpre != 0.0 {
                gb1[j] += dpre;
                gw1[j * fan_in..(j + 1) * fan_in].iter_mut().zip(&f.input).for_each(|(a, x)| *a += dpre * x);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub hidden_dim: usize,
    pub delta_mode: DeltaMode,
    pub max_triplets_per_anchor: usize,
    /// Cosine distance is scale-free, so this only documents the output convention.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            margin: 0.2,
            hidden_dim: 96,
            delta_mode: DeltaMode::Log1p,
            max_triplets_per_anchor: 4,
            normalize: true,
            seed: 42,
        }
    }
}

/// One patient's visit embeddings and dates, as fed to the scorer trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitSequence {
    pub embeddings: Vec<Vec<f64>>,
    pub times: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerReport {
    pub loss_trace: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub triplets_per_epoch: usize,
}

/// Forward pass of pooling with the scorer, keeping what backprop needs.
struct PoolTrace {
    z: Vec<f64>,
    y_norm: f64,
    att: Vec<f64>,
    decay: Vec<f64>,
    fwd: Vec<ScorerForward>,
}

fn pool_with_trace(seq: &VisitSequence, pool: &PoolingConfig, scorer: &AttentionScorer) -> Result<PoolTrace> {
    let gaps = gaps_to_latest(&seq.times)?;
    let decay = decay_factors(&gaps, pool.gamma, pool.delta_mode);
    let wt = normalize_weights(&decay);
    let fwd: Vec<ScorerForward> = seq.embeddings.iter().zip(&gaps).map(|(v, &g)| scorer.forward(v, g)).collect();
    let scores: Vec<f64> = fwd.iter().zip(&decay).map(|(f, r)| f.out * r).collect();
    let att = tempered_softmax(&scores, pool.tau);
    let alpha = match pool.method {
        PoolingMethod::Time => 1.0,
        PoolingMethod::Attention => 0.0,
        PoolingMethod::Hybrid => pool.alpha,
    };
    let w: Vec<f64> = wt.iter().zip(&att).map(|(t, a)| alpha * t + (1.0 - alpha) * a).collect();
    let mut y = vec![0.0; seq.embeddings[0].len()];
    for (v, wi) in seq.embeddings.iter().zip(&w) {
        y.iter_mut().zip(v).for_each(|(a, b)| *a += wi * b);
    }
    let y_norm = norm(&y);
    if !(y_norm > 0.0) {
        return Err(Error::Degenerate("pooled vector is exactly zero".into()));
    }
    let z = y.iter().map(|a| a / y_norm).collect();
    Ok(PoolTrace { z, y_norm, att, decay, fwd })
}

/// Backprop `dL/dz` through normalization, weights and softmax into the scorer.
fn pool_backward(
    seq: &VisitSequence,
    pool: &PoolingConfig,
    scorer: &AttentionScorer,
    t: &PoolTrace,
    dz: &[f64],
    grad: &mut [f64],
) {
    let alpha = match pool.method {
        PoolingMethod::Time => return,
        PoolingMethod::Attention => 0.0,
        PoolingMethod::Hybrid => pool.alpha,
    };
    let proj = dot(&t.z, dz);
    let dy: Vec<f64> = dz.iter().zip(&t.z).map(|(g, z)| (g - z * proj) / t.y_norm).collect();
    let da: Vec<f64> = seq.embeddings.iter().map(|v| (1.0 - alpha) * dot(v, &dy)).collect();
    let mean_da: f64 = t.att.iter().zip(&da).map(|(a, g)| a * g).sum();
    for i in 0..t.att.len() {
        let ds = t.att[i] * (da[i] - mean_da) / pool.tau;
        scorer.backward(&t.fwd[i], ds * t.decay[i], grad);
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// Triplet hinge with cosine distance, for unit vectors.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    (cosine_distance(anchor, positive) - cosine_distance(anchor, negative) + margin).max(0.0)
}

/// Anchors in order; up to `k` same-label positives each, one negative per positive.
pub fn build_triplets<R: Rng>(labels: &[bool], k: usize, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let (same, other) = if labels[a] { (&pos, &neg) } else { (&neg, &pos) };
        let candidates: Vec<usize> = same.iter().copied().filter(|&i| i != a).collect();
        for &p in candidates.choose_multiple(rng, k.min(candidates.len())) {
            let n = other[rng.random_range(0..other.len())];
            out.push((a, p, n));
        }
    }
    out
}

/// Mean triplet loss over a batch and its gradient with respect to the scorer.
fn batch_loss_and_grad(
    seqs: &[VisitSequence],
    batch: &[(usize, usize, usize)],
    pool: &PoolingConfig,
    scorer: &AttentionScorer,
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; scorer.params().len()];
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for &(a, p, n) in batch {
        let ta = pool_with_trace(&seqs[a], pool, scorer)?;
        let tp = pool_with_trace(&seqs[p], pool, scorer)?;
        let tn = pool_with_trace(&seqs[n], pool, scorer)?;
        let l = triplet_loss(&ta.z, &tp.z, &tn.z, margin);
        total += l;
        if l > 0.0 {
            // l = za·zn − za·zp + margin
            let dza: Vec<f64> = tn.z.iter().zip(&tp.z).map(|(n, p)| scale * (n - p)).collect();
            let dzp: Vec<f64> = ta.z.iter().map(|x| -scale * x).collect();
            let dzn: Vec<f64> = ta.z.iter().map(|x| scale * x).collect();
            pool_backward(&seqs[a], pool, scorer, &ta, &dza, &mut grad);
            pool_backward(&seqs[p], pool, scorer, &tp, &dzp, &mut grad);
            pool_backward(&seqs[n], pool, scorer, &tn, &dzn, &mut grad);
        }
    }
    Ok((total * scale, grad))
}

/// Train an attention scorer with a triplet objective over pooled patient vectors.
pub fn train_attention_scorer(
    seqs: &[VisitSequence],
    labels: &[bool],
    pool: &PoolingConfig,
    config: &ScorerTrainConfig,
) -> Result<(AttentionScorer, ScorerReport)> {
    pool.validate()?;
    if seqs.len() != labels.len() || seqs.is_empty() {
        return Err(Error::Data("sequences and labels must be non-empty and aligned".into()));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    if npos < 2 || seqs.len() - npos < 2 {
        return Err(Error::Data("scorer training needs at least two patients per class".into()));
    }
    for s in seqs {
        check_sequence(&s.embeddings, &s.times)?;
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let dim = seqs[0].embeddings[0].len();
    let mut scorer = AttentionScorer::new(dim, config.hidden_dim, config.delta_mode, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut params = scorer.params();
    let (mut m, mut v) = (vec![0.0; params.len()], vec![0.0; params.len()]);
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut step = 0i32;
    let mut report = ScorerReport { loss_trace: Vec::new(), epoch_means: Vec::new(), triplets_per_epoch: 0 };
    for _ in 0..config.epochs {
        let mut triplets = build_triplets(labels, config.max_triplets_per_anchor, &mut rng);
        triplets.shuffle(&mut rng);
        report.triplets_per_epoch = triplets.len();
        let mut epoch_total = 0.0;
        for batch in triplets.chunks(config.batch_size) {
            let (loss, grad) = batch_loss_and_grad(seqs, batch, pool, &scorer, config.margin)?;
            report.loss_trace.push(loss);
            epoch_total += loss * batch.len() as f64;
            if config.learning_rate == 0.0 {
                continue;
            }
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for i in 0..params.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                params[i] -= config.learning_rate * config.weight_decay * params[i];
                params[i] -= config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            scorer.set_params(&params);
        }
        report.epoch_means.push(epoch_total / triplets.len().max(1) as f64);
    }
    if !scorer.is_finite() {
        return Err(Error::Numeric("scorer parameters diverged".into()));
    }
    Ok((scorer, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::cohort::fixtures::date;
    use proptest::prelude::*;

    fn days(offsets: &[i64]) -> Vec<NaiveDate> {
        offsets.iter().map(|d| date("2021-01-01") + chrono::Duration::days(*d)).collect()
    }

    #[test]
    fn single_visit_time_weight() {
        assert_eq!(time_weights(&days(&[0]), 0.05, DeltaMode::Log1p).unwrap(), vec![1.0]);
    }

    #[test]
    fn same_date_is_symmetric() {
        assert_eq!(time_weights(&days(&[5, 5]), 0.05, DeltaMode::Identity).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn log1p_decay_matches_scalar_oracle() {
        let w = time_weights(&days(&[0, 214]), 0.05, DeltaMode::Log1p).unwrap();
        let r0 = (-0.05 * 215f64.ln()).exp();
        assert!((w[0] - r0 / (r0 + 1.0)).abs() < 1e-15);
        assert!((w[1] - 1.0 / (r0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn negative_gamma_is_rejected_and_zero_is_uniform() {
        assert!(matches!(time_weights(&days(&[0, 1]), -0.1, DeltaMode::Log1p), Err(Error::Config(_))));
        assert_eq!(time_weights(&days(&[0, 10, 400]), 0.0, DeltaMode::Identity).unwrap(), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn attention_two_orthogonal_visits_matches_oracle() {
        let cfg = PoolingConfig { gamma: 0.05, tau: 1.0, ..Default::default() };
        let v = vec![vec![2.0, 0.0], vec![0.0, 3.0]];
        let w = attention_weights(&v, &days(&[0, 30]), &cfg, None).unwrap();
        // c = (0.5, 0.5); both cosines with c are 0.5
        let r0 = (-0.05 * 31f64.ln()).exp();
        let s = [0.5 * r0, 0.5];
        let m = (s[0] + s[1]) / 2.0;
        let e = [(s[0] - m).exp(), (s[1] - m).exp()];
        assert!((w[0] - e[0] / (e[0] + e[1])).abs() < 1e-15);
        assert!((w[1] - e[1] / (e[0] + e[1])).abs() < 1e-15);
    }

    #[test]
    fn attention_identical_embeddings_are_uniform() {
        let v = vec![vec![1.0, 2.0, 3.0]; 4];
        let w = attention_weights(&v, &days(&[7, 7, 7, 7]), &PoolingConfig::default(), None).unwrap();
        for x in w {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn large_tau_flattens() {
        let v = vec![vec![1.0, 0.0], vec![0.3, 1.0], vec![-1.0, 0.2]];
        let cfg = PoolingConfig { tau: 1e6, ..Default::default() };
        let w = attention_weights(&v, &days(&[0, 40, 90]), &cfg, None).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-4));
    }

    #[test]
    fn zero_norm_visit_is_numeric_error() {
        let v = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert!(matches!(attention_weights(&v, &days(&[0, 1]), &PoolingConfig::default(), None), Err(Error::Numeric(_))));
    }

    #[test]
    fn single_visit_pools_to_its_direction() {
        let v = vec![vec![3.0, -4.0]];
        let p = hybrid_pool(&v, &days(&[0]), &PoolingConfig { alpha: 0.3, gamma: 9.0, ..Default::default() }, None).unwrap();
        assert!((p.vector[0] - 0.6).abs() < 1e-15 && (p.vector[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn opposite_visits_cancel_to_degenerate() {
        let v = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let cfg = PoolingConfig { method: PoolingMethod::Time, ..Default::default() };
        assert!(matches!(hybrid_pool(&v, &days(&[3, 3]), &cfg, None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn triplet_loss_satisfied_is_zero() {
        assert_eq!(triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 0.2), 0.0);
        assert!((triplet_loss(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], 0.2) - 1.2).abs() < 1e-15);
    }

    fn toy_sequences(n: usize, dim: usize, seed: u64) -> (Vec<VisitSequence>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2 == 0;
            let len = rng.random_range(2..6);
            let mut t = 0;
            let mut times = Vec::new();
            let mut embeddings = Vec::new();
            for j in 0..len {
                t += rng.random_range(1..60);
                times.push(date("2020-01-01") + chrono::Duration::days(t));
                let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                // label signal on an early visit only
                if label && j == 0 {
                    v[0] += 3.0;
                }
                embeddings.push(v);
            }
            seqs.push(VisitSequence { embeddings, times });
            labels.push(label);
        }
        (seqs, labels)
    }

    #[test]
    fn scorer_gradient_matches_finite_differences() {
        let (seqs, _) = toy_sequences(3, 4, 5);
        let pool = PoolingConfig { alpha: 0.3, tau: 0.7, ..Default::default() };
        let scorer = AttentionScorer::new(4, 5, DeltaMode::Log1p, 11);
        let batch = [(0, 1, 2), (1, 0, 2)];
        // large margin keeps every hinge active
        let (_, grad) = batch_loss_and_grad(&seqs, &batch, &pool, &scorer, 5.0).unwrap();
        let base = scorer.params();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut s = scorer.clone();
            let mut p = base.clone();
            p[i] += h;
            s.set_params(&p);
            let up = batch_loss_and_grad(&seqs, &batch, &pool, &s, 5.0).unwrap().0;
            p[i] -= 2.0 * h;
            s.set_params(&p);
            let down = batch_loss_and_grad(&seqs, &batch, &pool, &s, 5.0).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-7);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_scorer_at_init() {
        let (seqs, labels) = toy_sequences(8, 3, 1);
        let cfg = ScorerTrainConfig { learning_rate: 0.0, epochs: 1, hidden_dim: 6, ..Default::default() };
        let (s, _) = train_attention_scorer(&seqs, &labels, &PoolingConfig::default(), &cfg).unwrap();
        assert_eq!(s, AttentionScorer::new(3, 6, DeltaMode::Log1p, 42));
    }

    #[test]
    fn single_class_training_is_error() {
        let (seqs, _) = toy_sequences(6, 3, 1);
        let labels = vec![true; 6];
        assert!(train_attention_scorer(&seqs, &labels, &PoolingConfig::default(), &ScorerTrainConfig::default()).is_err());
    }

    #[test]
    fn scorer_training_does_not_increase_epoch_loss() {
        let (seqs, labels) = toy_sequences(40, 6, 3);
        let pool = PoolingConfig { alpha: 0.0, ..Default::default() };
        let cfg = ScorerTrainConfig { hidden_dim: 16, learning_rate: 1e-2, ..Default::default() };
        let (s, report) = train_attention_scorer(&seqs, &labels, &pool, &cfg).unwrap();
        assert_eq!(report.epoch_means.len(), 3);
        assert!(report.epoch_means[2] <= report.epoch_means[0], "{:?}", report.epoch_means);
        assert!(s.is_finite());
    }

    #[test]
    fn triplets_respect_labels_and_cap() {
        let labels = [true, true, true, false, false];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = build_triplets(&labels, 4, &mut rng);
        // positives: 2 others each; negatives: 1 other each
        assert_eq!(t.len(), 3 * 2 + 2);
        for (a, p, n) in t {
            assert_ne!(a, p);
            assert_eq!(labels[a], labels[p]);
            assert_ne!(labels[a], labels[n]);
        }
    }

    fn arb_sequence() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<i64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), n),
                prop::collection::vec(0i64..200, n),
            )
                .prop_map(|(mut v, steps)| {
                    for row in &mut v {
                        row[0] += if row[0] >= 0.0 { 0.01 } else { -0.01 };
                    }
                    let mut t = 0;
                    let times = steps.iter().map(|s| {
                        t += s;
                        t
                    });
                    (v, times.collect())
                })
        })
    }

    proptest! {
        #[test]
        fn weights_are_distributions((v, t) in arb_sequence(), gamma in 0.0f64..2.0, alpha in 0.0f64..=1.0, tau in 0.05f64..5.0) {
            let times = days(&t);
            let cfg = PoolingConfig { gamma, alpha, tau, ..Default::default() };
            let wt = time_weights(&times, gamma, DeltaMode::Log1p).unwrap();
            let wa = attention_weights(&v, &times, &cfg, None).unwrap();
            for w in [&wt, &wa] {
                prop_assert!(w.iter().all(|x| *x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let last = wt[wt.len() - 1];
            prop_assert!(wt.iter().all(|x| *x <= last + 1e-15));
            if let Ok(p) = hybrid_pool(&v, &times, &cfg, None) {
                prop_assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!((norm(&p.vector) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn date_shift_leaves_weights_unchanged((v, t) in arb_sequence(), shift in 0i64..3000) {
            let a = days(&t);
            let b: Vec<NaiveDate> = a.iter().map(|d| *d + chrono::Duration::days(shift)).collect();
            let cfg = PoolingConfig::default();
            prop_assert_eq!(time_weights(&a, 0.05, DeltaMode::Log1p).unwrap(), time_weights(&b, 0.05, DeltaMode::Log1p).unwrap());
            prop_assert_eq!(attention_weights(&v, &a, &cfg, None).unwrap(), attention_weights(&v, &b, &cfg, None).unwrap());
        }

        #[test]
        fn attention_is_scale_free((v, t) in arb_sequence(), scale in 0.01f64..100.0) {
            let times = days(&t);
            let cfg = PoolingConfig::default();
            let scaled: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
            let a = attention_weights(&v, &times, &cfg, None).unwrap();
            let b = attention_weights(&scaled, &times, &cfg, None).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn alpha_endpoints_match_pure_schemes((v, t) in arb_sequence()) {
            let times = days(&t);
            let hybrid1 = PoolingConfig { alpha: 1.0, ..Default::default() };
            let hybrid0 = PoolingConfig { alpha: 0.0, ..Default::default() };
            let time_only = PoolingConfig { method: PoolingMethod::Time, ..Default::default() };
            let att_only = PoolingConfig { method: PoolingMethod::Attention, ..Default::default() };
            if let (Ok(a), Ok(b)) = (hybrid_pool(&v, &times, &hybrid1, None), hybrid_pool(&v, &times, &time_only, None)) {
                prop_assert_eq!(a.vector, b.vector);
            }
            if let (Ok(a), Ok(b)) = (hybrid_pool(&v, &times, &hybrid0, None), hybrid_pool(&v, &times, &att_only, None)) {
                prop_assert_eq!(a.vector, b.vector);
            }
        }
    }
}
