//! Contrastive adaptation of the reference encoder.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::simcse::{simcse_loss_and_grad, SimCseConfig};
use super::{cosine, Gradients, ReferenceEncoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every micro-batch, in order.
    pub loss_trace: Vec<f64>,
    pub optimizer_steps: usize,
    pub training_sentences: usize,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.loss_trace.len()).max(1);
        let head = &self.loss_trace[..w.min(self.loss_trace.len())];
        let tail = &self.loss_trace[self.loss_trace.len().saturating_sub(w)..];
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(head), mean(tail))
    }
}

/// Decoupled-weight-decay Adam. Table rows keep state only once touched;
/// untouched rows have zero moments and therefore receive no update.
#[derive(Debug, Clone)]
pub(crate) struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: [Vec<f64>; 4],
    v: [Vec<f64>; 4],
    table_m: BTreeMap<usize, Vec<f64>>,
    table_v: BTreeMap<usize, Vec<f64>>,
}

impl AdamW {
    pub(crate) fn new(enc: &ReferenceEncoder, weight_decay: f64) -> Self {
        let z = |n: usize| vec![0.0; n];
        let sizes = [enc.w1.len(), enc.b1.len(), enc.w2.len(), enc.b2.len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: sizes.map(z),
            v: sizes.map(z),
            table_m: BTreeMap::new(),
            table_v: BTreeMap::new(),
        }
    }

    fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], s: &StepScalars) {
        for i in 0..p.len() {
            m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
            v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
            let mhat = m[i] / s.bc1;
            let vhat = v[i] / s.bc2;
            p[i] -= s.lr * s.wd * p[i];
            p[i] -= s.lr * mhat / (vhat.sqrt() + s.eps);
        }
    }

    pub(crate) fn step(&mut self, enc: &mut ReferenceEncoder, grads: &Gradients, lr: f64) {
        self.t += 1;
        let s = StepScalars {
            lr,
            wd: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            bc1: 1.0 - self.beta1.powi(self.t),
            bc2: 1.0 - self.beta2.powi(self.t),
        };
        let dense_grads = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
        let params = [&mut enc.w1, &mut enc.b1, &mut enc.w2, &mut enc.b2];
        for (k, p) in params.into_iter().enumerate() {
            Self::update(p, dense_grads[k], &mut self.m[k], &mut self.v[k], &s);
        }
        let hd = enc.config.hidden_dim;
        for row in grads.table.keys() {
            self.table_m.entry(*row).or_insert_with(|| vec![0.0; hd]);
            self.table_v.entry(*row).or_insert_with(|| vec![0.0; hd]);
        }
        let zeros = vec![0.0; hd];
        for (row, m) in self.table_m.iter_mut() {
            let v = self.table_v.get_mut(row).expect("moments share keys");
            let g = grads.table.get(row).unwrap_or(&zeros);
            Self::update(&mut enc.table[row * hd..(row + 1) * hd], g, m, v, &s);
        }
        if self.weight_decay != 0.0 {
            // decay rows that have never received a gradient
            let factor = 1.0 - lr * self.weight_decay;
            for (row, chunk) in enc.table.chunks_mut(hd).enumerate() {
                if !self.table_m.contains_key(&row) {
                    chunk.iter_mut().for_each(|p| *p *= factor);
                }
            }
        }
    }
}

struct StepScalars {
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

/// Unique sentences in first-seen order, capped by seeded uniform sampling.
pub fn prepare_corpus(corpus: &[String], max_samples: usize, seed: u64) -> Vec<String> {
    let mut seen = HashSet::new();
    let unique: Vec<String> = corpus.iter().filter(|s| seen.insert(s.as_str())).cloned().collect();
    if unique.len() <= max_samples {
        return unique;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, unique.len(), max_samples).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| unique[i].clone()).collect()
}

fn learning_rate(step: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

/// Loss and accumulated gradients for one micro-batch of pre-hashed sentences.
pub(crate) fn batch_loss_and_grads(
    enc: &ReferenceEncoder,
    batch: &[&Vec<usize>],
    temperature: f64,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let mut caches1 = Vec::with_capacity(batch.len());
    let mut caches2 = Vec::with_capacity(batch.len());
    for buckets in batch {
        let m1 = enc.sample_mask(rng);
        let m2 = enc.sample_mask(rng);
        caches1.push(enc.forward_buckets(buckets, Some(m1)));
        caches2.push(enc.forward_buckets(buckets, Some(m2)));
    }
    let v1: Vec<Vec<f64>> = caches1.iter().map(|c| c.out.clone()).collect();
    let v2: Vec<Vec<f64>> = caches2.iter().map(|c| c.out.clone()).collect();
    let (loss, g1, g2) = simcse_loss_and_grad(&v1, &v2, temperature)?;
    for (cache, g) in caches1.iter().zip(&g1).chain(caches2.iter().zip(&g2)) {
        let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
        enc.backward(cache, &scaled, grads);
    }
    Ok(loss)
}

/// Adapt `encoder` in place on `corpus` with the contrastive objective.
pub fn train_simcse(corpus: &[String], config: &SimCseConfig, encoder: &mut ReferenceEncoder) -> Result<TrainReport> {
    config.validate()?;
    encoder.set_dropout_rate(config.dropout_rate)?;
    encoder.set_max_seq_tokens(config.max_seq_tokens);
    let sentences = prepare_corpus(corpus, config.max_training_samples, config.seed);
    if sentences.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    if sentences.len() < config.batch_size {
        log::warn!(
            "corpus of {} sentences is smaller than one batch ({}); using a single short batch",
            sentences.len(),
            config.batch_size
        );
    }
    let hashed: Vec<Vec<usize>> = sentences.iter().map(|s| encoder.buckets(s)).collect();
    let micro_per_epoch = sentences.len().div_ceil(config.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(config.grad_accum_steps);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = (config.warmup_ratio * total_steps as f64).ceil() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(encoder, config.weight_decay);
    let mut trace = Vec::with_capacity(micro_per_epoch * config.epochs);
    let mut step = 0usize;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..hashed.len()).collect();
        order.shuffle(&mut rng);
        let micro: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for group in micro.chunks(config.grad_accum_steps) {
            let mut grads = Gradients::zeros(encoder);
            let scale = 1.0 / group.len() as f64;
            for mb in group {
                let batch: Vec<&Vec<usize>> = mb.iter().map(|&i| &hashed[i]).collect();
                let loss = batch_loss_and_grads(encoder, &batch, config.temperature, &mut rng, &mut grads, scale)?;
                trace.push(loss);
            }
            let gnorm = grads.norm();
            if gnorm > config.grad_clip_norm {
                grads.scale(config.grad_clip_norm / gnorm);
            }
            opt.step(encoder, &grads, learning_rate(step, warmup, config.learning_rate));
            step += 1;
        }
    }
    Ok(TrainReport { loss_trace: trace, optimizer_steps: step, training_sentences: sentences.len() })
}

/// Mean cosine between two dropout views of the same sentence.
pub fn mean_positive_cosine(encoder: &ReferenceEncoder, texts: &[String], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = texts
        .iter()
        .map(|t| {
            let a = encoder.encode_view(t, &mut rng);
            let b = encoder.encode_view(t, &mut rng);
            cosine(&a, &b)
        })
        .sum();
    total / texts.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::simcse::simcse_loss;
    use crate::encoder::tiny_encoder;

    fn corpus(n: usize) -> Vec<String> {
        let meds = ["ibuprofen", "sumatriptan 50 MG", "Botox 100 UNIT", "topiramate", "acetaminophen"];
        (0..n).map(|i| format!("{} days after previous, meds: {}", i % 97, meds[i % meds.len()])).collect()
    }

    #[test]
    fn corpus_is_deduplicated_and_capped() {
        let c = vec!["a".to_string(), "b".into(), "a".into(), "c".into()];
        assert_eq!(prepare_corpus(&c, 10, 0), vec!["a", "b", "c"]);
        let capped = prepare_corpus(&c, 2, 0);
        assert_eq!(capped.len(), 2);
        assert_eq!(capped, prepare_corpus(&c, 2, 0));
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        assert_eq!(learning_rate(0, 4, 1.0), 0.25);
        assert_eq!(learning_rate(3, 4, 1.0), 1.0);
        assert_eq!(learning_rate(10, 4, 1.0), 1.0);
        assert_eq!(learning_rate(0, 0, 0.5), 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut enc = tiny_encoder(16, 512, 4);
        let before = enc.clone();
        let cfg = SimCseConfig { learning_rate: 0.0, batch_size: 8, grad_accum_steps: 2, ..SimCseConfig::default() };
        let report = train_simcse(&corpus(64), &cfg, &mut enc).unwrap();
        assert!(report.optimizer_steps > 0);
        for (a, b) in enc.params().iter().zip(before.params()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn small_corpus_uses_one_short_batch() {
        let mut enc = tiny_encoder(8, 128, 4);
        let cfg = SimCseConfig { batch_size: 128, ..SimCseConfig::default() };
        let r = train_simcse(&corpus(5), &cfg, &mut enc).unwrap();
        assert_eq!(r.loss_trace.len(), 1);
        assert_eq!(r.optimizer_steps, 1);
        assert!(train_simcse(&[], &cfg, &mut enc).is_err());
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        // D = 4, B = 4, fixed dropout masks shared by every evaluation
        let mut enc = tiny_encoder(4, 16, 11);
        let texts = [
            "meds: ibuprofen 200",
            "comorbidities: Depression, Insomnia",
            "30 days after previous visit, meds: topiramate",
            "First visit, comorbidities: none",
        ];
        let buckets: Vec<Vec<usize>> = texts.iter().map(|t| enc.buckets(t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks: Vec<(Vec<f64>, Vec<f64>)> =
            buckets.iter().map(|_| (enc.sample_mask(&mut rng), enc.sample_mask(&mut rng))).collect();
        let tau = 0.5;
        let loss_of = |enc: &ReferenceEncoder| {
            let v1: Vec<Vec<f64>> = buckets.iter().zip(&masks).map(|(b, m)| enc.forward_buckets(b, Some(m.0.clone())).out).collect();
            let v2: Vec<Vec<f64>> = buckets.iter().zip(&masks).map(|(b, m)| enc.forward_buckets(b, Some(m.1.clone())).out).collect();
            simcse_loss(&v1, &v2, tau).unwrap()
        };
        let mut grads = Gradients::zeros(&enc);
        {
            let c1: Vec<_> = buckets.iter().zip(&masks).map(|(b, m)| enc.forward_buckets(b, Some(m.0.clone()))).collect();
            let c2: Vec<_> = buckets.iter().zip(&masks).map(|(b, m)| enc.forward_buckets(b, Some(m.1.clone()))).collect();
            let v1: Vec<Vec<f64>> = c1.iter().map(|c| c.out.clone()).collect();
            let v2: Vec<Vec<f64>> = c2.iter().map(|c| c.out.clone()).collect();
            let (_, g1, g2) = simcse_loss_and_grad(&v1, &v2, tau).unwrap();
            for (c, g) in c1.iter().zip(&g1).chain(c2.iter().zip(&g2)) {
                enc.backward(c, g, &mut grads);
            }
        }
        let analytic = grads.to_dense(&enc);
        let h = 1e-6;
        let mut idx = 0;
        let mut checked = 0;
        for slot in 0..5 {
            let len = enc.params()[slot].len();
            for i in 0..len {
                let orig = enc.params()[slot][i];
                enc.params_mut()[slot][i] = orig + h;
                let up = loss_of(&enc);
                enc.params_mut()[slot][i] = orig - h;
                let down = loss_of(&enc);
                enc.params_mut()[slot][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[idx];
                let denom = fd.abs().max(a.abs());
                if denom > 1e-6 {
                    assert!((fd - a).abs() / denom < 1e-4, "param {slot}/{i}: fd {fd} vs analytic {a}");
                    checked += 1;
                } else {
                    assert!((fd - a).abs() < 1e-8);
                }
                idx += 1;
            }
        }
        assert!(checked > 20, "only {checked} parameters had a measurable gradient");
    }
}
