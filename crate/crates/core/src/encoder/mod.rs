//! Text encoders.
//!
//! The reference encoder is a hashed bag-of-tokens model: lowercase
//! alphanumeric tokens are hashed into a fixed number of buckets, the bucket
//! rows of a trainable table are mean-pooled, and a two-layer projection with
//! dropout between the layers produces the output vector. Dropout is the only
//! source of randomness, which is what the contrastive views rely on.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub mod external;
pub mod io;
pub mod simcse;
pub mod train;

pub use external::{EncoderSpec, ExternalEncoder};
pub use simcse::{simcse_loss, simcse_loss_and_grad, SimCseConfig};
pub use train::{train_simcse, TrainReport};

/// Lowercase and split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub max_seq_tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 65_536,
            hidden_dim: 128,
            output_dim: 128,
            dropout_rate: 0.1,
            max_seq_tokens: 256,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.output_dim == 0 || self.max_seq_tokens == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Anything that turns sentences into fixed-width vectors.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    /// Deterministic encodings, one per input, in input order.
    fn encode_batch(&self, texts: &[String], exec: Execution) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    pub(crate) config: EncoderConfig,
    /// `vocab_size × hidden_dim`, row-major.
    pub(crate) table: Vec<f64>,
    /// `hidden_dim × hidden_dim`, output-major.
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    /// `output_dim × hidden_dim`, output-major.
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    buckets: Vec<usize>,
    h0: Vec<f64>,
    h1: Vec<f64>,
    /// Per-unit dropout scale: 0 or 1/(1-p). Empty means no dropout.
    mask: Vec<f64>,
    pub out: Vec<f64>,
}

/// Parameter gradients. Table rows are stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) table: BTreeMap<usize, Vec<f64>>,
    pub(crate) w1: Vec<f64>,
    pub(crate) b1: Vec<f64>,
    pub(crate) w2: Vec<f64>,
    pub(crate) b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros(enc: &ReferenceEncoder) -> Self {
        Self {
            table: BTreeMap::new(),
            w1: vec![0.0; enc.w1.len()],
            b1: vec![0.0; enc.b1.len()],
            w2: vec![0.0; enc.w2.len()],
            b2: vec![0.0; enc.b2.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        let dense = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>();
        let sparse = self.table.values().flat_map(|r| r.iter()).map(|g| g * g).sum::<f64>();
        (dense + sparse).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|g| *g *= s);
        }
        for row in self.table.values_mut() {
            row.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Flatten in parameter order (table, w1, b1, w2, b2).
    pub fn to_dense(&self, enc: &ReferenceEncoder) -> Vec<f64> {
        let hd = enc.config.hidden_dim;
        let mut table = vec![0.0; enc.table.len()];
        for (row, g) in &self.table {
            table[row * hd..(row + 1) * hd].copy_from_slice(g);
        }
        [table, self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()].concat()
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

impl ReferenceEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, h, o) = (config.vocab_size, config.hidden_dim, config.output_dim);
        let table = (0..v * h).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w1 = xavier(&mut rng, h, h, h * h);
        let w2 = xavier(&mut rng, h, o, o * h);
        Ok(Self { config, table, w1, b1: vec![0.0; h], w2, b2: vec![0.0; o] })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn set_dropout_rate(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout_rate {p} outside [0, 1)")));
        }
        self.config.dropout_rate = p;
        Ok(())
    }

    pub fn set_max_seq_tokens(&mut self, n: usize) {
        self.config.max_seq_tokens = n.max(1);
    }

    pub fn num_params(&self) -> usize {
        self.table.len() + self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameter slices in canonical order (table, w1, b1, w2, b2).
    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.table, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> [&Vec<f64>; 5] {
        [&self.table, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Hash buckets of the first `max_seq_tokens` tokens.
    pub fn buckets(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .take(self.config.max_seq_tokens)
            .map(|t| (fnv1a(t.as_bytes()) % self.config.vocab_size as u64) as usize)
            .collect()
    }

    /// Draw one dropout realization for the hidden layer.
    pub fn sample_mask<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let p = self.config.dropout_rate;
        if p == 0.0 {
            return vec![1.0; self.config.hidden_dim];
        }
        let keep = 1.0 / (1.0 - p);
        (0..self.config.hidden_dim)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect()
    }

    /// Forward pass over pre-hashed buckets with an optional dropout mask.
    pub fn forward_buckets(&self, buckets: &[usize], mask: Option<Vec<f64>>) -> ForwardCache {
        let (hd, od) = (self.config.hidden_dim, self.config.output_dim);
        let mut h0 = vec![0.0; hd];
        if !buckets.is_empty() {
            for &b in buckets {
                let row = &self.table[b * hd..(b + 1) * hd];
                h0.iter_mut().zip(row).for_each(|(a, r)| *a += r);
            }
            let inv = 1.0 / buckets.len() as f64;
            h0.iter_mut().for_each(|a| *a *= inv);
        }
        let h1: Vec<f64> = (0..hd)
            .map(|j| {
                let w = &self.w1[j * hd..(j + 1) * hd];
                (self.b1[j] + dot(w, &h0)).tanh()
            })
            .collect();
        let mask = mask.unwrap_or_default();
        let dropped: Vec<f64> = if mask.is_empty() {
            h1.clone()
        } else {
            h1.iter().zip(&mask).map(|(h, m)| h * m).collect()
        };
        let out = (0..od)
            .map(|k| self.b2[k] + dot(&self.w2[k * hd..(k + 1) * hd], &dropped))
            .collect();
        ForwardCache { buckets: buckets.to_vec(), h0, h1, mask, out }
    }

    /// Deterministic encoding (dropout disabled).
    pub fn encode(&self, text: &str) -> Vec<f64> {
        self.forward_buckets(&self.buckets(text), None).out
    }

    /// One stochastic dropout view.
    pub fn encode_view<R: Rng>(&self, text: &str, rng: &mut R) -> Vec<f64> {
        let mask = self.sample_mask(rng);
        self.forward_buckets(&self.buckets(text), Some(mask)).out
    }

    /// Accumulate `d loss / d params` given `d loss / d out`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grads: &mut Gradients) {
        let hd = self.config.hidden_dim;
        let has_mask = !cache.mask.is_empty();
        // dropped activations
        let dropped: Vec<f64> = if has_mask {
            cache.h1.iter().zip(&cache.mask).map(|(h, m)| h * m).collect()
        } else {
            cache.h1.clone()
        };
        let mut d_dropped = vec![0.0; hd];
        for (k, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[k] += g;
            let row = k * hd;
            for j in 0..hd {
                grads.w2[row + j] += g * dropped[j];
                d_dropped[j] += g * self.w2[row + j];
            }
        }
        let d_a1: Vec<f64> = (0..hd)
            .map(|j| {
                let m = if has_mask { cache.mask[j] } else { 1.0 };
                d_dropped[j] * m * (1.0 - cache.h1[j] * cache.h1[j])
            })
            .collect();
        let mut d_h0 = vec![0.0; hd];
        for (j, &g) in d_a1.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b1[j] += g;
            let row = j * hd;
            for i in 0..hd {
                grads.w1[row + i] += g * cache.h0[i];
                d_h0[i] += g * self.w1[row + i];
            }
        }
        if cache.buckets.is_empty() {
            return;
        }
        let inv = 1.0 / cache.buckets.len() as f64;
        for &b in &cache.buckets {
            let row = grads.table.entry(b).or_insert_with(|| vec![0.0; hd]);
            row.iter_mut().zip(&d_h0).for_each(|(r, d)| *r += d * inv);
        }
    }
}

impl TextEncoder for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.config.output_dim
    }

    fn encode_batch(&self, texts: &[String], exec: Execution) -> Result<Vec<Vec<f64>>> {
        Ok(exec.map(texts, |t| self.encode(t)))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Row-aligned `f32` embeddings, as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension { expected: dim, got: r.len() });
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self { dim, data })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.row(i).iter().map(|&x| x as f64).collect()).collect()
    }
}

/// Encode texts in input order. Duplicate texts are encoded once.
pub fn encode_corpus(texts: &[String], encoder: &dyn TextEncoder, exec: Execution) -> Result<EmbeddingMatrix> {
    let mut first: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<String> = Vec::new();
    let slots: Vec<usize> = texts
        .iter()
        .map(|t| {
            *first.entry(t.as_str()).or_insert_with(|| {
                unique.push(t.clone());
                unique.len() - 1
            })
        })
        .collect();
    let encoded = encoder.encode_batch(&unique, exec)?;
    let dim = encoder.dim();
    let mut data = Vec::with_capacity(texts.len() * dim);
    for s in slots {
        let v = &encoded[s];
        if v.len() != dim {
            return Err(Error::Dimension { expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite value".into()));
        }
        data.extend(v.iter().map(|&x| x as f32));
    }
    Ok(EmbeddingMatrix { dim, data })
}

/// Encoders for the two concepts. They never share parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEncoders {
    pub medication: ReferenceEncoder,
    pub comorbidity: ReferenceEncoder,
}

impl ConceptEncoders {
    /// Two independently initialized encoders; the comorbidity seed is offset.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        let medication = ReferenceEncoder::new(config.clone())?;
        let comorbidity = ReferenceEncoder::new(EncoderConfig {
            seed: config.seed ^ 0x9e37_79b9_7f4a_7c15,
            ..config.clone()
        })?;
        Ok(Self { medication, comorbidity })
    }

    pub fn get(&self, c: crate::text::Concept) -> &ReferenceEncoder {
        match c {
            crate::text::Concept::Medication => &self.medication,
            crate::text::Concept::Comorbidity => &self.comorbidity,
        }
    }

    pub fn get_mut(&mut self, c: crate::text::Concept) -> &mut ReferenceEncoder {
        match c {
            crate::text::Concept::Medication => &mut self.medication,
            crate::text::Concept::Comorbidity => &mut self.comorbidity,
        }
    }
}

#[cfg(test)]
pub(crate) fn tiny_encoder(dim: usize, vocab: usize, seed: u64) -> ReferenceEncoder {
    ReferenceEncoder::new(EncoderConfig {
        vocab_size: vocab,
        hidden_dim: dim,
        output_dim: dim,
        dropout_rate: 0.1,
        max_seq_tokens: 256,
        seed,
    })
    .unwrap()
}
