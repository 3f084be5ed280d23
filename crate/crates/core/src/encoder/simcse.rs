//! Unsupervised contrastive objective over two dropout views.
//!
//! The `2B` embeddings are stacked as `[view1_0..view1_{B-1}, view2_0..]`.
//! Each embedding is an anchor whose positive is its other view; the
//! denominator runs over every other embedding in the stack. The loss is the
//! mean over all `2B` anchors, i.e. the average of both view directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_training_samples: usize,
    pub warmup_ratio: f64,
    pub grad_clip_norm: f64,
    pub grad_accum_steps: usize,
    pub max_seq_tokens: usize,
    pub temperature: f64,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SimCseConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            learning_rate: 2e-5,
            max_training_samples: 200_000,
            warmup_ratio: 0.05,
            grad_clip_norm: 1.0,
            grad_accum_steps: 4,
            max_seq_tokens: 256,
            temperature: 0.05,
            dropout_rate: 0.1,
            weight_decay: 0.0,
            seed: 42,
        }
    }
}

impl SimCseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1]".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("learning_rate must be >= 0 and grad_clip_norm > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

struct Prepared {
    units: Vec<Vec<f64>>,
    norms: Vec<f64>,
    sims: Vec<f64>,
    n: usize,
}

fn prepare(view1: &[Vec<f64>], view2: &[Vec<f64>], temperature: f64) -> Result<Prepared> {
    if view1.is_empty() || view1.len() != view2.len() {
        return Err(Error::Data(format!(
            "views must be non-empty and equal length ({} vs {})",
            view1.len(),
            view2.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let dim = view1[0].len();
    let all: Vec<&Vec<f64>> = view1.iter().chain(view2).collect();
    let mut units = Vec::with_capacity(all.len());
    let mut norms = Vec::with_capacity(all.len());
    for z in &all {
        if z.len() != dim {
            return Err(Error::Dimension { expected: dim, got: z.len() });
        }
        let n = super::norm(z);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric("zero-norm embedding: cosine undefined".into()));
        }
        units.push(z.iter().map(|x| x / n).collect::<Vec<f64>>());
        norms.push(n);
    }
    let n = all.len();
    let mut sims = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            let s = super::dot(&units[a], &units[b]) / temperature;
            sims[a * n + b] = s;
            sims[b * n + a] = s;
        }
    }
    Ok(Prepared { units, norms, sims, n })
}

/// Per-anchor softmax over all other rows, and the loss.
fn softmax_rows(p: &Prepared) -> (f64, Vec<f64>) {
    let n = p.n;
    let b = n / 2;
    let mut probs = vec![0.0; n * n];
    let mut total = 0.0;
    for a in 0..n {
        let pos = if a < b { a + b } else { a - b };
        let row = &p.sims[a * n..(a + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != a)
            .map(|(_, s)| *s)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, s) in row.iter().enumerate() {
            if j != a {
                let e = (s - max).exp();
                probs[a * n + j] = e;
                z += e;
            }
        }
        for j in 0..n {
            probs[a * n + j] /= z;
        }
        total += -row[pos] + max + z.ln();
    }
    (total / n as f64, probs)
}

pub fn simcse_loss(view1: &[Vec<f64>], view2: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let p = prepare(view1, view2, temperature)?;
    Ok(softmax_rows(&p).0)
}

/// Loss, then gradients for the first and second views.
pub type LossAndGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Loss plus its gradient with respect to every view embedding.
pub fn simcse_loss_and_grad(view1: &[Vec<f64>], view2: &[Vec<f64>], temperature: f64) -> Result<LossAndGrads> {
    let p = prepare(view1, view2, temperature)?;
    let (loss, probs) = softmax_rows(&p);
    let n = p.n;
    let b = n / 2;
    let dim = p.units[0].len();
    // dL/dS[a][j]
    let mut g = probs;
    for a in 0..n {
        let pos = if a < b { a + b } else { a - b };
        g[a * n + pos] -= 1.0;
        for j in 0..n {
            g[a * n + j] /= n as f64;
        }
    }
    let mut grads = Vec::with_capacity(n);
    for a in 0..n {
        let mut du = vec![0.0; dim];
        for j in 0..n {
            if j == a {
                continue;
            }
            let c = (g[a * n + j] + g[j * n + a]) / temperature;
            if c != 0.0 {
                du.iter_mut().zip(&p.units[j]).for_each(|(d, u)| *d += c * u);
            }
        }
        let u = &p.units[a];
        let proj = super::dot(u, &du);
        grads.push(du.iter().zip(u).map(|(d, ui)| (d - ui * proj) / p.norms[a]).collect::<Vec<f64>>());
    }
    let second = grads.split_off(b);
    Ok((loss, grads, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal double-sum form, one direction at a time.
    fn oracle(view1: &[Vec<f64>], view2: &[Vec<f64>], tau: f64) -> f64 {
        let cos = |a: &Vec<f64>, b: &Vec<f64>| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let bsz = view1.len();
        let views = [view1, view2];
        let ell = |i: usize, anchor_view: usize| {
            let other = 1 - anchor_view;
            let z = &views[anchor_view][i];
            let num = (cos(z, &views[other][i]) / tau).exp();
            let mut den = 0.0;
            for k in 0..bsz {
                for v in 0..2 {
                    if !(k == i && v == anchor_view) {
                        den += (cos(z, &views[v][k]) / tau).exp();
                    }
                }
            }
            -(num / den).ln()
        };
        let mut total = 0.0;
        for i in 0..bsz {
            total += ell(i, 0) + ell(i, 1);
        }
        total / (2 * bsz) as f64
    }

    #[test]
    fn single_pair_batch_is_zero() {
        let l = simcse_loss(&[vec![1.0, 2.0]], &[vec![-0.3, 0.5]], 0.05).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn identical_batch_is_log_three() {
        let z = vec![0.3, -0.2, 0.9];
        let v = vec![z.clone(), z.clone()];
        let l = simcse_loss(&v, &v, 0.05).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn orthogonal_pairs_match_oracle() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let v = vec![e1, e2];
        let l = simcse_loss(&v, &v, 0.05).unwrap();
        let expected = oracle(&v, &v, 0.05);
        // closed form: log(1 + 2 e^{-20})
        assert!((expected - (1.0 + 2.0 * (-20f64).exp()).ln()).abs() < 1e-15);
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
    }

    #[test]
    fn random_batches_match_oracle_and_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for bsz in 1..6 {
            let mk = |rng: &mut ChaCha8Rng| (0..bsz).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let l = simcse_loss(&a, &b, 0.2).unwrap();
            assert!((l - oracle(&a, &b, 0.2)).abs() < 1e-10);
            assert!((l - simcse_loss(&b, &a, 0.2).unwrap()).abs() < 1e-12);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn zero_norm_is_numeric_error() {
        let r = simcse_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.05);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (_, ga, _) = simcse_loss_and_grad(&a, &b, 0.3).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for d in 0..4 {
                let orig = a[i][d];
                a[i][d] = orig + h;
                let up = simcse_loss(&a, &b, 0.3).unwrap();
                a[i][d] = orig - h;
                let down = simcse_loss(&a, &b, 0.3).unwrap();
                a[i][d] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - ga[i][d]).abs() < 1e-7, "{fd} vs {}", ga[i][d]);
            }
        }
    }
}
