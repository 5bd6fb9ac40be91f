//! Head-to-tail mixing: pairs each instance with a similar instance from a
//! smaller observed class and mixes inputs and smoothed targets.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed { value: f64 },
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerConfig {
    /// Weight of the multi-label distribution in the smoothed target.
    pub alpha: f64,
    pub lambda: LambdaMode,
    /// Pairs drawn per batch; `None` uses a quarter of the batch.
    pub pairs_per_batch: Option<usize>,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: LambdaMode::Fixed { value: 0.5 },
            pairs_per_batch: None,
        }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        match self.lambda {
            LambdaMode::Fixed { value } if !(0.0..=1.0).contains(&value) => Err(Error::invalid(
                format!("lambda must lie in [0, 1], got {value}"),
            )),
            LambdaMode::Beta { a, b } if !(a > 0.0 && b > 0.0) => Err(Error::invalid(format!(
                "beta parameters must be positive, got ({a}, {b})"
            ))),
            _ => Ok(()),
        }
    }

    pub fn pairs_for(&self, batch_size: usize) -> usize {
        self.pairs_per_batch.unwrap_or(batch_size / 4)
    }

    pub fn sample_lambda(&self, rng: &mut Rng) -> f64 {
        match self.lambda {
            LambdaMode::Fixed { value } => value,
            LambdaMode::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng),
        }
    }
}

/// Row-normalized similarity over a batch. Entry (i, j) is nonzero only when
/// j's observed class ranks strictly below i's (is smaller).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// `features` is `n × K` masked features, `labels` the observed labels and
/// `rank` the size rank of each class (0 = largest).
pub fn similarity_matrix(
    features: &[f64],
    feature_dim: usize,
    labels: &[usize],
    rank: &[usize],
) -> Result<SimilarityMatrix> {
    let n = labels.len();
    if features.len() != n * feature_dim {
        return Err(Error::Shape(format!(
            "{} feature values for {n} instances of dim {feature_dim}",
            features.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= rank.len()) {
        return Err(Error::invalid(format!("label {l} has no class rank")));
    }
    let row = |i: usize| &features[i * feature_dim..(i + 1) * feature_dim];
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let ri = rank[labels[i]];
        let mut sum = 0.0;
        for j in 0..n {
            if i == j || rank[labels[j]] <= ri {
                continue;
            }
            let s: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
            let s = s.max(0.0);
            values[i * n + j] = s;
            sum += s;
        }
        if sum > 0.0 {
            values[i * n..(i + 1) * n]
                .iter_mut()
                .for_each(|v| *v /= sum);
        }
    }
    Ok(SimilarityMatrix { n, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub similarity: f64,
}

/// The `count` largest positive entries, ties broken by (i, j).
pub fn select_pairs(m: &SimilarityMatrix, count: usize) -> Vec<Pair> {
    let mut pairs: Vec<Pair> = (0..m.n)
        .flat_map(|i| (0..m.n).map(move |j| (i, j)))
        .filter_map(|(i, j)| {
            let s = m.get(i, j);
            (s > 0.0).then_some(Pair {
                i,
                j,
                similarity: s,
            })
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then((a.i, a.j).cmp(&(b.i, b.j)))
    });
    pairs.truncate(count);
    pairs
}

/// Uniform distribution over a label set.
pub fn multilabel_distribution(labels: &[usize], class_count: usize) -> Vec<f64> {
    let mut out = vec![0.0; class_count];
    if labels.is_empty() {
        return out;
    }
    let w = 1.0 / labels.len() as f64;
    for &l in labels {
        out[l] += w;
    }
    out
}

/// (1 − α)·one_hot(y) + α·ŷ.
pub fn smooth_labels(observed: usize, multi: &[f64], alpha: f64) -> Vec<f64> {
    let mut out: Vec<f64> = multi.iter().map(|m| alpha * m).collect();
    out[observed] += 1.0 - alpha;
    out
}

/// λ·a + (1 − λ)·b for both inputs and targets.
pub fn mixup(
    x_a: &[f32],
    x_b: &[f32],
    y_a: &[f64],
    y_b: &[f64],
    lambda: f64,
) -> Result<(Vec<f32>, Vec<f64>)> {
    if x_a.len() != x_b.len() || y_a.len() != y_b.len() {
        return Err(Error::Shape("mixup operands differ in shape".into()));
    }
    let l = lambda as f32;
    let x = x_a
        .iter()
        .zip(x_b)
        .map(|(a, b)| l * a + (1.0 - l) * b)
        .collect();
    let y = y_a
        .iter()
        .zip(y_b)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    Ok((x, y))
}
