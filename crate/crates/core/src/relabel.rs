//! Adaptive multi-labeling.
//!
//! Each instance is scored by the Jensen-Shannon divergence (base 2) between
//! its observed one-hot label and the fused weak/strong-view prediction. The
//! score sets the size of the candidate label set; instances scoring above the
//! dataset mean are treated as noisy and lose their observed label from the set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::net::{softmax, ModelBundle};
use crate::rng::stream;

const SIMPLEX_TOLERANCE: f64 = 1e-6;

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE
        || p.iter().any(|&v| v < -SIMPLEX_TOLERANCE || !v.is_finite())
    {
        return Err(Error::invalid(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// γ·p_w + (1 − γ)·p_s.
pub fn fused_confidence(p_weak: &[f64], p_strong: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if p_weak.len() != p_strong.len() {
        return Err(Error::Shape(format!(
            "views disagree on class count: {} vs {}",
            p_weak.len(),
            p_strong.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    check_simplex(p_weak, "weak-view prediction")?;
    check_simplex(p_strong, "strong-view prediction")?;
    Ok(p_weak
        .iter()
        .zip(p_strong)
        .map(|(w, s)| gamma * w + (1.0 - gamma) * s)
        .collect())
}

fn kl2(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).log2())
        .sum()
}

/// Jensen-Shannon divergence with base-2 logarithms, in [0, 1].
pub fn jsd(a: &[f64], b: &[f64]) -> f64 {
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    (0.5 * kl2(a, &m) + 0.5 * kl2(b, &m)).clamp(0.0, 1.0)
}

/// q = max(1, ⌊d·C⌋), capped at C.
pub fn label_count(d: f64, class_count: usize) -> usize {
    // tolerance keeps values like 0.35·100 from flooring to 34
    let raw = (d * class_count as f64 + 1e-9).floor();
    (raw.max(1.0) as usize).min(class_count.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanSplit {
    pub clean: Vec<bool>,
    pub threshold: f64,
    pub clean_count: usize,
    pub noisy_count: usize,
}

/// Clean ⇔ d ≤ mean(d).
pub fn split_clean_noisy(scores: &[f64]) -> Result<CleanSplit> {
    if scores.is_empty() {
        return Err(Error::invalid("no scores to split"));
    }
    let threshold = scores.iter().sum::<f64>() / scores.len() as f64;
    let clean: Vec<bool> = scores.iter().map(|&d| d <= threshold).collect();
    let clean_count = clean.iter().filter(|&&c| c).count();
    Ok(CleanSplit {
        noisy_count: clean.len() - clean_count,
        clean,
        threshold,
        clean_count,
    })
}

/// Top-q classes of `p_ws` by confidence, lower class index first on ties.
/// Noisy instances exclude the observed label, and their q is capped at C − 1.
pub fn build_multilabel(p_ws: &[f64], observed: usize, q: usize, clean: bool) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..p_ws.len())
        .filter(|&c| clean || c != observed)
        .collect();
    candidates.sort_by(|&a, &b| p_ws[b].total_cmp(&p_ws[a]).then(a.cmp(&b)));
    candidates.truncate(q.max(1));
    candidates
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelRecord {
    pub id: usize,
    pub d: f64,
    pub clean: bool,
    pub q: usize,
    pub labels: Vec<usize>,
}

/// Fraction of records whose label set contains the true label.
pub fn hit_rate(records: &[MultiLabelRecord], true_labels: &[usize]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .zip(true_labels)
        .filter(|(r, t)| r.labels.contains(t))
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelabelConfig {
    /// Weight of the weak view in the fused prediction.
    pub gamma: f64,
    pub augment: AugmentConfig,
    pub batch_size: usize,
}

impl Default for RelabelConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            augment: AugmentConfig::default(),
            batch_size: 256,
        }
    }
}

/// Everything the relabel pass learns about the training set, in set order.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabeling {
    pub records: Vec<MultiLabelRecord>,
    pub threshold: f64,
    /// Fused predictions, `n × C`.
    pub fused: Vec<f64>,
    /// Weak-view pooled features, `n × K`.
    pub features: Vec<f64>,
    pub class_count: usize,
    pub feature_dim: usize,
}

impl Relabeling {
    pub fn fused_of(&self, i: usize) -> &[f64] {
        &self.fused[i * self.class_count..(i + 1) * self.class_count]
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Argmax of the fused prediction per instance.
    pub fn top1(&self) -> Vec<usize> {
        (0..self.records.len())
            .map(|i| crate::net::argmax(self.fused_of(i)))
            .collect()
    }
}

const RELABEL_STREAM: u64 = 3;

/// Scores every training instance with `bundle` and builds its label set.
/// `pass` selects an independent augmentation stream.
pub fn relabel(
    bundle: &ModelBundle,
    set: &TrainingSet<'_>,
    config: &RelabelConfig,
    seed: u64,
    pass: u64,
) -> Result<Relabeling> {
    let c = set.class_count;
    let k = bundle.feature_dim();
    let n = set.len();
    let mut rng = stream(seed, RELABEL_STREAM, pass);
    let mut fused = Vec::with_capacity(n * c);
    let mut features = Vec::with_capacity(n * k);
    let mut scores = Vec::with_capacity(n);
    for start in (0..n).step_by(config.batch_size.max(1)) {
        let end = (start + config.batch_size.max(1)).min(n);
        let x = set.store.gather(&set.ids[start..end]);
        let views = config.augment.dual(&x, &mut rng);
        let weak = bundle.forward(&views.weak)?;
        let strong = bundle.forward(&views.strong)?;
        for i in 0..x.n {
            let pw = softmax(weak.logits_of(i));
            let ps = softmax(strong.logits_of(i));
            let p = fused_confidence(&pw, &ps, config.gamma)?;
            let mut onehot = vec![0.0; c];
            onehot[set.labels[start + i]] = 1.0;
            scores.push(jsd(&onehot, &p));
            fused.extend(p);
            features.extend_from_slice(weak.features_of(i));
        }
    }
    let split = split_clean_noisy(&scores)?;
    let records = (0..n)
        .map(|i| {
            let d = scores[i];
            let clean = split.clean[i];
            let q = label_count(d, c);
            let labels = build_multilabel(&fused[i * c..(i + 1) * c], set.labels[i], q, clean);
            MultiLabelRecord {
                id: set.ids[i],
                d,
                clean,
                q: labels.len(),
                labels,
            }
        })
        .collect();
    Ok(Relabeling {
        records,
        threshold: split.threshold,
        fused,
        features,
        class_count: c,
        feature_dim: k,
    })
}

/// Writes one JSON object per line.
pub fn write_dump(path: &Path, records: &[MultiLabelRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Vec<MultiLabelRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
