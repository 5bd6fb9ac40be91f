//! Inner-feature disentangling: trains backbone, classifier and G jointly so
//! that each feature channel serves a single class.
//!
//! Objective per batch:
//!
//! ```text
//! L0 = CE(y, θ(f(x))) + CE(y, θ(f(x) ⊙ G[:, y]))
//! L1 = β · ‖GᵀG − I_C‖²_F
//! L  = L0 + L1 + ‖G‖_p / (K·C)
//! ```

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, View};
use crate::data::{Batch, InputShape, TrainingSet};
use crate::error::{Checkpoint, Error, Result};
use crate::net::{softmax, Classifier, CorrelationMatrix, ModelBundle, ModelConfig, Stage};
use crate::optim::SgdConfig;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SparsityNorm {
    L1,
    L2,
}

impl TryFrom<u8> for SparsityNorm {
    type Error = String;
    fn try_from(p: u8) -> std::result::Result<Self, String> {
        match p {
            1 => Ok(SparsityNorm::L1),
            2 => Ok(SparsityNorm::L2),
            other => Err(format!("sparsity norm must be 1 or 2, got {other}")),
        }
    }
}

impl From<SparsityNorm> for u8 {
    fn from(p: SparsityNorm) -> u8 {
        match p {
            SparsityNorm::L1 => 1,
            SparsityNorm::L2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfdConfig {
    pub beta: f64,
    #[serde(rename = "sparsity_norm")]
    pub norm: SparsityNorm,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Learning rate multiplier for G relative to the network.
    pub g_lr_scale: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for IfdConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            norm: SparsityNorm::L1,
            epochs: 40,
            batch_size: 64,
            sgd: SgdConfig::default(),
            g_lr_scale: 1.0,
            seed: 0,
            model: ModelConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl IfdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Loss value split into its reported parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IfdLoss {
    pub l0: f64,
    pub l1: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfdEpoch {
    pub epoch: usize,
    #[serde(rename = "L0")]
    pub l0: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    pub sparsity: f64,
    #[serde(rename = "OM")]
    pub om: f64,
    #[serde(rename = "LSM")]
    pub lsm: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DisentangleReport {
    pub initial_om: f64,
    pub initial_lsm: f64,
    pub epochs: Vec<IfdEpoch>,
}

impl DisentangleReport {
    pub fn om(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.om).collect()
    }

    pub fn lsm(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lsm).collect()
    }

    pub fn final_om(&self) -> f64 {
        self.epochs.last().map_or(self.initial_om, |e| e.om)
    }

    pub fn final_lsm(&self) -> f64 {
        self.epochs.last().map_or(self.initial_lsm, |e| e.lsm)
    }

    /// First epoch (1-based count) whose OM is at or below `threshold`.
    pub fn epochs_to_om(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .position(|e| e.om <= threshold)
            .map(|p| p + 1)
    }
}

/// Cross-entropy against a hard label; returns the loss and ∂/∂logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut d = p;
    d[label] -= 1.0;
    (loss, d)
}

/// Cross-entropy against a probability vector.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -target
        .iter()
        .zip(&p)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &q)| t * q.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>();
    let d = p.iter().zip(target).map(|(q, t)| q - t).collect();
    (loss, d)
}

/// GᵀG, a C×C row-major matrix.
fn gram(g: &CorrelationMatrix) -> Vec<f64> {
    let c = g.classes;
    let v = g.as_slice();
    let mut m = vec![0.0; c * c];
    for row in v.chunks(c) {
        for a in 0..c {
            if row[a] == 0.0 {
                continue;
            }
            for b in 0..c {
                m[a * c + b] += row[a] * row[b];
            }
        }
    }
    m
}

/// β · ‖GᵀG − I_C‖²_F.
pub fn orthogonality_penalty(g: &CorrelationMatrix, beta: f64) -> f64 {
    let c = g.classes;
    let m = gram(g);
    let mut sum = 0.0;
    for a in 0..c {
        for b in 0..c {
            let d = m[a * c + b] - if a == b { 1.0 } else { 0.0 };
            sum += d * d;
        }
    }
    beta * sum
}

/// ∂/∂G of [`orthogonality_penalty`]: 4β · G(GᵀG − I).
pub fn orthogonality_grad(g: &CorrelationMatrix, beta: f64) -> Vec<f64> {
    let c = g.classes;
    let mut d = gram(g);
    for a in 0..c {
        d[a * c + a] -= 1.0;
    }
    let mut out = vec![0.0; g.channels * c];
    for (row, orow) in g.as_slice().chunks(c).zip(out.chunks_mut(c)) {
        for a in 0..c {
            let s: f64 = (0..c).map(|b| row[b] * d[b * c + a]).sum();
            orow[a] = 4.0 * beta * s;
        }
    }
    out
}

/// Raw ‖G‖_p over all entries.
pub fn sparsity_penalty(g: &CorrelationMatrix, norm: SparsityNorm) -> f64 {
    match norm {
        SparsityNorm::L1 => g.as_slice().iter().map(|v| v.abs()).sum(),
        SparsityNorm::L2 => g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

/// ∂/∂G of the raw ‖G‖_p. For p = 1 the subgradient at 0 is taken from the
/// feasible side (+1), so projected entries stay at zero.
pub fn sparsity_grad(g: &CorrelationMatrix, norm: SparsityNorm) -> Vec<f64> {
    match norm {
        SparsityNorm::L1 => g
            .as_slice()
            .iter()
            .map(|&v| if v < 0.0 { -1.0 } else { 1.0 })
            .collect(),
        SparsityNorm::L2 => {
            let n = sparsity_penalty(g, norm);
            if n == 0.0 {
                vec![0.0; g.as_slice().len()]
            } else {
                g.as_slice().iter().map(|v| v / n).collect()
            }
        }
    }
}

/// Σ_{i<j} |cos(G[:, i], G[:, j])|; pairs with a zero column contribute 0.
pub fn om_metric(g: &CorrelationMatrix) -> f64 {
    let c = g.classes;
    let m = gram(g);
    let mut sum = 0.0;
    for a in 0..c {
        for b in a + 1..c {
            let denom = (m[a * c + a] * m[b * c + b]).sqrt();
            if denom > 0.0 {
                sum += (m[a * c + b] / denom).abs();
            }
        }
    }
    sum
}

/// ‖G‖₁ / (K·C).
pub fn lsm_metric(g: &CorrelationMatrix) -> f64 {
    sparsity_penalty(g, SparsityNorm::L1) / (g.channels * g.classes) as f64
}

/// Evaluates the IFD objective on pooled features and accumulates gradients
/// into the classifier and G. Returns the loss and ∂L/∂features (`n × K`).
pub fn ifd_head(
    classifier: &mut Classifier,
    g: &mut CorrelationMatrix,
    features: &[f64],
    labels: &[usize],
    beta: f64,
    norm: SparsityNorm,
) -> (IfdLoss, Vec<f64>) {
    let k = classifier.feature_dim;
    let c = classifier.class_count;
    let n = labels.len();
    let scale = 1.0 / n as f64;
    let mut dfeat = vec![0.0; n * k];
    let mut l0 = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let f = &features[i * k..(i + 1) * k];
        let (ce, mut dz) = cross_entropy(&classifier.logits(f), y);
        dz.iter_mut().for_each(|v| *v *= scale);
        let df = classifier.backward(f, &dz);

        let mask = g.column(y);
        let masked: Vec<f64> = f.iter().zip(&mask).map(|(a, m)| a * m).collect();
        let (ce_m, mut dzm) = cross_entropy(&classifier.logits(&masked), y);
        dzm.iter_mut().for_each(|v| *v *= scale);
        let dh = classifier.backward(&masked, &dzm);

        let out = &mut dfeat[i * k..(i + 1) * k];
        for j in 0..k {
            out[j] = df[j] + dh[j] * mask[j];
            g.values.grad[j * c + y] += dh[j] * f[j];
        }
        l0 += (ce + ce_m) * scale;
    }

    let l1 = orthogonality_penalty(g, beta);
    let norm_scale = 1.0 / (k * c) as f64;
    let sparsity = sparsity_penalty(g, norm) * norm_scale;
    let og = orthogonality_grad(g, beta);
    let sg = sparsity_grad(g, norm);
    for ((gr, o), s) in g.values.grad.iter_mut().zip(&og).zip(&sg) {
        *gr += o + s * norm_scale;
    }
    let loss = IfdLoss {
        l0,
        l1,
        sparsity,
        total: l0 + l1 + sparsity,
    };
    (loss, dfeat)
}

/// The IFD loss of `bundle` on one batch, without modifying the bundle.
pub fn ifd_loss(
    bundle: &ModelBundle,
    batch: &Batch,
    labels: &[usize],
    beta: f64,
    norm: SparsityNorm,
) -> Result<IfdLoss> {
    bundle.expect_stage(Stage::Original)?;
    if batch.n != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            batch.n,
            labels.len()
        )));
    }
    let out = bundle.forward(batch)?;
    let mut classifier = bundle.classifier.clone();
    let mut g = bundle.g.clone();
    classifier.weight.zero_grad();
    classifier.bias.zero_grad();
    g.values.zero_grad();
    let (loss, _) = ifd_head(&mut classifier, &mut g, &out.features, labels, beta, norm);
    check_finite(&loss, "ifd", 0)?;
    Ok(loss)
}

fn check_finite(loss: &IfdLoss, stage: &'static str, epoch: usize) -> Result<()> {
    for (name, v) in [
        ("L0", loss.l0),
        ("L1", loss.l1),
        ("sparsity", loss.sparsity),
    ] {
        if !v.is_finite() {
            return Err(Error::Diverged {
                stage,
                epoch,
                component: name.to_string(),
                last_good: None,
            });
        }
    }
    Ok(())
}

pub(crate) fn to_f32_batch(values: &[f64], dim: usize) -> Batch {
    let n = values.len() / dim.max(1);
    Batch {
        shape: InputShape::vector(dim),
        n,
        data: values.iter().map(|&v| v as f32).collect(),
    }
}

pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const AUGMENT_STREAM: u64 = 2;

/// Trains the original bundle with the IFD objective.
pub fn train_ifd(
    set: &TrainingSet<'_>,
    config: &IfdConfig,
) -> Result<(ModelBundle, DisentangleReport)> {
    config.validate()?;
    let mut bundle = ModelBundle::new(
        &config.model,
        set.store.shape(),
        set.class_count,
        config.seed,
    )?;
    let report = train_ifd_from(&mut bundle, set, config)?;
    Ok((bundle, report))
}

/// IFD training starting from an existing original-stage bundle.
pub fn train_ifd_from(
    bundle: &mut ModelBundle,
    set: &TrainingSet<'_>,
    config: &IfdConfig,
) -> Result<DisentangleReport> {
    config.validate()?;
    bundle.expect_stage(Stage::Original)?;
    if bundle.class_count() != set.class_count {
        return Err(Error::Shape(format!(
            "bundle has {} classes, data has {}",
            bundle.class_count(),
            set.class_count
        )));
    }
    let k = bundle.feature_dim();
    let mut report = DisentangleReport {
        initial_om: om_metric(&bundle.g),
        initial_lsm: lsm_metric(&bundle.g),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut last_good = bundle.clone();

    for epoch in 0..config.epochs {
        let lr = config.sgd.lr_at(epoch);
        order.shuffle(&mut stream(config.seed, SHUFFLE_STREAM, epoch as u64));
        let mut aug_rng = stream(config.seed, AUGMENT_STREAM, epoch as u64);
        let mut sums = IfdLoss::default();
        let mut batches = 0usize;
        let mut correct = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&i| set.ids[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let mut x = set.store.gather(&ids);
            if let Some(aug) = &config.augment {
                aug.apply(&mut x, View::Weak, &mut aug_rng);
            }
            bundle.zero_grad();
            let feats = bundle.backbone.forward(&x, true)?;
            let features: Vec<f64> = feats.data.iter().map(|&v| v as f64).collect();
            for (i, &y) in labels.iter().enumerate() {
                let logits = bundle.classifier.logits(&features[i * k..(i + 1) * k]);
                if crate::net::argmax(&logits) == y {
                    correct += 1;
                }
            }
            let (loss, dfeat) = ifd_head(
                &mut bundle.classifier,
                &mut bundle.g,
                &features,
                &labels,
                config.beta,
                config.norm,
            );
            if let Err(Error::Diverged {
                stage,
                epoch,
                component,
                ..
            }) = check_finite(&loss, "ifd", epoch)
            {
                return Err(Error::Diverged {
                    stage,
                    epoch,
                    component,
                    last_good: Some(Checkpoint(Box::new(last_good))),
                });
            }
            bundle.backbone.backward(&to_f32_batch(&dfeat, k));

            for p in bundle.backbone.params_mut() {
                p.sgd_step(lr, config.sgd.momentum, config.sgd.weight_decay);
            }
            for p in bundle.classifier.params_mut() {
                p.sgd_step(lr, config.sgd.momentum, config.sgd.weight_decay);
            }
            bundle
                .g
                .values
                .sgd_step(lr * config.g_lr_scale, config.sgd.momentum, 0.0);
            bundle.g.project();

            sums.l0 += loss.l0;
            sums.l1 += loss.l1;
            sums.sparsity += loss.sparsity;
            batches += 1;
        }

        let b = batches.max(1) as f64;
        let entry = IfdEpoch {
            epoch,
            l0: sums.l0 / b,
            l1: sums.l1 / b,
            sparsity: sums.sparsity / b,
            om: om_metric(&bundle.g),
            lsm: lsm_metric(&bundle.g),
            train_acc: 100.0 * correct as f64 / set.len() as f64,
        };
        log::debug!(
            "ifd epoch {epoch}: L0 {:.4} L1 {:.4} OM {:.3} LSM {:.4} acc {:.1}",
            entry.l0,
            entry.l1,
            entry.om,
            entry.lsm,
            entry.train_acc
        );
        report.epochs.push(entry);
        last_good = bundle.clone();
    }
    Ok(report)
}
