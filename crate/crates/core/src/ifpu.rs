//! Inner-feature partial unlearning.
//!
//! A copy of the original model is fine-tuned while the original stays
//! frozen. For every instance, channels that G associates with none of its
//! candidate labels are masked out, and the unlearned model is pushed to give
//! the same logits with and without those channels:
//!
//! ```text
//! L_IFPU = mean_{i,c} (Θ(Ψ(x_i)) − Θ(Ψ(x_i) ⊙ M_i))²
//! ```
//!
//! Batches are extended with head-to-tail mixup samples and trained with
//! soft cross-entropy on smoothed multi-label targets.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, View};
use crate::data::{Batch, TrainingSet};
use crate::error::{Checkpoint, Error, Result};
use crate::forge::class_rank;
use crate::ifd::{soft_cross_entropy, to_f32_batch};
use crate::mixer::{
    mixup, multilabel_distribution, select_pairs, similarity_matrix, smooth_labels, MixerConfig,
};
use crate::net::{Classifier, CorrelationMatrix, ModelBundle, Stage};
use crate::optim::SgdConfig;
use crate::relabel::{relabel, RelabelConfig, Relabeling};
use crate::rng::stream;

/// Channels with summed correlation at or below this are masked.
pub const MASK_THRESHOLD: f64 = 1e-8;

/// M = 𝕀(Σ_{j∈labels} G[:, j] > 1e-8), as 0/1 values.
pub fn instance_mask(labels: &[usize], g: &CorrelationMatrix) -> Result<Vec<f64>> {
    if let Some(&l) = labels.iter().find(|&&l| l >= g.classes) {
        return Err(Error::invalid(format!(
            "label {l} outside [0, {})",
            g.classes
        )));
    }
    let v = g.as_slice();
    Ok((0..g.channels)
        .map(|k| {
            let s: f64 = labels.iter().map(|&j| v[k * g.classes + j]).sum();
            if s > MASK_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean squared logit difference between full and masked features, with
/// classifier gradients accumulated. Returns the loss and ∂L/∂features.
pub fn ifpu_head(
    classifier: &mut Classifier,
    features: &[f64],
    masks: &[f64],
    weight: f64,
) -> (f64, Vec<f64>) {
    let k = classifier.feature_dim;
    let c = classifier.class_count;
    let n = features.len() / k.max(1);
    let scale = 1.0 / (n * c) as f64;
    let mut loss = 0.0;
    let mut dfeat = vec![0.0; n * k];
    for i in 0..n {
        let f = &features[i * k..(i + 1) * k];
        let m = &masks[i * k..(i + 1) * k];
        let masked: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
        let za = classifier.logits(f);
        let zb = classifier.logits(&masked);
        let mut dz = vec![0.0; c];
        for j in 0..c {
            let d = za[j] - zb[j];
            loss += d * d * scale;
            dz[j] = 2.0 * d * scale * weight;
        }
        let da = classifier.backward(f, &dz);
        let neg: Vec<f64> = dz.iter().map(|v| -v).collect();
        let db = classifier.backward(&masked, &neg);
        let out = &mut dfeat[i * k..(i + 1) * k];
        for j in 0..k {
            out[j] = da[j] + db[j] * m[j];
        }
    }
    (loss, dfeat)
}

/// MSE from the unlearned logits to fixed per-instance targets; used when the
/// target is the original model's masked prediction. Returns the loss and
/// ∂L/∂features.
pub fn ifpu_head_to_targets(
    classifier: &mut Classifier,
    features: &[f64],
    targets: &[f64],
    weight: f64,
) -> (f64, Vec<f64>) {
    let k = classifier.feature_dim;
    let c = classifier.class_count;
    let n = features.len() / k.max(1);
    let scale = 1.0 / (n * c) as f64;
    let mut loss = 0.0;
    let mut dfeat = vec![0.0; n * k];
    for i in 0..n {
        let f = &features[i * k..(i + 1) * k];
        let z = classifier.logits(f);
        let t = &targets[i * c..(i + 1) * c];
        let dz: Vec<f64> = (0..c)
            .map(|j| {
                let d = z[j] - t[j];
                loss += d * d * scale;
                2.0 * d * scale * weight
            })
            .collect();
        dfeat[i * k..(i + 1) * k].copy_from_slice(&classifier.backward(f, &dz));
    }
    (loss, dfeat)
}

/// L_IFPU of `unlearned` on a batch, masks taken from the original's G.
pub fn ifpu_loss(
    original: &ModelBundle,
    unlearned: &ModelBundle,
    batch: &Batch,
    label_sets: &[Vec<usize>],
) -> Result<f64> {
    original.expect_stage(Stage::Original)?;
    unlearned.expect_stage(Stage::Unlearned)?;
    if batch.n != label_sets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} label sets",
            batch.n,
            label_sets.len()
        )));
    }
    let mut masks = Vec::new();
    for set in label_sets {
        masks.extend(instance_mask(set, &original.g)?);
    }
    let out = unlearned.forward(batch)?;
    let mut classifier = unlearned.classifier.clone();
    classifier.weight.zero_grad();
    classifier.bias.zero_grad();
    Ok(ifpu_head(&mut classifier, &out.features, &masks, 1.0).0)
}

/// What the unlearned model's full-feature logits are pulled toward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IfpuTarget {
    /// Its own logits on masked features, Θ(Ψ(x) ⊙ M).
    #[default]
    SelfMasked,
    /// The frozen original's logits on masked features, θ(ψ(x) ⊙ M).
    OriginalMasked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IfpuConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub ce_weight: f64,
    pub ifpu_weight: f64,
    pub target: IfpuTarget,
    pub seed: u64,
    pub relabel: RelabelConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for IfpuConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            sgd: SgdConfig {
                lr: 0.01,
                milestones: vec![10],
                ..SgdConfig::default()
            },
            ce_weight: 1.0,
            ifpu_weight: 1.0,
            target: IfpuTarget::SelfMasked,
            seed: 0,
            relabel: RelabelConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub ifpu: f64,
    pub hit_rate: Option<f64>,
    pub val_acc: Option<f64>,
    pub noisy_fraction: f64,
    pub mean_label_count: f64,
    pub mixed_pairs: usize,
}

/// State handed to the epoch monitor after each epoch.
pub struct EpochView<'a> {
    pub epoch: usize,
    /// The relabeling used during this epoch.
    pub relabeling: &'a Relabeling,
    pub model: &'a ModelBundle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochExtras {
    pub hit_rate: Option<f64>,
    pub val_acc: Option<f64>,
}

pub type Monitor<'m> = dyn FnMut(&EpochView<'_>) -> EpochExtras + 'm;

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnReport {
    pub epochs: Vec<UnlearnEpoch>,
    /// Relabeling by the final model.
    pub final_relabeling: Relabeling,
}

const UNLEARN_SHUFFLE: u64 = 11;
const UNLEARN_AUGMENT: u64 = 12;
const UNLEARN_LAMBDA: u64 = 13;

/// Fine-tunes an unlearned copy of `original`. The original is only read.
pub fn unlearn_finetune(
    original: &ModelBundle,
    set: &TrainingSet<'_>,
    config: &IfpuConfig,
    mixer: &MixerConfig,
    mut monitor: Option<&mut Monitor<'_>>,
) -> Result<(ModelBundle, UnlearnReport)> {
    original.expect_stage(Stage::Original)?;
    mixer.validate()?;
    if original.class_count() != set.class_count {
        return Err(Error::Shape(format!(
            "bundle has {} classes, data has {}",
            original.class_count(),
            set.class_count
        )));
    }
    let k = original.feature_dim();
    let c = set.class_count;
    let rank = class_rank(&set.class_sizes());
    let mut model = original.unlearned_copy();
    let mut last_good = model.clone();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let relabeling = relabel(&model, set, &config.relabel, config.seed, epoch as u64)?;
        let mut masks = Vec::with_capacity(set.len() * k);
        for r in &relabeling.records {
            masks.extend(instance_mask(&r.labels, &original.g)?);
        }
        let masked_feats: Vec<f64> = relabeling
            .features
            .iter()
            .zip(&masks)
            .map(|(f, m)| f * m)
            .collect();
        let targets: Vec<Vec<f64>> = relabeling
            .records
            .iter()
            .zip(set.labels)
            .map(|(r, &y)| smooth_labels(y, &multilabel_distribution(&r.labels, c), mixer.alpha))
            .collect();

        let lr = config.sgd.lr_at(epoch);
        order.shuffle(&mut stream(config.seed, UNLEARN_SHUFFLE, epoch as u64));
        let mut aug_rng = stream(config.seed, UNLEARN_AUGMENT, epoch as u64);
        let mut lambda_rng = stream(config.seed, UNLEARN_LAMBDA, epoch as u64);
        let (mut ce_sum, mut ifpu_sum, mut batches, mut mixed) = (0.0, 0.0, 0usize, 0usize);

        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let ids: Vec<usize> = chunk.iter().map(|&i| set.ids[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
            let mut x = set.store.gather(&ids);
            if let Some(aug) = &config.augment {
                aug.apply(&mut x, View::Weak, &mut aug_rng);
            }
            let mut batch_targets: Vec<Vec<f64>> =
                chunk.iter().map(|&i| targets[i].clone()).collect();
            let batch_feats: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| masked_feats[i * k..(i + 1) * k].iter().copied())
                .collect();
            let sim = similarity_matrix(&batch_feats, k, &labels, &rank)?;
            let pairs = select_pairs(&sim, mixer.pairs_for(n));
            for p in &pairs {
                let lambda = mixer.sample_lambda(&mut lambda_rng);
                let (xm, ym) = mixup(
                    x.item(p.i),
                    x.item(p.j),
                    &batch_targets[p.i],
                    &batch_targets[p.j],
                    lambda,
                )?;
                x.push(&xm);
                batch_targets.push(ym);
            }
            mixed += pairs.len();
            let batch_masks: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| masks[i * k..(i + 1) * k].iter().copied())
                .collect();

            model.zero_grad();
            let feats = model.backbone.forward(&x, true)?;
            let features: Vec<f64> = feats.data.iter().map(|&v| v as f64).collect();
            let rows = x.n;
            let scale = config.ce_weight / rows as f64;
            let mut dfeat = vec![0.0; rows * k];
            let mut ce = 0.0;
            for (r, target) in batch_targets.iter().enumerate() {
                let f = &features[r * k..(r + 1) * k];
                let (l, mut dz) = soft_cross_entropy(&model.classifier.logits(f), target);
                dz.iter_mut().for_each(|v| *v *= scale);
                let df = model.classifier.backward(f, &dz);
                dfeat[r * k..(r + 1) * k].copy_from_slice(&df);
                ce += l / rows as f64;
            }
            let (ifpu, dfi) = match config.target {
                IfpuTarget::SelfMasked => ifpu_head(
                    &mut model.classifier,
                    &features[..n * k],
                    &batch_masks,
                    config.ifpu_weight,
                ),
                IfpuTarget::OriginalMasked => {
                    let teacher = original.backbone.features(&x.head(n))?;
                    let mut targets = Vec::with_capacity(n * c);
                    for (i, f) in teacher.data.chunks(k).enumerate() {
                        let masked: Vec<f64> = f
                            .iter()
                            .zip(&batch_masks[i * k..(i + 1) * k])
                            .map(|(&a, &m)| a as f64 * m)
                            .collect();
                        targets.extend(original.classifier.logits(&masked));
                    }
                    ifpu_head_to_targets(
                        &mut model.classifier,
                        &features[..n * k],
                        &targets,
                        config.ifpu_weight,
                    )
                }
            };
            for (d, v) in dfeat.iter_mut().zip(&dfi) {
                *d += v;
            }
            for (component, v) in [("ce", ce), ("ifpu", ifpu)] {
                if !v.is_finite() {
                    return Err(Error::Diverged {
                        stage: "ifpu",
                        epoch,
                        component: component.to_string(),
                        last_good: Some(Checkpoint(Box::new(last_good))),
                    });
                }
            }
            model.backbone.backward(&to_f32_batch(&dfeat, k));
            for p in model.backbone.params_mut() {
                p.sgd_step(lr, config.sgd.momentum, config.sgd.weight_decay);
            }
            for p in model.classifier.params_mut() {
                p.sgd_step(lr, config.sgd.momentum, config.sgd.weight_decay);
            }
            ce_sum += ce;
            ifpu_sum += ifpu;
            batches += 1;
        }

        let extras = match monitor.as_mut() {
            Some(m) => m(&EpochView {
                epoch,
                relabeling: &relabeling,
                model: &model,
            }),
            None => EpochExtras::default(),
        };
        let total = relabeling.records.len() as f64;
        let entry = UnlearnEpoch {
            epoch,
            ce: ce_sum / batches.max(1) as f64,
            ifpu: ifpu_sum / batches.max(1) as f64,
            hit_rate: extras.hit_rate,
            val_acc: extras.val_acc,
            noisy_fraction: relabeling.records.iter().filter(|r| !r.clean).count() as f64 / total,
            mean_label_count: relabeling.records.iter().map(|r| r.q as f64).sum::<f64>() / total,
            mixed_pairs: mixed,
        };
        log::debug!(
            "ifpu epoch {epoch}: ce {:.4} ifpu {:.5} noisy {:.3} q {:.2} pairs {}",
            entry.ce,
            entry.ifpu,
            entry.noisy_fraction,
            entry.mean_label_count,
            entry.mixed_pairs
        );
        log.push(entry);
        last_good = model.clone();
    }

    let final_relabeling = relabel(
        &model,
        set,
        &config.relabel,
        config.seed,
        config.epochs as u64,
    )?;
    Ok((
        model,
        UnlearnReport {
            epochs: log,
            final_relabeling,
        },
    ))
}
