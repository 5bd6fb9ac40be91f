//! The trainable triple: backbone, classifier, and channel-class correlation
//! matrix G, plus the masked forward pass shared by every objective.
//!
//! The backbone runs in `f32`; everything after pooling (classifier, G, losses)
//! runs in `f64`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, InputShape};
use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneConfig};
use crate::optim::Param;
use crate::rng::{seeded, Rng};

/// Linear map from K features to C logits. `weight` is `C × K`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub feature_dim: usize,
    pub class_count: usize,
    pub weight: Param<f64>,
    pub bias: Param<f64>,
}

impl Classifier {
    pub fn new(feature_dim: usize, class_count: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (feature_dim as f64).sqrt();
        Self {
            feature_dim,
            class_count,
            weight: Param::new(
                (0..feature_dim * class_count)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            ),
            bias: Param::new(vec![0.0; class_count]),
        }
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let k = self.feature_dim;
        (0..self.class_count)
            .map(|c| {
                let row = &self.weight.value[c * k..(c + 1) * k];
                self.bias.value[c] + row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients for one instance and returns ∂L/∂input.
    pub fn backward(&mut self, input: &[f64], dlogits: &[f64]) -> Vec<f64> {
        let k = self.feature_dim;
        let mut dinput = vec![0.0; k];
        for (c, &dz) in dlogits.iter().enumerate() {
            if dz == 0.0 {
                continue;
            }
            self.bias.grad[c] += dz;
            let row = &self.weight.value[c * k..(c + 1) * k];
            let grow = &mut self.weight.grad[c * k..(c + 1) * k];
            for j in 0..k {
                grow[j] += dz * input[j];
                dinput[j] += dz * row[j];
            }
        }
        dinput
    }

    /// ∂L/∂input only, without touching parameter gradients.
    pub fn input_grad(&self, dlogits: &[f64]) -> Vec<f64> {
        let k = self.feature_dim;
        let mut dinput = vec![0.0; k];
        for (c, &dz) in dlogits.iter().enumerate() {
            let row = &self.weight.value[c * k..(c + 1) * k];
            for j in 0..k {
                dinput[j] += dz * row[j];
            }
        }
        dinput
    }

    pub fn params_mut(&mut self) -> [&mut Param<f64>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Learnable K×C channel-class correlation matrix with entries in [0, 1].
/// Stored row-major: entry (channel k, class c) at `k * C + c`, so class
/// `c`'s mask is column `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub channels: usize,
    pub classes: usize,
    pub values: Param<f64>,
}

impl CorrelationMatrix {
    pub fn new(channels: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * classes {
            return Err(Error::Shape(format!(
                "G of {channels}x{classes} needs {} entries, got {}",
                channels * classes,
                values.len()
            )));
        }
        Ok(Self {
            channels,
            classes,
            values: Param::new(values),
        })
    }

    /// Uniform on [0, 1).
    pub fn random(channels: usize, classes: usize, rng: &mut Rng) -> Self {
        let values = (0..channels * classes)
            .map(|_| rng.random::<f64>())
            .collect();
        Self {
            channels,
            classes,
            values: Param::new(values),
        }
    }

    pub fn get(&self, channel: usize, class: usize) -> f64 {
        self.values.value[channel * self.classes + class]
    }

    pub fn set(&mut self, channel: usize, class: usize, v: f64) {
        self.values.value[channel * self.classes + class] = v;
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.channels).map(|k| self.get(k, class)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values.value
    }

    /// Clamps every entry into [0, 1].
    pub fn project(&mut self) {
        project_g(&mut self.values.value);
    }
}

/// Elementwise clamp into [0, 1]. Idempotent.
pub fn project_g(values: &mut [f64]) {
    for v in values {
        *v = v.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Original,
    Unlearned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Original => "original",
            Stage::Unlearned => "unlearned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::conv4(64),
        }
    }
}

/// Features and logits for a batch, both row-major `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub n: usize,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl Forward {
    pub fn features_of(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn logits_of(&self, i: usize) -> &[f64] {
        &self.logits[i * self.class_count..(i + 1) * self.class_count]
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax(self.logits_of(i))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub backbone: Backbone,
    pub classifier: Classifier,
    pub g: CorrelationMatrix,
    pub stage: Stage,
    pub config_hash: String,
}

impl ModelBundle {
    pub fn new(
        config: &ModelConfig,
        input: InputShape,
        class_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = seeded(seed);
        let backbone = Backbone::new(&config.backbone, input, &mut rng)?;
        let k = backbone.feature_dim;
        let classifier = Classifier::new(k, class_count, &mut rng);
        let g = CorrelationMatrix::random(k, class_count, &mut rng);
        Ok(Self {
            backbone,
            classifier,
            g,
            stage: Stage::Original,
            config_hash: String::new(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.classifier.class_count
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: &Batch) -> Result<Forward> {
        let feats = self.backbone.features(x)?;
        Ok(self.head(&feats))
    }

    /// Runs the classifier on backbone output.
    pub fn head(&self, feats: &Batch) -> Forward {
        let k = self.feature_dim();
        let c = self.class_count();
        let features: Vec<f64> = feats.data.iter().map(|&v| v as f64).collect();
        let mut logits = Vec::with_capacity(feats.n * c);
        for f in features.chunks(k) {
            logits.extend(self.classifier.logits(f));
        }
        Forward {
            n: feats.n,
            features,
            logits,
            feature_dim: k,
            class_count: c,
        }
    }

    /// Logits of `features ⊙ mask`.
    pub fn masked_forward(&self, features: &[f64], mask: &[f64]) -> Result<Vec<f64>> {
        let k = self.feature_dim();
        if features.len() != k || mask.len() != k {
            return Err(Error::Shape(format!(
                "masked_forward needs {k} features and mask entries, got {} and {}",
                features.len(),
                mask.len()
            )));
        }
        let masked: Vec<f64> = features.iter().zip(mask).map(|(f, m)| f * m).collect();
        Ok(self.classifier.logits(&masked))
    }

    /// Deep copy tagged as the unlearned model, with fresh optimizer state.
    pub fn unlearned_copy(&self) -> ModelBundle {
        let mut copy = self.clone();
        copy.stage = Stage::Unlearned;
        for p in copy.backbone.params_mut() {
            p.zero_grad();
            p.reset_momentum();
        }
        for p in copy.classifier.params_mut() {
            p.zero_grad();
            p.reset_momentum();
        }
        copy
    }

    pub fn zero_grad(&mut self) {
        for p in self.backbone.params_mut() {
            p.zero_grad();
        }
        for p in self.classifier.params_mut() {
            p.zero_grad();
        }
        self.g.values.zero_grad();
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.name(),
                found: self.stage.name(),
            });
        }
        Ok(())
    }

    /// Parameter values only, for bit-identity checks.
    pub fn parameter_snapshot(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for p in self.backbone.params() {
            out.extend(p.value.iter().map(|v| v.to_bits() as u64));
        }
        out.extend(self.classifier.weight.value.iter().map(|v| v.to_bits()));
        out.extend(self.classifier.bias.value.iter().map(|v| v.to_bits()));
        out.extend(self.g.values.value.iter().map(|v| v.to_bits()));
        out
    }

    pub fn checkpoint_path(dir: &Path) -> PathBuf {
        dir.join("bundle.json")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::checkpoint_path(dir);
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            feature_dim: self.feature_dim(),
            class_count: self.class_count(),
            bundle: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a checkpoint, refusing one whose K or C differs from `expected`.
    pub fn load(dir: &Path, expected: Option<(usize, usize)>) -> Result<Self> {
        let path = if dir.is_dir() {
            Self::checkpoint_path(dir)
        } else {
            dir.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let mut bundle = file.bundle;
        if bundle.feature_dim() != file.feature_dim
            || bundle.class_count() != file.class_count
            || bundle.g.channels != file.feature_dim
            || bundle.g.classes != file.class_count
        {
            return Err(Error::CheckpointMismatch(
                "header disagrees with stored tensors".into(),
            ));
        }
        if let Some((k, c)) = expected {
            if k != file.feature_dim || c != file.class_count {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint has K={} C={}, expected K={k} C={c}",
                    file.feature_dim, file.class_count
                )));
            }
        }
        bundle.zero_grad();
        Ok(bundle)
    }
}

const CHECKPOINT_FORMAT: &str = "dull-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    feature_dim: usize,
    class_count: usize,
    bundle: ModelBundle,
}
