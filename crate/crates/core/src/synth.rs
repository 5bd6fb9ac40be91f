//! Procedural datasets: CIFAR-format images written to disk, and Gaussian
//! blobs held in memory.
//!
//! Each image class has a prototype made of an oriented color grating and a
//! colored spot. Instances vary phase, contrast and spot position, are blended
//! with a random other class's pattern, and get pixel noise.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cifar::{CifarVariant, IMAGE_BYTES, IMAGE_SIDE};
use crate::data::{InputShape, InputStore};
use crate::error::{Error, Result};
use crate::forge::{LabeledDataset, LabeledInstance};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthImageConfig {
    /// 10 or 100, selecting the CIFAR-10 or CIFAR-100 layout.
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Upper bound of the blend weight of a random other class.
    pub distractor: f32,
    /// Pixel noise standard deviation on the [0, 1] scale.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthImageConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            distractor: 1.0,
            noise: 0.3,
            seed: 0,
        }
    }
}

struct Prototype {
    angle: f32,
    freq: f32,
    color: [f32; 3],
    spot: (f32, f32),
    spot_color: [f32; 3],
}

fn prototype(seed: u64, class: usize, classes: usize) -> Prototype {
    let mut rng = stream(seed, 100, class as u64);
    let mut color = || {
        [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]
    };
    let color_a = color();
    let color_b = color();
    Prototype {
        angle: PI * class as f32 / classes as f32 + rng.random_range(-0.1..0.1),
        freq: 1.5 + (class % 4) as f32 * 0.75,
        color: color_a,
        spot: (rng.random_range(8.0..24.0), rng.random_range(8.0..24.0)),
        spot_color: color_b,
    }
}

/// Pattern value in roughly [−1, 1] at (channel, y, x).
fn pattern(p: &Prototype, phase: f32, shift: (f32, f32), ch: usize, y: f32, x: f32) -> f32 {
    let s = IMAGE_SIDE as f32;
    let t = (x * p.angle.cos() + y * p.angle.sin()) / s;
    let grating = (2.0 * PI * p.freq * t + phase).sin() * p.color[ch];
    let (dy, dx) = (y - p.spot.0 - shift.0, x - p.spot.1 - shift.1);
    let spot = (-(dy * dy + dx * dx) / 18.0).exp() * p.spot_color[ch];
    0.6 * grating + 0.8 * spot
}

fn render(protos: &[Prototype], class: usize, config: &SynthImageConfig, rng: &mut Rng) -> Vec<u8> {
    let other = (class + rng.random_range(1..protos.len().max(2))) % protos.len();
    let weight = if protos.len() > 1 {
        rng.random_range(0.0..=config.distractor.max(0.0))
    } else {
        0.0
    };
    let amp = rng.random_range(0.6..1.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let other_phase = rng.random_range(0.0..2.0 * PI);
    let shift = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let noise = Normal::new(0.0f32, config.noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(IMAGE_BYTES);
    for ch in 0..3 {
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let (fy, fx) = (y as f32, x as f32);
                let own = pattern(&protos[class], phase, shift, ch, fy, fx);
                let mix = pattern(&protos[other], other_phase, (0.0, 0.0), ch, fy, fx);
                let v = 0.5 + 0.3 * (amp * own + weight * mix) / (1.0 + weight) + noise.sample(rng);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn write_file(
    path: &Path,
    labels: &[usize],
    variant: CifarVariant,
    images: &[Vec<u8>],
) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * variant.record_bytes());
    for (&l, img) in labels.iter().zip(images) {
        if variant == CifarVariant::Cifar100 {
            bytes.push((l / 5) as u8);
        }
        bytes.push(l as u8);
        bytes.extend_from_slice(img);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset in CIFAR binary layout under `dir`.
pub fn write_synthetic_cifar(dir: &Path, config: &SynthImageConfig) -> Result<CifarVariant> {
    let variant = match config.classes {
        10 => CifarVariant::Cifar10,
        100 => CifarVariant::Cifar100,
        n => {
            return Err(Error::invalid(format!(
                "synthetic images need 10 or 100 classes, got {n}"
            )))
        }
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let protos: Vec<Prototype> = (0..config.classes)
        .map(|c| prototype(config.seed, c, config.classes))
        .collect();
    let mut rng = stream(config.seed, 101, 0);

    let mut split = |per_class: usize| -> (Vec<usize>, Vec<Vec<u8>>) {
        let labels: Vec<usize> = (0..per_class).flat_map(|_| 0..config.classes).collect();
        let images = labels
            .iter()
            .map(|&l| render(&protos, l, config, &mut rng))
            .collect();
        (labels, images)
    };

    let (train_labels, train_images) = split(config.train_per_class);
    let files = variant.train_files();
    let per_file = train_labels.len().div_ceil(files.len());
    for (f, name) in files.iter().enumerate() {
        let lo = (f * per_file).min(train_labels.len());
        let hi = ((f + 1) * per_file).min(train_labels.len());
        write_file(
            &dir.join(name),
            &train_labels[lo..hi],
            variant,
            &train_images[lo..hi],
        )?;
    }
    let (test_labels, test_images) = split(config.test_per_class);
    write_file(
        &dir.join(variant.test_files()[0]),
        &test_labels,
        variant,
        &test_images,
    )?;
    Ok(variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Expected norm of each class mean.
    pub separation: f32,
    pub noise: f32,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            train_per_class: 300,
            test_per_class: 100,
            separation: 4.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// In-memory blobs. Train instances have ids `0..n_train`, test instances follow.
#[derive(Debug, Clone)]
pub struct Blobs {
    pub store: InputStore,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn gaussian_blobs(config: &BlobConfig) -> Result<Blobs> {
    if config.classes == 0 || config.dim == 0 {
        return Err(Error::invalid(
            "blobs need at least one class and dimension",
        ));
    }
    let mut rng = stream(config.seed, 102, 0);
    let scale = config.separation / (config.dim as f32).sqrt();
    let means: Vec<Vec<f32>> = (0..config.classes)
        .map(|_| {
            (0..config.dim)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect()
        })
        .collect();
    let mut data = Vec::new();
    let mut sample = |per_class: usize, first_id: usize| -> Vec<LabeledInstance> {
        let mut out = Vec::new();
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                for &m in mean {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    data.push(m + config.noise * z);
                }
                out.push(LabeledInstance {
                    id: first_id + out.len(),
                    label: c,
                });
            }
        }
        out
    };
    let train = sample(config.train_per_class, 0);
    let test = sample(config.test_per_class, train.len());
    Ok(Blobs {
        store: InputStore::new(InputShape::vector(config.dim), data)?,
        train: LabeledDataset::new(config.classes, train)?,
        test: LabeledDataset::new(config.classes, test)?,
    })
}
