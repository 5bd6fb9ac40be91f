//! CIFAR binary-format ingest.
//!
//! CIFAR-10 records are one label byte followed by 3072 pixel bytes
//! (channel-major 32×32 RGB); CIFAR-100 records carry a coarse and a fine
//! label byte, and the fine label is used.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{InputShape, InputStore};
use crate::error::{Error, Result};
use crate::forge::{LabeledDataset, LabeledInstance};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;

const CHANNEL_MEAN: f32 = 0.5;
const CHANNEL_STD: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => &["train.bin"],
        }
    }

    pub fn test_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &["test_batch.bin"],
            CifarVariant::Cifar100 => &["test.bin"],
        }
    }

    /// Directory name used by the official archives.
    pub fn archive_dir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }
}

impl fmt::Display for CifarVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        })
    }
}

impl FromStr for CifarVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Location of one record inside the source files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordRef {
    pub file: usize,
    pub offset: u64,
}

/// An ingested CIFAR directory. Record ids number train records first,
/// then test records, in file order.
#[derive(Debug, Clone)]
pub struct CifarSource {
    pub variant: CifarVariant,
    pub root: PathBuf,
    pub files: Vec<SourceFile>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    refs: Vec<RecordRef>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn resolve_root(root: &Path, variant: CifarVariant) -> PathBuf {
    let nested = root.join(variant.archive_dir());
    if !root.join(variant.train_files()[0]).exists() && nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn parse_records(
    path: &Path,
    bytes: &[u8],
    variant: CifarVariant,
    file: usize,
    labels: &mut Vec<usize>,
    refs: &mut Vec<RecordRef>,
) -> Result<()> {
    let rec = variant.record_bytes();
    let whole = bytes.len() / rec * rec;
    if whole != bytes.len() {
        return Err(Error::MalformedRecord {
            path: path.to_path_buf(),
            offset: whole as u64,
            reason: format!("truncated record: {} of {rec} bytes", bytes.len() - whole),
        });
    }
    for (i, chunk) in bytes.chunks_exact(rec).enumerate() {
        let label = chunk[variant.label_bytes() - 1] as usize;
        let offset = (i * rec) as u64;
        if label >= variant.class_count() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                offset,
                reason: format!("label {label} outside [0, {})", variant.class_count()),
            });
        }
        labels.push(label);
        refs.push(RecordRef { file, offset });
    }
    Ok(())
}

/// Reads labels and checksums from a CIFAR binary directory.
pub fn ingest_cifar(root: &Path, variant: CifarVariant) -> Result<CifarSource> {
    let root = resolve_root(root, variant);
    let mut files = Vec::new();
    let mut refs = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_labels = Vec::new();
    for (split, names) in [
        (Split::Train, variant.train_files()),
        (Split::Test, variant.test_files()),
    ] {
        for name in names {
            let path = root.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let labels = match split {
                Split::Train => &mut train_labels,
                Split::Test => &mut test_labels,
            };
            parse_records(&path, &bytes, variant, files.len(), labels, &mut refs)?;
            files.push(SourceFile {
                name: name.to_string(),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let c = variant.class_count();
    let n_train = train_labels.len();
    let train = LabeledDataset::from_labels(c, &train_labels)?;
    let test = LabeledDataset::new(
        c,
        test_labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledInstance {
                id: n_train + i,
                label,
            })
            .collect(),
    )?;
    Ok(CifarSource {
        variant,
        root,
        files,
        train,
        test,
        refs,
    })
}

impl CifarSource {
    pub fn record(&self, id: usize) -> Option<(&str, u64)> {
        self.refs
            .get(id)
            .map(|r| (self.files[r.file].name.as_str(), r.offset))
    }

    pub fn split_of(&self, id: usize) -> Split {
        if id < self.train.len() {
            Split::Train
        } else {
            Split::Test
        }
    }

    /// Recomputes file checksums and compares them with the ingested ones.
    pub fn verify(&self) -> Result<()> {
        verify_checksums(&self.root, &self.files)
    }

    /// Loads the pixels of `ids` into a store whose i-th item is `ids[i]`,
    /// optionally average-pooled by `downsample`.
    pub fn load_images(&self, ids: &[usize], downsample: usize) -> Result<InputStore> {
        let mut by_file: Vec<Option<Vec<u8>>> = vec![None; self.files.len()];
        let factor = downsample.max(1);
        if !IMAGE_SIDE.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "downsample {factor} does not divide {IMAGE_SIDE}"
            )));
        }
        let side = IMAGE_SIDE / factor;
        let mut data = Vec::with_capacity(ids.len() * 3 * side * side);
        for &id in ids {
            let r = *self
                .refs
                .get(id)
                .ok_or_else(|| Error::invalid(format!("record id {id} not in source")))?;
            if by_file[r.file].is_none() {
                let path = self.root.join(&self.files[r.file].name);
                by_file[r.file] = Some(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
            let bytes = by_file[r.file].as_ref().expect("loaded above");
            let start = r.offset as usize + self.variant.label_bytes();
            decode_image(&bytes[start..start + IMAGE_BYTES], factor, &mut data);
        }
        InputStore::new(InputShape::image(3, side, side), data)
    }
}

/// Normalizes pixel bytes and average-pools `factor × factor` blocks.
pub fn decode_image(pixels: &[u8], factor: usize, out: &mut Vec<f32>) {
    let side = IMAGE_SIDE / factor;
    let area = (factor * factor) as f32;
    for c in 0..3 {
        let plane = &pixels[c * IMAGE_SIDE * IMAGE_SIDE..(c + 1) * IMAGE_SIDE * IMAGE_SIDE];
        for y in 0..side {
            for x in 0..side {
                let mut s = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += plane[(y * factor + dy) * IMAGE_SIDE + x * factor + dx] as f32;
                    }
                }
                out.push((s / area / 255.0 - CHANNEL_MEAN) / CHANNEL_STD);
            }
        }
    }
}

pub fn verify_checksums(root: &Path, files: &[SourceFile]) -> Result<()> {
    for f in files {
        let path = root.join(&f.name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = sha256_hex(&bytes);
        if found != f.sha256 {
            return Err(Error::Checksum {
                path,
                expected: f.sha256.clone(),
                found,
            });
        }
    }
    Ok(())
}
