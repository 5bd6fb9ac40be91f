//! Dataset manifest: the forged label assignment of every instance, plus the
//! source files and checksums it was built from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cifar::{verify_checksums, CifarSource, CifarVariant, SourceFile, Split};
use crate::error::{Error, Result};
use crate::forge::{LabeledDataset, LabeledInstance, NoisyDataset, NoisyInstance};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    pub variant: CifarVariant,
    pub root: PathBuf,
    pub files: Vec<SourceFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub true_label: usize,
    pub observed_label: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub class_count: usize,
    pub imbalance_factor: f64,
    pub noise_ratio: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ManifestSource>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(
        train: &NoisyDataset,
        test: &LabeledDataset,
        imbalance_factor: f64,
        source: Option<&CifarSource>,
    ) -> Self {
        let locate = |id: usize| match source.and_then(|s| s.record(id)) {
            Some((file, offset)) => (Some(file.to_string()), Some(offset)),
            None => (None, None),
        };
        let mut records = Vec::with_capacity(train.len() + test.len());
        for i in &train.instances {
            let (file, offset) = locate(i.id);
            records.push(ManifestRecord {
                id: i.id,
                true_label: i.true_label,
                observed_label: i.observed_label,
                split: Split::Train,
                file,
                offset,
            });
        }
        for i in test.instances() {
            let (file, offset) = locate(i.id);
            records.push(ManifestRecord {
                id: i.id,
                true_label: i.label,
                observed_label: i.label,
                split: Split::Test,
                file,
                offset,
            });
        }
        Self {
            version: MANIFEST_VERSION,
            class_count: train.class_count,
            imbalance_factor,
            noise_ratio: train.noise_ratio,
            seed: train.seed,
            source: source.map(|s| ManifestSource {
                variant: s.variant,
                root: s.root.clone(),
                files: s.files.clone(),
            }),
            records,
        }
    }

    pub fn train(&self) -> NoisyDataset {
        NoisyDataset {
            class_count: self.class_count,
            instances: self
                .records
                .iter()
                .filter(|r| r.split == Split::Train)
                .map(|r| NoisyInstance {
                    id: r.id,
                    true_label: r.true_label,
                    observed_label: r.observed_label,
                })
                .collect(),
            noise_ratio: self.noise_ratio,
            seed: self.seed,
        }
    }

    pub fn test(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.class_count,
            self.records
                .iter()
                .filter(|r| r.split == Split::Test)
                .map(|r| LabeledInstance {
                    id: r.id,
                    label: r.true_label,
                })
                .collect(),
        )
    }

    /// Checks the recorded source checksums against the files on disk.
    pub fn verify_source(&self) -> Result<()> {
        match &self.source {
            Some(s) => verify_checksums(&s.root, &s.files),
            None => Ok(()),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::invalid(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.true_label >= self.class_count || r.observed_label >= self.class_count)
        {
            return Err(Error::invalid(format!(
                "record {} has a label outside [0, {})",
                r.id, self.class_count
            )));
        }
        Ok(())
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}
