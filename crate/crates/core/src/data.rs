//! In-memory inputs and the label views handed to trainers and evaluators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::{LabeledDataset, NoisyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A flat feature vector, stored as `dim × 1 × 1`.
    pub fn vector(dim: usize) -> Self {
        Self::image(dim, 1, 1)
    }

    pub fn is_vector(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense block of `n` inputs laid out as `[n, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub shape: InputShape,
    pub n: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn new(shape: InputShape, n: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * shape.len() {
            return Err(Error::Shape(format!(
                "batch of {n} inputs of {} values needs {} values, got {}",
                shape.len(),
                n * shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, n, data })
    }

    pub fn zeros(shape: InputShape, n: usize) -> Self {
        Self {
            shape,
            n,
            data: vec![0.0; n * shape.len()],
        }
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let len = self.shape.len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.shape.len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// The first `n` inputs.
    pub fn head(&self, n: usize) -> Batch {
        let n = n.min(self.n);
        Batch {
            shape: self.shape,
            n,
            data: self.data[..n * self.shape.len()].to_vec(),
        }
    }

    pub fn push(&mut self, item: &[f32]) {
        debug_assert_eq!(item.len(), self.shape.len());
        self.data.extend_from_slice(item);
        self.n += 1;
    }
}

/// Inputs addressed by instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStore {
    shape: InputShape,
    data: Vec<f32>,
}

impl InputStore {
    pub fn new(shape: InputShape, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || !data.len().is_multiple_of(shape.len()) {
            return Err(Error::Shape(format!(
                "{} values do not divide into inputs of {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: usize) -> &[f32] {
        let len = self.shape.len();
        &self.data[id * len..(id + 1) * len]
    }

    pub fn gather(&self, ids: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(ids.len() * self.shape.len());
        for &id in ids {
            data.extend_from_slice(self.get(id));
        }
        Batch {
            shape: self.shape,
            n: ids.len(),
            data,
        }
    }
}

/// Training inputs with observed labels only. True labels never enter here.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub store: &'a InputStore,
    pub ids: &'a [usize],
    pub labels: &'a [usize],
    pub class_count: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn new(
        store: &'a InputStore,
        ids: &'a [usize],
        labels: &'a [usize],
        class_count: usize,
    ) -> Result<Self> {
        if ids.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} ids but {} labels",
                ids.len(),
                labels.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= store.len()) {
            return Err(Error::invalid(format!(
                "id {id} outside input store of {}",
                store.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {l} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            store,
            ids,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Observed per-class counts.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Owned id/label columns extracted from a dataset, to borrow a [`TrainingSet`] from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelColumns {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabelColumns {
    pub fn observed(noisy: &NoisyDataset) -> Self {
        Self {
            ids: noisy.ids(),
            labels: noisy.observed_labels(),
            class_count: noisy.class_count,
        }
    }

    pub fn truth(noisy: &NoisyDataset) -> Self {
        Self {
            ids: noisy.ids(),
            labels: noisy.true_labels(),
            class_count: noisy.class_count,
        }
    }

    pub fn of(dataset: &LabeledDataset) -> Self {
        Self {
            ids: dataset.instances().iter().map(|i| i.id).collect(),
            labels: dataset.labels(),
            class_count: dataset.class_count(),
        }
    }

    pub fn view<'a>(&'a self, store: &'a InputStore) -> Result<TrainingSet<'a>> {
        TrainingSet::new(store, &self.ids, &self.labels, self.class_count)
    }
}
