//! Long-tailed dataset construction and tail-to-head (T2H) label noise.
//!
//! Datasets here are label-only: every instance carries an `id` that indexes
//! into whatever holds the pixels (an [`InputStore`](crate::data::InputStore)
//! or a CIFAR binary). This keeps full-scale label simulations cheap.
//!
//! Class indices follow size rank once a dataset is long-tailed: class 0 is the
//! largest class and noise only ever moves an instance to a smaller index.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub id: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDataset {
    class_count: usize,
    instances: Vec<LabeledInstance>,
    long_tailed: bool,
}

impl LabeledDataset {
    pub fn new(class_count: usize, instances: Vec<LabeledInstance>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if let Some(bad) = instances.iter().find(|i| i.label >= class_count) {
            return Err(Error::invalid(format!(
                "instance {} has label {} outside [0, {class_count})",
                bad.id, bad.label
            )));
        }
        Ok(Self {
            class_count,
            instances,
            long_tailed: false,
        })
    }

    /// Convenience constructor: instance `i` gets id `i`.
    pub fn from_labels(class_count: usize, labels: &[usize]) -> Result<Self> {
        let instances = labels
            .iter()
            .enumerate()
            .map(|(id, &label)| LabeledInstance { id, label })
            .collect();
        Self::new(class_count, instances)
    }

    /// Balanced label-only dataset with `per_class` instances for each class.
    pub fn balanced(class_count: usize, per_class: usize) -> Result<Self> {
        let labels: Vec<usize> = (0..class_count)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        Self::from_labels(class_count, &labels)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn instances(&self) -> &[LabeledInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_long_tailed(&self) -> bool {
        self.long_tailed
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        count_labels(self.class_count, self.instances.iter().map(|i| i.label))
    }

    pub fn imbalance_factor(&self) -> Result<f64> {
        imbalance_factor(&self.class_sizes())
    }

    /// Marks the dataset as long-tailed after checking that class sizes are
    /// non-increasing in class index.
    pub fn into_long_tailed(mut self) -> Result<Self> {
        check_descending(&self.class_sizes())?;
        self.long_tailed = true;
        Ok(self)
    }

    /// Keeps at most `per_class` instances of every class, chosen uniformly.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut by_class = self.by_class();
        let mut keep = vec![false; self.instances.len()];
        for members in &mut by_class {
            members.shuffle(&mut rng);
            for &pos in members.iter().take(per_class) {
                keep[pos] = true;
            }
        }
        let instances = self
            .instances
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(i, _)| *i)
            .collect();
        Self {
            class_count: self.class_count,
            instances,
            long_tailed: false,
        }
    }

    /// Positions (not ids) of the instances of each class, in dataset order.
    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (pos, inst) in self.instances.iter().enumerate() {
            by_class[inst.label].push(pos);
        }
        by_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisyInstance {
    pub id: usize,
    pub true_label: usize,
    pub observed_label: usize,
}

impl NoisyInstance {
    pub fn is_flipped(&self) -> bool {
        self.true_label != self.observed_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyDataset {
    pub class_count: usize,
    pub instances: Vec<NoisyInstance>,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl NoisyDataset {
    /// Wraps a clean dataset with observed labels equal to true labels.
    pub fn clean(dataset: &LabeledDataset) -> Self {
        Self {
            class_count: dataset.class_count,
            instances: dataset
                .instances
                .iter()
                .map(|i| NoisyInstance {
                    id: i.id,
                    true_label: i.label,
                    observed_label: i.label,
                })
                .collect(),
            noise_ratio: 0.0,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.id).collect()
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.observed_label).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.true_label).collect()
    }

    pub fn flipped(&self) -> Vec<bool> {
        self.instances
            .iter()
            .map(NoisyInstance::is_flipped)
            .collect()
    }

    pub fn flip_count(&self) -> usize {
        self.instances.iter().filter(|i| i.is_flipped()).count()
    }

    /// Observed per-class counts in class-index order.
    pub fn observed_class_counts(&self) -> Vec<usize> {
        count_labels(
            self.class_count,
            self.instances.iter().map(|i| i.observed_label),
        )
    }

    pub fn true_class_counts(&self) -> Vec<usize> {
        count_labels(
            self.class_count,
            self.instances.iter().map(|i| i.true_label),
        )
    }

    pub fn observed_imbalance_factor(&self) -> Result<f64> {
        imbalance_factor(&self.observed_class_counts())
    }
}

/// Observed class sizes sorted descending (N₁ ≥ … ≥ N_C). Noise may reorder
/// classes, so position in this list is not a class index.
pub fn observed_class_sizes(noisy: &NoisyDataset) -> Result<Vec<usize>> {
    let mut sizes = noisy.observed_class_counts();
    if let Some(c) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::MissingClass(c));
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sizes)
}

/// Size rank of every class (0 = largest), ties broken by lower class index.
pub fn class_rank(class_sizes: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| class_sizes[b].cmp(&class_sizes[a]).then(a.cmp(&b)));
    let mut rank = vec![0; class_sizes.len()];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    rank
}

/// Largest class size over smallest class size.
pub fn imbalance_factor(class_sizes: &[usize]) -> Result<f64> {
    if class_sizes.is_empty() {
        return Err(Error::invalid("no classes"));
    }
    if let Some(c) = class_sizes.iter().position(|&s| s == 0) {
        return Err(Error::MissingClass(c));
    }
    let max = *class_sizes.iter().max().unwrap_or(&0);
    let min = *class_sizes.iter().min().unwrap_or(&0);
    Ok(max as f64 / min as f64)
}

/// Exponential long-tail profile n_k = round(n₁ · IF^(−k/(C−1))), rounding half up.
pub fn longtail_profile(
    head_size: usize,
    class_count: usize,
    imbalance_factor: f64,
) -> Result<Vec<usize>> {
    if !(imbalance_factor >= 1.0) || !imbalance_factor.is_finite() {
        return Err(Error::invalid(format!(
            "imbalance factor must be >= 1, got {imbalance_factor}"
        )));
    }
    if class_count == 0 {
        return Err(Error::invalid("class_count must be positive"));
    }
    if class_count == 1 {
        return Ok(vec![head_size]);
    }
    let span = (class_count - 1) as f64;
    let sizes: Vec<usize> = (0..class_count)
        .map(|k| {
            let exact = head_size as f64 * imbalance_factor.powf(-(k as f64) / span);
            (exact + 0.5).floor() as usize
        })
        .collect();
    if let Some(class) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::EmptyClass {
            factor: imbalance_factor,
            class,
            limit: 2.0 * head_size as f64,
        });
    }
    Ok(sizes)
}

/// Subsamples a balanced source into a long-tailed dataset.
///
/// Class `k` keeps `n_k` instances drawn uniformly without replacement, so the
/// original class order already is the descending size order.
pub fn build_longtail(
    source: &LabeledDataset,
    imbalance_factor: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let sizes = source.class_sizes();
    let head = sizes[0];
    if let Some(c) = sizes.iter().position(|&s| s != head) {
        return Err(Error::invalid(format!(
            "source must be balanced: class {c} has {} instances, class 0 has {head}",
            sizes[c]
        )));
    }
    let profile = longtail_profile(head, source.class_count, imbalance_factor)?;

    let mut rng = seeded(seed);
    let mut by_class = source.by_class();
    let mut keep = vec![false; source.instances.len()];
    for (members, &n) in by_class.iter_mut().zip(&profile) {
        members.shuffle(&mut rng);
        for &pos in members.iter().take(n) {
            keep[pos] = true;
        }
    }
    let instances = source
        .instances
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(i, _)| *i)
        .collect();
    Ok(LabeledDataset {
        class_count: source.class_count,
        instances,
        long_tailed: true,
    })
}

fn check_descending(sizes: &[usize]) -> Result<()> {
    for (class, pair) in sizes.windows(2).enumerate() {
        if pair[1] > pair[0] {
            return Err(Error::NotDescending {
                class: class + 1,
                size: pair[1],
                previous: pair[0],
            });
        }
    }
    Ok(())
}

/// Injects T2H noise.
///
/// Instances of the largest class (class 0) are never touched. The rest are
/// shuffled and the first `round(|S| · r)` get a label drawn uniformly from
/// `[0, true_label − 1]`.
pub fn inject_t2h_noise(
    dataset: &LabeledDataset,
    noise_ratio: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    if !(0.0..1.0).contains(&noise_ratio) {
        return Err(Error::invalid(format!(
            "noise ratio must lie in [0, 1), got {noise_ratio}"
        )));
    }
    check_descending(&dataset.class_sizes())?;

    let mut instances: Vec<NoisyInstance> = dataset
        .instances
        .iter()
        .map(|i| NoisyInstance {
            id: i.id,
            true_label: i.label,
            observed_label: i.label,
        })
        .collect();

    let mut transferable: Vec<usize> = instances
        .iter()
        .enumerate()
        .filter(|(_, i)| i.true_label != 0)
        .map(|(pos, _)| pos)
        .collect();
    let mut rng = seeded(seed);
    transferable.shuffle(&mut rng);
    let flips = (transferable.len() as f64 * noise_ratio).round() as usize;
    for &pos in &transferable[..flips] {
        let inst = &mut instances[pos];
        inst.observed_label = rng.random_range(0..inst.true_label);
    }

    Ok(NoisyDataset {
        class_count: dataset.class_count,
        instances,
        noise_ratio,
        seed,
    })
}

/// Row-stochastic matrix of P(observed = h | true = t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub class_count: usize,
    /// Row-major, `rows[t * C + h]`.
    pub rows: Vec<f64>,
    /// Raw counts backing `rows`.
    pub counts: Vec<usize>,
    /// True classes with no instances; their rows are set to identity.
    pub empty_rows: Vec<usize>,
}

impl TransitionMatrix {
    pub fn get(&self, true_class: usize, observed: usize) -> f64 {
        self.rows[true_class * self.class_count + observed]
    }

    pub fn row(&self, true_class: usize) -> &[f64] {
        let c = self.class_count;
        &self.rows[true_class * c..(true_class + 1) * c]
    }

    pub fn count(&self, true_class: usize, observed: usize) -> usize {
        self.counts[true_class * self.class_count + observed]
    }
}

pub fn empirical_transition_matrix(noisy: &NoisyDataset) -> TransitionMatrix {
    let c = noisy.class_count;
    let mut counts = vec![0usize; c * c];
    for inst in &noisy.instances {
        counts[inst.true_label * c + inst.observed_label] += 1;
    }
    let mut rows = vec![0.0; c * c];
    let mut empty_rows = Vec::new();
    for t in 0..c {
        let total: usize = counts[t * c..(t + 1) * c].iter().sum();
        if total == 0 {
            empty_rows.push(t);
            rows[t * c + t] = 1.0;
            continue;
        }
        for h in 0..c {
            rows[t * c + h] = counts[t * c + h] as f64 / total as f64;
        }
    }
    TransitionMatrix {
        class_count: c,
        rows,
        counts,
        empty_rows,
    }
}

fn count_labels(class_count: usize, labels: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut counts = vec![0; class_count];
    for l in labels {
        counts[l] += 1;
    }
    counts
}
