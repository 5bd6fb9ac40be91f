//! End-to-end experiments: data forging, IFD training, unlearning, the
//! cross-entropy baseline, evaluation and result files.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentConfig, View};
use crate::cifar::{ingest_cifar, CifarSource, CifarVariant};
use crate::data::{InputStore, LabelColumns, TrainingSet};
use crate::error::{Error, Result};
use crate::forge::{
    build_longtail, class_rank, empirical_transition_matrix, inject_t2h_noise, LabeledDataset,
    LabeledInstance, NoisyDataset, NoisyInstance, TransitionMatrix,
};
use crate::ifd::{cross_entropy, to_f32_batch, train_ifd, IfdConfig, IfdEpoch};
use crate::ifpu::{unlearn_finetune, EpochExtras, EpochView, IfpuConfig, UnlearnEpoch};
use crate::manifest::{save_manifest, Manifest};
use crate::mixer::MixerConfig;
use crate::net::{ModelBundle, Stage};
use crate::optim::SgdConfig;
use crate::plots::emit_plots;
use crate::relabel::{write_dump, Relabeling};
use crate::rng::stream;
use crate::synth::{gaussian_blobs, write_synthetic_cifar, BlobConfig, SynthImageConfig};

pub const DATA_ROOT_ENV: &str = "DULL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    /// CIFAR binaries under `root`, or under `$DULL_DATA_ROOT` when unset.
    Cifar {
        variant: CifarVariant,
        #[serde(default)]
        root: Option<PathBuf>,
    },
    /// Procedural images written in CIFAR layout to `dir` (a temp directory
    /// keyed by the generator config when unset) and then ingested.
    SyntheticImages {
        generator: SynthImageConfig,
        #[serde(default)]
        dir: Option<PathBuf>,
    },
    Blobs(BlobConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub source: SourceSpec,
    pub imbalance_factor: f64,
    pub noise_ratio: f64,
    pub seed: u64,
    /// Cap on training instances per class before the long-tail cut; this is
    /// the head class size.
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    /// Average-pooling factor applied to images.
    #[serde(default = "one")]
    pub downsample: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub batch_size: usize,
    /// Evaluate test accuracy after every unlearning epoch.
    pub track_validation: bool,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            batch_size: 256,
            track_validation: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    /// Receives the record JSON, logs, manifest, relabel dump and plots.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Summary CSV that records are appended to.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: DataSpec,
    #[serde(default)]
    pub ifd: IfdConfig,
    #[serde(default)]
    pub ifpu: IfpuConfig,
    #[serde(default)]
    pub mixer: MixerConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON of everything except output paths.
    pub fn hash(&self) -> String {
        let mut copy = self.clone();
        copy.output = OutputSpec::default();
        let value = serde_json::to_value(&copy).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Inputs in a compact store plus train and test datasets whose ids index it.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub store: InputStore,
    pub train: NoisyDataset,
    pub test: LabeledDataset,
    /// Label assignment in source ids.
    pub manifest: Manifest,
    pub transition: TransitionMatrix,
}

impl PreparedData {
    pub fn observed_class_sizes(&self) -> Vec<usize> {
        self.train.observed_class_counts()
    }
}

fn synth_dir(generator: &SynthImageConfig, dir: &Option<PathBuf>) -> PathBuf {
    dir.clone().unwrap_or_else(|| {
        let key = serde_json::to_string(generator).expect("generator serializes");
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        std::env::temp_dir().join(format!("dull-synth-{}", &digest[..16]))
    })
}

fn cifar_root(root: &Option<PathBuf>) -> Result<PathBuf> {
    match root {
        Some(r) => Ok(r.clone()),
        None => std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                Error::invalid(format!("no CIFAR root given and {DATA_ROOT_ENV} is unset"))
            }),
    }
}

/// Ingests the image source named by `spec`, generating synthetic files first if needed.
pub fn open_source(spec: &SourceSpec) -> Result<Option<CifarSource>> {
    match spec {
        SourceSpec::Cifar { variant, root } => {
            Ok(Some(ingest_cifar(&cifar_root(root)?, *variant)?))
        }
        SourceSpec::SyntheticImages { generator, dir } => {
            let dir = synth_dir(generator, dir);
            let variant = if generator.classes == 100 {
                CifarVariant::Cifar100
            } else {
                CifarVariant::Cifar10
            };
            match ingest_cifar(&dir, variant) {
                Ok(src) => Ok(Some(src)),
                Err(_) => {
                    write_synthetic_cifar(&dir, generator)?;
                    Ok(Some(ingest_cifar(&dir, variant)?))
                }
            }
        }
        SourceSpec::Blobs(_) => Ok(None),
    }
}

/// Builds the long-tailed noisy training set and the test set.
pub fn forge_datasets(
    train: &LabeledDataset,
    test: &LabeledDataset,
    spec: &DataSpec,
) -> Result<(NoisyDataset, LabeledDataset)> {
    let capped = match spec.train_per_class {
        Some(n) => train.subsample_per_class(n, spec.seed),
        None => train.clone(),
    };
    let lt = build_longtail(&capped, spec.imbalance_factor, spec.seed)?;
    let noisy = inject_t2h_noise(&lt, spec.noise_ratio, spec.seed)?;
    let test = match spec.test_per_class {
        Some(n) => test.subsample_per_class(n, spec.seed),
        None => test.clone(),
    };
    Ok((noisy, test))
}

/// Remaps train and test ids onto positions `0..` of a compact store.
fn compact(
    noisy: &NoisyDataset,
    test: &LabeledDataset,
) -> (Vec<usize>, NoisyDataset, LabeledDataset) {
    let mut order: Vec<usize> = noisy.ids();
    order.extend(test.instances().iter().map(|i| i.id));
    let train = NoisyDataset {
        instances: noisy
            .instances
            .iter()
            .enumerate()
            .map(|(pos, i)| NoisyInstance { id: pos, ..*i })
            .collect(),
        ..noisy.clone()
    };
    let offset = noisy.len();
    let test = LabeledDataset::new(
        test.class_count(),
        test.instances()
            .iter()
            .enumerate()
            .map(|(pos, i)| LabeledInstance {
                id: offset + pos,
                label: i.label,
            })
            .collect(),
    )
    .expect("labels already validated");
    (order, train, test)
}

pub fn prepare_data(spec: &DataSpec) -> Result<PreparedData> {
    let source = open_source(&spec.source)?;
    match (&spec.source, source) {
        (_, Some(src)) => {
            let (noisy, test) = forge_datasets(&src.train, &src.test, spec)?;
            let manifest = Manifest::new(&noisy, &test, spec.imbalance_factor, Some(&src));
            let (order, train, test) = compact(&noisy, &test);
            let store = src.load_images(&order, spec.downsample)?;
            Ok(PreparedData {
                store,
                transition: empirical_transition_matrix(&train),
                train,
                test,
                manifest,
            })
        }
        (SourceSpec::Blobs(cfg), None) => {
            let blobs = gaussian_blobs(cfg)?;
            let (noisy, test) = forge_datasets(&blobs.train, &blobs.test, spec)?;
            let manifest = Manifest::new(&noisy, &test, spec.imbalance_factor, None);
            let (order, train, test) = compact(&noisy, &test);
            let shape = blobs.store.shape();
            let data = order
                .iter()
                .flat_map(|&id| blobs.store.get(id).iter().copied())
                .collect();
            Ok(PreparedData {
                store: InputStore::new(shape, data)?,
                transition: empirical_transition_matrix(&train),
                train,
                test,
                manifest,
            })
        }
        (_, None) => Err(Error::invalid("image source produced no data")),
    }
}

/// Rebuilds prepared data from a saved manifest with a CIFAR-format source.
pub fn data_from_manifest(manifest: &Manifest, downsample: usize) -> Result<PreparedData> {
    let source = manifest
        .source
        .as_ref()
        .ok_or_else(|| Error::invalid("manifest has no image source"))?;
    manifest.verify_source()?;
    let src = ingest_cifar(&source.root, source.variant)?;
    let noisy = manifest.train();
    let test = manifest.test()?;
    let (order, train, test) = compact(&noisy, &test);
    Ok(PreparedData {
        store: src.load_images(&order, downsample)?,
        transition: empirical_transition_matrix(&train),
        train,
        test,
        manifest: manifest.clone(),
    })
}

/// Head, middle and tail classes: terciles of the observed size rank, with
/// ⌊C/3⌋ head classes, ⌊C/3⌋ middle classes and the rest in the tail.
pub fn tercile_groups(class_sizes: &[usize]) -> [Vec<usize>; 3] {
    let c = class_sizes.len();
    let third = c / 3;
    let rank = class_rank(class_sizes);
    let mut groups = [Vec::new(), Vec::new(), Vec::new()];
    for class in 0..c {
        let g = if rank[class] < third {
            0
        } else if rank[class] < 2 * third {
            1
        } else {
            2
        };
        groups[g].push(class);
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    pub head: f64,
    pub middle: f64,
    pub tail: f64,
    /// `None` for classes without test instances.
    pub per_class: Vec<Option<f64>>,
    pub head_classes: Vec<usize>,
    pub middle_classes: Vec<usize>,
    pub tail_classes: Vec<usize>,
}

/// Test accuracy in percent, overall and per observed-size tercile.
pub fn evaluate(
    bundle: &ModelBundle,
    store: &InputStore,
    test: &LabeledDataset,
    observed_sizes: &[usize],
    batch_size: usize,
) -> Result<Metrics> {
    let c = bundle.class_count();
    if observed_sizes.len() != c {
        return Err(Error::Shape(format!(
            "{} class sizes for {c} classes",
            observed_sizes.len()
        )));
    }
    let mut correct = vec![0usize; c];
    let mut total = vec![0usize; c];
    let instances = test.instances();
    for chunk in instances.chunks(batch_size.max(1)) {
        let ids: Vec<usize> = chunk.iter().map(|i| i.id).collect();
        let out = bundle.forward(&store.gather(&ids))?;
        for (i, inst) in chunk.iter().enumerate() {
            total[inst.label] += 1;
            if out.argmax(i) == inst.label {
                correct[inst.label] += 1;
            }
        }
    }
    let acc = |classes: &[usize]| {
        let t: usize = classes.iter().map(|&k| total[k]).sum();
        let r: usize = classes.iter().map(|&k| correct[k]).sum();
        if t == 0 {
            0.0
        } else {
            100.0 * r as f64 / t as f64
        }
    };
    let [head, middle, tail] = tercile_groups(observed_sizes);
    let all: Vec<usize> = (0..c).collect();
    Ok(Metrics {
        overall: acc(&all),
        head: acc(&head),
        middle: acc(&middle),
        tail: acc(&tail),
        per_class: (0..c)
            .map(|k| (total[k] > 0).then(|| 100.0 * correct[k] as f64 / total[k] as f64))
            .collect(),
        head_classes: head,
        middle_classes: middle,
        tail_classes: tail,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dull,
    Ce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dull => "dull",
            Method::Ce => "ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelStats {
    /// Share of instances whose label set holds the true label.
    pub hit_rate: f64,
    pub hit_rate_flipped: f64,
    /// Same, for the single most confident fused prediction.
    pub top1_hit_rate: f64,
    pub top1_hit_rate_flipped: f64,
    pub flipped: usize,
    pub noisy_fraction: f64,
    /// Share of noisy-flagged instances that were actually flipped.
    pub noisy_precision: f64,
    /// Share of flipped instances flagged noisy.
    pub noisy_recall: f64,
    pub mean_label_count: f64,
}

impl RelabelStats {
    pub fn of(relabeling: &Relabeling, truth: &[usize], flipped: &[bool]) -> Self {
        let top1 = relabeling.top1();
        let n = relabeling.records.len().max(1) as f64;
        let nf = flipped.iter().filter(|&&f| f).count();
        let (mut hit, mut hit_f, mut top, mut top_f) = (0usize, 0usize, 0usize, 0usize);
        let (mut flagged, mut caught) = (0usize, 0usize);
        for (i, r) in relabeling.records.iter().enumerate() {
            if !r.clean {
                flagged += 1;
                caught += flipped[i] as usize;
            }
            let h = r.labels.contains(&truth[i]);
            let t = top1[i] == truth[i];
            hit += h as usize;
            top += t as usize;
            if flipped[i] {
                hit_f += h as usize;
                top_f += t as usize;
            }
        }
        let frac = |k: usize, of: usize| if of == 0 { 0.0 } else { k as f64 / of as f64 };
        Self {
            hit_rate: hit as f64 / n,
            hit_rate_flipped: frac(hit_f, nf),
            top1_hit_rate: top as f64 / n,
            top1_hit_rate_flipped: frac(top_f, nf),
            flipped: nf,
            noisy_fraction: flagged as f64 / n,
            noisy_precision: frac(caught, flagged),
            noisy_recall: frac(caught, nf),
            mean_label_count: relabeling.records.iter().map(|r| r.q as f64).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub method: Method,
    pub config_hash: String,
    pub seed: u64,
    pub noise_ratio: f64,
    pub imbalance_factor: f64,
    pub observed_imbalance_factor: Option<f64>,
    /// Final model on the test set.
    pub metrics: Option<Metrics>,
    /// Model after the first stage only.
    pub first_stage_metrics: Option<Metrics>,
    pub om: Vec<f64>,
    pub lsm: Vec<f64>,
    pub ifd_log: Vec<IfdEpoch>,
    pub unlearn_log: Vec<UnlearnEpoch>,
    pub relabel: Option<RelabelStats>,
    pub transition: Option<TransitionMatrix>,
    pub failure: Option<StageFailure>,
    pub wall_clock_seconds: f64,
}

impl PartialEq for ResultRecord {
    /// Wall-clock time is ignored.
    fn eq(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = 0.0;
        let mut b = other.clone();
        b.wall_clock_seconds = 0.0;
        serde_json::to_value(&a).ok() == serde_json::to_value(&b).ok()
    }
}

impl ResultRecord {
    fn empty(config: &ExperimentConfig, method: Method) -> Self {
        Self {
            name: config.name.clone(),
            method,
            config_hash: config.hash(),
            seed: config.data.seed,
            noise_ratio: config.data.noise_ratio,
            imbalance_factor: config.data.imbalance_factor,
            observed_imbalance_factor: None,
            metrics: None,
            first_stage_metrics: None,
            om: Vec::new(),
            lsm: Vec::new(),
            ifd_log: Vec::new(),
            unlearn_log: Vec::new(),
            relabel: None,
            transition: None,
            failure: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    fn fail(mut self, stage: &str, err: Error, started: Instant) -> Self {
        log::error!("{} stage failed: {err}", stage);
        self.failure = Some(StageFailure {
            stage: stage.to_string(),
            message: err.to_string(),
        });
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        self
    }
}

macro_rules! stage {
    ($record:ident, $started:ident, $name:expr, $e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return $record.fail($name, err, $started),
        }
    };
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Full pipeline: forge, disentangle, unlearn, evaluate. Stage failures
/// produce a partial record naming the stage.
pub fn run_experiment(config: &ExperimentConfig) -> ResultRecord {
    let started = Instant::now();
    let record = ResultRecord::empty(config, Method::Dull);
    let data = stage!(record, started, "data", prepare_data(&config.data));
    run_prepared(config, &data, record, started)
}

fn run_prepared(
    config: &ExperimentConfig,
    data: &PreparedData,
    mut record: ResultRecord,
    started: Instant,
) -> ResultRecord {
    record.observed_imbalance_factor = data.train.observed_imbalance_factor().ok();
    record.transition = Some(data.transition.clone());
    let columns = LabelColumns::observed(&data.train);
    let set = stage!(record, started, "data", columns.view(&data.store));
    let sizes = data.observed_class_sizes();
    let hash = record.config_hash.clone();
    let out_dir = config.output.dir.clone();
    if let Some(dir) = &out_dir {
        stage!(record, started, "output", ensure_dir(dir));
        stage!(
            record,
            started,
            "output",
            save_manifest(&dir.join("manifest.json"), &data.manifest)
        );
    }

    let (mut original, report) = stage!(record, started, "ifd", train_ifd(&set, &config.ifd));
    original.config_hash = hash.clone();
    record.om = report.om();
    record.lsm = report.lsm();
    record.ifd_log = report.epochs.clone();
    record.first_stage_metrics = Some(stage!(
        record,
        started,
        "evaluate",
        evaluate(
            &original,
            &data.store,
            &data.test,
            &sizes,
            config.eval.batch_size
        )
    ));
    if let Some(dir) = &out_dir {
        stage!(
            record,
            started,
            "output",
            write_jsonl(&dir.join("ifd_log.jsonl"), &record.ifd_log)
        );
        if config.output.checkpoints {
            stage!(
                record,
                started,
                "output",
                original.save(&dir.join("original"))
            );
        }
    }

    let truth = data.train.true_labels();
    let flipped = data.train.flipped();
    let mut monitor = |view: &EpochView<'_>| {
        let stats = RelabelStats::of(view.relabeling, &truth, &flipped);
        let val_acc = if config.eval.track_validation {
            evaluate(
                view.model,
                &data.store,
                &data.test,
                &sizes,
                config.eval.batch_size,
            )
            .ok()
            .map(|m| m.overall)
        } else {
            None
        };
        EpochExtras {
            hit_rate: Some(stats.hit_rate),
            val_acc,
        }
    };
    let (mut unlearned, unlearn_report) = stage!(
        record,
        started,
        "ifpu",
        unlearn_finetune(
            &original,
            &set,
            &config.ifpu,
            &config.mixer,
            Some(&mut monitor)
        )
    );
    unlearned.config_hash = hash;
    record.unlearn_log = unlearn_report.epochs.clone();
    record.relabel = Some(RelabelStats::of(
        &unlearn_report.final_relabeling,
        &truth,
        &flipped,
    ));
    record.metrics = Some(stage!(
        record,
        started,
        "evaluate",
        evaluate(
            &unlearned,
            &data.store,
            &data.test,
            &sizes,
            config.eval.batch_size
        )
    ));
    if let Some(dir) = &out_dir {
        stage!(
            record,
            started,
            "output",
            write_jsonl(&dir.join("ifpu_log.jsonl"), &record.unlearn_log)
        );
        let mut dump = unlearn_report.final_relabeling.records.clone();
        for r in &mut dump {
            r.id = data.manifest.records[r.id].id;
        }
        stage!(
            record,
            started,
            "output",
            write_dump(&dir.join("relabel.jsonl"), &dump)
        );
        if config.output.checkpoints {
            stage!(
                record,
                started,
                "output",
                unlearned.save(&dir.join("unlearned"))
            );
        }
    }
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record
}

/// Plain cross-entropy training of a fresh model.
pub fn train_ce(
    bundle: &mut ModelBundle,
    set: &TrainingSet<'_>,
    epochs: usize,
    batch_size: usize,
    sgd: &SgdConfig,
    augment: Option<&AugmentConfig>,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<f64>> {
    let k = bundle.feature_dim();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = sgd.lr_at(epoch);
        let index = stream_offset + epoch as u64;
        order.shuffle(&mut stream(seed, 21, index));
        let mut aug_rng = stream(seed, 22, index);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(batch_size.max(1)) {
            let ids: Vec<usize> = chunk.iter().map(|&i| set.ids[i]).collect();
            let mut x = set.store.gather(&ids);
            if let Some(a) = augment {
                a.apply(&mut x, View::Weak, &mut aug_rng);
            }
            bundle.zero_grad();
            let feats = bundle.backbone.forward(&x, true)?;
            let features: Vec<f64> = feats.data.iter().map(|&v| v as f64).collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut dfeat = vec![0.0; chunk.len() * k];
            let mut loss = 0.0;
            for (r, &i) in chunk.iter().enumerate() {
                let f = &features[r * k..(r + 1) * k];
                let (l, mut dz) = cross_entropy(&bundle.classifier.logits(f), set.labels[i]);
                dz.iter_mut().for_each(|v| *v *= scale);
                let df = bundle.classifier.backward(f, &dz);
                dfeat[r * k..(r + 1) * k].copy_from_slice(&df);
                loss += l * scale;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "ce",
                    epoch,
                    component: "ce".into(),
                    last_good: None,
                });
            }
            bundle.backbone.backward(&to_f32_batch(&dfeat, k));
            for p in bundle.backbone.params_mut() {
                p.sgd_step(lr, sgd.momentum, sgd.weight_decay);
            }
            for p in bundle.classifier.params_mut() {
                p.sgd_step(lr, sgd.momentum, sgd.weight_decay);
            }
            sum += loss;
            batches += 1;
        }
        log::debug!("ce epoch {epoch}: loss {:.4}", sum / batches.max(1) as f64);
        losses.push(sum / batches.max(1) as f64);
    }
    Ok(losses)
}

/// Cross-entropy baseline on the same data, backbone and two-stage schedule.
pub fn baseline_ce(config: &ExperimentConfig) -> ResultRecord {
    let started = Instant::now();
    let record = ResultRecord::empty(config, Method::Ce);
    let data = stage!(record, started, "data", prepare_data(&config.data));
    baseline_prepared(config, &data, record, started)
}

fn baseline_prepared(
    config: &ExperimentConfig,
    data: &PreparedData,
    mut record: ResultRecord,
    started: Instant,
) -> ResultRecord {
    record.observed_imbalance_factor = data.train.observed_imbalance_factor().ok();
    record.transition = Some(data.transition.clone());
    let columns = LabelColumns::observed(&data.train);
    let set = stage!(record, started, "data", columns.view(&data.store));
    let sizes = data.observed_class_sizes();
    let mut bundle = stage!(
        record,
        started,
        "ce",
        ModelBundle::new(
            &config.ifd.model,
            data.store.shape(),
            set.class_count,
            config.ifd.seed
        )
    );
    bundle.config_hash = record.config_hash.clone();
    stage!(
        record,
        started,
        "ce",
        train_ce(
            &mut bundle,
            &set,
            config.ifd.epochs,
            config.ifd.batch_size,
            &config.ifd.sgd,
            config.ifd.augment.as_ref(),
            config.ifd.seed,
            0,
        )
    );
    record.first_stage_metrics = Some(stage!(
        record,
        started,
        "evaluate",
        evaluate(
            &bundle,
            &data.store,
            &data.test,
            &sizes,
            config.eval.batch_size
        )
    ));
    for p in bundle.backbone.params_mut() {
        p.reset_momentum();
    }
    for p in bundle.classifier.params_mut() {
        p.reset_momentum();
    }
    stage!(
        record,
        started,
        "ce",
        train_ce(
            &mut bundle,
            &set,
            config.ifpu.epochs,
            config.ifpu.batch_size,
            &config.ifpu.sgd,
            config.ifpu.augment.as_ref(),
            config.ifpu.seed,
            config.ifd.epochs as u64,
        )
    );
    record.metrics = Some(stage!(
        record,
        started,
        "evaluate",
        evaluate(
            &bundle,
            &data.store,
            &data.test,
            &sizes,
            config.eval.batch_size
        )
    ));
    debug_assert_eq!(bundle.stage, Stage::Original);
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record
}

/// DULL and the CE baseline on one shared data preparation.
pub fn run_with_baseline(config: &ExperimentConfig) -> (ResultRecord, ResultRecord) {
    let started = Instant::now();
    let dull = ResultRecord::empty(config, Method::Dull);
    let ce = ResultRecord::empty(config, Method::Ce);
    match prepare_data(&config.data) {
        Ok(data) => {
            let a = run_prepared(config, &data, dull, started);
            let b = baseline_prepared(config, &data, ce, Instant::now());
            (a, b)
        }
        Err(e) => {
            let msg = e.to_string();
            (
                dull.fail("data", e, started),
                ce.fail("data", Error::invalid(msg), started),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_hash: String,
    pub methods: (Method, Method),
    pub overall: f64,
    pub head: f64,
    pub middle: f64,
    pub tail: f64,
}

/// Accuracy differences `a − b` in percentage points.
pub fn compare(a: &ResultRecord, b: &ResultRecord) -> Result<Comparison> {
    if a.config_hash != b.config_hash {
        return Err(Error::HashMismatch(
            a.config_hash.clone(),
            b.config_hash.clone(),
        ));
    }
    let (ma, mb) = match (&a.metrics, &b.metrics) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::invalid("both records need final metrics")),
    };
    Ok(Comparison {
        config_hash: a.config_hash.clone(),
        methods: (a.method, b.method),
        overall: ma.overall - mb.overall,
        head: ma.head - mb.head,
        middle: ma.middle - mb.middle,
        tail: ma.tail - mb.tail,
    })
}

pub fn record_path(dir: &Path, record: &ResultRecord) -> PathBuf {
    dir.join(format!("{}-{}.json", record.name, record.method.name()))
}

pub fn write_record(dir: &Path, record: &ResultRecord) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = record_path(dir, record);
    fs::write(&path, serde_json::to_string_pretty(record)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_record(path: &Path) -> Result<ResultRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    name: &'a str,
    method: &'a str,
    config_hash: &'a str,
    seed: u64,
    noise_ratio: f64,
    imbalance_factor: f64,
    overall: Option<f64>,
    head: Option<f64>,
    middle: Option<f64>,
    tail: Option<f64>,
    final_om: Option<f64>,
    final_lsm: Option<f64>,
    hit_rate: Option<f64>,
    failed_stage: Option<&'a str>,
    wall_clock_seconds: f64,
}

/// Appends one summary row, writing the header for a new file.
pub fn append_csv(path: &Path, record: &ResultRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let fresh = !path.exists() || fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(fresh)
        .from_writer(file);
    let m = record.metrics.as_ref();
    w.serialize(CsvRow {
        name: &record.name,
        method: record.method.name(),
        config_hash: &record.config_hash,
        seed: record.seed,
        noise_ratio: record.noise_ratio,
        imbalance_factor: record.imbalance_factor,
        overall: m.map(|m| m.overall),
        head: m.map(|m| m.head),
        middle: m.map(|m| m.middle),
        tail: m.map(|m| m.tail),
        final_om: record.om.last().copied(),
        final_lsm: record.lsm.last().copied(),
        hit_rate: record.relabel.as_ref().map(|r| r.hit_rate),
        failed_stage: record.failure.as_ref().map(|f| f.stage.as_str()),
        wall_clock_seconds: record.wall_clock_seconds,
    })?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut f = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    f.flush().map_err(|e| Error::io(path, e))
}

/// Writes the record JSON and CSV row wherever the config asks.
pub fn persist(config: &ExperimentConfig, record: &ResultRecord) -> Result<()> {
    if let Some(dir) = &config.output.dir {
        write_record(dir, record)?;
    }
    if let Some(csv) = &config.output.csv {
        append_csv(csv, record)?;
    }
    Ok(())
}

/// Loads every result record stored directly in `dir`, skipping other JSON files.
pub fn load_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths.iter().filter_map(|p| read_record(p).ok()).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub records: usize,
    pub comparisons: Vec<Comparison>,
    pub files: Vec<PathBuf>,
}

/// Summary table, DULL-versus-CE deltas and plots for all records in `dir`.
pub fn report(dir: &Path, out: &Path) -> Result<Report> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "no result records in {}",
            dir.display()
        )));
    }
    ensure_dir(out)?;
    let mut files = Vec::new();

    let csv_path = out.join("summary.csv");
    if csv_path.exists() {
        fs::remove_file(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    }
    for r in &records {
        append_csv(&csv_path, r)?;
    }
    files.push(csv_path);

    let mut comparisons = Vec::new();
    for d in records.iter().filter(|r| r.method == Method::Dull) {
        if let Some(c) = records
            .iter()
            .find(|r| r.method == Method::Ce && r.config_hash == d.config_hash)
        {
            if let Ok(cmp) = compare(d, c) {
                comparisons.push(cmp);
            }
        }
    }
    let cmp_path = out.join("comparisons.json");
    fs::write(&cmp_path, serde_json::to_string_pretty(&comparisons)?)
        .map_err(|e| Error::io(&cmp_path, e))?;
    files.push(cmp_path);

    let mut md =
        String::from("| run | method | seed | r | overall | head | middle | tail | status |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for r in &records {
        let m = r.metrics.as_ref();
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.name,
            r.method.name(),
            r.seed,
            r.noise_ratio,
            fmt(m.map(|m| m.overall)),
            fmt(m.map(|m| m.head)),
            fmt(m.map(|m| m.middle)),
            fmt(m.map(|m| m.tail)),
            r.failure
                .as_ref()
                .map_or("ok".to_string(), |f| format!("failed at {}", f.stage)),
        ));
    }
    if !comparisons.is_empty() {
        md.push_str("\n| config | Δoverall | Δhead | Δmiddle | Δtail |\n|---|---|---|---|---|\n");
        for c in &comparisons {
            md.push_str(&format!(
                "| {} | {:+.2} | {:+.2} | {:+.2} | {:+.2} |\n",
                &c.config_hash[..c.config_hash.len().min(12)],
                c.overall,
                c.head,
                c.middle,
                c.tail
            ));
        }
    }
    let md_path = out.join("summary.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    files.push(md_path);

    files.extend(emit_plots(&records, &out.join("plots"))?);
    Ok(Report {
        records: records.len(),
        comparisons,
        files,
    })
}
