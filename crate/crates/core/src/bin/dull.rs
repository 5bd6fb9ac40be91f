use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dull::cifar::{ingest_cifar, CifarVariant};
use dull::data::LabelColumns;
use dull::harness::{
    compare, data_from_manifest, evaluate, forge_datasets, persist, read_record, report,
    run_experiment, run_with_baseline, DataSpec, ExperimentConfig, RelabelStats, SourceSpec,
    DATA_ROOT_ENV,
};
use dull::ifd::{train_ifd, IfdConfig};
use dull::ifpu::{unlearn_finetune, EpochExtras, EpochView, IfpuConfig};
use dull::manifest::{load_manifest, save_manifest, Manifest};
use dull::mixer::MixerConfig;
use dull::net::ModelBundle;
use dull::relabel::write_dump;
use dull::synth::{write_synthetic_cifar, SynthImageConfig};

#[derive(Parser)]
#[command(
    name = "dull",
    version,
    about = "Long-tailed noisy-label learning by inner-feature unlearning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural dataset in CIFAR binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        train_per_class: usize,
        #[arg(long, default_value_t = 100)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Forge a long-tailed, T2H-noisy label manifest from CIFAR binaries.
    Forge {
        /// CIFAR directory; defaults to the data-root variable.
        #[arg(long)]
        source: Option<PathBuf>,
        /// cifar10 or cifar100; detected from the files when omitted.
        #[arg(long)]
        variant: Option<CifarVariant>,
        #[arg(long = "if")]
        imbalance_factor: f64,
        #[arg(long)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the original model with feature disentangling.
    TrainIfd {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Fine-tune an unlearned copy of a trained original.
    Unlearn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        downsample: usize,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Also run the matched cross-entropy baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Accuracy deltas between two result records.
    Compare {
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        runs: Vec<PathBuf>,
    },
    /// Summary tables and plots for a directory of result records.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// IFPU settings plus the mixer, in one file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct UnlearnConfig {
    #[serde(flatten)]
    ifpu: IfpuConfig,
    mixer: MixerConfig,
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(T::default()),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn detect_variant(dir: &Path) -> anyhow::Result<CifarVariant> {
    for v in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
        if v.train_files().iter().all(|f| dir.join(f).is_file()) {
            return Ok(v);
        }
    }
    bail!("no CIFAR-10 or CIFAR-100 binaries in {}", dir.display())
}

fn forge(
    source: Option<PathBuf>,
    variant: Option<CifarVariant>,
    spec: DataSpec,
    out: &Path,
) -> anyhow::Result<Manifest> {
    let root = match source.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)) {
        Some(r) => r,
        None => bail!("no --source given and {DATA_ROOT_ENV} is unset"),
    };
    let variant = match variant {
        Some(v) => v,
        None => detect_variant(&root)?,
    };
    let src = ingest_cifar(&root, variant)?;
    let (noisy, test) = forge_datasets(&src.train, &src.test, &spec)?;
    let manifest = Manifest::new(&noisy, &test, spec.imbalance_factor, Some(&src));
    save_manifest(out, &manifest)?;
    Ok(manifest)
}

fn train_ifd_cmd(
    manifest: &Path,
    config: Option<&Path>,
    out: &Path,
    downsample: usize,
) -> anyhow::Result<()> {
    let manifest = load_manifest(manifest)?;
    let config: IfdConfig = read_json(config)?;
    let data = data_from_manifest(&manifest, downsample)?;
    let columns = LabelColumns::observed(&data.train);
    let set = columns.view(&data.store)?;
    let (bundle, report) = train_ifd(&set, &config)?;
    bundle.save(out)?;
    write_jsonl(&out.join("ifd_log.jsonl"), &report.epochs)?;
    let metrics = evaluate(
        &bundle,
        &data.store,
        &data.test,
        &data.observed_class_sizes(),
        256,
    )?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "OM": report.final_om(),
            "LSM": report.final_lsm(),
            "accuracy": metrics.overall,
        })
    );
    Ok(())
}

fn unlearn_cmd(
    manifest: &Path,
    original: &Path,
    config: Option<&Path>,
    out: &Path,
    downsample: usize,
) -> anyhow::Result<()> {
    let manifest = load_manifest(manifest)?;
    let config: UnlearnConfig = read_json(config)?;
    let data = data_from_manifest(&manifest, downsample)?;
    let original = ModelBundle::load(original, None)?;
    if original.class_count() != manifest.class_count {
        bail!(
            "checkpoint has {} classes, manifest has {}",
            original.class_count(),
            manifest.class_count
        );
    }
    let columns = LabelColumns::observed(&data.train);
    let set = columns.view(&data.store)?;
    let sizes = data.observed_class_sizes();
    let truth = data.train.true_labels();
    let flipped = data.train.flipped();
    let mut monitor = |view: &EpochView<'_>| EpochExtras {
        hit_rate: Some(RelabelStats::of(view.relabeling, &truth, &flipped).hit_rate),
        val_acc: evaluate(view.model, &data.store, &data.test, &sizes, 256)
            .ok()
            .map(|m| m.overall),
    };
    let (bundle, report) = unlearn_finetune(
        &original,
        &set,
        &config.ifpu,
        &config.mixer,
        Some(&mut monitor),
    )?;
    bundle.save(out)?;
    write_jsonl(&out.join("ifpu_log.jsonl"), &report.epochs)?;
    let mut dump = report.final_relabeling.records.clone();
    for r in &mut dump {
        r.id = data.manifest.records[r.id].id;
    }
    write_dump(&out.join("relabel.jsonl"), &dump)?;
    let metrics = evaluate(&bundle, &data.store, &data.test, &sizes, 256)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "accuracy": metrics.overall,
            "head": metrics.head,
            "middle": metrics.middle,
            "tail": metrics.tail,
        })
    );
    Ok(())
}

fn run_cmd(config: &Path, baseline: bool) -> anyhow::Result<bool> {
    let config = ExperimentConfig::load(config)?;
    let records = if baseline {
        let (d, c) = run_with_baseline(&config);
        vec![d, c]
    } else {
        vec![run_experiment(&config)]
    };
    let mut ok = true;
    for r in &records {
        persist(&config, r)?;
        if let Some(f) = &r.failure {
            log::error!(
                "{} failed in stage {}: {}",
                r.method.name(),
                f.stage,
                f.message
            );
            ok = false;
        }
        println!(
            "{}",
            serde_json::json!({
                "method": r.method.name(),
                "config_hash": r.config_hash,
                "accuracy": r.metrics.as_ref().map(|m| m.overall),
                "failed_stage": r.failure.as_ref().map(|f| &f.stage),
            })
        );
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth {
            out,
            classes,
            train_per_class,
            test_per_class,
            seed,
        } => {
            let config = SynthImageConfig {
                classes,
                train_per_class,
                test_per_class,
                seed,
                ..SynthImageConfig::default()
            };
            let variant = write_synthetic_cifar(&out, &config)?;
            println!("{}", serde_json::json!({ "dir": out, "variant": variant }));
        }
        Command::Forge {
            source,
            variant,
            imbalance_factor,
            noise,
            seed,
            train_per_class,
            test_per_class,
            out,
        } => {
            let spec = DataSpec {
                source: SourceSpec::Cifar {
                    variant: CifarVariant::Cifar10,
                    root: None,
                },
                imbalance_factor,
                noise_ratio: noise,
                seed,
                train_per_class,
                test_per_class,
                downsample: 1,
            };
            let m = forge(source, variant, spec, &out)?;
            let train = m.train();
            println!(
                "{}",
                serde_json::json!({
                    "manifest": out,
                    "train": train.len(),
                    "flipped": train.flipped().iter().filter(|&&f| f).count(),
                    "observed_imbalance_factor": train.observed_imbalance_factor().ok(),
                })
            );
        }
        Command::TrainIfd {
            manifest,
            config,
            out,
            downsample,
        } => train_ifd_cmd(&manifest, config.as_deref(), &out, downsample)?,
        Command::Unlearn {
            manifest,
            original,
            config,
            out,
            downsample,
        } => unlearn_cmd(&manifest, &original, config.as_deref(), &out, downsample)?,
        Command::Run { config, baseline } => return run_cmd(&config, baseline),
        Command::Compare { runs } => {
            let a = read_record(&runs[0])?;
            let b = read_record(&runs[1])?;
            println!("{}", serde_json::to_string_pretty(&compare(&a, &b)?)?);
        }
        Command::Report { dir, out } => {
            let r = report(&dir, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
