//! Command-line surface: a single binary with subcommands wiring phantom
//! generation, fidelity filtering, cross-validated training, evaluation,
//! inference, and benchmarking together.
//!
//! Every run writes a `config_echo.json` capturing the effective values of
//! all options, and a `run.log` of the decision/error log. The process exit
//! status is nonzero iff the log contains an error-severity entry. A JSON
//! config file can provide defaults for the common hyperparameters; flags
//! given on the command line win over the config file.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    generate_phantom, load_image, load_manifest, load_slice, normalize, save_image, save_manifest,
    save_mask, stratified_kfold, DatasetManifest, DatasetMeta, PhantomParams, SliceImage,
    SliceRecord,
};
use crate::error::{Error, Result};
use crate::eval::{
    benchmark_inference, evaluate_pairs, render_metrics, render_timing, DEFAULT_TIMED_RUNS,
    DEFAULT_WARMUP_RUNS,
};
use crate::losses::LossConfig;
use crate::mask::{
    fidelity_filter, pta, region_areas, resample_mask, SegMask, BACKGROUND, EXTERNAL_LAYER,
    INTERNAL_CAVITY, TRABECULAE,
};
use crate::optim::RAdamConfig;
use crate::tensor::Tensor;
use crate::train::{fit, Sample, TrainConfig};
use crate::unet::{load_checkpoint, save_checkpoint, UNetConfig};

// ---------------------------------------------------------------------------
// Logging

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Info,
    Warn,
    Error,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogEntry {
    pub severity: Severity,
    pub message: String,
}

/// Collects the run's decision log; error-severity entries make the process
/// exit nonzero.
#[derive(Debug, Default)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
    /// Echo entries to stderr as they arrive.
    pub verbose: bool,
}

impl RunLog {
    pub fn new(verbose: bool) -> RunLog {
        RunLog {
            entries: Vec::new(),
            verbose,
        }
    }

    fn push(&mut self, severity: Severity, message: String) {
        if self.verbose || severity != Severity::Info {
            eprintln!("[{:?}] {}", severity, message);
        }
        self.entries.push(LogEntry { severity, message });
    }

    pub fn info(&mut self, msg: impl Into<String>) {
        self.push(Severity::Info, msg.into());
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.push(Severity::Warn, msg.into());
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.push(Severity::Error, msg.into());
    }

    pub fn has_errors(&self) -> bool {
        self.entries.iter().any(|e| e.severity == Severity::Error)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let p = path.display().to_string();
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(&p, e))?);
        for e in &self.entries {
            writeln!(f, "[{:?}] {}", e.severity, e.message).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Argument surface

/// Defaults loadable from a JSON config file; any command-line flag that is
/// also present here overrides the file value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub folds: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lovasz_weight: Option<f64>,
    pub boundary_weight: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let p = path.display().to_string();
        let f = File::open(path).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_reader(f)?)
    }
}

fn pick<T: Copy>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[derive(Debug, Parser)]
#[command(name = "lvseg", version, about = "LVNC screening pipeline on short-axis slices")]
pub struct Cli {
    /// JSON file with default hyperparameters; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Echo informational log entries to stderr.
    #[arg(long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenPhantoms(GenPhantomsArgs),
    /// Apply the resampling-fidelity filter and manual exclusions.
    Filter(FilterArgs),
    /// Train one cross-validation fold.
    Train(TrainArgs),
    /// Cross-validated evaluation: each slice predicted by its held-out model.
    Evaluate(EvaluateArgs),
    /// Segment images and quantify PTA.
    Infer(InferArgs),
    /// Inference timing benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct GenPhantomsArgs {
    /// Number of slices to generate.
    #[arg(long)]
    pub count: usize,
    /// Square image size in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub theta_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub theta_max: f64,
    /// Slices attributed to each synthetic patient.
    #[arg(long, default_value_t = 5)]
    pub slices_per_patient: usize,
    /// Also emit full-resolution source masks of this size and derive the
    /// working rasters by resampling (exercises the fidelity filter).
    #[arg(long)]
    pub source_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Default)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Slice ids to exclude manually (repeatable).
    #[arg(long)]
    pub exclude: Vec<String>,
    /// File with one slice id to exclude per line.
    #[arg(long)]
    pub exclude_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Held-out fold index in 0..folds.
    #[arg(long)]
    pub fold: usize,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Coefficient of the Lovász-Softmax term (default 2).
    #[arg(long)]
    pub lovasz_weight: Option<f64>,
    /// Coefficient of the boundary term (default 1). At small image sizes
    /// the raw-distance boundary gradient can dominate and needs damping.
    #[arg(long)]
    pub boundary_weight: Option<f64>,
    /// Worker threads; 0 means all cores.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Disable rotation augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory holding fold checkpoints named fold<i>.ckpt.
    #[arg(long)]
    pub checkpoints: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold seed; must match the one used for training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Default)]
pub struct InferArgs {
    /// Input 16-bit PGM images.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Skip writing the color overlay.
    #[arg(long)]
    pub no_overlay: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Default)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_TIMED_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP_RUNS)]
    pub warmup: usize,
    /// Benchmarks are single-threaded unless asked otherwise.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Shared helpers

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let p = path.display().to_string();
    let mut f = File::create(path).map_err(|e| Error::io(&p, e))?;
    let text = serde_json::to_string_pretty(value)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(&p, e))
}

fn write_config_echo(out: &Path, echo: serde_json::Value) -> Result<()> {
    ensure_dir(out)?;
    write_json(&out.join("config_echo.json"), &echo)
}

/// Resolves a manifest-relative path against the manifest's directory.
fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))
}

fn normalized_sample(manifest: &Path, record: &SliceRecord) -> Result<Sample> {
    let image_path = resolve(manifest, &record.image_path);
    let mask_path = resolve(manifest, &record.mask_path);
    let (image, mask) = load_slice(&image_path, &mask_path)?;
    let raw: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 65535.0).collect();
    Ok(Sample {
        image: normalize(&raw)?,
        mask,
    })
}

fn batch_from_sample(sample: &Sample, size: usize) -> Result<Tensor> {
    Tensor::from_vec(&[1, 1, size, size], sample.image.clone())
}

// ---------------------------------------------------------------------------
// gen-phantoms

fn resample_image(image: &SliceImage, new_size: usize) -> SliceImage {
    let mut pixels = Vec::with_capacity(new_size * new_size);
    for r in 0..new_size {
        let sr = ((r as f64 + 0.5) * image.height as f64 / new_size as f64) as usize;
        for c in 0..new_size {
            let sc = ((c as f64 + 0.5) * image.width as f64 / new_size as f64) as usize;
            pixels.push(image.pixels[sr * image.width + sc]);
        }
    }
    SliceImage {
        width: new_size,
        height: new_size,
        pixels,
    }
}

pub fn cmd_gen_phantoms(args: &GenPhantomsArgs, file: &FileConfig, log: &mut RunLog) -> Result<()> {
    let seed = pick(args.seed, file.seed, 0);
    write_config_echo(
        &args.out,
        json!({
            "command": "gen-phantoms",
            "count": args.count,
            "size": args.size,
            "theta_min": args.theta_min,
            "theta_max": args.theta_max,
            "slices_per_patient": args.slices_per_patient,
            "source_size": args.source_size,
            "seed": seed,
            "out": args.out.display().to_string(),
        }),
    )?;
    if args.theta_max < args.theta_min {
        return Err(Error::contract("theta_max below theta_min"));
    }
    if args.slices_per_patient == 0 {
        return Err(Error::contract("slices_per_patient must be positive"));
    }
    ensure_dir(&args.out.join("images"))?;
    ensure_dir(&args.out.join("masks"))?;
    if args.source_size.is_some() {
        ensure_dir(&args.out.join("source_masks"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let theta = if args.theta_max > args.theta_min {
            rng.gen_range(args.theta_min..=args.theta_max)
        } else {
            args.theta_min
        };
        let phantom_seed: u64 = rng.gen();
        let gen_size = args.source_size.unwrap_or(args.size);
        let phantom = generate_phantom(&PhantomParams::sized(gen_size, theta, phantom_seed))?;

        let slice_id = format!("slice{:04}", i);
        let image_rel = format!("images/{}.pgm", slice_id);
        let mask_rel = format!("masks/{}.pgm", slice_id);

        let (image, mask, source_rel) = if let Some(source_size) = args.source_size {
            let source_rel = format!("source_masks/{}.pgm", slice_id);
            save_mask(&args.out.join(&source_rel), &phantom.mask)?;
            let full = SliceImage {
                width: source_size,
                height: source_size,
                pixels: phantom.image.clone(),
            };
            (
                resample_image(&full, args.size),
                resample_mask(&phantom.mask, args.size),
                Some(source_rel),
            )
        } else {
            (
                SliceImage {
                    width: args.size,
                    height: args.size,
                    pixels: phantom.image.clone(),
                },
                phantom.mask.clone(),
                None,
            )
        };

        let positive = match pta(&region_areas(&mask)) {
            Ok(p) => p.positive,
            Err(_) => {
                log.warn(format!("{}: PTA undefined on generated mask", slice_id));
                false
            }
        };
        save_image(&args.out.join(&image_rel), &image)?;
        save_mask(&args.out.join(&mask_rel), &mask)?;
        records.push(SliceRecord {
            slice_id,
            patient_id: format!("patient{:03}", i / args.slices_per_patient),
            image_path: image_rel,
            mask_path: mask_rel,
            lvnc_positive: positive,
            slice_position: None,
            source_mask_path: source_rel,
        });
    }

    let positives = records.iter().filter(|r| r.lvnc_positive).count();
    let manifest = DatasetManifest {
        records,
        metadata: DatasetMeta {
            pixel_size_mm: None,
            provenance: Some("synthetic short-axis phantoms".to_string()),
        },
    };
    save_manifest(&args.out.join("manifest.jsonl"), &manifest)?;
    log.info(format!(
        "generated {} slices ({} LVNC-positive) under {}",
        args.count,
        positives,
        args.out.display()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// filter

pub fn cmd_filter(args: &FilterArgs, _file: &FileConfig, log: &mut RunLog) -> Result<()> {
    write_config_echo(
        &args.out,
        json!({
            "command": "filter",
            "manifest": args.manifest.display().to_string(),
            "exclude": args.exclude,
            "exclude_file": args.exclude_file.as_ref().map(|p| p.display().to_string()),
            "out": args.out.display().to_string(),
        }),
    )?;
    let manifest = load_manifest(&args.manifest)?;
    let mut excluded: std::collections::HashSet<String> = args.exclude.iter().cloned().collect();
    if let Some(path) = &args.exclude_file {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::io(&p, e))?;
        excluded.extend(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
    }

    let mut decisions = Vec::with_capacity(manifest.records.len());
    let mut kept = Vec::new();
    for record in &manifest.records {
        let decision = decide_one(&args.manifest, record, &excluded, log);
        decisions.push(format!("{}\t{}", record.slice_id, decision.1));
        if decision.0 {
            // rewrite paths absolute so the filtered manifest stays valid
            // from its new location
            let mut r = record.clone();
            r.image_path = resolve(&args.manifest, &r.image_path).display().to_string();
            r.mask_path = resolve(&args.manifest, &r.mask_path).display().to_string();
            r.source_mask_path = r
                .source_mask_path
                .as_deref()
                .map(|s| resolve(&args.manifest, s).display().to_string());
            kept.push(r);
        }
    }

    let decisions_path = args.out.join("decisions.log");
    let dp = decisions_path.display().to_string();
    fs::write(&decisions_path, decisions.join("\n") + "\n").map_err(|e| Error::io(&dp, e))?;
    let kept_count = kept.len();
    save_manifest(
        &args.out.join("manifest.jsonl"),
        &DatasetManifest {
            records: kept,
            metadata: manifest.metadata.clone(),
        },
    )?;
    log.info(format!(
        "kept {} of {} slices; decisions in {}",
        kept_count,
        manifest.records.len(),
        decisions_path.display()
    ));
    Ok(())
}

/// (keep, reason) for one record; missing files are logged as errors and the
/// slice is discarded, but the run continues.
fn decide_one(
    manifest: &Path,
    record: &SliceRecord,
    excluded: &std::collections::HashSet<String>,
    log: &mut RunLog,
) -> (bool, String) {
    if excluded.contains(&record.slice_id) {
        return (false, "discard\tmanual exclusion".to_string());
    }
    let source_rel = match &record.source_mask_path {
        Some(s) => s,
        // no full-resolution mask to compare against: passthrough
        None => return (true, "keep\tno source mask, passthrough".to_string()),
    };
    let source = match crate::data::load_mask(&resolve(manifest, source_rel)) {
        Ok(m) => m,
        Err(e) => {
            log.error(format!("{}: source mask unreadable: {}", record.slice_id, e));
            return (false, format!("discard\tsource mask unreadable: {e}"));
        }
    };
    let working = match crate::data::load_mask(&resolve(manifest, &record.mask_path)) {
        Ok(m) => m,
        Err(e) => {
            log.error(format!("{}: mask unreadable: {}", record.slice_id, e));
            return (false, format!("discard\tmask unreadable: {e}"));
        }
    };
    let decision = fidelity_filter(&source, &working);
    if decision.keep {
        (true, "keep\tfidelity ok".to_string())
    } else {
        let reasons: Vec<String> = decision.violations.iter().map(|v| format!("{v:?}")).collect();
        (false, format!("discard\t{}", reasons.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// train

struct ResolvedTrain {
    folds: usize,
    seed: u64,
    model: UNetConfig,
    train: TrainConfig,
    optim: RAdamConfig,
    loss: LossConfig,
    threads: usize,
}

fn resolve_train(args: &TrainArgs, file: &FileConfig, input_size: usize) -> ResolvedTrain {
    let mut optim = RAdamConfig::default();
    optim.learning_rate = pick(args.learning_rate, file.learning_rate, optim.learning_rate);
    optim.weight_decay = pick(args.weight_decay, file.weight_decay, optim.weight_decay);
    let mut loss = LossConfig::default();
    loss.lovasz_weight = pick(args.lovasz_weight, file.lovasz_weight, loss.lovasz_weight);
    loss.boundary_weight = pick(args.boundary_weight, file.boundary_weight, loss.boundary_weight);
    let seed = pick(args.seed, file.seed, 0);
    ResolvedTrain {
        folds: pick(args.folds, file.folds, 5),
        seed,
        model: UNetConfig {
            depth: pick(args.depth, file.depth, 3),
            base_channels: pick(args.base_channels, file.base_channels, 8),
            in_channels: 1,
            num_labels: crate::mask::NUM_LABELS,
            input_size,
        },
        train: TrainConfig {
            max_epochs: pick(args.epochs, file.epochs, 25),
            patience: pick(args.patience, file.patience, 5),
            batch_size: pick(args.batch_size, file.batch_size, 8),
            validation_fraction: 0.2,
            rng_seed: seed.wrapping_add(args.fold as u64),
            augment: !args.no_augment,
            progress: true,
        },
        optim,
        loss,
        threads: pick(args.threads, file.threads, 0),
    }
}

pub fn cmd_train(args: &TrainArgs, file: &FileConfig, log: &mut RunLog) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    if manifest.records.is_empty() {
        return Err(Error::contract("manifest is empty"));
    }
    // input size comes from the data itself
    let first = load_image(&resolve(&args.manifest, &manifest.records[0].image_path))?;
    if first.width != first.height {
        return Err(Error::contract("training images must be square"));
    }
    let cfg = resolve_train(args, file, first.width);
    write_config_echo(
        &args.out,
        json!({
            "command": "train",
            "manifest": args.manifest.display().to_string(),
            "fold": args.fold,
            "folds": cfg.folds,
            "seed": cfg.seed,
            "model": cfg.model,
            "train": cfg.train,
            "optim": cfg.optim,
            "loss": cfg.loss,
            "threads": cfg.threads,
            "out": args.out.display().to_string(),
        }),
    )?;
    if args.fold >= cfg.folds {
        return Err(Error::contract(format!(
            "fold index {} out of range for {} folds",
            args.fold, cfg.folds
        )));
    }
    cfg.model.validate()?;

    let assignment = stratified_kfold(&manifest.records, cfg.folds, cfg.seed)?;
    for w in &assignment.warnings {
        log.warn(w.clone());
    }
    let held_out: std::collections::HashSet<usize> =
        assignment.folds[args.fold].iter().copied().collect();
    let pool: Vec<usize> = (0..manifest.records.len())
        .filter(|i| !held_out.contains(i))
        .collect();

    let mut samples = Vec::with_capacity(pool.len());
    for &i in &pool {
        let s = normalized_sample(&args.manifest, &manifest.records[i])?;
        if s.mask.width() != cfg.model.input_size || s.mask.height() != cfg.model.input_size {
            return Err(Error::contract(format!(
                "{}: slice size differs from the first slice",
                manifest.records[i].slice_id
            )));
        }
        samples.push(s);
    }

    // 80/20 split of the non-held-out pool, seeded
    let mut order: Vec<usize> = (0..samples.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e11_7));
    let val_count = (samples.len() as f64 * cfg.train.validation_fraction).round() as usize;
    let val_count = val_count.clamp(1, samples.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(val_count);
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    log.info(format!(
        "fold {}: {} train / {} val / {} held out",
        args.fold,
        train_set.len(),
        val_set.len(),
        held_out.len()
    ));

    let pool_handle = thread_pool(cfg.threads)?;
    let result = pool_handle.install(|| {
        fit(
            &cfg.model,
            &cfg.train,
            &cfg.loss,
            &cfg.optim,
            &train_set,
            &val_set,
        )
    })?;

    save_checkpoint(&args.out.join(format!("fold{}.ckpt", args.fold)), &result.params)?;
    write_json(
        &args.out.join("history.json"),
        &json!({
            "fold": args.fold,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "history": result.history,
        }),
    )?;
    log.info(format!(
        "fold {}: best epoch {} (val loss {:.6}) after {} epochs",
        args.fold,
        result.best_epoch,
        result.best_val_loss,
        result.history.len()
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn cmd_evaluate(args: &EvaluateArgs, file: &FileConfig, log: &mut RunLog) -> Result<()> {
    let folds = pick(args.folds, file.folds, 5);
    let seed = pick(args.seed, file.seed, 0);
    let threads = pick(args.threads, file.threads, 0);
    write_config_echo(
        &args.out,
        json!({
            "command": "evaluate",
            "manifest": args.manifest.display().to_string(),
            "checkpoints": args.checkpoints.display().to_string(),
            "folds": folds,
            "seed": seed,
            "threads": threads,
            "out": args.out.display().to_string(),
        }),
    )?;
    let manifest = load_manifest(&args.manifest)?;
    let assignment = stratified_kfold(&manifest.records, folds, seed)?;

    let pool_handle = thread_pool(threads)?;
    let mut pairs = Vec::with_capacity(manifest.records.len());
    for (f, fold_indices) in assignment.folds.iter().enumerate() {
        let ckpt_path = args.checkpoints.join(format!("fold{f}.ckpt"));
        if !ckpt_path.exists() {
            return Err(Error::contract(format!(
                "missing checkpoint for fold {f}: {}",
                ckpt_path.display()
            )));
        }
        let params = load_checkpoint(&ckpt_path)?;
        let size = params.config.input_size;
        for &i in fold_indices {
            let record = &manifest.records[i];
            let sample = normalized_sample(&args.manifest, record)?;
            if sample.mask.width() != size || sample.mask.height() != size {
                return Err(Error::contract(format!(
                    "{}: slice size {} differs from checkpoint input size {}",
                    record.slice_id,
                    sample.mask.width(),
                    size
                )));
            }
            let batch = batch_from_sample(&sample, size)?;
            let pred = pool_handle.install(|| params.predict(&batch))?;
            pairs.push((pred.into_iter().next().unwrap(), sample.mask));
        }
        log.info(format!("fold {f}: predicted {} held-out slices", fold_indices.len()));
    }

    let report = evaluate_pairs(&pairs)?;
    write_json(&args.out.join("metrics.json"), &serde_json::to_value(&report)?)?;
    println!("{}", render_metrics(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// infer + overlay raster

/// RGB overlay of a mask over its image, exactly decodable back to the mask:
/// every pixel is the down-shifted gray value (0..=127) with +128 added to
/// the green channel for EL, blue for IC, red for T, and no channel for
/// background.
pub fn render_overlay(image: &SliceImage, mask: &SegMask) -> Result<Vec<u8>> {
    if image.width != mask.width() || image.height != mask.height() {
        return Err(Error::dimension("overlay: image/mask size mismatch"));
    }
    let mut rgb = Vec::with_capacity(image.pixels.len() * 3);
    for (pix, label) in image.pixels.iter().zip(mask.labels()) {
        let base = (pix >> 9) as u8;
        let (mut r, mut g, mut b) = (base, base, base);
        match *label {
            EXTERNAL_LAYER => g += 128,
            INTERNAL_CAVITY => b += 128,
            TRABECULAE => r += 128,
            _ => {}
        }
        rgb.extend_from_slice(&[r, g, b]);
    }
    Ok(rgb)
}

/// Inverse of [`render_overlay`]'s label encoding.
pub fn decode_overlay(rgb: &[u8], width: usize, height: usize) -> Result<SegMask> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dimension("overlay: RGB buffer size mismatch"));
    }
    let mut labels = Vec::with_capacity(width * height);
    for px in rgb.chunks_exact(3) {
        let (r, g, b) = (px[0], px[1], px[2]);
        labels.push(if r == g && g == b {
            BACKGROUND
        } else if g > r {
            EXTERNAL_LAYER
        } else if b > r {
            INTERNAL_CAVITY
        } else {
            TRABECULAE
        });
    }
    SegMask::new(width, height, labels)
}

pub fn save_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let p = path.display().to_string();
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(&p, e))?);
    write!(f, "P6\n{} {}\n255\n", width, height).map_err(|e| Error::io(&p, e))?;
    f.write_all(rgb).map_err(|e| Error::io(&p, e))
}

pub fn load_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let p = path.display().to_string();
    let mut f = File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(&p, e))?;
    let text_end = bytes
        .iter()
        .scan(0usize, |fields, &b| {
            if (b as char).is_whitespace() {
                *fields += 1;
            }
            Some(*fields)
        })
        .position(|fields| fields >= 4)
        .ok_or_else(|| Error::format(&p, "truncated PPM header"))?;
    let header: Vec<&str> = std::str::from_utf8(&bytes[..text_end])
        .map_err(|_| Error::format(&p, "non-UTF8 PPM header"))?
        .split_whitespace()
        .collect();
    if header.len() != 4 || header[0] != "P6" || header[3] != "255" {
        return Err(Error::format(&p, "expected P6 maxval 255"));
    }
    let width: usize = header[1].parse().map_err(|_| Error::format(&p, "bad width"))?;
    let height: usize = header[2].parse().map_err(|_| Error::format(&p, "bad height"))?;
    let data = bytes[text_end + 1..].to_vec();
    if data.len() != width * height * 3 {
        return Err(Error::format(&p, "PPM payload size mismatch"));
    }
    Ok((width, height, data))
}

pub fn cmd_infer(args: &InferArgs, _file: &FileConfig, log: &mut RunLog) -> Result<()> {
    write_config_echo(
        &args.out,
        json!({
            "command": "infer",
            "images": args.image.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "checkpoint": args.checkpoint.display().to_string(),
            "overlay": !args.no_overlay,
            "out": args.out.display().to_string(),
        }),
    )?;
    let params = load_checkpoint(&args.checkpoint)?;
    let size = params.config.input_size;

    for path in &args.image {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "slice".to_string());
        let image = match load_image(path) {
            Ok(i) => i,
            Err(e) => {
                log.error(format!("{}: {}", path.display(), e));
                continue;
            }
        };
        if image.width != size || image.height != size {
            log.error(format!(
                "{}: image is {}x{}, model expects {}x{}",
                path.display(),
                image.width,
                image.height,
                size,
                size
            ));
            continue;
        }
        let raw: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 65535.0).collect();
        let batch = Tensor::from_vec(&[1, 1, size, size], normalize(&raw)?)?;
        let mask = params.predict(&batch)?.into_iter().next().unwrap();

        save_mask(&args.out.join(format!("{stem}_mask.pgm")), &mask)?;
        if !args.no_overlay {
            let rgb = render_overlay(&image, &mask)?;
            save_ppm(&args.out.join(format!("{stem}_overlay.ppm")), size, size, &rgb)?;
        }
        let doc = match pta(&region_areas(&mask)) {
            Ok(r) => json!({
                "slice": stem,
                "pta_percent": r.pta,
                "lvnc_positive": r.positive,
            }),
            Err(_) => {
                log.warn(format!("{stem}: PTA undefined (no myocardium segmented)"));
                json!({ "slice": stem, "pta_percent": null, "lvnc_positive": null })
            }
        };
        write_json(&args.out.join(format!("{stem}_pta.json")), &doc)?;
        log.info(format!("{stem}: wrote mask, overlay and PTA document"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

pub fn cmd_bench(args: &BenchArgs, file: &FileConfig, log: &mut RunLog) -> Result<()> {
    let threads = pick(args.threads, file.threads, 1);
    let seed = pick(args.seed, file.seed, 0);
    write_config_echo(
        &args.out,
        json!({
            "command": "bench",
            "checkpoint": args.checkpoint.display().to_string(),
            "batch_size": args.batch_size,
            "runs": args.runs,
            "warmup": args.warmup,
            "threads": threads,
            "seed": seed,
            "out": args.out.display().to_string(),
        }),
    )?;
    let params = load_checkpoint(&args.checkpoint)?;
    let size = params.config.input_size;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = args.batch_size * size * size;
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let batch = Tensor::from_vec(&[args.batch_size, 1, size, size], data)?;

    let pool_handle = thread_pool(threads)?;
    let report = pool_handle.install(|| benchmark_inference(&params, &batch, args.runs, args.warmup))?;
    write_json(&args.out.join("timing.json"), &serde_json::to_value(&report)?)?;
    println!("{}", render_timing(&report));
    log.info("benchmark complete");
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry point

pub fn execute(cli: &Cli, log: &mut RunLog) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match &cli.command {
        Command::GenPhantoms(a) => cmd_gen_phantoms(a, &file, log),
        Command::Filter(a) => cmd_filter(a, &file, log),
        Command::Train(a) => cmd_train(a, &file, log),
        Command::Evaluate(a) => cmd_evaluate(a, &file, log),
        Command::Infer(a) => cmd_infer(a, &file, log),
        Command::Bench(a) => cmd_bench(a, &file, log),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    match &cli.command {
        Command::GenPhantoms(a) => a.out.clone(),
        Command::Filter(a) => a.out.clone(),
        Command::Train(a) => a.out.clone(),
        Command::Evaluate(a) => a.out.clone(),
        Command::Infer(a) => a.out.clone(),
        Command::Bench(a) => a.out.clone(),
    }
}

/// Parses the process arguments, runs the selected subcommand, writes the run
/// log, and returns the process exit code (nonzero iff an error-severity
/// entry was logged).
pub fn run() -> i32 {
    let cli = Cli::parse();
    let mut log = RunLog::new(cli.verbose);
    if let Err(e) = execute(&cli, &mut log) {
        log.error(e.to_string());
    }
    let dir = out_dir(&cli);
    if fs::create_dir_all(&dir).is_ok() {
        if let Err(e) = log.write_to(&dir.join("run.log")) {
            eprintln!("[Error] failed to write run log: {e}");
            return 1;
        }
    }
    i32::from(log.has_errors())
}
