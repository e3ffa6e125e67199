//! `hoit` command line: train, infer, eval, viz-attention, synth.
//!
//! Exit codes: 0 success, 2 usage / configuration / input mismatch, 3 runtime
//! failure. `HOIT_THREADS` caps the worker pool used for per-image work.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hoit::config::{ConfigError, RunConfig};
use hoit::data::synth::{check_scene, generate, SynthSpec};
use hoit::data::{load_annotations, load_dataset, load_samples, DataError, DatasetManifest, Image, Normalization};
use hoit::eval::{compute_role_map, load_detections, save_detections, DecodeConfig, Detection, EvalError, Setting};
use hoit::model::HoiTransformer;
use hoit::tensor::checkpoint::Checkpoint;
use hoit::train::{detect, load_model, CheckpointMeta, MetricKind, TrainError, Trainer};
use rayon::prelude::*;

mod viz;

#[derive(Parser)]
#[command(name = "hoit", version, about = "End-to-end human-object interaction detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect HOIs and write them as line-delimited records.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG files; the detection image id is the file stem.
        #[arg(long, num_args = 1.., conflicts_with = "annotations")]
        images: Vec<PathBuf>,
        /// Annotation file whose images to run on; ids match its records.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Run configuration; its model must match the checkpoint and its
        /// inference section supplies defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Minimum composite score.
        #[arg(long)]
        threshold: Option<f64>,
        /// Keep at most this many detections per image.
        #[arg(long)]
        max_detections: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Role mAP of a detections file against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SettingArg::Default)]
        setting: SettingArg,
        /// Per-category table (JSON); defaults to `<detections>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Last-layer decoder cross attention of one query as a grayscale PGM.
    VizAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic dataset and rule-check what was written.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML generator spec; built-in defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the spec's image count.
        #[arg(long)]
        num_images: Option<usize>,
        /// Annotations only; images are re-rendered from the records on load.
        #[arg(long)]
        no_images: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Default,
    KnownObject,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Default => Setting::Default,
            SettingArg::KnownObject => Setting::KnownObject,
        }
    }
}

/// A failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl fmt::Display) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::usage(e)
    }
}

impl From<DataError> for Failure {
    // Bad or missing inputs are the caller's to fix.
    fn from(e: DataError) -> Self {
        Failure::usage(e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Failure::runtime(e),
            _ => Failure::usage(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::usage(e),
            _ => Failure::runtime(e),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Infer {
            checkpoint,
            images,
            annotations,
            config,
            threshold,
            max_detections,
            output,
        } => cmd_infer(InferArgs {
            checkpoint,
            images,
            annotations,
            config,
            threshold,
            max_detections,
            output,
        }),
        Command::Eval {
            detections,
            annotations,
            manifest,
            setting,
            report,
        } => cmd_eval(&detections, &annotations, &manifest, setting.into(), report),
        Command::VizAttention {
            checkpoint,
            image,
            query,
            output,
        } => viz::cmd_viz_attention(&checkpoint, &image, query, &output),
        Command::Synth {
            out,
            spec,
            seed,
            num_images,
            no_images,
        } => cmd_synth(&out, spec.as_deref(), seed, num_images, no_images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("HOIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("HOIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::runtime)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Outcome {
    let cfg = RunConfig::load(config_path)?;
    let train = load_dataset(&cfg.data.train_annotations, &cfg.data.manifest)?;
    let eval = match &cfg.data.eval_annotations {
        Some(p) => {
            let records = load_annotations(p, &train.manifest)?;
            Some(load_samples(p, &train.manifest, &records)?)
        }
        None => None,
    };
    fs::create_dir_all(&cfg.output.dir)
        .map_err(|e| Failure::usage(format!("cannot create output directory {}: {e}", cfg.output.dir.display())))?;
    write_file(&cfg.output.dir.join("config.resolved.toml"), cfg.resolved_toml())?;

    let mut trainer = match resume {
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), train.manifest.clone())?,
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
            let mut t = Trainer::from_checkpoint(&ckpt)?;
            if t.model.config() != &cfg.model {
                return Err(Failure::usage(format!(
                    "{} was trained with a different [model] section than {}",
                    path.display(),
                    config_path.display()
                )));
            }
            if t.manifest != train.manifest {
                return Err(Failure::usage(format!("{} was trained on a different manifest", path.display())));
            }
            // The file's schedule governs, so a run can be extended.
            t.config = cfg.train.clone();
            eprintln!("resuming at epoch {} step {}", t.state.epoch, t.state.step);
            t
        }
    };
    let mut observer = |r: &hoit::train::MetricRecord| match &r.kind {
        MetricKind::Eval { map_full, .. } => {
            eprintln!("epoch {} step {}: mAP {}", r.epoch + 1, r.step, map_full.map_or("n/a".into(), |v| format!("{v:.4}")));
        }
        MetricKind::Train { loss, .. } if r.step % 100 == 0 => {
            eprintln!("step {}: loss {:.4}", r.step, loss.total);
        }
        MetricKind::Train { .. } => {}
    };
    trainer.fit(&train.samples, eval.as_deref(), Some(&cfg.output.dir), &mut observer)?;
    println!("wrote {}", cfg.output.dir.join("last.ckpt").display());
    Ok(())
}

struct InferArgs {
    checkpoint: PathBuf,
    images: Vec<PathBuf>,
    annotations: Option<PathBuf>,
    config: Option<PathBuf>,
    threshold: Option<f64>,
    max_detections: Option<usize>,
    output: PathBuf,
}

fn load_checkpoint_model(path: &Path) -> Result<(HoiTransformer, CheckpointMeta), Failure> {
    load_model(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_infer(args: InferArgs) -> Outcome {
    let (model, meta) = load_checkpoint_model(&args.checkpoint)?;
    let mut decode = DecodeConfig::default();
    if let Some(p) = &args.config {
        let cfg = RunConfig::load(p)?;
        if cfg.model != meta.model {
            return Err(Failure::usage(format!(
                "model in {} does not match checkpoint {}",
                p.display(),
                args.checkpoint.display()
            )));
        }
        decode = cfg.inference;
    }
    if let Some(t) = args.threshold {
        if !t.is_finite() || t < 0.0 {
            return Err(Failure::usage(format!("--threshold must be a non-negative number, got {t}")));
        }
        decode.threshold = t;
    }
    if let Some(k) = args.max_detections {
        if k == 0 {
            return Err(Failure::usage("--max-detections must be positive"));
        }
        decode.max_detections = Some(k);
    }
    let norm = meta.train.normalization.clone();
    let inputs: Vec<(String, Image)> = match (&args.annotations, args.images.is_empty()) {
        (Some(ann), _) => {
            let records = load_annotations(ann, &meta.manifest)?;
            load_samples(ann, &meta.manifest, &records)?
                .into_iter()
                .map(|s| (s.id, s.image))
                .collect()
        }
        (None, false) => args
            .images
            .iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, Image::load_png(p)?))
            })
            .collect::<Result<_, DataError>>()?,
        (None, true) => return Err(Failure::usage("give --images or --annotations")),
    };
    let dets = run_detection(&model, &meta.manifest, &norm, &decode, &inputs)?;
    save_detections(&args.output, &dets)?;
    println!("{} detections on {} images -> {}", dets.len(), inputs.len(), args.output.display());
    Ok(())
}

/// Per-image detection in parallel; output grouped by image id in sorted order.
fn run_detection(
    model: &HoiTransformer,
    manifest: &DatasetManifest,
    norm: &Normalization,
    decode: &DecodeConfig,
    inputs: &[(String, Image)],
) -> Result<Vec<Detection>, Failure> {
    let mut per_image: Vec<(String, Vec<Detection>)> = inputs
        .par_iter()
        .map(|(id, img)| Ok((id.clone(), detect(model, id, img, manifest, norm, decode)?)))
        .collect::<Result<_, TrainError>>()?;
    per_image.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(per_image.into_iter().flat_map(|(_, d)| d).collect())
}

fn cmd_eval(detections: &Path, annotations: &Path, manifest: &Path, setting: Setting, report: Option<PathBuf>) -> Outcome {
    let manifest = DatasetManifest::load(manifest)?;
    let records = load_annotations(annotations, &manifest)?;
    let dets = load_detections(detections)?;
    let gts: BTreeMap<String, Vec<_>> = records.into_iter().map(|r| (r.image, r.hois)).collect();
    let rep = compute_role_map(&dets, &gts, &manifest, setting)?;
    print!("{}", rep.summary());
    let path = report.unwrap_or_else(|| {
        let mut p = detections.as_os_str().to_owned();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    write_file(&path, json + "\n")?;
    Ok(())
}

fn cmd_synth(out: &Path, spec_path: Option<&Path>, seed: u64, num_images: Option<usize>, no_images: bool) -> Outcome {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = num_images {
        spec.num_images = n;
    }
    spec.validate().map_err(Failure::usage)?;
    fs::create_dir_all(out).map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;
    let probe = out.join(".hoit-write-test");
    fs::write(&probe, b"").map_err(|e| Failure::usage(format!("{} is not writable: {e}", out.display())))?;
    let _ = fs::remove_file(&probe);

    let data = generate(&spec, seed).map_err(Failure::runtime)?;
    data.write(out, !no_images).map_err(Failure::runtime)?;
    write_file(&out.join("spec.toml"), toml::to_string_pretty(&spec).expect("spec serializes"))?;

    // Check what is on disk, not what is in memory.
    let written = load_dataset(&out.join("annotations.jsonl"), &out.join("manifest.json")).map_err(Failure::runtime)?;
    let records = load_annotations(&out.join("annotations.jsonl"), &written.manifest).map_err(Failure::runtime)?;
    let mut bad = 0;
    let mut hois = 0;
    for (rec, s) in records.iter().zip(&written.samples) {
        hois += rec.hois.len();
        let problems = check_scene(rec, &s.image, &written.manifest, &spec);
        for p in &problems {
            eprintln!("{}: {p}", rec.image);
        }
        bad += usize::from(!problems.is_empty());
    }
    println!("{} images, {hois} HOIs written to {}; rule check: {} of {} scenes valid", records.len(), out.display(), records.len() - bad, records.len());
    if bad > 0 {
        return Err(Failure::runtime(format!("{bad} scenes failed the rule check")));
    }
    Ok(())
}
