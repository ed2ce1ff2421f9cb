use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualphase::classifier::{train_classifier, Classifier};
use dualphase::dataio::{write_atomic, CropManifest, DatasetManifest, RasterImage, CHECKPOINTS_DIR, IMAGES_DIR, MANIFESTS_DIR};
use dualphase::detector::{train_detector, Detector};
use dualphase::dualphase::{derive_secondary, infer_pipeline};
use dualphase::eval::make_folds;
use dualphase::experiment::{
    classifier_cv, image_label, load_crops, load_images, pipeline_eval, source_groups, DeriveSummary, DetectorEval, Report,
};
use dualphase::synth::generate_dataset;
use dualphase::{ClassLabel, Error, PipelineConfig};

const REPORT_DIR_ENV: &str = "DUALPHASE_REPORT_DIR";

#[derive(Parser)]
#[command(name = "dualphase", version, about = "Detect-then-classify pipeline for small cluttered image sets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set detector.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Global seed, overrides every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report directory; falls back to $DUALPHASE_REPORT_DIR, then `reports`.
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
    },
    /// Train the phase-one detector.
    TrainDetector {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a detector checkpoint (AP / mAP).
    EvalDetector {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Derive the secondary crop dataset from detections.
    Derive {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the phase-two classifier on crops, or on whole images with
    /// `--baseline single-phase`.
    TrainClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Classifier accuracy: of a checkpoint, or k-fold when none is given.
    EvalClassifier {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Detect and classify every image given.
    PipelineRun {
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// k-fold comparison of the dual-phase pipeline with the whole-image baseline.
    PipelineEval {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print a fold plan.
    Kfold {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long = "fold-seed")]
        fold_seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Classifier trained directly on full images.
    SinglePhase,
}

/// Exit codes by failure category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Config = 2,
    Data = 3,
    Runtime = 4,
}

#[derive(Debug)]
struct Failure {
    category: Category,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let category = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Category::Config,
            Some(Error::Io { .. } | Error::Parse { .. } | Error::Record { .. } | Error::Checkpoint(_) | Error::InvalidArgument(_)) => {
                Category::Data
            }
            Some(_) | None => Category::Runtime,
        };
        Self { category, error }
    }
}

fn fail(category: Category, error: anyhow::Error) -> Failure {
    Failure { category, error }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let tag = match f.category {
                Category::Config => "config",
                Category::Data => "data",
                Category::Runtime => "runtime",
            };
            eprintln!("error ({tag}): {:#}", f.error);
            ExitCode::from(f.category as u8)
        }
    }
}

fn load_config(common: &Common) -> Outcome<PipelineConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))
            .map_err(|e| fail(Category::Data, e))?,
        None => String::new(),
    };
    let mut value: toml::Table = toml::from_str(&text).map_err(|e| fail(Category::Config, anyhow!("{e}")))?;
    for o in &common.overrides {
        apply_override(&mut value, o).map_err(|e| fail(Category::Config, e))?;
    }
    let mut config = PipelineConfig::from_toml(&toml::to_string(&value).expect("table serializes"))?;
    if common.seed.is_some() {
        config.seed = common.seed;
    }
    Ok(config.resolved())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!("empty override key"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn report_dir(common: &Common) -> PathBuf {
    common
        .report_dir
        .clone()
        .or_else(|| std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

/// Fails listing every missing input at once.
fn require(paths: &[&Path]) -> Outcome {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(fail(Category::Data, anyhow!("missing inputs: {}", missing.join(", "))))
    }
}

fn write_report<B: serde::Serialize>(dir: &Path, name: &str, report: &Report<B>, summary: &str) -> Outcome {
    write_atomic(&dir.join(format!("{name}.json")), report.to_json().as_bytes())?;
    write_atomic(&dir.join(format!("{name}.txt")), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: Cli) -> Outcome {
    let config = load_config(&cli.common)?;
    let reports = report_dir(&cli.common);
    match cli.command {
        Command::SynthGen { out, n } => {
            let ds = generate_dataset(&config.scene, n)?;
            let manifest_path = out.join(MANIFESTS_DIR).join("dataset.jsonl");
            ds.write(&out, &manifest_path)?;
            let mut counts = std::collections::BTreeMap::<String, usize>::new();
            for r in &ds.manifest.records {
                *counts.entry(image_label(r)?.name().to_string()).or_default() += 1;
            }
            let body = serde_json::json!({
                "n_images": n,
                "image_dir": out.join(IMAGES_DIR),
                "manifest": manifest_path,
                "image_labels": counts,
            });
            let summary = format!("{n} images -> {}\n", manifest_path.display());
            write_report(&reports, "synth-gen", &Report::new("synth-gen", &config, body), &summary)
        }
        Command::TrainDetector { manifest, out } => {
            require(&[&manifest])?;
            let m = DatasetManifest::load(&manifest)?;
            let images = load_images(&m)?;
            let trained = train_detector(&config.detector, &images, &m.records)?;
            let mut det = trained.detector;
            let out = out.unwrap_or_else(|| PathBuf::from(CHECKPOINTS_DIR).join("detector.dpck"));
            det.checkpoint().save(&out)?;
            let last = trained.log.last().map(|l| l.total).unwrap_or(f64::NAN);
            let summary = format!("{} epochs, final loss {last:.5} -> {}\n", trained.log.len(), out.display());
            let body = serde_json::json!({ "n_images": images.len(), "checkpoint": out, "log": trained.log });
            write_report(&reports, "train-detector", &Report::new("train-detector", &config, body), &summary)
        }
        Command::EvalDetector { manifest, checkpoint } => {
            require(&[&manifest, &checkpoint])?;
            let m = DatasetManifest::load(&manifest)?;
            let mut det = Detector::<f32>::load(&config.detector, &checkpoint)?;
            let images = load_images(&m)?;
            let eval = DetectorEval::run(&mut det, &images, &m.records, config.eval.match_iou)?;
            let summary = eval.summary();
            write_report(&reports, "eval-detector", &Report::new("eval-detector", &config, eval), &summary)
        }
        Command::Derive { manifest, checkpoint, out } => {
            require(&[&manifest, &checkpoint])?;
            let m = DatasetManifest::load(&manifest)?;
            let mut det = Detector::<f32>::load(&config.detector, &checkpoint)?;
            let images = load_images(&m)?;
            let derived = derive_secondary(&mut det, &images, &m.records, &config.derivation)?;
            let crop_manifest = out.join(MANIFESTS_DIR).join("crops.jsonl");
            derived.write(&out, &crop_manifest)?;
            let s = DeriveSummary::of(&derived);
            let summary = s.summary();
            write_report(&reports, "derive", &Report::new("derive", &config, s), &summary)
        }
        Command::TrainClassifier { manifest, out, baseline } => {
            require(&[&manifest])?;
            let (images, labels, _) = classifier_inputs(&manifest, baseline)?;
            let trained = train_classifier(&config.classifier, &images, &labels, None)?;
            let mut clf = trained.classifier;
            let default_name = if baseline.is_some() { "classifier-single-phase.dpck" } else { "classifier.dpck" };
            let out = out.unwrap_or_else(|| PathBuf::from(CHECKPOINTS_DIR).join(default_name));
            clf.checkpoint().save(&out)?;
            let last = trained.log.last().map(|l| l.train_accuracy).unwrap_or(f64::NAN);
            let summary = format!("{} epochs, final train accuracy {last:.4} -> {}\n", trained.log.len(), out.display());
            let body = serde_json::json!({
                "n_samples": images.len(),
                "baseline": baseline.map(|_| "single-phase"),
                "checkpoint": out,
                "log": trained.log,
            });
            write_report(&reports, "train-classifier", &Report::new("train-classifier", &config, body), &summary)
        }
        Command::EvalClassifier { manifest, checkpoint, baseline } => {
            require(&[&manifest])?;
            let (images, labels, groups) = classifier_inputs(&manifest, baseline)?;
            match checkpoint {
                Some(ck) => {
                    require(&[&ck])?;
                    let mut clf = Classifier::<f32>::load(&config.classifier, &ck)?;
                    let mut preds = Vec::with_capacity(images.len());
                    for im in &images {
                        preds.push(clf.classify(im)?.class);
                    }
                    let cm = dualphase::eval::ConfusionMatrix::from_predictions(config.classifier.class_names(), &preds, &labels)?;
                    let acc = cm.accuracy();
                    let summary = format!("{} samples, accuracy {:.4}\n", images.len(), acc);
                    let body = serde_json::json!({ "n_samples": images.len(), "accuracy": acc, "confusion": cm });
                    write_report(&reports, "eval-classifier", &Report::new("eval-classifier", &config, body), &summary)
                }
                None => {
                    let (groups, n_groups) = groups;
                    let plan = make_folds(n_groups, config.eval.k, config.eval.fold_seed)?;
                    let report = classifier_cv(&config.classifier, &plan, &images, &labels, &groups, &progress)?;
                    let acc = report.accuracy.as_ref().map(|m| m.percent()).unwrap_or_default();
                    let per: Vec<String> =
                        report.folds.iter().map(|f| format!("{:.4}", f.accuracy.unwrap_or(f64::NAN))).collect();
                    let summary = format!("{}-fold accuracy {acc}  folds [{}]\n", report.k, per.join(", "));
                    write_report(&reports, "eval-classifier", &Report::new("eval-classifier", &config, report), &summary)
                }
            }
        }
        Command::PipelineRun { detector, classifier, images } => {
            let mut inputs: Vec<&Path> = vec![&detector, &classifier];
            inputs.extend(images.iter().map(PathBuf::as_path));
            require(&inputs)?;
            let mut det = Detector::<f32>::load(&config.detector, &detector)?;
            let mut clf = Classifier::<f32>::load(&config.classifier, &classifier)?;
            let mut results = Vec::with_capacity(images.len());
            let mut summary = String::new();
            for p in &images {
                let img = RasterImage::read(p)?;
                let r = infer_pipeline(&img, &mut det, &mut clf, &config.derivation)?;
                let labels: Vec<&str> = r.iter().map(|x| x.label.name()).collect();
                summary.push_str(&format!("{}: [{}]\n", p.display(), labels.join(", ")));
                results.push(serde_json::json!({ "image": p, "results": r }));
            }
            let body = serde_json::json!({ "images": results });
            write_report(&reports, "pipeline-run", &Report::new("pipeline-run", &config, body), &summary)
        }
        Command::PipelineEval { manifest } => {
            require(&[&manifest])?;
            let m = DatasetManifest::load(&manifest)?;
            let images = load_images(&m)?;
            let eval = pipeline_eval(&config, &images, &m.records, &progress)?;
            let summary = eval.summary();
            let csv = eval.detection.pr_points_csv();
            write_atomic(&reports.join("pipeline-eval-pr.csv"), csv.as_bytes())?;
            write_report(&reports, "pipeline-eval", &Report::new("pipeline-eval", &config, eval), &summary)
        }
        Command::Kfold { n, k, fold_seed } => {
            let mut config = config;
            if let Some(k) = k {
                config.eval.k = k;
            }
            if let Some(s) = fold_seed {
                config.eval.fold_seed = s;
            }
            config.validate()?;
            let plan = make_folds(n, config.eval.k, config.eval.fold_seed)?;
            let sizes = plan.fold_sizes();
            let summary = format!(
                "n {n}  k {}  seed {}  sizes {}\n",
                plan.k,
                plan.seed,
                sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("/")
            );
            let body = serde_json::json!({ "fold_sizes": sizes, "plan": plan });
            write_report(&reports, "kfold", &Report::new("kfold", &config, body), &summary)
        }
    }
}

/// Images, label indices and (groups, group count) for classifier commands.
type ClassifierInputs = (Vec<RasterImage>, Vec<usize>, (Vec<usize>, usize));

fn classifier_inputs(manifest: &Path, baseline: Option<Baseline>) -> Outcome<ClassifierInputs> {
    match baseline {
        Some(Baseline::SinglePhase) => {
            let m = DatasetManifest::load(manifest)?;
            let images = load_images(&m)?;
            let labels = m
                .records
                .iter()
                .map(|r| image_label(r).map(ClassLabel::index))
                .collect::<dualphase::Result<Vec<_>>>()?;
            let n = images.len();
            Ok((images, labels, ((0..n).collect(), n)))
        }
        None => {
            let m = CropManifest::load(manifest)?;
            if m.records.is_empty() {
                return Err(fail(Category::Data, anyhow!("crop manifest {} is empty", manifest.display())));
            }
            let images = load_crops(&m)?;
            let labels = m.records.iter().map(|r| r.class_label.index()).collect();
            let sources: Vec<String> = m.records.iter().map(|r| r.source_image.clone()).collect();
            Ok((images, labels, source_groups(&sources)))
        }
    }
}
