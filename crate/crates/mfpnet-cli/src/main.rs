//! Command line front end for the expression recognition pipeline.
//!
//! One subcommand per pipeline stage, from patch extraction to
//! cross-validated evaluation and SVG plots. Every command validates
//! its inputs before touching the filesystem, writes its artifacts
//! under `--out`, and is deterministic given the same inputs and seed,
//! so reruns overwrite files with identical bytes.
//!
//! Exit codes: 0 on success, 2 for unknown commands or flags (with
//! usage text), 1 for any validation or runtime failure, reported as a
//! single JSON line on stderr. Set `MFPNET_LOG` for log verbosity.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mfpnet::augment::parse_plan;
use mfpnet::cgan::{train_cgan, CganConfig, Discriminator, Generator};
use mfpnet::dataeval::{
    augment_pool, evaluate, fine_tune, load_manifest, load_samples, neutral_expression_pairs,
    run_experiment, sub_seed, synth_dataset, train_classifier, AlignedSample, ExperimentConfig,
    Manifest, SynthSpec,
};
use mfpnet::error::{Error, Result};
use mfpnet::facegeom::{
    extract_patches, load_image, load_landmarks, align, save_image, save_patchset, FaceImage,
};
use mfpnet::model::{shape_plan, MfpModel, ModelConfig};
use mfpnet::{par, plot};

#[derive(Parser)]
#[command(
    name = "mfpnet",
    version,
    about = "Facial expression recognition from aggregated facial patches"
)]
struct Cli {
    /// Cap for worker threads in data-parallel kernels (0 = default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-stage feature map sizes for a patch size.
    ShapePlan(ShapePlanArgs),
    /// Write a procedural synthetic face dataset.
    SynthData(SynthDataArgs),
    /// Cut the seven aligned patches for every manifest sample.
    ExtractPatches(ExtractPatchesArgs),
    /// Expand a labeled dataset with transformation functions.
    Augment(AugmentArgs),
    /// Train the conditional GAN on neutral/expression pairs.
    GanTrain(GanTrainArgs),
    /// Synthesize expression images from neutral faces.
    GanGenerate(GanGenerateArgs),
    /// Train a classifier on a whole manifest.
    Train(TrainArgs),
    /// Evaluate a trained classifier on a manifest.
    Eval(EvalArgs),
    /// Subject-independent cross-validation with optional augmentation.
    CrossEval(CrossEvalArgs),
    /// Continue training a model on part of a new dataset.
    FineTune(FineTuneArgs),
    /// Render a confusion matrix CSV as an SVG heatmap.
    Plot(PlotArgs),
}

/// Flags shared by the training-facing commands. Precedence: flag over
/// config-file value over default.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON file holding an experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Number of expression classes the model distinguishes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Training-fold augmentation: none, cgan, tf, or both.
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Comma-separated transformation plan, e.g. "rotate90,translate".
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    gan_steps: Option<usize>,
    /// Class name treated as neutral for GAN conditioning.
    #[arg(long)]
    neutral: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.patch_size {
            config.model.patch_size = v;
            config.extraction.patch_size = v;
        }
        if let Some(v) = self.classes {
            config.model.classes = v;
        }
        if let Some(v) = self.folds {
            config.folds = v;
        }
        if let Some(v) = &self.augment {
            config.augmentation = v.parse()?;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch {
            config.batch_size = v;
        }
        if let Some(v) = self.lr {
            config.learning_rate = v;
        }
        if let Some(v) = &self.plan {
            config.tf_plan = parse_plan(v)?;
        }
        if let Some(v) = self.margin {
            config.extraction.margin = v;
        }
        if let Some(v) = self.gan_steps {
            config.gan_steps = v;
        }
        if let Some(v) = &self.neutral {
            config.neutral_class = Some(v.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct ShapePlanArgs {
    #[arg(long)]
    patch_size: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 16)]
    subjects: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Images per (subject, class) pair.
    #[arg(long, default_value_t = 4)]
    per: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractPatchesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GanTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GanGenerateArgs {
    /// Output directory of a previous gan-train run.
    #[arg(long)]
    gan: PathBuf,
    /// Manifest supplying the neutral source faces.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory of a previous train or fine-tune run.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CrossEvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct FineTuneArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory of a previous train run.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    fraction: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// Confusion matrix CSV, as written by eval or cross-eval.
    #[arg(long)]
    confusion: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

// Die quietly when stdout feeds a closed pipe (e.g. `mfpnet shape-plan | head`)
// instead of panicking on the failed write.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe { libc::signal(libc::SIGPIPE, libc::SIG_DFL) };
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    let cli = Cli::parse();
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter("MFPNET_LOG")).try_init();
    let result = match cli.threads {
        Some(n) => par::configure_threads(n).map_err(Error::Config).and_then(|()| run(cli.command)),
        None => run(cli.command),
    };
    if let Err(e) = result {
        eprintln!("{}", serde_json::json!({ "error": e.to_string() }));
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ShapePlan(args) => cmd_shape_plan(args),
        Command::SynthData(args) => cmd_synth_data(args),
        Command::ExtractPatches(args) => cmd_extract_patches(args),
        Command::Augment(args) => cmd_augment(args),
        Command::GanTrain(args) => cmd_gan_train(args),
        Command::GanGenerate(args) => cmd_gan_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::CrossEval(args) => cmd_cross_eval(args),
        Command::FineTune(args) => cmd_fine_tune(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Loads manifest samples through the extraction settings of `config`.
fn load_dataset(
    manifest_path: &Path,
    config: &ExperimentConfig,
) -> Result<(Manifest, Vec<AlignedSample>)> {
    let manifest = load_manifest(manifest_path)?;
    let samples = load_samples(&manifest, &config.extraction)?;
    Ok((manifest, samples))
}

fn save_model_dir(model: &MfpModel, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    model.save(&dir.join("model.ckpt"))?;
    write_json(&dir.join("model.json"), model.config())
}

fn load_model_dir(dir: &Path) -> Result<MfpModel> {
    let config: ModelConfig = read_json(&dir.join("model.json"))?;
    MfpModel::load(config, &dir.join("model.ckpt"))
}

fn cmd_shape_plan(args: ShapePlanArgs) -> Result<()> {
    let plan = shape_plan(args.patch_size)?;
    print!("{}", plan.to_text());
    println!("classes: {}", args.classes);
    if let Some(out) = args.out {
        ensure_dir(&out)?;
        write_text(&out.join("shape_plan.csv"), &plan.to_csv())?;
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let spec = SynthSpec {
        subjects: args.subjects,
        classes: args.classes,
        images_per_class: args.per,
        image_size: args.size,
        noise: args.noise,
    };
    ensure_dir(&args.out)?;
    let manifest = synth_dataset(&spec, args.seed, &args.out)?;
    println!(
        "wrote {} samples ({} subjects, {} classes) to {}",
        manifest.samples.len(),
        args.subjects,
        args.classes,
        args.out.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_extract_patches(args: ExtractPatchesArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let manifest = load_manifest(&args.manifest)?;
    let patches_dir = args.out.join("patches");
    ensure_dir(&patches_dir)?;
    let mut index = String::from("subject,sequence,frame,label,path\n");
    for record in &manifest.samples {
        let image = load_image(&record.image)?;
        let landmarks = load_landmarks(&record.landmarks)?;
        let aligned = align(&image, &landmarks, &config.extraction.align)?;
        let patches = extract_patches(
            &aligned.image,
            &aligned.landmarks,
            config.extraction.patch_size,
            config.extraction.margin,
        )?;
        let name = format!("{}_{}_{}.mfpp", record.subject, record.sequence, record.frame);
        save_patchset(&patches, &patches_dir.join(&name))?;
        index.push_str(&format!(
            "{},{},{},{},patches/{}\n",
            record.subject,
            record.sequence,
            record.frame,
            record.label.as_deref().unwrap_or(""),
            name
        ));
    }
    write_text(&args.out.join("index.csv"), &index)?;
    write_json(&args.out.join("config.json"), &config)?;
    println!("extracted {} patch sets to {}", manifest.samples.len(), patches_dir.display());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let mut config = args.config.resolve()?;
    // This command IS the tf expansion; the switch only governs whether
    // run_experiment would also train a GAN, which does not apply here.
    config.augmentation = "tf".parse()?;
    let (manifest, samples) = load_dataset(&args.manifest, &config)?;
    let refs: Vec<&AlignedSample> = samples.iter().collect();
    let (pool, seeds) = augment_pool(&refs, &manifest, &config)?;
    let out_dir = args.out.join("augmented");
    ensure_dir(&out_dir)?;
    let mut index = String::from("index,label_index,class,subject,path\n");
    for (i, (patches, label, subject)) in pool.iter().enumerate() {
        let name = format!("aug{i:05}.mfpp");
        save_patchset(patches, &out_dir.join(&name))?;
        index.push_str(&format!(
            "{i},{label},{},{subject},augmented/{name}\n",
            manifest.classes[*label]
        ));
    }
    write_text(&args.out.join("index.csv"), &index)?;
    write_json(&args.out.join("config.json"), &config)?;
    write_json(&args.out.join("seeds.json"), &seeds)?;
    println!(
        "expanded {} samples to {} ({} plan steps)",
        samples.len(),
        pool.len(),
        config.tf_plan.len()
    );
    Ok(())
}

/// Sidecar describing a saved GAN so generate can rebuild it.
#[derive(serde::Serialize, serde::Deserialize)]
struct GanMeta {
    classes: usize,
    noise_dim: usize,
    image_size: usize,
    class_names: Vec<String>,
}

fn cmd_gan_train(args: GanTrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (manifest, samples) = load_dataset(&args.manifest, &config)?;
    let neutral = resolve_neutral_name(&config, &manifest)?;
    let refs: Vec<&AlignedSample> = samples.iter().collect();
    let pairs = neutral_expression_pairs(&refs, neutral);
    if pairs.is_empty() {
        return Err(Error::Config(
            "no neutral/expression pairs; the manifest needs neutral and expression samples per subject"
                .to_string(),
        ));
    }
    let dataset: Vec<(FaceImage, FaceImage, usize)> = pairs
        .iter()
        .map(|(n, e)| (n.aligned.image.clone(), e.aligned.image.clone(), e.label))
        .collect();
    let gan_config = CganConfig { seed: sub_seed(config.seed, "gan"), ..config.gan.clone() };
    let trained = train_cgan(&dataset, &gan_config, config.gan_steps)?;
    ensure_dir(&args.out)?;
    trained.generator.save(&args.out.join("generator.ckpt"))?;
    trained.discriminator.save(&args.out.join("discriminator.ckpt"))?;
    let meta = GanMeta {
        classes: manifest.classes.len(),
        noise_dim: config.gan.noise_dim,
        image_size: config.extraction.align.out_size,
        class_names: manifest.classes.clone(),
    };
    write_json(&args.out.join("gan.json"), &meta)?;
    write_json(&args.out.join("config.json"), &config)?;
    let mut history = String::from("step,d_value,g_total,g_adversarial,g_mse,g_perceptual\n");
    for (step, losses) in trained.history.iter().enumerate() {
        history.push_str(&format!(
            "{step},{},{},{},{},{}\n",
            losses.d_value, losses.g.total, losses.g.l_ad, losses.g.l_mse, losses.g.l_pep
        ));
    }
    write_text(&args.out.join("history.csv"), &history)?;
    let last = trained.history.last().expect("at least one step");
    println!(
        "trained {} steps on {} pairs; final D value {:.4}, G loss {:.4}",
        trained.history.len(),
        pairs.len(),
        last.d_value,
        last.g.total
    );
    Ok(())
}

fn resolve_neutral_name(config: &ExperimentConfig, manifest: &Manifest) -> Result<usize> {
    let name = config.neutral_class.clone().unwrap_or_else(|| "neutral".to_string());
    manifest
        .classes
        .iter()
        .position(|c| c.eq_ignore_ascii_case(&name))
        .ok_or_else(|| Error::Config(format!("neutral class {name:?} is not in the class list")))
}

/// One synthesized image in the emitted manifest fragment.
#[derive(serde::Serialize)]
struct GeneratedRecord {
    image: String,
    source_subject: String,
    label: String,
    provenance: &'static str,
}

fn cmd_gan_generate(args: GanGenerateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let meta: GanMeta = read_json(&args.gan.join("gan.json"))?;
    let generator = Generator::load(meta.classes, meta.noise_dim, &args.gan.join("generator.ckpt"))?;
    // Verify the discriminator checkpoint stays loadable alongside.
    let _ = Discriminator::load(&args.gan.join("discriminator.ckpt"))?;
    let (manifest, samples) = load_dataset(&args.manifest, &config)?;
    if manifest.classes.len() != meta.classes {
        return Err(Error::Config(format!(
            "GAN was trained over {} classes, manifest lists {}",
            meta.classes,
            manifest.classes.len()
        )));
    }
    let neutral = resolve_neutral_name(&config, &manifest)?;
    let labels: Vec<usize> = (0..meta.classes).filter(|&c| c != neutral).collect();
    let images_dir = args.out.join("images");
    ensure_dir(&images_dir)?;
    let synth_seed = sub_seed(config.seed, "gan.synth");
    let mut fragment = Vec::new();
    for (j, sample) in samples.iter().filter(|s| s.label == neutral).enumerate() {
        let generated = mfpnet::cgan::synthesize_expressions(
            &generator,
            &sample.aligned.image,
            &labels,
            synth_seed.wrapping_add(j as u64),
        )?;
        for (image, label) in generated {
            let name = format!(
                "gen_{}_{}_f{}_{}.png",
                sample.subject, sample.sequence, sample.frame, meta.class_names[label]
            );
            save_image(&image, &images_dir.join(&name))?;
            fragment.push(GeneratedRecord {
                image: format!("images/{name}"),
                source_subject: sample.subject.clone(),
                label: meta.class_names[label].clone(),
                provenance: "cgan",
            });
        }
    }
    if fragment.is_empty() {
        return Err(Error::Config("manifest has no neutral samples to generate from".to_string()));
    }
    write_json(&args.out.join("generated.json"), &fragment)?;
    println!("synthesized {} images to {}", fragment.len(), images_dir.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (manifest, samples) = load_dataset(&args.manifest, &config)?;
    if config.model.classes != manifest.classes.len() {
        return Err(Error::Config(format!(
            "model is configured for {} classes but the manifest lists {}; pass --classes",
            config.model.classes,
            manifest.classes.len()
        )));
    }
    let refs: Vec<&AlignedSample> = samples.iter().collect();
    let (pool, seeds) = augment_pool(&refs, &manifest, &config)?;
    let flat: Vec<_> = pool.into_iter().map(|(p, l, _)| (p, l)).collect();
    let mut model = MfpModel::new(config.model.clone(), sub_seed(config.seed, "init"))?;
    let losses = train_classifier(
        &mut model,
        &flat,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        sub_seed(config.seed, "shuffle"),
        sub_seed(config.seed, "dropout"),
    )?;
    save_model_dir(&model, &args.out)?;
    write_json(&args.out.join("config.json"), &config)?;
    write_json(&args.out.join("seeds.json"), &seeds)?;
    let mut curve = String::from("epoch,mean_loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        curve.push_str(&format!("{epoch},{loss}\n"));
    }
    write_text(&args.out.join("losses.csv"), &curve)?;
    println!(
        "trained {} epochs on {} samples; final mean loss {}",
        losses.len(),
        flat.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut config = args.config.resolve()?;
    let model = load_model_dir(&args.model)?;
    // The model dictates the patch size; the extraction must match it.
    config.extraction.patch_size = model.config().patch_size;
    let (manifest, samples) = load_dataset(&args.manifest, &config)?;
    let refs: Vec<&AlignedSample> = samples.iter().collect();
    let (matrix, accuracy) = evaluate(&model, &refs, &manifest.classes)?;
    println!("accuracy {} over {} samples", accuracy, refs.len());
    if let Some(out) = args.out {
        ensure_dir(&out)?;
        write_text(&out.join("confusion.csv"), &matrix.to_csv())?;
        write_json(
            &out.join("metrics.json"),
            &serde_json::json!({ "accuracy": accuracy, "samples": refs.len() }),
        )?;
        write_json(&out.join("config.json"), &config)?;
    }
    Ok(())
}

fn cmd_cross_eval(args: CrossEvalArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let manifest = load_manifest(&args.manifest)?;
    let outcome = run_experiment(&config, &manifest, Some(&args.out))?;
    write_json(&args.out.join("config.json"), &config)?;
    for fold in &outcome.folds {
        println!("fold {} accuracy {}", fold.fold, fold.accuracy);
    }
    println!("mean accuracy {} over {} folds", outcome.mean_accuracy, outcome.folds.len());
    Ok(())
}

fn cmd_fine_tune(args: FineTuneArgs) -> Result<()> {
    let mut config = args.config.resolve()?;
    let mut model = load_model_dir(&args.model)?;
    config.extraction.patch_size = model.config().patch_size;
    let manifest = load_manifest(&args.manifest)?;
    let report = fine_tune(
        &mut model,
        &manifest,
        &config.extraction,
        args.fraction,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.seed,
    )?;
    save_model_dir(&model, &args.out)?;
    write_json(&args.out.join("config.json"), &config)?;
    write_json(
        &args.out.join("fine_tune.json"),
        &serde_json::json!({
            "pre_accuracy": report.pre_accuracy,
            "post_accuracy": report.post_accuracy,
            "tune_subjects": report.tune_subjects,
            "test_subjects": report.test_subjects,
            "epoch_losses": report.epoch_losses,
        }),
    )?;
    write_text(&args.out.join("confusion_pre.csv"), &report.pre_matrix.to_csv())?;
    write_text(&args.out.join("confusion_post.csv"), &report.post_matrix.to_csv())?;
    println!("accuracy before {} after {}", report.pre_accuracy, report.post_accuracy);
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.confusion).map_err(|e| Error::io(&args.confusion, e))?;
    let matrix = plot::parse_confusion_csv(&text)?;
    let svg = plot::confusion_heatmap(&matrix);
    ensure_dir(&args.out)?;
    let stem = args
        .confusion
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("confusion");
    let path = args.out.join(format!("{stem}.svg"));
    write_text(&path, &svg)?;
    println!("wrote {}", path.display());
    Ok(())
}
