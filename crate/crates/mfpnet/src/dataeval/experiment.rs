//! Cross-validation experiments with leakage-free augmentation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{default_plan, expand_dataset, fit_region_zca, PlanStep};
use crate::cgan::{synthesize_expressions, train_cgan, CganConfig};
use crate::dataeval::manifest::Manifest;
use crate::dataeval::protocol::{
    evaluate, load_samples, make_subject_folds, AlignedSample, ConfusionMatrix, PatchExtraction,
};
use crate::error::{Error, Result};
use crate::facegeom::{extract_patches, FaceImage, PatchSet};
use crate::model::{MfpModel, ModelConfig};
use crate::numcore::RmsProp;

/// Derives an independent seed for one named consumer of randomness.
///
/// The role name is hashed (FNV-1a) and folded into the experiment
/// seed, so "dropout.fold3" and "init.fold3" never share a stream and
/// the same experiment seed reproduces every draw.
pub fn sub_seed(seed: u64, role: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed
}

/// Which augmentation the training folds receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Cgan,
    Tf,
    Both,
}

impl Augmentation {
    pub fn uses_tf(self) -> bool {
        matches!(self, Augmentation::Tf | Augmentation::Both)
    }

    pub fn uses_cgan(self) -> bool {
        matches!(self, Augmentation::Cgan | Augmentation::Both)
    }
}

impl std::fmt::Display for Augmentation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Augmentation::None => "none",
            Augmentation::Cgan => "cgan",
            Augmentation::Tf => "tf",
            Augmentation::Both => "both",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Augmentation::None),
            "cgan" => Ok(Augmentation::Cgan),
            "tf" => Ok(Augmentation::Tf),
            "both" | "cgan+tf" | "tf+cgan" => Ok(Augmentation::Both),
            other => Err(Error::Config(format!(
                "unknown augmentation {other:?}; expected none, cgan, tf, or both"
            ))),
        }
    }
}

/// Everything a cross-validation run needs besides the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub augmentation: Augmentation,
    pub model: ModelConfig,
    pub extraction: PatchExtraction,
    pub folds: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Transformation plan applied when `augmentation` includes tf.
    pub tf_plan: Vec<PlanStep>,
    pub zca_epsilon: f64,
    /// GAN hyper-parameters; its seed field is ignored in favor of a
    /// per-fold sub-seed.
    pub gan: CganConfig,
    pub gan_steps: usize,
    /// Class treated as neutral for GAN conditioning; found by the
    /// case-insensitive name "neutral" when unset.
    pub neutral_class: Option<String>,
    pub fine_tune_fraction: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            augmentation: Augmentation::None,
            model: ModelConfig::default(),
            extraction: PatchExtraction::default(),
            folds: 10,
            seed: 0,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            tf_plan: default_plan(),
            zca_epsilon: 1e-8,
            gan: CganConfig::default(),
            gan_steps: 200,
            neutral_class: None,
            fine_tune_fraction: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.zca_epsilon > 0.0 && self.zca_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "zca epsilon must be positive, got {}",
                self.zca_epsilon
            )));
        }
        if self.augmentation.uses_tf() && self.tf_plan.is_empty() {
            return Err(Error::Config("tf augmentation needs a non-empty plan".to_string()));
        }
        if let Some(f) = self.fine_tune_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "fine-tune fraction must be inside (0, 1), got {f}"
                )));
            }
        }
        self.model.validate()?;
        self.gan.validate()
    }
}

/// One fold's results.
#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
    pub epoch_losses: Vec<f64>,
}

/// Seed bookkeeping and leakage evidence for one fold, written to the
/// provenance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldProvenance {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
    /// Subjects whose samples fed augmentation fitting (ZCA statistics,
    /// GAN training) or expansion; empty without augmentation.
    pub augment_subjects: Vec<String>,
    pub original_train_size: usize,
    pub augmented_train_size: usize,
    pub test_size: usize,
    /// SHA-256 over the test samples (subject, label, patch pixels), so
    /// runs can prove their test sets identical.
    pub test_digest: String,
    pub accuracy: f64,
}

/// The full reproducibility record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: ExperimentConfig,
    pub classes: Vec<String>,
    pub sub_seeds: BTreeMap<String, u64>,
    pub folds: Vec<FoldProvenance>,
}

/// Per-fold and aggregate results of a cross-validation run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub folds: Vec<FoldReport>,
    /// Unweighted mean of the fold accuracies.
    pub mean_accuracy: f64,
    /// Sum of the fold confusion matrices.
    pub aggregate: ConfusionMatrix,
    pub provenance: Provenance,
}

fn record_seed(map: &mut BTreeMap<String, u64>, seed: u64, role: String) -> u64 {
    let value = sub_seed(seed, &role);
    map.insert(role, value);
    value
}

/// Trains the classifier over shuffled mini-batches, returning the mean
/// loss of each epoch. Zero epochs leave the model untouched.
pub fn train_classifier(
    model: &mut MfpModel,
    pool: &[(PatchSet, usize)],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    shuffle_seed: u64,
    dropout_seed: u64,
) -> Result<Vec<f64>> {
    if pool.is_empty() {
        return Err(Error::Config("training pool is empty".to_string()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".to_string()));
    }
    let mut opt = RmsProp::new(learning_rate)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&PatchSet, usize)> =
                chunk.iter().map(|&i| (&pool[i].0, pool[i].1)).collect();
            sum += model.train_step(&batch, &mut opt, &mut dropout_rng)?;
            batches += 1;
        }
        losses.push(sum / batches as f64);
    }
    Ok(losses)
}

fn digest_samples(samples: &[&AlignedSample]) -> String {
    let mut hasher = Sha256::new();
    for s in samples {
        hasher.update(s.subject.as_bytes());
        hasher.update([0]);
        hasher.update((s.label as u64).to_le_bytes());
        for patch in s.patches.patches() {
            for &v in patch.pixels() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve_neutral(config: &ExperimentConfig, manifest: &Manifest) -> Result<usize> {
    match &config.neutral_class {
        Some(name) => manifest.class_index(name).ok_or_else(|| {
            Error::Config(format!("neutral class {name:?} is not in the class list"))
        }),
        None => manifest
            .classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case("neutral"))
            .ok_or_else(|| {
                Error::Config(
                    "cgan augmentation needs a neutral class; none named \"neutral\" found and none configured"
                        .to_string(),
                )
            }),
    }
}

/// Builds (neutral, expression) pairs for GAN training. An expression
/// frame pairs with the earliest neutral frame of its own sequence, or
/// failing that the subject's earliest neutral frame; expression frames
/// of subjects with no neutral sample are skipped.
pub fn neutral_expression_pairs<'a>(
    train: &[&'a AlignedSample],
    neutral: usize,
) -> Vec<(&'a AlignedSample, &'a AlignedSample)> {
    let mut by_sequence: HashMap<(&str, &str), &AlignedSample> = HashMap::new();
    let mut by_subject: HashMap<&str, &AlignedSample> = HashMap::new();
    for s in train.iter().filter(|s| s.label == neutral) {
        let seq_key = (s.subject.as_str(), s.sequence.as_str());
        let better = |old: &&AlignedSample| {
            (s.sequence.as_str(), s.frame) < (old.sequence.as_str(), old.frame)
        };
        match by_sequence.get(&seq_key) {
            Some(old) if s.frame >= old.frame => {}
            _ => {
                by_sequence.insert(seq_key, s);
            }
        }
        match by_subject.get(s.subject.as_str()) {
            Some(old) if !better(old) => {}
            _ => {
                by_subject.insert(s.subject.as_str(), s);
            }
        }
    }
    train
        .iter()
        .filter(|s| s.label != neutral)
        .filter_map(|s| {
            by_sequence
                .get(&(s.subject.as_str(), s.sequence.as_str()))
                .or_else(|| by_subject.get(s.subject.as_str()))
                .map(|n| (*n, *s))
        })
        .collect()
}

/// GAN half of the augmentation: trains a conditional generator on the
/// training pairs, then synthesizes every non-neutral expression from
/// each distinct neutral face. Patches are cut from the synthesized
/// images with the source face's landmarks.
fn cgan_augment(
    train: &[&AlignedSample],
    classes: usize,
    neutral: usize,
    config: &ExperimentConfig,
    gan_seed: u64,
    synth_seed: u64,
) -> Result<Vec<(PatchSet, usize, String)>> {
    let pairs = neutral_expression_pairs(train, neutral);
    if pairs.is_empty() {
        return Err(Error::Config(
            "cgan augmentation found no neutral/expression pairs in the training folds".to_string(),
        ));
    }
    let dataset: Vec<(FaceImage, FaceImage, usize)> = pairs
        .iter()
        .map(|(n, e)| (n.aligned.image.clone(), e.aligned.image.clone(), e.label))
        .collect();
    let gan_config = CganConfig { seed: gan_seed, ..config.gan.clone() };
    let trained = train_cgan(&dataset, &gan_config, config.gan_steps)?;

    let mut sources: Vec<&AlignedSample> = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, _) in &pairs {
        if seen.insert((n.subject.clone(), n.sequence.clone(), n.frame)) {
            sources.push(n);
        }
    }
    sources.sort_by(|a, b| {
        (&a.subject, &a.sequence, a.frame).cmp(&(&b.subject, &b.sequence, b.frame))
    });
    let labels: Vec<usize> = (0..classes).filter(|&c| c != neutral).collect();
    let mut out = Vec::with_capacity(sources.len() * labels.len());
    for (j, source) in sources.iter().enumerate() {
        let generated = synthesize_expressions(
            &trained.generator,
            &source.aligned.image,
            &labels,
            synth_seed.wrapping_add(j as u64),
        )?;
        for (image, label) in generated {
            let patches = extract_patches(
                &image,
                &source.aligned.landmarks,
                config.extraction.patch_size,
                config.extraction.margin,
            )?;
            out.push((patches, label, source.subject.clone()));
        }
    }
    Ok(out)
}

/// Training pool for one fold: originals plus the configured
/// augmentation, each entry tagged with its source subject.
fn build_training_pool(
    train: &[&AlignedSample],
    classes: usize,
    config: &ExperimentConfig,
    fold: usize,
    seeds: &mut BTreeMap<String, u64>,
    neutral: Option<usize>,
) -> Result<Vec<(PatchSet, usize, String)>> {
    let originals: Vec<(PatchSet, usize)> =
        train.iter().map(|s| (s.patches.clone(), s.label)).collect();
    let mut pool: Vec<(PatchSet, usize, String)>;
    if config.augmentation.uses_tf() {
        let zca = if config.tf_plan.iter().any(|s| s.needs_zca()) {
            let refs: Vec<&PatchSet> = train.iter().map(|s| &s.patches).collect();
            Some(fit_region_zca(&refs, config.zca_epsilon)?)
        } else {
            None
        };
        let tf_seed = record_seed(seeds, config.seed, format!("tf.fold{fold}"));
        let expanded = expand_dataset(&originals, &config.tf_plan, zca.as_deref(), tf_seed)?;
        // Expansion emits the originals first and then one block per
        // plan step, each in source order, so index modulo the source
        // count recovers the subject.
        pool = expanded
            .into_iter()
            .enumerate()
            .map(|(i, (patches, label))| (patches, label, train[i % train.len()].subject.clone()))
            .collect();
    } else {
        pool = originals
            .into_iter()
            .zip(train)
            .map(|((patches, label), s)| (patches, label, s.subject.clone()))
            .collect();
    }
    if config.augmentation.uses_cgan() {
        let gan_seed = record_seed(seeds, config.seed, format!("gan.fold{fold}"));
        let synth_seed = record_seed(seeds, config.seed, format!("gan.synth.fold{fold}"));
        let neutral = neutral.expect("neutral class resolved before any cgan fold");
        pool.extend(cgan_augment(train, classes, neutral, config, gan_seed, synth_seed)?);
    }
    Ok(pool)
}

/// Augments a standalone training set exactly as [`run_experiment`]
/// would augment one fold's training side, tagging each sample with its
/// source subject. Returns the pool and the sub-seeds that were drawn.
pub fn augment_pool(
    samples: &[&AlignedSample],
    manifest: &Manifest,
    config: &ExperimentConfig,
) -> Result<(Vec<(PatchSet, usize, String)>, BTreeMap<String, u64>)> {
    let neutral = if config.augmentation.uses_cgan() {
        Some(resolve_neutral(config, manifest)?)
    } else {
        None
    };
    let mut seeds = BTreeMap::new();
    let pool =
        build_training_pool(samples, manifest.classes.len(), config, 0, &mut seeds, neutral)?;
    Ok((pool, seeds))
}

fn run_fold(
    fold: usize,
    test: &[&AlignedSample],
    train: &[&AlignedSample],
    classes: &[String],
    config: &ExperimentConfig,
    seeds: &mut BTreeMap<String, u64>,
    neutral: Option<usize>,
) -> Result<(FoldReport, FoldProvenance)> {
    if test.is_empty() {
        return Err(Error::Config("no test samples; every fold needs at least one".to_string()));
    }
    if train.is_empty() {
        return Err(Error::Config("no training samples left outside the test fold".to_string()));
    }
    let test_digest = digest_samples(test);
    let pool = build_training_pool(train, classes.len(), config, fold, seeds, neutral)?;

    let init_seed = record_seed(seeds, config.seed, format!("init.fold{fold}"));
    let shuffle_seed = record_seed(seeds, config.seed, format!("shuffle.fold{fold}"));
    let dropout_seed = record_seed(seeds, config.seed, format!("dropout.fold{fold}"));
    let mut model = MfpModel::new(config.model.clone(), init_seed)?;
    let flat: Vec<(PatchSet, usize)> = pool.iter().map(|(p, l, _)| (p.clone(), *l)).collect();
    let epoch_losses = train_classifier(
        &mut model,
        &flat,
        config.epochs,
        config.batch_size,
        config.learning_rate,
        shuffle_seed,
        dropout_seed,
    )?;
    let (matrix, accuracy) = evaluate(&model, test, classes)?;

    let subject_set = |items: &[&AlignedSample]| -> Vec<String> {
        items.iter().map(|s| s.subject.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let augment_subjects = if config.augmentation == Augmentation::None {
        Vec::new()
    } else {
        pool.iter().map(|(_, _, s)| s.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let provenance = FoldProvenance {
        fold,
        test_subjects: subject_set(test),
        train_subjects: subject_set(train),
        augment_subjects,
        original_train_size: train.len(),
        augmented_train_size: pool.len(),
        test_size: test.len(),
        test_digest,
        accuracy,
    };
    Ok((FoldReport { fold, accuracy, matrix, epoch_losses }, provenance))
}

/// Runs subject-independent cross-validation: folds the subjects, then
/// per fold augments the training side as configured, trains a fresh
/// model, and evaluates on the held-out subjects. Augmentation and its
/// statistics only ever see training-fold data, so the test sets are
/// byte-identical across augmentation modes under one seed.
///
/// With `out_dir` set, writes `metrics.csv`, per-fold and aggregate
/// confusion CSVs, and `provenance.json` there.
pub fn run_experiment(
    config: &ExperimentConfig,
    manifest: &Manifest,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    manifest.validate(false)?;
    if config.model.classes != manifest.classes.len() {
        return Err(Error::Config(format!(
            "model is configured for {} classes but the manifest lists {}",
            config.model.classes,
            manifest.classes.len()
        )));
    }
    let neutral = if config.augmentation.uses_cgan() {
        Some(resolve_neutral(config, manifest)?)
    } else {
        None
    };
    let mut seeds = BTreeMap::new();
    let fold_seed = record_seed(&mut seeds, config.seed, "folds".to_string());
    let plan = make_subject_folds(manifest, config.folds, fold_seed)?;
    let samples = load_samples(manifest, &config.extraction)?;

    let mut folds = Vec::with_capacity(plan.k());
    let mut provenances = Vec::with_capacity(plan.k());
    let mut aggregate = ConfusionMatrix::new(manifest.classes.clone());
    for fold in 0..plan.k() {
        let (test, train): (Vec<&AlignedSample>, Vec<&AlignedSample>) =
            samples.iter().partition(|s| plan.fold_of(&s.subject) == Some(fold));
        let (report, provenance) =
            run_fold(fold, &test, &train, &manifest.classes, config, &mut seeds, neutral)
                .map_err(|e| Error::Config(format!("fold {fold}: {e}")))?;
        aggregate.add(&report.matrix)?;
        folds.push(report);
        provenances.push(provenance);
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    let outcome = ExperimentOutcome {
        folds,
        mean_accuracy,
        aggregate,
        provenance: Provenance {
            config: config.clone(),
            classes: manifest.classes.clone(),
            sub_seeds: seeds,
            folds: provenances,
        },
    };
    if let Some(dir) = out_dir {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let mut metrics = String::from("fold,accuracy\n");
    for f in &outcome.folds {
        metrics.push_str(&format!("{},{}\n", f.fold, f.accuracy));
    }
    metrics.push_str(&format!("mean,{}\n", outcome.mean_accuracy));
    write("metrics.csv".to_string(), metrics)?;
    for f in &outcome.folds {
        write(format!("confusion_fold{}.csv", f.fold), f.matrix.to_csv())?;
    }
    write("confusion_aggregate.csv".to_string(), outcome.aggregate.to_csv())?;
    let json = serde_json::to_string_pretty(&outcome.provenance)
        .map_err(|e| Error::Config(format!("provenance serialization failed: {e}")))?;
    write("provenance.json".to_string(), json + "\n")
}

/// Checks a provenance record for subject leakage: no fold may share a
/// subject between its test set and its training or augmentation sets,
/// and no subject may be tested in two folds.
pub fn audit_provenance(provenance: &Provenance) -> Result<()> {
    let mut problems = Vec::new();
    let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
    for fold in &provenance.folds {
        let test: BTreeSet<&str> = fold.test_subjects.iter().map(String::as_str).collect();
        for subject in fold.train_subjects.iter().filter(|s| test.contains(s.as_str())) {
            problems.push(format!("fold {}: subject {subject} is in test and training", fold.fold));
        }
        for subject in fold.augment_subjects.iter().filter(|s| test.contains(s.as_str())) {
            problems
                .push(format!("fold {}: subject {subject} leaked into augmentation", fold.fold));
        }
        for subject in &test {
            if let Some(previous) = tested.insert(subject, fold.fold) {
                problems.push(format!(
                    "subject {subject} tested in folds {previous} and {}",
                    fold.fold
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

/// Before/after picture of a fine-tuning run.
#[derive(Debug, Clone)]
pub struct FineTuneReport {
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    pub pre_matrix: ConfusionMatrix,
    pub post_matrix: ConfusionMatrix,
    pub tune_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub epoch_losses: Vec<f64>,
}

/// Continues training an already-trained model on a subject-disjoint
/// fraction of `manifest` and reports accuracy on the remainder before
/// and after. Zero epochs leave the model, and so the accuracy,
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    model: &mut MfpModel,
    manifest: &Manifest,
    extraction: &PatchExtraction,
    fraction: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<FineTuneReport> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("fraction must be inside (0, 1), got {fraction}")));
    }
    manifest.validate(false)?;
    if model.config().classes != manifest.classes.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the manifest lists {}",
            model.config().classes,
            manifest.classes.len()
        )));
    }
    let mut subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(Error::Config(
            "fine-tuning needs at least 2 subjects for a disjoint split".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "finetune.split"));
    subjects.shuffle(&mut rng);
    let n_tune = ((fraction * subjects.len() as f64).round() as usize)
        .clamp(1, subjects.len() - 1);
    let tune_subjects: BTreeSet<String> = subjects[..n_tune].iter().cloned().collect();
    let samples = load_samples(manifest, extraction)?;
    let (tune, test): (Vec<&AlignedSample>, Vec<&AlignedSample>) =
        samples.iter().partition(|s| tune_subjects.contains(&s.subject));
    if tune.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "degenerate split: one side of the fine-tune partition has no samples".to_string(),
        ));
    }
    let (pre_matrix, pre_accuracy) = evaluate(model, &test, &manifest.classes)?;
    let pool: Vec<(PatchSet, usize)> = tune.iter().map(|s| (s.patches.clone(), s.label)).collect();
    let epoch_losses = if epochs == 0 {
        Vec::new()
    } else {
        train_classifier(
            model,
            &pool,
            epochs,
            batch_size,
            learning_rate,
            sub_seed(seed, "finetune.shuffle"),
            sub_seed(seed, "finetune.dropout"),
        )?
    };
    let (post_matrix, post_accuracy) = evaluate(model, &test, &manifest.classes)?;
    let test_subjects = subjects[n_tune..].to_vec();
    Ok(FineTuneReport {
        pre_accuracy,
        post_accuracy,
        pre_matrix,
        post_matrix,
        tune_subjects: tune_subjects.into_iter().collect(),
        test_subjects,
        epoch_losses,
    })
}
