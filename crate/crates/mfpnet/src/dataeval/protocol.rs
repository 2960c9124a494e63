//! Subject-disjoint folds, sample loading, and evaluation metrics.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataeval::manifest::{Manifest, SampleRecord};
use crate::error::{Error, Result};
use crate::facegeom::{align, extract_patches, load_image, load_landmarks, AlignSpec, Aligned, PatchSet};
use crate::model::MfpModel;
use crate::par;

/// Subjects dealt into `k` disjoint folds.
///
/// Splitting by subject rather than by sample keeps every person's
/// images on one side of each train/test divide, which is what makes
/// the evaluation subject-independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    seed: u64,
    folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Subject ids of each fold.
    pub fn folds(&self) -> &[Vec<String>] {
        &self.folds
    }

    /// Which fold holds `subject`.
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|s| s == subject))
    }
}

/// Shuffles the distinct subjects of `manifest` by `seed` and deals them
/// round-robin into `k` folds, so fold sizes differ by at most one
/// subject. Deterministic for a given manifest and seed.
pub fn make_subject_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::Config("fold count must be at least 1".to_string()));
    }
    let mut subjects = manifest.subjects();
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} distinct subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, subject) in subjects.into_iter().enumerate() {
        folds[i % k].push(subject);
    }
    Ok(FoldPlan { seed, folds })
}

/// How a manifest record becomes model input: alignment geometry plus
/// the patch crop parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchExtraction {
    pub align: AlignSpec,
    pub patch_size: usize,
    /// Extra margin around each region's landmark box, as a fraction of
    /// the box size per side.
    pub margin: f64,
}

impl Default for PatchExtraction {
    fn default() -> Self {
        PatchExtraction { align: AlignSpec::default(), patch_size: 36, margin: 0.25 }
    }
}

/// A sample ready for training: aligned face, aligned landmarks, and
/// the seven patches, with the label resolved to a class index.
#[derive(Debug, Clone)]
pub struct AlignedSample {
    pub subject: String,
    pub sequence: String,
    pub frame: u32,
    pub label: usize,
    pub aligned: Aligned,
    pub patches: PatchSet,
}

fn load_one(record: &SampleRecord, extraction: &PatchExtraction, label: usize) -> Result<AlignedSample> {
    let image = load_image(&record.image)?;
    let landmarks = load_landmarks(&record.landmarks)?;
    let aligned = align(&image, &landmarks, &extraction.align)?;
    let patches =
        extract_patches(&aligned.image, &aligned.landmarks, extraction.patch_size, extraction.margin)?;
    Ok(AlignedSample {
        subject: record.subject.clone(),
        sequence: record.sequence.clone(),
        frame: record.frame,
        label,
        aligned,
        patches,
    })
}

/// Loads every manifest sample into memory: image, landmarks, alignment,
/// patches. Requires resolved labels; run a labeling policy first.
pub fn load_samples(manifest: &Manifest, extraction: &PatchExtraction) -> Result<Vec<AlignedSample>> {
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let name = record.label.as_deref().ok_or_else(|| {
            Error::Config(format!(
                "sample (subject {:?}, sequence {:?}, frame {}) has no resolved label; apply a labeling policy first",
                record.subject, record.sequence, record.frame
            ))
        })?;
        let label = manifest.class_index(name).ok_or_else(|| {
            Error::Config(format!("label {name:?} is not in the manifest class list"))
        })?;
        labels.push(label);
    }
    par::map_indexed(manifest.samples.len(), true, |i| {
        load_one(&manifest.samples[i], extraction, labels[i])
    })
    .into_iter()
    .collect()
}

/// Prediction counts, rows indexed by true class and columns by
/// predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix { classes, counts: vec![0; k * k] }
    }

    /// Rebuilds a matrix from row-major counts, as when reading one
    /// back from CSV.
    pub fn from_counts(classes: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes.len() * classes.len() {
            return Err(Error::Shape(format!(
                "{} classes need {} counts, got {}",
                classes.len(),
                classes.len() * classes.len(),
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        let k = self.classes.len();
        assert!(true_class < k && predicted < k, "class index out of range");
        self.counts[true_class * k + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes.len() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Samples of `true_class`, however they were predicted.
    pub fn row_total(&self, true_class: usize) -> u64 {
        let k = self.classes.len();
        self.counts[true_class * k..(true_class + 1) * k].iter().sum()
    }

    /// Correct predictions over total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let k = self.classes.len();
        let trace: u64 = (0..k).map(|i| self.counts[i * k + i]).sum();
        trace as f64 / total as f64
    }

    /// Adds another matrix over the same class list into this one.
    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Config("cannot add confusion matrices over different classes".to_string()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV with a class-name header row and leading class-name column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for c in &self.classes {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        let k = self.classes.len();
        for (t, c) in self.classes.iter().enumerate() {
            write!(out, "{c}").unwrap();
            for p in 0..k {
                write!(out, ",{}", self.counts[t * k + p]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the model over `samples` and tallies predictions against true
/// labels. The model's class count must match `classes`.
pub fn evaluate(
    model: &MfpModel,
    samples: &[&AlignedSample],
    classes: &[String],
) -> Result<(ConfusionMatrix, f64)> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation needs at least one sample".to_string()));
    }
    if model.config().classes != classes.len() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.config().classes,
            classes.len()
        )));
    }
    let mut matrix = ConfusionMatrix::new(classes.to_vec());
    for sample in samples {
        if sample.label >= classes.len() {
            return Err(Error::Config(format!(
                "sample label index {} outside the {} classes",
                sample.label,
                classes.len()
            )));
        }
        let predicted = model.predict(&sample.patches)?;
        matrix.record(sample.label, predicted);
    }
    let accuracy = matrix.accuracy();
    Ok((matrix, accuracy))
}
