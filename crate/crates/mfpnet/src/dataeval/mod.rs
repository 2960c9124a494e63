//! Dataset manifests, frame labeling, subject-independent folds, and the
//! cross-validation experiment harness.
//!
//! A manifest is a JSON file naming face images, their landmark files,
//! and who appears in them. Frames of an expression sequence get labels
//! through a [`LabelingPolicy`], subjects are dealt into disjoint folds,
//! and [`run_experiment`] trains and evaluates the classifier once per
//! fold with the configured augmentation applied to training data only.
//! Every random choice flows from one seed through named sub-seeds that
//! are logged in the output provenance, and [`audit_provenance`] checks
//! the logs for test-subject leakage after the fact.
//!
//! Real expression corpora are distributed under restrictive licenses,
//! so none ship with the crate; [`synth_dataset`] writes a procedural
//! stand-in with the same manifest shape for tests and demos.

mod experiment;
mod manifest;
mod protocol;
mod synth;

pub use experiment::{
    audit_provenance, augment_pool, fine_tune, neutral_expression_pairs, run_experiment, sub_seed,
    train_classifier, Augmentation, ExperimentConfig, ExperimentOutcome, FineTuneReport,
    FoldProvenance, FoldReport, Provenance,
};
pub use manifest::{
    label_manifest, label_sequence_frames, load_manifest, save_manifest, LabelingPolicy, Manifest,
    SampleRecord,
};
pub use protocol::{
    evaluate, load_samples, make_subject_folds, AlignedSample, ConfusionMatrix, FoldPlan,
    PatchExtraction,
};
pub use synth::{synth_dataset, synth_face, SynthSpec};
