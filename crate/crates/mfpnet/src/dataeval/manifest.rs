//! Manifest records, their JSON format, and sequence frame labeling.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One face image: where it is, whose face it shows, and where it sits
/// in its expression sequence. `label` stays empty until a labeling
/// policy resolves it (or the manifest author set it directly).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    pub subject: String,
    pub sequence: String,
    pub frame: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// A class list plus sample records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    /// Index of `name` in the class list.
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .samples
            .iter()
            .map(|s| s.subject.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        ids.dedup();
        ids
    }

    /// Checks internal consistency, collecting every problem rather than
    /// stopping at the first. `check_files` additionally requires the
    /// referenced image and landmark files to exist.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes.is_empty() {
            problems.push("class list is empty".to_string());
        }
        let mut seen_class = HashSet::new();
        for c in &self.classes {
            if !seen_class.insert(c.as_str()) {
                problems.push(format!("class {c:?} listed twice"));
            }
        }
        let mut seen_key = HashSet::new();
        for s in &self.samples {
            let key = (s.subject.as_str(), s.sequence.as_str(), s.frame);
            if !seen_key.insert(key) {
                problems.push(format!(
                    "duplicate sample (subject {:?}, sequence {:?}, frame {})",
                    s.subject, s.sequence, s.frame
                ));
            }
            for label in [&s.sequence_label, &s.label].into_iter().flatten() {
                if !seen_class.contains(label.as_str()) {
                    problems.push(format!(
                        "unknown label {label:?} on (subject {:?}, sequence {:?}, frame {}); allowed: {}",
                        s.subject,
                        s.sequence,
                        s.frame,
                        self.classes.join(", ")
                    ));
                }
            }
            if check_files {
                for path in [&s.image, &s.landmarks] {
                    if !path.is_file() {
                        problems.push(format!("missing file {}", path.display()));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Loads and validates a manifest. Relative sample paths are resolved
/// against the manifest's own directory, so a manifest can travel with
/// its data.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for s in &mut manifest.samples {
        for p in [&mut s.image, &mut s.landmarks] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    manifest.validate(true)?;
    Ok(manifest)
}

/// Writes a manifest as pretty-printed JSON. Paths are written as given;
/// keep them relative if the manifest should be movable.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// How the frames of a neutral-to-peak expression sequence get labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelingPolicy {
    /// The first `neutral` frames are the neutral class and the last
    /// `expression` frames are the sequence's expression; everything in
    /// between is ambiguous and dropped.
    Prefix { neutral: usize, expression: usize },
    /// Frames before `first_expression` are neutral, the rest are the
    /// expression; nothing is dropped.
    FromFrame { first_expression: u32 },
}

impl Default for LabelingPolicy {
    fn default() -> Self {
        LabelingPolicy::Prefix { neutral: 7, expression: 3 }
    }
}

/// Resolves per-frame labels for one sequence.
///
/// `records` must all belong to the same sequence, carry the same
/// expression label, and be sorted by frame index. Returns the labeled
/// records; under the prefix policy the ambiguous middle frames are
/// omitted from the result.
pub fn label_sequence_frames(
    records: &[SampleRecord],
    policy: &LabelingPolicy,
    neutral_class: &str,
) -> Result<Vec<SampleRecord>> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("cannot label an empty sequence".to_string()))?;
    let expression = first.sequence_label.clone().ok_or_else(|| {
        Error::Config(format!("sequence {:?} has no expression label", first.sequence))
    })?;
    for pair in records.windows(2) {
        if pair[1].sequence != pair[0].sequence || pair[1].subject != pair[0].subject {
            return Err(Error::Config(format!(
                "records mix sequences {:?} and {:?}",
                pair[0].sequence, pair[1].sequence
            )));
        }
        if pair[1].frame <= pair[0].frame {
            return Err(Error::Config(format!(
                "sequence {:?} is not sorted by frame index",
                first.sequence
            )));
        }
    }
    if records.iter().any(|r| r.sequence_label.as_deref() != Some(expression.as_str())) {
        return Err(Error::Config(format!(
            "sequence {:?} carries conflicting expression labels",
            first.sequence
        )));
    }
    let with_label = |r: &SampleRecord, label: &str| {
        let mut out = r.clone();
        out.label = Some(label.to_string());
        out
    };
    match *policy {
        LabelingPolicy::Prefix { neutral, expression: peak } => {
            if records.len() < neutral + peak {
                return Err(Error::Config(format!(
                    "sequence {:?} has {} frames, needs at least {} for prefix labeling",
                    first.sequence,
                    records.len(),
                    neutral + peak
                )));
            }
            let mut out = Vec::with_capacity(neutral + peak);
            out.extend(records[..neutral].iter().map(|r| with_label(r, neutral_class)));
            out.extend(
                records[records.len() - peak..].iter().map(|r| with_label(r, &expression)),
            );
            Ok(out)
        }
        LabelingPolicy::FromFrame { first_expression } => Ok(records
            .iter()
            .map(|r| {
                if r.frame < first_expression {
                    with_label(r, neutral_class)
                } else {
                    with_label(r, &expression)
                }
            })
            .collect()),
    }
}

/// Applies a labeling policy to every sequence of a manifest.
///
/// Sequences keep their first-appearance order; within a sequence the
/// records are sorted by frame before labeling.
pub fn label_manifest(
    manifest: &Manifest,
    policy: &LabelingPolicy,
    neutral_class: &str,
) -> Result<Manifest> {
    if manifest.class_index(neutral_class).is_none() {
        return Err(Error::Config(format!(
            "neutral class {neutral_class:?} is not in the class list"
        )));
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: std::collections::HashMap<(String, String), Vec<SampleRecord>> =
        std::collections::HashMap::new();
    for s in &manifest.samples {
        let key = (s.subject.clone(), s.sequence.clone());
        groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Vec::new()
        });
        groups.get_mut(&key).unwrap().push(s.clone());
    }
    let mut samples = Vec::new();
    for key in &order {
        let mut records = groups.remove(key).unwrap();
        records.sort_by_key(|r| r.frame);
        samples.extend(label_sequence_frames(&records, policy, neutral_class)?);
    }
    let out = Manifest { classes: manifest.classes.clone(), samples };
    out.validate(false)?;
    Ok(out)
}
