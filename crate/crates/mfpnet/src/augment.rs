//! Label-preserving patch transformations and dataset expansion.
//!
//! Five transformation functions: quarter and half turns, zero-fill
//! translation, circular shift, and ZCA whitening. An expansion plan
//! applies a list of them to every training sample, multiplying the
//! dataset size by one plus the plan length without touching labels.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::facegeom::{FaceImage, PatchSet};
use crate::par;

/// A concrete patch transformation. Translation offsets are in pixels;
/// positive `dx` moves content right, positive `dy` moves it down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformationFunction {
    Rotate90,
    Rotate180,
    Translate(i64, i64),
    CircularShift(i64, i64),
    ZcaWhiten,
}

/// Fitted ZCA whitening statistics for flattened patches of one size.
#[derive(Debug, Clone)]
pub struct ZcaStatistics {
    dim: usize,
    mean: Vec<f64>,
    /// Row-major `dim` x `dim` whitening matrix, symmetric.
    w: Vec<f64>,
}

impl ZcaStatistics {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    /// `W (x - mean)` without any renormalization.
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "whitening expects {} values, got {}",
                self.dim,
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut out = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w[i * self.dim..(i + 1) * self.dim];
            *o = row.iter().zip(&centered).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }
}

/// Fits whitening statistics on flattened patches. All patches must
/// share one size and there must be at least two. The covariance is
/// normalized by the sample count; eigenvalues are clamped at zero
/// before the `1/sqrt(lambda + epsilon)` rescale.
pub fn fit_zca(patches: &[&FaceImage], epsilon: f64) -> Result<ZcaStatistics> {
    if patches.len() < 2 {
        return Err(Error::Config(format!(
            "ZCA fitting needs at least 2 patches, got {}",
            patches.len()
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("ZCA epsilon must be positive, got {epsilon}")));
    }
    let (w0, h0) = (patches[0].width(), patches[0].height());
    for p in patches {
        if p.width() != w0 || p.height() != h0 {
            return Err(Error::Shape(format!(
                "ZCA fitting needs uniform patch sizes, saw {}x{} and {}x{}",
                w0,
                h0,
                p.width(),
                p.height()
            )));
        }
    }
    let d = w0 * h0;
    let n = patches.len() as f64;
    let mut mean = vec![0.0; d];
    for p in patches {
        for (m, v) in mean.iter_mut().zip(p.pixels()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for p in patches {
        let centered: Vec<f64> = p.pixels().iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for (j, r) in row.iter_mut().enumerate() {
                *r += ci * centered[j];
            }
        }
    }
    for c in &mut cov {
        *c /= n;
    }
    let eig = DMatrix::from_row_slice(d, d, &cov).symmetric_eigen();
    let scales: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| 1.0 / (l.max(0.0) + epsilon).sqrt())
        .collect();
    // w[i][j] and w[j][i] sum identical products in the same order, so
    // the result is bit-exactly symmetric.
    let u = &eig.eigenvectors;
    let mut w = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            w[i * d + j] = (0..d).map(|k| u[(i, k)] * scales[k] * u[(j, k)]).sum();
        }
    }
    Ok(ZcaStatistics { dim: d, mean, w })
}

fn rotate90(img: &FaceImage) -> FaceImage {
    let (w, h) = (img.width(), img.height());
    let mut out = FaceImage::new(h, w);
    for y in 0..w {
        for x in 0..h {
            out.set(x, y, img.get(w - 1 - y, x));
        }
    }
    out
}

fn rotate180(img: &FaceImage) -> FaceImage {
    let (w, h) = (img.width(), img.height());
    let mut out = FaceImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(w - 1 - x, h - 1 - y));
        }
    }
    out
}

fn translate(img: &FaceImage, dx: i64, dy: i64) -> FaceImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = FaceImage::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sx < w && sy >= 0 && sy < h {
                out.set(x as usize, y as usize, img.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

fn circular_shift(img: &FaceImage, dx: i64, dy: i64) -> FaceImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut out = FaceImage::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let sx = (x - dx).rem_euclid(w) as usize;
            let sy = (y - dy).rem_euclid(h) as usize;
            out.set(x as usize, y as usize, img.get(sx, sy));
        }
    }
    out
}

/// Rescales to `[0, 1]` by the value range; a flat image maps to zeros.
fn min_max_renorm(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.fill(0.0);
    }
}

/// Applies one transformation to one patch. `ZcaWhiten` requires
/// fitted statistics of matching dimension and renormalizes its output
/// to `[0, 1]`.
pub fn apply_tf(
    patch: &FaceImage,
    tf: TransformationFunction,
    stats: Option<&ZcaStatistics>,
) -> Result<FaceImage> {
    match tf {
        TransformationFunction::Rotate90 => Ok(rotate90(patch)),
        TransformationFunction::Rotate180 => Ok(rotate180(patch)),
        TransformationFunction::Translate(dx, dy) => Ok(translate(patch, dx, dy)),
        TransformationFunction::CircularShift(dx, dy) => Ok(circular_shift(patch, dx, dy)),
        TransformationFunction::ZcaWhiten => {
            let stats = stats.ok_or_else(|| {
                Error::Config("ZCA whitening requires fitted statistics".to_string())
            })?;
            let mut whitened = stats.whiten(patch.pixels())?;
            min_max_renorm(&mut whitened);
            FaceImage::from_pixels(patch.width(), patch.height(), whitened)
        }
    }
}

/// One step of an expansion plan. Translation and shift offsets may be
/// left unspecified; each generated sample then draws its own, uniform
/// per axis over `[-patch_size/8, patch_size/8]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStep {
    Rotate90,
    Rotate180,
    Translate(Option<(i64, i64)>),
    CircularShift(Option<(i64, i64)>),
    ZcaWhiten,
}

impl PlanStep {
    fn resolve<R: Rng>(self, patch_size: usize, rng: &mut R) -> TransformationFunction {
        let mut draw = |fixed: Option<(i64, i64)>| {
            fixed.unwrap_or_else(|| {
                let m = (patch_size / 8) as i64;
                (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
            })
        };
        match self {
            PlanStep::Rotate90 => TransformationFunction::Rotate90,
            PlanStep::Rotate180 => TransformationFunction::Rotate180,
            PlanStep::Translate(o) => {
                let (dx, dy) = draw(o);
                TransformationFunction::Translate(dx, dy)
            }
            PlanStep::CircularShift(o) => {
                let (dx, dy) = draw(o);
                TransformationFunction::CircularShift(dx, dy)
            }
            PlanStep::ZcaWhiten => TransformationFunction::ZcaWhiten,
        }
    }

    pub fn needs_zca(self) -> bool {
        matches!(self, PlanStep::ZcaWhiten)
    }
}

impl std::fmt::Display for PlanStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlanStep::Rotate90 => write!(f, "rotate90"),
            PlanStep::Rotate180 => write!(f, "rotate180"),
            PlanStep::Translate(None) => write!(f, "translate"),
            PlanStep::Translate(Some((dx, dy))) => write!(f, "translate({dx},{dy})"),
            PlanStep::CircularShift(None) => write!(f, "circular-shift"),
            PlanStep::CircularShift(Some((dx, dy))) => write!(f, "circular-shift({dx},{dy})"),
            PlanStep::ZcaWhiten => write!(f, "zca"),
        }
    }
}

impl std::str::FromStr for PlanStep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_offsets = |name: &str| -> Result<Option<(i64, i64)>> {
            let rest = &s[name.len()..];
            if rest.is_empty() {
                return Ok(None);
            }
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("malformed plan step {s:?}")))?;
            let mut parts = inner.splitn(2, ',');
            let parse = |p: Option<&str>| -> Result<i64> {
                p.map(str::trim)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed plan step {s:?}")))
            };
            let dx = parse(parts.next())?;
            let dy = parse(parts.next())?;
            Ok(Some((dx, dy)))
        };
        match s {
            "rotate90" => Ok(PlanStep::Rotate90),
            "rotate180" => Ok(PlanStep::Rotate180),
            "zca" => Ok(PlanStep::ZcaWhiten),
            _ if s.starts_with("translate") => Ok(PlanStep::Translate(parse_offsets("translate")?)),
            _ if s.starts_with("circular-shift") => {
                Ok(PlanStep::CircularShift(parse_offsets("circular-shift")?))
            }
            _ => Err(Error::Config(format!("unknown plan step {s:?}"))),
        }
    }
}

impl serde::Serialize for PlanStep {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for PlanStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = <String as serde::Deserialize>::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated plan, e.g. `"rotate90,translate(2,-1),zca"`.
pub fn parse_plan(text: &str) -> Result<Vec<PlanStep>> {
    let mut plan = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, c) in text.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                plan.push(text[start..i].parse()?);
                start = i + 1;
            }
            _ => {}
        }
    }
    if !text[start..].trim().is_empty() {
        plan.push(text[start..].parse()?);
    }
    Ok(plan)
}

/// All five transformation functions with seed-drawn offsets.
pub fn default_plan() -> Vec<PlanStep> {
    vec![
        PlanStep::Rotate90,
        PlanStep::Rotate180,
        PlanStep::Translate(None),
        PlanStep::CircularShift(None),
        PlanStep::ZcaWhiten,
    ]
}

/// Fits one whitener per patch region across a training set.
pub fn fit_region_zca(samples: &[&PatchSet], epsilon: f64) -> Result<Vec<ZcaStatistics>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("ZCA fitting needs a non-empty training set".to_string()))?;
    let regions = first.patches().len();
    (0..regions)
        .map(|r| {
            let region: Vec<&FaceImage> = samples.iter().map(|s| &s.patches()[r]).collect();
            fit_zca(&region, epsilon)
        })
        .collect()
}

/// Expands labeled samples by one transformed copy per plan step.
/// Originals come first, then all copies for step 0, step 1, and so on;
/// every copy keeps its source label. Offsets left open in the plan are
/// drawn per (step, sample) from `seed`, so the result is deterministic.
/// A plan containing `ZcaWhiten` needs `zca` fitted with one entry per
/// patch region.
pub fn expand_dataset(
    samples: &[(PatchSet, usize)],
    plan: &[PlanStep],
    zca: Option<&[ZcaStatistics]>,
    seed: u64,
) -> Result<Vec<(PatchSet, usize)>> {
    if plan.is_empty() {
        return Err(Error::Config("expansion plan must not be empty".to_string()));
    }
    if plan.iter().any(|s| s.needs_zca()) {
        match zca {
            None => {
                return Err(Error::Config(
                    "plan contains ZCA whitening but no fitted statistics were given".to_string(),
                ))
            }
            Some(stats) => {
                if let Some((first, _)) = samples.first() {
                    if stats.len() != first.patches().len() {
                        return Err(Error::Config(format!(
                            "need one ZCA whitener per patch region ({}), got {}",
                            first.patches().len(),
                            stats.len()
                        )));
                    }
                }
            }
        }
    }
    // Offsets are drawn up front in a fixed order so the transform
    // applications can run in parallel without losing determinism.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(TransformationFunction, usize)> = Vec::new();
    for step in plan {
        for i in 0..samples.len() {
            let p = samples[i].0.patch_size();
            jobs.push((step.resolve(p, &mut rng), i));
        }
    }
    let copies = par::map_indexed(jobs.len(), par::parallel_enabled(), |j| {
        let (tf, i) = jobs[j];
        let (source, label) = &samples[i];
        let patches = source
            .patches()
            .iter()
            .enumerate()
            .map(|(r, patch)| apply_tf(patch, tf, zca.map(|s| &s[r])))
            .collect::<Result<Vec<FaceImage>>>()?;
        Ok((PatchSet::new(patches[0].width(), patches)?, *label))
    });
    let mut out = Vec::with_capacity(samples.len() * (1 + plan.len()));
    out.extend(samples.iter().cloned());
    for copy in copies {
        out.push(copy?);
    }
    Ok(out)
}
