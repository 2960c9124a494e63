//! 68-point facial landmark sets and their file formats.
//!
//! The point numbering follows the common 68-point annotation: jaw 0-16,
//! right eyebrow 17-21, left eyebrow 22-26, nose 27-35, right eye 36-41,
//! left eye 42-47, mouth 48-67. "Right" and "left" are the subject's,
//! so the right eye sits on the image's left side in a frontal face.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;

/// Image-space position, x right, y down, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// One of the seven facial regions a patch is cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Jaw,
    RightEyebrow,
    LeftEyebrow,
    Nose,
    RightEye,
    LeftEye,
    Mouth,
}

impl Region {
    /// Landmark indices belonging to this region.
    pub fn landmark_range(self) -> Range<usize> {
        match self {
            Region::Jaw => 0..17,
            Region::RightEyebrow => 17..22,
            Region::LeftEyebrow => 22..27,
            Region::Nose => 27..36,
            Region::RightEye => 36..42,
            Region::LeftEye => 42..48,
            Region::Mouth => 48..68,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Jaw => "jaw",
            Region::RightEyebrow => "right_eyebrow",
            Region::LeftEyebrow => "left_eyebrow",
            Region::Nose => "nose",
            Region::RightEye => "right_eye",
            Region::LeftEye => "left_eye",
            Region::Mouth => "mouth",
        }
    }
}

/// Exactly 68 finite landmark points.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn from_points(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Validation(vec![format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )]));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Validation(vec![format!("landmark {i} is not finite")]));
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    /// Centroid of a region's landmarks.
    pub fn region_centroid(&self, region: Region) -> Point {
        let range = region.landmark_range();
        let n = range.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        for p in &self.points[range] {
            sx += p.x;
            sy += p.y;
        }
        Point::new(sx / n, sy / n)
    }

    /// Center of the subject's right eye (image left).
    pub fn right_eye_center(&self) -> Point {
        self.region_centroid(Region::RightEye)
    }

    /// Center of the subject's left eye (image right).
    pub fn left_eye_center(&self) -> Point {
        self.region_centroid(Region::LeftEye)
    }

    /// Applies `f` to every point.
    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<LandmarkSet> {
        LandmarkSet::from_points(self.points.iter().map(|&p| f(p)).collect())
    }
}

/// Loads landmarks from a `.pts` file or a flat CSV of 136 numbers,
/// chosen by file extension.
pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match ext.as_str() {
        "pts" => parse_pts(path, &text),
        "csv" | "txt" => parse_csv(path, &text),
        other => Err(Error::parse(
            path,
            format!("unknown landmark format {other:?}; expected .pts, .csv, or .txt"),
        )),
    }
}

/// The `.pts` layout:
///
/// ```text
/// version: 1
/// n_points: 68
/// {
/// x y
/// ...
/// }
/// ```
fn parse_pts(path: &Path, text: &str) -> Result<LandmarkSet> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let version = lines.next().unwrap_or_default();
    if !version.to_ascii_lowercase().starts_with("version:") {
        return Err(Error::parse(path, "missing version header"));
    }
    let count_line = lines.next().unwrap_or_default().to_ascii_lowercase();
    let count: usize = count_line
        .strip_prefix("n_points:")
        .map(str::trim)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(path, "missing or malformed n_points header"))?;
    if count != LANDMARK_COUNT {
        return Err(Error::parse(path, format!("n_points is {count}, expected {LANDMARK_COUNT}")));
    }
    if lines.next() != Some("{") {
        return Err(Error::parse(path, "expected '{' after headers"));
    }
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for line in lines.by_ref() {
        if line == "}" {
            break;
        }
        let mut parts = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse().ok()).ok_or_else(|| {
                Error::parse(path, format!("bad point line {line:?} at index {}", points.len()))
            })
        };
        let x = parse(parts.next())?;
        let y = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::parse(path, format!("point line {line:?} has extra fields")));
        }
        points.push(Point::new(x, y));
    }
    if points.len() != count {
        return Err(Error::parse(
            path,
            format!("found {} points, header said {count}", points.len()),
        ));
    }
    LandmarkSet::from_points(points)
}

/// Flat CSV: 136 comma or whitespace separated numbers, interleaved as
/// `x0, y0, x1, y1, ...`. Line structure does not matter.
fn parse_csv(path: &Path, text: &str) -> Result<LandmarkSet> {
    let mut values = Vec::with_capacity(2 * LANDMARK_COUNT);
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if tok.is_empty() {
            continue;
        }
        let v: f64 = tok
            .parse()
            .map_err(|_| Error::parse(path, format!("not a number: {tok:?}")))?;
        values.push(v);
    }
    if values.len() != 2 * LANDMARK_COUNT {
        return Err(Error::parse(
            path,
            format!("expected {} numbers, found {}", 2 * LANDMARK_COUNT, values.len()),
        ));
    }
    let points = values.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
    LandmarkSet::from_points(points)
}
