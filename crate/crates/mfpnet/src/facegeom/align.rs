//! Eye-based similarity alignment.
//!
//! The face is rotated so the line between the eye centers is horizontal,
//! scaled so the centers sit a fixed distance apart, and translated so
//! their midpoint lands at a fixed position in the output frame. Right
//! and left eye centers are the centroids of the six landmarks each.

use crate::error::{Error, Result};
use crate::facegeom::image_io::FaceImage;
use crate::facegeom::landmarks::{LandmarkSet, Point};

/// Output-frame geometry for alignment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AlignSpec {
    /// Distance between the aligned eye centers, in output pixels.
    pub eye_distance: f64,
    /// Row the aligned eye centers sit on.
    pub eye_height: f64,
    /// Output image is `out_size x out_size`.
    pub out_size: usize,
}

impl Default for AlignSpec {
    fn default() -> Self {
        AlignSpec { eye_distance: 28.0, eye_height: 36.0, out_size: 96 }
    }
}

impl AlignSpec {
    fn validate(&self) -> Result<()> {
        if !(self.eye_distance > 0.0 && self.eye_distance.is_finite()) {
            return Err(Error::Config(format!(
                "eye distance must be positive, got {}",
                self.eye_distance
            )));
        }
        if self.out_size < 2 {
            return Err(Error::Config(format!("output size {} too small", self.out_size)));
        }
        if !(self.eye_height >= 0.0 && self.eye_height < self.out_size as f64) {
            return Err(Error::Config(format!(
                "eye height {} outside the {} pixel output",
                self.eye_height, self.out_size
            )));
        }
        Ok(())
    }
}

/// Rotation + uniform scale + translation, mapping input-image positions
/// to output-frame positions.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub rotation: f64,
    pub scale: f64,
    cos: f64,
    sin: f64,
    mid: Point,
    target: Point,
}

impl Similarity {
    /// Input position to output position.
    pub fn apply(&self, p: Point) -> Point {
        let dx = p.x - self.mid.x;
        let dy = p.y - self.mid.y;
        Point::new(
            self.target.x + self.scale * (self.cos * dx - self.sin * dy),
            self.target.y + self.scale * (self.sin * dx + self.cos * dy),
        )
    }

    /// Output position back to input position.
    pub fn apply_inverse(&self, q: Point) -> Point {
        let dx = (q.x - self.target.x) / self.scale;
        let dy = (q.y - self.target.y) / self.scale;
        Point::new(
            self.mid.x + self.cos * dx + self.sin * dy,
            self.mid.y - self.sin * dx + self.cos * dy,
        )
    }
}

/// Derives the similarity transform that aligns `landmarks` per `spec`.
pub fn compute_alignment(landmarks: &LandmarkSet, spec: &AlignSpec) -> Result<Similarity> {
    spec.validate()?;
    let right = landmarks.right_eye_center();
    let left = landmarks.left_eye_center();
    let vx = left.x - right.x;
    let vy = left.y - right.y;
    let dist = (vx * vx + vy * vy).sqrt();
    if dist < 1e-9 {
        return Err(Error::Geometry("eye centers coincide; cannot align".to_string()));
    }
    let rotation = -vy.atan2(vx);
    Ok(Similarity {
        rotation,
        scale: spec.eye_distance / dist,
        cos: rotation.cos(),
        sin: rotation.sin(),
        mid: Point::new((right.x + left.x) / 2.0, (right.y + left.y) / 2.0),
        target: Point::new(spec.out_size as f64 / 2.0, spec.eye_height),
    })
}

/// An aligned face: the resampled image and the landmarks mapped into the
/// output frame.
#[derive(Debug, Clone)]
pub struct Aligned {
    pub image: FaceImage,
    pub landmarks: LandmarkSet,
}

/// Aligns an image and its landmarks. Output pixels that map outside the
/// input read as zero.
pub fn align(image: &FaceImage, landmarks: &LandmarkSet, spec: &AlignSpec) -> Result<Aligned> {
    let t = compute_alignment(landmarks, spec)?;
    let s = spec.out_size;
    let mut out = FaceImage::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let p = t.apply_inverse(Point::new(x as f64, y as f64));
            out.set(x, y, image.sample_bilinear(p.x, p.y));
        }
    }
    let mapped = landmarks.map(|p| t.apply(p))?;
    Ok(Aligned { image: out, landmarks: mapped })
}
