//! Extraction and storage of the seven fixed-size facial patches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::facegeom::image_io::FaceImage;
use crate::facegeom::landmarks::{LandmarkSet, Region};

/// Patch order; every consumer indexes patches in this order.
pub const PATCH_REGIONS: [Region; 7] = [
    Region::LeftEye,
    Region::RightEye,
    Region::LeftEyebrow,
    Region::RightEyebrow,
    Region::Nose,
    Region::Mouth,
    Region::Jaw,
];

/// The seven patches of one face, each `patch_size x patch_size`, in
/// [`PATCH_REGIONS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    patch_size: usize,
    patches: Vec<FaceImage>,
}

impl PatchSet {
    pub fn new(patch_size: usize, patches: Vec<FaceImage>) -> Result<Self> {
        if patches.len() != PATCH_REGIONS.len() {
            return Err(Error::Shape(format!(
                "a patch set has {} patches, got {}",
                PATCH_REGIONS.len(),
                patches.len()
            )));
        }
        for (i, p) in patches.iter().enumerate() {
            if p.width() != patch_size || p.height() != patch_size {
                return Err(Error::Shape(format!(
                    "patch {i} is {}x{}, expected {patch_size}x{patch_size}",
                    p.width(),
                    p.height()
                )));
            }
        }
        Ok(PatchSet { patch_size, patches })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patches(&self) -> &[FaceImage] {
        &self.patches
    }

    pub fn patches_mut(&mut self) -> &mut [FaceImage] {
        &mut self.patches
    }
}

/// Cuts the seven patches out of a (typically aligned) face.
///
/// Each region's landmark bounding box, measured in whole pixels
/// (`max - min + 1` per axis), grows by `margin` times its size on every
/// side; the resulting box is resampled to `patch_size x patch_size`
/// with bilinear interpolation, zero outside the image. With zero margin
/// and a box that already spans exactly `patch_size` pixels the patch
/// copies the source pixels unchanged.
pub fn extract_patches(
    image: &FaceImage,
    landmarks: &LandmarkSet,
    patch_size: usize,
    margin: f64,
) -> Result<PatchSet> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be at least 1".to_string()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!("margin must be non-negative, got {margin}")));
    }
    let p = patch_size;
    let mut patches = Vec::with_capacity(PATCH_REGIONS.len());
    for region in PATCH_REGIONS {
        let range = region.landmark_range();
        let pts = &landmarks.points()[range];
        let (mut xmin, mut xmax) = (f64::MAX, f64::MIN);
        let (mut ymin, mut ymax) = (f64::MAX, f64::MIN);
        for q in pts {
            xmin = xmin.min(q.x);
            xmax = xmax.max(q.x);
            ymin = ymin.min(q.y);
            ymax = ymax.max(q.y);
        }
        let box_w = xmax - xmin + 1.0;
        let box_h = ymax - ymin + 1.0;
        let left = xmin - 0.5 - margin * box_w;
        let top = ymin - 0.5 - margin * box_h;
        let width = box_w + 2.0 * margin * box_w;
        let height = box_h + 2.0 * margin * box_h;
        let mut patch = FaceImage::new(p, p);
        for j in 0..p {
            let sy = top + (j as f64 + 0.5) * height / p as f64;
            for i in 0..p {
                let sx = left + (i as f64 + 0.5) * width / p as f64;
                patch.set(i, j, image.sample_bilinear(sx, sy));
            }
        }
        patches.push(patch);
    }
    PatchSet::new(patch_size, patches)
}

const MAGIC: &[u8; 5] = b"MFPP1";
const MAX_PATCH_SIZE: u32 = 1 << 14;

/// Writes a patch set in its binary format: magic `MFPP1`, `u32` patch
/// size, `u32` patch count, then each patch's pixels as little-endian
/// `f64`. The pixels round-trip bit for bit.
pub fn save_patchset(set: &PatchSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(set.patch_size as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(set.patches.len() as u32).to_le_bytes()).map_err(io_err)?;
    for patch in &set.patches {
        for &v in patch.pixels() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads a file written by [`save_patchset`].
pub fn load_patchset(path: &Path) -> Result<PatchSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::parse(path, "truncated while reading magic"))?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a patch set: bad magic"));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(|_| Error::parse(path, "truncated patch size"))?;
    let patch_size = u32::from_le_bytes(buf4);
    if patch_size == 0 || patch_size > MAX_PATCH_SIZE {
        return Err(Error::parse(path, format!("implausible patch size {patch_size}")));
    }
    r.read_exact(&mut buf4).map_err(|_| Error::parse(path, "truncated patch count"))?;
    let count = u32::from_le_bytes(buf4);
    if count as usize != PATCH_REGIONS.len() {
        return Err(Error::parse(
            path,
            format!("expected {} patches, file has {count}", PATCH_REGIONS.len()),
        ));
    }
    let p = patch_size as usize;
    let mut patches = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut pixels = Vec::with_capacity(p * p);
        let mut buf8 = [0u8; 8];
        for _ in 0..p * p {
            r.read_exact(&mut buf8)
                .map_err(|_| Error::parse(path, format!("truncated in patch {i}")))?;
            pixels.push(f64::from_le_bytes(buf8));
        }
        patches.push(FaceImage::from_pixels(p, p, pixels)?);
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => PatchSet::new(p, patches),
        Ok(_) => Err(Error::parse(path, "trailing bytes after last patch")),
        Err(e) => Err(Error::io(path, e)),
    }
}
