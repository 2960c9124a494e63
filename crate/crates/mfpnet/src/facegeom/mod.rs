//! Face geometry: landmark handling, eye-based alignment, and extraction
//! of the seven facial patches.
//!
//! The pipeline is: load a grayscale image and its 68 landmarks, rotate
//! and scale the face so the eye centers land at fixed positions, then
//! crop one patch per facial region (eyes, eyebrows, nose, mouth, jaw)
//! into fixed-size squares.

mod align;
mod image_io;
mod landmarks;
mod patches;

pub use align::{align, compute_alignment, AlignSpec, Aligned, Similarity};
pub use image_io::{load_image, save_image, FaceImage};
pub use landmarks::{load_landmarks, LandmarkSet, Point, Region, LANDMARK_COUNT};
pub use patches::{extract_patches, load_patchset, save_patchset, PatchSet, PATCH_REGIONS};
