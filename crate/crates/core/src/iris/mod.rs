//! Eye images, circular-edge segmentation, rubber-sheet normalization and a
//! synthetic eye generator.

mod image;
mod normalize;
mod segment;
mod synth;

pub use image::{
    decode_pgm, encode_pgm, mask_to_pixels, pixels_to_mask, read_pgm, write_pgm, EyeImage,
};
pub use normalize::{
    best_column_shift, normalize, normalize_mask, polar_angle, polar_radius, sampling_point,
    NormalizedIris, POLAR_COLS, POLAR_ROWS,
};
pub use segment::{idiff_response, segment, CircleParams, SegmentParams, Segmentation};
pub use synth::{corpus_params, synth_iris, IrisTexture, SynthParams, SyntheticEye, TextureWave};

#[cfg(test)]
mod tests;
