//! Analytic reflectance/illumination decomposition.
//!
//! An image I in [0, 1] is split into a smooth illumination map L and a
//! reflectance image R such that R * L reconstructs min(I, L) exactly:
//!
//!   L = clamp(gaussian_blur(max over channels of I, sigma), EPS, 1)
//!   R = min(I / L, 1) per channel
//!
//! Taking the illumination estimate from the max channel keeps R <= 1
//! everywhere except where the blur undershoots a bright pixel, which the
//! min() then absorbs. Because the whole map is linear in a global gain (as
//! long as no clamp activates), reflectance is invariant to uniform exposure
//! changes — the property that makes reflectance features useful on
//! low-light inputs.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::imgmath;

/// Floor for the illumination map; avoids division blow-up on black pixels.
pub const ILLUMINATION_EPS: f32 = 1e-4;

/// Reflectance/illumination pair produced by [`decompose`].
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// [H, W, 3] in [0, 1].
    pub reflectance: Array3<f32>,
    /// [H, W] in [ILLUMINATION_EPS, 1].
    pub illumination: Array2<f32>,
}

/// Default smoothing scale for an H x W image.
pub fn default_sigma(h: usize, w: usize) -> f32 {
    (h.min(w) as f32 / 16.0).max(0.5)
}

/// Decompose an RGB image in [0, 1] into reflectance and illumination.
pub fn decompose(image: &Array3<f32>, smoothing_sigma: f32) -> Result<Decomposition> {
    if !(smoothing_sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "smoothing_sigma must be > 0, got {smoothing_sigma}"
        )));
    }
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch {
            what: "decompose input",
            expected: vec![h, w, 3],
            got: vec![h, w, c],
        });
    }

    let max_channel = Array2::from_shape_fn((h, w), |(y, x)| {
        image[[y, x, 0]].max(image[[y, x, 1]]).max(image[[y, x, 2]])
    });
    let illumination = imgmath::gaussian_blur(&max_channel, smoothing_sigma)
        .mapv(|v| v.clamp(ILLUMINATION_EPS, 1.0));
    let reflectance = Array3::from_shape_fn((h, w, 3), |(y, x, ch)| {
        (image[[y, x, ch]] / illumination[[y, x]]).min(1.0)
    });
    Ok(Decomposition {
        reflectance,
        illumination,
    })
}

/// Decompose a batch, preserving order. Errors carry the offending index.
pub fn decompose_batch(images: &[Array3<f32>], smoothing_sigma: f32) -> Result<Vec<Decomposition>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            decompose(img, smoothing_sigma)
                .map_err(|e| Error::InvalidArgument(format!("batch element {i}: {e}")))
        })
        .collect()
}
