//! Datasets, episodic sampling, augmentation, and low-light synthesis.
//!
//! A dataset is a directory with stem-matched `images/*.png` and
//! `masks/*.png` (mask pixels: 0 = background, 255 = crack). Loading
//! resizes everything to a target size whose sides are multiples of 8 —
//! images bilinearly, masks with nearest-neighbour plus a 0.5 threshold so
//! they stay binary. Episodes draw K supports and one query without
//! replacement from a seeded generator.

mod synth;

pub use synth::{generate_synthetic_crack, CrackStyle};

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgmath;
use crate::rng;

/// One RGB image in [0, 1] with its binary mask.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// [H, W, 3] in [0, 1].
    pub image: Array3<f32>,
    /// [H, W] with values exactly 0 or 1.
    pub mask: Array2<u8>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Array2<u8>) -> Result<Self> {
        let (h, w, c) = image.dim();
        if c != 3 || mask.dim() != (h, w) {
            return Err(Error::ShapeMismatch {
                what: "sample image/mask",
                expected: vec![h, w, 3],
                got: vec![mask.dim().0, mask.dim().1, c],
            });
        }
        if let Some(&bad) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinary {
                what: "mask",
                value: bad as f64,
            });
        }
        Ok(ImageSample {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }
}

/// Which role a dataset plays in the episodic protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    /// Normal-light training imagery.
    Base,
    /// Low-light evaluation imagery.
    Novel,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, split_tag: SplitTag) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset {
                path: PathBuf::from("<in-memory>"),
            });
        }
        let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != samples.len() {
            return Err(Error::InvalidArgument("duplicate sample ids".into()));
        }
        Ok(Dataset { samples, split_tag })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// K support samples plus one query.
#[derive(Debug, Clone)]
pub struct Episode {
    pub support: Vec<ImageSample>,
    pub query: ImageSample,
    pub shot_count: usize,
}

/// Load a stem-matched image/mask directory, resizing to `target_size`
/// (height, width). Samples are ordered lexicographically by id.
pub fn load_dataset(
    root: impl AsRef<Path>,
    target_size: (usize, usize),
    split_tag: SplitTag,
) -> Result<Dataset> {
    let root = root.as_ref();
    let (th, tw) = target_size;
    for (what, v) in [("target height", th), ("target width", tw)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::NotDivisible {
                what,
                divisor: 8,
                value: v,
            });
        }
    }
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");

    let mut stems: Vec<String> = Vec::new();
    let entries =
        std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false);
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::EmptyDataset {
            path: root.to_path_buf(),
        });
    }
    stems.sort();

    let mut samples = Vec::with_capacity(stems.len());
    for stem in stems {
        let img_path = images_dir.join(format!("{stem}.png"));
        let mask_path = masks_dir.join(format!("{stem}.png"));
        if !mask_path.is_file() {
            return Err(Error::MissingMask { stem });
        }
        let img = image::open(&img_path)
            .map_err(|e| Error::ImageDecode {
                path: img_path.clone(),
                source: e,
            })?
            .resize_exact(tw as u32, th as u32, FilterType::Triangle)
            .to_rgb8();
        let mask_img = image::open(&mask_path)
            .map_err(|e| Error::ImageDecode {
                path: mask_path.clone(),
                source: e,
            })?
            .resize_exact(tw as u32, th as u32, FilterType::Nearest)
            .to_luma8();
        samples.push(ImageSample::new(
            stem,
            imgmath::rgb_to_array(&img),
            imgmath::gray_to_mask(&mask_img),
        )?);
    }
    Dataset::new(samples, split_tag)
}

/// Draw K supports and one query without replacement, deterministically for
/// a given (dataset, K, seed).
pub fn sample_episode(dataset: &Dataset, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("shot count must be >= 1".into()));
    }
    if dataset.len() < k + 1 {
        return Err(Error::DatasetTooSmall {
            have: dataset.len(),
            need: k + 1,
        });
    }
    let mut gen = rng::rng_from(seed);
    let picks = rand::seq::index::sample(&mut gen, dataset.len(), k + 1);
    let support: Vec<ImageSample> = picks
        .iter()
        .take(k)
        .map(|i| dataset.samples[i].clone())
        .collect();
    let query = dataset.samples[picks.index(k)].clone();
    Ok(Episode {
        support,
        query,
        shot_count: k,
    })
}

/// Darken an image with the analytic low-light model
/// `clamp(gain * image^gamma + noise, 0, 1)`, noise ~ N(0, noise_sigma)
/// drawn per pixel and channel from the seed.
pub fn synthesize_lowlight(
    image: &Array3<f32>,
    gamma: f32,
    gain: f32,
    noise_sigma: f32,
    seed: u64,
) -> Result<Array3<f32>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be > 0, got {gamma}"
        )));
    }
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "gain must be in (0, 1], got {gain}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let mut out = image.clone();
    if gamma != 1.0 {
        out.mapv_inplace(|v| v.powf(gamma));
    }
    if gain != 1.0 {
        out.mapv_inplace(|v| v * gain);
    }
    if noise_sigma > 0.0 {
        let mut gen = rng::rng(seed, rng::Stream::Noise, 0);
        let normal = Normal::new(0.0f32, noise_sigma).expect("valid sigma");
        out.mapv_inplace(|v| v + normal.sample(&mut gen));
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// With probability 0.5 (decided by the seed) flip image and mask
/// left-right in lockstep; otherwise return the sample unchanged.
pub fn augment_hflip(sample: &ImageSample, seed: u64) -> ImageSample {
    let mut gen = rng::rng(seed, rng::Stream::Flip, 0);
    if gen.random_range(0.0f64..1.0) < 0.5 {
        hflip_sample(sample)
    } else {
        sample.clone()
    }
}

/// Unconditional lockstep horizontal flip.
pub fn hflip_sample(sample: &ImageSample) -> ImageSample {
    ImageSample {
        id: sample.id.clone(),
        image: imgmath::hflip_image(&sample.image),
        mask: imgmath::hflip_mask(&sample.mask),
    }
}
