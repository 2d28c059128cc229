//! Procedural crack imagery for desk-scale experiments: a value-noise
//! concrete texture crossed by a dark random-walk polyline whose rasterized
//! ribbon is the ground-truth mask.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::rng;

/// Appearance knobs for [`generate_synthetic_crack`].
#[derive(Debug, Clone)]
pub struct CrackStyle {
    /// Ribbon thickness in pixels.
    pub crack_width_px: usize,
    /// Multiplicative darkening of crack pixels, in (0, 1].
    pub contrast: f32,
    /// Lattice spacing of the background value noise, in pixels.
    pub texture_scale: f32,
}

impl Default for CrackStyle {
    fn default() -> Self {
        CrackStyle {
            crack_width_px: 3,
            contrast: 0.6,
            texture_scale: 8.0,
        }
    }
}

/// Two-octave value noise in [0, 1]: random lattice values, bilinearly
/// interpolated.
fn value_noise(h: usize, w: usize, scale: f32, gen: &mut ChaCha8Rng) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((h, w));
    let mut amplitude = 0.65f32;
    let mut cell = scale.max(1.0);
    for _ in 0..2 {
        let gh = (h as f32 / cell).ceil() as usize + 2;
        let gw = (w as f32 / cell).ceil() as usize + 2;
        let lattice = Array2::from_shape_fn((gh, gw), |_| gen.random_range(0.0f32..1.0));
        for y in 0..h {
            let fy = y as f32 / cell;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = x as f32 / cell;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f32;
                let a = lattice[[y0, x0]];
                let b = lattice[[y0, x0 + 1]];
                let c = lattice[[y0 + 1, x0]];
                let d = lattice[[y0 + 1, x0 + 1]];
                let top = a + (b - a) * tx;
                let bot = c + (d - c) * tx;
                out[[y, x]] += amplitude * (top + (bot - top) * ty);
            }
        }
        amplitude *= 0.5;
        cell = (cell * 0.5).max(1.0);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Stamp a filled disk into the mask.
fn stamp(mask: &mut Array2<u8>, cy: f32, cx: f32, radius: f32) {
    let (h, w) = mask.dim();
    let r = radius.max(0.5);
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil() as usize).min(h - 1);
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil() as usize).min(w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            if dy * dy + dx * dx <= r * r {
                mask[[y, x]] = 1;
            }
        }
    }
}

/// Generate one textured sample whose mask marks exactly the crack pixels.
///
/// Guarantees for every seed: the mask is non-empty with foreground
/// fraction strictly inside (0, 0.5), crack pixels are strictly darker than
/// the background on average, and the result is bit-identical per seed.
pub fn generate_synthetic_crack(
    h: usize,
    w: usize,
    seed: u64,
    style: &CrackStyle,
) -> Result<ImageSample> {
    for (what, v) in [("height", h), ("width", w)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::NotDivisible {
                what,
                divisor: 8,
                value: v,
            });
        }
    }
    if style.crack_width_px == 0 || style.crack_width_px >= h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "crack_width_px {} is degenerate for a {}x{} image",
            style.crack_width_px, h, w
        )));
    }
    if !(style.contrast > 0.0 && style.contrast <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "contrast must be in (0, 1], got {}",
            style.contrast
        )));
    }
    if !(style.texture_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "texture_scale must be > 0, got {}",
            style.texture_scale
        )));
    }

    let mut gen = rng::rng(seed, rng::Stream::Synth, 0);
    let noise = value_noise(h, w, style.texture_scale, &mut gen);
    // Near-gray concrete tint, floor well above zero so darkening is visible.
    let tint = [
        gen.random_range(0.9f32..1.0),
        gen.random_range(0.9f32..1.0),
        gen.random_range(0.9f32..1.0),
    ];
    let mut image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        (0.45 + 0.4 * noise[[y, x]]) * tint[c]
    });

    // Random-walk polyline crossing the image along its longer side, with
    // the step count capped so the ribbon stays under half the area.
    let mut mask = Array2::<u8>::zeros((h, w));
    let width = style.crack_width_px as f32;
    let radius = width / 2.0;
    let max_steps_area = ((0.4 * (h * w) as f32) / width).floor() as usize;
    let horizontal = w >= h;
    let main_len = if horizontal { w } else { h };
    let steps = main_len.min(max_steps_area.max(1));
    let start_offset = if steps < main_len {
        gen.random_range(0..(main_len - steps + 1))
    } else {
        0
    };
    let cross_len = if horizontal { h } else { w };
    let mut cross = gen.random_range(0.25 * cross_len as f32..0.75 * cross_len as f32);
    let mut drift = gen.random_range(-0.5f32..0.5);
    for i in 0..steps {
        let main = (start_offset + i) as f32;
        drift = (drift + gen.random_range(-0.35f32..0.35)).clamp(-1.2, 1.2);
        cross = (cross + drift).clamp(radius, cross_len as f32 - 1.0 - radius);
        let (cy, cx) = if horizontal { (cross, main) } else { (main, cross) };
        stamp(&mut mask, cy, cx, radius);
    }

    // Darken the ribbon multiplicatively: every crack pixel ends strictly
    // below its background value, so the mean ordering holds for free.
    let jitter_row = Array2::from_shape_fn((h, w), |_| gen.random_range(0.0f32..0.15));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 1 {
                let keep = (1.0 - style.contrast) * (1.0 - jitter_row[[y, x]]);
                for c in 0..3 {
                    image[[y, x, c]] *= keep;
                }
            }
        }
    }
    image.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let fg = mask.iter().filter(|&&v| v == 1).count();
    debug_assert!(fg > 0);
    debug_assert!((fg as f32) < 0.5 * (h * w) as f32);

    ImageSample::new(format!("synth_{seed:08x}"), image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let style = CrackStyle::default();
        let a = generate_synthetic_crack(32, 32, 7, &style).unwrap();
        let b = generate_synthetic_crack(32, 32, 7, &style).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.id, b.id);
        let c = generate_synthetic_crack(32, 32, 8, &style).unwrap();
        assert_ne!(a.mask, c.mask);
    }

    #[test]
    fn mask_fraction_in_open_interval() {
        for seed in 0..100u64 {
            for style in [
                CrackStyle::default(),
                CrackStyle {
                    crack_width_px: 7,
                    ..CrackStyle::default()
                },
            ] {
                let s = generate_synthetic_crack(24, 40, seed, &style).unwrap();
                let fg = s.mask.iter().filter(|&&v| v == 1).count();
                let frac = fg as f32 / (24.0 * 40.0);
                assert!(frac > 0.0 && frac < 0.5, "seed {seed}: fraction {frac}");
            }
        }
    }

    #[test]
    fn crack_pixels_darker_than_background() {
        for seed in 0..200u64 {
            let s = generate_synthetic_crack(64, 64, seed, &CrackStyle::default()).unwrap();
            let mut crack = (0.0f64, 0usize);
            let mut bg = (0.0f64, 0usize);
            for y in 0..64 {
                for x in 0..64 {
                    let v = (0..3).map(|c| s.image[[y, x, c]] as f64).sum::<f64>() / 3.0;
                    if s.mask[[y, x]] == 1 {
                        crack = (crack.0 + v, crack.1 + 1);
                    } else {
                        bg = (bg.0 + v, bg.1 + 1);
                    }
                }
            }
            let crack_mean = crack.0 / crack.1 as f64;
            let bg_mean = bg.0 / bg.1 as f64;
            assert!(crack_mean < bg_mean, "seed {seed}: {crack_mean} vs {bg_mean}");
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let s = generate_synthetic_crack(16, 16, 3, &CrackStyle::default()).unwrap();
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_degenerate_style_and_sizes() {
        let style = CrackStyle {
            crack_width_px: 16,
            ..CrackStyle::default()
        };
        assert!(generate_synthetic_crack(16, 16, 0, &style).is_err());
        assert!(generate_synthetic_crack(15, 16, 0, &CrackStyle::default()).is_err());
        assert!(generate_synthetic_crack(
            16,
            16,
            0,
            &CrackStyle {
                contrast: 0.0,
                ..CrackStyle::default()
            }
        )
        .is_err());
    }
}
