//! Plain-array image helpers shared across modules: Gaussian blur, mask
//! resampling, flips, and conversions between `image` buffers and ndarray.
//!
//! Images are `Array3<f32>` in [H, W, 3] with values in [0, 1]; masks are
//! `Array2<u8>` with values exactly 0 or 1.

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::tensor::Scalar;

/// Separable Gaussian blur of a single-channel map with replicate borders.
/// Replicate padding keeps constants constant and never increases total
/// variation, which the decomposition invariants rely on.
pub fn gaussian_blur(input: &Array2<f32>, sigma: f32) -> Array2<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let s2 = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-((i * i) as f32) / s2).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let (h, w) = input.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut horiz = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius, w);
                acc += input[[y, sx]] * k;
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius, h);
                acc += horiz[[sy, x]] * k;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Nearest-neighbour downsample of a binary mask onto a feature grid,
/// sampling at cell centers. `stride` must divide both mask dimensions.
pub fn downsample_mask(mask: &Array2<u8>, stride: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    assert_eq!(h % stride, 0);
    assert_eq!(w % stride, 0);
    let (gh, gw) = (h / stride, w / stride);
    Array2::from_shape_fn((gh, gw), |(y, x)| {
        mask[[y * stride + stride / 2, x * stride + stride / 2]]
    })
}

/// General bilinear resize of a single-channel f32 map (half-pixel centers).
pub fn resize_bilinear(input: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = input.dim();
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * h as f32 / out_h as f32 - 0.5)
            .clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = ((ox as f32 + 0.5) * w as f32 / out_w as f32 - 0.5)
                .clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f32;
            let top = input[[y0, x0]] * (1.0 - wx) + input[[y0, x1]] * wx;
            let bot = input[[y1, x0]] * (1.0 - wx) + input[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Flip an [H, W, 3] image left-right.
pub fn hflip_image(image: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| image[[y, w - 1 - x, ch]])
}

/// Flip an [H, W] mask left-right.
pub fn hflip_mask(mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| mask[[y, w - 1 - x]])
}

/// [H, W, 3] image in [0, 1] -> CHW tensor of the engine's scalar type.
pub fn image_to_chw<F: Scalar>(image: &Array3<f32>) -> ArrayD<F> {
    let (h, w, _) = image.dim();
    ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
        F::from(image[[ix[1], ix[2], ix[0]]]).unwrap()
    })
}

/// Binary mask -> float array of the engine's scalar type.
pub fn mask_to_float<F: Scalar>(mask: &Array2<u8>) -> Array2<F> {
    mask.mapv(|v| if v > 0 { F::one() } else { F::zero() })
}

/// Decode an RGB buffer into an [H, W, 3] array in [0, 1].
pub fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Encode an [H, W, 3] array in [0, 1] as an 8-bit RGB buffer.
pub fn array_to_rgb(image: &Array3<f32>) -> RgbImage {
    let (h, w, _) = image.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Encode a single-channel [0, 1] map as an 8-bit grayscale buffer.
pub fn array_to_gray(map: &Array2<f32>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Encode a binary mask as an 8-bit grayscale buffer with values {0, 255}.
pub fn mask_to_gray(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 }])
    })
}

/// Decode a grayscale buffer into a binary mask (threshold at 50% gray).
pub fn gray_to_mask(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    })
}
