//! Spatial ops on the tape: 2-D convolution (im2col + GEMM) and bilinear
//! upsampling by an integer factor.

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix3, Ix4, IxDyn};

use super::{fl, Scalar, Tape, Var};

/// Border handling for convolutions. Zero is the production setting;
/// Circular exists for translation-equivariance test configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Circular,
}

fn conv_out_len(n: usize, k: usize, stride: usize, dilation: usize) -> usize {
    let eff = dilation * (k - 1) + 1;
    let pad = dilation * (k - 1) / 2;
    (n + 2 * pad - eff) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &ArrayViewD<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: PadMode,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let x = x.view().into_dimensionality::<Ix3>().unwrap();
    let (cin, h, w) = x.dim();
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;
    let mut cols = Array2::<F>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                        let v = match pad {
                            PadMode::Zero => {
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    x[[ci, iy as usize, ix as usize]]
                                } else {
                                    F::zero()
                                }
                            }
                            PadMode::Circular => {
                                let wy = iy.rem_euclid(h as isize) as usize;
                                let wx = ix.rem_euclid(w as isize) as usize;
                                x[[ci, wy, wx]]
                            }
                        };
                        cols[[row, oy * ow + ox]] = v;
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dilation: usize,
    pad: PadMode,
    oh: usize,
    ow: usize,
) -> ArrayD<F> {
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;
    let mut gx = ArrayD::<F>::zeros(IxDyn(&[cin, h, w]));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky * dilation) as isize - pad_h as isize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx * dilation) as isize - pad_w as isize;
                        let g = gcols[[row, oy * ow + ox]];
                        match pad {
                            PadMode::Zero => {
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    gx[[ci, iy as usize, ix as usize]] += g;
                                }
                            }
                            PadMode::Circular => {
                                let wy = iy.rem_euclid(h as isize) as usize;
                                let wx = ix.rem_euclid(w as isize) as usize;
                                gx[[ci, wy, wx]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Per-axis source indices and blend weights for an integer-factor bilinear
/// upsample with half-pixel centers.
fn bilinear_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let mut table = Vec::with_capacity(n_in * factor);
    for o in 0..n_in * factor {
        let s = (o as f64 + 0.5) / factor as f64 - 0.5;
        let s = s.clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        table.push((i0, i1, s - i0 as f64));
    }
    table
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution with "same" padding semantics for odd kernels.
    ///
    /// x: [C_in, H, W], kernel: [C_out, C_in, kh, kw] (odd kh, kw),
    /// bias: [C_out]. Output: [C_out, H', W'] with H' = H/stride for the
    /// kernel/padding combinations used here.
    pub fn conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        dilation: usize,
        pad: PadMode,
    ) -> Var {
        let (out, cols, dims) = {
            let xv = self.value(x);
            let kv = self.value(kernel);
            let bv = self.value(bias);
            let k4 = kv.view().into_dimensionality::<Ix4>().unwrap();
            let (cout, cin, kh, kw) = k4.dim();
            assert_eq!(kh % 2, 1, "odd kernels only");
            assert_eq!(kw % 2, 1, "odd kernels only");
            let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
            let (xc, h, w) = x3.dim();
            assert_eq!(xc, cin, "conv2d input channels");
            let oh = conv_out_len(h, kh, stride, dilation);
            let ow = conv_out_len(w, kw, stride, dilation);
            let cols = im2col(&xv.view(), kh, kw, stride, dilation, pad, oh, ow);
            let wmat = k4
                .to_shape((cout, cin * kh * kw))
                .expect("kernel reshape")
                .to_owned();
            let mut y = wmat.dot(&cols);
            for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            let out = y
                .into_shape_with_order((cout, oh, ow))
                .expect("conv output reshape")
                .into_dyn();
            (out, cols, (cin, h, w, cout, kh, kw, oh, ow))
        };
        let (cin, h, w, cout, kh, kw, oh, ow) = dims;
        self.push(
            out,
            Some(Box::new(move |vals, g, sink| {
                let gmat = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_shape((cout, oh * ow))
                    .expect("grad reshape")
                    .to_owned();
                sink.add(bias.0, gmat.sum_axis(Axis(1)).into_dyn());
                let gw = gmat.dot(&cols.t());
                sink.add(
                    kernel.0,
                    gw.into_shape_with_order((cout, cin, kh, kw))
                        .expect("kernel grad reshape")
                        .into_dyn(),
                );
                let wmat = vals[kernel.0]
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .to_shape((cout, cin * kh * kw))
                    .expect("kernel reshape")
                    .to_owned();
                let gcols = wmat.t().dot(&gmat);
                sink.add(
                    x.0,
                    col2im(&gcols, cin, h, w, kh, kw, stride, dilation, pad, oh, ow),
                );
            })),
        )
    }

    /// Bilinear upsample of a [C, H, W] tensor by an integer factor.
    pub fn upsample_bilinear(&self, x: Var, factor: usize) -> Var {
        assert!(factor >= 1);
        let (out, ty, tx, dims) = {
            let xv = self.value(x);
            let x3 = xv.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = x3.dim();
            let ty = bilinear_table(h, factor);
            let tx = bilinear_table(w, factor);
            let mut out = ArrayD::<F>::zeros(IxDyn(&[c, h * factor, w * factor]));
            for ci in 0..c {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let wy = fl::<F>(wy);
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let wx = fl::<F>(wx);
                        let a = x3[[ci, y0, x0]];
                        let b = x3[[ci, y0, x1]];
                        let cc = x3[[ci, y1, x0]];
                        let d = x3[[ci, y1, x1]];
                        let top = a + (b - a) * wx;
                        let bot = cc + (d - cc) * wx;
                        out[[ci, oy, ox]] = top + (bot - top) * wy;
                    }
                }
            }
            (out, ty, tx, (c, h, w))
        };
        let (c, h, w) = dims;
        self.push(
            out,
            Some(Box::new(move |_, g, sink| {
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
                let one = F::one();
                for ci in 0..c {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        let wy = fl::<F>(wy);
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let wx = fl::<F>(wx);
                            let gv = g[[ci, oy, ox]];
                            gx[[ci, y0, x0]] += gv * (one - wy) * (one - wx);
                            gx[[ci, y0, x1]] += gv * (one - wy) * wx;
                            gx[[ci, y1, x0]] += gv * wy * (one - wx);
                            gx[[ci, y1, x1]] += gv * wy * wx;
                        }
                    }
                }
                sink.add(x.0, gx);
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tape;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randd(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::rng::rng_from(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn conv_loss(
        xv: &ArrayD<f64>,
        kv: &ArrayD<f64>,
        bv: &ArrayD<f64>,
        stride: usize,
        dilation: usize,
        pad: PadMode,
    ) -> (f64, Tape<f64>, [Var; 3], Var) {
        let t = Tape::<f64>::new();
        let x = t.leaf(xv.clone());
        let k = t.leaf(kv.clone());
        let b = t.leaf(bv.clone());
        let y = t.conv2d(x, k, b, stride, dilation, pad);
        let sq = t.mul(y, y);
        let l = t.mean_all(sq);
        (t.scalar(l), t, [x, k, b], l)
    }

    #[test]
    fn conv2d_shapes() {
        let t = Tape::<f64>::new();
        let x = t.leaf(randd(&[3, 8, 8], 1));
        let k = t.leaf(randd(&[5, 3, 3, 3], 2));
        let b = t.leaf(randd(&[5], 3));
        assert_eq!(t.shape(t.conv2d(x, k, b, 1, 1, PadMode::Zero)), &[5, 8, 8]);
        assert_eq!(t.shape(t.conv2d(x, k, b, 2, 1, PadMode::Zero)), &[5, 4, 4]);
        assert_eq!(t.shape(t.conv2d(x, k, b, 1, 2, PadMode::Zero)), &[5, 8, 8]);
        let k1 = t.leaf(randd(&[4, 3, 1, 1], 4));
        let b1 = t.leaf(randd(&[4], 5));
        assert_eq!(t.shape(t.conv2d(x, k1, b1, 1, 1, PadMode::Zero)), &[4, 8, 8]);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        for (stride, dilation, pad) in [
            (1, 1, PadMode::Zero),
            (2, 1, PadMode::Zero),
            (1, 2, PadMode::Zero),
            (2, 1, PadMode::Circular),
            (1, 2, PadMode::Circular),
        ] {
            let x0 = randd(&[2, 6, 6], 10);
            let k0 = randd(&[3, 2, 3, 3], 11);
            let b0 = randd(&[3], 12);
            let (_, tape, vars, l) = conv_loss(&x0, &k0, &b0, stride, dilation, pad);
            let mut grads = tape.backward(l);
            let gx = grads.take(vars[0], &[2, 6, 6]);
            let gk = grads.take(vars[1], &[3, 2, 3, 3]);
            let gb = grads.take(vars[2], &[3]);
            let fx = gradcheck::central_diff(&x0, 1e-6, |a| {
                conv_loss(a, &k0, &b0, stride, dilation, pad).0
            });
            let fk = gradcheck::central_diff(&k0, 1e-6, |a| {
                conv_loss(&x0, a, &b0, stride, dilation, pad).0
            });
            let fb = gradcheck::central_diff(&b0, 1e-6, |a| {
                conv_loss(&x0, &k0, a, stride, dilation, pad).0
            });
            assert!(gradcheck::max_relative_error(&gx, &fx) < 1e-6);
            assert!(gradcheck::max_relative_error(&gk, &fk) < 1e-6);
            assert!(gradcheck::max_relative_error(&gb, &fb) < 1e-6);
        }
    }

    #[test]
    fn conv2d_circular_translation_equivariance() {
        // Shift input by stride cells -> output shifts by one cell.
        let x0 = randd(&[2, 8, 8], 20);
        let k0 = randd(&[3, 2, 3, 3], 21);
        let b0 = randd(&[3], 22);
        let t = Tape::<f64>::new();
        let x = t.leaf(x0.clone());
        let k = t.leaf(k0.clone());
        let b = t.leaf(b0.clone());
        let y = t.value_owned(t.conv2d(x, k, b, 2, 1, PadMode::Circular));

        let mut shifted = x0.clone();
        for ci in 0..2 {
            for yy in 0..8 {
                for xx in 0..8 {
                    shifted[[ci, yy, xx]] = x0[[ci, (yy + 6) % 8, xx]];
                }
            }
        }
        let xs = t.leaf(shifted);
        let ys = t.value_owned(t.conv2d(xs, k, b, 2, 1, PadMode::Circular));
        for ci in 0..3 {
            for yy in 0..4 {
                for xx in 0..4 {
                    let expect = y[[ci, (yy + 3) % 4, xx]];
                    assert!((ys[[ci, yy, xx]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn upsample_shapes_and_gradient() {
        let x0 = randd(&[2, 3, 4], 30);
        let run = |xv: &ArrayD<f64>| {
            let t = Tape::<f64>::new();
            let x = t.leaf(xv.clone());
            let y = t.upsample_bilinear(x, 2);
            assert_eq!(t.shape(y), &[2, 6, 8]);
            let sq = t.mul(y, y);
            let l = t.mean_all(sq);
            (t.scalar(l), t, x, l)
        };
        let (_, tape, x, l) = run(&x0);
        let mut grads = tape.backward(l);
        let gx = grads.take(x, &[2, 3, 4]);
        let fx = gradcheck::central_diff(&x0, 1e-6, |a| run(a).0);
        assert!(gradcheck::max_relative_error(&gx, &fx) < 1e-6);
    }

    #[test]
    fn upsample_preserves_constants() {
        let t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.7));
        let y = t.value_owned(t.upsample_bilinear(x, 4));
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }
}
