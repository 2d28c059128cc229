//! Feature encoders and the multi-scale fusion head.
//!
//! Two weight-shared convolutional encoders turn images and reflectance
//! images into stride-8 feature maps. On the query side, a pyramid of
//! dilated convolutions plus global pooling summarizes context at several
//! scales; the result is upsampled and concatenated with projected
//! reflectance features (as low-level detail) and fused down to a stride-4
//! feature map used for prototype matching.
//!
//! Normalization is per-channel over spatial positions (batch-free), so a
//! single episode forward is deterministic. All blocks are built on the
//! autodiff tape; the public functions run a throwaway tape and return
//! plain arrays.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgmath;
use crate::tensor::{fl, PadMode, ParamSet, Scalar, Tape, Var};

const NORM_EPS: f64 = 1e-5;

/// Dilation rates of the pyramid branches.
pub const DEFAULT_DILATION_RATES: [usize; 3] = [6, 12, 18];

/// A spatial grid of feature vectors at a known stride.
#[derive(Debug, Clone)]
pub struct FeatureMap<F: Scalar> {
    /// [C, h, w].
    pub grid: ArrayD<F>,
    /// 8 out of the encoder, 4 after fusion.
    pub stride: usize,
    /// Full-resolution (H, W) the grid was computed from.
    pub origin_size: (usize, usize),
}

impl<F: Scalar> FeatureMap<F> {
    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.grid.shape()[1], self.grid.shape()[2])
    }
}

// ---------------------------------------------------------------------------
// parameter containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvParams<F: Scalar> {
    /// [C_out, C_in, kh, kw]
    pub kernel: ArrayD<F>,
    /// [C_out]
    pub bias: ArrayD<F>,
}

#[derive(Debug, Clone)]
pub struct NormParams<F: Scalar> {
    pub gain: ArrayD<F>,
    pub bias: ArrayD<F>,
}

/// Convolution + per-channel normalization + ReLU. The convolution has no
/// bias: the normalization subtracts the per-channel mean, so a bias here
/// would cancel exactly (its own affine shift covers the role).
#[derive(Debug, Clone)]
pub struct ConvBlock<F: Scalar> {
    /// [C_out, C_in, kh, kw]
    pub kernel: ArrayD<F>,
    pub norm: NormParams<F>,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderParams<F: Scalar> {
    pub stem: ConvBlock<F>,
    pub stage1: ConvBlock<F>,
    pub stage2: ConvBlock<F>,
    pub stage3: ConvBlock<F>,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct AsppParams<F: Scalar> {
    pub rates: Vec<usize>,
    pub branch_1x1: ConvBlock<F>,
    pub branches: Vec<ConvBlock<F>>,
    /// 1x1 projection applied to the globally pooled vector.
    pub pool_proj: ConvParams<F>,
    /// 1x1 merge of the concatenated branches. No normalization here: the
    /// pooling branch contributes a spatially constant signal that a
    /// mean-subtracting norm would cancel exactly.
    pub merge: ConvParams<F>,
    pub low_proj: ConvBlock<F>,
    pub fuse1: ConvBlock<F>,
    pub fuse2: ConvBlock<F>,
}

/// Stand-in head when the pyramid is disabled: upsample x2 then a 1x1 block.
#[derive(Debug, Clone)]
pub struct ProjParams<F: Scalar> {
    pub proj: ConvBlock<F>,
}

fn kaiming_conv<F: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    gen: &mut ChaCha8Rng,
) -> ConvParams<F> {
    let fan_in = (c_in * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0f64, std).expect("valid std");
    let kernel = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, k, k]), |_| {
        fl::<F>(normal.sample(gen))
    });
    ConvParams {
        kernel,
        bias: ArrayD::zeros(IxDyn(&[c_out])),
    }
}

fn unit_norm<F: Scalar>(c: usize) -> NormParams<F> {
    NormParams {
        gain: ArrayD::from_elem(IxDyn(&[c]), F::one()),
        bias: ArrayD::zeros(IxDyn(&[c])),
    }
}

fn block<F: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    gen: &mut ChaCha8Rng,
) -> ConvBlock<F> {
    ConvBlock {
        kernel: kaiming_conv::<F>(c_out, c_in, k, gen).kernel,
        norm: unit_norm(c_out),
        stride,
        dilation,
    }
}

impl<F: Scalar> EncoderParams<F> {
    /// Four stages reaching stride 8: the stem and two stages halve the
    /// resolution, the last stage widens the receptive field with dilation
    /// instead of downsampling further.
    pub fn init(width: usize, gen: &mut ChaCha8Rng) -> Self {
        let w0 = (width / 2).max(4);
        EncoderParams {
            stem: block(w0, 3, 3, 2, 1, gen),
            stage1: block(w0, w0, 3, 2, 1, gen),
            stage2: block(width, w0, 3, 2, 1, gen),
            stage3: block(width, width, 3, 1, 2, gen),
            width,
        }
    }
}

impl<F: Scalar> AsppParams<F> {
    /// `in_dim`: channels of the query trunk; `low_in`: channels of the
    /// low-level reflectance features. Output keeps `in_dim` channels so
    /// fused cells stay comparable with support prototypes.
    pub fn init(in_dim: usize, low_in: usize, rates: &[usize], gen: &mut ChaCha8Rng) -> Self {
        let d = in_dim;
        let low_dim = (d / 2).max(4);
        AsppParams {
            rates: rates.to_vec(),
            branch_1x1: block(d, d, 1, 1, 1, gen),
            branches: rates.iter().map(|&r| block(d, d, 3, 1, r, gen)).collect(),
            pool_proj: kaiming_conv(d, d, 1, gen),
            merge: kaiming_conv(d, d * (rates.len() + 2), 1, gen),
            low_proj: block(low_dim, low_in, 1, 1, 1, gen),
            fuse1: block(d, d + low_dim, 3, 1, 1, gen),
            fuse2: block(d, d, 3, 1, 1, gen),
        }
    }
}

impl<F: Scalar> ProjParams<F> {
    pub fn init(dim: usize, gen: &mut ChaCha8Rng) -> Self {
        ProjParams {
            proj: block(dim, dim, 1, 1, 1, gen),
        }
    }
}

// ---------------------------------------------------------------------------
// ParamSet plumbing
// ---------------------------------------------------------------------------

impl<F: Scalar> ParamSet<F> for ConvParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        f("kernel", &self.kernel);
        f("bias", &self.bias);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        f("kernel", &mut self.kernel);
        f("bias", &mut self.bias);
    }
}

impl<F: Scalar> ParamSet<F> for ConvBlock<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        f("kernel", &self.kernel);
        f("norm.gain", &self.norm.gain);
        f("norm.bias", &self.norm.bias);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        f("kernel", &mut self.kernel);
        f("norm.gain", &mut self.norm.gain);
        f("norm.bias", &mut self.norm.bias);
    }
}

impl<F: Scalar> ParamSet<F> for EncoderParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        for (prefix, b) in [
            ("stem", &self.stem),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
        ] {
            b.for_each(&mut |name, arr| f(&format!("{prefix}.{name}"), arr));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (prefix, b) in [
            ("stem", &mut self.stem),
            ("stage1", &mut self.stage1),
            ("stage2", &mut self.stage2),
            ("stage3", &mut self.stage3),
        ] {
            b.for_each_mut(&mut |name, arr| f(&format!("{prefix}.{name}"), arr));
        }
    }
}

impl<F: Scalar> ParamSet<F> for AsppParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        self.branch_1x1
            .for_each(&mut |n, a| f(&format!("branch_1x1.{n}"), a));
        for (i, b) in self.branches.iter().enumerate() {
            b.for_each(&mut |n, a| f(&format!("branch_{i}.{n}"), a));
        }
        self.pool_proj
            .for_each(&mut |n, a| f(&format!("pool_proj.{n}"), a));
        self.merge.for_each(&mut |n, a| f(&format!("merge.{n}"), a));
        self.low_proj
            .for_each(&mut |n, a| f(&format!("low_proj.{n}"), a));
        self.fuse1.for_each(&mut |n, a| f(&format!("fuse1.{n}"), a));
        self.fuse2.for_each(&mut |n, a| f(&format!("fuse2.{n}"), a));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.branch_1x1
            .for_each_mut(&mut |n, a| f(&format!("branch_1x1.{n}"), a));
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.for_each_mut(&mut |n, a| f(&format!("branch_{i}.{n}"), a));
        }
        self.pool_proj
            .for_each_mut(&mut |n, a| f(&format!("pool_proj.{n}"), a));
        self.merge
            .for_each_mut(&mut |n, a| f(&format!("merge.{n}"), a));
        self.low_proj
            .for_each_mut(&mut |n, a| f(&format!("low_proj.{n}"), a));
        self.fuse1
            .for_each_mut(&mut |n, a| f(&format!("fuse1.{n}"), a));
        self.fuse2
            .for_each_mut(&mut |n, a| f(&format!("fuse2.{n}"), a));
    }
}

impl<F: Scalar> ParamSet<F> for ProjParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        self.proj.for_each(&mut |n, a| f(&format!("proj.{n}"), a));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.proj
            .for_each_mut(&mut |n, a| f(&format!("proj.{n}"), a));
    }
}

// ---------------------------------------------------------------------------
// tape binding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub kernel: Var,
    pub gain: Var,
    pub norm_bias: Var,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone)]
pub struct EncoderVars {
    pub stem: BlockVars,
    pub stage1: BlockVars,
    pub stage2: BlockVars,
    pub stage3: BlockVars,
}

#[derive(Clone)]
pub struct AsppVars {
    pub branch_1x1: BlockVars,
    pub branches: Vec<BlockVars>,
    pub pool_proj: ConvVars,
    pub merge: ConvVars,
    pub low_proj: BlockVars,
    pub fuse1: BlockVars,
    pub fuse2: BlockVars,
}

#[derive(Clone)]
pub struct ProjVars {
    pub proj: BlockVars,
}

impl<F: Scalar> ConvParams<F> {
    pub fn bind(&self, tape: &Tape<F>) -> ConvVars {
        ConvVars {
            kernel: tape.leaf(self.kernel.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

impl<F: Scalar> ConvBlock<F> {
    pub fn bind(&self, tape: &Tape<F>) -> BlockVars {
        BlockVars {
            kernel: tape.leaf(self.kernel.clone()),
            gain: tape.leaf(self.norm.gain.clone()),
            norm_bias: tape.leaf(self.norm.bias.clone()),
            stride: self.stride,
            dilation: self.dilation,
        }
    }
}

impl<F: Scalar> EncoderParams<F> {
    pub fn bind(&self, tape: &Tape<F>) -> EncoderVars {
        EncoderVars {
            stem: self.stem.bind(tape),
            stage1: self.stage1.bind(tape),
            stage2: self.stage2.bind(tape),
            stage3: self.stage3.bind(tape),
        }
    }
}

impl<F: Scalar> AsppParams<F> {
    pub fn bind(&self, tape: &Tape<F>) -> AsppVars {
        AsppVars {
            branch_1x1: self.branch_1x1.bind(tape),
            branches: self.branches.iter().map(|b| b.bind(tape)).collect(),
            pool_proj: self.pool_proj.bind(tape),
            merge: self.merge.bind(tape),
            low_proj: self.low_proj.bind(tape),
            fuse1: self.fuse1.bind(tape),
            fuse2: self.fuse2.bind(tape),
        }
    }
}

impl<F: Scalar> ProjParams<F> {
    pub fn bind(&self, tape: &Tape<F>) -> ProjVars {
        ProjVars {
            proj: self.proj.bind(tape),
        }
    }
}

/// Vars of a block in `ParamSet` visiting order.
pub fn block_var_list(b: &BlockVars) -> [Var; 3] {
    [b.kernel, b.gain, b.norm_bias]
}

pub fn encoder_var_list(e: &EncoderVars) -> Vec<Var> {
    [&e.stem, &e.stage1, &e.stage2, &e.stage3]
        .iter()
        .flat_map(|b| block_var_list(b))
        .collect()
}

pub fn aspp_var_list(a: &AsppVars) -> Vec<Var> {
    let mut v: Vec<Var> = block_var_list(&a.branch_1x1).to_vec();
    for b in &a.branches {
        v.extend(block_var_list(b));
    }
    v.push(a.pool_proj.kernel);
    v.push(a.pool_proj.bias);
    v.push(a.merge.kernel);
    v.push(a.merge.bias);
    v.extend(block_var_list(&a.low_proj));
    v.extend(block_var_list(&a.fuse1));
    v.extend(block_var_list(&a.fuse2));
    v
}

pub fn proj_var_list(p: &ProjVars) -> Vec<Var> {
    block_var_list(&p.proj).to_vec()
}

// ---------------------------------------------------------------------------
// tape-level forward
// ---------------------------------------------------------------------------

/// Per-channel normalization over spatial positions with learned affine.
pub fn channel_norm<F: Scalar>(tape: &Tape<F>, x: Var, gain: Var, bias: Var) -> Var {
    let shape = tape.shape(x);
    let (h, w) = (shape[1], shape[2]);
    let mu = tape.spatial_mean(x);
    let centered = tape.sub(x, tape.broadcast_spatial(mu, h, w));
    let var = tape.spatial_mean(tape.mul(centered, centered));
    let inv = tape.rsqrt_eps(var, fl::<F>(NORM_EPS));
    let normed = tape.mul_chan(centered, inv);
    tape.add_chan(tape.mul_chan(normed, gain), bias)
}

fn conv_block<F: Scalar>(tape: &Tape<F>, x: Var, b: &BlockVars, pad: PadMode) -> Var {
    let c_out = tape.shape(b.kernel)[0];
    let zero_bias = tape.leaf(ArrayD::zeros(IxDyn(&[c_out])));
    let y = tape.conv2d(x, b.kernel, zero_bias, b.stride, b.dilation, pad);
    let n = channel_norm(tape, y, b.gain, b.norm_bias);
    tape.relu(n)
}

/// Encoder forward on the tape: [3, H, W] -> [C, H/8, W/8].
pub fn encode_t<F: Scalar>(tape: &Tape<F>, image: Var, enc: &EncoderVars, pad: PadMode) -> Var {
    let x = conv_block(tape, image, &enc.stem, pad);
    let x = conv_block(tape, x, &enc.stage1, pad);
    let x = conv_block(tape, x, &enc.stage2, pad);
    conv_block(tape, x, &enc.stage3, pad)
}

/// Reinterpret a [C_out, C_in, 1, 1] kernel leaf as a [C_out, C_in] matrix
/// node; gradients flow back into the kernel layout.
fn kernel_as_matrix<F: Scalar>(tape: &Tape<F>, kernel: Var, c_out: usize, c_in: usize) -> Var {
    let value = tape
        .value_owned(kernel)
        .into_shape_with_order(IxDyn(&[c_out, c_in]))
        .expect("1x1 kernel reshape");
    tape.push(
        value,
        Some(Box::new(move |_, g, sink| {
            let back = g
                .clone()
                .into_shape_with_order(IxDyn(&[g.shape()[0], g.shape()[1], 1, 1]))
                .expect("grad reshape");
            sink.add(kernel.0, back);
        })),
    )
}

/// Fusion head on the tape: query trunk + reflectance low-level features at
/// stride 8 -> fused stride-4 features with the trunk's channel count.
pub fn aspp_t<F: Scalar>(
    tape: &Tape<F>,
    query_feat: Var,
    low_feat: Var,
    aspp: &AsppVars,
    pad: PadMode,
) -> Var {
    let shape = tape.shape(query_feat);
    let (h, w) = (shape[1], shape[2]);

    let mut parts = vec![conv_block(tape, query_feat, &aspp.branch_1x1, pad)];
    for b in &aspp.branches {
        parts.push(conv_block(tape, query_feat, b, pad));
    }
    // global pooling branch: pooled vector -> 1x1 projection -> relu -> broadcast
    let pooled = tape.spatial_mean(query_feat);
    let kshape = tape.shape(aspp.pool_proj.kernel);
    let wmat = kernel_as_matrix(tape, aspp.pool_proj.kernel, kshape[0], kshape[1]);
    let projected = tape.relu(tape.affine(pooled, wmat, aspp.pool_proj.bias));
    parts.push(tape.broadcast_spatial(projected, h, w));

    let cat = tape.concat_channels(&parts);
    let merged = tape.relu(tape.conv2d(cat, aspp.merge.kernel, aspp.merge.bias, 1, 1, pad));
    let up = tape.upsample_bilinear(merged, 2);

    let low_up = tape.upsample_bilinear(low_feat, 2);
    let low = conv_block(tape, low_up, &aspp.low_proj, pad);

    let fused = tape.concat_channels(&[up, low]);
    let y = conv_block(tape, fused, &aspp.fuse1, pad);
    conv_block(tape, y, &aspp.fuse2, pad)
}

/// Plain-projection head on the tape: upsample x2 then a 1x1 block.
pub fn proj_t<F: Scalar>(tape: &Tape<F>, query_feat: Var, proj: &ProjVars, pad: PadMode) -> Var {
    let up = tape.upsample_bilinear(query_feat, 2);
    conv_block(tape, up, &proj.proj, pad)
}

// ---------------------------------------------------------------------------
// public plain operations
// ---------------------------------------------------------------------------

fn check_size(h: usize, w: usize) -> Result<()> {
    for (what, v) in [("image height", h), ("image width", w)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::NotDivisible {
                what,
                divisor: 8,
                value: v,
            });
        }
    }
    Ok(())
}

/// Encode an image into a stride-8 feature map.
pub fn encode<F: Scalar>(image: &Array3<f32>, params: &EncoderParams<F>) -> Result<FeatureMap<F>> {
    encode_padded(image, params, PadMode::Zero)
}

/// [`encode`] with an explicit border mode (circular is the
/// translation-equivariance test configuration).
pub fn encode_padded<F: Scalar>(
    image: &Array3<f32>,
    params: &EncoderParams<F>,
    pad: PadMode,
) -> Result<FeatureMap<F>> {
    let (h, w, _) = image.dim();
    check_size(h, w)?;
    let tape = Tape::new();
    let x = tape.leaf(imgmath::image_to_chw::<F>(image));
    let enc = params.bind(&tape);
    let out = encode_t(&tape, x, &enc, pad);
    Ok(FeatureMap {
        grid: tape.value_owned(out),
        stride: 8,
        origin_size: (h, w),
    })
}

/// Feature maps for a query and its supports with structural weight
/// sharing: one parameter set serves all images, the other all reflectance
/// images.
#[allow(clippy::type_complexity)]
pub fn encode_pairs<F: Scalar>(
    query: &Array3<f32>,
    query_reflectance: &Array3<f32>,
    supports: &[Array3<f32>],
    support_reflectances: &[Array3<f32>],
    rgb_params: &EncoderParams<F>,
    refl_params: &EncoderParams<F>,
) -> Result<(
    FeatureMap<F>,
    FeatureMap<F>,
    Vec<FeatureMap<F>>,
    Vec<FeatureMap<F>>,
)> {
    let dims = query.dim();
    if query_reflectance.dim() != dims
        || supports.iter().any(|s| s.dim() != dims)
        || support_reflectances.iter().any(|s| s.dim() != dims)
    {
        return Err(Error::ShapeMismatch {
            what: "encode_pairs inputs",
            expected: vec![dims.0, dims.1, dims.2],
            got: vec![],
        });
    }
    if supports.len() != support_reflectances.len() {
        return Err(Error::InvalidArgument(
            "supports and support reflectances must pair up".into(),
        ));
    }
    let f_q = encode(query, rgb_params)?;
    let f_r = encode(query_reflectance, refl_params)?;
    let f_ss = supports
        .iter()
        .map(|s| encode(s, rgb_params))
        .collect::<Result<Vec<_>>>()?;
    let f_sr = support_reflectances
        .iter()
        .map(|s| encode(s, refl_params))
        .collect::<Result<Vec<_>>>()?;
    Ok((f_q, f_r, f_ss, f_sr))
}

/// Fuse stride-8 query features with reflectance low-level features into a
/// stride-4 map.
pub fn aspp_fuse<F: Scalar>(
    query_feat: &FeatureMap<F>,
    refl_feat: &FeatureMap<F>,
    params: &AsppParams<F>,
) -> Result<FeatureMap<F>> {
    aspp_fuse_padded(query_feat, refl_feat, params, PadMode::Zero)
}

pub fn aspp_fuse_padded<F: Scalar>(
    query_feat: &FeatureMap<F>,
    refl_feat: &FeatureMap<F>,
    params: &AsppParams<F>,
    pad: PadMode,
) -> Result<FeatureMap<F>> {
    if query_feat.grid_size() != refl_feat.grid_size()
        || query_feat.origin_size != refl_feat.origin_size
    {
        return Err(Error::ShapeMismatch {
            what: "aspp_fuse inputs",
            expected: query_feat.grid.shape().to_vec(),
            got: refl_feat.grid.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let fq = tape.leaf(query_feat.grid.clone());
    let fr = tape.leaf(refl_feat.grid.clone());
    let aspp = params.bind(&tape);
    let out = aspp_t(&tape, fq, fr, &aspp, pad);
    Ok(FeatureMap {
        grid: tape.value_owned(out),
        stride: query_feat.stride / 2,
        origin_size: query_feat.origin_size,
    })
}
