//! Prototypes and everything that manipulates them: masked average pooling,
//! the co-attention prototype fusion gate, K-shot merging, self-support
//! augmentation from confident query cells, and cosine matching through a
//! two-class temperature softmax.
//!
//! Prototypes come in foreground/background pairs throughout, so the final
//! softmax always has two channels to normalize over. The fusion gate
//! rescales both prototypes of a pair by (1 + alpha * W), where W is learned
//! from the concatenated pair and alpha starts at zero — the module is an
//! exact identity at initialization.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imgmath;
use crate::network::FeatureMap;
use crate::tensor::{fl, ParamSet, Scalar, Tape, Var};

const L2_EPS: f64 = 1e-12;

/// Paired foreground/background summary vectors for one class.
#[derive(Debug, Clone)]
pub struct Prototype<F: Scalar> {
    pub fg: Array1<F>,
    pub bg: Array1<F>,
    /// True when the corresponding region was empty at feature resolution
    /// and the global feature average was used instead.
    pub fg_fallback: bool,
    pub bg_fallback: bool,
}

impl<F: Scalar> Prototype<F> {
    pub fn channels(&self) -> usize {
        self.fg.len()
    }
}

/// Self-support configuration: similarity thresholds for harvesting
/// confident query cells and the blend weight toward the original prototype.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SspConfig {
    pub tau_fg: f64,
    pub tau_bg: f64,
    pub blend: f64,
}

impl Default for SspConfig {
    fn default() -> Self {
        SspConfig {
            tau_fg: 0.7,
            tau_bg: 0.6,
            blend: 0.5,
        }
    }
}

impl SspConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_fg", self.tau_fg), ("tau_bg", self.tau_bg)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in (0, 1), got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::InvalidArgument(format!(
                "blend must be in [0, 1], got {}",
                self.blend
            )));
        }
        Ok(())
    }
}

/// Parameters of the prototype fusion gate.
#[derive(Debug, Clone)]
pub struct PfmParams<F: Scalar> {
    /// 2C -> 2C mixing of the concatenated pair.
    pub mix_w: ArrayD<F>,
    pub mix_b: ArrayD<F>,
    /// 2C -> C bottleneck.
    pub f1_w: ArrayD<F>,
    pub f1_b: ArrayD<F>,
    /// C -> C head producing the gate logits.
    pub f2_w: ArrayD<F>,
    pub f2_b: ArrayD<F>,
    /// Learnable gate strength, zero at initialization.
    pub alpha: ArrayD<F>,
}

impl<F: Scalar> PfmParams<F> {
    pub fn init(channels: usize, gen: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let linear = |m: usize, n: usize, gen: &mut ChaCha8Rng| {
            let std = (2.0 / n as f64).sqrt();
            let normal = Normal::new(0.0f64, std).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(&[m, n]), |_| fl::<F>(normal.sample(gen)))
        };
        PfmParams {
            mix_w: linear(2 * c, 2 * c, gen),
            mix_b: ArrayD::zeros(IxDyn(&[2 * c])),
            f1_w: linear(c, 2 * c, gen),
            f1_b: ArrayD::zeros(IxDyn(&[c])),
            f2_w: linear(c, c, gen),
            f2_b: ArrayD::zeros(IxDyn(&[c])),
            alpha: ArrayD::zeros(IxDyn(&[])),
        }
    }
}

impl<F: Scalar> ParamSet<F> for PfmParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        f("mix.w", &self.mix_w);
        f("mix.b", &self.mix_b);
        f("f1.w", &self.f1_w);
        f("f1.b", &self.f1_b);
        f("f2.w", &self.f2_w);
        f("f2.b", &self.f2_b);
        f("alpha", &self.alpha);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        f("mix.w", &mut self.mix_w);
        f("mix.b", &mut self.mix_b);
        f("f1.w", &mut self.f1_w);
        f("f1.b", &mut self.f1_b);
        f("f2.w", &mut self.f2_w);
        f("f2.b", &mut self.f2_b);
        f("alpha", &mut self.alpha);
    }
}

#[derive(Clone, Copy)]
pub struct PfmVars {
    pub mix_w: Var,
    pub mix_b: Var,
    pub f1_w: Var,
    pub f1_b: Var,
    pub f2_w: Var,
    pub f2_b: Var,
    pub alpha: Var,
}

impl<F: Scalar> PfmParams<F> {
    pub fn bind(&self, tape: &Tape<F>) -> PfmVars {
        PfmVars {
            mix_w: tape.leaf(self.mix_w.clone()),
            mix_b: tape.leaf(self.mix_b.clone()),
            f1_w: tape.leaf(self.f1_w.clone()),
            f1_b: tape.leaf(self.f1_b.clone()),
            f2_w: tape.leaf(self.f2_w.clone()),
            f2_b: tape.leaf(self.f2_b.clone()),
            alpha: tape.leaf(self.alpha.clone()),
        }
    }
}

pub fn pfm_var_list(p: &PfmVars) -> Vec<Var> {
    vec![p.mix_w, p.mix_b, p.f1_w, p.f1_b, p.f2_w, p.f2_b, p.alpha]
}

/// Prototype as tape nodes.
#[derive(Clone, Copy)]
pub struct ProtoVars {
    pub fg: Var,
    pub bg: Var,
    pub fg_fallback: bool,
    pub bg_fallback: bool,
}

// ---------------------------------------------------------------------------
// tape-level operations
// ---------------------------------------------------------------------------

/// Masked average pooling over a [C, h, w] feature map with a mask already
/// at grid resolution (values exactly 0/1). An empty region falls back to
/// the global feature average.
pub fn map_t<F: Scalar>(tape: &Tape<F>, feat: Var, grid_mask: &Array2<u8>) -> ProtoVars {
    let shape = tape.shape(feat);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(grid_mask.dim(), (h, w), "mask/grid shape");
    let total = (h * w) as f64;
    let fg_count = grid_mask.iter().filter(|&&v| v > 0).count() as f64;
    let bg_count = total - fg_count;

    let side = |positive: bool, count: f64| -> (Var, bool) {
        if count > 0.0 {
            let m = ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |ix| {
                let active = grid_mask[[ix[1], ix[2]]] > 0;
                if active == positive {
                    F::one()
                } else {
                    F::zero()
                }
            });
            let summed = tape.spatial_sum(tape.mul_const(feat, m));
            (tape.mul_scalar(summed, fl::<F>(1.0 / count)), false)
        } else {
            let summed = tape.spatial_sum(feat);
            (tape.mul_scalar(summed, fl::<F>(1.0 / total)), true)
        }
    };
    let (fg, fg_fallback) = side(true, fg_count);
    let (bg, bg_fallback) = side(false, bg_count);
    ProtoVars {
        fg,
        bg,
        fg_fallback,
        bg_fallback,
    }
}

/// Co-attention gate applied per side: learn W from the concatenated pair
/// and rescale both prototypes by (1 + alpha * W).
pub fn pfm_t<F: Scalar>(
    tape: &Tape<F>,
    proto: &ProtoVars,
    refl_proto: &ProtoVars,
    vars: &PfmVars,
) -> (ProtoVars, ProtoVars) {
    let gate = |p: Var, pr: Var| -> Var {
        let x = tape.concat_vec(p, pr);
        let mixed = tape.affine(x, vars.mix_w, vars.mix_b);
        let norm2 = tape.sum_all(tape.mul(mixed, mixed));
        let inv = tape.rsqrt_eps(norm2, fl::<F>(L2_EPS));
        let normalized = tape.scale_by(mixed, inv);
        let hidden = tape.relu(tape.affine(normalized, vars.f1_w, vars.f1_b));
        let weights = tape.sigmoid(tape.affine(hidden, vars.f2_w, vars.f2_b));
        tape.add_scalar(tape.scale_by(weights, vars.alpha), F::one())
    };
    let fg_gate = gate(proto.fg, refl_proto.fg);
    let bg_gate = gate(proto.bg, refl_proto.bg);
    let fused = ProtoVars {
        fg: tape.mul(fg_gate, proto.fg),
        bg: tape.mul(bg_gate, proto.bg),
        fg_fallback: proto.fg_fallback,
        bg_fallback: proto.bg_fallback,
    };
    let fused_refl = ProtoVars {
        fg: tape.mul(fg_gate, refl_proto.fg),
        bg: tape.mul(bg_gate, refl_proto.bg),
        fg_fallback: refl_proto.fg_fallback,
        bg_fallback: refl_proto.bg_fallback,
    };
    (fused, fused_refl)
}

/// Arithmetic mean of K prototypes per side.
pub fn merge_t<F: Scalar>(tape: &Tape<F>, protos: &[ProtoVars]) -> ProtoVars {
    assert!(!protos.is_empty());
    let k = protos.len();
    let mean = |pick: &dyn Fn(&ProtoVars) -> Var| -> Var {
        let mut acc = pick(&protos[0]);
        for p in &protos[1..] {
            acc = tape.add(acc, pick(p));
        }
        tape.mul_scalar(acc, fl::<F>(1.0 / k as f64))
    };
    ProtoVars {
        fg: mean(&|p| p.fg),
        bg: mean(&|p| p.bg),
        fg_fallback: protos.iter().any(|p| p.fg_fallback),
        bg_fallback: protos.iter().any(|p| p.bg_fallback),
    }
}

/// Self-support refinement: cells whose cosine similarity to a prototype
/// side exceeds its threshold are averaged into a self prototype, which is
/// blended with the original. Cell selection is a non-differentiable
/// decision taken on forward values; gradients flow through the selected
/// features and the blend.
pub fn ssp_t<F: Scalar>(tape: &Tape<F>, proto: &ProtoVars, feat: Var, cfg: &SspConfig) -> ProtoVars {
    let shape = tape.shape(feat);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let feat_values = tape.value_owned(feat);

    let side = |p: Var, tau: f64| -> (Var, bool) {
        let sims = cosine_values(&feat_values, &tape.value_owned(p));
        let selected: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| sims[[y, x]] > fl::<F>(tau))
            .collect();
        if selected.is_empty() {
            return (p, false);
        }
        let count = selected.len() as f64;
        let m = {
            let mut m = ArrayD::<F>::zeros(IxDyn(&[c, h, w]));
            for &(y, x) in &selected {
                for ci in 0..c {
                    m[[ci, y, x]] = F::one();
                }
            }
            m
        };
        let self_proto =
            tape.mul_scalar(tape.spatial_sum(tape.mul_const(feat, m)), fl::<F>(1.0 / count));
        let blended = tape.add(
            tape.mul_scalar(p, fl::<F>(cfg.blend)),
            tape.mul_scalar(self_proto, fl::<F>(1.0 - cfg.blend)),
        );
        (blended, true)
    };
    let (fg, _) = side(proto.fg, cfg.tau_fg);
    let (bg, _) = side(proto.bg, cfg.tau_bg);
    ProtoVars {
        fg,
        bg,
        fg_fallback: proto.fg_fallback,
        bg_fallback: proto.bg_fallback,
    }
}

/// Foreground probability at grid resolution: a two-class softmax over
/// temperature-scaled cosine similarities collapses to
/// sigmoid(t * (s_fg - s_bg)).
pub fn match_prob_t<F: Scalar>(tape: &Tape<F>, proto: &ProtoVars, feat: Var, temperature: F) -> Var {
    let s_fg = tape.cosine_map(feat, proto.fg);
    let s_bg = tape.cosine_map(feat, proto.bg);
    let diff = tape.sub(s_fg, s_bg);
    tape.sigmoid(tape.mul_scalar(diff, temperature))
}

/// Bilinearly upsample an [h, w] probability map by an integer factor.
pub fn upsample_prob_t<F: Scalar>(tape: &Tape<F>, prob: Var, factor: usize) -> Var {
    if factor == 1 {
        return prob;
    }
    let lifted = tape.unsqueeze0(prob);
    let up = tape.upsample_bilinear(lifted, factor);
    tape.squeeze0(up)
}

/// Plain cosine similarity map (used for self-support cell selection).
pub fn cosine_values<F: Scalar>(feat: &ArrayD<F>, vec: &ArrayD<F>) -> Array2<F> {
    let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
    let nv = vec.iter().fold(F::zero(), |acc, &x| acc + x * x).sqrt();
    let mut out = Array2::<F>::zeros((h, w));
    if nv == F::zero() {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let mut dot = F::zero();
            let mut nf2 = F::zero();
            for ci in 0..c {
                let fv = feat[[ci, y, x]];
                dot += fv * vec[[ci]];
                nf2 += fv * fv;
            }
            let nf = nf2.sqrt();
            if nf > F::zero() {
                out[[y, x]] = dot / (nf * nv);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// public plain operations
// ---------------------------------------------------------------------------

fn proto_from_vars<F: Scalar>(tape: &Tape<F>, vars: &ProtoVars) -> Prototype<F> {
    let to1 = |v: Var| {
        tape.value_owned(v)
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    };
    Prototype {
        fg: to1(vars.fg),
        bg: to1(vars.bg),
        fg_fallback: vars.fg_fallback,
        bg_fallback: vars.bg_fallback,
    }
}

fn bind_proto<F: Scalar>(tape: &Tape<F>, p: &Prototype<F>) -> ProtoVars {
    ProtoVars {
        fg: tape.leaf(p.fg.clone().into_dyn()),
        bg: tape.leaf(p.bg.clone().into_dyn()),
        fg_fallback: p.fg_fallback,
        bg_fallback: p.bg_fallback,
    }
}

/// Pool a prototype pair from a feature map and a full-resolution mask.
/// The mask is downsampled to the grid with nearest-neighbour sampling.
pub fn masked_average_pool<F: Scalar>(
    feat: &FeatureMap<F>,
    mask: &Array2<u8>,
) -> Result<Prototype<F>> {
    if mask.dim() != feat.origin_size {
        return Err(Error::ShapeMismatch {
            what: "masked_average_pool mask",
            expected: vec![feat.origin_size.0, feat.origin_size.1],
            got: vec![mask.dim().0, mask.dim().1],
        });
    }
    let grid_mask = imgmath::downsample_mask(mask, feat.stride);
    let tape = Tape::new();
    let f = tape.leaf(feat.grid.clone());
    let vars = map_t(&tape, f, &grid_mask);
    Ok(proto_from_vars(&tape, &vars))
}

/// Run the fusion gate on a prototype pair.
pub fn pfm_fuse<F: Scalar>(
    proto: &Prototype<F>,
    refl_proto: &Prototype<F>,
    params: &PfmParams<F>,
) -> Result<(Prototype<F>, Prototype<F>)> {
    if proto.channels() != refl_proto.channels() {
        return Err(Error::ShapeMismatch {
            what: "pfm_fuse prototypes",
            expected: vec![proto.channels()],
            got: vec![refl_proto.channels()],
        });
    }
    let tape = Tape::new();
    let p = bind_proto(&tape, proto);
    let pr = bind_proto(&tape, refl_proto);
    let vars = params.bind(&tape);
    let (fused, fused_refl) = pfm_t(&tape, &p, &pr, &vars);
    Ok((
        proto_from_vars(&tape, &fused),
        proto_from_vars(&tape, &fused_refl),
    ))
}

/// Mean of K prototypes per side.
pub fn merge_prototypes<F: Scalar>(protos: &[Prototype<F>]) -> Result<Prototype<F>> {
    if protos.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot merge an empty prototype list".into(),
        ));
    }
    let c = protos[0].channels();
    if protos.iter().any(|p| p.channels() != c) {
        return Err(Error::InvalidArgument(
            "prototype channel counts differ".into(),
        ));
    }
    let tape = Tape::new();
    let bound: Vec<ProtoVars> = protos.iter().map(|p| bind_proto(&tape, p)).collect();
    let merged = merge_t(&tape, &bound);
    Ok(proto_from_vars(&tape, &merged))
}

/// Self-support augmentation of a prototype from confident query cells.
pub fn ssp_augment<F: Scalar>(
    proto: &Prototype<F>,
    query_feat: &FeatureMap<F>,
    cfg: &SspConfig,
) -> Result<Prototype<F>> {
    cfg.validate()?;
    if proto.channels() != query_feat.channels() {
        return Err(Error::ShapeMismatch {
            what: "ssp_augment",
            expected: vec![proto.channels()],
            got: vec![query_feat.channels()],
        });
    }
    let tape = Tape::new();
    let p = bind_proto(&tape, proto);
    let f = tape.leaf(query_feat.grid.clone());
    let out = ssp_t(&tape, &p, f, cfg);
    Ok(proto_from_vars(&tape, &out))
}

/// Full-resolution foreground probability map for a prototype against a
/// feature map, upsampled bilinearly from the grid.
pub fn match_features<F: Scalar>(
    proto: &Prototype<F>,
    feat: &FeatureMap<F>,
    temperature: f64,
) -> Result<Array2<F>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if proto.channels() != feat.channels() {
        return Err(Error::ShapeMismatch {
            what: "match_features",
            expected: vec![proto.channels()],
            got: vec![feat.channels()],
        });
    }
    let tape = Tape::new();
    let p = bind_proto(&tape, proto);
    let f = tape.leaf(feat.grid.clone());
    let prob = match_prob_t(&tape, &p, f, fl::<F>(temperature));
    let full = upsample_prob_t(&tape, prob, feat.stride);
    Ok(tape
        .value_owned(full)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}
