//! Episodic training, evaluation, ablations, and checkpoints.
//!
//! One training iteration samples a batch of episodes, runs the full
//! pipeline on each (decomposition, paired encoders, fusion head,
//! prototypes, self-support, matching), averages the joint loss over the
//! batch, and takes one SGD-with-momentum step under a staircase learning
//! rate decay. Evaluation replays seeded episodes against a frozen
//! checkpoint and accumulates two-class IoU counts over the whole run.
//!
//! Everything is single-threaded and seeded, so training and evaluation
//! are bit-reproducible for a fixed configuration.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};

use std::io::Write;

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::data::{augment_hflip, sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::imgmath;
use crate::losses::{bce_t, query_self_loss_t, support_self_loss_t, total_loss_t, LossWeights};
use crate::network::{
    aspp_t, aspp_var_list, encode_t, encoder_var_list, proj_t, proj_var_list, AsppParams,
    AsppVars, EncoderParams, EncoderVars, FeatureMap, ProjParams, ProjVars,
    DEFAULT_DILATION_RATES,
};
use crate::protonet::{
    map_t, match_prob_t, merge_t, pfm_t, pfm_var_list, ssp_t, upsample_prob_t, PfmParams,
    PfmVars, ProtoVars, Prototype, SspConfig,
};
use crate::retinex;
use crate::rng::{self, Stream};
use crate::tensor::{cast, fl, PadMode, ParamSet, Scalar, Tape, Var};

/// Which pipeline stages are active. All three on is the full model; all
/// off is the bare prototype-matching baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub use_reflectance: bool,
    pub use_pfm: bool,
    pub use_aspp: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            use_reflectance: true,
            use_pfm: true,
            use_aspp: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_episodes: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub shot_count: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub toggles: AblationToggles,
    pub temperature: f64,
    pub channels: usize,
    pub image_size: (usize, usize),
    pub ssp: SspConfig,
    /// Smoothing scale for the decomposition; `None` picks min(H, W)/16.
    pub smoothing_sigma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 6000,
            batch_episodes: 4,
            lr0: 1e-3,
            momentum: 0.9,
            decay_every: 2000,
            decay_factor: 0.1,
            shot_count: 1,
            seed: 0,
            weights: LossWeights::default(),
            toggles: AblationToggles::default(),
            temperature: 10.0,
            channels: 64,
            image_size: (400, 400),
            ssp: SspConfig::default(),
            smoothing_sigma: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_episodes == 0 {
            return Err(Error::InvalidArgument("batch_episodes must be >= 1".into()));
        }
        if self.shot_count == 0 {
            return Err(Error::InvalidArgument("shot_count must be >= 1".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidArgument("decay_every must be >= 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay_factor must be in (0, 1), got {}",
                self.decay_factor
            )));
        }
        if !(self.lr0 > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::InvalidArgument(
                "lr0 must be > 0 and momentum in [0, 1)".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        if self.channels < 2 {
            return Err(Error::InvalidArgument("channels must be >= 2".into()));
        }
        for (what, v) in [
            ("image height", self.image_size.0),
            ("image width", self.image_size.1),
        ] {
            if v == 0 || v % 8 != 0 {
                return Err(Error::NotDivisible {
                    what,
                    divisor: 8,
                    value: v,
                });
            }
        }
        if let Some(s) = self.smoothing_sigma {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "smoothing_sigma must be > 0, got {s}"
                )));
            }
        }
        self.weights.validate()?;
        self.ssp.validate()
    }

    fn sigma_for(&self, h: usize, w: usize) -> f32 {
        match self.smoothing_sigma {
            Some(s) => s as f32,
            None => retinex::default_sigma(h, w),
        }
    }

    /// Channel count flowing through the fusion head and prototypes. When
    /// reflectance is used without the fusion gate, image and reflectance
    /// features are concatenated early and everything downstream is 2C.
    pub fn feature_dim(&self) -> usize {
        if self.toggles.use_reflectance && !self.toggles.use_pfm {
            2 * self.channels
        } else {
            self.channels
        }
    }
}

/// Staircase schedule: lr0 * decay_factor^(iter / decay_every).
pub fn lr_at(config: &TrainConfig, iteration: usize) -> f64 {
    config.lr0
        * config
            .decay_factor
            .powi((iteration / config.decay_every) as i32)
}

// ---------------------------------------------------------------------------
// model parameters
// ---------------------------------------------------------------------------

/// Every trainable parameter of the pipeline. Optional groups exist only
/// when the corresponding toggle is active.
#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub rgb_encoder: EncoderParams<F>,
    pub refl_encoder: Option<EncoderParams<F>>,
    pub aspp: Option<AsppParams<F>>,
    pub proj: Option<ProjParams<F>>,
    pub fusion: Option<PfmParams<F>>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn init(config: &TrainConfig) -> Self {
        let mut gen = rng::rng(config.seed, Stream::Init, 0);
        let c = config.channels;
        let d = config.feature_dim();
        let rgb_encoder = EncoderParams::init(c, &mut gen);
        let refl_encoder = config
            .toggles
            .use_reflectance
            .then(|| EncoderParams::init(c, &mut gen));
        let (aspp, proj) = if config.toggles.use_aspp {
            (
                Some(AsppParams::init(d, c, &DEFAULT_DILATION_RATES, &mut gen)),
                None,
            )
        } else {
            (None, Some(ProjParams::init(d, &mut gen)))
        };
        let fusion = (config.toggles.use_reflectance && config.toggles.use_pfm)
            .then(|| PfmParams::init(c, &mut gen));
        ModelParams {
            rgb_encoder,
            refl_encoder,
            aspp,
            proj,
            fusion,
        }
    }

    pub fn bind(&self, tape: &Tape<F>) -> ModelVars {
        ModelVars {
            rgb_encoder: self.rgb_encoder.bind(tape),
            refl_encoder: self.refl_encoder.as_ref().map(|e| e.bind(tape)),
            aspp: self.aspp.as_ref().map(|a| a.bind(tape)),
            proj: self.proj.as_ref().map(|p| p.bind(tape)),
            fusion: self.fusion.as_ref().map(|f| f.bind(tape)),
        }
    }
}

impl<F: Scalar> ParamSet<F> for ModelParams<F> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &ArrayD<F>)) {
        self.rgb_encoder
            .for_each(&mut |n, a| f(&format!("rgb_encoder.{n}"), a));
        if let Some(e) = &self.refl_encoder {
            e.for_each(&mut |n, a| f(&format!("refl_encoder.{n}"), a));
        }
        if let Some(a) = &self.aspp {
            a.for_each(&mut |n, arr| f(&format!("aspp.{n}"), arr));
        }
        if let Some(p) = &self.proj {
            p.for_each(&mut |n, arr| f(&format!("proj.{n}"), arr));
        }
        if let Some(pf) = &self.fusion {
            pf.for_each(&mut |n, arr| f(&format!("fusion.{n}"), arr));
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.rgb_encoder
            .for_each_mut(&mut |n, a| f(&format!("rgb_encoder.{n}"), a));
        if let Some(e) = &mut self.refl_encoder {
            e.for_each_mut(&mut |n, a| f(&format!("refl_encoder.{n}"), a));
        }
        if let Some(a) = &mut self.aspp {
            a.for_each_mut(&mut |n, arr| f(&format!("aspp.{n}"), arr));
        }
        if let Some(p) = &mut self.proj {
            p.for_each_mut(&mut |n, arr| f(&format!("proj.{n}"), arr));
        }
        if let Some(pf) = &mut self.fusion {
            pf.for_each_mut(&mut |n, arr| f(&format!("fusion.{n}"), arr));
        }
    }
}

pub struct ModelVars {
    pub rgb_encoder: EncoderVars,
    pub refl_encoder: Option<EncoderVars>,
    pub aspp: Option<AsppVars>,
    pub proj: Option<ProjVars>,
    pub fusion: Option<PfmVars>,
}

/// Vars in `ParamSet` visiting order; the optimizer and gradient checks
/// rely on this alignment.
pub fn model_var_list(vars: &ModelVars) -> Vec<Var> {
    let mut list = encoder_var_list(&vars.rgb_encoder);
    if let Some(e) = &vars.refl_encoder {
        list.extend(encoder_var_list(e));
    }
    if let Some(a) = &vars.aspp {
        list.extend(aspp_var_list(a));
    }
    if let Some(p) = &vars.proj {
        list.extend(proj_var_list(p));
    }
    if let Some(f) = &vars.fusion {
        list.extend(pfm_var_list(f));
    }
    list
}

// ---------------------------------------------------------------------------
// episode forward
// ---------------------------------------------------------------------------

struct SupportTensors<F: Scalar> {
    image: ArrayD<F>,
    reflectance: Option<ArrayD<F>>,
    mask: Array2<u8>,
}

/// Episode contents converted to engine tensors, with decomposition applied.
pub struct EpisodeTensors<F: Scalar> {
    query_image: ArrayD<F>,
    query_reflectance: Option<ArrayD<F>>,
    query_mask: Array2<u8>,
    supports: Vec<SupportTensors<F>>,
    size: (usize, usize),
}

/// Validate an episode and run the decomposition stage.
pub fn prepare_episode<F: Scalar>(
    episode: &Episode,
    config: &TrainConfig,
) -> Result<EpisodeTensors<F>> {
    let (h, w) = episode.query.size();
    for (what, v) in [("episode height", h), ("episode width", w)] {
        if v == 0 || v % 8 != 0 {
            return Err(Error::NotDivisible {
                what,
                divisor: 8,
                value: v,
            });
        }
    }
    if episode.support.is_empty() {
        return Err(Error::InvalidArgument("episode has no supports".into()));
    }
    for s in &episode.support {
        if s.size() != (h, w) {
            return Err(Error::ShapeMismatch {
                what: "support size",
                expected: vec![h, w],
                got: vec![s.size().0, s.size().1],
            });
        }
    }
    let sigma = config.sigma_for(h, w);
    let refl = config.toggles.use_reflectance;
    let decompose_to = |img: &ndarray::Array3<f32>| -> Result<ArrayD<F>> {
        let d = retinex::decompose(img, sigma)?;
        Ok(imgmath::image_to_chw::<f32>(&d.reflectance).mapv(|v| F::from(v).unwrap()))
    };
    let query_reflectance = refl.then(|| decompose_to(&episode.query.image)).transpose()?;
    let supports = episode
        .support
        .iter()
        .map(|s| {
            Ok(SupportTensors {
                image: cast::<f32, F>(&imgmath::image_to_chw::<f32>(&s.image)),
                reflectance: refl.then(|| decompose_to(&s.image)).transpose()?,
                mask: s.mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeTensors {
        query_image: cast::<f32, F>(&imgmath::image_to_chw::<f32>(&episode.query.image)),
        query_reflectance,
        query_mask: episode.query.mask.clone(),
        supports,
        size: (h, w),
    })
}

/// Everything the losses and the prediction need from one forward pass.
pub struct ForwardArtifacts {
    /// Full-resolution foreground probability.
    pub prediction: Var,
    /// Probability at the fused grid (stride 4).
    pub coarse: Var,
    /// Fused query features, stride 4.
    pub fused_query: Var,
    /// Raw support features at stride 8 (concatenated in early-fusion mode).
    pub support_feats: Vec<Var>,
    /// Raw support reflectance features (only in the gated-fusion mode).
    pub support_refl_feats: Vec<Var>,
    /// Prototype entering the self-support stage.
    pub proto: ProtoVars,
    /// Reflectance prototype (gated-fusion mode only).
    pub refl_proto: Option<ProtoVars>,
    /// Prototype after self-support augmentation.
    pub augmented: ProtoVars,
}

/// The full pipeline on the tape, honoring the ablation toggles.
pub fn forward_t<F: Scalar>(
    tape: &Tape<F>,
    vars: &ModelVars,
    ep: &EpisodeTensors<F>,
    config: &TrainConfig,
) -> ForwardArtifacts {
    let pad = PadMode::Zero;
    let t = config.toggles;
    let temperature = fl::<F>(config.temperature);

    let query = tape.leaf(ep.query_image.clone());
    let f_q = encode_t(tape, query, &vars.rgb_encoder, pad);
    let f_r = ep.query_reflectance.as_ref().map(|r| {
        let leaf = tape.leaf(r.clone());
        encode_t(tape, leaf, vars.refl_encoder.as_ref().unwrap(), pad)
    });

    // Early fusion (reflectance on, gate off): image and reflectance
    // features concatenate before a single prototype is pooled; the query
    // trunk concatenates symmetrically so cells stay comparable.
    let early_concat = t.use_reflectance && !t.use_pfm;
    let trunk = if early_concat {
        tape.concat_channels(&[f_q, f_r.unwrap()])
    } else {
        f_q
    };
    let low = match (t.use_reflectance, f_r) {
        (true, Some(r)) => r,
        _ => f_q,
    };
    let fused_query = match (&vars.aspp, &vars.proj) {
        (Some(aspp), _) => aspp_t(tape, trunk, low, aspp, pad),
        (None, Some(proj)) => proj_t(tape, trunk, proj, pad),
        _ => unreachable!("either pyramid or projection head exists"),
    };

    let mut shot_protos = Vec::with_capacity(ep.supports.len());
    let mut shot_refl_protos = Vec::with_capacity(ep.supports.len());
    let mut support_feats = Vec::with_capacity(ep.supports.len());
    let mut support_refl_feats = Vec::with_capacity(ep.supports.len());
    for s in &ep.supports {
        let img = tape.leaf(s.image.clone());
        let f_ss = encode_t(tape, img, &vars.rgb_encoder, pad);
        let f_sr = s.reflectance.as_ref().map(|r| {
            let leaf = tape.leaf(r.clone());
            encode_t(tape, leaf, vars.refl_encoder.as_ref().unwrap(), pad)
        });
        let grid_mask = imgmath::downsample_mask(&s.mask, 8);
        let feat = if early_concat {
            tape.concat_channels(&[f_ss, f_sr.unwrap()])
        } else {
            f_ss
        };
        shot_protos.push(map_t(tape, feat, &grid_mask));
        support_feats.push(feat);
        if t.use_reflectance && t.use_pfm {
            let f_sr = f_sr.unwrap();
            shot_refl_protos.push(map_t(tape, f_sr, &grid_mask));
            support_refl_feats.push(f_sr);
        }
    }
    let merged = merge_t(tape, &shot_protos);
    let (proto, refl_proto) = if let Some(fusion) = &vars.fusion {
        let merged_refl = merge_t(tape, &shot_refl_protos);
        let (p, pr) = pfm_t(tape, &merged, &merged_refl, fusion);
        (p, Some(pr))
    } else {
        (merged, None)
    };

    let augmented = ssp_t(tape, &proto, fused_query, &config.ssp);
    let coarse = match_prob_t(tape, &augmented, fused_query, temperature);
    let prediction = upsample_prob_t(tape, coarse, 4);

    ForwardArtifacts {
        prediction,
        coarse,
        fused_query,
        support_feats,
        support_refl_feats,
        proto,
        refl_proto,
        augmented,
    }
}

/// Joint loss for one episode; returns the component values for logging.
pub fn episode_loss_t<F: Scalar>(
    tape: &Tape<F>,
    vars: &ModelVars,
    ep: &EpisodeTensors<F>,
    config: &TrainConfig,
) -> (Var, [f64; 3]) {
    let art = forward_t(tape, vars, ep, config);
    let temperature = fl::<F>(config.temperature);

    let target = imgmath::mask_to_float::<F>(&ep.query_mask).into_dyn();
    let seg = bce_t(tape, art.prediction, &target);

    let grid_masks: Vec<Array2<F>> = ep
        .supports
        .iter()
        .map(|s| imgmath::mask_to_float::<F>(&imgmath::downsample_mask(&s.mask, 8)))
        .collect();
    let support = support_self_loss_t(
        tape,
        &art.proto,
        art.refl_proto.as_ref(),
        &art.support_feats,
        &art.support_refl_feats,
        &grid_masks,
        temperature,
    );

    let query_grid_mask = imgmath::downsample_mask(&ep.query_mask, 4);
    let query = query_self_loss_t(tape, art.fused_query, &query_grid_mask, temperature);

    let total = total_loss_t(tape, seg, support, query, &config.weights);
    let parts = [
        tape.scalar(seg).to_f64().unwrap(),
        tape.scalar(support).to_f64().unwrap(),
        tape.scalar(query).to_f64().unwrap(),
    ];
    (total, parts)
}

/// Result of a plain (non-training) episode forward.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    /// Foreground probability at full resolution.
    pub prediction: Array2<f32>,
    /// Foreground probability at the fused grid (stride 4).
    pub coarse: Array2<f32>,
    /// Prototype after self-support augmentation.
    pub prototype: Prototype<f32>,
    /// Fused query features.
    pub fused_query: FeatureMap<f32>,
}

/// Run the pipeline on one episode with frozen parameters.
pub fn forward_episode(
    episode: &Episode,
    params: &ModelParams<f32>,
    config: &TrainConfig,
) -> Result<EpisodeForward> {
    let ep = prepare_episode::<f32>(episode, config)?;
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let art = forward_t(&tape, &vars, &ep, config);
    let to2 = |v: Var| {
        tape.value_owned(v)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    };
    let to1 = |v: Var| {
        tape.value_owned(v)
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    };
    Ok(EpisodeForward {
        prediction: to2(art.prediction),
        coarse: to2(art.coarse),
        prototype: Prototype {
            fg: to1(art.augmented.fg),
            bg: to1(art.augmented.bg),
            fg_fallback: art.augmented.fg_fallback,
            bg_fallback: art.augmented.bg_fallback,
        },
        fused_query: FeatureMap {
            grid: tape.value_owned(art.fused_query),
            stride: 4,
            origin_size: ep.size,
        },
    })
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// Train against a custom episode source; `provider` receives the global
/// episode index (iteration * batch + slot). Flip augmentation and the
/// optimizer behave exactly as in [`train`].
pub fn train_with_episodes(
    config: &TrainConfig,
    provider: &mut dyn FnMut(usize) -> Result<Episode>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    config.validate()?;
    let mut params = ModelParams::<f32>::init(config);
    let shapes: Vec<Vec<usize>> = {
        let mut v = Vec::new();
        params.for_each(&mut |_, a| v.push(a.shape().to_vec()));
        v
    };
    let mut velocity: Vec<ArrayD<f32>> = shapes
        .iter()
        .map(|s| ArrayD::zeros(ndarray::IxDyn(s)))
        .collect();

    let batch = config.batch_episodes;
    let k = config.shot_count;
    for iteration in 0..config.iterations {
        let lr = lr_at(config, iteration);
        let mut grad_acc: Vec<ArrayD<f32>> = shapes
            .iter()
            .map(|s| ArrayD::zeros(ndarray::IxDyn(s)))
            .collect();
        let mut sums = [0.0f64; 4];
        for slot in 0..batch {
            let episode_index = iteration * batch + slot;
            let episode = provider(episode_index)?;
            let episode = flip_episode(&episode, config.seed, episode_index, k);
            let tensors = prepare_episode::<f32>(&episode, config)?;
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let (loss, parts) = episode_loss_t(&tape, &vars, &tensors, config);
            let loss_value = tape.scalar(loss) as f64;
            ensure_finite_loss(loss_value, iteration, lr)?;
            sums[0] += loss_value;
            sums[1] += parts[0];
            sums[2] += parts[1];
            sums[3] += parts[2];
            let mut grads = tape.backward(loss);
            for (slot_arr, var) in grad_acc.iter_mut().zip(model_var_list(&vars)) {
                *slot_arr += &grads.take(var, slot_arr.shape());
            }
        }
        let scale = 1.0 / batch as f32;
        let mut index = 0;
        params.for_each_mut(&mut |_, p| {
            let g = &grad_acc[index] * scale;
            let v = &mut velocity[index];
            *v *= config.momentum as f32;
            *v += &g;
            *p -= &(&*v * lr as f32);
            index += 1;
        });
        writeln!(
            log,
            "iter={} lr={} loss={:.6} seg={:.6} ls={:.6} lq={:.6}",
            iteration,
            lr,
            sums[0] / batch as f64,
            sums[1] / batch as f64,
            sums[2] / batch as f64,
            sums[3] / batch as f64,
        )
        .map_err(|e| Error::io("<loss log>", e))?;
    }
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        iteration: config.iterations as u64,
        params,
        velocity,
    })
}

/// Abort guard for a diverged optimization.
fn ensure_finite_loss(value: f64, iteration: usize, lr: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { iteration, lr })
    }
}

fn flip_episode(episode: &Episode, seed: u64, episode_index: usize, k: usize) -> Episode {
    let base = (episode_index as u64) * (k as u64 + 1);
    let support = episode
        .support
        .iter()
        .enumerate()
        .map(|(j, s)| augment_hflip(s, rng::derive(seed, Stream::Flip, base + j as u64)))
        .collect();
    let query = augment_hflip(
        &episode.query,
        rng::derive(seed, Stream::Flip, base + k as u64),
    );
    Episode {
        support,
        query,
        shot_count: episode.shot_count,
    }
}

/// Episodic training on a dataset: batches of seeded episodes with flip
/// augmentation, averaged joint loss, SGD with momentum under the
/// staircase decay. Emits one loss line per iteration.
pub fn train(config: &TrainConfig, dataset: &Dataset, log: &mut dyn Write) -> Result<Checkpoint> {
    let k = config.shot_count;
    let seed = config.seed;
    let mut provider = |index: usize| -> Result<Episode> {
        sample_episode(dataset, k, rng::derive(seed, Stream::Episode, index as u64))
    };
    train_with_episodes(config, &mut provider, log)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Dataset-level two-class IoU counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    pub fg_intersection: u64,
    pub fg_union: u64,
    pub bg_intersection: u64,
    pub bg_union: u64,
}

impl IouAccumulator {
    /// IoU of one class; an empty union counts as a perfect match.
    fn class_iou(intersection: u64, union: u64) -> f64 {
        if union == 0 {
            1.0
        } else {
            intersection as f64 / union as f64
        }
    }

    pub fn fg_iou(&self) -> f64 {
        Self::class_iou(self.fg_intersection, self.fg_union)
    }

    pub fn bg_iou(&self) -> f64 {
        Self::class_iou(self.bg_intersection, self.bg_union)
    }

    pub fn miou(&self) -> f64 {
        0.5 * (self.fg_iou() + self.bg_iou())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        self.fg_intersection += other.fg_intersection;
        self.fg_union += other.fg_union;
        self.bg_intersection += other.bg_intersection;
        self.bg_union += other.bg_union;
    }
}

/// Add one prediction/ground-truth pair to the accumulator. Inputs must be
/// binary (0/1) and same-shaped.
pub fn miou_accumulate(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    acc: &mut IouAccumulator,
) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch {
            what: "miou_accumulate",
            expected: vec![gt.dim().0, gt.dim().1],
            got: vec![pred.dim().0, pred.dim().1],
        });
    }
    for arr in [pred, gt] {
        if let Some(&bad) = arr.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinary {
                what: "miou input",
                value: bad as f64,
            });
        }
    }
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            // in the foreground union only
            (1, 1) => {
                acc.fg_intersection += 1;
                acc.fg_union += 1;
            }
            // in both unions, in neither intersection
            (1, 0) | (0, 1) => {
                acc.fg_union += 1;
                acc.bg_union += 1;
            }
            // in the background union only
            (0, 0) => {
                acc.bg_intersection += 1;
                acc.bg_union += 1;
            }
            _ => unreachable!(),
        }
    }
    Ok(())
}

/// Binarize a probability map at a threshold (strictly greater).
pub fn binarize(prob: &Array2<f32>, threshold: f32) -> Array2<u8> {
    prob.mapv(|p| u8::from(p > threshold))
}

/// Evaluation result; serialized verbatim as the report JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub episode_count: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub per_episode_ious: Vec<f64>,
}

/// Replay `episode_count` seeded episodes against a checkpoint and
/// accumulate dataset-level IoU (sum of intersections over sum of unions,
/// then the two class IoUs are averaged).
pub fn evaluate(
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    k: usize,
    episode_count: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episode_count < 1 {
        return Err(Error::InvalidArgument(
            "episode_count must be >= 1".into(),
        ));
    }
    let mut total = IouAccumulator::default();
    let mut per_episode = Vec::with_capacity(episode_count);
    for i in 0..episode_count {
        let episode = sample_episode(dataset, k, rng::derive(seed, Stream::Eval, i as u64))?;
        let fwd = forward_episode(&episode, &checkpoint.params, &checkpoint.config)?;
        let pred = binarize(&fwd.prediction, 0.5);
        let mut ep_acc = IouAccumulator::default();
        miou_accumulate(&pred, &episode.query.mask, &mut ep_acc)?;
        per_episode.push(ep_acc.miou());
        total.merge(&ep_acc);
    }
    Ok(EvalReport {
        miou: total.miou(),
        fg_iou: total.fg_iou(),
        bg_iou: total.bg_iou(),
        episode_count,
        k,
        seed,
        per_episode_ious: per_episode,
    })
}

// ---------------------------------------------------------------------------
// ablation study
// ---------------------------------------------------------------------------

/// One ablation configuration with its 1-shot and 5-shot results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub reflectance: bool,
    pub pfm: bool,
    pub aspp: bool,
    pub one_shot: EvalReport,
    pub five_shot: EvalReport,
}

/// The four toggle combinations evaluated in the component study, in the
/// order: none, reflectance, reflectance+fusion, reflectance+fusion+pyramid.
pub const ABLATION_GRID: [AblationToggles; 4] = [
    AblationToggles {
        use_reflectance: false,
        use_pfm: false,
        use_aspp: false,
    },
    AblationToggles {
        use_reflectance: true,
        use_pfm: false,
        use_aspp: false,
    },
    AblationToggles {
        use_reflectance: true,
        use_pfm: true,
        use_aspp: false,
    },
    AblationToggles {
        use_reflectance: true,
        use_pfm: true,
        use_aspp: true,
    },
];

/// Train and evaluate the four toggle combinations with a shared seed.
pub fn run_ablation(
    base_config: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    episode_count: usize,
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    for toggles in ABLATION_GRID {
        let config = TrainConfig {
            toggles,
            ..base_config.clone()
        };
        writeln!(
            log,
            "# ablation reflectance={} pfm={} aspp={}",
            toggles.use_reflectance, toggles.use_pfm, toggles.use_aspp
        )
        .map_err(|e| Error::io("<ablation log>", e))?;
        let checkpoint = train(&config, train_data, log)?;
        let one_shot = evaluate(&checkpoint, test_data, 1, episode_count, config.seed)?;
        let five_shot = evaluate(&checkpoint, test_data, 5, episode_count, config.seed)?;
        rows.push(AblationRow {
            reflectance: toggles.use_reflectance,
            pfm: toggles.use_pfm,
            aspp: toggles.use_aspp,
            one_shot,
            five_shot,
        });
    }
    Ok(rows)
}
