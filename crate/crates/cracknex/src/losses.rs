//! Training losses: pixelwise binary cross-entropy on the query prediction,
//! plus two self-support terms that push prototypes to segment the maps
//! they were pooled from.
//!
//! Cosine similarity maps are never fed to the cross-entropy directly —
//! they pass through the same two-class temperature softmax as the
//! prediction head, so every BCE input is a probability.

use ndarray::{Array2, ArrayD};

use crate::error::{Error, Result};
use crate::imgmath;
use crate::network::FeatureMap;
use crate::protonet::{map_t, match_prob_t, ProtoVars, Prototype};
use crate::tensor::{fl, Scalar, Tape, Var};

/// Probability clamp applied before the logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the self-support terms in the joint objective.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// tape-level
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy of a probability map against a constant
/// target, with probabilities clamped to [PROB_EPS, 1 - PROB_EPS].
pub fn bce_t<F: Scalar>(tape: &Tape<F>, prob: Var, target: &ArrayD<F>) -> Var {
    let eps = fl::<F>(PROB_EPS);
    let p = tape.clamp(prob, eps, F::one() - eps);
    let pos = tape.mul_const(tape.ln(p), target.clone());
    let one_minus_p = tape.add_scalar(tape.mul_scalar(p, -F::one()), F::one());
    let neg_target = target.mapv(|v| F::one() - v);
    let neg = tape.mul_const(tape.ln(one_minus_p), neg_target);
    tape.mul_scalar(tape.mean_all(tape.add(pos, neg)), -F::one())
}

/// Self-support loss over the supports: each prototype must segment the
/// feature map it was pooled from, at grid resolution. The image and
/// reflectance terms are summed per shot; shots are averaged.
pub fn support_self_loss_t<F: Scalar>(
    tape: &Tape<F>,
    proto: &ProtoVars,
    refl_proto: Option<&ProtoVars>,
    support_feats: &[Var],
    support_refl_feats: &[Var],
    grid_masks: &[Array2<F>],
    temperature: F,
) -> Var {
    assert!(!support_feats.is_empty());
    assert_eq!(support_feats.len(), grid_masks.len());
    let mut acc: Option<Var> = None;
    for (k, (&feat, mask)) in support_feats.iter().zip(grid_masks).enumerate() {
        let prob = match_prob_t(tape, proto, feat, temperature);
        let mut term = bce_t(tape, prob, &mask.clone().into_dyn());
        if let Some(rp) = refl_proto {
            let prob_r = match_prob_t(tape, rp, support_refl_feats[k], temperature);
            let refl_term = bce_t(tape, prob_r, &mask.clone().into_dyn());
            term = tape.add(term, refl_term);
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    tape.mul_scalar(acc.unwrap(), fl::<F>(1.0 / support_feats.len() as f64))
}

/// Query self-support loss: pool a prototype from the query features with
/// the query mask, then ask it to segment those same features.
pub fn query_self_loss_t<F: Scalar>(
    tape: &Tape<F>,
    query_feat: Var,
    grid_mask: &Array2<u8>,
    temperature: F,
) -> Var {
    let proto = map_t(tape, query_feat, grid_mask);
    let prob = match_prob_t(tape, &proto, query_feat, temperature);
    let target = imgmath::mask_to_float::<F>(grid_mask).into_dyn();
    bce_t(tape, prob, &target)
}

/// Joint objective: seg + lambda1 * support + lambda2 * query.
pub fn total_loss_t<F: Scalar>(
    tape: &Tape<F>,
    seg: Var,
    support: Var,
    query: Var,
    weights: &LossWeights,
) -> Var {
    let s = tape.mul_scalar(support, fl::<F>(weights.lambda1));
    let q = tape.mul_scalar(query, fl::<F>(weights.lambda2));
    tape.add(seg, tape.add(s, q))
}

// ---------------------------------------------------------------------------
// public plain operations
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy between a probability map and a binary target.
pub fn bce<F: Scalar>(pred: &Array2<F>, target: &Array2<F>) -> Result<F> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch {
            what: "bce",
            expected: vec![pred.dim().0, pred.dim().1],
            got: vec![target.dim().0, target.dim().1],
        });
    }
    let tape = Tape::new();
    let p = tape.leaf(pred.clone().into_dyn());
    let loss = bce_t(&tape, p, &target.clone().into_dyn());
    Ok(tape.scalar(loss))
}

/// Self-support loss over K supports; `refl_proto`/`support_refl_feats` may
/// be omitted together when the reflectance branch is disabled.
pub fn support_self_loss<F: Scalar>(
    proto: &Prototype<F>,
    refl_proto: Option<&Prototype<F>>,
    support_feats: &[FeatureMap<F>],
    support_refl_feats: &[FeatureMap<F>],
    masks: &[Array2<u8>],
    temperature: f64,
) -> Result<F> {
    if support_feats.is_empty() {
        return Err(Error::InvalidArgument("no support features".into()));
    }
    if support_feats.len() != masks.len()
        || (refl_proto.is_some() && support_refl_feats.len() != support_feats.len())
    {
        return Err(Error::ShapeMismatch {
            what: "support_self_loss inputs",
            expected: vec![support_feats.len()],
            got: vec![masks.len(), support_refl_feats.len()],
        });
    }
    for (f, m) in support_feats.iter().zip(masks) {
        if m.dim() != f.origin_size {
            return Err(Error::ShapeMismatch {
                what: "support mask",
                expected: vec![f.origin_size.0, f.origin_size.1],
                got: vec![m.dim().0, m.dim().1],
            });
        }
    }
    let tape = Tape::new();
    let bind = |p: &Prototype<F>| ProtoVars {
        fg: tape.leaf(p.fg.clone().into_dyn()),
        bg: tape.leaf(p.bg.clone().into_dyn()),
        fg_fallback: p.fg_fallback,
        bg_fallback: p.bg_fallback,
    };
    let pv = bind(proto);
    let rv = refl_proto.map(bind);
    let feats: Vec<Var> = support_feats
        .iter()
        .map(|f| tape.leaf(f.grid.clone()))
        .collect();
    let refl_feats: Vec<Var> = support_refl_feats
        .iter()
        .map(|f| tape.leaf(f.grid.clone()))
        .collect();
    let grid_masks: Vec<Array2<F>> = support_feats
        .iter()
        .zip(masks)
        .map(|(f, m)| imgmath::mask_to_float::<F>(&imgmath::downsample_mask(m, f.stride)))
        .collect();
    let loss = support_self_loss_t(
        &tape,
        &pv,
        rv.as_ref(),
        &feats,
        &refl_feats,
        &grid_masks,
        fl::<F>(temperature),
    );
    Ok(tape.scalar(loss))
}

/// Query self-support loss at the fused feature grid's resolution.
pub fn query_self_loss<F: Scalar>(
    query_feat: &FeatureMap<F>,
    query_mask: &Array2<u8>,
    temperature: f64,
) -> Result<F> {
    if query_mask.dim() != query_feat.origin_size {
        return Err(Error::ShapeMismatch {
            what: "query mask",
            expected: vec![query_feat.origin_size.0, query_feat.origin_size.1],
            got: vec![query_mask.dim().0, query_mask.dim().1],
        });
    }
    let tape = Tape::new();
    let f = tape.leaf(query_feat.grid.clone());
    let grid_mask = imgmath::downsample_mask(query_mask, query_feat.stride);
    let loss = query_self_loss_t(&tape, f, &grid_mask, fl::<F>(temperature));
    Ok(tape.scalar(loss))
}

/// Weighted sum of the three loss components.
pub fn total_loss(seg: f64, support: f64, query: f64, weights: &LossWeights) -> f64 {
    seg + weights.lambda1 * support + weights.lambda2 * query
}
