//! Set-prediction loss: mask, classification and taxonomy terms under a
//! Hungarian assignment.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{DecoderOutput, InstancePredictionSet};
use crate::error::{shape_err, Error, Result};
use crate::matching::{cost_matrix, hungarian_match, CostWeights, MatchAssignment};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub taxo: f64,
    /// Weight of the no-object class in both cross-entropies.
    pub no_object: f64,
    /// Weight of the auxiliary presence loss on the taxonomy scores.
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            taxo: 0.5,
            no_object: 0.1,
            score: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub mask: f64,
    pub cls: f64,
    pub taxo: f64,
    pub score: f64,
    pub total: f64,
}

/// Ground truth of one clip at mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackTargets {
    /// Global category of each track.
    pub categories: Vec<usize>,
    /// One flattened `T·H_m·W_m` binary mask per row.
    pub masks: Mat,
}

/// Graph handles of the loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mask: Var,
    pub cls: Var,
    pub taxo: Option<Var>,
    pub score: Option<Var>,
    pub total: Var,
}

/// Everything besides the predictions that shapes the loss.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    /// Allowed classes including no-object (length `K+1`); `None` keeps the full union.
    pub allowed: Option<&'a [bool]>,
    pub weights: LossWeights,
}

fn class_targets(
    n: usize,
    no_object: usize,
    assignment: &MatchAssignment,
    targets: &TrackTargets,
    no_object_weight: f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut cls = vec![no_object; n];
    let mut w = vec![no_object_weight; n];
    for &(q, t) in &assignment.pairs {
        cls[q] = targets.categories[t];
        w[q] = 1.0;
    }
    (cls, w)
}

/// Builds the loss on the graph.
///
/// `taxo_assignment` is the assignment for the taxonomy term (the shared one
/// unless separate matching is enabled). `score_logits` with presence targets
/// adds the auxiliary score term when its weight is positive.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    g: &mut Graph,
    out: &DecoderOutput,
    targets: &TrackTargets,
    assignment: &MatchAssignment,
    taxo_assignment: &MatchAssignment,
    score: Option<(Var, &[f64], &[bool])>,
    ctx: LossContext<'_>,
) -> Result<(LossVars, LossBreakdown)> {
    let (n, k1) = g.shape(out.class_logits);
    let gt = targets.categories.len();
    if targets.masks.rows() != gt {
        return Err(shape_err(
            "total_loss",
            format!("{gt} categories, {} masks", targets.masks.rows()),
        ));
    }
    assignment.validate(n, gt)?;
    taxo_assignment.validate(n, gt)?;
    if let Some(&c) = targets.categories.iter().find(|&&c| c + 1 >= k1) {
        return Err(Error::BadAssignment(format!("track category {c} of {}", k1 - 1)));
    }
    let w = ctx.weights;

    let (mask, bce, dice) = if gt == 0 {
        let z = g.leaf(Mat::zeros(1, 1));
        (z, 0.0, 0.0)
    } else {
        let rows = g.gather_rows(out.mask_logits, &assignment.query_of_track())?;
        let b = g.bce_rows(rows, &targets.masks)?;
        let d = g.dice_rows(rows, &targets.masks)?;
        let bm = g.mean(b);
        let dm = g.mean(d);
        let (bv, dv) = (g.scalar(bm), g.scalar(dm));
        (g.lin_comb(&[(bm, 1.0), (dm, 1.0)])?, bv, dv)
    };

    let (tc, tw) = class_targets(n, k1 - 1, assignment, targets, w.no_object);
    let cls = g.cross_entropy(out.class_logits, &tc, &tw, ctx.allowed)?;

    let mut terms = vec![(mask, 1.0), (cls, w.cls)];
    let taxo = match out.taxo_logits {
        Some(first) if w.taxo > 0.0 => {
            let (xc, xw) = class_targets(n, k1 - 1, taxo_assignment, targets, w.no_object);
            let mut parts = vec![g.cross_entropy(first, &xc, &xw, ctx.allowed)?];
            for &aux in &out.taxo_aux {
                parts.push(g.cross_entropy(aux, &xc, &xw, ctx.allowed)?);
            }
            let m = parts.len() as f64;
            let avg: Vec<(Var, f64)> = parts.iter().map(|&p| (p, 1.0 / m)).collect();
            let t = if parts.len() == 1 { parts[0] } else { g.lin_comb(&avg)? };
            terms.push((t, w.taxo));
            Some(t)
        }
        _ => None,
    };

    let score_var = match score {
        Some((logits, presence, mask)) if w.score > 0.0 => {
            let k = g.shape(logits).0;
            if presence.len() != k || mask.len() != k {
                return Err(shape_err(
                    "score_loss",
                    format!("{k} scores, {} targets, {} mask", presence.len(), mask.len()),
                ));
            }
            let tgt = Mat::from_vec(k, 1, presence.to_vec())?;
            let per = g.bce_rows(logits, &tgt)?;
            let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let s = g.weighted_mean(per, &weights)?;
            terms.push((s, w.score));
            Some(s)
        }
        _ => None,
    };

    let total = g.lin_comb(&terms)?;
    let breakdown = LossBreakdown {
        bce,
        dice,
        mask: g.scalar(mask),
        cls: g.scalar(cls),
        taxo: taxo.map_or(0.0, |t| g.scalar(t)),
        score: score_var.map_or(0.0, |s| g.scalar(s)),
        total: g.scalar(total),
    };
    Ok((
        LossVars {
            mask,
            cls,
            taxo,
            score: score_var,
            total,
        },
        breakdown,
    ))
}

/// Shared assignment from final-head costs.
pub fn match_predictions(
    class_logits: &Mat,
    mask_logits: &Mat,
    targets: &TrackTargets,
    allowed: Option<&[bool]>,
    w: CostWeights,
) -> Result<MatchAssignment> {
    let c = cost_matrix(
        class_logits,
        mask_logits,
        &targets.categories,
        &targets.masks,
        allowed,
        w,
    )?;
    hungarian_match(&c)
}

/// Loss of plain-value predictions under a given assignment.
pub fn total_loss(
    preds: &InstancePredictionSet,
    targets: &TrackTargets,
    assignment: &MatchAssignment,
    ctx: LossContext<'_>,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let out = DecoderOutput {
        class_logits: g.leaf(preds.class_logits.clone()),
        taxo_logits: preds.taxo_logits.as_ref().map(|t| g.leaf(t.clone())),
        taxo_aux: Vec::new(),
        mask_logits: g.leaf(preds.mask_logits.clone()),
        queries: g.leaf(preds.query_embeddings.clone()),
    };
    Ok(build_loss(&mut g, &out, targets, assignment, assignment, None, ctx)?.1)
}
