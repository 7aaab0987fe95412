//! Track-level AP / AR with greedy score-ordered matching.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrack {
    pub category: usize,
    pub score: f64,
    /// `T × H_m × W_m`, flattened.
    pub masks: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub category: usize,
    pub masks: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPredictions {
    pub clip_id: String,
    pub tracks: Vec<PredictedTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipGroundTruth {
    pub clip_id: String,
    pub tracks: Vec<GroundTruthTrack>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    /// AP of every evaluated category, keyed by category id.
    pub per_category: IndexMap<usize, f64>,
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// `Σ_t |p ∩ g| / Σ_t |p ∪ g|` over the flattened track.
pub fn track_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err("track_iou", format!("{} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// 101-point interpolated AP from the TP flags of score-ordered detections.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for j in 0..101 {
        let r = j as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

struct Det {
    clip: usize,
    track: usize,
    score: f64,
}

/// Greedy matching of score-ordered detections of one category; returns
/// the TP flag of each detection.
fn greedy(dets: &[Det], ious: &[Vec<Vec<f64>>], gts_of_clip: &[Vec<usize>], thr: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts_of_clip.iter().map(|g| vec![false; g.len()]).collect();
    dets.iter()
        .map(|d| {
            let row = &ious[d.clip][d.track];
            let mut best: Option<(usize, f64)> = None;
            for (j, &iou) in row.iter().enumerate() {
                if taken[d.clip][j] || iou < thr {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[d.clip][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Evaluates predictions against ground truth over `categories`.
///
/// Predictions are ranked by score, ties by clip id then track index. For
/// `AR_k` only the `k` best predictions of each clip are kept. Categories
/// without ground truth are skipped; results are percentages.
pub fn evaluate(
    preds: &[ClipPredictions],
    gts: &[ClipGroundTruth],
    categories: &[usize],
) -> Result<EvalResult> {
    let clip_index: IndexMap<&str, usize> = gts
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clip_id.as_str(), i))
        .collect();
    if clip_index.len() != gts.len() {
        return Err(Error::InvalidArgument {
            arg: "gts",
            reason: "duplicate clip id".into(),
        });
    }
    let mut pred_of_clip: Vec<Option<&ClipPredictions>> = vec![None; gts.len()];
    for p in preds {
        let &i = clip_index
            .get(p.clip_id.as_str())
            .ok_or_else(|| Error::UnknownClip(p.clip_id.clone()))?;
        if pred_of_clip[i].is_some() {
            return Err(Error::InvalidArgument {
                arg: "preds",
                reason: format!("clip `{}` listed twice", p.clip_id),
            });
        }
        if let Some(t) = p.tracks.iter().find(|t| !t.score.is_finite()) {
            return Err(Error::NonFinite(format!("score {} in clip `{}`", t.score, p.clip_id)));
        }
        pred_of_clip[i] = Some(p);
    }

    // Rank of each prediction within its clip, for AR_k truncation.
    let ranks: Vec<Vec<usize>> = pred_of_clip
        .iter()
        .map(|p| {
            let tracks = p.map_or(&[][..], |p| &p.tracks[..]);
            let mut order: Vec<usize> = (0..tracks.len()).collect();
            order.sort_by(|&a, &b| tracks[b].score.total_cmp(&tracks[a].score).then(a.cmp(&b)));
            let mut rank = vec![0; tracks.len()];
            for (r, &i) in order.iter().enumerate() {
                rank[i] = r;
            }
            rank
        })
        .collect();

    let thresholds = iou_thresholds();
    let mut per_category = IndexMap::new();
    let (mut ap, mut ap50, mut ap75, mut ar1, mut ar10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &cat in categories {
        let gts_of_clip: Vec<Vec<usize>> = gts
            .iter()
            .map(|c| {
                (0..c.tracks.len())
                    .filter(|&j| c.tracks[j].category == cat)
                    .collect()
            })
            .collect();
        let num_gt: usize = gts_of_clip.iter().map(Vec::len).sum();
        if num_gt == 0 {
            continue;
        }
        let mut ious: Vec<Vec<Vec<f64>>> = Vec::with_capacity(gts.len());
        let mut dets = Vec::new();
        for (ci, p) in pred_of_clip.iter().enumerate() {
            let tracks = p.map_or(&[][..], |p| &p.tracks[..]);
            let mut rows = Vec::with_capacity(tracks.len());
            for (ti, t) in tracks.iter().enumerate() {
                if t.category == cat {
                    dets.push(Det {
                        clip: ci,
                        track: ti,
                        score: t.score,
                    });
                    let row = gts_of_clip[ci]
                        .iter()
                        .map(|&j| track_iou(&t.masks, &gts[ci].tracks[j].masks))
                        .collect::<Result<Vec<_>>>()?;
                    rows.push(row);
                } else {
                    rows.push(Vec::new());
                }
            }
            ious.push(rows);
        }
        dets.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| gts[a.clip].clip_id.cmp(&gts[b.clip].clip_id))
                .then(a.track.cmp(&b.track))
        });
        let mut cat_ap = 0.0;
        let (mut r1, mut r10) = (0.0, 0.0);
        for &thr in &thresholds {
            let tp = greedy(&dets, &ious, &gts_of_clip, thr);
            let a = interpolated_ap(&tp, num_gt);
            cat_ap += a;
            if thr == thresholds[0] {
                ap50 += a;
            }
            if thr == 0.75 {
                ap75 += a;
            }
            for (k, acc) in [(1usize, &mut r1), (10, &mut r10)] {
                let kept: Vec<Det> = dets
                    .iter()
                    .filter(|d| ranks[d.clip][d.track] < k)
                    .map(|d| Det {
                        clip: d.clip,
                        track: d.track,
                        score: d.score,
                    })
                    .collect();
                let hits = greedy(&kept, &ious, &gts_of_clip, thr).iter().filter(|&&t| t).count();
                *acc += hits as f64 / num_gt as f64;
            }
        }
        let n = thresholds.len() as f64;
        per_category.insert(cat, 100.0 * cat_ap / n);
        ap += cat_ap / n;
        ar1 += r1 / n;
        ar10 += r10 / n;
    }
    let m = per_category.len();
    if m == 0 {
        return Ok(EvalResult::default());
    }
    let s = 100.0 / m as f64;
    Ok(EvalResult {
        ap: ap * s,
        ap50: ap50 * s,
        ap75: ap75 * s,
        ar1: ar1 * s,
        ar10: ar10 * s,
        per_category,
    })
}
