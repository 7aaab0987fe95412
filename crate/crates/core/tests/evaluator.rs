//! Track AP/AR against a direct transcription of the protocol.

mod common;

use common::rng;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use taxovis::eval::{evaluate, ClipGroundTruth, ClipPredictions, EvalResult, GroundTruthTrack, PredictedTrack};

const TOL: f64 = 1e-9;

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(clip, track, score)` of one category, best first.
fn ranked(preds: &[ClipPredictions], gts: &[ClipGroundTruth], cat: usize, keep: Option<usize>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for p in preds {
        let ci = gts.iter().position(|g| g.clip_id == p.clip_id).unwrap();
        let mut order: Vec<usize> = (0..p.tracks.len()).collect();
        order.sort_by(|&a, &b| p.tracks[b].score.partial_cmp(&p.tracks[a].score).unwrap().then(a.cmp(&b)));
        let allowed: Vec<usize> = order.into_iter().take(keep.unwrap_or(usize::MAX)).collect();
        for (ti, t) in p.tracks.iter().enumerate() {
            if t.category == cat && allowed.contains(&ti) {
                out.push((ci, ti, t.score));
            }
        }
    }
    out.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(gts[a.0].clip_id.cmp(&gts[b.0].clip_id))
            .then(a.1.cmp(&b.1))
    });
    out
}

fn tp_flags(dets: &[(usize, usize, f64)], preds: &[ClipPredictions], gts: &[ClipGroundTruth], cat: usize, thr: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.tracks.len()]).collect();
    let mut flags = Vec::new();
    for &(ci, ti, _) in dets {
        let p = preds.iter().find(|p| p.clip_id == gts[ci].clip_id).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[ci].tracks.iter().enumerate() {
            if g.category != cat || used[ci][j] {
                continue;
            }
            let v = iou(&p.tracks[ti].masks, &g.masks);
            if v >= thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[ci][j] = true;
        }
        flags.push(best.is_some());
    }
    flags
}

/// AP as the mean over 101 recall levels of the best precision at any
/// operating point reaching that recall.
fn ap_direct(tp: &[bool], num_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut hits = 0;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        points.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    (0..=100)
        .map(|j| {
            let r = j as f64 / 100.0;
            points.iter().filter(|(rc, _)| *rc >= r).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn oracle(preds: &[ClipPredictions], gts: &[ClipGroundTruth], cats: &[usize]) -> EvalResult {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut res = EvalResult::default();
    let mut counted = 0;
    for &cat in cats {
        let num_gt: usize = gts.iter().map(|g| g.tracks.iter().filter(|t| t.category == cat).count()).sum();
        if num_gt == 0 {
            continue;
        }
        counted += 1;
        let all = ranked(preds, gts, cat, None);
        let top1 = ranked(preds, gts, cat, Some(1));
        let top10 = ranked(preds, gts, cat, Some(10));
        let (mut a, mut r1, mut r10) = (0.0, 0.0, 0.0);
        for (i, &thr) in thresholds.iter().enumerate() {
            let thr = (thr * 100.0).round() / 100.0;
            let ap = ap_direct(&tp_flags(&all, preds, gts, cat, thr), num_gt);
            a += ap / 10.0;
            if i == 0 {
                res.ap50 += ap;
            }
            if i == 5 {
                res.ap75 += ap;
            }
            let recall = |d: &[(usize, usize, f64)]| tp_flags(d, preds, gts, cat, thr).iter().filter(|&&t| t).count() as f64 / num_gt as f64;
            r1 += recall(&top1) / 10.0;
            r10 += recall(&top10) / 10.0;
        }
        res.ap += a;
        res.ar1 += r1;
        res.ar10 += r10;
        res.per_category.insert(cat, 100.0 * a);
    }
    let m = counted.max(1) as f64;
    res.ap = 100.0 * res.ap / m;
    res.ap50 = 100.0 * res.ap50 / m;
    res.ap75 = 100.0 * res.ap75 / m;
    res.ar1 = 100.0 * res.ar1 / m;
    res.ar10 = 100.0 * res.ar10 / m;
    res
}

fn rand_mask(r: &mut ChaCha8Rng, len: usize, density: f64) -> Vec<bool> {
    (0..len).map(|_| r.gen_bool(density)).collect()
}

/// Masks are perturbed copies of ground truth so every IoU range occurs.
fn micro_case(seed: u64) -> (Vec<ClipPredictions>, Vec<ClipGroundTruth>, Vec<usize>) {
    let mut r = rng(seed);
    let len = r.gen_range(4..=12);
    let cats = r.gen_range(1..=3);
    let clips = r.gen_range(1..=3);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for c in 0..clips {
        let id = format!("clip-{}", clips - c);
        let tracks: Vec<GroundTruthTrack> = (0..r.gen_range(0..=3))
            .map(|_| GroundTruthTrack {
                category: r.gen_range(0..cats),
                masks: rand_mask(&mut r, len, 0.5),
            })
            .collect();
        let mut p = Vec::new();
        for _ in 0..r.gen_range(0..=12) {
            let masks = if !tracks.is_empty() && r.gen_bool(0.7) {
                let src = &tracks[r.gen_range(0..tracks.len())].masks;
                src.iter().map(|&b| if r.gen_bool(0.15) { !b } else { b }).collect()
            } else {
                rand_mask(&mut r, len, 0.4)
            };
            p.push(PredictedTrack {
                category: r.gen_range(0..cats),
                score: r.gen_range(0..6) as f64 / 5.0,
                masks,
            });
        }
        gts.push(ClipGroundTruth { clip_id: id.clone(), tracks });
        preds.push(ClipPredictions { clip_id: id, tracks: p });
    }
    (preds, gts, (0..cats).collect())
}

fn close(a: &EvalResult, b: &EvalResult) -> bool {
    let f = |x: f64, y: f64| (x - y).abs() < TOL;
    f(a.ap, b.ap)
        && f(a.ap50, b.ap50)
        && f(a.ap75, b.ap75)
        && f(a.ar1, b.ar1)
        && f(a.ar10, b.ar10)
        && a.per_category.len() == b.per_category.len()
        && a.per_category.iter().all(|(k, v)| f(*v, b.per_category[k]))
}

fn micro_cases_match_the_protocol_oracle() {
    let mut informative = 0;
    for seed in 0..150 {
        let (preds, gts, cats) = micro_case(seed);
        let got = evaluate(&preds, &gts, &cats).unwrap();
        let want = oracle(&preds, &gts, &cats);
        assert!(close(&got, &want), "seed {seed}: {got:?} vs {want:?}");
        informative += (got.ap > 0.0 && got.ap < 100.0 && got.ar1 < got.ar10) as usize;
    }
    assert!(informative >= 30, "only {informative} cases with partial scores");
}

fn perfect_predictions_score_100() {
    let (_, gts, cats) = micro_case(3);
    let preds: Vec<ClipPredictions> = gts
        .iter()
        .map(|g| ClipPredictions {
            clip_id: g.clip_id.clone(),
            tracks: g
                .tracks
                .iter()
                .map(|t| PredictedTrack { category: t.category, score: 1.0, masks: t.masks.clone() })
                .collect(),
        })
        .collect();
    let r = evaluate(&preds, &gts, &cats).unwrap();
    if !r.per_category.is_empty() && gts.iter().all(|g| g.tracks.iter().all(|t| t.masks.iter().any(|&b| b))) {
        assert!((r.ap - 100.0).abs() < TOL && (r.ar10 - 100.0).abs() < TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    fn score_scale_invariance(seed in 0u64..10_000, scale in 0.01f64..100.0, shift in -3.0f64..3.0) {
        let (preds, gts, cats) = micro_case(seed);
        let base = evaluate(&preds, &gts, &cats).unwrap();
        let moved: Vec<ClipPredictions> = preds
            .iter()
            .map(|p| ClipPredictions {
                clip_id: p.clip_id.clone(),
                tracks: p
                    .tracks
                    .iter()
                    .map(|t| PredictedTrack { score: (t.score * 5.0).round() * scale + shift, ..t.clone() })
                    .collect(),
            })
            .collect();
        prop_assert_eq!(evaluate(&moved, &gts, &cats).unwrap(), base);
    }

    fn removing_a_false_positive_never_lowers_ap(seed in 0u64..10_000) {
        let (preds, gts, cats) = micro_case(seed);
        let base = evaluate(&preds, &gts, &cats).unwrap();
        for (ci, p) in preds.iter().enumerate() {
            for (ti, t) in p.tracks.iter().enumerate() {
                let g = gts.iter().find(|g| g.clip_id == p.clip_id).unwrap();
                let useless = g.tracks.iter().all(|gt| gt.category != t.category || iou(&t.masks, &gt.masks) < 0.5);
                if !useless {
                    continue;
                }
                let mut fewer = preds.clone();
                fewer[ci].tracks.remove(ti);
                let r = evaluate(&fewer, &gts, &cats).unwrap();
                prop_assert!(r.ap50 >= base.ap50 - TOL);
            }
        }
    }

    fn metrics_are_bounded_and_recall_grows_with_k(seed in 0u64..10_000) {
        let (preds, gts, cats) = micro_case(seed);
        let r = evaluate(&preds, &gts, &cats).unwrap();
        for v in [r.ap, r.ap50, r.ap75, r.ar1, r.ar10] {
            prop_assert!((0.0..=100.0 + TOL).contains(&v));
        }
        prop_assert!(r.ar1 <= r.ar10 + TOL);
        prop_assert!(r.ap75 <= r.ap50 + TOL);
    }
}

/// Every check above, callable outside the test harness.
#[allow(dead_code)]
pub fn checks() -> Vec<(&'static str, fn())> {
    vec![
        ("micro_cases_match_the_protocol_oracle", micro_cases_match_the_protocol_oracle),
        ("perfect_predictions_score_100", perfect_predictions_score_100),
        ("score_scale_invariance", score_scale_invariance),
        ("removing_a_false_positive_never_lowers_ap", removing_a_false_positive_never_lowers_ap),
        ("metrics_are_bounded_and_recall_grows_with_k", metrics_are_bounded_and_recall_grows_with_k),
    ]
}

#[cfg(test)]
mod harness {
    #[test]
    fn micro_cases_match_the_protocol_oracle() {
        super::micro_cases_match_the_protocol_oracle()
    }
    #[test]
    fn perfect_predictions_score_100() {
        super::perfect_predictions_score_100()
    }
    #[test]
    fn score_scale_invariance() {
        super::score_scale_invariance()
    }
    #[test]
    fn removing_a_false_positive_never_lowers_ap() {
        super::removing_a_false_positive_never_lowers_ap()
    }
    #[test]
    fn metrics_are_bounded_and_recall_grows_with_k() {
        super::metrics_are_bounded_and_recall_grows_with_k()
    }
}
