//! Bipartite matching between query predictions and ground-truth tracks.

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_logit, masked_softmax_in_place, sigmoid};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Mat;

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

/// One-to-one assignment of tracks to queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(query, track)` pairs ordered by track index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries assigned to no-object, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    /// Query matched to each track, indexed by track.
    pub fn query_of_track(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }

    /// Checks injectivity and ranges for `n` queries and `g` tracks.
    pub fn validate(&self, n: usize, g: usize) -> Result<()> {
        if self.pairs.len() != g {
            return Err(Error::BadAssignment(format!(
                "{} pairs for {g} tracks",
                self.pairs.len()
            )));
        }
        let mut seen_q = vec![false; n];
        let mut seen_t = vec![false; g];
        for &(q, t) in &self.pairs {
            if q >= n || t >= g {
                return Err(Error::BadAssignment(format!("pair ({q}, {t})")));
            }
            if seen_q[q] || seen_t[t] {
                return Err(Error::BadAssignment(format!("duplicate in pair ({q}, {t})")));
            }
            seen_q[q] = true;
            seen_t[t] = true;
        }
        for &q in &self.unmatched {
            if q >= n || seen_q[q] {
                return Err(Error::BadAssignment(format!("unmatched query {q}")));
            }
            seen_q[q] = true;
        }
        if seen_q.iter().any(|s| !s) {
            return Err(Error::BadAssignment("query neither matched nor unmatched".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between mask logits and a binary mask.
pub fn bce_loss(logits: &[f64], gt: &[f64]) -> Result<f64> {
    if logits.len() != gt.len() || logits.is_empty() {
        return Err(shape_err("bce_loss", format!("{} vs {}", logits.len(), gt.len())));
    }
    let s: f64 = logits.iter().zip(gt).map(|(&x, &g)| bce_logit(x, g)).sum();
    Ok(s / logits.len() as f64)
}

/// `1 − (2Σpg + 1)/(Σp + Σg + 1)` with `p = σ(logits)`.
pub fn dice_loss(logits: &[f64], gt: &[f64]) -> Result<f64> {
    if logits.len() != gt.len() {
        return Err(shape_err("dice_loss", format!("{} vs {}", logits.len(), gt.len())));
    }
    let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
    for (&x, &g) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        pg += p * g;
        ps += p;
        gs += g;
    }
    Ok(1.0 - (2.0 * pg + 1.0) / (ps + gs + 1.0))
}

/// Cost of assigning a prediction to a track.
///
/// `allowed` removes classes from the softmax, as in the classification loss.
pub fn pair_cost(
    class_logits: &[f64],
    mask_logits: &[f64],
    category: usize,
    gt_mask: &[f64],
    allowed: Option<&[bool]>,
    w: CostWeights,
) -> Result<f64> {
    if class_logits.iter().chain(mask_logits).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pair_cost logits".into()));
    }
    if category >= class_logits.len() {
        return Err(shape_err(
            "pair_cost",
            format!("category {category} of {}", class_logits.len()),
        ));
    }
    let mut probs = class_logits.to_vec();
    masked_softmax_in_place(&mut probs, allowed);
    Ok(w.class * -probs[category]
        + w.bce * bce_loss(mask_logits, gt_mask)?
        + w.dice * dice_loss(mask_logits, gt_mask)?)
}

/// `N × G` cost matrix; `gt_masks` holds one flattened track per row.
pub fn cost_matrix(
    class_logits: &Mat,
    mask_logits: &Mat,
    categories: &[usize],
    gt_masks: &Mat,
    allowed: Option<&[bool]>,
    w: CostWeights,
) -> Result<Mat> {
    let n = class_logits.rows();
    let g = categories.len();
    if mask_logits.rows() != n || gt_masks.rows() != g || mask_logits.cols() != gt_masks.cols() {
        return Err(shape_err(
            "cost_matrix",
            format!(
                "class {:?}, masks {:?}, gt {:?}, {g} categories",
                class_logits.shape(),
                mask_logits.shape(),
                gt_masks.shape()
            ),
        ));
    }
    let mut out = Mat::zeros(n, g);
    for q in 0..n {
        for (t, &cat) in categories.iter().enumerate() {
            let c = pair_cost(
                class_logits.row(q),
                mask_logits.row(q),
                cat,
                gt_masks.row(t),
                allowed,
                w,
            )?;
            out.set(q, t, c);
        }
    }
    Ok(out)
}

/// Minimum-cost assignment of the `G` columns (tracks) of an `N × G` cost
/// matrix to distinct rows (queries).
///
/// Among optimal assignments, returns the one whose query sequence (ordered
/// by track) is lexicographically smallest; costs within a relative `1e-9`
/// of the optimum count as optimal.
pub fn hungarian_match(cost: &Mat) -> Result<MatchAssignment> {
    let (n, g) = cost.shape();
    if g > n {
        return Err(Error::TooManyTracks {
            tracks: g,
            queries: n,
        });
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let mut used = vec![false; n];
    let mut chosen = Vec::with_capacity(g);
    if g > 0 {
        let best = min_cost(cost, 0, &used);
        let tol = 1e-9 * (1.0 + best.abs());
        let mut fixed = 0.0;
        for t in 0..g {
            let mut pick = None;
            for q in 0..n {
                if used[q] {
                    continue;
                }
                used[q] = true;
                let rest = if t + 1 < g { min_cost(cost, t + 1, &used) } else { 0.0 };
                if fixed + cost.get(q, t) + rest <= best + tol {
                    pick = Some(q);
                    break;
                }
                used[q] = false;
            }
            // An optimal completion always exists for some q; fall back to the
            // cheapest in case rounding rejected every candidate.
            let q = match pick {
                Some(q) => q,
                None => {
                    let q = (0..n)
                        .filter(|&q| !used[q])
                        .min_by(|&a, &b| cost.get(a, t).total_cmp(&cost.get(b, t)))
                        .expect("free query exists");
                    used[q] = true;
                    q
                }
            };
            fixed += cost.get(q, t);
            chosen.push(q);
        }
    }
    Ok(MatchAssignment {
        pairs: chosen.iter().enumerate().map(|(t, &q)| (q, t)).collect(),
        unmatched: (0..n).filter(|q| !chosen.contains(q)).collect(),
    })
}

/// Optimal cost of assigning tracks `first..G` to queries not in `used`.
fn min_cost(cost: &Mat, first: usize, used: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..cost.rows()).filter(|&q| !used[q]).collect();
    let cols: Vec<usize> = (first..cost.cols()).collect();
    let sub = |i: usize, j: usize| cost.get(rows[j], cols[i]);
    let assign = solve_rect(cols.len(), rows.len(), sub);
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(rows[j], cols[i]))
        .sum()
}

/// Shortest augmenting path assignment for an `r × c` matrix with `r ≤ c`;
/// returns the column of each row.
fn solve_rect(r: usize, c: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if r == 0 {
        return Vec::new();
    }
    // 1-based potentials with a virtual column 0.
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut p = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; r];
    for j in 1..=c {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}
