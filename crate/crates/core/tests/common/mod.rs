//! Scalar reference implementations written with plain loops over nested
//! vectors, independent of the tape and the gemm kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxovis::params::ParamStore;
use taxovis::tensor::Mat;

pub type M = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_m(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> M {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn to_mat(m: &M) -> Mat {
    Mat::from_rows(m).unwrap()
}

pub fn from_mat(m: &Mat) -> M {
    m.to_rows()
}

/// Overwrites every parameter with uniform noise so no bias or gain is trivial.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let (rows, cols) = store.get(&n).unwrap().shape();
        store.set(&n, to_mat(&rand_m(&mut r, rows, cols, scale))).unwrap();
    }
}

pub fn max_diff(a: &M, b: &M) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    let mut d: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len(), "column count");
        for (u, v) in x.iter().zip(y) {
            d = d.max((u - v).abs());
        }
    }
    d
}

pub fn param(store: &ParamStore, name: &str) -> M {
    from_mat(store.get(name).unwrap())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `x·W + b` for the linear layer stored under `prefix`.
pub fn linear(store: &ParamStore, prefix: &str, x: &M) -> M {
    let w = param(store, &format!("{prefix}.w"));
    let mut y = matmul(x, &w);
    if store.contains(&format!("{prefix}.b")) {
        let b = &param(store, &format!("{prefix}.b"))[0];
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, prefix: &str, x: &M) -> M {
    let g = &param(store, &format!("{prefix}.gamma"))[0];
    let b = &param(store, &format!("{prefix}.beta"))[0];
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

/// Multi-head scaled dot-product attention on projected inputs.
pub fn mha(q: &M, k: &M, v: &M, heads: usize) -> M {
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|t| qi[t] * kj[t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in cols.clone() {
                out[i][t] = e.iter().zip(v).map(|(w, vj)| w / z * vj[t]).sum();
            }
        }
    }
    out
}

/// `x + out(MHA(q(LN(x) + pos), k(ctx), v(ctx)))`.
pub fn cross_block(store: &ParamStore, prefix: &str, heads: usize, x: &M, ctx: &M, pos: Option<&M>) -> M {
    let n = layer_norm(store, &format!("{prefix}.norm"), x);
    let qin = pos.map_or(n.clone(), |p| add(&n, p));
    let q = linear(store, &format!("{prefix}.q"), &qin);
    let k = linear(store, &format!("{prefix}.k"), ctx);
    let v = linear(store, &format!("{prefix}.v"), ctx);
    add(x, &linear(store, &format!("{prefix}.out"), &mha(&q, &k, &v, heads)))
}

/// `x + out(MHA(q(LN(x)+pos), k(LN(x)+pos), v(LN(x))))`.
pub fn self_block(store: &ParamStore, prefix: &str, heads: usize, x: &M, pos: Option<&M>) -> M {
    let n = layer_norm(store, &format!("{prefix}.norm"), x);
    let qk = pos.map_or(n.clone(), |p| add(&n, p));
    let q = linear(store, &format!("{prefix}.q"), &qk);
    let k = linear(store, &format!("{prefix}.k"), &qk);
    let v = linear(store, &format!("{prefix}.v"), &n);
    add(x, &linear(store, &format!("{prefix}.out"), &mha(&q, &k, &v, heads)))
}

/// `x + fc2(gelu(fc1(LN(x))))`.
pub fn ffn_block(store: &ParamStore, prefix: &str, x: &M) -> M {
    let n = layer_norm(store, &format!("{prefix}.norm"), x);
    let h: M = linear(store, &format!("{prefix}.fc1"), &n)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(x, &linear(store, &format!("{prefix}.fc2"), &h))
}

pub fn mlp(store: &ParamStore, prefix: &str, layers: usize, x: &M) -> M {
    let mut h = x.clone();
    for i in 0..layers {
        h = linear(store, &format!("{prefix}.{i}"), &h);
        if i + 1 < layers {
            h = h.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        }
    }
    h
}

/// Softmax over `allowed` entries; others get probability zero.
pub fn masked_softmax(logits: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    let ok = |i: usize| allowed.map_or(true, |a| a[i]);
    let m = (0..logits.len()).filter(|&i| ok(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..logits.len()).map(|i| if ok(i) { (logits[i] - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn bce(logits: &[f64], gt: &[f64]) -> f64 {
    let s: f64 = logits
        .iter()
        .zip(gt)
        .map(|(&x, &g)| {
            let p = sigmoid(x);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    s / logits.len() as f64
}

pub fn dice(logits: &[f64], gt: &[f64]) -> f64 {
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let inter: f64 = p.iter().zip(gt).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = gt.iter().sum();
    1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Weighted cross-entropy with masking, normalized by the weight sum.
pub fn weighted_ce(logits: &M, targets: &[usize], weights: &[f64], allowed: Option<&[bool]>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((row, &t), &w) in logits.iter().zip(targets).zip(weights) {
        num += -w * masked_softmax(row, allowed)[t].ln();
        den += w;
    }
    num / den
}
