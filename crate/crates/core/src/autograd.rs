//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value plus whatever it needs for the backward pass. Parameters enter the
//! tape by name so their gradients can be read back after [`Graph::backward`].

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Mat};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Tanh-approximated GELU.
    #[default]
    Gelu,
    Silu,
    Softplus,
    Relu,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x * sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of `sigmoid(logit)` against target `g`.
#[inline]
pub fn bce_logit(logit: f64, g: f64) -> f64 {
    // -[g ln p + (1-g) ln(1-p)] = softplus(x) - g x
    softplus(logit) - g * logit
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Affine(Var, Var, Option<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Act(Var, Activation),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Per head, row-major `M × P` softmax weights.
        weights: Vec<Mat>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    LinComb(Vec<(Var, f64)>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
    BceRows {
        logits: Var,
        targets: Mat,
    },
    DiceRows {
        logits: Var,
        targets: Mat,
    },
    WeightedMean(Var, Vec<f64>),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    grads: Vec<Option<Mat>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not reported as a parameter.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Named trainable input. Binding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: &Mat) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Mat::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = Mat::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.rows() {
            return Err(shape_err(
                "affine",
                format!("input {:?} weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = Mat::zeros(xv.rows(), wv.cols());
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.cols()) {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} for width {}", bv.shape(), wv.cols()),
                ));
            }
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
            gemm(xv, false, wv, false, &mut out, 1.0);
        } else {
            gemm(xv, false, wv, false, &mut out, 0.0);
        }
        Ok(self.push(out, Op::Affine(x, w, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.shape() != (1, av.cols()) {
            return Err(shape_err(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return a;
        }
        let out = self.value(a).map(|x| kind.apply(x));
        self.push(out, Op::Act(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × C` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).shape() != (1, c) || self.value(beta).shape() != (1, c) {
            return Err(shape_err("layer_norm", format!("width {c}")));
        }
        let mut xhat = Mat::zeros(xv.rows(), c);
        let mut rstd = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.row(0)).zip(bv.row(0)) {
                *o = *o * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs:
    /// `q` is `M × C`, `k` and `v` are `P × C`; heads split `C` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.cols();
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument {
                arg: "heads",
                reason: format!("{heads} heads do not divide width {c}"),
            });
        }
        if kv.cols() != c || vv.cols() != c || kv.rows() != vv.rows() || kv.rows() == 0 {
            return Err(shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (m, p) = (qv.rows(), kv.rows());
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(m, c);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut w = Mat::zeros(m, p);
            strided_gemm(
                HeadView::of(qv, h, dh, false),
                HeadView::of(kv, h, dh, true),
                w.data_mut(),
                p,
                1,
                scale,
                0.0,
            );
            for r in 0..m {
                softmax_in_place(w.row_mut(r));
            }
            strided_gemm(
                HeadView::full(&w, false),
                HeadView::of(vv, h, dh, false),
                &mut out.data_mut()[h * dh..],
                c,
                1,
                1.0,
                0.0,
            );
            weights.push(w);
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// Attention weights of the last evaluation of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row {bad} of {}", av.rows()),
            ));
        }
        let out = av.gather_rows(idx);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", format!("widths {cols} and {}", pv.cols())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// The first `len` rows of `a`.
    pub fn take_rows(&mut self, a: Var, len: usize) -> Result<Var> {
        let av = self.value(a);
        if len > av.rows() {
            return Err(shape_err("take_rows", format!("{len} of {}", av.rows())));
        }
        let out = Mat::from_vec(len, av.cols(), av.data()[..len * av.cols()].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, len)))
    }

    /// Column means as a `1 × C` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let n = av.rows().max(1) as f64;
        for o in out.data_mut() {
            *o /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Row-wise dot product of two equally-shaped matrices, `K × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("row_dot", format!("{:?} . {:?}", av.shape(), bv.shape())));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Mat::from_vec(av.rows(), 1, data)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::filled(1, 1, s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.sum() / (av.rows() * av.cols()).max(1) as f64;
        self.push(Mat::filled(1, 1, s), Op::Mean(a))
    }

    /// `Σ coef · scalar` over `1 × 1` terms.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            let vv = self.value(v);
            if vv.shape() != (1, 1) {
                return Err(shape_err("lin_comb", format!("term {:?}", vv.shape())));
            }
            s += c * vv.get(0, 0);
        }
        Ok(self.push(Mat::filled(1, 1, s), Op::LinComb(terms.to_vec())))
    }

    /// Weighted softmax cross-entropy, `Σ_i w_i · CE_i / Σ_i w_i`.
    ///
    /// Columns with `allowed[c] == false` are removed from the softmax (their
    /// logits act as −∞ and receive exactly zero gradient).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if targets.len() != n || weights.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(a) = allowed {
            if a.len() != k {
                return Err(shape_err("cross_entropy", format!("mask {} for {k}", a.len())));
            }
        }
        let mut probs = Mat::zeros(n, k);
        let mut total = 0.0;
        let mut wsum = 0.0;
        for i in 0..n {
            let t = targets[i];
            if t >= k || allowed.is_some_and(|a| !a[t]) {
                return Err(Error::InvalidArgument {
                    arg: "targets",
                    reason: format!("target {t} not an allowed class of {k}"),
                });
            }
            let row = probs.row_mut(i);
            row.copy_from_slice(lv.row(i));
            masked_softmax_in_place(row, allowed);
            total += weights[i] * -row[t].ln();
            wsum += weights[i];
        }
        let loss = if wsum > 0.0 { total / wsum } else { 0.0 };
        Ok(self.push(
            Mat::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Per-row mean binary cross-entropy with logits, `M × 1`.
    pub fn bce_rows(&mut self, logits: Var, targets: &Mat) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() || lv.cols() == 0 {
            return Err(shape_err(
                "bce_rows",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let p = lv.cols() as f64;
        let data = (0..lv.rows())
            .map(|r| {
                lv.row(r)
                    .iter()
                    .zip(targets.row(r))
                    .map(|(&x, &g)| bce_logit(x, g))
                    .sum::<f64>()
                    / p
            })
            .collect();
        let out = Mat::from_vec(lv.rows(), 1, data)?;
        Ok(self.push(
            out,
            Op::BceRows {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Per-row Dice loss `1 − (2Σpg + 1)/(Σp + Σg + 1)` with `p = σ(logits)`, `M × 1`.
    pub fn dice_rows(&mut self, logits: Var, targets: &Mat) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(shape_err(
                "dice_rows",
                format!("{:?} vs {:?}", lv.shape(), targets.shape()),
            ));
        }
        let data = (0..lv.rows())
            .map(|r| {
                let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
                for (&x, &g) in lv.row(r).iter().zip(targets.row(r)) {
                    let p = sigmoid(x);
                    pg += p * g;
                    ps += p;
                    gs += g;
                }
                1.0 - (2.0 * pg + 1.0) / (ps + gs + 1.0)
            })
            .collect();
        let out = Mat::from_vec(lv.rows(), 1, data)?;
        Ok(self.push(
            out,
            Op::DiceRows {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// `Σ w_i a_i / Σ w_i` over the entries of an `M × 1` column (0 when `Σw = 0`).
    pub fn weighted_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != 1 || av.rows() != weights.len() {
            return Err(shape_err(
                "weighted_mean",
                format!("{:?} with {} weights", av.shape(), weights.len()),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        let s = if wsum > 0.0 {
            av.data().iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / wsum
        } else {
            0.0
        };
        Ok(self.push(Mat::filled(1, 1, s), Op::WeightedMean(a, weights.to_vec())))
    }

    /// Runs the backward pass from a `1 × 1` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(shape_err("backward", "loss must be 1x1"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every bound parameter, zero-filled where unreached.
    pub fn param_grads(&self) -> IndexMap<String, Mat> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = self.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Mat::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, gout: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc_slot(grads, *a, av.shape());
                gemm(gout, false, bv, true, ga, 1.0);
                let gb = acc_slot(grads, *b, bv.shape());
                gemm(av, true, gout, false, gb, 1.0);
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc_slot(grads, *a, av.shape());
                gemm(gout, false, bv, false, ga, 1.0);
                let gb = acc_slot(grads, *b, bv.shape());
                gemm(gout, true, av, false, gb, 1.0);
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let gx = acc_slot(grads, *x, xv.shape());
                gemm(gout, false, wv, true, gx, 1.0);
                let gw = acc_slot(grads, *w, wv.shape());
                gemm(xv, true, gout, false, gw, 1.0);
                if let Some(b) = b {
                    let gb = acc_slot(grads, *b, (1, wv.cols()));
                    for r in 0..gout.rows() {
                        for (o, g) in gb.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                acc_slot(grads, *a, gout.shape()).add_assign(gout);
                acc_slot(grads, *b, gout.shape()).add_assign(gout);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc_slot(grads, *a, av.shape());
                for ((o, g), y) in ga.data_mut().iter_mut().zip(gout.data()).zip(bv.data()) {
                    *o += g * y;
                }
                let gb = acc_slot(grads, *b, bv.shape());
                for ((o, g), x) in gb.data_mut().iter_mut().zip(gout.data()).zip(av.data()) {
                    *o += g * x;
                }
            }
            Op::Scale(a, s) => {
                let ga = acc_slot(grads, *a, gout.shape());
                for (o, g) in ga.data_mut().iter_mut().zip(gout.data()) {
                    *o += g * s;
                }
            }
            Op::AddRow(a, row) => {
                acc_slot(grads, *a, gout.shape()).add_assign(gout);
                let gr = acc_slot(grads, *row, (1, gout.cols()));
                for r in 0..gout.rows() {
                    for (o, g) in gr.row_mut(0).iter_mut().zip(gout.row(r)) {
                        *o += g;
                    }
                }
            }
            Op::Act(a, kind) => {
                let av = self.value(*a);
                let ga = acc_slot(grads, *a, av.shape());
                for ((o, g), x) in ga.data_mut().iter_mut().zip(gout.data()).zip(av.data()) {
                    *o += g * kind.derivative(*x);
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc_slot(grads, *a, gout.shape());
                for ((o, g), s) in ga.data_mut().iter_mut().zip(gout.data()).zip(node.value.data())
                {
                    *o += g * s * (1.0 - s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = xhat.cols();
                let gv = self.value(*gamma).row(0).to_vec();
                {
                    let gg = acc_slot(grads, *gamma, (1, c));
                    for r in 0..xhat.rows() {
                        for ((o, g), xh) in
                            gg.row_mut(0).iter_mut().zip(gout.row(r)).zip(xhat.row(r))
                        {
                            *o += g * xh;
                        }
                    }
                }
                {
                    let gb = acc_slot(grads, *beta, (1, c));
                    for r in 0..xhat.rows() {
                        for (o, g) in gb.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *o += g;
                        }
                    }
                }
                let gx = acc_slot(grads, *x, xhat.shape());
                let mut dxhat = vec![0.0; c];
                for r in 0..xhat.rows() {
                    for ((d, g), gm) in dxhat.iter_mut().zip(gout.row(r)).zip(&gv) {
                        *d = g * gm;
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(xhat.row(r)).map(|(d, x)| d * x).sum();
                    let s = rstd[r] / c as f64;
                    for ((o, d), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                        *o += s * (c as f64 * d - sum_d - xh * sum_dx);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                weights,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let c = qv.cols();
                let dh = c / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (m, p) = (qv.rows(), kv.rows());
                let mut dq = Mat::zeros(m, c);
                let mut dk = Mat::zeros(p, c);
                let mut dv = Mat::zeros(p, c);
                for (h, w) in weights.iter().enumerate() {
                    // dV_h = Wᵀ dO_h
                    strided_gemm(
                        HeadView::full(w, true),
                        HeadView::of(gout, h, dh, false),
                        &mut dv.data_mut()[h * dh..],
                        c,
                        1,
                        1.0,
                        0.0,
                    );
                    // dW = dO_h V_hᵀ
                    let mut dw = Mat::zeros(m, p);
                    strided_gemm(
                        HeadView::of(gout, h, dh, false),
                        HeadView::of(vv, h, dh, true),
                        dw.data_mut(),
                        p,
                        1,
                        1.0,
                        0.0,
                    );
                    // softmax backward
                    for r in 0..m {
                        let wr = w.row(r);
                        let dr = dw.row_mut(r);
                        let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, a) in dr.iter_mut().zip(wr) {
                            *d = a * (*d - dot);
                        }
                    }
                    strided_gemm(
                        HeadView::full(&dw, false),
                        HeadView::of(kv, h, dh, false),
                        &mut dq.data_mut()[h * dh..],
                        c,
                        1,
                        scale,
                        0.0,
                    );
                    strided_gemm(
                        HeadView::full(&dw, true),
                        HeadView::of(qv, h, dh, false),
                        &mut dk.data_mut()[h * dh..],
                        c,
                        1,
                        scale,
                        0.0,
                    );
                }
                acc_slot(grads, *q, (m, c)).add_assign(&dq);
                acc_slot(grads, *k, (p, c)).add_assign(&dk);
                acc_slot(grads, *v, (p, c)).add_assign(&dv);
            }
            Op::GatherRows(a, idx) => {
                let shape = self.shape(*a);
                let ga = acc_slot(grads, *a, shape);
                for (r, &src) in idx.iter().enumerate() {
                    for (o, g) in ga.row_mut(src).iter_mut().zip(gout.row(r)) {
                        *o += g;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let gp = acc_slot(grads, p, shape);
                    for r in 0..shape.0 {
                        for (o, g) in gp.row_mut(r).iter_mut().zip(gout.row(offset + r)) {
                            *o += g;
                        }
                    }
                    offset += shape.0;
                }
            }
            Op::SliceRows(a, len) => {
                let shape = self.shape(*a);
                let ga = acc_slot(grads, *a, shape);
                for r in 0..*len {
                    for (o, g) in ga.row_mut(r).iter_mut().zip(gout.row(r)) {
                        *o += g;
                    }
                }
            }
            Op::MeanRows(a) => {
                let shape = self.shape(*a);
                let n = shape.0.max(1) as f64;
                let ga = acc_slot(grads, *a, shape);
                for r in 0..shape.0 {
                    for (o, g) in ga.row_mut(r).iter_mut().zip(gout.row(0)) {
                        *o += g / n;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc_slot(grads, *a, av.shape());
                for r in 0..av.rows() {
                    let g = gout.get(r, 0);
                    for (o, y) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                        *o += g * y;
                    }
                }
                let gb = acc_slot(grads, *b, bv.shape());
                for r in 0..av.rows() {
                    let g = gout.get(r, 0);
                    for (o, x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                        *o += g * x;
                    }
                }
            }
            Op::Sum(a) => {
                let g = gout.get(0, 0);
                let shape = self.shape(*a);
                for o in acc_slot(grads, *a, shape).data_mut() {
                    *o += g;
                }
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let g = gout.get(0, 0) / (shape.0 * shape.1).max(1) as f64;
                for o in acc_slot(grads, *a, shape).data_mut() {
                    *o += g;
                }
            }
            Op::LinComb(terms) => {
                let g = gout.get(0, 0);
                for &(v, c) in terms {
                    let slot = acc_slot(grads, v, (1, 1));
                    slot.data_mut()[0] += g * c;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return;
                }
                let g = gout.get(0, 0) / wsum;
                let gl = acc_slot(grads, *logits, probs.shape());
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = gl.row_mut(i);
                    for (c, (o, p)) in row.iter_mut().zip(probs.row(i)).enumerate() {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        *o += g * w * (p - onehot);
                    }
                }
            }
            Op::BceRows { logits, targets } => {
                let lv = self.value(*logits);
                let p = lv.cols() as f64;
                let gl = acc_slot(grads, *logits, lv.shape());
                for r in 0..lv.rows() {
                    let g = gout.get(r, 0) / p;
                    for ((o, &x), &t) in gl.row_mut(r).iter_mut().zip(lv.row(r)).zip(targets.row(r))
                    {
                        *o += g * (sigmoid(x) - t);
                    }
                }
            }
            Op::DiceRows { logits, targets } => {
                let lv = self.value(*logits);
                let gl = acc_slot(grads, *logits, lv.shape());
                for r in 0..lv.rows() {
                    let (mut pg, mut ps, mut gs) = (0.0, 0.0, 0.0);
                    for (&x, &g) in lv.row(r).iter().zip(targets.row(r)) {
                        let p = sigmoid(x);
                        pg += p * g;
                        ps += p;
                        gs += g;
                    }
                    let num = 2.0 * pg + 1.0;
                    let den = ps + gs + 1.0;
                    let go = gout.get(r, 0);
                    for ((o, &x), &g) in gl.row_mut(r).iter_mut().zip(lv.row(r)).zip(targets.row(r))
                    {
                        let p = sigmoid(x);
                        // d/dp of −num/den
                        let dldp = -(2.0 * g * den - num) / (den * den);
                        *o += go * dldp * p * (1.0 - p);
                    }
                }
            }
            Op::WeightedMean(a, weights) => {
                let wsum: f64 = weights.iter().sum();
                if wsum <= 0.0 {
                    return;
                }
                let g = gout.get(0, 0) / wsum;
                let shape = self.shape(*a);
                let ga = acc_slot(grads, *a, shape);
                for (o, w) in ga.data_mut().iter_mut().zip(weights) {
                    *o += g * w;
                }
            }
        }
    }
}

use crate::error::Error;

fn acc_slot(grads: &mut [Option<Mat>], v: Var, shape: (usize, usize)) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}

/// Numerically stable softmax over a row.
pub fn softmax_in_place(row: &mut [f64]) {
    masked_softmax_in_place(row, None);
}

/// Softmax restricted to `allowed` columns; the rest become exactly 0.
pub fn masked_softmax_in_place(row: &mut [f64], allowed: Option<&[bool]>) {
    let ok = |c: usize| allowed.is_none_or(|a| a[c]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(c, _)| ok(*c))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (c, v) in row.iter_mut().enumerate() {
        if ok(c) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Column block of a row-major matrix, optionally read transposed.
#[derive(Clone, Copy)]
struct HeadView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> HeadView<'a> {
    /// Columns `[h·dh, (h+1)·dh)` of `m`.
    fn of(m: &'a Mat, h: usize, dh: usize, transposed: bool) -> Self {
        let data = &m.data()[h * dh..];
        let (rows, cols, rs, cs) = (m.rows(), dh, m.cols() as isize, 1isize);
        if transposed {
            Self {
                data,
                rows: cols,
                cols: rows,
                rs: cs,
                cs: rs,
            }
        } else {
            Self {
                data,
                rows,
                cols,
                rs,
                cs,
            }
        }
    }

    fn full(m: &'a Mat, transposed: bool) -> Self {
        let full = m.cols();
        Self::of(m, 0, full, transposed)
    }
}

/// `out = alpha · a · b + beta · out` with arbitrary strides.
fn strided_gemm(
    a: HeadView<'_>,
    b: HeadView<'_>,
    out: &mut [f64],
    rs_out: usize,
    cs_out: usize,
    alpha: f64,
    beta: f64,
) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the furthest element touched in each buffer.
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows - 1) as isize * rs + (cols - 1) as isize * cs
    };
    if k > 0 {
        assert!(last(m, k, a.rs, a.cs) < a.data.len() as isize);
        assert!(last(k, n, b.rs, b.cs) < b.data.len() as isize);
    }
    assert!(last(m, n, rs_out as isize, cs_out as isize) < out.len() as isize);
    // SAFETY: the asserts above bound every access; `out` is a distinct buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            rs_out as isize,
            cs_out as isize,
        );
    }
}
