//! Taxonomy compilation: adapted category embeddings attend to the video
//! features twice, each category is scored against its own adapted embedding,
//! and the `N_T` best-scoring refined embeddings are handed to the decoder.
//!
//! Scoring is row-wise: `S_i = σ( (E³·W_s)_i · E¹_i )`, one score per category.

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, FeedForward, Linear};
use crate::params::{Init, ParamStore};
use crate::tensor::Mat;

/// Flattened `(T·H·W) × D` video features (positional encodings already added).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub values: Mat,
    /// The positional encodings that were added into `values`.
    pub pos: Mat,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl VideoFeatures {
    pub fn d(&self) -> usize {
        self.values.cols()
    }

    /// Row index of position `(t, y, x)`.
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.h + y) * self.w + x
    }
}

/// Result of compiling the taxonomy for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CompiledTaxonomy {
    /// `S`, one score in `(0, 1)` per category.
    pub scores: Vec<f64>,
    /// Indices of the `N_T` best scores, best first.
    pub selected: Vec<usize>,
    /// `E_T`, the rows of `E³` at `selected`.
    pub e_t: Mat,
    pub e3: Mat,
}

/// Graph handles produced by [`TaxonomyCompiler::forward`].
#[derive(Clone, Debug)]
pub struct TcmOutput {
    pub e2: Var,
    pub e3: Var,
    /// Pre-sigmoid scores, `K × 1`.
    pub score_logits: Var,
    pub scores: Var,
    pub selected: Vec<usize>,
    pub e_t: Var,
}

#[derive(Clone, Debug)]
pub struct TaxonomyCompiler {
    pub attn1: AttentionBlock,
    pub ffn1: FeedForward,
    pub attn2: AttentionBlock,
    pub ffn2: FeedForward,
    pub score: Linear,
}

impl TaxonomyCompiler {
    pub const PREFIX: &'static str = "tcm";

    pub fn new(dim: usize, heads: usize, ffn_hidden: usize, activation: Activation) -> Result<Self> {
        let p = Self::PREFIX;
        Ok(Self {
            attn1: AttentionBlock::new(&format!("{p}.attn1"), dim, dim, heads)?,
            ffn1: FeedForward::new(&format!("{p}.ffn1"), dim, ffn_hidden, activation),
            attn2: AttentionBlock::new(&format!("{p}.attn2"), dim, dim, heads)?,
            ffn2: FeedForward::new(&format!("{p}.ffn2"), dim, ffn_hidden, activation),
            score: Linear::new(format!("{p}.score"), dim, dim, false),
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.attn1.init(store, seed);
        self.ffn1.init(store, seed);
        self.attn2.init(store, seed);
        self.ffn2.init(store, seed);
        self.score.init(store, seed, Init::XavierUniform);
    }

    /// `E² = FFN(CrossAttn(E¹, F))`, `E³ = FFN(CrossAttn(E², F))`, scores and
    /// top-`N_T` selection.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e1: Var,
        features: Var,
        n_t: usize,
    ) -> Result<TcmOutput> {
        let k = g.shape(e1).0;
        if n_t == 0 || n_t > k {
            return Err(Error::SelectionSize { n_t, k });
        }
        let a1 = self.attn1.cross(g, store, e1, features, None)?;
        let e2 = self.ffn1.forward(g, store, a1)?;
        let a2 = self.attn2.cross(g, store, e2, features, None)?;
        let e3 = self.ffn2.forward(g, store, a2)?;
        let projected = self.score.forward(g, store, e3)?;
        let score_logits = g.row_dot(projected, e1)?;
        let scores = g.sigmoid(score_logits);
        let selected = topk_select(g.value(scores).data(), n_t)?;
        let e_t = g.gather_rows(e3, &selected)?;
        Ok(TcmOutput {
            e2,
            e3,
            score_logits,
            scores,
            selected,
            e_t,
        })
    }

    /// Forward pass on plain matrices.
    pub fn compile(
        &self,
        store: &ParamStore,
        e1: &Mat,
        features: &VideoFeatures,
        n_t: usize,
    ) -> Result<CompiledTaxonomy> {
        let mut g = Graph::new();
        let e1 = g.leaf(e1.clone());
        let f = g.leaf(features.values.clone());
        let out = self.forward(&mut g, store, e1, f, n_t)?;
        Ok(CompiledTaxonomy {
            scores: g.value(out.scores).data().to_vec(),
            selected: out.selected,
            e_t: g.value(out.e_t).clone(),
            e3: g.value(out.e3).clone(),
        })
    }
}

/// Residual cross-attention of `queries` over `context` on plain matrices.
pub fn cross_attn(
    block: &AttentionBlock,
    store: &ParamStore,
    queries: &Mat,
    context: &Mat,
) -> Result<Mat> {
    let mut g = Graph::new();
    let q = g.leaf(queries.clone());
    let c = g.leaf(context.clone());
    let out = block.cross(&mut g, store, q, c, None)?;
    Ok(g.value(out).clone())
}

/// Indices of the `n_t` largest scores, best first; equal scores keep the
/// lower index first.
pub fn topk_select(scores: &[f64], n_t: usize) -> Result<Vec<usize>> {
    let k = scores.len();
    if n_t == 0 || n_t > k {
        return Err(Error::SelectionSize { n_t, k });
    }
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n_t);
    Ok(idx)
}
