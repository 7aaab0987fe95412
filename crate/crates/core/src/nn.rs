//! Pre-norm transformer building blocks shared by the taxonomy compiler and
//! the decoder.
//!
//! Every block is residual: `x + f(LN(x), …)`. With the output projection of
//! `f` zeroed, a block is an exact identity on `x`.

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, init: Init) {
        store.init(seed, &self.weight_name(), self.in_dim, self.out_dim, init);
        if self.bias {
            store.init(seed, &self.bias_name(), 1, self.out_dim, Init::Zeros);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, &self.weight_name())?;
        let b = if self.bias {
            Some(store.bind(g, &self.bias_name())?)
        } else {
            None
        };
        g.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub prefix: String,
    pub width: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, width: usize) -> Self {
        Self {
            prefix: prefix.into(),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.init(seed, &format!("{}.gamma", self.prefix), 1, self.width, Init::Ones);
        store.init(seed, &format!("{}.beta", self.prefix), 1, self.width, Init::Zeros);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = store.bind(g, &format!("{}.gamma", self.prefix))?;
        let beta = store.bind(g, &format!("{}.beta", self.prefix))?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Residual multi-head attention: `x + Wo·MHA(LN(x)·Wq, ctx·Wk, ctx·Wv) + bo`.
///
/// For self-attention the context is `LN(x)` itself.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(prefix: &str, width: usize, ctx_width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::InvalidArgument {
                arg: "heads",
                reason: format!("{heads} heads do not divide width {width}"),
            });
        }
        Ok(Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), width),
            q: Linear::new(format!("{prefix}.q"), width, width, true),
            k: Linear::new(format!("{prefix}.k"), ctx_width, width, true),
            v: Linear::new(format!("{prefix}.v"), ctx_width, width, true),
            out: Linear::new(format!("{prefix}.out"), width, width, true),
            heads,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.norm.init(store, seed);
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, seed, Init::XavierUniform);
        }
    }

    /// Zeroes the output projection, turning the block into an identity.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.zero_prefix(&self.out.prefix);
    }

    /// Cross-attention from `x` (queries) to `ctx`.
    pub fn cross(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        ctx: Var,
        query_pos: Option<Var>,
    ) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let qin = match query_pos {
            Some(p) => g.add(n, p)?,
            None => n,
        };
        self.attend(g, store, x, qin, ctx, ctx)
    }

    /// Self-attention over the rows of `x`; `pos` is added to queries and keys.
    pub fn self_attn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        pos: Option<Var>,
    ) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let qk = match pos {
            Some(p) => g.add(n, p)?,
            None => n,
        };
        self.attend(g, store, x, qk, qk, n)
    }

    fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        residual: Var,
        qin: Var,
        kin: Var,
        vin: Var,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, qin)?;
        let k = self.k.forward(g, store, kin)?;
        let v = self.v.forward(g, store, vin)?;
        let a = g.attention(q, k, v, self.heads)?;
        let o = self.out.forward(g, store, a)?;
        g.add(residual, o)
    }
}

/// Residual feed-forward: `x + W2·act(LN(x)·W1 + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(prefix: &str, width: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), width),
            fc1: Linear::new(format!("{prefix}.fc1"), width, hidden, true),
            fc2: Linear::new(format!("{prefix}.fc2"), hidden, width, true),
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.norm.init(store, seed);
        self.fc1.init(store, seed, Init::XavierUniform);
        self.fc2.init(store, seed, Init::XavierUniform);
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        store.zero_prefix(&self.fc2.prefix);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, n)?;
        let h = g.act(h, self.activation);
        let o = self.fc2.forward(g, store, h)?;
        g.add(x, o)
    }
}

/// Plain MLP: linear layers with the activation between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, dims: &[usize], activation: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{prefix}.{i}"), w[0], w[1], true))
            .collect();
        Self { layers, activation }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in &self.layers {
            l.init(store, seed, Init::XavierUniform);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.act(h, self.activation);
            }
        }
        Ok(h)
    }
}
