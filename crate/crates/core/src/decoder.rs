//! Set-prediction decoder with taxonomy injection.
//!
//! Each layer runs, in order: injection of the compiled taxonomy into the
//! queries (`X' = FFN(CrossAttn(X, E_T))`), cross-attention to the video
//! features, self-attention over the queries, and a feed-forward block. The
//! class and mask heads read the final state; the taxonomy head reads the
//! state right after the first injection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{AttentionBlock, FeedForward, LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionMode {
    #[default]
    PerLayer,
    FirstLayerOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    CrossAttention,
    Add,
    Concat,
}

impl FromStr for InjectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" => Ok(Self::PerLayer),
            "first-layer-only" => Ok(Self::FirstLayerOnly),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-attention" => Ok(Self::CrossAttention),
            "add" => Ok(Self::Add),
            "concat" => Ok(Self::Concat),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CrossAttention => "cross-attention",
            Self::Add => "add",
            Self::Concat => "concat",
        })
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerLayer => "per-layer",
            Self::FirstLayerOnly => "first-layer-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub mode: InjectionMode,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_queries: usize,
    /// Query width `C`.
    pub width: usize,
    /// Video / taxonomy feature width `D`.
    pub feature_dim: usize,
    /// Pixel-feature width for the mask head.
    pub mask_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    pub activation: Activation,
    /// `None` builds the plain baseline decoder.
    pub injection: Option<InjectionConfig>,
    /// Emit taxonomy logits after every injection instead of only the first.
    pub taxo_every_layer: bool,
}

/// Per-layer injection parameters.
#[derive(Clone, Debug)]
pub enum Injector {
    CrossAttention { attn: AttentionBlock, ffn: FeedForward },
    Add { proj: Linear },
    Concat { proj: Linear },
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub injector: Option<Injector>,
    pub cross: AttentionBlock,
    pub self_attn: AttentionBlock,
    pub ffn: FeedForward,
}

/// Shape and parameter names of the decoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    /// `D → C` alignment of `E_T` for cross-attention injection when `D ≠ C`.
    pub taxonomy_proj: Option<Linear>,
    pub norm: LayerNorm,
    pub class_head: Linear,
    pub taxo_head: Option<Linear>,
    pub mask_mlp: Mlp,
}

/// Graph handles of one decoder evaluation.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub class_logits: Var,
    /// Taxonomy-head logits from the first post-injection state.
    pub taxo_logits: Option<Var>,
    /// Taxonomy-head logits from later injections (only with `taxo_every_layer`).
    pub taxo_aux: Vec<Var>,
    pub mask_logits: Var,
    /// Final query state `X_L`.
    pub queries: Var,
}

/// Plain-value predictions for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePredictionSet {
    /// `N × (K+1)`, last column is no-object.
    pub class_logits: Mat,
    pub taxo_logits: Option<Mat>,
    /// `N × (T·H_m·W_m)`.
    pub mask_logits: Mat,
    pub query_embeddings: Mat,
    pub frames: usize,
    pub mask_h: usize,
    pub mask_w: usize,
}

pub const PREFIX: &str = "dec";

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        let c = config.width;
        let d = config.feature_dim;
        let h = config.heads;
        if config.layers == 0 || config.num_queries == 0 {
            return Err(Error::InvalidArgument {
                arg: "decoder",
                reason: "need at least one layer and one query".into(),
            });
        }
        let inject_layers = match config.injection {
            None => 0,
            Some(InjectionConfig {
                mode: InjectionMode::PerLayer,
                ..
            }) => config.layers,
            Some(InjectionConfig {
                mode: InjectionMode::FirstLayerOnly,
                ..
            }) => 1,
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{PREFIX}.layers.{i}");
            let injector = match config.injection {
                Some(inj) if i < inject_layers => Some(match inj.aggregation {
                    Aggregation::CrossAttention => Injector::CrossAttention {
                        attn: AttentionBlock::new(&format!("{p}.inject.attn"), c, c, h)?,
                        ffn: FeedForward::new(
                            &format!("{p}.inject.ffn"),
                            c,
                            config.ffn_hidden,
                            config.activation,
                        ),
                    },
                    Aggregation::Add => Injector::Add {
                        proj: Linear::new(format!("{p}.inject.add"), d, c, true),
                    },
                    Aggregation::Concat => Injector::Concat {
                        proj: Linear::new(format!("{p}.inject.concat"), d, c, true),
                    },
                }),
                _ => None,
            };
            layers.push(DecoderLayer {
                injector,
                cross: AttentionBlock::new(&format!("{p}.cross"), c, d, h)?,
                self_attn: AttentionBlock::new(&format!("{p}.self"), c, c, h)?,
                ffn: FeedForward::new(&format!("{p}.ffn"), c, config.ffn_hidden, config.activation),
            });
        }
        let taxonomy_proj = match config.injection {
            Some(InjectionConfig {
                aggregation: Aggregation::CrossAttention,
                ..
            }) if d != c => Some(Linear::new(format!("{PREFIX}.inject.proj"), d, c, true)),
            _ => None,
        };
        let k1 = config.num_classes + 1;
        Ok(Self {
            layers,
            taxonomy_proj,
            norm: LayerNorm::new(format!("{PREFIX}.norm"), c),
            class_head: Linear::new(format!("{PREFIX}.class"), c, k1, true),
            taxo_head: config
                .injection
                .map(|_| Linear::new(format!("{PREFIX}.taxo"), c, k1, true)),
            mask_mlp: Mlp::new(
                &format!("{PREFIX}.mask_mlp"),
                &[c, c, c, config.mask_dim],
                config.activation,
            ),
            config,
        })
    }

    pub fn query_name() -> String {
        format!("{PREFIX}.query")
    }

    pub fn query_pos_name() -> String {
        format!("{PREFIX}.query_pos")
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let (n, c) = (self.config.num_queries, self.config.width);
        store.init(seed, &Self::query_name(), n, c, Init::Normal(1.0));
        store.init(seed, &Self::query_pos_name(), n, c, Init::Normal(1.0));
        for layer in &self.layers {
            match &layer.injector {
                Some(Injector::CrossAttention { attn, ffn }) => {
                    attn.init(store, seed);
                    ffn.init(store, seed);
                }
                Some(Injector::Add { proj }) | Some(Injector::Concat { proj }) => {
                    proj.init(store, seed, Init::XavierUniform)
                }
                None => {}
            }
            layer.cross.init(store, seed);
            layer.self_attn.init(store, seed);
            layer.ffn.init(store, seed);
        }
        if let Some(p) = &self.taxonomy_proj {
            p.init(store, seed, Init::XavierUniform);
        }
        self.norm.init(store, seed);
        self.class_head.init(store, seed, Init::XavierUniform);
        if let Some(t) = &self.taxo_head {
            t.init(store, seed, Init::XavierUniform);
        }
        self.mask_mlp.init(store, seed);
    }

    /// Zeroes every injection output path so each injection is an identity.
    pub fn zero_injection(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            match &layer.injector {
                Some(Injector::CrossAttention { attn, ffn }) => {
                    attn.zero_output(store);
                    ffn.zero_output(store);
                }
                Some(Injector::Add { proj }) => store.zero_prefix(&proj.prefix),
                // Concatenated rows always take part in self-attention; zeroing
                // their projection still leaves them as (bias-free) keys.
                Some(Injector::Concat { proj }) => store.zero_prefix(&proj.prefix),
                None => {}
            }
        }
    }

    /// Aligns `E_T` to the query width for cross-attention injection.
    fn align_taxonomy(&self, g: &mut Graph, store: &ParamStore, e_t: Var) -> Result<Var> {
        match &self.taxonomy_proj {
            Some(p) => p.forward(g, store, e_t),
            None => Ok(e_t),
        }
    }

    /// Taxonomy injection for one layer (`X' = FFN(CrossAttn(X, E_T))` in
    /// cross-attention mode, `X + proj(mean E_T)` in add mode).
    ///
    /// `e_t` must already be aligned for cross-attention mode; concat mode is
    /// handled inside [`Decoder::layer_forward`] and is an identity here.
    pub fn tim_inject(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        x: Var,
        e_t_aligned: Var,
        query_pos: Option<Var>,
    ) -> Result<Var> {
        match &self.layers[layer].injector {
            Some(Injector::CrossAttention { attn, ffn }) => {
                let a = attn.cross(g, store, x, e_t_aligned, query_pos)?;
                ffn.forward(g, store, a)
            }
            Some(Injector::Add { proj }) => {
                let pooled = g.mean_rows(e_t_aligned);
                let row = proj.forward(g, store, pooled)?;
                g.add_row(x, row)
            }
            Some(Injector::Concat { .. }) | None => Ok(x),
        }
    }

    /// Cross-attention to the features, self-attention, FFN. In concat mode
    /// `extra` rows join the self-attention only and are dropped afterwards.
    /// Returns the layer output and the state right after self-attention.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        x: Var,
        features: Var,
        query_pos: Option<Var>,
        extra: Option<Var>,
    ) -> Result<(Var, Var)> {
        let l = &self.layers[layer];
        let x = l.cross.cross(g, store, x, features, query_pos)?;
        let n = g.shape(x).0;
        let s = match extra {
            Some(rows) => {
                let cat = g.concat_rows(&[x, rows])?;
                let pos = match query_pos {
                    Some(p) => {
                        let zeros = g.leaf(Mat::zeros(g.shape(rows).0, g.shape(rows).1));
                        Some(g.concat_rows(&[p, zeros])?)
                    }
                    None => None,
                };
                let s = l.self_attn.self_attn(g, store, cat, pos)?;
                g.take_rows(s, n)?
            }
            None => l.self_attn.self_attn(g, store, x, query_pos)?,
        };
        Ok((l.ffn.forward(g, store, s)?, s))
    }

    /// `mask_logits[q, p] = MLP(LN(query_q)) · pixel[p]`.
    pub fn mask_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        pixel: Var,
    ) -> Result<Var> {
        let n = self.norm.forward(g, store, queries)?;
        let emb = self.mask_mlp.forward(g, store, n)?;
        if g.shape(emb).1 != g.shape(pixel).1 {
            return Err(shape_err(
                "mask_head",
                format!("mask embedding {:?}, pixels {:?}", g.shape(emb), g.shape(pixel)),
            ));
        }
        g.matmul_t(emb, pixel)
    }

    /// Full decoder. `e_t` is required iff the decoder was built with injection.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        e_t: Option<Var>,
        pixel: Var,
    ) -> Result<DecoderOutput> {
        let (fd, c) = (self.config.feature_dim, self.config.width);
        if g.shape(features).1 != fd {
            return Err(shape_err(
                "decoder_forward",
                format!("features {:?}, expected width {fd}", g.shape(features)),
            ));
        }
        let e_t = match (self.config.injection, e_t) {
            (Some(inj), Some(e)) => {
                if g.shape(e).1 != fd {
                    return Err(shape_err(
                        "decoder_forward",
                        format!("E_T {:?}, expected width {fd}", g.shape(e)),
                    ));
                }
                Some(match inj.aggregation {
                    Aggregation::CrossAttention => self.align_taxonomy(g, store, e)?,
                    _ => e,
                })
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::InvalidArgument {
                    arg: "e_t",
                    reason: "decoder with injection needs compiled taxonomy".into(),
                })
            }
        };
        let mut x = store.bind(g, &Self::query_name())?;
        let qpos = store.bind(g, &Self::query_pos_name())?;
        let mut taxo_states = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (xp, extra) = match (&layer.injector, e_t) {
                (Some(Injector::Concat { proj }), Some(e)) => {
                    (x, Some(proj.forward(g, store, e)?))
                }
                (Some(_), Some(e)) => (self.tim_inject(g, store, i, x, e, Some(qpos))?, None),
                _ => (x, None),
            };
            let (out, after_self) = self.layer_forward(g, store, i, xp, features, Some(qpos), extra)?;
            if layer.injector.is_some() {
                let tap = if extra.is_some() { after_self } else { xp };
                taxo_states.push(tap);
            }
            x = out;
        }
        debug_assert_eq!(g.shape(x).1, c);
        let normed = self.norm.forward(g, store, x)?;
        let class_logits = self.class_head.forward(g, store, normed)?;
        let mask_logits = self.mask_head(g, store, x, pixel)?;
        let mut taxo_logits = None;
        let mut taxo_aux = Vec::new();
        if let Some(head) = &self.taxo_head {
            let take = if self.config.taxo_every_layer {
                taxo_states.len()
            } else {
                taxo_states.len().min(1)
            };
            for (j, &state) in taxo_states.iter().take(take).enumerate() {
                let n = self.norm.forward(g, store, state)?;
                let logits = head.forward(g, store, n)?;
                if j == 0 {
                    taxo_logits = Some(logits);
                } else {
                    taxo_aux.push(logits);
                }
            }
        }
        Ok(DecoderOutput {
            class_logits,
            taxo_logits,
            taxo_aux,
            mask_logits,
            queries: x,
        })
    }
}

/// Evaluates the mask head on plain matrices; `pixel` is `(T·H_m·W_m) × D_m`.
pub fn mask_head(
    decoder: &Decoder,
    store: &ParamStore,
    query_embeddings: &Mat,
    pixel: &Mat,
) -> Result<Mat> {
    let mut g = Graph::new();
    let q = g.leaf(query_embeddings.clone());
    let p = g.leaf(pixel.clone());
    let out = decoder.mask_head(&mut g, store, q, p)?;
    Ok(g.value(out).clone())
}
