//! Full model: featurizer, category embeddings, taxonomy compiler and
//! decoder, plus inference to scored tracks.

use serde::{Deserialize, Serialize};

use crate::autograd::{masked_softmax_in_place, sigmoid, Activation, Graph};
use crate::decoder::{
    Aggregation, Decoder, DecoderConfig, DecoderOutput, InjectionConfig, InjectionMode,
    InstancePredictionSet,
};
use crate::embedding::{embed_categories, Adapter, TextEmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::PredictedTrack;
use crate::featurize::{ClipInputs, Featurizer};
use crate::params::ParamStore;
use crate::taxonomy::TaxonomySpace;
use crate::tcm::{CompiledTaxonomy, TaxonomyCompiler, TcmOutput};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Queries `N`.
    pub num_queries: usize,
    /// Decoder width `C`.
    pub width: usize,
    /// Feature width `D`.
    pub feature_dim: usize,
    /// Pixel-feature width for the mask head.
    pub mask_dim: usize,
    /// Decoder layers `L`.
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Selected taxonomy embeddings `N_T`; clamped to `K` for smaller spaces.
    pub n_t: usize,
    /// Text-embedding width `d`.
    pub embed_dim: usize,
    /// Adapter bottleneck; `d/4` when absent.
    #[serde(default)]
    pub adapter_mid: Option<usize>,
    pub activation: Activation,
    /// Enables the taxonomy compiler and injection.
    #[serde(default = "default_true")]
    pub taxonomy: bool,
    #[serde(default)]
    pub injection_mode: InjectionMode,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Taxonomy logits after every injection instead of the first only.
    #[serde(default)]
    pub taxo_every_layer: bool,
    /// Starts cross-attention and add injections at zero output, so training
    /// begins from the baseline function. Concat rows always reach
    /// self-attention, so concat injection keeps its random init.
    #[serde(default = "default_true")]
    pub zero_init_injection: bool,
    pub patch: usize,
    pub mask_stride: usize,
    /// Optional CSV with externally computed category embeddings.
    #[serde(default)]
    pub embedding_file: Option<std::path::PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            width: 64,
            feature_dim: 64,
            mask_dim: 32,
            layers: 9,
            heads: 4,
            ffn_hidden: 128,
            n_t: 10,
            embed_dim: 64,
            adapter_mid: None,
            activation: Activation::Gelu,
            taxonomy: true,
            injection_mode: InjectionMode::PerLayer,
            aggregation: Aggregation::CrossAttention,
            taxo_every_layer: false,
            zero_init_injection: true,
            patch: 8,
            mask_stride: 4,
            embedding_file: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub featurizer: Featurizer,
    pub table: TextEmbeddingTable,
    pub adapter: Option<Adapter>,
    pub tcm: Option<TaxonomyCompiler>,
    pub decoder: Decoder,
    pub k: usize,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub decoder: DecoderOutput,
    pub tcm: Option<TcmOutput>,
    pub mask_h: usize,
    pub mask_w: usize,
    pub frames: usize,
}

/// Parameter-name prefixes of the taxonomy-specific components.
pub const TAXONOMY_PREFIXES: &[&str] = &["adapter.", "tcm.", "dec.taxo.", "dec.inject."];

/// Whether a parameter belongs to the taxonomy compiler or injection path.
pub fn is_taxonomy_param(name: &str) -> bool {
    TAXONOMY_PREFIXES.iter().any(|p| name.starts_with(p)) || name.contains(".inject.")
}

impl Model {
    pub fn new(config: ModelConfig, space: &TaxonomySpace, embed_seed: u64) -> Result<Self> {
        let k = space.k();
        let featurizer = Featurizer::with_patches(
            config.patch,
            config.mask_stride,
            config.feature_dim,
            config.mask_dim,
            config.activation,
        )?;
        let table = embed_categories(
            space,
            config.embed_dim,
            embed_seed,
            config.embedding_file.as_deref(),
        )?;
        let (adapter, tcm) = if config.taxonomy {
            let mid = config.adapter_mid.unwrap_or(config.embed_dim / 4);
            (
                Some(Adapter::new(
                    config.embed_dim,
                    mid,
                    config.feature_dim,
                    config.activation,
                )?),
                Some(TaxonomyCompiler::new(
                    config.feature_dim,
                    config.heads,
                    config.ffn_hidden,
                    config.activation,
                )?),
            )
        } else {
            (None, None)
        };
        let decoder = Decoder::new(DecoderConfig {
            num_queries: config.num_queries,
            width: config.width,
            feature_dim: config.feature_dim,
            mask_dim: config.mask_dim,
            layers: config.layers,
            heads: config.heads,
            ffn_hidden: config.ffn_hidden,
            num_classes: k,
            activation: config.activation,
            injection: config.taxonomy.then_some(InjectionConfig {
                mode: config.injection_mode,
                aggregation: config.aggregation,
            }),
            taxo_every_layer: config.taxo_every_layer,
        })?;
        Ok(Self {
            config,
            featurizer,
            table,
            adapter,
            tcm,
            decoder,
            k,
        })
    }

    /// Effective `N_T`.
    pub fn n_t(&self) -> usize {
        self.config.n_t.min(self.k).max(1)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.featurizer.init(store, seed);
        if let Some(a) = &self.adapter {
            a.init(store, seed);
        }
        if let Some(t) = &self.tcm {
            t.init(store, seed);
        }
        self.decoder.init(store, seed);
        if self.config.zero_init_injection && self.config.aggregation != Aggregation::Concat {
            self.decoder.zero_injection(store);
        }
    }

    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.init(&mut store, seed);
        store
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &ClipInputs) -> Result<ModelOutput> {
        let feats = self.featurizer.forward(g, store, inputs)?;
        let tcm = match (&self.adapter, &self.tcm) {
            (Some(adapter), Some(tcm)) => {
                let table = g.leaf(self.table.matrix.clone());
                let e1 = adapter.forward(g, store, table)?;
                Some(tcm.forward(g, store, e1, feats.features, self.n_t())?)
            }
            _ => None,
        };
        let decoder = self.decoder.forward(
            g,
            store,
            feats.features,
            tcm.as_ref().map(|t| t.e_t),
            feats.pixel,
        )?;
        Ok(ModelOutput {
            decoder,
            tcm,
            mask_h: inputs.mask_h,
            mask_w: inputs.mask_w,
            frames: inputs.frames,
        })
    }

    /// Plain-value predictions and the compiled taxonomy of a clip.
    pub fn predict(
        &self,
        store: &ParamStore,
        inputs: &ClipInputs,
    ) -> Result<(InstancePredictionSet, Option<CompiledTaxonomy>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, inputs)?;
        let d = &out.decoder;
        let preds = InstancePredictionSet {
            class_logits: g.value(d.class_logits).clone(),
            taxo_logits: d.taxo_logits.map(|t| g.value(t).clone()),
            mask_logits: g.value(d.mask_logits).clone(),
            query_embeddings: g.value(d.queries).clone(),
            frames: out.frames,
            mask_h: out.mask_h,
            mask_w: out.mask_w,
        };
        let compiled = out.tcm.map(|t| CompiledTaxonomy {
            scores: g.value(t.scores).data().to_vec(),
            selected: t.selected.clone(),
            e_t: g.value(t.e_t).clone(),
            e3: g.value(t.e3).clone(),
        });
        Ok((preds, compiled))
    }
}

/// Turns predictions into at most `top_k` scored tracks.
///
/// Every allowed `(query, class)` pair is a candidate scored by the class
/// probability times the mean foreground probability of the query's mask;
/// equal scores keep the lower `query · K + class` first.
pub fn infer_tracks(
    preds: &InstancePredictionSet,
    allowed: &[bool],
    top_k: usize,
) -> Result<Vec<PredictedTrack>> {
    let (n, k1) = preds.class_logits.shape();
    if allowed.len() != k1 {
        return Err(Error::InvalidArgument {
            arg: "allowed",
            reason: format!("mask of {} for {k1} logits", allowed.len()),
        });
    }
    let k = k1 - 1;
    let mut candidates = Vec::new();
    let mut masks = Vec::with_capacity(n);
    for q in 0..n {
        let mut probs = preds.class_logits.row(q).to_vec();
        masked_softmax_in_place(&mut probs, Some(allowed));
        let logits = preds.mask_logits.row(q);
        let mask: Vec<bool> = logits.iter().map(|&x| x > 0.0).collect();
        let (mut s, mut c) = (0.0, 0usize);
        for (&x, &m) in logits.iter().zip(&mask) {
            if m {
                s += sigmoid(x);
                c += 1;
            }
        }
        let conf = if c == 0 { 0.0 } else { s / c as f64 };
        for (cat, &p) in probs.iter().enumerate().take(k) {
            if allowed[cat] {
                candidates.push((p * conf, q, cat));
            }
        }
        masks.push(mask);
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1 * k + a.2).cmp(&(b.1 * k + b.2))));
    candidates.truncate(top_k);
    Ok(candidates
        .into_iter()
        .map(|(score, q, cat)| PredictedTrack {
            category: cat,
            score,
            masks: masks[q].clone(),
        })
        .collect())
}
