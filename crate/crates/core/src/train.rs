//! Training loop and checkpoint evaluation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TaxoMatching};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ClipGroundTruth, ClipPredictions, EvalResult, GroundTruthTrack};
use crate::featurize::ClipInputs;
use crate::loss::{build_loss, match_predictions, LossBreakdown, LossContext, LossVars, TrackTargets};
use crate::matching::MatchAssignment;
use crate::model::{infer_tracks, Model};
use crate::params::{clip_grad_norm, Adam, ParamStore};
use crate::sampler::{sample_stream, SamplingSchedule};
use crate::synth::VideoClip;
use crate::taxonomy::{DatasetId, TaxonomySpace};
use crate::tensor::Mat;

/// Tracks kept per clip at inference.
pub const TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub dataset: DatasetId,
    pub clip_id: String,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub iteration: usize,
    pub results: IndexMap<DatasetId, EvalResult>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<IterationLog>,
    pub evals: Vec<EvalLog>,
}

/// Ground truth of a clip in global category ids at mask resolution.
pub fn clip_targets(space: &TaxonomySpace, clip: &VideoClip, stride: usize) -> Result<TrackTargets> {
    let tracks = clip.tracks_at(stride)?;
    let cols = tracks.first().map_or(0, |t| t.1.len());
    let mut masks = Mat::zeros(tracks.len(), cols);
    let mut categories = Vec::with_capacity(tracks.len());
    for (i, (name, m)) in tracks.iter().enumerate() {
        categories.push(space.id_of(name)?);
        for (dst, &b) in masks.row_mut(i).iter_mut().zip(m) {
            *dst = if b { 1.0 } else { 0.0 };
        }
    }
    Ok(TrackTargets { categories, masks })
}

pub fn clip_ground_truth(space: &TaxonomySpace, clip: &VideoClip, stride: usize) -> Result<ClipGroundTruth> {
    let tracks = clip
        .tracks_at(stride)?
        .into_iter()
        .map(|(name, masks)| {
            Ok(GroundTruthTrack {
                category: space.id_of(&name)?,
                masks,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ClipGroundTruth {
        clip_id: clip.clip_id.clone(),
        tracks,
    })
}

pub fn build_model(config: &RunConfig, space: &TaxonomySpace) -> Result<Model> {
    Model::new(config.model.clone(), space, config.seed)
}

/// Per-dataset inputs of the loss.
#[derive(Clone, Debug)]
pub struct DatasetContext {
    /// Allowed logits including no-object; `None` when masking is off.
    pub allowed: Option<Vec<bool>>,
    /// The dataset's labels over the union space.
    pub labels: Vec<bool>,
}

impl DatasetContext {
    pub fn new(space: &TaxonomySpace, dataset: &DatasetId, masking: bool) -> Result<Self> {
        let m = space.dataset_mask(dataset)?;
        Ok(Self {
            allowed: masking.then(|| m.with_no_object()),
            labels: m.mask,
        })
    }
}

/// Forward pass, matching and loss of one clip on a fresh graph.
pub fn clip_loss(
    model: &Model,
    store: &ParamStore,
    config: &RunConfig,
    inputs: &ClipInputs,
    targets: &TrackTargets,
    ctx: &DatasetContext,
) -> Result<(Graph, LossVars, LossBreakdown, MatchAssignment)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, inputs)?;
    let allowed = ctx.allowed.as_deref();
    let cost = config.loss.cost();
    let dec = &out.decoder;
    let assignment = match_predictions(
        g.value(dec.class_logits),
        g.value(dec.mask_logits),
        targets,
        allowed,
        cost,
    )?;
    let taxo_assignment = match (config.loss.taxo_matching, dec.taxo_logits) {
        (TaxoMatching::Separate, Some(t)) => {
            match_predictions(g.value(t), g.value(dec.mask_logits), targets, allowed, cost)?
        }
        _ => assignment.clone(),
    };
    let mut presence = vec![0.0; model.k];
    for &c in &targets.categories {
        presence[c] = 1.0;
    }
    let score = out
        .tcm
        .as_ref()
        .map(|t| (t.score_logits, presence.as_slice(), ctx.labels.as_slice()));
    let (vars, breakdown) = build_loss(
        &mut g,
        dec,
        targets,
        &assignment,
        &taxo_assignment,
        score,
        LossContext {
            allowed,
            weights: config.loss.weights(),
        },
    )?;
    Ok((g, vars, breakdown, assignment))
}

/// Runs training on the train splits of `corpus`.
pub fn train(config: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(config, corpus, |_| {})
}

/// Like [`train`], calling `progress` after every iteration.
pub fn train_with(
    config: &RunConfig,
    corpus: &Corpus,
    mut progress: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let space = &corpus.space;
    let model = build_model(config, space)?;
    let mut store = model.init_store(config.seed);
    let mut adam = Adam::new(config.optim.lr, config.optim.weight_decay);
    let sizes: IndexMap<DatasetId, usize> = config
        .data
        .ratios
        .keys()
        .map(|d| Ok((d.clone(), corpus.dataset(d)?.train.len())))
        .collect::<Result<_>>()?;
    let mut stream = sample_stream(
        &SamplingSchedule {
            ratios: config.data.ratios.clone(),
            seed: config.seed,
        },
        &sizes,
    )?;
    let mut contexts = IndexMap::new();
    for d in sizes.keys() {
        contexts.insert(
            d.clone(),
            DatasetContext::new(space, d, config.loss.dataset_masking)?,
        );
    }
    let frozen = &config.optim.frozen_prefixes;
    let trainable = |name: &str| !frozen.iter().any(|p| name.starts_with(p.as_str()));
    let mut log = Vec::with_capacity(config.optim.iterations);
    let mut evals = Vec::new();
    for it in 0..config.optim.iterations {
        let (dataset, idx) = stream.next().expect("sampler is infinite");
        let clip = &corpus.dataset(&dataset)?.train[idx];
        let inputs = model.featurizer.prepare(clip)?;
        let targets = clip_targets(space, clip, model.config.mask_stride)?;
        let (mut g, vars, breakdown, _) =
            clip_loss(&model, &store, config, &inputs, &targets, &contexts[&dataset])?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                clip_id: clip.clip_id.clone(),
            });
        }
        g.backward(vars.total)?;
        let mut grads = g.param_grads();
        grads.retain(|n, _| trainable(n));
        if config.optim.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, config.optim.grad_clip);
        }
        adam.lr = config.optim.lr_at(it);
        adam.update(&mut store, &grads, trainable);
        let entry = IterationLog {
            iteration: it,
            dataset,
            clip_id: clip.clip_id.clone(),
            loss: breakdown,
        };
        progress(&entry);
        log.push(entry);
        if config.optim.eval_every > 0 && (it + 1) % config.optim.eval_every == 0 {
            let mut results = IndexMap::new();
            for d in config.train_datasets() {
                results.insert(
                    d.clone(),
                    evaluate_model(&model, &store, corpus, &d, Split::Val)?.0,
                );
            }
            evals.push(EvalLog {
                iteration: it + 1,
                results,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            space: space.clone(),
            iteration: config.optim.iterations,
            params: store,
            adam,
        },
        log,
        evals,
    })
}

/// Selection statistics of the taxonomy compiler over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Fraction of ground-truth (clip, category) pairs inside the top-`N_T`.
    pub recall: f64,
    pub n_t: usize,
    pub k: usize,
}

/// Evaluates a model on one dataset split with that dataset's label mask.
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    corpus: &Corpus,
    dataset: &DatasetId,
    split: Split,
) -> Result<(EvalResult, Option<SelectionStats>)> {
    let space = &corpus.space;
    let mask = space.dataset_mask(dataset)?;
    let allowed = mask.with_no_object();
    let categories: Vec<usize> = (0..space.k()).filter(|&i| mask.mask[i]).collect();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let (mut hit, mut total) = (0usize, 0usize);
    let mut any_tcm = false;
    for clip in corpus.dataset(dataset)?.split(split) {
        let inputs = model.featurizer.prepare(clip)?;
        let (p, compiled) = model.predict(store, &inputs)?;
        let gt = clip_ground_truth(space, clip, model.config.mask_stride)?;
        if let Some(c) = &compiled {
            any_tcm = true;
            let mut present: Vec<usize> = gt.tracks.iter().map(|t| t.category).collect();
            present.sort_unstable();
            present.dedup();
            total += present.len();
            hit += present.iter().filter(|c2| c.selected.contains(c2)).count();
        }
        preds.push(ClipPredictions {
            clip_id: clip.clip_id.clone(),
            tracks: infer_tracks(&p, &allowed, TOP_K)?,
        });
        gts.push(gt);
    }
    let stats = any_tcm.then(|| SelectionStats {
        recall: if total == 0 { 1.0 } else { hit as f64 / total as f64 },
        n_t: model.n_t(),
        k: model.k,
    });
    Ok((evaluate(&preds, &gts, &categories)?, stats))
}

/// Evaluates a checkpoint on a dataset split of `corpus`.
///
/// Without `zero_shot` the dataset must have been part of training.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    corpus: &Corpus,
    dataset: &DatasetId,
    split: Split,
    zero_shot: bool,
) -> Result<(EvalResult, Option<SelectionStats>)> {
    let (ck, co) = (checkpoint.space.hash(), corpus.space.hash());
    if ck != co {
        return Err(Error::TaxonomyMismatch {
            checkpoint: ck,
            corpus: co,
        });
    }
    let trained = checkpoint.config.train_datasets().contains(dataset);
    if !zero_shot && !trained {
        return Err(Error::InvalidArgument {
            arg: "dataset",
            reason: format!("`{dataset}` was not trained on; use zero-shot evaluation"),
        });
    }
    let model = build_model(&checkpoint.config, &checkpoint.space)?;
    evaluate_model(&model, &checkpoint.params, corpus, dataset, split)
}
