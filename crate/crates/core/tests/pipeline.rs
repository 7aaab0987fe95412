//! Taxonomy fixtures, synthetic data, sampling, determinism and the
//! baseline reduction.

use std::collections::HashMap;

use indexmap::IndexMap;
use taxovis::checkpoint::Checkpoint;
use taxovis::config::RunConfig;
use taxovis::corpus::{self, Corpus, Split};
use taxovis::embedding::keyed_embedding;
use taxovis::model::Model;
use taxovis::sampler::{sample_stream, SamplingSchedule};
use taxovis::synth::{render, stock_config, stock_specs, RenderedInstance, Shape};
use taxovis::taxonomy::{build_space, DatasetId};
use taxovis::train::train;

const YTVIS19: &str = "person giant_panda lizard parrot skateboard sedan ape dog snake monkey hand rabbit duck cat cow fish train horse turtle bear motorbike giraffe leopard fox deer owl surfboard airplane truck zebra tiger elephant snowboard boat shark mouse frog eagle earless_seal tennis_racket";
/// Names of the 2019 list marked as shared with the 2021 list.
const SHARED_21: &str = "person giant_panda lizard parrot skateboard dog snake monkey rabbit duck cat cow fish train horse turtle bear motorbike giraffe leopard fox deer airplane truck zebra tiger elephant snowboard boat shark mouse frog earless_seal tennis_racket";
const ONLY_21: &str = "bird car flying_disc squirrel whale ship";
/// Names of the 2019 list marked as shared with the occlusion dataset.
const SHARED_OVIS: &str = "person giant_panda lizard parrot sedan dog monkey rabbit cat cow fish horse turtle bear motorbike giraffe airplane truck zebra tiger elephant boat";
const ONLY_OVIS: &str = "bicycle poultry sheep";

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn lists(pairs: &[(&str, Vec<String>)]) -> IndexMap<DatasetId, Vec<String>> {
    pairs.iter().map(|(d, l)| (DatasetId::new(*d), l.clone())).collect()
}

fn partial_overlap_fixtures() {
    let y19 = words(YTVIS19);
    let y21 = [words(SHARED_21), words(ONLY_21)].concat();
    let ovis = [words(SHARED_OVIS), words(ONLY_OVIS)].concat();
    assert_eq!((y19.len(), y21.len(), ovis.len()), (40, 40, 25));

    let space = build_space(&lists(&[("ytvis19", y19.clone()), ("ytvis21", y21)])).unwrap();
    let report = space.overlap_report().unwrap();
    assert_eq!(report.count(&DatasetId::new("ytvis19"), &DatasetId::new("ytvis21")), Some(34));

    let space = build_space(&lists(&[("ytvis19", y19), ("ovis", ovis)])).unwrap();
    assert_eq!(space.k(), 43);
    let (a, b) = (DatasetId::new("ytvis19"), DatasetId::new("ovis"));
    assert_eq!(space.overlap_report().unwrap().count(&a, &b), Some(22));
    let mask = space.dataset_mask(&b).unwrap();
    assert_eq!(mask.count(), 25);
    let both = space
        .dataset_mask(&a)
        .unwrap()
        .mask
        .iter()
        .zip(&mask.mask)
        .filter(|(x, y)| **x && **y)
        .count();
    assert_eq!(both, 22);
}

fn stock_overlap_golden() {
    let space = build_space(&stock_config(0).label_lists()).unwrap();
    let got = format!("{}", space.overlap_report().unwrap());
    assert_eq!(got, include_str!("golden/stock_overlap.txt"));
    assert_eq!(space.k(), 20);
}

/// Cosines of the keyed embedding, frozen from an independent
/// implementation of the same SHA-256 construction.
fn embedding_cosines_are_frozen() {
    let cos = |a: &str, b: &str, d: usize, seed: u64| {
        let (x, y) = (keyed_embedding(a, d, seed), keyed_embedding(b, d, seed));
        x.iter().zip(&y).map(|(u, v)| u * v).sum::<f64>()
    };
    for (a, b, d, seed, want) in [
        ("person", "duck", 64, 0, -0.11870424993569724),
        ("truck", "sedan", 64, 0, 0.0381535892065575),
        ("giant_panda", "zebra", 16, 7, -0.18176298904439844),
    ] {
        assert!((cos(a, b, d, seed) - want).abs() < 1e-12, "{a}/{b}");
    }
    assert!((cos("person", "person", 64, 1) - 1.0).abs() < 1e-12);
    let head = &keyed_embedding("person", 8, 0)[..3];
    for (g, w) in head.iter().zip([-0.3035536205510518, -0.27916798656690484, 0.5250984526175562]) {
        assert!((g - w).abs() < 1e-12);
    }
}

fn rasterizer_matches_exact_pixel_counts() {
    let mut spec = stock_specs().remove(0);
    spec.frames = 2;
    spec.height = 32;
    spec.width = 32;
    let inst = |shape, radius, x, y| RenderedInstance {
        category: 0,
        shape,
        radius,
        centers: vec![(x, y); 2],
    };
    let mut r = taxovis::params::keyed_rng(0, "raster");
    // Half-integer pixel centres: a radius-5 disk covers 20 per quadrant,
    // an 8×8 square spans the 0.8r box and a radius-4 diamond covers 10 per quadrant.
    for (shape, radius, want) in [(Shape::Disk, 5.0, 80), (Shape::Square, 5.0, 64), (Shape::Diamond, 4.0, 40)] {
        let clip = render(&spec, "c".into(), &[inst(shape, radius, 10.0, 10.0)], &mut r).unwrap();
        let n = clip.tracks[0].mask.iter().filter(|&&b| b).count();
        assert_eq!(n, 2 * want, "{shape:?}");
    }
    // A later instance covers the earlier one where they overlap.
    let clip = render(
        &spec,
        "c".into(),
        &[inst(Shape::Square, 5.0, 10.0, 10.0), inst(Shape::Square, 5.0, 14.0, 10.0)],
        &mut r,
    )
    .unwrap();
    let count = |i: usize| clip.tracks[i].mask.iter().filter(|&&b| b).count();
    assert_eq!((count(0), count(1)), (2 * 32, 2 * 64));
    assert!(clip.tracks[0].mask.iter().zip(&clip.tracks[1].mask).all(|(a, b)| !(a & b)));
}

fn sampler_ratios_over_110000_draws() {
    let ids = ["synth_a", "synth_c", "synth_b"].map(DatasetId::new);
    let schedule = SamplingSchedule {
        ratios: ids.iter().cloned().zip([1.0, 1.0, 0.75]).collect(),
        seed: 0,
    };
    let sizes = ids.iter().cloned().zip([160, 160, 160]).collect();
    let n = 110_000;
    let mut counts: HashMap<DatasetId, usize> = HashMap::new();
    for (d, i) in sample_stream(&schedule, &sizes).unwrap().take(n) {
        assert!(i < 160);
        *counts.entry(d).or_default() += 1;
    }
    let mut chi2 = 0.0;
    for (d, p) in schedule.probabilities() {
        let got = counts[&d] as f64 / n as f64;
        assert!((got - p).abs() <= 0.005, "{d}: {got} vs {p}");
        chi2 += (counts[&d] as f64 - p * n as f64).powi(2) / (p * n as f64);
    }
    // 99.9th percentile of chi-square with two degrees of freedom.
    assert!(chi2 < 13.82, "chi2 {chi2}");
}

fn small_corpus() -> Corpus {
    let mut cfg = stock_config(0);
    for d in &mut cfg.datasets {
        d.train_clips = 6;
        d.val_clips = 2;
    }
    corpus::generate(&cfg).unwrap()
}

fn short_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.optim.iterations = 12;
    c.model.taxonomy = true;
    c.loss.lambda_taxo = 0.5;
    c
}

fn training_is_deterministic_and_checkpoints_round_trip() {
    let corpus = small_corpus();
    let a = train(&short_config(3), &corpus).unwrap().checkpoint;
    let b = train(&short_config(3), &corpus).unwrap().checkpoint;
    assert_eq!(a.hash().unwrap(), b.hash().unwrap());
    let c = train(&short_config(4), &corpus).unwrap().checkpoint;
    assert_ne!(a.hash().unwrap(), c.hash().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    a.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.hash().unwrap(), a.hash().unwrap());
}

/// The taxonomy model with identity injections against the model built
/// without any taxonomy components, on 20 clips.
fn ablated_model_reduces_to_the_baseline_bitwise() {
    let corpus = small_corpus();
    let config = RunConfig::default().model;
    let base = Model::new(
        taxovis::model::ModelConfig {
            taxonomy: false,
            ..config.clone()
        },
        &corpus.space,
        0,
    )
    .unwrap();
    let tmt = Model::new(config, &corpus.space, 0).unwrap();
    let mut ts = tmt.init_store(5);
    tmt.decoder.zero_injection(&mut ts);
    let bs = base.init_store(5);
    let mut seen = 0;
    for d in corpus.datasets.values() {
        for clip in d.split(Split::Train).iter().chain(d.split(Split::Val)).take(7) {
            if seen == 20 {
                break;
            }
            let inputs = tmt.featurizer.prepare(clip).unwrap();
            let (a, comp) = tmt.predict(&ts, &inputs).unwrap();
            let (b, none) = base.predict(&bs, &inputs).unwrap();
            assert!(comp.is_some() && none.is_none());
            assert_eq!(a.class_logits, b.class_logits, "{}", clip.clip_id);
            assert_eq!(a.mask_logits, b.mask_logits, "{}", clip.clip_id);
            assert_eq!(a.query_embeddings, b.query_embeddings, "{}", clip.clip_id);
            seen += 1;
        }
    }
    assert_eq!(seen, 20);
}

/// Every check above, callable outside the test harness.
#[allow(dead_code)]
pub fn checks() -> Vec<(&'static str, fn())> {
    vec![
        ("partial_overlap_fixtures", partial_overlap_fixtures),
        ("stock_overlap_golden", stock_overlap_golden),
        ("embedding_cosines_are_frozen", embedding_cosines_are_frozen),
        ("rasterizer_matches_exact_pixel_counts", rasterizer_matches_exact_pixel_counts),
        ("sampler_ratios_over_110000_draws", sampler_ratios_over_110000_draws),
        ("training_is_deterministic_and_checkpoints_round_trip", training_is_deterministic_and_checkpoints_round_trip),
        ("ablated_model_reduces_to_the_baseline_bitwise", ablated_model_reduces_to_the_baseline_bitwise),
    ]
}

#[cfg(test)]
mod harness {
    #[test]
    fn partial_overlap_fixtures() {
        super::partial_overlap_fixtures()
    }
    #[test]
    fn stock_overlap_golden() {
        super::stock_overlap_golden()
    }
    #[test]
    fn embedding_cosines_are_frozen() {
        super::embedding_cosines_are_frozen()
    }
    #[test]
    fn rasterizer_matches_exact_pixel_counts() {
        super::rasterizer_matches_exact_pixel_counts()
    }
    #[test]
    fn sampler_ratios_over_110000_draws() {
        super::sampler_ratios_over_110000_draws()
    }
    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        super::training_is_deterministic_and_checkpoints_round_trip()
    }
    #[test]
    fn ablated_model_reduces_to_the_baseline_bitwise() {
        super::ablated_model_reduces_to_the_baseline_bitwise()
    }
}
