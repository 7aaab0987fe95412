//! Ablation suites: grids of training runs sharing a seed and a corpus.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::decoder::Aggregation;
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::train::{evaluate_checkpoint, train_with, IterationLog, SelectionStats};
use crate::taxonomy::DatasetId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Components,
    Ratio,
    NtSize,
    Aggregation,
    ZeroShot,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Components,
        Suite::Ratio,
        Suite::NtSize,
        Suite::Aggregation,
        Suite::ZeroShot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Ratio => "ratio",
            Suite::NtSize => "nt-size",
            Suite::Aggregation => "aggregation",
            Suite::ZeroShot => "zero-shot",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

/// One training run of a suite and where to evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRow {
    pub name: String,
    pub config: RunConfig,
    pub eval: Vec<DatasetId>,
    pub zero_shot: bool,
}

/// Outcome of one seed of a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoint_hash: String,
    /// Mean total loss over the last tenth of training.
    pub final_loss: f64,
    pub results: IndexMap<DatasetId, EvalResult>,
    pub selection: IndexMap<DatasetId, SelectionStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub taxonomy: bool,
    pub lambda_taxo: f64,
    pub n_t: usize,
    pub aggregation: Aggregation,
    pub ratios: IndexMap<DatasetId, f64>,
    pub zero_shot: bool,
    /// Means over `runs`.
    pub final_loss: f64,
    pub results: IndexMap<DatasetId, EvalResult>,
    pub selection: IndexMap<DatasetId, SelectionStats>,
    pub runs: Vec<SeedRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Field-wise mean of evaluation results.
pub fn mean_results(rs: &[&EvalResult]) -> EvalResult {
    let n = rs.len().max(1) as f64;
    let avg = |f: fn(&EvalResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
    let mut per_category = IndexMap::new();
    for r in rs {
        for (&c, &v) in &r.per_category {
            *per_category.entry(c).or_insert(0.0) += v / n;
        }
    }
    EvalResult {
        ap: avg(|r| r.ap),
        ap50: avg(|r| r.ap50),
        ap75: avg(|r| r.ap75),
        ar1: avg(|r| r.ar1),
        ar10: avg(|r| r.ar10),
        per_category,
    }
}

fn need_datasets(base: &RunConfig, n: usize) -> Result<Vec<DatasetId>> {
    let ids: Vec<DatasetId> = base.data.ratios.keys().cloned().collect();
    if ids.len() < n {
        return Err(Error::InvalidArgument {
            arg: "data.ratios",
            reason: format!("suite needs {n} datasets, config lists {}", ids.len()),
        });
    }
    Ok(ids)
}

/// Taxonomy compiler and injection off, no taxonomy loss.
pub fn baseline(base: &RunConfig) -> RunConfig {
    let mut c = base.clone();
    c.model.taxonomy = false;
    c.loss.lambda_taxo = 0.0;
    c.loss.lambda_score = 0.0;
    c
}

/// Values of the `N_T` sweep that fit into a space of `k` categories.
pub fn nt_grid(k: usize) -> Vec<usize> {
    let mut v: Vec<usize> = [1, 2, 5, 10, 15, 20, 50, k]
        .into_iter()
        .filter(|&n| n <= k)
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Row plan of a suite. `k` is the size of the corpus's label space.
pub fn plan(suite: Suite, base: &RunConfig, k: usize) -> Result<Vec<PlannedRow>> {
    let all: Vec<DatasetId> = base.train_datasets();
    let row = |name: String, config: RunConfig, eval: Vec<DatasetId>| PlannedRow {
        name,
        config,
        eval,
        zero_shot: false,
    };
    Ok(match suite {
        Suite::Components => {
            let first = all.first().cloned().ok_or(Error::EmptyLabelMap)?;
            let mut single = baseline(base);
            single.data.ratios = [(first.clone(), 1.0)].into_iter().collect();
            let mut tmt = base.clone();
            tmt.model.taxonomy = true;
            let mut no_taxo = tmt.clone();
            no_taxo.loss.lambda_taxo = 0.0;
            let mut with_taxo = tmt;
            with_taxo.loss.lambda_taxo = 0.5;
            vec![
                row("0 single-dataset baseline".into(), single, vec![first]),
                row("I baseline".into(), baseline(base), all.clone()),
                row("II +TCM&TIM".into(), no_taxo, all.clone()),
                row("III +taxonomy loss".into(), with_taxo, all),
            ]
        }
        Suite::Ratio => {
            let ids = need_datasets(base, 3)?;
            [[2.0, 1.0, 0.75], [1.0, 1.0, 0.5], [1.0, 1.0, 0.75], [1.0, 1.0, 1.0]]
                .into_iter()
                .map(|r| {
                    let mut c = base.clone();
                    c.data.ratios = ids.iter().cloned().zip(r).collect();
                    let name = r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":");
                    row(name, c, ids.clone())
                })
                .collect()
        }
        Suite::NtSize => nt_grid(k)
            .into_iter()
            .map(|n| {
                let mut c = base.clone();
                c.model.taxonomy = true;
                c.model.n_t = n;
                let name = if n == k { format!("{n} (all)") } else { n.to_string() };
                row(name, c, all.clone())
            })
            .collect(),
        Suite::Aggregation => [Aggregation::Add, Aggregation::Concat, Aggregation::CrossAttention]
            .into_iter()
            .map(|a| {
                let mut c = base.clone();
                c.model.taxonomy = true;
                c.model.aggregation = a;
                row(a.to_string(), c, all.clone())
            })
            .collect(),
        Suite::ZeroShot => {
            let ids = need_datasets(base, 2)?;
            let mut rows = Vec::new();
            for target in ids.iter().take(2) {
                for (label, tmt) in [("baseline", false), ("TMT", true)] {
                    let mut c = if tmt { base.clone() } else { baseline(base) };
                    c.model.taxonomy = tmt;
                    c.data.ratios.shift_remove(target);
                    rows.push(PlannedRow {
                        name: format!("{label} -> {target}"),
                        config: c,
                        eval: vec![target.clone()],
                        zero_shot: true,
                    });
                }
            }
            rows
        }
    })
}

struct Trained {
    checkpoint: Checkpoint,
    hash: String,
    final_loss: f64,
}

/// Trains rows over a fixed corpus, reusing runs whose configs coincide.
pub struct Runner<'a> {
    corpus: &'a Corpus,
    cache: HashMap<String, Trained>,
}

impl<'a> Runner<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Self {
            corpus,
            cache: HashMap::new(),
        }
    }

    fn trained(
        &mut self,
        name: &str,
        config: &RunConfig,
        progress: &mut impl FnMut(&str, &IterationLog),
    ) -> Result<&Trained> {
        let key = config.hash();
        if !self.cache.contains_key(&key) {
            let t = train_with(config, self.corpus, |l| progress(name, l))?;
            let tail = (t.log.len() / 10).max(1);
            let s = &t.log[t.log.len().saturating_sub(tail)..];
            let final_loss = if s.is_empty() {
                0.0
            } else {
                s.iter().map(|l| l.loss.total).sum::<f64>() / s.len() as f64
            };
            let hash = t.checkpoint.hash()?;
            let mut checkpoint = t.checkpoint;
            checkpoint.adam.m.clear();
            checkpoint.adam.v.clear();
            self.cache.insert(
                key.clone(),
                Trained {
                    checkpoint,
                    hash,
                    final_loss,
                },
            );
        }
        Ok(&self.cache[&key])
    }

    /// Trains and evaluates one planned row once per seed.
    pub fn row(
        &mut self,
        r: &PlannedRow,
        seeds: &[u64],
        progress: &mut impl FnMut(&str, &IterationLog),
    ) -> Result<AblationRow> {
        let corpus = self.corpus;
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = r.config.clone();
            config.seed = seed;
            let label = format!("{} seed {seed}", r.name);
            let t = self.trained(&label, &config, progress)?;
            let mut results = IndexMap::new();
            let mut selection = IndexMap::new();
            for d in &r.eval {
                let (res, sel) = evaluate_checkpoint(&t.checkpoint, corpus, d, Split::Val, r.zero_shot)?;
                results.insert(d.clone(), res);
                if let Some(s) = sel {
                    selection.insert(d.clone(), s);
                }
            }
            runs.push(SeedRun {
                seed,
                checkpoint_hash: t.hash.clone(),
                final_loss: t.final_loss,
                results,
                selection,
            });
        }
        let n = runs.len().max(1) as f64;
        let results = r
            .eval
            .iter()
            .map(|d| {
                let rs: Vec<&EvalResult> = runs.iter().map(|x| &x.results[d]).collect();
                (d.clone(), mean_results(&rs))
            })
            .collect();
        let mut selection: IndexMap<DatasetId, SelectionStats> = IndexMap::new();
        for run in &runs {
            for (d, s) in &run.selection {
                let e = selection.entry(d.clone()).or_insert(SelectionStats {
                    recall: 0.0,
                    ..*s
                });
                e.recall += s.recall / n;
            }
        }
        Ok(AblationRow {
            name: r.name.clone(),
            taxonomy: r.config.model.taxonomy,
            lambda_taxo: r.config.loss.lambda_taxo,
            n_t: r.config.model.n_t,
            aggregation: r.config.model.aggregation,
            ratios: r.config.data.ratios.clone(),
            zero_shot: r.zero_shot,
            final_loss: runs.iter().map(|x| x.final_loss).sum::<f64>() / n,
            results,
            selection,
            runs,
        })
    }

    /// Runs every row of a suite.
    pub fn suite(
        &mut self,
        suite: Suite,
        base: &RunConfig,
        seeds: &[u64],
        mut progress: impl FnMut(&str, &IterationLog),
    ) -> Result<AblationReport> {
        if seeds.is_empty() {
            return Err(Error::InvalidArgument {
                arg: "seeds",
                reason: "need at least one seed".into(),
            });
        }
        let rows = plan(suite, base, self.corpus.space.k())?
            .iter()
            .map(|r| self.row(r, seeds, &mut progress))
            .collect::<Result<_>>()?;
        Ok(AblationReport {
            suite,
            seeds: seeds.to_vec(),
            iterations: base.optim.iterations,
            rows,
        })
    }
}

/// Runs a suite on a fresh [`Runner`].
pub fn run(
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    corpus: &Corpus,
    progress: impl FnMut(&str, &IterationLog),
) -> Result<AblationReport> {
    Runner::new(corpus).suite(suite, base, seeds, progress)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("tables".parse::<Suite>(), Err(Error::UnknownMode(_))));
    }

    #[test]
    fn plans_mirror_the_ablation_axes() {
        let base = RunConfig::default();
        let rows = plan(Suite::Components, &base, 20).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(!rows[1].config.model.taxonomy && rows[3].config.loss.lambda_taxo == 0.5);
        assert_eq!(plan(Suite::Ratio, &base, 20).unwrap().len(), 4);
        assert_eq!(nt_grid(20), vec![1, 2, 5, 10, 15, 20]);
        assert_eq!(nt_grid(43), vec![1, 2, 5, 10, 15, 20, 43]);
        let zs = plan(Suite::ZeroShot, &base, 20).unwrap();
        assert_eq!(zs.len(), 4);
        assert!(zs.iter().all(|r| r.zero_shot && !r.config.data.ratios.contains_key(&r.eval[0])));
    }

    #[test]
    fn mean_is_field_wise() {
        let a = EvalResult {
            ap: 10.0,
            ar10: 30.0,
            per_category: [(0, 10.0)].into_iter().collect(),
            ..Default::default()
        };
        let b = EvalResult {
            ap: 20.0,
            per_category: [(0, 20.0), (1, 4.0)].into_iter().collect(),
            ..Default::default()
        };
        let m = mean_results(&[&a, &b]);
        assert_eq!((m.ap, m.ar10), (15.0, 15.0));
        assert_eq!(m.per_category[&0], 15.0);
        assert_eq!(m.per_category[&1], 2.0);
    }
}
