//! Ratio-controlled multi-dataset clip sampling.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::keyed_rng;
use crate::taxonomy::DatasetId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub ratios: IndexMap<DatasetId, f64>,
    pub seed: u64,
}

/// Infinite stream of `(dataset, clip index)` draws.
#[derive(Clone, Debug)]
pub struct SampleStream {
    datasets: Vec<(DatasetId, f64, usize)>,
    total: f64,
    rng: ChaCha8Rng,
}

impl SamplingSchedule {
    /// Exact probability of each dataset.
    pub fn probabilities(&self) -> IndexMap<DatasetId, f64> {
        let total: f64 = self.ratios.values().sum();
        self.ratios
            .iter()
            .map(|(d, &r)| (d.clone(), r / total))
            .collect()
    }
}

/// Starts a stream over corpora of the given sizes (clips per dataset).
pub fn sample_stream(
    schedule: &SamplingSchedule,
    sizes: &IndexMap<DatasetId, usize>,
) -> Result<SampleStream> {
    let mut datasets = Vec::new();
    for (d, &r) in &schedule.ratios {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::InvalidArgument {
                arg: "ratios",
                reason: format!("ratio of `{d}` is {r}"),
            });
        }
        if r > 0.0 {
            let n = *sizes
                .get(d)
                .ok_or_else(|| Error::UnknownDataset(d.to_string()))?;
            if n == 0 {
                return Err(Error::Corpus(format!("dataset `{d}` has a positive ratio but no clips")));
            }
            datasets.push((d.clone(), r, n));
        }
    }
    if datasets.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "ratios",
            reason: "no positive ratio".into(),
        });
    }
    let total = datasets.iter().map(|d| d.1).sum();
    Ok(SampleStream {
        datasets,
        total,
        rng: keyed_rng(schedule.seed, "sampler"),
    })
}

impl Iterator for SampleStream {
    type Item = (DatasetId, usize);

    fn next(&mut self) -> Option<Self::Item> {
        let u = self.rng.gen::<f64>() * self.total;
        let mut acc = 0.0;
        let mut pick = self.datasets.len() - 1;
        for (i, d) in self.datasets.iter().enumerate() {
            acc += d.1;
            if u < acc {
                pick = i;
                break;
            }
        }
        let (id, _, n) = &self.datasets[pick];
        let clip = self.rng.gen_range(0..*n);
        Some((id.clone(), clip))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes() -> IndexMap<DatasetId, usize> {
        [("a", 4), ("b", 3), ("c", 0)]
            .into_iter()
            .map(|(k, v)| (DatasetId::new(k), v))
            .collect()
    }

    fn schedule(r: &[(&str, f64)]) -> SamplingSchedule {
        SamplingSchedule {
            ratios: r.iter().map(|&(k, v)| (DatasetId::new(k), v)).collect(),
            seed: 9,
        }
    }

    #[test]
    fn zero_ratio_is_never_drawn() {
        let s = sample_stream(&schedule(&[("a", 1.0), ("b", 0.0)]), &sizes()).unwrap();
        assert!(s.take(1000).all(|(d, i)| d.as_str() == "a" && i < 4));
    }

    #[test]
    fn errors_and_determinism() {
        assert!(sample_stream(&schedule(&[("c", 1.0)]), &sizes()).is_err());
        assert!(sample_stream(&schedule(&[("a", 0.0)]), &sizes()).is_err());
        assert!(sample_stream(&schedule(&[("z", 1.0)]), &sizes()).is_err());
        assert!(sample_stream(&schedule(&[("a", -1.0)]), &sizes()).is_err());
        let s = schedule(&[("a", 1.0), ("b", 2.0)]);
        let x: Vec<_> = sample_stream(&s, &sizes()).unwrap().take(50).collect();
        let y: Vec<_> = sample_stream(&s, &sizes()).unwrap().take(50).collect();
        assert_eq!(x, y);
    }
}
