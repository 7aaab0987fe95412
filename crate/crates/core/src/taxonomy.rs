//! Unified label space over several datasets.
//!
//! Categories are merged by exact name. Their order is fixed by the input:
//! first by the first dataset (in input order) that lists the name, then by
//! the name's position in that dataset's list. Embedding tables and logits
//! index categories in this order.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetId(pub String);

impl DatasetId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DatasetId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// Lowercases and replaces whitespace runs with underscores.
pub fn canonical_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDescriptor {
    pub global_id: usize,
    pub name: String,
    /// Datasets listing this category, in dataset input order.
    pub member_of: Vec<DatasetId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomySpace {
    pub dataset_ids: Vec<DatasetId>,
    pub categories: Vec<CategoryDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMask {
    pub dataset_id: DatasetId,
    pub mask: Vec<bool>,
}

impl DatasetMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Mask over `K + 1` logits; the trailing no-object column is always allowed.
    pub fn with_no_object(&self) -> Vec<bool> {
        let mut m = self.mask.clone();
        m.push(true);
        m
    }
}

/// Label lists per dataset, in input order.
pub type LabelLists = IndexMap<DatasetId, Vec<String>>;

/// Builds the unified space by exact-name union.
pub fn build_space(lists: &LabelLists) -> Result<TaxonomySpace> {
    build_space_with_aliases(lists, &IndexMap::new())
}

/// Like [`build_space`], first rewriting names through `aliases` (name → name).
/// Names that collapse onto the same alias within one dataset are kept once.
pub fn build_space_with_aliases(
    lists: &LabelLists,
    aliases: &IndexMap<String, String>,
) -> Result<TaxonomySpace> {
    if lists.is_empty() {
        return Err(Error::EmptyLabelMap);
    }
    let mut categories: Vec<CategoryDescriptor> = Vec::new();
    let mut index: IndexMap<String, usize> = IndexMap::new();
    for (dataset, names) in lists {
        if names.is_empty() {
            return Err(Error::EmptyLabelList {
                dataset: dataset.to_string(),
            });
        }
        let mut seen_raw = HashSet::new();
        let mut seen = HashSet::new();
        for raw in names {
            if !seen_raw.insert(raw.as_str()) {
                return Err(Error::DuplicateCategory {
                    dataset: dataset.to_string(),
                    name: raw.clone(),
                });
            }
            let name = aliases.get(raw).unwrap_or(raw);
            if !seen.insert(name.clone()) {
                continue;
            }
            match index.get(name) {
                Some(&i) => categories[i].member_of.push(dataset.clone()),
                None => {
                    index.insert(name.clone(), categories.len());
                    categories.push(CategoryDescriptor {
                        global_id: categories.len(),
                        name: name.clone(),
                        member_of: vec![dataset.clone()],
                    });
                }
            }
        }
    }
    Ok(TaxonomySpace {
        dataset_ids: lists.keys().cloned().collect(),
        categories,
    })
}

impl TaxonomySpace {
    /// Total number of categories `K`.
    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn id_of(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn has_dataset(&self, dataset: &DatasetId) -> bool {
        self.dataset_ids.contains(dataset)
    }

    pub fn dataset_mask(&self, dataset: &DatasetId) -> Result<DatasetMask> {
        if !self.has_dataset(dataset) {
            return Err(Error::UnknownDataset(dataset.to_string()));
        }
        Ok(DatasetMask {
            dataset_id: dataset.clone(),
            mask: self
                .categories
                .iter()
                .map(|c| c.member_of.contains(dataset))
                .collect(),
        })
    }

    /// Union of several datasets' masks.
    pub fn union_mask(&self, datasets: &[DatasetId]) -> Result<Vec<bool>> {
        let mut out = vec![false; self.k()];
        for d in datasets {
            for (o, m) in out.iter_mut().zip(self.dataset_mask(d)?.mask) {
                *o |= m;
            }
        }
        Ok(out)
    }

    /// Labels of one dataset, in space order.
    pub fn labels_of(&self, dataset: &DatasetId) -> Result<Vec<&str>> {
        let mask = self.dataset_mask(dataset)?;
        Ok(self
            .categories
            .iter()
            .zip(mask.mask)
            .filter(|(_, m)| *m)
            .map(|(c, _)| c.name.as_str())
            .collect())
    }

    pub fn overlap_report(&self) -> Result<OverlapReport> {
        let n = self.dataset_ids.len();
        if n < 2 {
            return Err(Error::TooFewDatasets(n));
        }
        let mut shared = vec![vec![Vec::new(); n]; n];
        for c in &self.categories {
            for (i, di) in self.dataset_ids.iter().enumerate() {
                if !c.member_of.contains(di) {
                    continue;
                }
                for (j, dj) in self.dataset_ids.iter().enumerate() {
                    if c.member_of.contains(dj) {
                        shared[i][j].push(c.name.clone());
                    }
                }
            }
        }
        Ok(OverlapReport {
            datasets: self.dataset_ids.clone(),
            shared,
        })
    }

    /// Pretty JSON dump.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON dump, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("space serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Checks the structural invariants; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            let bad = |reason: String| Error::InvalidArgument {
                arg: "taxonomy",
                reason,
            };
            if c.global_id != i {
                return Err(bad(format!("category {} has id {}", i, c.global_id)));
            }
            if !names.insert(c.name.as_str()) {
                return Err(bad(format!("duplicate name `{}`", c.name)));
            }
            if c.member_of.is_empty() {
                return Err(bad(format!("`{}` belongs to no dataset", c.name)));
            }
            if let Some(d) = c.member_of.iter().find(|d| !self.dataset_ids.contains(d)) {
                return Err(bad(format!("`{}` references unknown dataset `{d}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let space: Self = serde_json::from_str(s)?;
        space.validate()?;
        Ok(space)
    }
}

/// Pairwise shared categories between datasets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OverlapReport {
    pub datasets: Vec<DatasetId>,
    /// `shared[i][j]` lists the categories both `datasets[i]` and `datasets[j]` annotate.
    pub shared: Vec<Vec<Vec<String>>>,
}

impl OverlapReport {
    pub fn count(&self, a: &DatasetId, b: &DatasetId) -> Option<usize> {
        let i = self.datasets.iter().position(|d| d == a)?;
        let j = self.datasets.iter().position(|d| d == b)?;
        Some(self.shared[i][j].len())
    }
}

impl fmt::Display for OverlapReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .datasets
            .iter()
            .map(|d| d.0.len())
            .max()
            .unwrap_or(0)
            .max(5);
        write!(f, "{:width$}", "")?;
        for d in &self.datasets {
            write!(f, "  {:>width$}", d.0)?;
        }
        writeln!(f)?;
        for (i, di) in self.datasets.iter().enumerate() {
            write!(f, "{:width$}", di.0)?;
            for j in 0..self.datasets.len() {
                write!(f, "  {:>width$}", self.shared[i][j].len())?;
            }
            writeln!(f)?;
        }
        for i in 0..self.datasets.len() {
            for j in i + 1..self.datasets.len() {
                writeln!(
                    f,
                    "{} & {}: {}",
                    self.datasets[i],
                    self.datasets[j],
                    self.shared[i][j].join(", ")
                )?;
            }
        }
        Ok(())
    }
}

/// Reads a `{dataset: [names…]}` JSON file, canonicalizing names.
pub fn read_label_lists(path: &Path) -> Result<LabelLists> {
    let text = std::fs::read_to_string(path)?;
    let raw: IndexMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(raw
        .into_iter()
        .map(|(d, names)| {
            (
                DatasetId(d),
                names.iter().map(|n| canonical_name(n)).collect(),
            )
        })
        .collect())
}

/// Reads a `{name: canonical_name}` alias JSON file.
pub fn read_aliases(path: &Path) -> Result<IndexMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let raw: IndexMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(raw
        .into_iter()
        .map(|(k, v)| (canonical_name(&k), canonical_name(&v)))
        .collect())
}
