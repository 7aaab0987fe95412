//! Category text embeddings and the bottleneck adapter that maps them to the
//! video-feature width.
//!
//! In deterministic mode each category row is derived from its *name* and a
//! seed, never from its index, so a category keeps its vector when the label
//! space is reordered or extended. The keyed generator is:
//!
//! ```text
//! for j in 0..d:
//!     h  = SHA-256( seed as u64 LE ‖ name UTF-8 ‖ 0x00 ‖ j as u32 LE )
//!     u  = (u64 LE of h[0..8]) >> 11          // 53 random bits
//!     z_j = 2 · u / 2^53 − 1                  // uniform in [−1, 1)
//! row = z / ‖z‖₂
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};
use crate::taxonomy::TaxonomySpace;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    DeterministicSeeded { seed: u64 },
    ExternalFile,
}

/// `K × d` unit-norm category embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingTable {
    pub matrix: Mat,
    pub provenance: Provenance,
}

impl TextEmbeddingTable {
    pub fn d(&self) -> usize {
        self.matrix.cols()
    }
}

/// One embedding coordinate of the keyed generator, uniform in `[−1, 1)`.
fn keyed_coordinate(seed: u64, name: &str, j: u32) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(j.to_le_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    let u = u64::from_le_bytes(b) >> 11;
    2.0 * (u as f64 / (1u64 << 53) as f64) - 1.0
}

fn normalize_row(row: &mut [f64]) {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        for v in row {
            *v /= n;
        }
    }
}

/// The unit-norm embedding of a single category name.
pub fn keyed_embedding(name: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..d as u32)
        .map(|j| keyed_coordinate(seed, name, j))
        .collect();
    normalize_row(&mut row);
    row
}

pub fn embed_categories(
    space: &TaxonomySpace,
    d: usize,
    seed: u64,
    external: Option<&Path>,
) -> Result<TextEmbeddingTable> {
    if d < 8 {
        return Err(Error::InvalidArgument {
            arg: "d",
            reason: format!("embedding width {d} < 8"),
        });
    }
    match external {
        None => {
            let rows: Vec<Vec<f64>> = space
                .categories
                .iter()
                .map(|c| keyed_embedding(&c.name, d, seed))
                .collect();
            Ok(TextEmbeddingTable {
                matrix: Mat::from_rows(&rows)?,
                provenance: Provenance::DeterministicSeeded { seed },
            })
        }
        Some(path) => {
            let mut matrix = read_embedding_csv(path)?;
            if matrix.rows() != space.k() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("{} rows for {} categories", matrix.rows(), space.k()),
                });
            }
            if matrix.cols() != d {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("{} columns, expected {d}", matrix.cols()),
                });
            }
            for r in 0..matrix.rows() {
                normalize_row(matrix.row_mut(r));
            }
            Ok(TextEmbeddingTable {
                matrix,
                provenance: Provenance::ExternalFile,
            })
        }
    }
}

/// Reads the external embedding CSV: a `K,d` header line then `K` rows of `d`
/// comma-separated reals, in taxonomy order.
pub fn read_embedding_csv(path: &Path) -> Result<Mat> {
    let text = std::fs::read_to_string(path)?;
    let fmt_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| fmt_err("empty file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| fmt_err(format!("header: {e}")))?;
    let [k, d] = dims[..] else {
        return Err(fmt_err(format!("header `{header}` is not `K,d`")));
    };
    let mut data = Vec::with_capacity(k * d);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fmt_err(format!("row {i}: {e}")))?;
        if vals.len() != d {
            return Err(fmt_err(format!("row {i} has {} values, expected {d}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} row {i}", path.display())));
        }
        data.extend(vals);
        rows += 1;
    }
    if rows != k {
        return Err(fmt_err(format!("header declares {k} rows, found {rows}")));
    }
    Mat::from_vec(k, d, data)
}

pub fn write_embedding_csv(path: &Path, m: &Mat) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{},{}", m.rows(), m.cols())?;
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Raw adapter weights: `act(E·W_down + b_down)·W_up + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: Mat,
    pub b_down: Mat,
    pub w_up: Mat,
    pub b_up: Mat,
    pub activation: Activation,
}

/// Two-layer bottleneck from the embedding width `d` to the feature width `D`.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
    pub activation: Activation,
}

impl Adapter {
    pub const PREFIX: &'static str = "adapter";

    /// `d_mid` must be strictly below `d`.
    pub fn new(d: usize, d_mid: usize, feature_dim: usize, activation: Activation) -> Result<Self> {
        if d_mid == 0 || d_mid >= d {
            return Err(Error::InvalidArgument {
                arg: "d_mid",
                reason: format!("bottleneck width {d_mid} must be in [1, {d})"),
            });
        }
        Ok(Self::unchecked(d, d_mid, feature_dim, activation))
    }

    fn unchecked(d: usize, d_mid: usize, feature_dim: usize, activation: Activation) -> Self {
        Self {
            down: Linear::new(format!("{}.down", Self::PREFIX), d, d_mid, true),
            up: Linear::new(format!("{}.up", Self::PREFIX), d_mid, feature_dim, true),
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.down.init(store, seed, Init::XavierUniform);
        self.up.init(store, seed, Init::XavierUniform);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, table: Var) -> Result<Var> {
        let (_, d) = g.shape(table);
        if d != self.down.in_dim {
            return Err(shape_err(
                "adapter_forward",
                format!("table width {d}, adapter expects {}", self.down.in_dim),
            ));
        }
        let h = self.down.forward(g, store, table)?;
        let h = g.act(h, self.activation);
        self.up.forward(g, store, h)
    }
}

/// Stand-alone adapter evaluation on raw weights (no bottleneck check).
pub fn adapter_forward(table: &TextEmbeddingTable, params: &AdapterParams) -> Result<Mat> {
    let (d, d_mid) = params.w_down.shape();
    let (d_mid2, out) = params.w_up.shape();
    if d_mid != d_mid2
        || params.b_down.shape() != (1, d_mid)
        || params.b_up.shape() != (1, out)
        || table.d() != d
    {
        return Err(shape_err(
            "adapter_forward",
            format!(
                "table width {}, W_down {:?}, W_up {:?}",
                table.d(),
                params.w_down.shape(),
                params.w_up.shape()
            ),
        ));
    }
    let adapter = Adapter::unchecked(d, d_mid, out, params.activation);
    let mut store = ParamStore::new();
    store.insert(adapter.down.weight_name(), params.w_down.clone());
    store.insert(adapter.down.bias_name(), params.b_down.clone());
    store.insert(adapter.up.weight_name(), params.w_up.clone());
    store.insert(adapter.up.bias_name(), params.b_up.clone());
    let mut g = Graph::new();
    let t = g.leaf(table.matrix.clone());
    let out = adapter.forward(&mut g, &store, t)?;
    Ok(g.value(out).clone())
}
