//! Binary checkpoints.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic        4 bytes "TXCK"
//! version      u32     1
//! header_len   u64
//! header       UTF-8 JSON (`Header`)
//! params       for each header.params entry: rows·cols f64 values, row-major
//! adam moments for each header.adam.moments name: m values, then v values
//! ```
//!
//! Writing the same checkpoint twice gives identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::taxonomy::TaxonomySpace;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"TXCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub space: TaxonomySpace,
    pub iteration: usize,
    pub params: ParamStore,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    space: TaxonomySpace,
    taxonomy_hash: String,
    iteration: usize,
    params: Vec<ParamEntry>,
    adam: AdamHeader,
}

fn put(out: &mut Vec<u8>, m: &Mat) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let moments: Vec<String> = self.adam.m.keys().cloned().collect();
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            space: self.space.clone(),
            taxonomy_hash: self.space.hash(),
            iteration: self.iteration,
            params: self
                .params
                .iter()
                .map(|(n, m)| ParamEntry {
                    name: n.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
            adam: AdamHeader {
                lr: self.adam.lr,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                weight_decay: self.adam.weight_decay,
                step: self.adam.step,
                moments: moments.clone(),
            },
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.params.iter() {
            put(&mut out, m);
        }
        for name in &moments {
            put(&mut out, &self.adam.m[name]);
            let v = self.adam.v.get(name).ok_or_else(|| Error::InvalidArgument {
                arg: "adam",
                reason: format!("first moment without second for `{name}`"),
            })?;
            put(&mut out, v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match config".into()));
        }
        if header.space.hash() != header.taxonomy_hash {
            return Err(bad("taxonomy hash does not match space".into()));
        }
        let mut pos = 16 + hlen;
        let mut take = |rows: usize, cols: usize| -> Result<Mat> {
            let n = rows * cols * 8;
            let chunk = bytes
                .get(pos..pos + n)
                .ok_or_else(|| bad("truncated tensor data".into()))?;
            pos += n;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Mat::from_vec(rows, cols, data)
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            params.insert(e.name.clone(), take(e.rows, e.cols)?);
        }
        let a = header.adam;
        let mut adam = Adam::new(a.lr, a.weight_decay);
        adam.beta1 = a.beta1;
        adam.beta2 = a.beta2;
        adam.eps = a.eps;
        adam.step = a.step;
        for name in a.moments {
            let (r, c) = params.get(&name)?.shape();
            let m = take(r, c)?;
            let v = take(r, c)?;
            adam.m.insert(name.clone(), m);
            adam.v.insert(name, v);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            config: header.config,
            space: header.space,
            iteration: header.iteration,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }

    /// SHA-256 of the serialized bytes.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}
