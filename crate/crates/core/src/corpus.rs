//! Corpora in memory and on disk.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! <root>/taxonomy.json                 unified space over all datasets
//! <root>/<dataset_id>/manifest.json    see `Manifest`
//! <root>/<dataset_id>/clips/<clip_id>.bin
//! ```
//!
//! Clip bundle, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "TXVC"
//! version   u32      1
//! T, H, W   u32 ×3
//! tracks    u32
//! per track: name_len u16, name bytes (UTF-8)
//! pixels    T·H·W·3 bytes, RGB, index ((t·H + y)·W + x)·3 + c
//! per track: ceil(T·H·W / 8) bytes of mask bits, bit i of the track's
//!            stream at byte i/8, position i%8 (least significant first)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{gen_clip, ClipTrack, SynthConfig, SyntheticDatasetSpec, VideoClip};
use crate::taxonomy::{build_space, DatasetId, TaxonomySpace};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TXVC";
const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub clip_id: String,
    /// Path relative to the dataset directory.
    pub file: String,
    pub split: Split,
    pub num_tracks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset_id: DatasetId,
    pub labels: Vec<String>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub spec: SyntheticDatasetSpec,
    pub clips: Vec<ManifestClip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCorpus {
    pub manifest: Manifest,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

impl DatasetCorpus {
    pub fn split(&self, split: Split) -> &[VideoClip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub space: TaxonomySpace,
    pub datasets: IndexMap<DatasetId, DatasetCorpus>,
}

impl Corpus {
    pub fn dataset(&self, id: &DatasetId) -> Result<&DatasetCorpus> {
        self.datasets
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }
}

/// Generates every dataset of `config`; train clips take indices
/// `0..train_clips`, validation clips the following ones.
pub fn generate(config: &SynthConfig) -> Result<Corpus> {
    let space = build_space(&config.label_lists())?;
    let mut datasets = IndexMap::new();
    for spec in &config.datasets {
        spec.validate()?;
        let mut train = Vec::with_capacity(spec.train_clips);
        let mut val = Vec::with_capacity(spec.val_clips);
        let mut clips = Vec::new();
        for i in 0..spec.train_clips + spec.val_clips {
            let clip = gen_clip(spec, config.seed, i)?;
            let split = if i < spec.train_clips { Split::Train } else { Split::Val };
            clips.push(ManifestClip {
                clip_id: clip.clip_id.clone(),
                file: format!("clips/{}.bin", clip.clip_id),
                split,
                num_tracks: clip.tracks.len(),
            });
            match split {
                Split::Train => train.push(clip),
                Split::Val => val.push(clip),
            }
        }
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            dataset_id: spec.dataset_id.clone(),
            labels: spec.names(),
            frames: spec.frames,
            height: spec.height,
            width: spec.width,
            seed: config.seed,
            spec_hash: spec.hash(),
            spec: spec.clone(),
            clips,
        };
        if datasets.contains_key(&spec.dataset_id) {
            return Err(Error::Corpus(format!("dataset `{}` listed twice", spec.dataset_id)));
        }
        datasets.insert(spec.dataset_id.clone(), DatasetCorpus { manifest, train, val });
    }
    Ok(Corpus { space, datasets })
}

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(clip.pixels.len() + 64);
    out.extend_from_slice(MAGIC);
    for v in [
        BUNDLE_VERSION,
        clip.frames as u32,
        clip.height as u32,
        clip.width as u32,
        clip.tracks.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for tr in &clip.tracks {
        out.extend_from_slice(&(tr.category.len() as u16).to_le_bytes());
        out.extend_from_slice(tr.category.as_bytes());
    }
    out.extend_from_slice(&clip.pixels);
    for tr in &clip.tracks {
        let mut bytes = vec![0u8; tr.mask.len().div_ceil(8)];
        for (i, &b) in tr.mask.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: "truncated clip bundle".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}

pub fn decode_clip(
    bytes: &[u8],
    clip_id: &str,
    dataset_id: &DatasetId,
    path: &Path,
) -> Result<VideoClip> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if r.u32()? != BUNDLE_VERSION {
        return Err(bad("unsupported bundle version"));
    }
    let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = r.u32()? as usize;
    let mut names = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u16()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|_| bad("category name is not UTF-8"))?;
        names.push(s.to_string());
    }
    let plane = t * h * w;
    let pixels = r.take(plane * 3)?.to_vec();
    let mut tracks = Vec::with_capacity(n);
    for category in names {
        let bits = r.take(plane.div_ceil(8))?;
        let mask = (0..plane).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        tracks.push(ClipTrack { category, mask });
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(VideoClip {
        clip_id: clip_id.to_string(),
        dataset_id: dataset_id.clone(),
        frames: t,
        height: h,
        width: w,
        pixels,
        tracks,
    })
}

/// Writes the corpus below `root`, creating directories as needed.
pub fn write(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    fs::write(root.join("taxonomy.json"), corpus.space.to_json()?)?;
    for (id, ds) in &corpus.datasets {
        let dir = root.join(id.as_str());
        fs::create_dir_all(dir.join("clips"))?;
        let all = ds.train.iter().chain(&ds.val);
        for (entry, clip) in ds.manifest.clips.iter().zip(all) {
            fs::write(dir.join(&entry.file), encode_clip(clip))?;
        }
        let json = serde_json::to_string_pretty(&ds.manifest)?;
        fs::write(dir.join("manifest.json"), json)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported manifest schema_version {}", m.schema_version),
        });
    }
    Ok(m)
}

/// Loads a corpus written by [`write`]; datasets follow the order of the
/// taxonomy's dataset list.
pub fn read(root: &Path) -> Result<Corpus> {
    let tax_path = root.join("taxonomy.json");
    let space = TaxonomySpace::from_json(&fs::read_to_string(&tax_path)?)?;
    let mut datasets = IndexMap::new();
    for id in &space.dataset_ids {
        let dir: PathBuf = root.join(id.as_str());
        let manifest = read_manifest(&dir.join("manifest.json"))?;
        if &manifest.dataset_id != id {
            return Err(Error::Corpus(format!(
                "manifest in `{}` names dataset `{}`",
                dir.display(),
                manifest.dataset_id
            )));
        }
        let labels = space.labels_of(id)?;
        if labels != manifest.labels.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Corpus(format!("labels of `{id}` disagree with taxonomy.json")));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for entry in &manifest.clips {
            let path = dir.join(&entry.file);
            let clip = decode_clip(&fs::read(&path)?, &entry.clip_id, id, &path)?;
            match entry.split {
                Split::Train => train.push(clip),
                Split::Val => val.push(clip),
            }
        }
        datasets.insert(id.clone(), DatasetCorpus { manifest, train, val });
    }
    Ok(Corpus { space, datasets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::stock_config;

    fn small_config() -> SynthConfig {
        let mut c = stock_config(5);
        for d in &mut c.datasets {
            d.train_clips = 3;
            d.val_clips = 2;
        }
        c
    }

    #[test]
    fn disk_round_trip() {
        let corpus = generate(&small_config()).unwrap();
        assert_eq!(corpus.space.k(), 20);
        let dir = tempfile::tempdir().unwrap();
        write(&corpus, dir.path()).unwrap();
        let back = read(dir.path()).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn corrupt_bundles_are_rejected() {
        let corpus = generate(&small_config()).unwrap();
        let clip = &corpus.datasets[0].train[0];
        let bytes = encode_clip(clip);
        let p = Path::new("x.bin");
        let id = clip.dataset_id.clone();
        assert_eq!(decode_clip(&bytes, &clip.clip_id, &id, p).unwrap(), *clip);
        assert!(decode_clip(&bytes[..bytes.len() - 1], "c", &id, p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_clip(&bad, "c", &id, p).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_clip(&long, "c", &id, p).is_err());
    }
}
