//! Synthetic multi-dataset video corpora of moving parametric shapes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::keyed_rng;
use crate::taxonomy::{DatasetId, LabelLists};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    HBar,
    VBar,
}

impl Shape {
    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Shape::Diamond => ax + ay <= r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && ax <= 0.6 * (dy + r),
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.36 * r * r
            }
            Shape::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            Shape::HBar => ax <= r && ay <= 0.35 * r,
            Shape::VBar => ax <= 0.35 * r && ay <= r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBand {
    Small,
    Medium,
    Large,
}

impl SizeBand {
    /// Inclusive radius range in pixels.
    pub fn radius_range(self) -> (f64, f64) {
        match self {
            SizeBand::Small => (4.0, 6.0),
            SizeBand::Medium => (7.0, 9.0),
            SizeBand::Large => (10.0, 13.0),
        }
    }
}

/// Appearance of a category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Archetype {
    pub shape: Shape,
    pub color: [u8; 3],
    pub size: SizeBand,
}

const fn arch(shape: Shape, color: [u8; 3], size: SizeBand) -> Archetype {
    Archetype { shape, color, size }
}

const BROWN: [u8; 3] = [140, 90, 40];
const BLUE: [u8; 3] = [40, 80, 220];
const WHITE: [u8; 3] = [240, 240, 240];
const YELLOW: [u8; 3] = [240, 220, 40];
const GREEN: [u8; 3] = [40, 200, 60];

/// Built-in category appearances. `sedan` and `truck` differ only in size.
pub const STOCK_ARCHETYPES: &[(&str, Archetype)] = &[
    ("person", arch(Shape::VBar, [220, 180, 140], SizeBand::Medium)),
    ("duck", arch(Shape::Disk, YELLOW, SizeBand::Small)),
    ("sedan", arch(Shape::Square, BLUE, SizeBand::Medium)),
    ("truck", arch(Shape::Square, BLUE, SizeBand::Large)),
    ("cat", arch(Shape::Triangle, [240, 140, 30], SizeBand::Small)),
    ("dog", arch(Shape::Triangle, BROWN, SizeBand::Medium)),
    ("horse", arch(Shape::Ring, BROWN, SizeBand::Medium)),
    ("zebra", arch(Shape::Cross, WHITE, SizeBand::Medium)),
    ("fish", arch(Shape::Diamond, [40, 220, 220], SizeBand::Small)),
    ("airplane", arch(Shape::Cross, [160, 160, 170], SizeBand::Large)),
    ("bird", arch(Shape::Disk, [220, 40, 40], SizeBand::Small)),
    ("sheep", arch(Shape::Disk, WHITE, SizeBand::Medium)),
    ("bicycle", arch(Shape::Ring, GREEN, SizeBand::Medium)),
    ("skateboard", arch(Shape::HBar, [150, 60, 200], SizeBand::Small)),
    ("surfboard", arch(Shape::HBar, [240, 120, 180], SizeBand::Medium)),
    ("train", arch(Shape::HBar, [150, 30, 30], SizeBand::Large)),
    ("kite", arch(Shape::Diamond, [220, 40, 200], SizeBand::Medium)),
    ("umbrella", arch(Shape::Ring, YELLOW, SizeBand::Large)),
    ("bottle", arch(Shape::VBar, GREEN, SizeBand::Small)),
    ("chair", arch(Shape::Square, BROWN, SizeBand::Small)),
];

pub fn stock_archetype(name: &str) -> Option<Archetype> {
    STOCK_ARCHETYPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|&(_, a)| a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    /// Defaults to the stock archetype of `name`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<Archetype>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub dataset_id: DatasetId,
    pub categories: Vec<CategorySpec>,
    pub train_clips: usize,
    pub val_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Maximum speed along each axis, pixels per frame.
    pub max_speed: f64,
    /// Per-frame positional jitter amplitude, pixels.
    pub jitter: f64,
    /// Probability that a new instance starts on top of an earlier one.
    pub occlusion_prob: f64,
}

impl SyntheticDatasetSpec {
    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn archetype(&self, category: usize) -> Result<Archetype> {
        let c = &self.categories[category];
        c.archetype
            .or_else(|| stock_archetype(&c.name))
            .ok_or_else(|| Error::UnknownCategory(c.name.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument {
            arg: "synthetic spec",
            reason,
        };
        if self.categories.is_empty() {
            return Err(Error::EmptyLabelList {
                dataset: self.dataset_id.to_string(),
            });
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(bad(format!(
                "instances {}..={}",
                self.min_instances, self.max_instances
            )));
        }
        if self.frames == 0 {
            return Err(bad("zero frames".into()));
        }
        let mut largest: f64 = 0.0;
        for i in 0..self.categories.len() {
            largest = largest.max(self.archetype(i)?.size.radius_range().1);
        }
        if (self.height.min(self.width) as f64) < 2.0 * largest + 2.0 {
            return Err(bad(format!(
                "frame {}x{} too small for radius {largest}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) || self.max_speed < 0.0 || self.jitter < 0.0 {
            return Err(bad("motion parameters out of range".into()));
        }
        Ok(())
    }

    /// SHA-256 of the spec's compact JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Corpus generation request: a seed and a list of dataset specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub datasets: Vec<SyntheticDatasetSpec>,
}

impl SynthConfig {
    pub fn label_lists(&self) -> LabelLists {
        self.datasets
            .iter()
            .map(|d| (d.dataset_id.clone(), d.names()))
            .collect()
    }
}

fn base_spec(id: &str, names: &[&str]) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        dataset_id: DatasetId::new(id),
        categories: names
            .iter()
            .map(|n| CategorySpec {
                name: n.to_string(),
                archetype: None,
            })
            .collect(),
        train_clips: 200,
        val_clips: 40,
        frames: 5,
        height: 64,
        width: 64,
        min_instances: 1,
        max_instances: 4,
        max_speed: 2.0,
        jitter: 0.5,
        occlusion_prob: 0.2,
    }
}

pub const SYNTH_A: &[&str] = &[
    "person", "duck", "sedan", "truck", "cat", "dog", "horse", "zebra", "fish", "airplane",
];
pub const SYNTH_B: &[&str] = &[
    "person", "cat", "dog", "horse", "zebra", "bird", "sheep", "bicycle",
];
pub const SYNTH_C: &[&str] = &[
    "person", "sedan", "truck", "bird", "sheep", "skateboard", "surfboard", "train", "kite",
    "umbrella", "bottle", "chair",
];

/// The three stock corpora; SynthB is the occlusion-heavy one.
pub fn stock_specs() -> Vec<SyntheticDatasetSpec> {
    let a = base_spec("synth_a", SYNTH_A);
    let mut b = base_spec("synth_b", SYNTH_B);
    b.min_instances = 3;
    b.max_instances = 6;
    b.occlusion_prob = 0.5;
    let c = base_spec("synth_c", SYNTH_C);
    vec![a, b, c]
}

pub fn stock_config(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        datasets: stock_specs(),
    }
}

/// One rendered object across all frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedInstance {
    /// Index into the spec's category list.
    pub category: usize,
    pub shape: Shape,
    pub radius: f64,
    /// Centre `(x, y)` per frame.
    pub centers: Vec<(f64, f64)>,
}

/// A clip with full-resolution visible masks.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub dataset_id: DatasetId,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `T × H × W × 3`.
    pub pixels: Vec<u8>,
    pub tracks: Vec<ClipTrack>,
}

/// Visible extent of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTrack {
    pub category: String,
    /// `T × H × W`.
    pub mask: Vec<bool>,
}

impl VideoClip {
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Downsamples every track by `factor` (strict majority vote per block)
    /// and drops tracks left empty.
    pub fn tracks_at(&self, factor: usize) -> Result<Vec<(String, Vec<bool>)>> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::InvalidArgument {
                arg: "factor",
                reason: format!("{factor} does not divide {}x{}", self.height, self.width),
            });
        }
        let (hm, wm) = (self.height / factor, self.width / factor);
        let need = factor * factor / 2 + 1;
        let mut out = Vec::new();
        for tr in &self.tracks {
            let mut m = vec![false; self.frames * hm * wm];
            for t in 0..self.frames {
                for by in 0..hm {
                    for bx in 0..wm {
                        let mut n = 0;
                        for dy in 0..factor {
                            let row = (t * self.height + by * factor + dy) * self.width;
                            for dx in 0..factor {
                                n += tr.mask[row + bx * factor + dx] as usize;
                            }
                        }
                        m[(t * hm + by) * wm + bx] = n >= need;
                    }
                }
            }
            if m.iter().any(|&v| v) {
                out.push((tr.category.clone(), m));
            }
        }
        Ok(out)
    }
}

/// Samples the instances of one clip.
pub fn sample_instances(spec: &SyntheticDatasetSpec, rng: &mut impl Rng) -> Result<Vec<RenderedInstance>> {
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut out: Vec<RenderedInstance> = Vec::with_capacity(count);
    for _ in 0..count {
        let category = rng.gen_range(0..spec.categories.len());
        let a = spec.archetype(category)?;
        let (lo, hi) = a.size.radius_range();
        let radius = rng.gen_range(lo..=hi);
        let start = match out.last() {
            Some(prev) if rng.gen_bool(spec.occlusion_prob) => {
                let (px, py) = prev.centers[0];
                (
                    px + rng.gen_range(-prev.radius..=prev.radius),
                    py + rng.gen_range(-prev.radius..=prev.radius),
                )
            }
            _ => (rng.gen_range(radius..=w - radius), rng.gen_range(radius..=h - radius)),
        };
        let v = if spec.max_speed > 0.0 {
            (
                rng.gen_range(-spec.max_speed..=spec.max_speed),
                rng.gen_range(-spec.max_speed..=spec.max_speed),
            )
        } else {
            (0.0, 0.0)
        };
        let centers = (0..spec.frames)
            .map(|t| {
                let (jx, jy) = if spec.jitter > 0.0 {
                    (
                        rng.gen_range(-spec.jitter..=spec.jitter),
                        rng.gen_range(-spec.jitter..=spec.jitter),
                    )
                } else {
                    (0.0, 0.0)
                };
                let x = start.0 + v.0 * t as f64 + jx;
                let y = start.1 + v.1 * t as f64 + jy;
                (x.clamp(radius, w - radius), y.clamp(radius, h - radius))
            })
            .collect();
        out.push(RenderedInstance {
            category,
            shape: a.shape,
            radius,
            centers,
        });
    }
    Ok(out)
}

/// Rasterizes instances in order; later instances cover earlier ones.
pub fn render(
    spec: &SyntheticDatasetSpec,
    clip_id: String,
    instances: &[RenderedInstance],
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let plane = h * w;
    let mut owner: Vec<Option<usize>> = vec![None; t_n * plane];
    for (i, inst) in instances.iter().enumerate() {
        for t in 0..t_n {
            let (cx, cy) = inst.centers[t];
            for y in 0..h {
                for x in 0..w {
                    if inst.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, inst.radius) {
                        owner[t * plane + y * w + x] = Some(i);
                    }
                }
            }
        }
    }
    let bg: [u8; 3] = [
        rng.gen_range(25..=55),
        rng.gen_range(25..=55),
        rng.gen_range(25..=55),
    ];
    let mut pixels = vec![0u8; t_n * plane * 3];
    for (p, o) in owner.iter().enumerate() {
        let base = match o {
            Some(i) => spec.archetype(instances[*i].category)?.color,
            None => bg,
        };
        for c in 0..3 {
            let noise: i16 = rng.gen_range(-8..=8);
            pixels[p * 3 + c] = (base[c] as i16 + noise).clamp(0, 255) as u8;
        }
    }
    let tracks = instances
        .iter()
        .enumerate()
        .map(|(i, inst)| ClipTrack {
            category: spec.categories[inst.category].name.clone(),
            mask: owner.iter().map(|o| *o == Some(i)).collect(),
        })
        .filter(|tr| tr.mask.iter().any(|&v| v))
        .collect();
    Ok(VideoClip {
        clip_id,
        dataset_id: spec.dataset_id.clone(),
        frames: t_n,
        height: h,
        width: w,
        pixels,
        tracks,
    })
}

pub fn clip_id(dataset: &DatasetId, index: usize) -> String {
    format!("{}-{index:05}", dataset.as_str())
}

/// Generates clip `index` of a dataset; a pure function of `(spec, seed, index)`.
pub fn gen_clip(spec: &SyntheticDatasetSpec, seed: u64, index: usize) -> Result<VideoClip> {
    spec.validate()?;
    let id = clip_id(&spec.dataset_id, index);
    let mut rng = keyed_rng(seed, &format!("clip/{id}"));
    let instances = sample_instances(spec, &mut rng)?;
    render(spec, id, &instances, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> SyntheticDatasetSpec {
        let mut s = base_spec("t", &["duck", "truck"]);
        s.height = 32;
        s.width = 32;
        s
    }

    #[test]
    fn stock_archetypes_are_injective() {
        for (i, (n1, a1)) in STOCK_ARCHETYPES.iter().enumerate() {
            for (n2, a2) in &STOCK_ARCHETYPES[i + 1..] {
                assert_ne!(a1, a2, "{n1} vs {n2}");
            }
        }
        let (s, t) = (stock_archetype("sedan").unwrap(), stock_archetype("truck").unwrap());
        assert_eq!((s.shape, s.color), (t.shape, t.color));
        assert_ne!(s.size, t.size);
    }

    #[test]
    fn static_instance_has_constant_mask() {
        let mut s = tiny_spec();
        s.min_instances = 1;
        s.max_instances = 1;
        s.max_speed = 0.0;
        s.jitter = 0.0;
        let clip = gen_clip(&s, 3, 0).unwrap();
        let plane = 32 * 32;
        let m = &clip.tracks[0].mask;
        for t in 1..5 {
            assert_eq!(m[..plane], m[t * plane..(t + 1) * plane]);
        }
    }

    #[test]
    fn occlusion_is_a_set_difference() {
        let s = tiny_spec();
        let big = RenderedInstance {
            category: 1,
            shape: Shape::Square,
            radius: 10.0,
            centers: vec![(16.0, 16.0); 5],
        };
        let small = RenderedInstance {
            category: 0,
            shape: Shape::Disk,
            radius: 5.0,
            centers: vec![(16.0, 16.0); 5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = render(&s, "x".into(), &[big.clone(), small.clone()], &mut rng).unwrap();
        let alone = render(&s, "y".into(), &[big], &mut rng).unwrap();
        let top = render(&s, "z".into(), &[small], &mut rng).unwrap();
        for p in 0..clip.tracks[0].mask.len() {
            let want = alone.tracks[0].mask[p] && !top.tracks[0].mask[p];
            assert_eq!(clip.tracks[0].mask[p], want);
            assert!(!(clip.tracks[0].mask[p] && clip.tracks[1].mask[p]));
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let specs = stock_specs();
        for s in &specs {
            s.validate().unwrap();
            for i in 0..3 {
                let a = gen_clip(s, 7, i).unwrap();
                assert_eq!(a, gen_clip(s, 7, i).unwrap());
                assert!(!a.tracks.is_empty());
                assert!(a.tracks.iter().all(|t| s.names().contains(&t.category)));
            }
        }
        assert_ne!(gen_clip(&specs[0], 7, 0).unwrap(), gen_clip(&specs[0], 8, 0).unwrap());
    }

    #[test]
    fn rejects_small_frames() {
        let mut s = tiny_spec();
        s.height = 16;
        assert!(gen_clip(&s, 0, 0).is_err());
    }

    #[test]
    fn downsampled_tracks_stay_disjoint() {
        let s = &stock_specs()[1];
        for i in 0..5 {
            let clip = gen_clip(s, 1, i).unwrap();
            let low = clip.tracks_at(4).unwrap();
            for p in 0..low.first().map_or(0, |t| t.1.len()) {
                assert!(low.iter().filter(|t| t.1[p]).count() <= 1);
            }
        }
    }
}
