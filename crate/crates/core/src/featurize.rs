//! Single-scale toy featurizer: patch projections plus fixed sinusoidal
//! space-time encodings.

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};
use crate::synth::VideoClip;
use crate::tcm::VideoFeatures;
use crate::tensor::Mat;

pub const PREFIX: &str = "feat";

/// Flattens non-overlapping `p × p` patches of every frame, scaled to
/// `[-0.5, 0.5]`. Rows follow `(t, py, px)`; columns `(dy·p + dx)·3 + c`.
pub fn patchify(clip: &VideoClip, p: usize) -> Result<Mat> {
    if p == 0 || clip.height % p != 0 || clip.width % p != 0 {
        return Err(Error::InvalidArgument {
            arg: "patch",
            reason: format!("patch {p} does not divide {}x{}", clip.height, clip.width),
        });
    }
    let (hp, wp) = (clip.height / p, clip.width / p);
    let mut m = Mat::zeros(clip.frames * hp * wp, p * p * 3);
    for t in 0..clip.frames {
        for py in 0..hp {
            for px in 0..wp {
                let row = m.row_mut((t * hp + py) * wp + px);
                for dy in 0..p {
                    for dx in 0..p {
                        let rgb = clip.pixel(t, py * p + dy, px * p + dx);
                        for c in 0..3 {
                            row[(dy * p + dx) * 3 + c] = rgb[c] as f64 / 255.0 - 0.5;
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}

/// Sinusoidal encoding of `(t, y, x)`: the first `D/4` channels encode `t`,
/// the next `3D/8` encode `y`, the last `3D/8` encode `x`.
pub fn positional_encoding(t_n: usize, h: usize, w: usize, d: usize) -> Result<Mat> {
    if d == 0 || d % 8 != 0 {
        return Err(Error::InvalidArgument {
            arg: "feature_dim",
            reason: format!("{d} is not a positive multiple of 8"),
        });
    }
    let blocks = [(0, d / 4), (d / 4, 3 * d / 8), (d / 4 + 3 * d / 8, 3 * d / 8)];
    let enc = |pos: usize, c: usize, s: usize| {
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / s as f64);
        let a = pos as f64 * freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut m = Mat::zeros(t_n * h * w, d);
    for t in 0..t_n {
        for y in 0..h {
            for x in 0..w {
                let row = m.row_mut((t * h + y) * w + x);
                for (axis, &(start, size)) in blocks.iter().enumerate() {
                    let pos = [t, y, x][axis];
                    for c in 0..size {
                        row[start + c] = enc(pos, c, size);
                    }
                }
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct Featurizer {
    pub patch: usize,
    pub mask_stride: usize,
    pub patch_proj: Linear,
    pub pixel_proj: Linear,
    pub activation: Activation,
}

/// Graph handles of a featurized clip.
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    /// `(T·H/p·W/p) × D`.
    pub features: Var,
    /// `(T·H_m·W_m) × D_m`.
    pub pixel: Var,
}

/// Clip-dependent constants, computed once per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInputs {
    pub patches: Mat,
    pub pos: Mat,
    pub pixel_patches: Mat,
    pub pixel_pos: Mat,
    pub frames: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl Featurizer {
    pub fn new(dim: usize, mask_dim: usize, activation: Activation) -> Result<Self> {
        Self::with_patches(8, 4, dim, mask_dim, activation)
    }

    pub fn with_patches(
        patch: usize,
        mask_stride: usize,
        dim: usize,
        mask_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        for (name, v) in [("feature_dim", dim), ("mask_dim", mask_dim)] {
            if v == 0 || v % 8 != 0 {
                return Err(Error::InvalidArgument {
                    arg: name,
                    reason: format!("{v} is not a positive multiple of 8"),
                });
            }
        }
        Ok(Self {
            patch,
            mask_stride,
            patch_proj: Linear::new(format!("{PREFIX}.patch"), patch * patch * 3, dim, true),
            pixel_proj: Linear::new(
                format!("{PREFIX}.pixel"),
                mask_stride * mask_stride * 3,
                mask_dim,
                true,
            ),
            activation,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.patch_proj.init(store, seed, Init::XavierUniform);
        self.pixel_proj.init(store, seed, Init::XavierUniform);
    }

    pub fn prepare(&self, clip: &VideoClip) -> Result<ClipInputs> {
        let patches = patchify(clip, self.patch)?;
        let pixel_patches = patchify(clip, self.mask_stride)?;
        let (fh, fw) = (clip.height / self.patch, clip.width / self.patch);
        let (mh, mw) = (clip.height / self.mask_stride, clip.width / self.mask_stride);
        Ok(ClipInputs {
            pos: positional_encoding(clip.frames, fh, fw, self.patch_proj.out_dim)?,
            pixel_pos: positional_encoding(clip.frames, mh, mw, self.pixel_proj.out_dim)?,
            patches,
            pixel_patches,
            frames: clip.frames,
            feat_h: fh,
            feat_w: fw,
            mask_h: mh,
            mask_w: mw,
        })
    }

    /// `F = patches·W + b + pos`; pixel features `act(pixel_patches·W' + b') + pos'`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &ClipInputs) -> Result<FeatureVars> {
        let p = g.leaf(inputs.patches.clone());
        let proj = self.patch_proj.forward(g, store, p)?;
        let pos = g.leaf(inputs.pos.clone());
        let features = g.add(proj, pos)?;
        let pp = g.leaf(inputs.pixel_patches.clone());
        let px = self.pixel_proj.forward(g, store, pp)?;
        let px = g.act(px, self.activation);
        let ppos = g.leaf(inputs.pixel_pos.clone());
        let pixel = g.add(px, ppos)?;
        Ok(FeatureVars { features, pixel })
    }

    /// Plain-value features of a clip.
    pub fn featurize(&self, store: &ParamStore, clip: &VideoClip) -> Result<(VideoFeatures, Mat)> {
        let inputs = self.prepare(clip)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &inputs)?;
        Ok((
            VideoFeatures {
                values: g.value(out.features).clone(),
                pos: inputs.pos,
                t: inputs.frames,
                h: inputs.feat_h,
                w: inputs.feat_w,
            },
            g.value(out.pixel).clone(),
        ))
    }
}
