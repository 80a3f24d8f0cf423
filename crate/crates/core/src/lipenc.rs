//! Lip branch: a patch transformer over mouth-region images.
//!
//! Images are cut into non-overlapping `P×P` patches in raster order, projected
//! to width `D`, prefixed with a learnable CLS token, offset by learnable
//! positional rows and passed through pre-norm encoder blocks. The CLS row of
//! the output is the lip feature.
//!
//! All frames of a sequence are encoded in one pass: tokens of frame `t`
//! occupy rows `t·(N+1) .. (t+1)·(N+1)` and attention is confined to each
//! frame's block.

use numkit::{init, Graph, ParameterSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{insert_layer_norm, insert_linear, layer_norm, linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Largest patch count the positional table covers.
    pub max_patches: usize,
    pub ffn_mult: usize,
}

impl Default for LipConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            patch: 16,
            dim: 64,
            heads: 8,
            layers: 1,
            max_patches: 900,
            ffn_mult: 4,
        }
    }
}

impl LipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(CoreError::Config(format!(
                "lip image {}×{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch
            )));
        }
        if self.channels == 0 {
            return Err(CoreError::Config("lip image needs at least one channel".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "lip width {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.num_patches() > self.max_patches {
            return Err(CoreError::SequenceLength {
                len: self.num_patches(),
                max: self.max_patches,
            });
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Image in row-major `H×W×C` order with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LipImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl LipImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(CoreError::Dim(format!(
                "lip image {height}×{width}×{channels} given {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Rows are patches in raster order; each row walks the patch by pixel row,
/// then pixel column, then channel.
pub fn patchify(img: &LipImage, p: usize) -> Result<Tensor> {
    let (h, w, c) = (img.height, img.width, img.channels);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(CoreError::Config(format!(
            "lip image {h}×{w} is not divisible into {p}-pixel patches"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w * c);
    for pr in 0..ph {
        for pc in 0..pw {
            for r in 0..p {
                let start = ((pr * p + r) * w + pc * p) * c;
                data.extend_from_slice(&img.pixels[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(vec![ph * pw, p * p * c], data)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, p: usize) -> Result<LipImage> {
    let (n, len) = patches.dims2()?;
    if p == 0 || height % p != 0 || width % p != 0 || n * p * p != height * width || len != p * p * channels {
        return Err(CoreError::Dim(format!(
            "{n}×{len} patches do not tile a {height}×{width}×{channels} image with P={p}"
        )));
    }
    let pw = width / p;
    let mut pixels = vec![0.0; height * width * channels];
    for i in 0..n {
        let (pr, pc) = (i / pw, i % pw);
        let row = patches.row(i);
        for r in 0..p {
            let start = ((pr * p + r) * width + pc * p) * channels;
            pixels[start..start + p * channels].copy_from_slice(&row[r * p * channels..(r + 1) * p * channels]);
        }
    }
    LipImage::new(height, width, channels, pixels)
}

pub fn init_params<R: Rng>(params: &mut ParameterSet, rng: &mut R, cfg: &LipConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    insert_linear(params, rng, "lip.patch", cfg.patch_len(), d)?;
    params.insert("lip.pos", init::normal(rng, &[cfg.max_patches + 1, d], 0.02))?;
    params.insert("lip.cls", init::normal(rng, &[1, d], 0.02))?;
    for l in 0..cfg.layers {
        let p = format!("lip.block{l}");
        insert_layer_norm(params, &format!("{p}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            insert_linear(params, rng, &format!("{p}.attn.{proj}"), d, d)?;
        }
        insert_layer_norm(params, &format!("{p}.ln2"), d)?;
        insert_linear(params, rng, &format!("{p}.ffn1"), d, cfg.ffn_mult * d)?;
        insert_linear(params, rng, &format!("{p}.ffn2"), cfg.ffn_mult * d, d)?;
    }
    Ok(())
}

/// Token matrix `Z^input` for `frames` images whose patches are stacked in
/// `patches` (`frames·N × P²C`). Returns `frames·(N+1) × D`.
pub fn embed(g: &mut Graph, params: &ParameterSet, cfg: &LipConfig, patches: Var, frames: usize) -> Result<Var> {
    let (rows, len) = g.value(patches).dims2()?;
    if frames == 0 || rows % frames != 0 {
        return Err(CoreError::Dim(format!("{rows} patch rows for {frames} frames")));
    }
    if len != cfg.patch_len() {
        return Err(CoreError::Dim(format!(
            "patch length {len} vs configured {}",
            cfg.patch_len()
        )));
    }
    let n = rows / frames;
    let pos_rows = params.value("lip.pos")?.shape()[0];
    if n + 1 > pos_rows {
        return Err(CoreError::SequenceLength {
            len: n,
            max: pos_rows - 1,
        });
    }
    let proj = linear(g, params, "lip.patch", patches)?;
    let cls = g.param(params, "lip.cls")?;
    let stacked = g.concat_rows(&[cls, proj])?;
    let mut order = Vec::with_capacity(frames * (n + 1));
    let mut pos_order = Vec::with_capacity(frames * (n + 1));
    for t in 0..frames {
        order.push(0);
        order.extend((0..n).map(|i| 1 + t * n + i));
        pos_order.extend(0..=n);
    }
    let tokens = g.gather_rows(stacked, &order)?;
    let pos = g.param(params, "lip.pos")?;
    let pos = g.gather_rows(pos, &pos_order)?;
    Ok(g.add(tokens, pos)?)
}

/// Pre-norm encoder blocks over `frames` independent token blocks.
pub fn encode(g: &mut Graph, params: &ParameterSet, cfg: &LipConfig, z: Var, frames: usize) -> Result<Var> {
    let (_, d) = g.value(z).dims2()?;
    if d != cfg.dim {
        return Err(CoreError::Dim(format!("token width {d} vs configured {}", cfg.dim)));
    }
    if cfg.heads == 0 || d % cfg.heads != 0 {
        return Err(CoreError::Config(format!("lip width {d} not divisible by {} heads", cfg.heads)));
    }
    let mut x = z;
    for l in 0..cfg.layers {
        let p = format!("lip.block{l}");
        let h = layer_norm(g, params, &format!("{p}.ln1"), x)?;
        let q = linear(g, params, &format!("{p}.attn.q"), h)?;
        let k = linear(g, params, &format!("{p}.attn.k"), h)?;
        let v = linear(g, params, &format!("{p}.attn.v"), h)?;
        let a = g.attention(q, k, v, cfg.heads, frames)?;
        let o = linear(g, params, &format!("{p}.attn.o"), a)?;
        x = g.add(x, o)?;
        let h = layer_norm(g, params, &format!("{p}.ln2"), x)?;
        let f = linear(g, params, &format!("{p}.ffn1"), h)?;
        let f = g.gelu(f)?;
        let f = linear(g, params, &format!("{p}.ffn2"), f)?;
        x = g.add(x, f)?;
    }
    Ok(x)
}

/// CLS row of each frame block: `frames·(N+1) × D` to `frames × D`.
pub fn lip_feature(g: &mut Graph, z: Var, frames: usize) -> Result<Var> {
    let (rows, _) = g.value(z).dims2()?;
    if frames == 0 || rows % frames != 0 {
        return Err(CoreError::Dim(format!("{rows} token rows for {frames} frames")));
    }
    let block = rows / frames;
    let idx: Vec<usize> = (0..frames).map(|t| t * block).collect();
    Ok(g.gather_rows(z, &idx)?)
}

/// Patches to `z_l` for every frame.
pub fn lip_branch(g: &mut Graph, params: &ParameterSet, cfg: &LipConfig, patches: Var, frames: usize) -> Result<Var> {
    let z = embed(g, params, cfg, patches, frames)?;
    let z = encode(g, params, cfg, z, frames)?;
    lip_feature(g, z, frames)
}
