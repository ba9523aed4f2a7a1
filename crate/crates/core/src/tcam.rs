//! Three-scale alignment of neighbouring frames and the temporal decoder.
//!
//! A shared extractor produces features at full, 1/2 and 1/4 resolution for
//! every frame. For each moving frame:
//! * at 1/4 the moving features are gated by a sigmoid spatial attention
//!   computed from both frames;
//! * at 1/2 a modulated deformable convolution samples the moving features
//!   at offsets predicted from both frames, and the upsampled coarse result
//!   is added;
//! * at full resolution each reference position gathers the moving features
//!   at its best normalised-cross-correlation patch match, and the upsampled
//!   middle result is added.
//!
//! The temporal decoder concatenates the reference features with the aligned
//! features (neighbours in temporal order), runs a small U-Net of
//! transposed-attention blocks and emits features at 1/8, 1/4, 1/2 and full
//! resolution plus a tonemapped frame. That frame is the tonemapped
//! linearised reference plus a zero-initialised correction.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::FeaturePyramid;
use crate::autograd::{DeformGeometry, Var};
use crate::checkpoint::Checkpoint;
use crate::datapipe::{hwc_to_nchw, FrameSequence, NetworkInput};
use crate::error::{invalid, Error, Result};
use crate::nn::{pointwise, Conv2d, GroupNorm, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tonemap::tonemap_normalized;

pub const CHECKPOINT_KIND: &str = "tcam";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcamConfig {
    /// Channels of the shared alignment features.
    #[serde(default = "default_features")]
    pub features: usize,
    /// Temporal decoder widths at full, 1/2, 1/4 and 1/8 resolution.
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    /// Moving frames per reference (window size minus one).
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_search_radius")]
    pub search_radius: usize,
    #[serde(default = "default_deform_kernel")]
    pub deform_kernel: usize,
    #[serde(default = "default_ffn_expansion")]
    pub ffn_expansion: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_features() -> usize {
    16
}
fn default_decoder_widths() -> Vec<usize> {
    vec![16, 24, 32, 32]
}
fn default_neighbors() -> usize {
    2
}
fn default_patch_size() -> usize {
    3
}
fn default_search_radius() -> usize {
    4
}
fn default_deform_kernel() -> usize {
    3
}
fn default_ffn_expansion() -> usize {
    2
}
fn default_mu() -> f64 {
    crate::tonemap::DEFAULT_MU
}

impl Default for TcamConfig {
    fn default() -> Self {
        Self {
            features: default_features(),
            decoder_widths: default_decoder_widths(),
            neighbors: default_neighbors(),
            patch_size: default_patch_size(),
            search_radius: default_search_radius(),
            deform_kernel: default_deform_kernel(),
            ffn_expansion: default_ffn_expansion(),
            mu: default_mu(),
        }
    }
}

// ---------------------------------------------------------------------------
// Patch matching

/// Best-match displacement `(dy, dx)` for every reference pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matches {
    pub height: usize,
    pub width: usize,
    pub offsets: Vec<(i32, i32)>,
}

impl Matches {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            offsets: vec![(0, 0); height * width],
        }
    }

    /// Source pixel index for every target pixel.
    pub fn source_indices(&self) -> Vec<usize> {
        self.offsets
            .iter()
            .enumerate()
            .map(|(p, &(dy, dx))| {
                let y = (p / self.width) as i32 + dy;
                let x = (p % self.width) as i32 + dx;
                y as usize * self.width + x as usize
            })
            .collect()
    }
}

/// Zero-mean, unit-norm patch vectors of a `[C, H, W]` map with zero padding.
fn normalized_patches(img: &Tensor, patch: usize) -> Result<Vec<Vec<f64>>> {
    let [c, h, w] = *img.shape() else {
        return Err(invalid!("patch matching expects [C, H, W], got {:?}", img.shape()));
    };
    let r = (patch / 2) as isize;
    let d = img.data();
    Ok((0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let mut v = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                        v.push(if inside { d[(ch * h + yy as usize) * w + xx as usize] } else { 0.0 });
                    }
                }
            }
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|e| *e -= mean);
            let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|e| *e /= norm);
            } else {
                v.iter_mut().for_each(|e| *e = 0.0);
            }
            v
        })
        .collect())
}

/// Exhaustive normalised cross-correlation search.
///
/// For every reference pixel, every moving pixel within `radius` (Chebyshev)
/// whose centre lies inside the image is scored by the NCC of the
/// `patch x patch` neighbourhoods (zero padded, all channels jointly). The
/// highest score wins; ties go to the smaller squared displacement, then to
/// the earlier candidate in raster order.
pub fn patch_match(reference: &Tensor, moving: &Tensor, patch: usize, radius: usize) -> Result<Matches> {
    if reference.shape() != moving.shape() {
        return Err(invalid!("patch matching on {:?} vs {:?}", reference.shape(), moving.shape()));
    }
    if patch % 2 == 0 {
        return Err(invalid!("patch size must be odd, got {patch}"));
    }
    let (h, w) = (reference.shape()[1], reference.shape()[2]);
    let rp = normalized_patches(reference, patch)?;
    let mp = normalized_patches(moving, patch)?;
    let r = radius as i32;
    let offsets = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as i32, (p % w) as i32);
            let mut best: Option<(f64, i32, (i32, i32))> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i32 || xx >= w as i32 {
                        continue;
                    }
                    let q = &mp[yy as usize * w + xx as usize];
                    let score: f64 = rp[p].iter().zip(q).map(|(a, b)| a * b).sum();
                    let dist = dy * dy + dx * dx;
                    let better = match best {
                        None => true,
                        Some((s, d, _)) => score > s || (score == s && dist < d),
                    };
                    if better {
                        best = Some((score, dist, (dy, dx)));
                    }
                }
            }
            best.expect("the zero displacement is always a candidate").2
        })
        .collect();
    Ok(Matches { height: h, width: w, offsets })
}

/// Matches between two frames on their exposure-normalised linear channels.
pub fn frame_matches(reference: &NetworkInput, moving: &NetworkInput, cfg: &TcamConfig) -> Result<Matches> {
    let lin = |f: &NetworkInput| -> Result<Tensor> {
        let t = hwc_to_nchw(&f.linear());
        let s = t.shape()[1..].to_vec();
        t.reshape(s)
    };
    patch_match(&lin(reference)?, &lin(moving)?, cfg.patch_size, cfg.search_radius)
}

/// Differentiable gather of `[N, C, H, W]` features along per-item matches.
pub fn gather_matches(x: &Var, matches: &[&Matches]) -> Result<Var> {
    let (n, c, h, w) = x.value().dims4()?;
    if matches.len() != n || matches.iter().any(|m| m.height != h || m.width != w) {
        return Err(invalid!("{} match maps for a {n}x{h}x{w} batch", matches.len()));
    }
    let hw = h * w;
    let mut index = Vec::with_capacity(n * c * hw);
    for (b, m) in matches.iter().enumerate() {
        let src = m.source_indices();
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            index.extend(src.iter().map(|s| base + s));
        }
    }
    x.gather(Rc::new(index), [n, c, h, w])
}

// ---------------------------------------------------------------------------
// Alignment layers

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    conv_in: Conv2d,
    conv_full: Conv2d,
    down_half: Conv2d,
    conv_half: Conv2d,
    down_quarter: Conv2d,
    conv_quarter: Conv2d,
}

impl FeatureExtractor {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, c: usize, rng: &mut R) -> Self {
        Self {
            conv_in: Conv2d::new(ps, "extract.in", 6, c, 3, 1, rng),
            conv_full: Conv2d::new(ps, "extract.full", c, c, 3, 1, rng),
            down_half: Conv2d::new(ps, "extract.down2", c, c, 3, 2, rng),
            conv_half: Conv2d::new(ps, "extract.half", c, c, 3, 1, rng),
            down_quarter: Conv2d::new(ps, "extract.down4", c, c, 3, 2, rng),
            conv_quarter: Conv2d::new(ps, "extract.quarter", c, c, 3, 1, rng),
        }
    }

    /// Features at full, 1/2 and 1/4 resolution.
    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<[Var; 3]> {
        let f1 = self.conv_in.forward(ps, x)?.silu();
        let f1 = self.conv_full.forward(ps, &f1)?.silu();
        let f2 = self.down_half.forward(ps, &f1)?.silu();
        let f2 = self.conv_half.forward(ps, &f2)?.silu();
        let f4 = self.down_quarter.forward(ps, &f2)?.silu();
        let f4 = self.conv_quarter.forward(ps, &f4)?.silu();
        Ok([f1, f2, f4])
    }
}

/// `mov * sigmoid(conv(cat(ref, mov)) + shift)`.
#[derive(Clone, Debug)]
pub struct SpatialGate {
    pub conv: Conv2d,
}

impl SpatialGate {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(ps, name, 2 * c, c, 3, 1, rng),
        }
    }

    pub fn attention(&self, ps: &ParamStore, reference: &Var, moving: &Var, shift: f64) -> Result<Var> {
        if reference.shape() != moving.shape() {
            return Err(invalid!("gate inputs {:?} vs {:?}", reference.shape(), moving.shape()));
        }
        let logits = self.conv.forward(ps, &Var::cat(&[reference.clone(), moving.clone()], 1)?)?;
        Ok(logits.add_scalar(shift).sigmoid())
    }

    pub fn forward(&self, ps: &ParamStore, reference: &Var, moving: &Var) -> Result<Var> {
        self.forward_shifted(ps, reference, moving, 0.0)
    }

    /// Gate with a constant added to the logits, used to probe saturation.
    pub fn forward_shifted(&self, ps: &ParamStore, reference: &Var, moving: &Var, shift: f64) -> Result<Var> {
        moving.mul(&self.attention(ps, reference, moving, shift)?)
    }
}

/// Overrides that force parts of the alignment to their degenerate form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignOverrides {
    /// Zero offsets and unit masks, i.e. a plain convolution.
    pub plain_deform: bool,
    /// Every pixel matches itself.
    pub identity_matches: bool,
}

/// Modulated deformable convolution with offsets and masks predicted from
/// `cat(ref, mov)`.
#[derive(Clone, Debug)]
pub struct DeformableAlign {
    pub offset_conv: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: DeformGeometry,
}

impl DeformableAlign {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c: usize, kernel: usize, rng: &mut R) -> Self {
        let geom = DeformGeometry::same(kernel);
        let k = geom.taps();
        let offset_conv = Conv2d::new(ps, &format!("{name}.offset"), 2 * c, 3 * k, 3, 1, rng);
        let bound = 1.0 / ((c * k) as f64).sqrt();
        let weight = ps.add(format!("{name}.weight"), Tensor::uniform([c, c, kernel, kernel], -bound, bound, rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::uniform([c], -bound, bound, rng));
        Self {
            offset_conv,
            weight,
            bias,
            geom,
        }
    }

    /// Offsets `[N, 2K, H, W]` and sigmoid masks `[N, K, H, W]`.
    pub fn offsets_and_masks(&self, ps: &ParamStore, reference: &Var, moving: &Var) -> Result<(Var, Var)> {
        let k = self.geom.taps();
        let raw = self.offset_conv.forward(ps, &Var::cat(&[reference.clone(), moving.clone()], 1)?)?;
        Ok((raw.narrow(1, 0, 2 * k)?, raw.narrow(1, 2 * k, k)?.sigmoid()))
    }

    /// Deformable convolution of `moving` with explicit offsets and masks.
    pub fn apply(&self, ps: &ParamStore, moving: &Var, offset: &Var, mask: &Var) -> Result<Var> {
        let (n, c, h, w) = moving.value().dims4()?;
        let cols = moving.deform_sample(offset, mask, self.geom)?;
        let wt = ps.get(self.weight);
        let co = wt.shape()[0];
        let out = wt.reshape([1, co, c * self.geom.taps()])?.matmul(&cols)?;
        out.add(&ps.get(self.bias).reshape([1, co, 1])?)?.reshape([n, co, h, w])
    }

    /// Ordinary same-padded convolution with the deformable kernel.
    pub fn plain(&self, ps: &ParamStore, moving: &Var) -> Result<Var> {
        moving.conv2d(ps.get(self.weight), Some(ps.get(self.bias)), 1, self.geom.pad)
    }

    pub fn forward(&self, ps: &ParamStore, reference: &Var, moving: &Var) -> Result<Var> {
        if reference.shape() != moving.shape() {
            return Err(invalid!("deformable inputs {:?} vs {:?}", reference.shape(), moving.shape()));
        }
        let (offset, mask) = self.offsets_and_masks(ps, reference, moving)?;
        self.apply(ps, moving, &offset, &mask)
    }
}

// ---------------------------------------------------------------------------
// Temporal decoder

/// Transposed (channel) attention plus a gated GELU feed-forward.
#[derive(Clone, Debug)]
pub struct RestormerBlock {
    norm1: GroupNorm,
    qkv: Conv2d,
    temperature: ParamId,
    proj: Conv2d,
    norm2: GroupNorm,
    ffn_in: Conv2d,
    ffn_out: Conv2d,
}

impl RestormerBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c: usize, expansion: usize, rng: &mut R) -> Self {
        let hidden = c * expansion;
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c, 1),
            qkv: pointwise(ps, &format!("{name}.qkv"), c, 3 * c, rng),
            temperature: ps.add(format!("{name}.temperature"), Tensor::full([1, 1, 1], 1.0)),
            proj: pointwise(ps, &format!("{name}.proj"), c, c, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c, 1),
            ffn_in: pointwise(ps, &format!("{name}.ffn_in"), c, 2 * hidden, rng),
            ffn_out: pointwise(ps, &format!("{name}.ffn_out"), hidden, c, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        let qkv = self.qkv.forward(ps, &self.norm1.forward(ps, x)?)?;
        let part = |i: usize| qkv.narrow(1, i * c, c)?.reshape([n, c, h * w]);
        let q = part(0)?.l2_normalize_last(1e-12)?;
        let k = part(1)?.l2_normalize_last(1e-12)?;
        let attn = q
            .matmul(&k.permute(&[0, 2, 1])?)?
            .mul(ps.get(self.temperature))?
            .softmax_last()?;
        let out = attn.matmul(&part(2)?)?.reshape([n, c, h, w])?;
        let x = x.add(&self.proj.forward(ps, &out)?)?;
        let f = self.ffn_in.forward(ps, &self.norm2.forward(ps, &x)?)?;
        let hidden = f.shape()[1] / 2;
        let gated = f.narrow(1, 0, hidden)?.gelu().mul(&f.narrow(1, hidden, hidden)?)?;
        x.add(&self.ffn_out.forward(ps, &gated)?)
    }
}

#[derive(Clone, Debug)]
struct TemporalDecoder {
    in_proj: Conv2d,
    enc: Vec<RestormerBlock>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    dec: Vec<RestormerBlock>,
    head: Conv2d,
}

impl TemporalDecoder {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cin: usize, widths: &[usize], expansion: usize, rng: &mut R) -> Self {
        let levels = widths.len();
        let in_proj = Conv2d::new(ps, "decoder.in", cin, widths[0], 3, 1, rng);
        let enc = (0..levels)
            .map(|l| RestormerBlock::new(ps, &format!("decoder.enc{l}"), widths[l], expansion, rng))
            .collect();
        let downs = (1..levels)
            .map(|l| Conv2d::new(ps, &format!("decoder.down{l}"), widths[l - 1], widths[l], 3, 2, rng))
            .collect();
        let ups = (0..levels - 1)
            .map(|l| pointwise(ps, &format!("decoder.up{l}"), widths[l + 1] + widths[l], widths[l], rng))
            .collect();
        let dec = (0..levels - 1)
            .map(|l| RestormerBlock::new(ps, &format!("decoder.dec{l}"), widths[l], expansion, rng))
            .collect();
        let head = Conv2d::zeros(ps, "decoder.head", widths[0], 3, 3);
        Self {
            in_proj,
            enc,
            downs,
            ups,
            dec,
            head,
        }
    }

    /// Features coarsest first and the full-resolution correction.
    fn forward(&self, ps: &ParamStore, x: &Var) -> Result<(Vec<Var>, Var)> {
        let levels = self.enc.len();
        let mut skips = Vec::with_capacity(levels);
        let mut h = self.in_proj.forward(ps, x)?;
        for l in 0..levels {
            if l > 0 {
                h = self.downs[l - 1].forward(ps, &h)?;
            }
            h = self.enc[l].forward(ps, &h)?;
            skips.push(h.clone());
        }
        let mut feats = vec![h.clone()];
        for l in (0..levels - 1).rev() {
            h = self.ups[l].forward(ps, &Var::cat(&[h.upsample2x()?, skips[l].clone()], 1)?)?;
            h = self.dec[l].forward(ps, &h)?;
            feats.push(h.clone());
        }
        let correction = self.head.forward(ps, &h)?;
        Ok((feats, correction))
    }
}

// ---------------------------------------------------------------------------
// Whole module

/// Network-ready window around one reference frame.
#[derive(Clone, Debug)]
pub struct WindowInput {
    /// `[1, 6, H, W]`.
    pub reference: Tensor,
    /// Moving frames in temporal order, each `[1, 6, H, W]`.
    pub neighbors: Vec<Tensor>,
    pub matches: Vec<Matches>,
    /// Tonemapped linearised reference `[1, 3, H, W]`.
    pub baseline: Tensor,
}

/// Stack of windows sharing a size, processed as one batch.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub reference: Tensor,
    pub neighbors: Vec<Tensor>,
    pub matches: Vec<Vec<Matches>>,
    pub baseline: Tensor,
}

impl WindowBatch {
    pub fn stack(items: &[&WindowInput]) -> Result<Self> {
        let first = items.first().ok_or_else(|| invalid!("empty window batch"))?;
        let m = first.neighbors.len();
        if items.iter().any(|w| w.neighbors.len() != m) {
            return Err(invalid!("windows in one batch must have equal neighbour counts"));
        }
        let cat = |f: &dyn Fn(&WindowInput) -> Tensor| -> Result<Tensor> {
            Tensor::stack_batch(&items.iter().map(|w| f(w)).collect::<Vec<_>>())
        };
        Ok(Self {
            reference: cat(&|w| w.reference.clone())?,
            neighbors: (0..m).map(|j| cat(&|w| w.neighbors[j].clone())).collect::<Result<_>>()?,
            matches: (0..m).map(|j| items.iter().map(|w| w.matches[j].clone()).collect()).collect(),
            baseline: cat(&|w| w.baseline.clone())?,
        })
    }

    pub fn len(&self) -> usize {
        self.reference.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tonemapped `linear / peak` for a network input, `[1, 3, H, W]`.
pub fn linear_baseline(frame: &NetworkInput, peak: f64, mu: f64) -> Result<Tensor> {
    Ok(hwc_to_nchw(&tonemap_normalized(&frame.linear(), peak, mu)?))
}

/// Builds the window for reference `k` of `seq` with cached patch matches.
pub fn prepare_window(seq: &FrameSequence, k: usize, cfg: &TcamConfig) -> Result<WindowInput> {
    let idx = crate::datapipe::neighbor_window(seq.len(), k, cfg.neighbors + 1);
    let reference = &seq.frames[idx[0]];
    let neighbors: Vec<&NetworkInput> = idx[1..].iter().map(|&i| &seq.frames[i]).collect();
    Ok(WindowInput {
        reference: reference.to_nchw(),
        neighbors: neighbors.iter().map(|f| f.to_nchw()).collect(),
        matches: neighbors
            .iter()
            .map(|f| frame_matches(reference, f, cfg))
            .collect::<Result<_>>()?,
        baseline: linear_baseline(reference, seq.peak, cfg.mu)?,
    })
}

/// Multi-scale temporal features (coarsest first) and the tonemapped frame.
#[derive(Clone)]
pub struct TemporalOutput {
    pub features: Vec<Var>,
    pub merged: Var,
}

impl TemporalOutput {
    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid {
            maps: self.features.iter().map(|f| f.value().clone()).collect(),
        }
    }

    /// Detached copy of batch item `i`.
    pub fn item(&self, i: usize) -> Result<TemporalFeatures> {
        Ok(TemporalFeatures {
            pyramid: FeaturePyramid {
                maps: self.features.iter().map(|f| f.value().batch_item(i)).collect::<Result<_>>()?,
            },
            merged: self.merged.value().batch_item(i)?,
        })
    }
}

/// Frozen temporal features of one reference frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFeatures {
    /// `[1, C_s, H_s, W_s]` maps, coarsest first.
    pub pyramid: FeaturePyramid,
    /// Tonemapped temporal-only prediction `[1, 3, H, W]`.
    pub merged: Tensor,
}

pub struct Tcam {
    pub cfg: TcamConfig,
    pub params: ParamStore,
    pub extractor: FeatureExtractor,
    pub gate: SpatialGate,
    pub deform: DeformableAlign,
    pub coarse_proj: Conv2d,
    pub middle_proj: Conv2d,
    pub fine_fuse: Conv2d,
    decoder: TemporalDecoder,
}

impl Tcam {
    pub fn new(cfg: TcamConfig, seed: u64) -> Result<Self> {
        if cfg.features == 0 || cfg.decoder_widths.len() < 2 || cfg.decoder_widths.contains(&0) || cfg.neighbors == 0 {
            return Err(invalid!("alignment module needs positive widths, >= 2 decoder levels and >= 1 neighbour"));
        }
        if cfg.patch_size % 2 == 0 || cfg.deform_kernel % 2 == 0 {
            return Err(invalid!("patch size and deformable kernel must be odd"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = cfg.features;
        let extractor = FeatureExtractor::new(&mut ps, c, &mut rng);
        let gate = SpatialGate::new(&mut ps, "align.gate", c, &mut rng);
        let deform = DeformableAlign::new(&mut ps, "align.deform", c, cfg.deform_kernel, &mut rng);
        let coarse_proj = pointwise(&mut ps, "align.coarse_proj", c, c, &mut rng);
        let middle_proj = Conv2d::new(&mut ps, "align.middle_proj", c, c, 3, 1, &mut rng);
        let fine_fuse = Conv2d::new(&mut ps, "align.fine_fuse", c, c, 3, 1, &mut rng);
        let decoder = TemporalDecoder::new(&mut ps, c * (cfg.neighbors + 1), &cfg.decoder_widths, cfg.ffn_expansion, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            extractor,
            gate,
            deform,
            coarse_proj,
            middle_proj,
            fine_fuse,
            decoder,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!("expected a {CHECKPOINT_KIND} checkpoint, got {}", ck.manifest.kind)));
        }
        let mut m = Self::new(ck.meta()?, 0)?;
        ck.restore(&mut m.params)?;
        Ok(m)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.cfg).expect("config serialises"), &self.params)
    }

    /// Channel count of every temporal feature, coarsest first.
    pub fn feature_channels(&self) -> Vec<usize> {
        self.cfg.decoder_widths.iter().rev().copied().collect()
    }

    /// Aligned features for already-extracted reference/moving pyramids.
    pub fn align_features(
        &self,
        ps: &ParamStore,
        reference: &[Var; 3],
        moving: &[Var; 3],
        matches: &[&Matches],
        overrides: AlignOverrides,
    ) -> Result<Var> {
        let gated = self.gate.forward(ps, &reference[2], &moving[2])?;
        let middle = if overrides.plain_deform {
            self.deform.plain(ps, &moving[1])?
        } else {
            self.deform.forward(ps, &reference[1], &moving[1])?
        };
        let middle = middle.add(&self.coarse_proj.forward(ps, &gated.upsample2x()?)?)?;
        let fine = if overrides.identity_matches {
            moving[0].clone()
        } else {
            gather_matches(&moving[0], matches)?
        };
        let fine = fine.add(&self.middle_proj.forward(ps, &middle)?.upsample2x()?)?;
        self.fine_fuse.forward(ps, &fine)
    }

    /// Aligns `[N, 6, H, W]` moving frames to references.
    pub fn align(&self, ps: &ParamStore, reference: &Var, moving: &Var, matches: &[&Matches], overrides: AlignOverrides) -> Result<Var> {
        if reference.shape() != moving.shape() {
            return Err(invalid!("reference {:?} and moving {:?} frames differ in shape", reference.shape(), moving.shape()));
        }
        let (_, _, h, w) = reference.value().dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(invalid!("frame size {h}x{w} must be a multiple of 4"));
        }
        let r = self.extractor.forward(ps, reference)?;
        let m = self.extractor.forward(ps, moving)?;
        self.align_features(ps, &r, &m, matches, overrides)
    }

    /// Merges the reference with aligned neighbours (temporal order).
    pub fn temporal_decode(&self, ps: &ParamStore, reference_feat: &Var, aligned: &[Var], baseline: &Var) -> Result<TemporalOutput> {
        if aligned.is_empty() {
            return Err(invalid!("temporal decoding needs at least one aligned frame"));
        }
        if aligned.len() != self.cfg.neighbors {
            return Err(invalid!("expected {} aligned frames, got {}", self.cfg.neighbors, aligned.len()));
        }
        if aligned.iter().any(|a| a.shape() != reference_feat.shape()) {
            return Err(invalid!("aligned features must share the reference feature shape"));
        }
        let mut parts = vec![reference_feat.clone()];
        parts.extend(aligned.iter().cloned());
        let (features, correction) = self.decoder.forward(ps, &Var::cat(&parts, 1)?)?;
        Ok(TemporalOutput {
            features,
            merged: baseline.add(&correction)?,
        })
    }

    /// Full forward pass over a window batch.
    pub fn forward_with(&self, ps: &ParamStore, batch: &WindowBatch, overrides: AlignOverrides) -> Result<TemporalOutput> {
        let (_, _, h, w) = batch.reference.dims4()?;
        let levels = self.cfg.decoder_widths.len();
        if h % (1 << (levels - 1)) != 0 || w % (1 << (levels - 1)) != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(invalid!("frame size {h}x{w} not divisible by the decoder depth"));
        }
        let reference = Var::constant(batch.reference.clone());
        let r = self.extractor.forward(ps, &reference)?;
        let aligned = batch
            .neighbors
            .iter()
            .zip(&batch.matches)
            .map(|(mov, matches)| {
                let m = self.extractor.forward(ps, &Var::constant(mov.clone()))?;
                let refs: Vec<&Matches> = matches.iter().collect();
                self.align_features(ps, &r, &m, &refs, overrides)
            })
            .collect::<Result<Vec<_>>>()?;
        self.temporal_decode(ps, &r[0], &aligned, &Var::constant(batch.baseline.clone()))
    }

    pub fn forward(&self, batch: &WindowBatch) -> Result<TemporalOutput> {
        self.forward_with(&self.params, batch, AlignOverrides::default())
    }

    /// Inference without gradient tracking.
    pub fn infer(&self, batch: &WindowBatch) -> Result<TemporalOutput> {
        self.forward_with(&self.params.frozen(), batch, AlignOverrides::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> TcamConfig {
        TcamConfig {
            features: 4,
            decoder_widths: vec![4, 4, 6, 6],
            ..Default::default()
        }
    }

    #[test]
    fn identity_and_translation_matches() {
        let img = Tensor::uniform([3, 32, 32], 0.0, 1.0, &mut rng(0));
        let m = patch_match(&img, &img, 3, 4).unwrap();
        assert_eq!(m, Matches::identity(32, 32));
        // moving(y, x) = reference(y - 2, x): content moved down by two rows
        let d = img.data();
        let moved = Tensor::from_fn([3, 32, 32], |i| {
            let (c, y, x) = (i / 1024, (i / 32) % 32, i % 32);
            if y >= 2 {
                d[c * 1024 + (y - 2) * 32 + x]
            } else {
                0.5
            }
        });
        let m = patch_match(&img, &moved, 3, 4).unwrap();
        for y in 1..29 {
            for x in 1..31 {
                assert_eq!(m.offsets[y * 32 + x], (2, 0), "at {y},{x}");
            }
        }
    }

    #[test]
    fn flat_patches_keep_zero_displacement() {
        let flat = Tensor::full([1, 8, 8], 0.3);
        assert_eq!(patch_match(&flat, &flat, 3, 2).unwrap(), Matches::identity(8, 8));
    }

    #[test]
    fn gather_follows_matches() {
        let x = Var::constant(Tensor::from_fn([1, 1, 2, 3], |i| i as f64));
        let m = Matches {
            height: 2,
            width: 3,
            offsets: vec![(0, 1), (1, 0), (0, 0), (0, 0), (-1, 1), (0, -2)],
        };
        let g = gather_matches(&x, &[&m]).unwrap();
        assert_eq!(g.data(), &[1.0, 4.0, 2.0, 3.0, 2.0, 3.0]);
    }

    #[test]
    fn gate_saturates() {
        let mut ps = ParamStore::new();
        let gate = SpatialGate::new(&mut ps, "g", 3, &mut rng(1));
        let r = Var::constant(Tensor::randn([1, 3, 4, 4], &mut rng(2)));
        let m = Var::constant(Tensor::randn([1, 3, 4, 4], &mut rng(3)));
        let open = gate.forward_shifted(&ps, &r, &m, 60.0).unwrap();
        assert!(open.value().max_abs_diff(m.value()).unwrap() < 1e-6);
        let shut = gate.forward_shifted(&ps, &r, &m, -60.0).unwrap();
        assert!(shut.data().iter().all(|v| v.abs() < 1e-6));
        let a = gate.attention(&ps, &r, &m, 0.0).unwrap();
        assert!(a.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn deformable_zero_offsets_is_plain_conv() {
        let mut ps = ParamStore::new();
        let d = DeformableAlign::new(&mut ps, "d", 3, 3, &mut rng(4));
        let m = Var::constant(Tensor::randn([2, 3, 5, 6], &mut rng(5)));
        let off = Var::constant(Tensor::zeros([2, 18, 5, 6]));
        let mask = Var::constant(Tensor::full([2, 9, 5, 6], 1.0));
        let a = d.apply(&ps, &m, &off, &mask).unwrap();
        let b = d.plain(&ps, &m).unwrap();
        assert!(a.value().max_abs_diff(b.value()).unwrap() < 1e-12);
    }

    #[test]
    fn self_alignment_identity_path() {
        let t = Tcam::new(tiny_cfg(), 0).unwrap();
        let ps = &t.params;
        let x = Var::constant(Tensor::uniform([1, 6, 8, 8], 0.0, 1.0, &mut rng(6)));
        let over = AlignOverrides {
            plain_deform: true,
            identity_matches: true,
        };
        let out = t.align(ps, &x, &x, &[], over).unwrap();
        let [f1, f2, f4] = t.extractor.forward(ps, &x).unwrap();
        let gated = t.gate.forward(ps, &f4, &f4).unwrap();
        let mid = t.deform.plain(ps, &f2).unwrap().add(&t.coarse_proj.forward(ps, &gated.upsample2x().unwrap()).unwrap()).unwrap();
        let fine = f1.add(&t.middle_proj.forward(ps, &mid).unwrap().upsample2x().unwrap()).unwrap();
        let expect = t.fine_fuse.forward(ps, &fine).unwrap();
        assert_eq!(out.value(), expect.value());
        let matched = t.align(ps, &x, &x, &[&Matches::identity(8, 8)], AlignOverrides { plain_deform: true, identity_matches: false }).unwrap();
        assert_eq!(matched.value(), expect.value());
    }

    fn window(seed: u64, side: usize) -> WindowInput {
        let mut r = rng(seed);
        WindowInput {
            reference: Tensor::uniform([1, 6, side, side], 0.0, 1.0, &mut r),
            neighbors: (0..2).map(|_| Tensor::uniform([1, 6, side, side], 0.0, 1.0, &mut r)).collect(),
            matches: vec![Matches::identity(side, side); 2],
            baseline: Tensor::uniform([1, 3, side, side], 0.0, 1.0, &mut r),
        }
    }

    #[test]
    fn decoder_scales_and_initial_merge() {
        let t = Tcam::new(tiny_cfg(), 0).unwrap();
        let w = window(7, 16);
        let out = t.infer(&WindowBatch::stack(&[&w]).unwrap()).unwrap();
        let scales: Vec<usize> = out.features.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(scales, [2, 4, 8, 16]);
        assert_eq!(out.merged.value(), &w.baseline);
    }

    #[test]
    fn neighbour_order_matters() {
        let t = Tcam::new(tiny_cfg(), 0).unwrap();
        let w = window(8, 8);
        let mut rev = w.clone();
        rev.neighbors.reverse();
        let a = t.infer(&WindowBatch::stack(&[&w]).unwrap()).unwrap();
        let b = t.infer(&WindowBatch::stack(&[&rev]).unwrap()).unwrap();
        assert!(a.features[3].value().max_abs_diff(b.features[3].value()).unwrap() > 0.0);
    }

    #[test]
    fn restormer_block_gradients() {
        let mut ps = ParamStore::new();
        let block = RestormerBlock::new(&mut ps, "b", 4, 2, &mut rng(9));
        let x = Var::constant(Tensor::randn([1, 4, 3, 3], &mut rng(10)));
        let err = check_params(&ps, |ps| Ok(block.forward(ps, &x)?.square().mean_all()), 1e-5, 8).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn empty_neighbours_rejected() {
        let t = Tcam::new(tiny_cfg(), 0).unwrap();
        let x = Var::constant(Tensor::zeros([1, 4, 8, 8]));
        assert!(t.temporal_decode(&t.params, &x, &[], &Var::constant(Tensor::zeros([1, 3, 8, 8]))).is_err());
    }
}
