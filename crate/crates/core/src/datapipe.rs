//! Alternating-exposure LDR synthesis, 6-channel network inputs and sequence persistence.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_BIT_DEPTH: u8 = 8;

/// Display-referred frame with values in `[0, 1]`, shape `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdrFrame {
    pixels: Tensor,
    exposure: f64,
    index: usize,
}

impl LdrFrame {
    pub fn new(pixels: Tensor, exposure: f64, index: usize) -> Result<Self> {
        check_rgb(&pixels)?;
        if !(exposure > 0.0 && exposure.is_finite()) {
            return Err(invalid!("exposure must be positive, got {exposure}"));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("LDR pixel {v} outside [0, 1]"));
        }
        Ok(Self { pixels, exposure, index })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

/// Scene-linear frame, shape `[H, W, 3]`, stored at single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrFrame {
    pixels: Tensor,
    index: usize,
}

impl HdrFrame {
    /// Values are rounded to `f32` so the frame survives the on-disk container bit-exactly.
    pub fn new(pixels: Tensor, index: usize) -> Result<Self> {
        check_rgb(&pixels)?;
        if let Some(v) = pixels.data().iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(invalid!("HDR pixel {v} is negative or non-finite"));
        }
        Ok(Self {
            pixels: pixels.map(|v| v as f32 as f64),
            index,
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn index(&self) -> usize {
        self.index
    }
}

/// `[H, W, 6]` concatenation of LDR pixels and their linearisation `I^gamma / e`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkInput {
    channels: Tensor,
    exposure: f64,
    index: usize,
}

impl NetworkInput {
    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[1]
    }

    /// The LDR half (channels 0..3), shape `[H, W, 3]`.
    pub fn ldr(&self) -> Tensor {
        self.select(0)
    }

    /// The linearised half (channels 3..6), shape `[H, W, 3]`.
    pub fn linear(&self) -> Tensor {
        self.select(3)
    }

    fn select(&self, start: usize) -> Tensor {
        let data = self.channels.data().chunks_exact(6).flat_map(|px| px[start..start + 3].to_vec()).collect();
        Tensor::new([self.height(), self.width(), 3], data).expect("shape is consistent")
    }

    /// Network layout `[1, 6, H, W]`.
    pub fn to_nchw(&self) -> Tensor {
        hwc_to_nchw(&self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<NetworkInput>,
    pub hdr_targets: Vec<HdrFrame>,
    pub exposure_pattern: Vec<f64>,
    pub reference_index: usize,
    pub gamma: f64,
    pub bit_depth: u8,
    /// 99.9th-percentile radiance; HDR values are divided by it before tonemapping.
    pub peak: f64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame indices feeding the reconstruction of frame `k`, reference first.
    pub fn window(&self, k: usize) -> Vec<usize> {
        neighbor_window(self.len(), k, window_size(self.exposure_pattern.len()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOptions {
    pub gamma: f64,
    pub bit_depth: u8,
    /// Standard deviation of additive Gaussian read noise on the exposed linear signal.
    pub noise_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            bit_depth: DEFAULT_BIT_DEPTH,
            noise_sigma: None,
            seed: 0,
        }
    }
}

fn check_rgb(t: &Tensor) -> Result<()> {
    match t.shape() {
        [_, _, 3] => Ok(()),
        s => Err(invalid!("expected [H, W, 3] pixels, got {:?}", s)),
    }
}

pub fn quantize(v: f64, bit_depth: u8) -> f64 {
    let levels = ((1u32 << bit_depth) - 1) as f64;
    (v * levels).round() / levels
}

/// Exposes, clips, gamma-encodes and quantises one HDR frame.
pub fn synthesize_ldr(hdr: &HdrFrame, exposure: f64, gamma: f64, bit_depth: u8) -> Result<LdrFrame> {
    synthesize_with(hdr, exposure, &SynthesisOptions { gamma, bit_depth, ..Default::default() }, 0)
}

fn synthesize_with(hdr: &HdrFrame, exposure: f64, opts: &SynthesisOptions, stream: u64) -> Result<LdrFrame> {
    if !(exposure > 0.0 && exposure.is_finite()) {
        return Err(invalid!("exposure must be positive, got {exposure}"));
    }
    if !(opts.gamma > 0.0) || !(1..=16).contains(&opts.bit_depth) {
        return Err(invalid!("gamma {} / bit depth {} out of range", opts.gamma, opts.bit_depth));
    }
    let inv_gamma = 1.0 / opts.gamma;
    let encode = |v: f64| quantize(v.clamp(0.0, 1.0).powf(inv_gamma), opts.bit_depth);
    let pixels = match opts.noise_sigma {
        Some(sigma) if sigma > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(stream);
            let normal = Normal::new(0.0, sigma).map_err(|e| invalid!("noise sigma: {e}"))?;
            let data = hdr.pixels.data().iter().map(|&v| encode(v * exposure + normal.sample(&mut rng))).collect();
            Tensor::new(hdr.pixels.shape().to_vec(), data)?
        }
        _ => hdr.pixels.map(|v| encode(v * exposure)),
    };
    LdrFrame::new(pixels, exposure, hdr.index)
}

/// Inverse camera response: `ldr^gamma / exposure`.
pub fn linearize(ldr: f64, exposure: f64, gamma: f64) -> f64 {
    ldr.powf(gamma) / exposure
}

pub fn build_network_input(ldr: &LdrFrame) -> NetworkInput {
    build_network_input_with_gamma(ldr, DEFAULT_GAMMA)
}

pub fn build_network_input_with_gamma(ldr: &LdrFrame, gamma: f64) -> NetworkInput {
    let (h, w) = (ldr.pixels.shape()[0], ldr.pixels.shape()[1]);
    let mut data = Vec::with_capacity(h * w * 6);
    for px in ldr.pixels.data().chunks_exact(3) {
        data.extend_from_slice(px);
        data.extend(px.iter().map(|&v| linearize(v, ldr.exposure, gamma)));
    }
    NetworkInput {
        channels: Tensor::new([h, w, 6], data).expect("shape is consistent"),
        exposure: ldr.exposure,
        index: ldr.index,
    }
}

/// Largest `|linearize(quantized) - hdr|` possible for a well-exposed value `hdr`.
///
/// The quantiser moves the encoded value by at most half a step; the error is
/// that half step mapped back through the (convex) gamma curve.
pub fn quantization_bound(hdr: f64, exposure: f64, gamma: f64, bit_depth: u8) -> f64 {
    let half = 0.5 / ((1u32 << bit_depth) - 1) as f64;
    let v = (hdr * exposure).clamp(0.0, 1.0).powf(1.0 / gamma);
    let up = (v + half).min(1.0).powf(gamma) - v.powf(gamma);
    let down = v.powf(gamma) - (v - half).max(0.0).powf(gamma);
    up.max(down) / exposure
}

pub fn make_sequence(hdr_frames: &[HdrFrame], exposure_pattern: &[f64], reference_index: usize) -> Result<FrameSequence> {
    make_sequence_with(hdr_frames, exposure_pattern, reference_index, &SynthesisOptions::default())
}

pub fn make_sequence_with(
    hdr_frames: &[HdrFrame],
    exposure_pattern: &[f64],
    reference_index: usize,
    opts: &SynthesisOptions,
) -> Result<FrameSequence> {
    if hdr_frames.is_empty() {
        return Err(invalid!("no HDR frames"));
    }
    if !(2..=3).contains(&exposure_pattern.len()) {
        return Err(invalid!("exposure pattern must have 2 or 3 entries, got {}", exposure_pattern.len()));
    }
    if let Some(e) = exposure_pattern.iter().find(|e| !(**e > 0.0)) {
        return Err(invalid!("exposure {e} is not positive"));
    }
    if reference_index >= hdr_frames.len() {
        return Err(invalid!("reference index {reference_index} out of range for {} frames", hdr_frames.len()));
    }
    let shape = hdr_frames[0].pixels.shape();
    let frames = hdr_frames
        .iter()
        .enumerate()
        .map(|(i, hdr)| {
            if hdr.pixels.shape() != shape {
                return Err(invalid!("frame {i} shape {:?} differs from {:?}", hdr.pixels.shape(), shape));
            }
            let e = exposure_pattern[i % exposure_pattern.len()];
            let ldr = synthesize_with(hdr, e, opts, i as u64)?;
            Ok(build_network_input_with_gamma(&ldr, opts.gamma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameSequence {
        frames,
        hdr_targets: hdr_frames.to_vec(),
        exposure_pattern: exposure_pattern.to_vec(),
        reference_index,
        gamma: opts.gamma,
        bit_depth: opts.bit_depth,
        peak: peak_radiance(hdr_frames),
    })
}

/// 99.9th percentile of all HDR samples (1 when the frames are black).
pub fn peak_radiance(frames: &[HdrFrame]) -> f64 {
    let mut all: Vec<f64> = frames.iter().flat_map(|f| f.pixels.data().iter().copied()).collect();
    if all.is_empty() {
        return 1.0;
    }
    all.sort_by(f64::total_cmp);
    let rank = ((all.len() - 1) as f64 * 0.999).round() as usize;
    let p = all[rank];
    if p > 0.0 {
        p as f32 as f64
    } else {
        1.0
    }
}

/// 3 frames for two-exposure capture, 5 for three-exposure capture.
pub fn window_size(pattern_len: usize) -> usize {
    if pattern_len >= 3 {
        5
    } else {
        3
    }
}

/// Window of `size` frames centred on `k`, reference first and then the
/// neighbours in temporal order; indices past either end replicate the edge.
pub fn neighbor_window(len: usize, k: usize, size: usize) -> Vec<usize> {
    let half = (size / 2) as isize;
    let clamp = |i: isize| i.clamp(0, len as isize - 1) as usize;
    let mut out = vec![k];
    out.extend((-half..=half).filter(|&d| d != 0).map(|d| clamp(k as isize + d)));
    out
}

pub fn hwc_to_nchw(t: &Tensor) -> Tensor {
    let [h, w, c] = t.shape() else {
        panic!("hwc_to_nchw needs rank 3, got {:?}", t.shape());
    };
    let (h, w, c) = (*h, *w, *c);
    let src = t.data();
    Tensor::from_fn([1, c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        src[p * c + ch]
    })
}

pub fn nchw_to_hwc(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(invalid!("nchw_to_hwc needs a single image, got batch {n}"));
    }
    let src = t.data();
    Ok(Tensor::from_fn([h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        src[ch * h * w + p]
    }))
}

// ---- persistence ---------------------------------------------------------

pub const SIDECAR_NAME: &str = "sequence.json";
const SIDECAR_FORMAT: &str = "hdr-vdiff-sequence/1";

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    gamma: f64,
    bit_depth: u8,
    exposure_pattern: Vec<f64>,
    reference_index: usize,
    peak: f64,
    frames: Vec<SidecarFrame>,
}

#[derive(Serialize, Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct SidecarFrame {
    index: usize,
    exposure: f64,
    ldr: String,
    hdr: String,
}

/// Writes `ldr_XXXX.png`, `hdr_XXXX.hdrf` and the `sequence.json` sidecar into `dir`.
pub fn save_sequence(seq: &FrameSequence, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(seq.len());
    for (input, hdr) in seq.frames.iter().zip(&seq.hdr_targets) {
        let ldr_name = format!("ldr_{:04}.png", input.index);
        let hdr_name = format!("hdr_{:04}.hdrf", hdr.index);
        io::write_png(&dir.join(&ldr_name), &input.ldr(), seq.bit_depth)?;
        io::write_hdrf(&dir.join(&hdr_name), &hdr.pixels)?;
        frames.push(SidecarFrame {
            index: input.index,
            exposure: input.exposure,
            ldr: ldr_name,
            hdr: hdr_name,
        });
    }
    let sidecar = Sidecar {
        format: SIDECAR_FORMAT.into(),
        gamma: seq.gamma,
        bit_depth: seq.bit_depth,
        exposure_pattern: seq.exposure_pattern.clone(),
        reference_index: seq.reference_index,
        peak: seq.peak,
        frames,
    };
    let path = dir.join(SIDECAR_NAME);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let path = dir.join(SIDECAR_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if sc.format != SIDECAR_FORMAT {
        return Err(Error::format(&path, format!("unknown format tag {}", sc.format)));
    }
    let mut frames = Vec::with_capacity(sc.frames.len());
    let mut hdr_targets = Vec::with_capacity(sc.frames.len());
    for f in &sc.frames {
        let ldr_path: PathBuf = dir.join(&f.ldr);
        let (pixels, bits) = io::read_png(&ldr_path)?;
        if bits != sc.bit_depth {
            return Err(Error::format(&ldr_path, format!("bit depth {bits}, sidecar says {}", sc.bit_depth)));
        }
        let ldr = LdrFrame::new(pixels, f.exposure, f.index)?;
        frames.push(build_network_input_with_gamma(&ldr, sc.gamma));
        hdr_targets.push(HdrFrame::new(io::read_hdrf(&dir.join(&f.hdr))?, f.index)?);
    }
    if frames.is_empty() || sc.reference_index >= frames.len() {
        return Err(Error::format(&path, "empty sequence or reference index out of range"));
    }
    Ok(FrameSequence {
        frames,
        hdr_targets,
        exposure_pattern: sc.exposure_pattern,
        reference_index: sc.reference_index,
        gamma: sc.gamma,
        bit_depth: sc.bit_depth,
        peak: sc.peak,
    })
}

/// Loads every `*.hdrf` file in `dir`, sorted by file name.
pub fn load_hdr_dir(dir: &Path) -> Result<Vec<HdrFrame>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hdrf"))
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| HdrFrame::new(io::read_hdrf(p)?, i))
        .collect()
}
