//! WebAssembly bindings for the static explorer page in `www/`.
//!
//! Everything returns plain numeric buffers so the page needs no glue
//! beyond what `wasm-bindgen --target web` generates.

use hdr_vdiff::datapipe::{build_network_input, synthesize_ldr, HdrFrame};
use hdr_vdiff::diffusion::{sampling_timesteps, DiffusionSchedule, ScheduleKind};
use hdr_vdiff::ldm::{exposure_embedding as embed, ExposureEncoding};
use hdr_vdiff::tensor::Tensor;
use hdr_vdiff::tonemap::tonemap_normalized;
use hdr_vdiff::toy::{toy_scenes, ToySpec};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn scene(size: usize, seed: u64, frame: usize) -> Result<HdrFrame, JsError> {
    let spec = ToySpec {
        sequences: 1,
        frames: frame + 1,
        height: size,
        width: size,
        seed,
    };
    let mut frames = toy_scenes(&spec).map_err(js_err)?.remove(0);
    Ok(frames.swap_remove(frame))
}

fn to_rgba(img: &Tensor) -> Vec<u8> {
    img.data()
        .chunks_exact(3)
        .flat_map(|px| {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(px[0]), q(px[1]), q(px[2]), 255]
        })
        .collect()
}

/// RGBA views of one toy frame, concatenated: the LDR capture at
/// `exposure`, its linearised channels scaled by `exposure`, and the
/// μ-law tonemapped ground truth.
///
/// Each view is `size * size * 4` bytes.
#[wasm_bindgen]
pub fn exposure_views(size: usize, seed: u64, frame: usize, exposure: f64, gamma: f64, bit_depth: u8, mu: f64) -> Result<Vec<u8>, JsError> {
    let hdr = scene(size, seed, frame)?;
    let ldr = synthesize_ldr(&hdr, exposure, gamma, bit_depth).map_err(js_err)?;
    let lin = build_network_input(&ldr).linear().map(|v| v * exposure);
    let peak = hdr_vdiff::datapipe::peak_radiance(std::slice::from_ref(&hdr));
    let tm = tonemap_normalized(hdr.pixels(), peak, mu).map_err(js_err)?;
    Ok([to_rgba(ldr.pixels()), to_rgba(&lin), to_rgba(&tm)].concat())
}

/// Fraction of the frame's samples clipped at `exposure`.
#[wasm_bindgen]
pub fn clipped_fraction(size: usize, seed: u64, frame: usize, exposure: f64) -> Result<f64, JsError> {
    let hdr = scene(size, seed, frame)?;
    let d = hdr.pixels().data();
    Ok(d.iter().filter(|v| **v * exposure >= 1.0).count() as f64 / d.len() as f64)
}

/// Cumulative `alpha_bar_t` for `t = 1..=steps`.
#[wasm_bindgen]
pub fn alpha_bar_curve(steps: usize, beta_start: f64, beta_end: f64, cosine: bool) -> Result<Vec<f64>, JsError> {
    let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
    let s = DiffusionSchedule::new(steps, beta_start, beta_end, kind).map_err(js_err)?;
    Ok(s.alpha_bars().to_vec())
}

/// Timesteps visited by a DDIM sampler with `num_steps` updates.
#[wasm_bindgen]
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Vec<u32> {
    sampling_timesteps(total, num_steps.clamp(1, total.max(1)))
        .into_iter()
        .map(|t| t as u32)
        .collect()
}

/// Sinusoidal embedding of an exposure multiplier, optionally in stops.
#[wasm_bindgen]
pub fn exposure_embedding(exposure: f64, dim: usize, log2: bool) -> Result<Vec<f64>, JsError> {
    let enc = if log2 { ExposureEncoding::Log2 } else { ExposureEncoding::Raw };
    embed(enc.apply(exposure), dim).map_err(js_err)
}
