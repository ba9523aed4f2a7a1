//! Procedural HDR video used for smoke runs and overfit checks.
//!
//! Each sequence is a smooth low-radiance backdrop with a drifting sinusoidal
//! texture and a few bright moving highlights, so short exposures clip only
//! the highlights and long exposures clip most of the frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::HdrFrame;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 4,
            height: 64,
            width: 64,
            seed: 7,
        }
    }
}

struct Highlight {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    radius: f64,
    radiance: f64,
    tint: [f64; 3],
}

/// One HDR sequence per entry, `spec.frames` frames each.
pub fn toy_scenes(spec: &ToySpec) -> Result<Vec<Vec<HdrFrame>>> {
    if spec.sequences == 0 || spec.frames == 0 || spec.height < 4 || spec.width < 4 {
        return Err(invalid!("toy scene spec {:?} is degenerate", (spec.sequences, spec.frames, spec.height, spec.width)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.sequences).map(|_| scene(spec, &mut rng)).collect()
}

fn scene(spec: &ToySpec, rng: &mut ChaCha8Rng) -> Result<Vec<HdrFrame>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..0.12));
    let slope: [f64; 2] = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
    let freq = rng.random_range(1.5..3.5) * std::f64::consts::TAU / w;
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let drift = rng.random_range(-1.5..1.5);
    let count = rng.random_range(1..=3);
    let lights: Vec<Highlight> = (0..count)
        .map(|_| Highlight {
            y: rng.random_range(0.2..0.8) * h,
            x: rng.random_range(0.2..0.8) * w,
            vy: rng.random_range(-1.5..1.5),
            vx: rng.random_range(-1.5..1.5),
            radius: rng.random_range(0.06..0.15) * w,
            radiance: rng.random_range(1.0..6.0),
            tint: std::array::from_fn(|_| rng.random_range(0.6..1.0)),
        })
        .collect();
    (0..spec.frames)
        .map(|t| {
            let tf = t as f64;
            let px = Tensor::from_fn([spec.height, spec.width, 3], |i| {
                let c = i % 3;
                let y = (i / 3 / spec.width) as f64;
                let x = ((i / 3) % spec.width) as f64;
                let ramp = 1.0 + slope[0] * (y / h - 0.5) + slope[1] * (x / w - 0.5);
                let phase = freq * (x * angle.cos() + y * angle.sin()) + drift * tf * freq;
                let texture = 1.0 + 0.5 * phase.sin();
                let mut v = base[c] * ramp * texture;
                for l in &lights {
                    let dy = y - (l.y + l.vy * tf);
                    let dx = x - (l.x + l.vx * tf);
                    v += l.radiance * l.tint[c] * (-(dy * dy + dx * dx) / (2.0 * l.radius * l.radius)).exp();
                }
                v.max(0.0)
            });
            HdrFrame::new(px, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_high_dynamic_range() {
        let spec = ToySpec::default();
        let a = toy_scenes(&spec).unwrap();
        let b = toy_scenes(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        for seq in &a {
            assert_eq!(seq.len(), 4);
            let data = seq[0].pixels().data();
            let max = data.iter().cloned().fold(0.0, f64::max);
            let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(max > 1.0, "highlights should clip the short exposure");
            assert!(min >= 0.0 && min < 0.125);
        }
        assert_ne!(a[0][0], a[0][1], "content moves between frames");
    }
}
