//! PSNR and SSIM on μ-law tonemapped frames, and directory-level reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{peak_radiance, HdrFrame};
use crate::error::{invalid, Error, Result};
use crate::io::read_hdrf;
use crate::tensor::Tensor;
use crate::tonemap::{tonemap_normalized, DEFAULT_MU};

pub const PSNR_CAP: f64 = 99.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR of two images already in `[0, 1]`, capped for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, cap: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

/// PSNR after dividing both frames by `peak` and μ-law tonemapping.
pub fn psnr_t(pred: &HdrFrame, gt: &HdrFrame, peak: f64, mu: f64) -> Result<f64> {
    pred.pixels().expect_same_shape(gt.pixels(), "psnr_t")?;
    psnr(
        &tonemap_normalized(pred.pixels(), peak, mu)?,
        &tonemap_normalized(gt.pixels(), peak, mu)?,
        PSNR_CAP,
    )
}

fn gaussian_window() -> Vec<f64> {
    let g: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filtering of one `h x w` plane, valid region only.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `[H, W, C]` images in `[0, 1]`.
///
/// Gaussian window 11x11 with σ = 1.5, `C1 = 0.01²`, `C2 = 0.03²`,
/// population statistics, averaged over valid positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let [h, w, c] = *a.shape() else {
        return Err(invalid!("ssim expects [H, W, C], got {:?}", a.shape()));
    };
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(invalid!("{h}x{w} frame is smaller than the {k}x{k} SSIM window"));
    }
    let g = gaussian_window();
    let plane = |t: &Tensor, ch: usize, f: &dyn Fn(f64, f64) -> f64, other: &Tensor| -> Vec<f64> {
        (0..h * w).map(|p| f(t.data()[p * c + ch], other.data()[p * c + ch])).collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let mx = filter_valid(&plane(a, ch, &|x, _| x, b), h, w, &g);
        let my = filter_valid(&plane(b, ch, &|x, _| x, a), h, w, &g);
        let xx = filter_valid(&plane(a, ch, &|x, _| x * x, b), h, w, &g);
        let yy = filter_valid(&plane(b, ch, &|x, _| x * x, a), h, w, &g);
        let xy = filter_valid(&plane(a, ch, &|x, y| x * y, b), h, w, &g);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cxy) = (xx[i] - ux * ux, yy[i] - uy * uy, xy[i] - ux * uy);
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim_t(pred: &HdrFrame, gt: &HdrFrame, peak: f64, mu: f64) -> Result<f64> {
    ssim(&tonemap_normalized(pred.pixels(), peak, mu)?, &tonemap_normalized(gt.pixels(), peak, mu)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub name: String,
    pub psnr_t: f64,
    pub ssim_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr_t: f64,
    pub mean_ssim_t: f64,
    pub frame_count: usize,
    pub mu: f64,
    pub peak: f64,
    pub psnr_cap: f64,
    /// Slots for perceptual metrics that need external models.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>, mu: f64, peak: f64) -> Self {
        let n = frames.len().max(1) as f64;
        Self {
            mean_psnr_t: frames.iter().map(|f| f.psnr_t).sum::<f64>() / n,
            mean_ssim_t: frames.iter().map(|f| f.ssim_t).sum::<f64>() / n,
            frame_count: frames.len(),
            frames,
            mu,
            peak,
            psnr_cap: PSNR_CAP,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub mu: f64,
    /// Normalising radiance; `None` reads the ground-truth sidecar or falls
    /// back to the 99.9th percentile of the ground truth.
    pub peak: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, peak: None }
    }
}

fn hdr_files(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "hdrf") {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn sidecar_peak(dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(dir.join(crate::datapipe::SIDECAR_NAME)).ok()?;
    serde_json::from_str::<serde_json::Value>(&text).ok()?.get("peak")?.as_f64()
}

/// Compares every `.hdrf` frame of `pred_dir` with the same name in `gt_dir`.
pub fn evaluate_run(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<MetricReport> {
    let pred = hdr_files(pred_dir)?;
    let gt = hdr_files(gt_dir)?;
    let missing: Vec<&str> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .chain(pred.keys().filter(|k| !gt.contains_key(*k)))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(invalid!("unpaired frames: {}", missing.join(", ")));
    }
    if gt.is_empty() {
        return Err(invalid!("no .hdrf frames in {}", gt_dir.display()));
    }
    let load = |p: &Path| -> Result<HdrFrame> { HdrFrame::new(read_hdrf(p)?, 0) };
    let gts: Vec<HdrFrame> = gt.values().map(|p| load(p)).collect::<Result<_>>()?;
    let peak = opts.peak.or_else(|| sidecar_peak(gt_dir)).unwrap_or_else(|| peak_radiance(&gts));
    let frames = gt
        .keys()
        .zip(&gts)
        .map(|(name, g)| {
            let p = load(&pred[name])?;
            Ok(FrameMetrics {
                name: name.clone(),
                psnr_t: psnr_t(&p, g, peak, opts.mu)?,
                ssim_t: ssim_t(&p, g, peak, opts.mu)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_frames(frames, opts.mu, peak))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn psnr_cap_and_known_value() {
        let a = Tensor::full([2, 2, 3], 0.5);
        assert_eq!(psnr(&a, &a, PSNR_CAP).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, PSNR_CAP).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::uniform([16, 16, 3], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = Tensor::full([12, 12, 1], 0.5);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros([10, 12, 1]), &Tensor::zeros([10, 12, 1])).is_err());
    }

    fn analytic_pair() -> (Tensor, Tensor) {
        let (h, w) = (32, 32);
        let mut a = Tensor::zeros([h, w, 3]);
        let mut b = Tensor::zeros([h, w, 3]);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let (xf, yf, cf) = (x as f64, y as f64, c as f64);
                    let va = ((0.31 * xf + 0.17 * yf + cf).sin() + 1.0) / 2.0;
                    let vb = (va + 0.15 * (0.9 * xf - 0.4 * yf + 2.0 * cf).cos()).clamp(0.0, 1.0);
                    a.data_mut()[(y * w + x) * 3 + c] = va;
                    b.data_mut()[(y * w + x) * 3 + c] = vb;
                }
            }
        }
        (a, b)
    }

    // Reference from scikit-image 0.25.2 `structural_similarity` with
    // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
    // data_range=1, channel_axis=-1 on the same analytic pair.
    #[test]
    fn ssim_matches_reference_implementation() {
        let (a, b) = analytic_pair();
        let got = ssim(&a, &b).unwrap();
        assert!((got - 0.832_277_583_342_545_6).abs() < 1e-6, "{got}");
    }

    #[test]
    fn metrics_are_symmetric() {
        let (a, b) = analytic_pair();
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b, PSNR_CAP).unwrap(), psnr(&b, &a, PSNR_CAP).unwrap());
    }

    #[test]
    fn more_noise_scores_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::uniform([20, 20, 3], 0.2, 0.8, &mut rng);
        let noise = Tensor::uniform([20, 20, 3], -1.0, 1.0, &mut rng);
        let noisy = |s: f64| a.zip_map(&noise, |x, n| x + s * n).unwrap();
        let (lo, hi) = (noisy(0.02), noisy(0.1));
        assert!(psnr(&a, &lo, PSNR_CAP).unwrap() > psnr(&a, &hi, PSNR_CAP).unwrap());
        assert!(ssim(&a, &lo).unwrap() > ssim(&a, &hi).unwrap());
    }

    #[test]
    fn report_means() {
        let frames = vec![
            FrameMetrics { name: "a".into(), psnr_t: 30.0, ssim_t: 0.9 },
            FrameMetrics { name: "b".into(), psnr_t: 40.0, ssim_t: 0.8 },
        ];
        let r = MetricReport::from_frames(frames, DEFAULT_MU, 1.0);
        assert_eq!(r.mean_psnr_t, 35.0);
        assert!((r.mean_ssim_t - 0.85).abs() < 1e-12);
    }
}
