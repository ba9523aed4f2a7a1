//! Patch distribution study: exact t-SNE of flattened tonemapped patches,
//! written as a coordinate CSV and an SVG scatter plot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{peak_radiance, HdrFrame, SIDECAR_NAME};
use crate::error::{invalid, Error, Result};
use crate::io::{read_hdrf, read_png};
use crate::tensor::Tensor;
use crate::tonemap::tonemap_normalized;

pub const MIN_PATCHES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 100.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

/// Labelled flattened patches from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub label: String,
    pub patches: Vec<Vec<f64>>,
}

/// Embedded coordinates with one label per point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub labels: Vec<String>,
    /// Index into `labels` per point.
    pub assignment: Vec<usize>,
    pub points: Vec<[f64; 2]>,
    /// Perplexity after clamping to the point count.
    pub perplexity: f64,
    pub config: TsneConfig,
}

/// Non-overlapping `size x size` patches of an `[H, W, C]` image, flattened.
pub fn extract_patches(image: &Tensor, size: usize) -> Result<Vec<Vec<f64>>> {
    let [h, w, c] = *image.shape() else {
        return Err(invalid!("patch extraction expects [H, W, C], got {:?}", image.shape()));
    };
    if size == 0 || size > h || size > w {
        return Err(invalid!("patch size {size} does not fit a {h}x{w} image"));
    }
    let d = image.data();
    let mut out = Vec::new();
    for py in (0..=h - size).step_by(size) {
        for px in (0..=w - size).step_by(size) {
            let mut p = Vec::with_capacity(size * size * c);
            for y in py..py + size {
                p.extend_from_slice(&d[(y * w + px) * c..(y * w + px + size) * c]);
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Which frame files to read from a directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceFiles {
    /// `.hdrf` if present, otherwise `.png`.
    Auto,
    Hdr,
    Png,
}

fn files_with(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    Ok(v)
}

/// Reads every frame of `dir` as tonemapped patches. HDR frames are divided
/// by the sidecar peak (or their own 99.9th percentile) before tonemapping;
/// PNG frames are used as stored.
pub fn load_patch_set(label: &str, dir: &Path, files: SourceFiles, patch: usize, mu: f64) -> Result<PatchSet> {
    let hdr = files_with(dir, "hdrf")?;
    let use_hdr = match files {
        SourceFiles::Hdr => true,
        SourceFiles::Png => false,
        SourceFiles::Auto => !hdr.is_empty(),
    };
    let mut patches = Vec::new();
    if use_hdr {
        let frames: Vec<HdrFrame> = hdr.iter().map(|p| HdrFrame::new(read_hdrf(p)?, 0)).collect::<Result<_>>()?;
        let peak = std::fs::read_to_string(dir.join(SIDECAR_NAME))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v.get("peak")?.as_f64())
            .unwrap_or_else(|| peak_radiance(&frames));
        for f in &frames {
            patches.extend(extract_patches(&tonemap_normalized(f.pixels(), peak, mu)?, patch)?);
        }
    } else {
        for p in files_with(dir, "png")? {
            patches.extend(extract_patches(&read_png(&p)?.0, patch)?);
        }
    }
    Ok(PatchSet {
        label: label.to_string(),
        patches,
    })
}

fn squared_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Symmetric joint probabilities with per-point bandwidths matching the
/// target perplexity.
fn joint_probabilities(d: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let di = &d[i * n..(i + 1) * n];
        let min_d = (0..n).filter(|&j| j != i).map(|j| di[j]).fold(f64::INFINITY, f64::min);
        for _ in 0..100 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(di[j] - min_d) * beta).exp() };
                sum += row[j];
            }
            let mean_d: f64 = (0..n).map(|j| row[j] * (di[j] - min_d)).sum::<f64>() / sum;
            let entropy = sum.ln() + beta * mean_d;
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Exact t-SNE of `x` into two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<(Vec<[f64; 2]>, f64)> {
    let n = x.len();
    if n < 4 {
        return Err(invalid!("t-SNE needs at least 4 points, got {n}"));
    }
    if x.iter().any(|v| v.len() != x[0].len()) {
        return Err(invalid!("all points must share a dimension"));
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let p = joint_probabilities(&squared_distances(x), n, perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Tensor::randn([n, 2], &mut rng);
    let mut y: Vec<[f64; 2]> = (0..n).map(|i| [1e-4 * init.data()[2 * i], 1e-4 * init.data()[2 * i + 1]]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < 250 { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let q = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let coef = 4.0 * (exaggeration * p[i * n + j] - q / z) * q;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (vel[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                vel[i][k] = momentum * vel[i][k] - cfg.learning_rate * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let mean = [
            y.iter().map(|v| v[0]).sum::<f64>() / n as f64,
            y.iter().map(|v| v[1]).sum::<f64>() / n as f64,
        ];
        for v in &mut y {
            v[0] -= mean[0];
            v[1] -= mean[1];
        }
    }
    Ok((y, perplexity))
}

/// Embeds all sets jointly.
pub fn embed_sets(sets: &[PatchSet], cfg: &TsneConfig) -> Result<Embedding> {
    if sets.len() < 2 {
        return Err(invalid!("need at least 2 patch sets, got {}", sets.len()));
    }
    if let Some(s) = sets.iter().find(|s| s.patches.len() < MIN_PATCHES) {
        return Err(invalid!(
            "set {:?} has {} patches, at least {MIN_PATCHES} required",
            s.label,
            s.patches.len()
        ));
    }
    let all: Vec<Vec<f64>> = sets.iter().flat_map(|s| s.patches.iter().cloned()).collect();
    let (points, perplexity) = tsne(&all, cfg)?;
    Ok(Embedding {
        labels: sets.iter().map(|s| s.label.clone()).collect(),
        assignment: sets.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.patches.len())).collect(),
        points,
        perplexity,
        config: cfg.clone(),
    })
}

impl Embedding {
    pub fn centroid(&self, label: usize) -> [f64; 2] {
        let pts: Vec<&[f64; 2]> = self.points.iter().zip(&self.assignment).filter(|(_, a)| **a == label).map(|(p, _)| p).collect();
        let n = pts.len().max(1) as f64;
        [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,x,y\n");
        for (p, a) in self.points.iter().zip(&self.assignment) {
            let _ = writeln!(s, "{},{:.9},{:.9}", self.labels[*a], p[0], p[1]);
        }
        s
    }

    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
        let (w, h, m, legend_w) = (520.0, 440.0, 30.0, 150.0);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let sx = (w - 2.0 * m) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * m) / (y1 - y0).max(1e-12);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{h}" viewBox="0 0 {} {h}">"#,
            w + legend_w,
            w + legend_w
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r##"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
            w - 2.0 * m,
            h - 2.0 * m
        );
        for (p, a) in self.points.iter().zip(&self.assignment) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
                m + (p[0] - x0) * sx,
                h - m - (p[1] - y0) * sy,
                PALETTE[a % PALETTE.len()]
            );
        }
        for (i, label) in self.labels.iter().enumerate() {
            let y = m + 10.0 + 22.0 * i as f64;
            let _ = writeln!(s, r#"<circle cx="{}" cy="{y}" r="5" fill="{}"/>"#, w + 10.0, PALETTE[i % PALETTE.len()]);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13">{}</text>"#,
                w + 22.0,
                y + 4.0,
                xml_escape(label)
            );
        }
        let _ = writeln!(
            s,
            r##"<text x="{m}" y="{}" font-family="sans-serif" font-size="11" fill="#555">t-SNE, perplexity {:.1}, seed {}</text>"##,
            h - 8.0,
            self.perplexity,
            self.config.seed
        );
        s.push_str("</svg>\n");
        s
    }

    /// Label counts and embedding settings, without coordinates.
    pub fn summary_json(&self) -> String {
        let counts: Vec<usize> = (0..self.labels.len()).map(|i| self.assignment.iter().filter(|a| **a == i).count()).collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "labels": self.labels,
            "counts": counts,
            "perplexity": self.perplexity,
            "config": self.config,
        }))
        .expect("summary serialises")
    }

    /// Writes `<out>.svg`, `<out>.csv` and `<out>.json` (any extension on
    /// `out` is replaced).
    pub fn write(&self, out: &Path) -> Result<[PathBuf; 3]> {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let paths = [out.with_extension("svg"), out.with_extension("csv"), out.with_extension("json")];
        for (path, text) in paths.iter().zip([self.to_svg(), self.to_csv(), self.summary_json()]) {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(paths)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn cluster(seed: u64, center: f64, n: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..12).map(|_| center + rng.random_range(-0.05..0.05)).collect()).collect()
    }

    fn small_cfg() -> TsneConfig {
        TsneConfig {
            iterations: 300,
            ..Default::default()
        }
    }

    #[test]
    fn patches_tile_the_image() {
        let img = Tensor::new([4, 6, 1], (0..24).map(f64::from).collect()).unwrap();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0.0, 1.0, 6.0, 7.0]);
        assert_eq!(p[5], vec![16.0, 17.0, 22.0, 23.0]);
        assert!(extract_patches(&img, 5).is_err());
    }

    #[test]
    fn perplexity_is_matched() {
        let x = cluster(0, 0.0, 40);
        let d = squared_distances(&x);
        let p = joint_probabilities(&d, 40, 10.0);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn separated_clusters_stay_apart_and_duplicates_overlap() {
        let a = cluster(1, 0.2, 25);
        let sets = vec![
            PatchSet { label: "a".into(), patches: a.clone() },
            PatchSet { label: "a copy".into(), patches: a },
            PatchSet { label: "b".into(), patches: cluster(2, 0.8, 25) },
        ];
        let e = embed_sets(&sets, &small_cfg()).unwrap();
        let dist = |i: usize, j: usize| {
            let (p, q) = (e.centroid(i), e.centroid(j));
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
        };
        assert!(dist(0, 1) < 0.1 * dist(0, 2), "{} vs {}", dist(0, 1), dist(0, 2));
        assert_eq!(e.to_csv().lines().count(), 76);
    }

    #[test]
    fn repeat_runs_are_identical() {
        let sets = vec![
            PatchSet { label: "a".into(), patches: cluster(3, 0.1, 20) },
            PatchSet { label: "b".into(), patches: cluster(4, 0.6, 20) },
        ];
        let a = embed_sets(&sets, &small_cfg()).unwrap();
        let b = embed_sets(&sets, &small_cfg()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn too_few_patches_or_sets_error() {
        let few = PatchSet { label: "a".into(), patches: cluster(5, 0.0, 19) };
        let ok = PatchSet { label: "b".into(), patches: cluster(6, 0.0, 20) };
        assert!(embed_sets(&[few, ok.clone()], &small_cfg()).is_err());
        assert!(embed_sets(&[ok], &small_cfg()).is_err());
    }

    #[test]
    fn svg_has_legend_entries() {
        let sets = vec![
            PatchSet { label: "LDR <in>".into(), patches: cluster(7, 0.1, 20) },
            PatchSet { label: "HDR".into(), patches: cluster(8, 0.6, 20) },
        ];
        let svg = embed_sets(&sets, &TsneConfig { iterations: 50, ..Default::default() }).unwrap().to_svg();
        assert!(svg.contains("LDR &lt;in&gt;") && svg.contains(">HDR<"));
        assert_eq!(svg.matches("<circle").count(), 42);
    }
}
