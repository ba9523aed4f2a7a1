use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hdr_vdiff::config::{ExperimentConfig, Stage};
use hdr_vdiff::datapipe::{load_hdr_dir, load_sequence, make_sequence_with, save_sequence, SynthesisOptions};
use hdr_vdiff::distribution::{embed_sets, load_patch_set, SourceFiles, TsneConfig};
use hdr_vdiff::io::{write_hdrf, write_png};
use hdr_vdiff::metrics::{evaluate_run, EvalOptions};
use hdr_vdiff::tonemap::{tonemap_normalized, DEFAULT_MU};
use hdr_vdiff::toy::{toy_scenes, ToySpec};
use hdr_vdiff::training::{run_stage, Pipeline, CODE_HASH};

#[derive(Parser)]
#[command(name = "hdr-vdiff", version, about = "HDR video reconstruction from alternating-exposure LDR frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of HDR frames into an alternating-exposure LDR sequence.
    Synthesize {
        /// Directory of `.hdrf` frames.
        #[arg(long, required_unless_present = "toy", conflicts_with = "toy")]
        input: Option<PathBuf>,
        /// Use N procedural toy frames (seeded by `--seed`) instead of `--input`.
        #[arg(long)]
        toy: Option<usize>,
        #[arg(long, default_value_t = 64)]
        toy_size: usize,
        /// Comma-separated exposure cycle, e.g. `1,8` or `1,4,16`.
        #[arg(long, value_delimiter = ',', default_value = "1,8")]
        pattern: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian read-noise standard deviation on the exposed signal.
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        reference_index: usize,
        #[arg(long, default_value_t = hdr_vdiff::datapipe::DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = hdr_vdiff::datapipe::DEFAULT_BIT_DEPTH)]
        bit_depth: u8,
    },
    /// Train one stage and write its checkpoint and run manifest.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
    },
    /// Reconstruct HDR frames for a synthesized sequence directory.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sampler seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tonemapped PSNR/SSIM of predicted against ground-truth frames.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MU)]
        mu: f64,
        /// Normalising radiance; defaults to the ground-truth sidecar peak.
        #[arg(long)]
        peak: Option<f64>,
    },
    /// t-SNE scatter of patches from several frame directories.
    PlotDist {
        /// `label=dir`, optionally `label=hdrf:dir` or `label=png:dir`.
        #[arg(long, num_args = 1.., required = true)]
        sets: Vec<String>,
        /// Output stem; `.svg`, `.csv` and `.json` are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MU)]
        mu: f64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synthesize {
            input,
            toy,
            toy_size,
            pattern,
            out,
            noise_sigma,
            seed,
            reference_index,
            gamma,
            bit_depth,
        } => {
            let frames = match (input, toy) {
                (Some(input), _) => {
                    let frames = load_hdr_dir(&input)?;
                    if frames.is_empty() {
                        bail!("no .hdrf frames in {}", input.display());
                    }
                    frames
                }
                (None, Some(n)) => {
                    let spec = ToySpec { sequences: 1, frames: n, height: toy_size, width: toy_size, seed };
                    toy_scenes(&spec)?.remove(0)
                }
                (None, None) => unreachable!("clap requires one of --input/--toy"),
            };
            let opts = SynthesisOptions {
                gamma,
                bit_depth,
                noise_sigma,
                seed,
            };
            let seq = make_sequence_with(&frames, &pattern, reference_index, &opts)?;
            save_sequence(&seq, &out)?;
            println!("wrote {} frames to {} (peak {:.4})", seq.len(), out.display(), seq.peak);
        }
        Command::Train { stage, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = run_stage(stage, &cfg)?;
            println!(
                "{stage}: {} steps, loss {:.5} -> {:.5}, checkpoint {} ({})",
                m.loss.steps.len(),
                m.loss.steps.first().copied().unwrap_or(f64::NAN),
                m.loss.steps.last().copied().unwrap_or(f64::NAN),
                m.checkpoint.display(),
                &m.digest[..12]
            );
        }
        Command::Infer { config, input, out, seed } => infer(&config, &input, &out, seed)?,
        Command::Evaluate { pred, gt, out, mu, peak } => {
            let report = evaluate_run(&pred, &gt, &EvalOptions { mu, peak })?;
            write_text(&out, &report.to_json())?;
            println!(
                "{} frames: PSNR_T {:.3} dB, SSIM_T {:.4}",
                report.frame_count, report.mean_psnr_t, report.mean_ssim_t
            );
        }
        Command::PlotDist {
            sets,
            out,
            patch,
            perplexity,
            iterations,
            seed,
            mu,
        } => {
            let sets = sets
                .iter()
                .map(|s| {
                    let (label, dir, files) = parse_set(s)?;
                    Ok(load_patch_set(&label, &dir, files, patch, mu)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let cfg = TsneConfig {
                perplexity,
                iterations,
                seed,
                ..Default::default()
            };
            let emb = embed_sets(&sets, &cfg)?;
            let [svg, csv, _] = emb.write(&out)?;
            println!("wrote {} and {} ({} points)", svg.display(), csv.display(), emb.points.len());
        }
    }
    Ok(())
}

fn parse_set(spec: &str) -> Result<(String, PathBuf, SourceFiles)> {
    let Some((label, rest)) = spec.split_once('=') else {
        bail!("set {spec:?} must look like label=dir");
    };
    let (files, dir) = match rest.split_once(':') {
        Some(("hdrf", d)) => (SourceFiles::Hdr, d),
        Some(("png", d)) => (SourceFiles::Png, d),
        _ => (SourceFiles::Auto, rest),
    };
    if label.is_empty() || dir.is_empty() {
        bail!("set {spec:?} needs a label and a directory");
    }
    Ok((label.to_string(), PathBuf::from(dir), files))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn infer(config: &Path, input: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let pipeline = Pipeline::load(&cfg)?;
    let seq = load_sequence(input)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let frames = pipeline.infer_sequence(&seq, &sampler)?;
    std::fs::create_dir_all(out)?;
    let mut names = Vec::new();
    for f in &frames {
        let name = format!("hdr_{:04}.hdrf", f.index());
        write_hdrf(&out.join(&name), f.pixels())?;
        let preview = tonemap_normalized(f.pixels(), seq.peak, pipeline.tcam.cfg.mu)?;
        write_png(&out.join(format!("preview_{:04}.png", f.index())), &preview, 8)?;
        names.push(name);
    }
    let sidecar = serde_json::json!({
        "frames": names,
        "peak": seq.peak,
        "mu": pipeline.tcam.cfg.mu,
        "sampler": sampler,
        "code_hash": CODE_HASH,
        "checkpoints": {
            "autoencoder": pipeline.autoencoder.to_checkpoint().digest(),
            "ldm": pipeline.denoiser.to_checkpoint(&pipeline.schedule_config).digest(),
            "tcam": pipeline.tcam.to_checkpoint().digest(),
            "recon": pipeline.recon.to_checkpoint().digest(),
        },
    });
    write_text(&out.join("inference.json"), &serde_json::to_string_pretty(&sidecar)?)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}
