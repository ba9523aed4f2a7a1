//! Stage orchestration: example preparation, the alignment and
//! reconstruction training loops, end-to-end inference and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    ensure_finite, train_autoencoder, Autoencoder, DecoderFeatures, LossHistory, SourceKind, TrainSettings,
};
use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, ExperimentConfig, Stage};
use crate::datapipe::{hwc_to_nchw, load_hdr_dir, make_sequence_with, FrameSequence, HdrFrame, SynthesisOptions};
use crate::diffusion::{DiffusionSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{invalid, Error, Result};
use crate::ldm::{generate_prior, latent_scale_for, train_ldm, Denoiser, LdmExample};
use crate::loss::{tcam_loss, LossWeights, PerceptionNet};
use crate::metrics::{psnr, PSNR_CAP};
use crate::nn::{Adam, AdamConfig};
use crate::tcam::{linear_baseline, prepare_window, Tcam, TemporalFeatures, WindowBatch, WindowInput};
use crate::tensor::Tensor;
use crate::tonemap::tonemap_normalized;
use crate::toy::toy_scenes;
use crate::zica::{ReconConfig, Reconstructor};

/// Digest of the library sources this binary was built from.
pub const CODE_HASH: &str = env!("HDR_VDIFF_CODE_HASH");

/// Reshuffles indices every epoch and hands out fixed-size batches.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn steps_per_epoch(&self, size: usize) -> usize {
        self.order.len().div_ceil(size.max(1))
    }
}

/// Tonemapped ground truth of frame `k`, `[1, 3, H, W]`.
pub fn tonemapped_target(seq: &FrameSequence, k: usize, mu: f64) -> Result<Tensor> {
    Ok(hwc_to_nchw(&tonemap_normalized(seq.hdr_targets[k].pixels(), seq.peak, mu)?))
}

/// One reference frame with everything the alignment stage needs.
#[derive(Clone, Debug)]
pub struct TcamExample {
    pub window: WindowInput,
    pub target: Tensor,
}

/// Windows and targets for every frame of every sequence.
pub fn tcam_examples(seqs: &[FrameSequence], tcam: &Tcam) -> Result<Vec<Vec<TcamExample>>> {
    seqs.iter()
        .map(|seq| {
            (0..seq.len())
                .map(|k| {
                    Ok(TcamExample {
                        window: prepare_window(seq, k, &tcam.cfg)?,
                        target: tonemapped_target(seq, k, tcam.cfg.mu)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// Units of supervision: consecutive frame pairs, or single frames for
/// one-frame sequences.
fn clips(lengths: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (s, &n) in lengths.iter().enumerate() {
        if n == 1 {
            out.push((s, 0, 1));
        }
        for k in 0..n.saturating_sub(1) {
            out.push((s, k, 2));
        }
    }
    out
}

/// Picks batch clips sharing the first clip's length.
fn clip_batch(all: &[(usize, usize, usize)], picks: Vec<usize>) -> Vec<(usize, usize, usize)> {
    let t = all[picks[0]].2;
    picks.into_iter().map(|i| all[i]).filter(|c| c.2 == t).collect()
}

fn stack_targets(items: &[&Tensor], b: usize, t: usize) -> Result<Tensor> {
    let [_, c, h, w] = *items[0].shape() else {
        return Err(invalid!("targets must be [1, C, H, W]"));
    };
    Tensor::stack_batch(&items.iter().map(|x| (*x).clone()).collect::<Vec<_>>())?.reshape([b, t, c, h, w])
}

/// Trains the alignment module on consecutive-frame clips.
pub fn train_tcam(
    tcam: &mut Tcam,
    examples: &[Vec<TcamExample>],
    weights: &LossWeights,
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossHistory) -> bool,
) -> Result<LossHistory> {
    let all = clips(&examples.iter().map(Vec::len).collect::<Vec<_>>());
    if all.is_empty() || settings.batch_size == 0 {
        return Err(invalid!("alignment training needs frames and a positive batch size"));
    }
    let net = PerceptionNet::new();
    let mut sampler = EpochSampler::new(all.len(), settings.seed);
    let mut opt = Adam::new(&tcam.params, AdamConfig::with_lr(settings.lr));
    let spe = sampler.steps_per_epoch(settings.batch_size);
    let mut history = LossHistory::default();
    for step in 0..settings.steps {
        let batch = clip_batch(&all, sampler.next_batch(settings.batch_size));
        let t = batch[0].2;
        let items: Vec<&TcamExample> = batch.iter().flat_map(|&(s, k, t)| (k..k + t).map(move |j| &examples[s][j])).collect();
        let windows = WindowBatch::stack(&items.iter().map(|e| &e.window).collect::<Vec<_>>())?;
        let target = stack_targets(&items.iter().map(|e| &e.target).collect::<Vec<_>>(), batch.len(), t)?;
        let out = tcam.forward(&windows)?;
        let pred = out.merged.reshape(target.shape().to_vec())?;
        let loss = tcam_loss(&pred, &Var::constant(target), weights, &net)?;
        let lv = loss.total.data()[0];
        ensure_finite(lv, "alignment", step)?;
        history.record(lv, spe);
        opt.step(&mut tcam.params, &loss.total.backward())?;
        if !on_step(step, &history) {
            break;
        }
    }
    Ok(history)
}

/// Frozen features feeding the reconstruction stage for one frame.
#[derive(Clone, Debug)]
pub struct ReconExample {
    pub temporal: TemporalFeatures,
    pub prior: DecoderFeatures,
    pub target: Tensor,
}

/// Frozen temporal features of every frame of `seq`.
pub fn temporal_features(tcam: &Tcam, seq: &FrameSequence) -> Result<Vec<TemporalFeatures>> {
    (0..seq.len())
        .map(|k| {
            let w = prepare_window(seq, k, &tcam.cfg)?;
            tcam.infer(&WindowBatch::stack(&[&w])?)?.item(0)
        })
        .collect()
}

/// Per-frame sampler: the configured seed offset by the frame index.
pub fn frame_sampler(sampler: &SamplerConfig, k: usize) -> SamplerConfig {
    SamplerConfig {
        seed: sampler.seed.wrapping_add(k as u64),
        ..sampler.clone()
    }
}

/// Decoded diffusion priors of every frame of `seq`.
pub fn prior_features(
    seq: &FrameSequence,
    ae: &Autoencoder,
    den: &Denoiser,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
) -> Result<Vec<DecoderFeatures>> {
    (0..seq.len())
        .map(|k| Ok(generate_prior(&seq.frames[k], ae, den, schedule, &frame_sampler(sampler, k))?.features))
        .collect()
}

/// The frozen models feeding the reconstruction stage.
pub struct FrozenStack<'a> {
    pub autoencoder: &'a Autoencoder,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a DiffusionSchedule,
    pub sampler: &'a SamplerConfig,
    pub tcam: &'a Tcam,
}

pub fn recon_examples(seqs: &[FrameSequence], models: &FrozenStack<'_>) -> Result<Vec<Vec<ReconExample>>> {
    seqs.iter()
        .map(|seq| {
            let temporal = temporal_features(models.tcam, seq)?;
            let prior = prior_features(seq, models.autoencoder, models.denoiser, models.schedule, models.sampler)?;
            temporal
                .into_iter()
                .zip(prior)
                .enumerate()
                .map(|(k, (temporal, prior))| {
                    Ok(ReconExample {
                        temporal,
                        prior,
                        target: tonemapped_target(seq, k, models.tcam.cfg.mu)?,
                    })
                })
                .collect()
        })
        .collect()
}

fn stack_scales(items: &[&[Tensor]]) -> Result<Vec<Var>> {
    (0..items[0].len())
        .map(|s| Ok(Var::constant(Tensor::stack_batch(&items.iter().map(|m| m[s].clone()).collect::<Vec<_>>())?)))
        .collect()
}

/// Trains the reconstruction head on frozen temporal and prior features.
pub fn train_recon(
    recon: &mut Reconstructor,
    examples: &[Vec<ReconExample>],
    weights: &LossWeights,
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossHistory) -> bool,
) -> Result<LossHistory> {
    let all = clips(&examples.iter().map(Vec::len).collect::<Vec<_>>());
    if all.is_empty() || settings.batch_size == 0 {
        return Err(invalid!("reconstruction training needs frames and a positive batch size"));
    }
    let net = PerceptionNet::new();
    let mut sampler = EpochSampler::new(all.len(), settings.seed);
    let mut opt = Adam::new(&recon.params, AdamConfig::with_lr(settings.lr));
    let spe = sampler.steps_per_epoch(settings.batch_size);
    let mut history = LossHistory::default();
    for step in 0..settings.steps {
        let batch = clip_batch(&all, sampler.next_batch(settings.batch_size));
        let t = batch[0].2;
        let items: Vec<&ReconExample> = batch.iter().flat_map(|&(s, k, t)| (k..k + t).map(move |j| &examples[s][j])).collect();
        let temporal = stack_scales(&items.iter().map(|e| e.temporal.pyramid.maps.as_slice()).collect::<Vec<_>>())?;
        let prior = stack_scales(&items.iter().map(|e| e.prior.maps.as_slice()).collect::<Vec<_>>())?;
        let merged = Var::constant(Tensor::stack_batch(&items.iter().map(|e| e.temporal.merged.clone()).collect::<Vec<_>>())?);
        let target = stack_targets(&items.iter().map(|e| &e.target).collect::<Vec<_>>(), batch.len(), t)?;
        let pred = recon.forward(&temporal, &prior, &merged)?.reshape(target.shape().to_vec())?;
        let loss = tcam_loss(&pred, &Var::constant(target), weights, &net)?;
        let lv = loss.total.data()[0];
        ensure_finite(lv, "reconstruction", step)?;
        history.record(lv, spe);
        opt.step(&mut recon.params, &loss.total.backward())?;
        if !on_step(step, &history) {
            break;
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Data

fn center_crop(frame: &HdrFrame, h: usize, w: usize) -> Result<HdrFrame> {
    let [fh, fw, c] = *frame.pixels().shape() else {
        return Err(invalid!("HDR frame must be [H, W, C]"));
    };
    if h > fh || w > fw {
        return Err(invalid!("crop {h}x{w} exceeds frame {fh}x{fw}"));
    }
    let (y0, x0) = ((fh - h) / 2, (fw - w) / 2);
    let src = frame.pixels().data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let row = ((y0 + y) * fw + x0) * c;
        out.extend_from_slice(&src[row..row + w * c]);
    }
    HdrFrame::new(Tensor::new([h, w, c], out)?, frame.index())
}

/// Builds the training sequences described by `data`, seeded by `seed`.
pub fn load_sequences(data: &DataConfig, seed: u64) -> Result<Vec<FrameSequence>> {
    let mut scenes: Vec<Vec<HdrFrame>> = data.hdr_dirs.iter().map(|d| load_hdr_dir(d)).collect::<Result<_>>()?;
    if let Some(toy) = &data.toy {
        scenes.extend(toy_scenes(toy)?);
    }
    if scenes.is_empty() {
        return Err(Error::Config("no training sequences".into()));
    }
    scenes
        .iter()
        .enumerate()
        .map(|(i, frames)| {
            let frames = match data.crop {
                Some([h, w]) => frames.iter().map(|f| center_crop(f, h, w)).collect::<Result<Vec<_>>>()?,
                None => frames.clone(),
            };
            let opts = SynthesisOptions {
                gamma: data.gamma,
                bit_depth: data.bit_depth,
                noise_sigma: data.noise_sigma,
                seed: seed.wrapping_add(i as u64),
            };
            make_sequence_with(&frames, &data.exposure_pattern, data.reference_index, &opts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifests

/// Records every hyperparameter a stage reads, keyed by its dotted path in
/// the resolved configuration.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: BTreeMap<String, serde_json::Value>,
}

impl ParamRegistry {
    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        let v = serde_json::to_value(value).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        self.entries.insert(key.to_string(), v);
        Ok(())
    }

    pub fn keys(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Fails if a consumed value is absent from, or differs in, `resolved`.
    pub fn verify(&self, resolved: &serde_json::Value) -> Result<()> {
        for (key, value) in &self.entries {
            let found = key.split('.').try_fold(resolved, |v, part| v.get(part));
            match found {
                Some(v) if v == value => {}
                Some(v) => {
                    return Err(Error::Config(format!("hyperparameter {key} used as {value} but recorded as {v}")));
                }
                None => return Err(Error::Config(format!("hyperparameter {key} is missing from the run manifest"))),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenModule {
    pub stage: Stage,
    pub digest: String,
}

/// Everything needed to reproduce and audit one stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub code_hash: String,
    /// Configuration after derived values were filled in.
    pub config: serde_json::Value,
    /// Dotted paths of every hyperparameter the stage read.
    pub consumed: Vec<String>,
    pub loss: LossHistory,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub checkpoint: PathBuf,
    pub digest: String,
    /// Modules loaded frozen, with digests checked unchanged after training.
    pub frozen: Vec<FrozenModule>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// Stages

fn load_checkpoint(cfg: &ExperimentConfig, stage: Stage) -> Result<Checkpoint> {
    let path = cfg.checkpoints.path(stage);
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{stage} (expected {})", path.display())));
    }
    Checkpoint::load(&path)
}

/// Frozen modules and their digests at load time.
struct Frozen {
    checks: Vec<(Stage, String)>,
}

impl Frozen {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    fn note(&mut self, stage: Stage, ck: &Checkpoint) {
        self.checks.push((stage, ck.digest().to_string()));
    }

    fn verify(&self, stage: Stage, current: &Checkpoint) -> Result<FrozenModule> {
        let (_, before) = self.checks.iter().find(|(s, _)| *s == stage).expect("module was noted");
        if current.digest() != before {
            return Err(Error::FrozenDigest {
                module: stage.to_string(),
                before: before.clone(),
                after: current.digest().to_string(),
            });
        }
        Ok(FrozenModule {
            stage,
            digest: before.clone(),
        })
    }
}

fn logger(stage: Stage, every: usize) -> impl FnMut(usize, &LossHistory) -> bool {
    move |step, h| {
        if every > 0 && (step + 1) % every == 0 {
            log::info!("{stage} step {} loss {:.5}", step + 1, h.smoothed_tail(every));
        }
        true
    }
}

/// Trains one stage, writes its checkpoint and run manifest, and returns
/// the manifest.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    for &p in stage.prerequisites() {
        if !cfg.checkpoints.path(p).exists() {
            return Err(Error::MissingPrerequisite(format!(
                "{p} (no checkpoint at {}, needed by the {stage} stage)",
                cfg.checkpoints.path(p).display()
            )));
        }
    }
    let mut timings = BTreeMap::new();
    let mut reg = ParamRegistry::default();
    let mut resolved = cfg.clone();
    let settings = cfg.train.for_stage(stage).clone();
    reg.record("seed", &cfg.seed)?;
    reg.record("data", &cfg.data)?;
    reg.record(&format!("train.{stage}"), &settings)?;
    reg.record("stages.verify_frozen", &cfg.stages.verify_frozen)?;

    let t0 = Instant::now();
    let seqs = load_sequences(&cfg.data, cfg.seed)?;
    timings.insert("data".into(), t0.elapsed().as_secs_f64());

    let mut frozen = Frozen::new();
    let mut frozen_out = Vec::new();
    let t_prep = Instant::now();
    let (ck, history) = match stage {
        Stage::Autoencoder => {
            reg.record("autoencoder", &cfg.autoencoder)?;
            let mut ae = Autoencoder::new(cfg.autoencoder.clone(), cfg.seed)?;
            let mut images = Vec::new();
            for seq in &seqs {
                for k in 0..seq.len() {
                    images.push(tonemapped_target(seq, k, cfg.autoencoder.mu)?);
                    images.push(hwc_to_nchw(&seq.frames[k].ldr()));
                }
            }
            timings.insert("prepare".into(), t_prep.elapsed().as_secs_f64());
            let t = Instant::now();
            let h = train_autoencoder(&mut ae, &images, &settings)?;
            timings.insert("train".into(), t.elapsed().as_secs_f64());
            (ae.to_checkpoint(), h)
        }
        Stage::Ldm => {
            let ae_ck = load_checkpoint(cfg, Stage::Autoencoder)?;
            frozen.note(Stage::Autoencoder, &ae_ck);
            let ae = Autoencoder::from_checkpoint(&ae_ck)?;
            let mut pairs = Vec::new();
            for seq in &seqs {
                for k in 0..seq.len() {
                    let gt = tonemap_normalized(seq.hdr_targets[k].pixels(), seq.peak, ae.cfg.mu)?;
                    let target = ae.encode(&gt, SourceKind::HdrTonemapped)?.values;
                    let condition = ae.encode(&seq.frames[k].ldr(), SourceKind::LdrCondition)?.values;
                    pairs.push((target, condition, seq.frames[k].exposure()));
                }
            }
            if cfg.stages.auto_latent_scale {
                let targets: Vec<Tensor> = pairs.iter().map(|p| p.0.clone()).collect();
                resolved.ldm.latent_scale = latent_scale_for(&targets);
            }
            reg.record("stages.auto_latent_scale", &cfg.stages.auto_latent_scale)?;
            reg.record("ldm", &resolved.ldm)?;
            reg.record("schedule", &cfg.schedule)?;
            let scale = resolved.ldm.latent_scale;
            let examples: Vec<LdmExample> = pairs
                .into_iter()
                .map(|(t, c, e)| LdmExample {
                    target: t.map(|v| v * scale),
                    condition: c.map(|v| v * scale),
                    exposure: e,
                })
                .collect();
            let schedule = cfg.schedule.build()?;
            let mut den = Denoiser::new(resolved.ldm.clone(), cfg.seed)?;
            timings.insert("prepare".into(), t_prep.elapsed().as_secs_f64());
            let t = Instant::now();
            let h = train_ldm(&mut den, &examples, &schedule, &settings, logger(stage, cfg.stages.log_every))?;
            timings.insert("train".into(), t.elapsed().as_secs_f64());
            if cfg.stages.verify_frozen {
                frozen_out.push(frozen.verify(Stage::Autoencoder, &ae.to_checkpoint())?);
            }
            (den.to_checkpoint(&cfg.schedule), h)
        }
        Stage::Tcam => {
            reg.record("tcam", &cfg.tcam)?;
            reg.record("loss", &cfg.loss)?;
            let mut tcam = Tcam::new(cfg.tcam.clone(), cfg.seed)?;
            let examples = tcam_examples(&seqs, &tcam)?;
            timings.insert("prepare".into(), t_prep.elapsed().as_secs_f64());
            let t = Instant::now();
            let h = train_tcam(&mut tcam, &examples, &cfg.loss, &settings, logger(stage, cfg.stages.log_every))?;
            timings.insert("train".into(), t.elapsed().as_secs_f64());
            (tcam.to_checkpoint(), h)
        }
        Stage::Recon => {
            let cks: Vec<(Stage, Checkpoint)> = [Stage::Autoencoder, Stage::Ldm, Stage::Tcam]
                .into_iter()
                .map(|s| Ok((s, load_checkpoint(cfg, s)?)))
                .collect::<Result<_>>()?;
            for (s, ck) in &cks {
                frozen.note(*s, ck);
            }
            let ae = Autoencoder::from_checkpoint(&cks[0].1)?;
            let (den, schedule_cfg) = Denoiser::from_checkpoint(&cks[1].1)?;
            let tcam = Tcam::from_checkpoint(&cks[2].1)?;
            check_compatible(&ae, &tcam)?;
            let schedule = schedule_cfg.build()?;
            resolved.recon = ReconConfig {
                mu: tcam.cfg.mu,
                ..cfg.resolved_recon()
            };
            resolved.recon.temporal_channels = tcam.feature_channels();
            resolved.recon.prior_channels = ae.feature_channels();
            reg.record("recon", &resolved.recon)?;
            reg.record("loss", &cfg.loss)?;
            reg.record("sampler", &cfg.sampler)?;
            let models = FrozenStack {
                autoencoder: &ae,
                denoiser: &den,
                schedule: &schedule,
                sampler: &cfg.sampler,
                tcam: &tcam,
            };
            let examples = recon_examples(&seqs, &models)?;
            timings.insert("prepare".into(), t_prep.elapsed().as_secs_f64());
            let mut recon = Reconstructor::new(resolved.recon.clone(), cfg.seed)?;
            let t = Instant::now();
            let h = train_recon(&mut recon, &examples, &cfg.loss, &settings, logger(stage, cfg.stages.log_every))?;
            timings.insert("train".into(), t.elapsed().as_secs_f64());
            if cfg.stages.verify_frozen {
                frozen_out.push(frozen.verify(Stage::Autoencoder, &ae.to_checkpoint())?);
                frozen_out.push(frozen.verify(Stage::Ldm, &den.to_checkpoint(&schedule_cfg))?);
                frozen_out.push(frozen.verify(Stage::Tcam, &tcam.to_checkpoint())?);
            }
            (recon.to_checkpoint(), h)
        }
    };

    let config = serde_json::to_value(&resolved).expect("config serialises");
    reg.verify(&config)?;
    let dir = &cfg.checkpoints.dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = cfg.checkpoints.path(stage);
    ck.save(&path)?;
    let manifest = RunManifest {
        stage,
        code_hash: CODE_HASH.to_string(),
        config,
        consumed: reg.keys(),
        loss: history,
        timings,
        checkpoint: path,
        digest: ck.digest().to_string(),
        frozen: frozen_out,
    };
    manifest.save(&cfg.checkpoints.manifest(stage))?;
    Ok(manifest)
}

fn check_compatible(ae: &Autoencoder, tcam: &Tcam) -> Result<()> {
    let (a, t) = (ae.feature_channels().len(), tcam.feature_channels().len());
    if a != t {
        return Err(Error::Config(format!(
            "autoencoder decoder has {a} feature scales but the alignment module has {t}"
        )));
    }
    if ae.cfg.mu != tcam.cfg.mu {
        return Err(Error::Config(format!("tonemapping mu differs: {} vs {}", ae.cfg.mu, tcam.cfg.mu)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inference

/// All four trained modules.
pub struct Pipeline {
    pub autoencoder: Autoencoder,
    pub denoiser: Denoiser,
    pub schedule_config: ScheduleConfig,
    pub schedule: DiffusionSchedule,
    pub tcam: Tcam,
    pub recon: Reconstructor,
}

/// Tonemapped `[1, 3, H, W]` outputs of each stage for one frame.
#[derive(Clone, Debug)]
pub struct StageOutputs {
    /// Linearised reference frame, tonemapped.
    pub baseline: Tensor,
    /// Decoded diffusion prior, cropped to the frame size.
    pub prior: Tensor,
    /// Temporal-only prediction, clamped.
    pub temporal: Tensor,
    /// Full reconstruction, clamped.
    pub recon: Tensor,
}

impl Pipeline {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let autoencoder = Autoencoder::from_checkpoint(&load_checkpoint(cfg, Stage::Autoencoder)?)?;
        let (denoiser, schedule_config) = Denoiser::from_checkpoint(&load_checkpoint(cfg, Stage::Ldm)?)?;
        let tcam = Tcam::from_checkpoint(&load_checkpoint(cfg, Stage::Tcam)?)?;
        let recon = Reconstructor::from_checkpoint(&load_checkpoint(cfg, Stage::Recon)?)?;
        check_compatible(&autoencoder, &tcam)?;
        Ok(Self {
            schedule: schedule_config.build()?,
            autoencoder,
            denoiser,
            schedule_config,
            tcam,
            recon,
        })
    }

    /// Per-frame outputs of every stage.
    pub fn stage_outputs(&self, seq: &FrameSequence, sampler: &SamplerConfig) -> Result<Vec<StageOutputs>> {
        let temporal = temporal_features(&self.tcam, seq)?;
        let clamp = |t: &Tensor| t.map(|v| v.clamp(0.0, 1.0));
        temporal
            .into_iter()
            .enumerate()
            .map(|(k, tf)| {
                let prior = generate_prior(&seq.frames[k], &self.autoencoder, &self.denoiser, &self.schedule, &frame_sampler(sampler, k))?;
                let c = |v: &[Tensor]| v.iter().cloned().map(Var::constant).collect::<Vec<_>>();
                let recon = self
                    .recon
                    .forward_with(&self.recon.params.frozen(), &c(&tf.pyramid.maps), &c(&prior.features.maps), &Var::constant(tf.merged.clone()))?;
                let (h, w) = (seq.frames[k].height(), seq.frames[k].width());
                Ok(StageOutputs {
                    baseline: linear_baseline(&seq.frames[k], seq.peak, self.tcam.cfg.mu)?,
                    prior: clamp(&prior.image.crop_spatial(h, w)?),
                    temporal: clamp(&tf.merged),
                    recon: clamp(recon.value()),
                })
            })
            .collect()
    }

    /// Linear HDR reconstruction of every frame, scaled by the sequence peak.
    pub fn infer_sequence(&self, seq: &FrameSequence, sampler: &SamplerConfig) -> Result<Vec<HdrFrame>> {
        let temporal = temporal_features(&self.tcam, seq)?;
        temporal
            .iter()
            .enumerate()
            .map(|(k, tf)| {
                let prior = generate_prior(&seq.frames[k], &self.autoencoder, &self.denoiser, &self.schedule, &frame_sampler(sampler, k))?;
                self.recon.reconstruct(tf, &prior.features, seq.peak, seq.frames[k].index())
            })
            .collect()
    }
}

/// Mean PSNR of each stage output against the tonemapped ground truth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageScores {
    pub baseline: f64,
    pub prior: f64,
    pub temporal: f64,
    pub recon: f64,
    pub frames: usize,
}

pub fn score_stages(pipeline: &Pipeline, seqs: &[FrameSequence], sampler: &SamplerConfig) -> Result<StageScores> {
    let mut s = StageScores::default();
    for seq in seqs {
        for (k, out) in pipeline.stage_outputs(seq, sampler)?.iter().enumerate() {
            let gt = tonemapped_target(seq, k, pipeline.tcam.cfg.mu)?;
            s.baseline += psnr(&out.baseline, &gt, PSNR_CAP)?;
            s.prior += psnr(&out.prior, &gt, PSNR_CAP)?;
            s.temporal += psnr(&out.temporal, &gt, PSNR_CAP)?;
            s.recon += psnr(&out.recon, &gt, PSNR_CAP)?;
            s.frames += 1;
        }
    }
    let n = s.frames.max(1) as f64;
    s.baseline /= n;
    s.prior /= n;
    s.temporal /= n;
    s.recon /= n;
    Ok(s)
}
