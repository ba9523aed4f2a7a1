//! Exposure-conditioned latent denoiser.
//!
//! A two-scale U-Net predicts the noise in an HDR latent. The LDR condition
//! latent is concatenated with the noisy latent at the stem; the sum of the
//! timestep and exposure embeddings drives an MLP whose output is added to
//! every residual block. The bottom scale uses window-then-grid attention.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::WindowGridBlock;
use crate::autoencoder::{ensure_finite, Autoencoder, DecoderFeatures, LatentCode, LossHistory, SourceKind, TrainSettings};
use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::datapipe::NetworkInput;
use crate::diffusion::{q_sample, sample, DiffusionSchedule, SamplerConfig, ScheduleConfig};
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, Conv2d, GroupNorm, Linear, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "ldm";

/// Sinusoidal exposure embedding of length `d`:
/// `E[2n] = sin(e / 10000^(2n/d))`, `E[2n+1] = cos(e / 10000^((2n+1)/d))`.
pub fn exposure_embedding(e: f64, d: usize) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(invalid!("embedding dimension must be even and >= 2, got {d}"));
    }
    Ok((0..d)
        .map(|i| {
            let arg = e / 10000f64.powf(i as f64 / d as f64);
            if i % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        })
        .collect())
}

/// Standard transformer timestep embedding: sines in the first half, cosines
/// in the second, sharing frequencies `10000^(-2i/d)`.
pub fn timestep_embedding(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let freq = |i: usize| 10000f64.powf(-((2 * i) as f64) / d as f64);
    (0..half)
        .map(|i| (t * freq(i)).sin())
        .chain((0..half).map(|i| (t * freq(i)).cos()))
        .collect()
}

/// How a relative exposure multiplier enters the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureEncoding {
    Log2,
    Raw,
}

impl ExposureEncoding {
    pub fn apply(self, exposure: f64) -> f64 {
        match self {
            ExposureEncoding::Log2 => exposure.log2(),
            ExposureEncoding::Raw => exposure,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmConfig {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    #[serde(default = "default_base_width")]
    pub base_width: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Side of the attention windows and grids at the bottom scale.
    #[serde(default = "default_attention_block")]
    pub attention_block: usize,
    #[serde(default = "default_exposure_encoding")]
    pub exposure_encoding: ExposureEncoding,
    /// Multiplier taking autoencoder latents to roughly unit variance.
    #[serde(default = "default_latent_scale")]
    pub latent_scale: f64,
}

fn default_latent_channels() -> usize {
    4
}
fn default_base_width() -> usize {
    64
}
fn default_embed_dim() -> usize {
    256
}
fn default_attention_block() -> usize {
    2
}
fn default_exposure_encoding() -> ExposureEncoding {
    ExposureEncoding::Log2
}
fn default_latent_scale() -> f64 {
    1.0
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            latent_channels: default_latent_channels(),
            base_width: default_base_width(),
            embed_dim: default_embed_dim(),
            attention_block: default_attention_block(),
            exposure_encoding: default_exposure_encoding(),
            latent_scale: default_latent_scale(),
        }
    }
}

/// Largest group count up to 8 that divides `channels`.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, emb_dim: usize, rng: &mut R) -> Self {
        Self {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, norm_groups(cin)),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, rng),
            emb: Linear::new(ps, &format!("{name}.emb"), emb_dim, cout, rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, norm_groups(cout)),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, rng)),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Var, emb: &Var) -> Result<Var> {
        let h = self.conv1.forward(ps, &self.norm1.forward(ps, x)?.silu())?;
        let e = self.emb.forward(ps, emb)?;
        let (n, c) = (e.shape()[0], e.shape()[1]);
        let h = h.add(&e.reshape([n, c, 1, 1])?)?;
        let h = self.conv2.forward(ps, &self.norm2.forward(ps, &h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(ps, x)?,
            None => x.clone(),
        };
        skip.add(&h)
    }
}

/// One denoiser evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserInput {
    /// `[1, C_z, h, w]`.
    pub noisy_latent: Tensor,
    /// `[1, C_z, h, w]`.
    pub condition_latent: Tensor,
    pub timestep: usize,
    pub exposure_embedding: Vec<f64>,
}

pub struct Denoiser {
    pub cfg: LdmConfig,
    pub params: ParamStore,
    emb1: Linear,
    emb2: Linear,
    stem: Conv2d,
    res_top: ResBlock,
    down: Conv2d,
    res_bottom: ResBlock,
    attn: WindowGridBlock,
    res_mid: ResBlock,
    res_up: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(cfg: LdmConfig, seed: u64) -> Result<Self> {
        if cfg.base_width == 0 || cfg.latent_channels == 0 || cfg.attention_block == 0 {
            return Err(invalid!("denoiser widths and attention block must be positive"));
        }
        exposure_embedding(0.0, cfg.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let (w, cz, d) = (cfg.base_width, cfg.latent_channels, cfg.embed_dim);
        let hidden = 4 * w;
        let emb1 = Linear::new(&mut ps, "emb.fc1", d, hidden, &mut rng);
        let emb2 = Linear::new(&mut ps, "emb.fc2", hidden, hidden, &mut rng);
        let stem = Conv2d::new(&mut ps, "stem", 2 * cz, w, 3, 1, &mut rng);
        let res_top = ResBlock::new(&mut ps, "down.0", w, w, hidden, &mut rng);
        let down = Conv2d::new(&mut ps, "down.pool", w, 2 * w, 3, 2, &mut rng);
        let res_bottom = ResBlock::new(&mut ps, "down.1", 2 * w, 2 * w, hidden, &mut rng);
        let attn = WindowGridBlock::new(&mut ps, "mid.attn", 2 * w, norm_groups(2 * w), cfg.attention_block, &mut rng);
        let res_mid = ResBlock::new(&mut ps, "mid.res", 2 * w, 2 * w, hidden, &mut rng);
        let res_up = ResBlock::new(&mut ps, "up.0", 3 * w, w, hidden, &mut rng);
        let out_norm = GroupNorm::new(&mut ps, "out.norm", w, norm_groups(w));
        let out_conv = Conv2d::new(&mut ps, "out.conv", w, cz, 3, 1, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            emb1,
            emb2,
            stem,
            res_top,
            down,
            res_bottom,
            attn,
            res_mid,
            res_up,
            out_norm,
            out_conv,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ScheduleConfig)> {
        if ck.manifest.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!("expected an {CHECKPOINT_KIND} checkpoint, got {}", ck.manifest.kind)));
        }
        let meta: LdmMeta = ck.meta()?;
        let mut den = Self::new(meta.model, 0)?;
        ck.restore(&mut den.params)?;
        Ok((den, meta.schedule))
    }

    pub fn to_checkpoint(&self, schedule: &ScheduleConfig) -> Checkpoint {
        let meta = LdmMeta {
            model: self.cfg.clone(),
            schedule: schedule.clone(),
            conditioning: "channel_concat".into(),
        };
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialises"), &self.params)
    }

    /// Exposure embedding of a relative exposure under the configured encoding.
    pub fn embed_exposure(&self, exposure: f64) -> Result<Vec<f64>> {
        exposure_embedding(self.cfg.exposure_encoding.apply(exposure), self.cfg.embed_dim)
    }

    /// Batched noise prediction over `[N, C_z, h, w]` latents.
    ///
    /// `exposure_emb` is `[N, d]`; `None` runs the network without the
    /// exposure pathway.
    pub fn forward_with(
        &self,
        ps: &ParamStore,
        z_t: &Var,
        cond: &Var,
        timesteps: &[usize],
        exposure_emb: Option<&Tensor>,
    ) -> Result<Var> {
        let [n, c, h, w] = *z_t.shape() else {
            return Err(invalid!("noisy latent must be [N, C, h, w], got {:?}", z_t.shape()));
        };
        if cond.shape() != z_t.shape() {
            return Err(invalid!("condition latent {:?} does not match noisy latent {:?}", cond.shape(), z_t.shape()));
        }
        if c != self.cfg.latent_channels || timesteps.len() != n {
            return Err(invalid!("expected {} latent channels and {n} timesteps", self.cfg.latent_channels));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid!("latent size {h}x{w} must be even"));
        }
        let d = self.cfg.embed_dim;
        let temb: Vec<f64> = timesteps.iter().flat_map(|&t| timestep_embedding(t as f64, d)).collect();
        let mut emb = Var::constant(Tensor::new([n, d], temb)?);
        if let Some(e) = exposure_emb {
            if e.shape() != [n, d] {
                return Err(invalid!("exposure embedding {:?}, expected [{n}, {d}]", e.shape()));
            }
            emb = emb.add(&Var::constant(e.clone()))?;
        }
        let emb = self.emb2.forward(ps, &self.emb1.forward(ps, &emb)?.silu())?.silu();

        let x = self.stem.forward(ps, &Var::cat(&[z_t.clone(), cond.clone()], 1)?)?;
        let top = self.res_top.forward(ps, &x, &emb)?;
        let b = self.down.forward(ps, &top)?;
        let b = self.res_bottom.forward(ps, &b, &emb)?;
        let b = self.attn.forward(ps, &b)?;
        let b = self.res_mid.forward(ps, &b, &emb)?;
        let u = Var::cat(&[b.upsample2x()?, top], 1)?;
        let u = self.res_up.forward(ps, &u, &emb)?;
        self.out_conv.forward(ps, &self.out_norm.forward(ps, &u)?.silu())
    }

    pub fn forward(&self, z_t: &Var, cond: &Var, timesteps: &[usize], exposure_emb: Option<&Tensor>) -> Result<Var> {
        self.forward_with(&self.params, z_t, cond, timesteps, exposure_emb)
    }

    /// Predicted noise for one input.
    pub fn denoise(&self, input: &DenoiserInput) -> Result<Tensor> {
        if input.noisy_latent.shape()[2..] != input.condition_latent.shape()[2..] {
            return Err(invalid!("noisy and condition latents differ in spatial size"));
        }
        let e = Tensor::new([1, input.exposure_embedding.len()], input.exposure_embedding.clone())?;
        let frozen = self.params.frozen();
        let out = self.forward_with(
            &frozen,
            &Var::constant(input.noisy_latent.clone()),
            &Var::constant(input.condition_latent.clone()),
            &[input.timestep],
            Some(&e),
        )?;
        Ok(out.value().clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmMeta {
    pub model: LdmConfig,
    pub schedule: ScheduleConfig,
    pub conditioning: String,
}

/// One training pair in scaled latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmExample {
    /// Tonemapped-HDR latent `[1, C_z, h, w]`.
    pub target: Tensor,
    /// LDR condition latent `[1, C_z, h, w]`.
    pub condition: Tensor,
    pub exposure: f64,
}

/// A batch noised to random timesteps, with the noise that produced it.
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub z_t: Tensor,
    pub condition: Tensor,
    pub timesteps: Vec<usize>,
    pub exposures: Vec<f64>,
    pub noise: Tensor,
}

/// Draws `t ~ U{1..T}` and standard Gaussian noise per example.
pub fn noisy_batch<R: Rng + ?Sized>(batch: &[LdmExample], schedule: &DiffusionSchedule, rng: &mut R) -> Result<NoisyBatch> {
    if batch.is_empty() {
        return Err(invalid!("empty diffusion batch"));
    }
    let mut z = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len());
    let mut timesteps = Vec::with_capacity(batch.len());
    for ex in batch {
        let t = rng.random_range(1..=schedule.num_steps());
        let eps = Tensor::randn(ex.target.shape().to_vec(), rng);
        let s = q_sample(&ex.target, t, schedule, &eps)?;
        z.push(s.latent);
        noise.push(s.noise);
        timesteps.push(t);
    }
    let conds: Vec<Tensor> = batch.iter().map(|e| e.condition.clone()).collect();
    Ok(NoisyBatch {
        z_t: Tensor::stack_batch(&z)?,
        condition: Tensor::stack_batch(&conds)?,
        timesteps,
        exposures: batch.iter().map(|e| e.exposure).collect(),
        noise: Tensor::stack_batch(&noise)?,
    })
}

/// Mean squared error between the batch noise and `predict(batch)`.
pub fn ldm_loss_with(nb: &NoisyBatch, predict: impl FnOnce(&NoisyBatch) -> Result<Var>) -> Result<Var> {
    let eps_hat = predict(nb)?;
    let loss = eps_hat.sub(&Var::constant(nb.noise.clone()))?.square().mean_all();
    ensure_finite(loss.data()[0], "diffusion", 0)?;
    Ok(loss)
}

/// Noise-prediction loss of the denoiser on a freshly noised batch.
pub fn ldm_loss<R: Rng + ?Sized>(den: &Denoiser, batch: &[LdmExample], schedule: &DiffusionSchedule, rng: &mut R) -> Result<Var> {
    let nb = noisy_batch(batch, schedule, rng)?;
    ldm_loss_with(&nb, |nb| {
        let emb = nb
            .exposures
            .iter()
            .map(|&e| den.embed_exposure(e))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let emb = Tensor::new([nb.exposures.len(), den.cfg.embed_dim], emb)?;
        den.forward(&Var::constant(nb.z_t.clone()), &Var::constant(nb.condition.clone()), &nb.timesteps, Some(&emb))
    })
}

/// Adam on the denoiser over random mini-batches of `examples`.
pub fn train_ldm(
    den: &mut Denoiser,
    examples: &[LdmExample],
    schedule: &DiffusionSchedule,
    settings: &TrainSettings,
    mut on_step: impl FnMut(usize, &LossHistory) -> bool,
) -> Result<LossHistory> {
    if examples.is_empty() || settings.batch_size == 0 {
        return Err(invalid!("diffusion training needs examples and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Adam::new(&den.params, AdamConfig::with_lr(settings.lr));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let bs = settings.batch_size.min(examples.len());
    let steps_per_epoch = examples.len().div_ceil(bs);
    let mut history = LossHistory::default();
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[order[cursor]].clone());
            cursor += 1;
        }
        let loss = ldm_loss(den, &batch, schedule, &mut rng)?;
        let lv = loss.data()[0];
        ensure_finite(lv, "diffusion", step)?;
        history.record(lv, steps_per_epoch);
        opt.step(&mut den.params, &loss.backward())?;
        if !on_step(step, &history) {
            break;
        }
    }
    Ok(history)
}

/// Multiplier giving the latents unit standard deviation.
pub fn latent_scale_for(latents: &[Tensor]) -> f64 {
    let all: Vec<f64> = latents.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var > 1e-12 {
        1.0 / var.sqrt()
    } else {
        1.0
    }
}

/// Sampled HDR latent for one LDR frame, decoded.
#[derive(Clone, Debug)]
pub struct Prior {
    /// Unscaled latent.
    pub latent: LatentCode,
    /// Decoded tonemapped image `[1, 3, H, W]` (padded size).
    pub image: Tensor,
    pub features: DecoderFeatures,
}

/// Samples an HDR latent for the LDR frame and decodes it.
pub fn generate_prior(
    condition_frame: &NetworkInput,
    ae: &Autoencoder,
    den: &Denoiser,
    schedule: &DiffusionSchedule,
    sampler: &SamplerConfig,
) -> Result<Prior> {
    let cond = ae.encode(&condition_frame.ldr(), SourceKind::LdrCondition)?;
    let scale = den.cfg.latent_scale;
    let cond_scaled = cond.values.map(|v| v * scale);
    let emb = den.embed_exposure(condition_frame.exposure())?;
    let z = sample(
        |z_t: &Tensor, c: &Tensor, t| {
            den.denoise(&DenoiserInput {
                noisy_latent: z_t.clone(),
                condition_latent: c.clone(),
                timestep: t,
                exposure_embedding: emb.clone(),
            })
        },
        &cond_scaled,
        cond_scaled.shape(),
        schedule,
        sampler,
    )?;
    let latent = LatentCode {
        values: z.map(|v| v / scale),
        source_kind: SourceKind::HdrTonemapped,
    };
    let (image, features) = ae.decode_tensor(&latent.values)?;
    Ok(Prior { latent, image, features })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Denoiser {
        Denoiser::new(
            LdmConfig {
                base_width: 4,
                embed_dim: 8,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn embedding_edge_cases() {
        let e = exposure_embedding(0.0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(exposure_embedding(1.0, 4).unwrap()[0], 1f64.sin());
        assert!(exposure_embedding(1.0, 5).is_err());
        assert!(exposure_embedding(1.0, 0).is_err());
    }

    #[test]
    fn log2_encoding_maps_pattern_to_stops() {
        assert_eq!(ExposureEncoding::Log2.apply(8.0), 3.0);
        assert_eq!(ExposureEncoding::Raw.apply(8.0), 8.0);
    }

    #[test]
    fn output_shape_and_exposure_sensitivity() {
        let den = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for side in [8, 16] {
            let input = DenoiserInput {
                noisy_latent: Tensor::randn([1, 4, side, side], &mut rng),
                condition_latent: Tensor::randn([1, 4, side, side], &mut rng),
                timestep: 500,
                exposure_embedding: den.embed_exposure(1.0).unwrap(),
            };
            let a = den.denoise(&input).unwrap();
            assert_eq!(a.shape(), [1, 4, side, side]);
            let b = den
                .denoise(&DenoiserInput {
                    exposure_embedding: den.embed_exposure(8.0).unwrap(),
                    ..input
                })
                .unwrap();
            assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        }
    }

    #[test]
    fn zero_exposure_embedding_equals_no_pathway() {
        let den = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Var::constant(Tensor::randn([2, 4, 4, 4], &mut rng));
        let c = Var::constant(Tensor::randn([2, 4, 4, 4], &mut rng));
        let a = den.forward(&z, &c, &[3, 700], Some(&Tensor::zeros([2, 8]))).unwrap();
        let b = den.forward(&z, &c, &[3, 700], None).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn rejects_spatial_mismatch() {
        let den = tiny();
        let input = DenoiserInput {
            noisy_latent: Tensor::zeros([1, 4, 8, 8]),
            condition_latent: Tensor::zeros([1, 4, 4, 4]),
            timestep: 1,
            exposure_embedding: vec![0.0; 8],
        };
        assert!(den.denoise(&input).is_err());
    }

    #[test]
    fn loss_limits() {
        let sched = DiffusionSchedule::new(100, 1e-4, 0.02, crate::diffusion::ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<LdmExample> = (0..4)
            .map(|i| LdmExample {
                target: Tensor::randn([1, 4, 4, 4], &mut rng),
                condition: Tensor::zeros([1, 4, 4, 4]),
                exposure: [1.0, 8.0][i % 2],
            })
            .collect();
        let nb = noisy_batch(&batch, &sched, &mut rng).unwrap();
        let exact = ldm_loss_with(&nb, |nb| Ok(Var::constant(nb.noise.clone()))).unwrap();
        assert_eq!(exact.data()[0], 0.0);
        let den = tiny();
        assert!(ldm_loss(&den, &batch, &sched, &mut rng).unwrap().data()[0] >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let den = tiny();
        let sched = ScheduleConfig::default();
        let ck = den.to_checkpoint(&sched);
        let (back, s) = Denoiser::from_checkpoint(&ck).unwrap();
        assert_eq!(s, sched);
        assert_eq!(back.params.digest(), den.params.digest());
    }
}
