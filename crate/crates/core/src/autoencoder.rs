//! Compact variational autoencoder shared by tonemapped HDR frames and LDR frames.
//!
//! The encoder halves the resolution `stages` times (factor `f = 2^stages`)
//! and predicts a Gaussian latent of `latent_channels` channels; inference
//! uses its mean. The decoder mirrors it and exposes intermediate activations:
//! one map at latent resolution and one after every upsampling stage, the
//! last of which is the pre-output stage at image resolution.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::datapipe::{hwc_to_nchw, nchw_to_hwc};
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, Conv2d, ParamStore};
use crate::tensor::Tensor;
use crate::tonemap::DEFAULT_MU;

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    #[serde(default = "default_latent_channels")]
    pub latent_channels: usize,
    /// Channel width at each resolution, finest first; `len - 1` downsampling stages.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_latent_channels() -> usize {
    4
}
fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 32]
}
fn default_kl_weight() -> f64 {
    1e-6
}
fn default_mu() -> f64 {
    DEFAULT_MU
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: default_latent_channels(),
            widths: default_widths(),
            kl_weight: default_kl_weight(),
            mu: default_mu(),
        }
    }
}

impl AutoencoderConfig {
    pub fn factor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    HdrTonemapped,
    LdrCondition,
}

/// Latent of one frame, stored `[1, C_z, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Tensor,
    pub source_kind: SourceKind,
}

/// Multi-scale feature maps `[1, C_s, H_s, W_s]`, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Spatial `(H, W)` of each level, coarsest first.
    pub fn scales(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|m| (m.shape()[2], m.shape()[3])).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            maps: self.maps.iter().map(|m| Tensor::zeros(m.shape().to_vec())).collect(),
        }
    }
}

pub type DecoderFeatures = FeaturePyramid;

pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub params: ParamStore,
    enc_in: Conv2d,
    enc_stages: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_stages: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        if cfg.widths.len() < 2 || cfg.latent_channels == 0 || cfg.widths.contains(&0) {
            return Err(invalid!("autoencoder needs >= 2 non-zero widths and latent channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let w = &cfg.widths;
        let enc_in = Conv2d::new(&mut ps, "enc.in", 3, w[0], 3, 1, &mut rng);
        let enc_stages = (1..w.len())
            .map(|i| {
                (
                    Conv2d::new(&mut ps, &format!("enc.down{i}"), w[i - 1], w[i], 3, 2, &mut rng),
                    Conv2d::new(&mut ps, &format!("enc.conv{i}"), w[i], w[i], 3, 1, &mut rng),
                )
            })
            .collect();
        let top = *w.last().unwrap();
        let enc_out = Conv2d::new(&mut ps, "enc.out", top, 2 * cfg.latent_channels, 1, 1, &mut rng);
        let dec_in = Conv2d::new(&mut ps, "dec.in", cfg.latent_channels, top, 3, 1, &mut rng);
        let dec_mid = Conv2d::new(&mut ps, "dec.mid", top, top, 3, 1, &mut rng);
        let dec_stages = (1..w.len())
            .rev()
            .map(|i| Conv2d::new(&mut ps, &format!("dec.up{i}"), w[i], w[i - 1], 3, 1, &mut rng))
            .collect();
        let dec_out = Conv2d::new(&mut ps, "dec.out", w[0], 3, 3, 1, &mut rng);
        Ok(Self {
            cfg,
            params: ps,
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_mid,
            dec_stages,
            dec_out,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!("expected an {CHECKPOINT_KIND} checkpoint, got {}", ck.manifest.kind)));
        }
        let cfg: AutoencoderConfig = ck.meta()?;
        let mut ae = Self::new(cfg, 0)?;
        ck.restore(&mut ae.params)?;
        Ok(ae)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.cfg).expect("config serialises"),
            &self.params,
        )
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor()
    }

    /// Mean and log-variance of the latent posterior for `[N, 3, H, W]` input
    /// whose spatial size is a multiple of the downsampling factor.
    pub fn encode_var(&self, x: &Var) -> Result<(Var, Var)> {
        let ps = &self.params;
        let mut h = self.enc_in.forward(ps, x)?.silu();
        for (down, conv) in &self.enc_stages {
            h = down.forward(ps, &h)?.silu();
            h = conv.forward(ps, &h)?.silu();
        }
        let stats = self.enc_out.forward(ps, &h)?;
        let c = self.cfg.latent_channels;
        Ok((stats.narrow(1, 0, c)?, stats.narrow(1, c, c)?))
    }

    /// Reconstruction `[N, 3, H, W]` in `(0, 1)` plus the decoder taps.
    pub fn decode_var(&self, z: &Var) -> Result<(Var, Vec<Var>)> {
        let ps = &self.params;
        let mut h = self.dec_in.forward(ps, z)?.silu();
        h = self.dec_mid.forward(ps, &h)?.silu();
        let mut taps = vec![h.clone()];
        for stage in &self.dec_stages {
            h = stage.forward(ps, &h.upsample2x()?)?.silu();
            taps.push(h.clone());
        }
        let img = self.dec_out.forward(ps, &h)?.sigmoid();
        Ok((img, taps))
    }

    /// Deterministic latent (posterior mean) of an `[H, W, 3]` image in `[0, 1]`.
    ///
    /// Inputs are edge-padded up to a multiple of the downsampling factor.
    pub fn encode(&self, image: &Tensor, source_kind: SourceKind) -> Result<LatentCode> {
        if !image.is_finite() {
            return Err(invalid!("encode input contains non-finite pixels"));
        }
        let x = pad_to_multiple(&hwc_to_nchw(image), self.factor())?;
        let (mean, _) = self.encode_var(&Var::constant(x))?;
        Ok(LatentCode {
            values: mean.value().clone(),
            source_kind,
        })
    }

    /// Batched posterior means for `[N, 3, H, W]` input.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let x = pad_to_multiple(x, self.factor())?;
        Ok(self.encode_var(&Var::constant(x))?.0.value().clone())
    }

    /// Image `[H, W, 3]` and decoder features for one latent.
    pub fn decode(&self, latent: &LatentCode) -> Result<(Tensor, DecoderFeatures)> {
        let (img, feats) = self.decode_tensor(&latent.values)?;
        Ok((nchw_to_hwc(&img)?, feats))
    }

    /// Like [`Autoencoder::decode`] but keeps the `[1, 3, H, W]` layout.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<(Tensor, DecoderFeatures)> {
        match z.shape() {
            [1, c, _, _] if *c == self.cfg.latent_channels => {}
            s => {
                return Err(invalid!(
                    "latent shape {:?} does not match the trained configuration ({} channels)",
                    s,
                    self.cfg.latent_channels
                ))
            }
        }
        let (img, taps) = self.decode_var(&Var::constant(z.clone()))?;
        Ok((
            img.value().clone(),
            FeaturePyramid {
                maps: taps.into_iter().map(|t| t.value().clone()).collect(),
            },
        ))
    }

    /// Channel count of each decoder tap, coarsest first.
    pub fn feature_channels(&self) -> Vec<usize> {
        let mut w = self.cfg.widths.clone();
        w.reverse();
        w
    }

    /// Pixel MSE plus weighted KL for a batch, using explicit reparameterisation noise.
    pub fn loss(&self, x: &Tensor, noise: &Tensor) -> Result<Var> {
        let (mean, logvar) = self.encode_var(&Var::constant(x.clone()))?;
        let std = logvar.scale(0.5).exp();
        let z = mean.add(&std.mul(&Var::constant(noise.clone()))?)?;
        let (recon, _) = self.decode_var(&z)?;
        let mse = recon.sub(&Var::constant(x.clone()))?.square().mean_all();
        let kl = mean
            .square()
            .add(&logvar.exp())?
            .sub(&logvar)?
            .add_scalar(-1.0)
            .mean_all()
            .scale(0.5);
        mse.add(&kl.scale(self.cfg.kl_weight))
    }
}

/// Edge-replicates `[N, C, H, W]` up to multiples of `f`.
pub fn pad_to_multiple(x: &Tensor, f: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (hp, wp) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    if (hp, wp) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    Ok(Tensor::from_fn([n, c, hp, wp], |i| {
        let plane = i / (hp * wp);
        let (y, xx) = ((i % (hp * wp)) / wp, i % wp);
        src[plane * h * w + y.min(h - 1) * w + xx.min(w - 1)]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// Loss of every optimisation step.
    pub steps: Vec<f64>,
    /// Mean step loss per pass over the data.
    pub epochs: Vec<f64>,
}

impl LossHistory {
    pub fn record(&mut self, loss: f64, steps_per_epoch: usize) {
        self.steps.push(loss);
        if self.steps.len() % steps_per_epoch.max(1) == 0 {
            let tail = &self.steps[self.steps.len() - steps_per_epoch.max(1)..];
            self.epochs.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }

    /// Mean of the last `window` step losses.
    pub fn smoothed_tail(&self, window: usize) -> f64 {
        let w = window.min(self.steps.len()).max(1);
        self.steps[self.steps.len().saturating_sub(w)..].iter().sum::<f64>() / w as f64
    }

    /// Mean of the first `window` step losses.
    pub fn smoothed_head(&self, window: usize) -> f64 {
        let w = window.min(self.steps.len()).max(1);
        self.steps[..w].iter().sum::<f64>() / w as f64
    }
}

pub(crate) fn ensure_finite(loss: f64, what: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} loss became {loss} at step {step}")))
    }
}

/// Fits the autoencoder to `[1, 3, H, W]` images in `[0, 1]`.
pub fn train_autoencoder(
    ae: &mut Autoencoder,
    images: &[Tensor],
    settings: &TrainSettings,
) -> Result<LossHistory> {
    if images.is_empty() || settings.batch_size == 0 {
        return Err(invalid!("autoencoder training needs images and a positive batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = Adam::new(&ae.params, AdamConfig::with_lr(settings.lr));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let steps_per_epoch = images.len().div_ceil(settings.batch_size);
    let mut history = LossHistory::default();
    let mut cursor = order.len();
    for step in 0..settings.steps {
        let mut batch = Vec::with_capacity(settings.batch_size);
        while batch.len() < settings.batch_size.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let x = Tensor::stack_batch(&batch)?;
        let (n, _, h, w) = x.dims4()?;
        let f = ae.factor();
        let noise = Tensor::randn([n, ae.cfg.latent_channels, h / f, w / f], &mut rng);
        let loss = ae.loss(&x, &noise)?;
        let lv = loss.data()[0];
        ensure_finite(lv, "autoencoder", step)?;
        history.record(lv, steps_per_epoch);
        let grads = loss.backward();
        opt.step(&mut ae.params, &grads)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Autoencoder {
        Autoencoder::new(
            AutoencoderConfig {
                widths: vec![4, 6, 6, 8],
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn shape_contracts() {
        let ae = small();
        let img = Tensor::full([64, 64, 3], 0.5);
        let z = ae.encode(&img, SourceKind::HdrTonemapped).unwrap();
        assert_eq!(z.values.shape(), [1, 4, 8, 8]);
        let (out, feats) = ae.decode(&z).unwrap();
        assert_eq!(out.shape(), [64, 64, 3]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(feats.scales(), [(8, 8), (16, 16), (32, 32), (64, 64)]);
        assert_eq!(feats.maps.len(), ae.cfg.widths.len());
        for (m, c) in feats.maps.iter().zip(ae.feature_channels()) {
            assert_eq!(m.shape()[1], c);
        }
    }

    #[test]
    fn odd_sizes_are_padded() {
        let ae = small();
        let z = ae.encode(&Tensor::full([20, 13, 3], 0.2), SourceKind::LdrCondition).unwrap();
        assert_eq!(z.values.shape(), [1, 4, 3, 2]);
    }

    #[test]
    fn encode_is_deterministic_and_rejects_nan() {
        let ae = small();
        let img = Tensor::from_fn([16, 16, 3], |i| (i % 7) as f64 / 7.0);
        let a = ae.encode(&img, SourceKind::HdrTonemapped).unwrap();
        let b = ae.encode(&img, SourceKind::HdrTonemapped).unwrap();
        assert_eq!(a, b);
        let mut bad = img.clone();
        bad.data_mut()[3] = f64::NAN;
        assert!(ae.encode(&bad, SourceKind::HdrTonemapped).is_err());
    }

    #[test]
    fn decode_rejects_wrong_channels() {
        let ae = small();
        let z = LatentCode {
            values: Tensor::zeros([1, 3, 2, 2]),
            source_kind: SourceKind::HdrTonemapped,
        };
        assert!(ae.decode(&z).is_err());
    }
}
