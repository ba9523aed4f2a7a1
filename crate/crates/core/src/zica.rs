//! Zero-initialised cross-attention and the reconstruction head.
//!
//! At every scale the prior feature is mapped to the temporal feature's
//! channel count, both are group-normalised, the temporal feature queries
//! the prior feature, and the attended values pass through a convolution
//! whose weights start at zero before being scaled by a fixed `alpha` and
//! added to the temporal feature. The fused scales are then merged coarse to
//! fine (nearest upsampling, concatenation, convolution) and a final head
//! adds a tonemapped-domain correction to the temporal-only prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{from_tokens, scaled_dot_attention, to_tokens, Partition};
use crate::autoencoder::DecoderFeatures;
use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::datapipe::{nchw_to_hwc, HdrFrame};
use crate::error::{invalid, Error, Result};
use crate::ldm::norm_groups;
use crate::nn::{pointwise, Conv2d, GroupNorm, ParamStore};
use crate::tcam::TemporalFeatures;
use crate::tensor::Tensor;
use crate::tonemap::inverse_tonemap_mu;

pub const CHECKPOINT_KIND: &str = "recon";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    /// Fixed scale applied to every cross-attention branch.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Attention window side at the finest scale.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Initial weight scale of the output head relative to default init.
    #[serde(default = "default_head_init")]
    pub head_init: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Temporal feature channels per scale, coarsest first.
    #[serde(default)]
    pub temporal_channels: Vec<usize>,
    /// Prior feature channels per scale, coarsest first.
    #[serde(default)]
    pub prior_channels: Vec<usize>,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_window() -> usize {
    8
}
fn default_heads() -> usize {
    1
}
fn default_head_init() -> f64 {
    0.01
}
fn default_mu() -> f64 {
    crate::tonemap::DEFAULT_MU
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            window: default_window(),
            heads: default_heads(),
            head_init: default_head_init(),
            mu: default_mu(),
            temporal_channels: Vec::new(),
            prior_channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ZicaBlock {
    pub map: Conv2d,
    norm_r: GroupNorm,
    norm_d: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    /// Zero-initialised output convolution.
    pub theta: Conv2d,
    pub alpha: f64,
    pub partition: Partition,
}

impl ZicaBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        temporal_channels: usize,
        prior_channels: usize,
        alpha: f64,
        partition: Partition,
        rng: &mut R,
    ) -> Self {
        let c = temporal_channels;
        Self {
            map: pointwise(ps, &format!("{name}.map"), prior_channels, c, rng),
            norm_r: GroupNorm::new(ps, &format!("{name}.norm_r"), c, norm_groups(c)),
            norm_d: GroupNorm::new(ps, &format!("{name}.norm_d"), c, norm_groups(c)),
            q: pointwise(ps, &format!("{name}.q"), c, c, rng),
            k: pointwise(ps, &format!("{name}.k"), c, c, rng),
            v: pointwise(ps, &format!("{name}.v"), c, c, rng),
            theta: Conv2d::zeros(ps, &format!("{name}.theta"), c, c, 1),
            alpha,
            partition,
        }
    }

    /// Attended values `[N, C, H, W]` and the attention weights `[B, T, S]`.
    pub fn cross_attention(&self, ps: &ParamStore, f_r: &Var, f_d: &Var) -> Result<(Var, Var)> {
        let (n, c, h, w) = f_r.value().dims4()?;
        let (nd, _, hd, wd) = f_d.value().dims4()?;
        if (nd, hd, wd) != (n, h, w) {
            return Err(invalid!("temporal feature {:?} and prior feature {:?} differ spatially", f_r.shape(), f_d.shape()));
        }
        let d = self.norm_d.forward(ps, &self.map.forward(ps, f_d)?)?;
        let r = self.norm_r.forward(ps, f_r)?;
        let q = to_tokens(&self.q.forward(ps, &r)?, self.partition)?;
        let k = to_tokens(&self.k.forward(ps, &d)?, self.partition)?;
        let v = to_tokens(&self.v.forward(ps, &d)?, self.partition)?;
        let (out, weights) = scaled_dot_attention(&q, &k, &v)?;
        Ok((from_tokens(&out, self.partition, [n, c, h, w])?, weights))
    }

    /// `f_r + alpha * theta(CrossAttention(Q(f_r), K(f_d), V(f_d)))`.
    pub fn forward(&self, ps: &ParamStore, f_r: &Var, f_d: &Var) -> Result<Var> {
        let (att, _) = self.cross_attention(ps, f_r, f_d)?;
        f_r.add(&self.theta.forward(ps, &att)?.scale(self.alpha))
    }
}

/// Fuses one scale with the block's current weights.
pub fn zica_fuse(block: &ZicaBlock, ps: &ParamStore, f_r: &Tensor, f_d: &Tensor) -> Result<Tensor> {
    let frozen = ps.frozen();
    Ok(block
        .forward(&frozen, &Var::constant(f_r.clone()), &Var::constant(f_d.clone()))?
        .value()
        .clone())
}

/// Largest `|sum of a softmax row - 1|` of the block's attention.
pub fn attention_rowsum_check(block: &ZicaBlock, ps: &ParamStore, f_r: &Tensor, f_d: &Tensor) -> Result<f64> {
    let (_, w) = block.cross_attention(&ps.frozen(), &Var::constant(f_r.clone()), &Var::constant(f_d.clone()))?;
    let s = *w.shape().last().unwrap_or(&1);
    Ok(w.data()
        .chunks(s)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max))
}

pub struct Reconstructor {
    pub cfg: ReconConfig,
    pub params: ParamStore,
    pub blocks: Vec<ZicaBlock>,
    stem: Conv2d,
    fuse: Vec<Conv2d>,
    head: Conv2d,
}

impl Reconstructor {
    pub fn new(cfg: ReconConfig, seed: u64) -> Result<Self> {
        let (tc, pc) = (&cfg.temporal_channels, &cfg.prior_channels);
        if tc.is_empty() || tc.len() != pc.len() || tc.contains(&0) || pc.contains(&0) {
            return Err(Error::Config(format!(
                "reconstruction needs matching non-empty scale sets, got {} temporal and {} prior scales",
                tc.len(),
                pc.len()
            )));
        }
        if cfg.heads != 1 {
            return Err(Error::Config(format!("only single-head attention is implemented, got {} heads", cfg.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let last = tc.len() - 1;
        let blocks = (0..tc.len())
            .map(|s| {
                let part = if s == last { Partition::Window(cfg.window) } else { Partition::Global };
                ZicaBlock::new(&mut ps, &format!("zica{s}"), tc[s], pc[s], cfg.alpha, part, &mut rng)
            })
            .collect();
        let stem = Conv2d::new(&mut ps, "recon.stem", tc[0], tc[0], 3, 1, &mut rng);
        let fuse = (1..tc.len())
            .map(|s| Conv2d::new(&mut ps, &format!("recon.fuse{s}"), tc[s - 1] + tc[s], tc[s], 3, 1, &mut rng))
            .collect();
        let head = Conv2d::new(&mut ps, "recon.head", tc[last], 3, 3, 1, &mut rng);
        for id in [head.weight, head.bias.expect("head has a bias")] {
            let scaled = ps.value(id).map(|v| v * cfg.head_init);
            ps.set(id, scaled)?;
        }
        Ok(Self {
            cfg,
            params: ps,
            blocks,
            stem,
            fuse,
            head,
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

    /// Tonemapped prediction (unclamped) for batched features, coarsest first.
    pub fn forward_with(&self, ps: &ParamStore, temporal: &[Var], prior: &[Var], merged: &Var) -> Result<Var> {
        if temporal.len() != self.blocks.len() || prior.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "expected {} feature scales, got {} temporal and {} prior",
                self.blocks.len(),
                temporal.len(),
                prior.len()
            )));
        }
        let mut x: Option<Var> = None;
        for (s, block) in self.blocks.iter().enumerate() {
            if temporal[s].shape()[2..] != prior[s].shape()[2..] {
                return Err(Error::Config(format!(
                    "scale {s}: temporal {:?} vs prior {:?}",
                    temporal[s].shape(),
                    prior[s].shape()
                )));
            }
            let fused = block.forward(ps, &temporal[s], &prior[s])?;
            x = Some(match x {
                None => self.stem.forward(ps, &fused)?.silu(),
                Some(prev) => self.fuse[s - 1]
                    .forward(ps, &Var::cat(&[prev.upsample2x()?, fused], 1)?)?
                    .silu(),
            });
        }
        let x = x.expect("at least one scale");
        merged.add(&self.head.forward(ps, &x)?)
    }

    pub fn forward(&self, temporal: &[Var], prior: &[Var], merged: &Var) -> Result<Var> {
        self.forward_with(&self.params, temporal, prior, merged)
    }

    /// Tonemapped frame `[H, W, 3]` in `[0, 1]` for one reference.
    pub fn reconstruct_tonemapped(&self, temporal: &TemporalFeatures, prior: &DecoderFeatures) -> Result<Tensor> {
        if temporal.pyramid.scales() != prior.scales() {
            return Err(Error::Config(format!(
                "temporal scales {:?} do not match prior scales {:?}",
                temporal.pyramid.scales(),
                prior.scales()
            )));
        }
        let c = |v: &[Tensor]| v.iter().cloned().map(Var::constant).collect::<Vec<_>>();
        let frozen = self.params.frozen();
        let out = self.forward_with(&frozen, &c(&temporal.pyramid.maps), &c(&prior.maps), &Var::constant(temporal.merged.clone()))?;
        nchw_to_hwc(&out.value().map(|v| v.clamp(0.0, 1.0)))
    }

    /// Linear HDR frame scaled back by `peak`.
    pub fn reconstruct(&self, temporal: &TemporalFeatures, prior: &DecoderFeatures, peak: f64, index: usize) -> Result<HdrFrame> {
        let t = self.reconstruct_tonemapped(temporal, prior)?;
        to_linear(&t, peak, self.cfg.mu, index)
    }
}

/// Inverse tonemap of a `[0, 1]` frame, multiplied by `peak`.
pub fn to_linear(tonemapped: &Tensor, peak: f64, mu: f64, index: usize) -> Result<HdrFrame> {
    HdrFrame::new(inverse_tonemap_mu(tonemapped, mu)?.map(|v| v * peak), index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::FeaturePyramid;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn block(alpha: f64, part: Partition) -> (ParamStore, ZicaBlock) {
        let mut ps = ParamStore::new();
        let b = ZicaBlock::new(&mut ps, "z", 4, 6, alpha, part, &mut rng(0));
        (ps, b)
    }

    #[test]
    fn fresh_block_is_identity() {
        let (ps, b) = block(1.0, Partition::Global);
        let f_r = Tensor::randn([1, 4, 4, 4], &mut rng(1));
        let f_d = Tensor::randn([1, 6, 4, 4], &mut rng(2));
        assert_eq!(zica_fuse(&b, &ps, &f_r, &f_d).unwrap(), f_r);
        assert!(ps.value(b.theta.weight).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_alpha_annihilates_branch() {
        let (mut ps, b) = block(0.0, Partition::Window(2));
        ps.set(b.theta.weight, Tensor::randn([4, 4, 1, 1], &mut rng(3))).unwrap();
        let f_r = Tensor::randn([1, 4, 4, 4], &mut rng(4));
        let f_d = Tensor::randn([1, 6, 4, 4], &mut rng(5));
        assert_eq!(zica_fuse(&b, &ps, &f_r, &f_d).unwrap(), f_r);
    }

    #[test]
    fn rows_are_normalised() {
        let (ps, b) = block(1.0, Partition::Global);
        let f_r = Tensor::randn([2, 4, 8, 8], &mut rng(6));
        let f_d = Tensor::randn([2, 6, 8, 8], &mut rng(7));
        assert!(attention_rowsum_check(&b, &ps, &f_r, &f_d).unwrap() < 1e-12);
        assert!(zica_fuse(&b, &ps, &f_r, &Tensor::zeros([2, 6, 4, 8])).is_err());
    }

    fn recon() -> Reconstructor {
        Reconstructor::new(
            ReconConfig {
                window: 4,
                temporal_channels: vec![4, 4, 3],
                prior_channels: vec![5, 3, 2],
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    fn features(seed: u64, chans: &[usize]) -> FeaturePyramid {
        let mut r = rng(seed);
        FeaturePyramid {
            maps: chans
                .iter()
                .enumerate()
                .map(|(i, &c)| Tensor::randn([1, c, 2 << i, 2 << i], &mut r))
                .collect(),
        }
    }

    #[test]
    fn untrained_output_ignores_prior() {
        let r = recon();
        let temporal = TemporalFeatures {
            pyramid: features(2, &[4, 4, 3]),
            merged: Tensor::uniform([1, 3, 8, 8], 0.2, 0.8, &mut rng(3)),
        };
        let prior = features(4, &[5, 3, 2]);
        let a = r.reconstruct_tonemapped(&temporal, &prior).unwrap();
        let b = r.reconstruct_tonemapped(&temporal, &prior.zeros_like()).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let hdr = r.reconstruct(&temporal, &prior, 4.0, 0).unwrap();
        assert!(hdr.pixels().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn mismatched_scales_are_config_errors() {
        let r = recon();
        let temporal = TemporalFeatures {
            pyramid: features(2, &[4, 4, 3]),
            merged: Tensor::zeros([1, 3, 8, 8]),
        };
        let mut prior = features(4, &[5, 3, 2]);
        prior.maps.pop();
        assert!(matches!(r.reconstruct_tonemapped(&temporal, &prior), Err(Error::Config(_))));
    }
}
