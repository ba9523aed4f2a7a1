//! Composite reconstruction loss on tonemapped frames.
//!
//! `l1 * L1 + temporal * L_temp + perception * L_perception`, where `L_temp`
//! compares consecutive-frame differences of prediction and ground truth and
//! `L_perception` compares activations of a small frozen random conv net.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ParamStore};

/// Seed of the frozen feature network; changing it changes every loss value.
pub const PERCEPTION_SEED: u64 = 0x5EED_F00D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "one")]
    pub l1: f64,
    #[serde(default = "tenth")]
    pub temporal: f64,
    #[serde(default = "tenth")]
    pub perception: f64,
}

fn one() -> f64 {
    1.0
}
fn tenth() -> f64 {
    0.1
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            temporal: 0.1,
            perception: 0.1,
        }
    }
}

/// Two-layer ReLU conv net with fixed random weights.
pub struct PerceptionNet {
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Default for PerceptionNet {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptionNet {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTION_SEED);
        let mut ps = ParamStore::new();
        let conv1 = Conv2d::new(&mut ps, "conv1", 3, 8, 3, 1, &mut rng);
        let conv2 = Conv2d::new(&mut ps, "conv2", 8, 16, 3, 2, &mut rng);
        Self {
            params: ps.frozen(),
            conv1,
            conv2,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Activations after each ReLU for `[N, 3, H, W]` input.
    pub fn features(&self, x: &Var) -> Result<Vec<Var>> {
        let a = self.conv1.forward(&self.params, x)?.relu();
        let b = self.conv2.forward(&self.params, &a)?.relu();
        Ok(vec![a, b])
    }
}

/// Individual terms and the weighted total.
#[derive(Clone)]
pub struct LossTerms {
    pub total: Var,
    pub l1: f64,
    pub temporal: f64,
    pub perception: f64,
}

/// Loss for predictions `[B, T, 3, H, W]` of `T` consecutive frames against
/// ground truth of the same shape, both tonemapped to `[0, 1]`.
///
/// With `T < 2` the temporal term is skipped.
pub fn tcam_loss(pred: &Var, gt: &Var, weights: &LossWeights, net: &PerceptionNet) -> Result<LossTerms> {
    let [b, t, c, h, w] = *pred.shape() else {
        return Err(invalid!("loss expects [B, T, 3, H, W], got {:?}", pred.shape()));
    };
    if gt.shape() != pred.shape() {
        return Err(invalid!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape()));
    }
    let l1 = pred.sub(gt)?.abs().mean_all();
    let mut total = l1.scale(weights.l1);
    let temporal = if t >= 2 {
        let diff = |x: &Var| -> Result<Var> { x.narrow(1, 1, t - 1)?.sub(&x.narrow(1, 0, t - 1)?) };
        let lt = diff(pred)?.sub(&diff(gt)?)?.abs().mean_all();
        total = total.add(&lt.scale(weights.temporal))?;
        lt.data()[0]
    } else {
        log::info!("temporal loss term disabled for a single-frame prediction");
        0.0
    };
    let flat = |x: &Var| x.reshape([b * t, c, h, w]);
    let mut perception = Var::constant(crate::tensor::Tensor::scalar(0.0));
    for (fp, fg) in net.features(&flat(pred)?)?.iter().zip(net.features(&flat(gt)?)?) {
        perception = perception.add(&fp.sub(&fg)?.abs().mean_all())?;
    }
    total = total.add(&perception.scale(weights.perception))?;
    Ok(LossTerms {
        l1: l1.data()[0],
        temporal,
        perception: perception.data()[0],
        total,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn rand_frames(seed: u64, shape: [usize; 5]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape, 0.0, 1.0, &mut rng)
    }

    #[test]
    fn identity_is_zero() {
        let net = PerceptionNet::new();
        let g = Var::constant(rand_frames(0, [1, 2, 3, 6, 6]));
        let l = tcam_loss(&g, &g, &LossWeights::default(), &net).unwrap();
        assert_eq!(l.total.data()[0], 0.0);
    }

    #[test]
    fn constant_offset_cancels_temporal_term() {
        let net = PerceptionNet::new();
        let gt = rand_frames(1, [2, 3, 3, 5, 5]);
        let pred = gt.map(|v| v + 0.05);
        let l = tcam_loss(&Var::constant(pred), &Var::constant(gt), &LossWeights::default(), &net).unwrap();
        assert!(l.temporal.abs() < 1e-15);
        assert!((l.l1 - 0.05).abs() < 1e-12);
    }

    #[test]
    fn single_frame_skips_temporal() {
        let net = PerceptionNet::new();
        let gt = rand_frames(2, [1, 1, 3, 4, 4]);
        let pred = rand_frames(3, [1, 1, 3, 4, 4]);
        let l = tcam_loss(&Var::constant(pred), &Var::constant(gt), &LossWeights::default(), &net).unwrap();
        assert_eq!(l.temporal, 0.0);
        assert!(l.total.data()[0] > 0.0);
    }

    #[test]
    fn frozen_net_has_no_trainable_leaves() {
        let net = PerceptionNet::new();
        assert!(net.params().ids().all(|id| !net.params().get(id).requires_grad()));
    }
}
