//! Block-local single-head attention over `[N, C, H, W]` feature maps.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::nn::{pointwise, Conv2d, GroupNorm, ParamStore};

/// How spatial positions are grouped into attention token sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    /// Non-overlapping `p x p` windows.
    Window(usize),
    /// A `p x p` grid of positions strided across the whole map.
    Grid(usize),
    /// All positions attend to each other.
    Global,
}

impl Partition {
    fn side(self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = match self {
            Partition::Window(p) | Partition::Grid(p) => p,
            Partition::Global => return Ok((h, w)),
        };
        let (ph, pw) = (p.min(h), p.min(w));
        if ph == 0 || h % ph != 0 || w % pw != 0 {
            return Err(invalid!("{h}x{w} map does not tile into {p}x{p} attention blocks"));
        }
        Ok((ph, pw))
    }
}

/// `[N, C, H, W] -> [N * groups, tokens, C]`.
pub fn to_tokens(x: &Var, part: Partition) -> Result<Var> {
    let [n, c, h, w] = *x.shape() else {
        return Err(invalid!("attention expects [N, C, H, W], got {:?}", x.shape()));
    };
    let (ph, pw) = part.side(h, w)?;
    match part {
        Partition::Global => x.reshape([n, c, h * w])?.permute(&[0, 2, 1]),
        Partition::Window(_) => x
            .reshape([n, c, h / ph, ph, w / pw, pw])?
            .permute(&[0, 2, 4, 3, 5, 1])?
            .reshape([n * (h / ph) * (w / pw), ph * pw, c]),
        Partition::Grid(_) => x
            .reshape([n, c, ph, h / ph, pw, w / pw])?
            .permute(&[0, 3, 5, 2, 4, 1])?
            .reshape([n * (h / ph) * (w / pw), ph * pw, c]),
    }
}

/// Inverse of [`to_tokens`] for a map of shape `[n, c, h, w]`.
pub fn from_tokens(t: &Var, part: Partition, [n, c, h, w]: [usize; 4]) -> Result<Var> {
    let (ph, pw) = part.side(h, w)?;
    match part {
        Partition::Global => t.permute(&[0, 2, 1])?.reshape([n, c, h, w]),
        Partition::Window(_) => t
            .reshape([n, h / ph, w / pw, ph, pw, c])?
            .permute(&[0, 5, 1, 3, 2, 4])?
            .reshape([n, c, h, w]),
        Partition::Grid(_) => t
            .reshape([n, h / ph, w / pw, ph, pw, c])?
            .permute(&[0, 5, 3, 1, 4, 2])?
            .reshape([n, c, h, w]),
    }
}

/// Scaled dot-product attention on `[B, T, C]` queries and `[B, S, C]`
/// keys/values; returns the output `[B, T, C]` and the weights `[B, T, S]`.
pub fn scaled_dot_attention(q: &Var, k: &Var, v: &Var) -> Result<(Var, Var)> {
    let c = *q.shape().last().unwrap_or(&1);
    let logits = q.matmul(&k.permute(&[0, 2, 1])?)?.scale(1.0 / (c as f64).sqrt());
    let weights = logits.softmax_last()?;
    Ok((weights.matmul(v)?, weights))
}

/// Pre-norm residual self-attention: `x + proj(attn(norm(x)))`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    pub partition: Partition,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, groups: usize, partition: Partition, rng: &mut R) -> Self {
        Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, groups),
            qkv: pointwise(ps, &format!("{name}.qkv"), channels, 3 * channels, rng),
            proj: pointwise(ps, &format!("{name}.proj"), channels, channels, rng),
            partition,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let shape: [usize; 4] = x.shape().try_into().map_err(|_| invalid!("attention expects rank 4"))?;
        let c = shape[1];
        let qkv = self.qkv.forward(ps, &self.norm.forward(ps, x)?)?;
        let tok = |i: usize| to_tokens(&qkv.narrow(1, i * c, c)?, self.partition);
        let (out, _) = scaled_dot_attention(&tok(0)?, &tok(1)?, &tok(2)?)?;
        let out = from_tokens(&out, self.partition, shape)?;
        x.add(&self.proj.forward(ps, &out)?)
    }
}

/// Block-local stand-in for a MaxViT stage: window attention followed by
/// grid attention with the same block size.
#[derive(Clone, Debug)]
pub struct WindowGridBlock {
    window: SelfAttention,
    grid: SelfAttention,
}

impl WindowGridBlock {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, groups: usize, block: usize, rng: &mut R) -> Self {
        Self {
            window: SelfAttention::new(ps, &format!("{name}.window"), channels, groups, Partition::Window(block), rng),
            grid: SelfAttention::new(ps, &format!("{name}.grid"), channels, groups, Partition::Grid(block), rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        self.grid.forward(ps, &self.window.forward(ps, x)?)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn ramp(shape: [usize; 4]) -> Var {
        Var::constant(Tensor::from_fn(shape, |i| i as f64))
    }

    #[test]
    fn token_round_trip() {
        let x = ramp([2, 3, 8, 4]);
        for part in [Partition::Window(4), Partition::Grid(2), Partition::Global, Partition::Window(16)] {
            let t = to_tokens(&x, part).unwrap();
            let back = from_tokens(&t, part, [2, 3, 8, 4]).unwrap();
            assert_eq!(back.value(), x.value(), "{part:?}");
        }
    }

    #[test]
    fn window_and_grid_groupings() {
        // single channel 4x4 map holding its own raster index
        let x = ramp([1, 1, 4, 4]);
        let w = to_tokens(&x, Partition::Window(2)).unwrap();
        assert_eq!(w.shape(), [4, 4, 1]);
        assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        let g = to_tokens(&x, Partition::Grid(2)).unwrap();
        assert_eq!(&g.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn rejects_untileable_maps() {
        assert!(to_tokens(&ramp([1, 1, 6, 6]), Partition::Window(4)).is_err());
    }

    #[test]
    fn attention_weights_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Var::constant(Tensor::randn([2, 5, 3], &mut rng));
        let k = Var::constant(Tensor::randn([2, 7, 3], &mut rng));
        let v = Var::constant(Tensor::randn([2, 7, 3], &mut rng));
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.shape(), [2, 5, 3]);
        for row in w.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let block = WindowGridBlock::new(&mut ps, "b", 4, 2, 2, &mut rng);
        let x = Var::constant(Tensor::randn([1, 4, 4, 4], &mut rng));
        let err = crate::gradcheck::check_params(&ps, |ps| Ok(block.forward(ps, &x)?.square().mean_all()), 1e-5, 6).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
