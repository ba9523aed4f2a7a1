//! Dense row-major `f64` arrays.
//!
//! Image-like data uses the `[N, C, H, W]` layout throughout the crate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal draws in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(invalid!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Item `i` along the leading (batch) axis, keeping a leading axis of 1.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let n = *self.shape.first().ok_or_else(|| invalid!("empty shape"))?;
        if i >= n {
            return Err(invalid!("batch index {i} out of range for {n}"));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[i * stride..(i + 1) * stride].to_vec(),
        })
    }

    /// Concatenates tensors along the leading axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| invalid!("nothing to stack"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        for t in items {
            if &t.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    /// Top-left `h x w` window of a rank-4 tensor.
    pub fn crop_spatial(&self, h: usize, w: usize) -> Result<Tensor> {
        let (n, c, sh, sw) = self.dims4()?;
        if h > sh || w > sw {
            return Err(invalid!("crop {h}x{w} exceeds {sh}x{sw}"));
        }
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in self.data.chunks(sh * sw) {
            for y in 0..h {
                data.extend_from_slice(&plane[y * sw..y * sw + w]);
            }
        }
        Tensor::new([n, c, h, w], data)
    }

    /// Channel range `[start, start + len)` of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(invalid!("channel range {start}..{} exceeds {c}", start + len));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new([n, len, h, w], data)
    }
}
