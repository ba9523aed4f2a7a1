//! Parameters, basic layers and the Adam optimiser.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable tensors of one model.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.vars.push(Var::leaf(value));
        ParamId(self.vars.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().map(Var::value))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = self.vars[id.0].value();
        old.expect_same_shape(&value, "ParamStore::set")?;
        self.vars[id.0] = if self.vars[id.0].requires_grad() {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.vars.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Copy whose values are constants, so forward passes record no gradients.
    pub fn frozen(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            vars: self.vars.iter().map(|v| Var::constant(v.value().clone())).collect(),
        }
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.vars[id.0].value()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.iter().map(|v| v.value().numel()).sum()
    }

    /// Replaces every value from `(name, tensor)` pairs; names and shapes must match exactly.
    pub fn load(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.vars.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.vars.len()
            )));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Config(format!("checkpoint tensor {i} is {name}, expected {}", self.names[i])));
            }
            if t.shape() != self.vars[i].shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.vars[i].shape()
                )));
            }
            self.vars[i] = Var::leaf(t);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// PyTorch-style default initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded `k x k` convolution.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k;
        let weight = ps.add(format!("{name}.weight"), init_uniform(&[cout, cin, k, k], fan_in, rng));
        let bias = Some(ps.add(format!("{name}.bias"), init_uniform(&[cout], fan_in, rng)));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Convolution whose weights and bias start at exactly zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros([cout, cin, k, k]));
        let bias = Some(ps.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        x.conv2d(ps.get(self.weight), self.bias.map(|b| ps.get(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: ps.add(format!("{name}.weight"), init_uniform(&[1, fan_in, fan_out], fan_in, rng)),
            bias: ps.add(format!("{name}.bias"), init_uniform(&[1, fan_out], fan_in, rng)),
        }
    }

    /// `[N, in] -> [N, out]`.
    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let [n, fan_in] = x.shape() else {
            return Err(invalid!("Linear expects [N, in], got {:?}", x.shape()));
        };
        let y = x.reshape([1, *n, *fan_in])?.matmul(ps.get(self.weight))?;
        let out = y.shape()[2];
        y.reshape([*n, out])?.add(ps.get(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups: groups.min(channels).max(1),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        x.group_norm(self.groups, ps.get(self.gamma), ps.get(self.beta), 1e-5)
    }
}

/// Pointwise linear map over the channels of `[N, C, H, W]`.
pub fn pointwise<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Conv2d {
    Conv2d::new(ps, name, cin, cout, 1, 1, rng)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction, updating every parameter in one store.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(ps: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = ps.vars.iter().map(|v| vec![0.0; v.value().numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update from `grads`; parameters without a gradient are treated as zero-gradient.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads) -> Result<()> {
        self.t += 1;
        let gs: Vec<Option<&[f64]>> = ps.vars.iter().map(|v| grads.get(v)).collect();
        let norm = gs
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("non-finite gradient norm at step {}", self.t)));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut updated = Vec::with_capacity(ps.vars.len());
        for (i, g) in gs.iter().enumerate() {
            let Some(g) = g else {
                updated.push(None);
                continue;
            };
            let mut value = ps.vars[i].value().clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in value.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= self.cfg.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
            updated.push(Some(value));
        }
        for (i, u) in updated.into_iter().enumerate() {
            if let Some(u) = u {
                ps.vars[i] = Var::leaf(u);
            }
        }
        Ok(())
    }
}
