use super::Var;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

impl Var {
    /// Group normalisation of `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(invalid!("group_norm needs [N, C, ...], got {:?}", shape));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("{c} channels not divisible into {groups} groups"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(invalid!("group_norm affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()));
        }
        let spatial: usize = shape[2..].iter().product();
        let cg = c / groups;
        let m = cg * spatial;
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; n * groups];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for g in 0..groups {
                let base = (b * c + g * cg) * spatial;
                let xs = &x[base..base + m];
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * groups + g] = is;
                for (i, &v) in xs.iter().enumerate() {
                    let ch = g * cg + i / spatial;
                    let xh = (v - mean) * is;
                    xhat[base + i] = xh;
                    out[base + i] = xh * gm[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        let vg = gamma.clone();
        Ok(Var::from_op(
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |gr, needs| {
                let gm = vg.data();
                let mut gx = needs[0].then(|| vec![0.0; xhat.len()]);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for g in 0..groups {
                        let base = (b * c + g * cg) * spatial;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in 0..m {
                            let ch = g * cg + i / spatial;
                            let dy = gr[base + i];
                            ggamma[ch] += dy * xhat[base + i];
                            gbeta[ch] += dy;
                            let dxh = dy * gm[ch];
                            s1 += dxh;
                            s2 += dxh * xhat[base + i];
                        }
                        if let Some(gx) = gx.as_mut() {
                            let is = inv_std[b * groups + g];
                            let (s1, s2) = (s1 / m as f64, s2 / m as f64);
                            for i in 0..m {
                                let ch = g * cg + i / spatial;
                                let dxh = gr[base + i] * gm[ch];
                                gx[base + i] = is * (dxh - s1 - xhat[base + i] * s2);
                            }
                        }
                    }
                }
                vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var> {
        let d = *self.shape().last().ok_or_else(|| invalid!("softmax of a rank-0 tensor"))?;
        if d == 0 {
            return Err(invalid!("softmax over an empty axis"));
        }
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let y = out.clone();
        Ok(Var::from_op(
            Tensor::new(self.shape().to_vec(), out)?,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// L2-normalises each row along the last axis.
    pub fn l2_normalize_last(&self, eps: f64) -> Result<Var> {
        let mut reduced = self.shape().to_vec();
        *reduced.last_mut().ok_or_else(|| invalid!("normalising a rank-0 tensor"))? = 1;
        let norm = self.square().sum_to(&reduced)?.add_scalar(eps).powf(-0.5);
        self.mul(&norm)
    }
}
