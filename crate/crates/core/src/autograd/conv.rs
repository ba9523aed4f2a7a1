use super::{gemm, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n_out = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let n_out = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain 2-D convolution on raw tensors (no graph), used by oracles and
/// fixed feature extractors.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    Var::constant(x.clone())
        .conv2d(
            &Var::constant(w.clone()),
            bias.map(|b| Var::constant(b.clone())).as_ref(),
            stride,
            pad,
        )
        .map(|v| v.value().clone())
}

impl Var {
    /// Cross-correlation of `[N, Ci, H, W]` with weights `[Co, Ci, kh, kw]`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let (co, ci, kh, kw) = weight.value().dims4()?;
        if ci != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(invalid!("conv2d geometry: input {h}x{w}, kernel {kh}x{kw}, pad {pad}, stride {stride}"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(invalid!("conv2d bias shape {:?}, expected [{co}]", b.shape()));
            }
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (g.rows(), g.cols());
        let in_sz = c * h * w;
        let out_sz = co * ncols;
        let mut out = vec![0.0; n * out_sz];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
        let (x, wt) = (self.data(), weight.data());
        for b in 0..n {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let colv: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            let ob = &mut out[b * out_sz..(b + 1) * out_sz];
            if let Some(bias) = bias {
                for (o, &bv) in bias.data().iter().enumerate() {
                    ob[o * ncols..(o + 1) * ncols].fill(bv);
                }
            }
            gemm(
                co,
                rows,
                ncols,
                wt,
                (rows as isize, 1),
                colv,
                (ncols as isize, 1),
                if bias.is_some() { 1.0 } else { 0.0 },
                ob,
                (ncols as isize, 1),
            );
        }
        let out = Tensor::new([n, co, g.ho, g.wo], out)?;
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let (vx, vw) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        Ok(Var::from_op(out, parents, move |gr, needs| {
            let (x, wt) = (vx.data(), vw.data());
            let mut gx = needs[0].then(|| vec![0.0; n * in_sz]);
            let mut gw = needs[1].then(|| vec![0.0; co * rows]);
            let mut cols = vec![0.0; rows * ncols];
            let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
            for b in 0..n {
                let gb = &gr[b * out_sz..(b + 1) * out_sz];
                let xb = &x[b * in_sz..(b + 1) * in_sz];
                if let Some(gw) = gw.as_mut() {
                    let colv: &[f64] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &g, &mut cols);
                        &cols
                    };
                    // dW += dY * cols^T
                    gemm(
                        co,
                        ncols,
                        rows,
                        gb,
                        (ncols as isize, 1),
                        colv,
                        (1, ncols as isize),
                        1.0,
                        gw,
                        (rows as isize, 1),
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
                    // dcols = W^T * dY
                    let target: &mut [f64] = if g.is_pointwise() { gxb } else { &mut dcols };
                    gemm(
                        rows,
                        co,
                        ncols,
                        wt,
                        (1, rows as isize),
                        gb,
                        (ncols as isize, 1),
                        0.0,
                        target,
                        (ncols as isize, 1),
                    );
                    if !g.is_pointwise() {
                        col2im(&dcols, &g, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gbias = vec![0.0; co];
                    for b in 0..n {
                        for (o, acc) in gbias.iter_mut().enumerate() {
                            let base = b * out_sz + o * ncols;
                            *acc += gr[base..base + ncols].iter().sum::<f64>();
                        }
                    }
                    gbias
                }));
            }
            grads
        }))
    }
}

/// Kernel geometry of a modulated deformable sampling (stride 1, same-size output).
#[derive(Clone, Copy, Debug)]
pub struct DeformGeometry {
    pub kernel: usize,
    pub pad: usize,
}

impl DeformGeometry {
    pub fn same(kernel: usize) -> Self {
        Self { kernel, pad: kernel / 2 }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Bilinear corners of a sampling location with out-of-range taps dropped.
struct Bilinear {
    idx: [Option<usize>; 4],
    wts: [f64; 4],
    /// d(weight)/d(py) and d(weight)/d(px) per corner.
    dy: [f64; 4],
    dx: [f64; 4],
}

fn bilinear(py: f64, px: f64, h: usize, w: usize) -> Bilinear {
    let (y0, x0) = (py.floor(), px.floor());
    let (ly, lx) = (py - y0, px - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
    let wy = [1.0 - ly, 1.0 - ly, ly, ly];
    let wx = [1.0 - lx, lx, 1.0 - lx, lx];
    let sy = [-1.0, -1.0, 1.0, 1.0];
    let sx = [-1.0, 1.0, -1.0, 1.0];
    let mut b = Bilinear {
        idx: [None; 4],
        wts: [0.0; 4],
        dy: [0.0; 4],
        dx: [0.0; 4],
    };
    for i in 0..4 {
        let (y, x) = corners[i];
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            b.idx[i] = Some(y as usize * w + x as usize);
        }
        b.wts[i] = wy[i] * wx[i];
        b.dy[i] = sy[i] * wx[i];
        b.dx[i] = wy[i] * sx[i];
    }
    b
}

/// Raw forward of [`Var::deform_sample`].
pub fn deform_sample_forward(x: &Tensor, offset: &Tensor, mask: &Tensor, geom: DeformGeometry) -> Result<Tensor> {
    Var::constant(x.clone())
        .deform_sample(&Var::constant(offset.clone()), &Var::constant(mask.clone()), geom)
        .map(|v| v.value().clone())
}

impl Var {
    /// Modulated deformable sampling into a column matrix.
    ///
    /// For input `[N, C, H, W]`, offsets `[N, 2K, H, W]` (`dy, dx` per tap)
    /// and masks `[N, K, H, W]`, returns `[N, C*K, H*W]` where row `c*K + k`
    /// holds `mask_k * x_c(p + p_k + offset_k)` sampled bilinearly with zero
    /// padding. Multiplying by weights reshaped to `[Co, C*K]` yields a
    /// deformable convolution; with zero offsets and unit masks the columns
    /// equal the im2col matrix of an ordinary same-padded convolution.
    pub fn deform_sample(&self, offset: &Var, mask: &Var, geom: DeformGeometry) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let k = geom.taps();
        if offset.shape() != [n, 2 * k, h, w] || mask.shape() != [n, k, h, w] {
            return Err(invalid!(
                "deform_sample: input {:?}, offsets {:?}, masks {:?} for {k} taps",
                self.shape(),
                offset.shape(),
                mask.shape()
            ));
        }
        let hw = h * w;
        let (x, off, msk) = (self.data(), offset.data(), mask.data());
        let mut out = vec![0.0; n * c * k * hw];
        for b in 0..n {
            for t in 0..k {
                let (ky, kx) = (t / geom.kernel, t % geom.kernel);
                for p in 0..hw {
                    let (oy, ox) = (p / w, p % w);
                    let py = oy as f64 - geom.pad as f64 + ky as f64 + off[((b * 2 * k) + 2 * t) * hw + p];
                    let px = ox as f64 - geom.pad as f64 + kx as f64 + off[((b * 2 * k) + 2 * t + 1) * hw + p];
                    let m = msk[(b * k + t) * hw + p];
                    let bl = bilinear(py, px, h, w);
                    for ch in 0..c {
                        let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        let mut v = 0.0;
                        for i in 0..4 {
                            if let Some(j) = bl.idx[i] {
                                v += bl.wts[i] * plane[j];
                            }
                        }
                        out[((b * c + ch) * k + t) * hw + p] = m * v;
                    }
                }
            }
        }
        let out = Tensor::new([n, c * k, hw], out)?;
        let (vx, voff, vm) = (self.clone(), offset.clone(), mask.clone());
        Ok(Var::from_op(
            out,
            vec![self.clone(), offset.clone(), mask.clone()],
            move |g, needs| {
                let (x, off, msk) = (vx.data(), voff.data(), vm.data());
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut goff = needs[1].then(|| vec![0.0; off.len()]);
                let mut gm = needs[2].then(|| vec![0.0; msk.len()]);
                for b in 0..n {
                    for t in 0..k {
                        let (ky, kx) = (t / geom.kernel, t % geom.kernel);
                        for p in 0..hw {
                            let (oy, ox) = (p / w, p % w);
                            let iy = ((b * 2 * k) + 2 * t) * hw + p;
                            let ix = ((b * 2 * k) + 2 * t + 1) * hw + p;
                            let py = oy as f64 - geom.pad as f64 + ky as f64 + off[iy];
                            let px = ox as f64 - geom.pad as f64 + kx as f64 + off[ix];
                            let im = (b * k + t) * hw + p;
                            let m = msk[im];
                            let bl = bilinear(py, px, h, w);
                            let (mut dpy, mut dpx, mut dm) = (0.0, 0.0, 0.0);
                            for ch in 0..c {
                                let go = g[((b * c + ch) * k + t) * hw + p];
                                if go == 0.0 {
                                    continue;
                                }
                                let base = (b * c + ch) * hw;
                                let mut v = 0.0;
                                for i in 0..4 {
                                    if let Some(j) = bl.idx[i] {
                                        let xv = x[base + j];
                                        v += bl.wts[i] * xv;
                                        dpy += go * m * bl.dy[i] * xv;
                                        dpx += go * m * bl.dx[i] * xv;
                                        if let Some(gx) = gx.as_mut() {
                                            gx[base + j] += go * m * bl.wts[i];
                                        }
                                    }
                                }
                                dm += go * v;
                            }
                            if let Some(goff) = goff.as_mut() {
                                goff[iy] += dpy;
                                goff[ix] += dpx;
                            }
                            if let Some(gm) = gm.as_mut() {
                                gm[im] += dm;
                            }
                        }
                    }
                }
                vec![gx, goff, gm]
            },
        ))
    }
}
