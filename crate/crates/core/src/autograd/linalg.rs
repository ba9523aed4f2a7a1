use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a * b + beta * c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || max_offset(m, k, rsa, csa) < a.len());
    debug_assert!(k == 0 || max_offset(k, n, rsb, csb) < b.len());
    debug_assert!(max_offset(m, n, rsc, csc) < c.len());
    // SAFETY: the debug assertions above describe the bounds every caller
    // establishes; the views are read-only for a/b and exclusive for c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn max_offset(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    (r as isize - 1) as usize * rs as usize + (c as isize - 1) as usize * cs as usize
}

impl Var {
    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    ///
    /// Either operand may have a batch size of 1, in which case it is shared
    /// across the other operand's batch.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        let (&[ba, m, k], &[bb, k2, n]) = (self.shape(), other.shape()) else {
            return Err(mismatch());
        };
        if k != k2 || (ba != bb && ba != 1 && bb != 1) {
            return Err(mismatch());
        }
        let batch = ba.max(bb);
        let (sa, sb) = (if ba == 1 { 0 } else { m * k }, if bb == 1 { 0 } else { k * n });
        let mut out = vec![0.0; batch * m * n];
        let (a, b) = (self.data(), other.data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a[i * sa..],
                (k as isize, 1),
                &b[i * sb..],
                (n as isize, 1),
                0.0,
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let (va, vb) = (self.clone(), other.clone());
        Ok(Var::from_op(
            Tensor::new([batch, m, n], out)?,
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let (a, b) = (va.data(), vb.data());
                let ga = needs[0].then(|| {
                    // dA = dC * B^T
                    let mut ga = vec![0.0; ba * m * k];
                    for i in 0..batch {
                        let dst = if ba == 1 { 0 } else { i * m * k };
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            (n as isize, 1),
                            &b[i * sb..],
                            (1, n as isize),
                            1.0,
                            &mut ga[dst..],
                            (k as isize, 1),
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    // dB = A^T * dC
                    let mut gb = vec![0.0; bb * k * n];
                    for i in 0..batch {
                        let dst = if bb == 1 { 0 } else { i * k * n };
                        gemm(
                            k,
                            m,
                            n,
                            &a[i * sa..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            1.0,
                            &mut gb[dst..],
                            (n as isize, 1),
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }
}
