use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn assert_grads(errors: &[f64]) {
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < 1e-6, "input {i}: relative error {e}");
    }
}

/// Weighted sum so every output element gets a distinct cotangent.
fn project(v: &Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(Tensor::randn(v.shape().to_vec(), &mut r));
    Ok(v.mul(&w)?.sum_all())
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut r = rng();
    let a = Tensor::randn([2, 3, 4, 4], &mut r);
    let b = Tensor::randn([1, 3, 1, 1], &mut r).map(|v| v.abs() + 0.5);
    let errs = check(
        |v| {
            let x = v[0].mul(&v[1])?.add(&v[1])?.sub(&v[0].sigmoid())?;
            let y = x.div(&v[1])?.silu().gelu().square();
            project(&y.add(&v[0].abs().exp().scale(0.1))?, 1)
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert_grads(&errs);
}

#[test]
fn shape_op_gradients() {
    let mut r = rng();
    let a = Tensor::randn([2, 3, 4, 2], &mut r);
    let b = Tensor::randn([2, 1, 4, 2], &mut r);
    let errs = check(
        |v| {
            let c = Var::cat(&[v[0].clone(), v[1].clone()], 1)?;
            let p = c.permute(&[0, 2, 3, 1])?.narrow(3, 1, 2)?;
            let u = v[0].upsample2x()?.avg_pool2x()?.reshape([2, 3, 8])?;
            Ok(project(&p, 2)?.add(&project(&u, 3)?)?.add(&v[1].sum_to(&[1, 1, 4, 1])?.sum_all())?)
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert_grads(&errs);
}

#[test]
fn matmul_gradients_with_shared_batch() {
    let mut r = rng();
    let a = Tensor::randn([3, 4, 5], &mut r);
    let b = Tensor::randn([1, 5, 2], &mut r);
    let errs = check(|v| project(&v[0].matmul(&v[1])?, 4), &[a, b], 1e-6).unwrap();
    assert_grads(&errs);
}

#[test]
fn matmul_matches_naive_product() {
    let mut r = rng();
    let a = Tensor::randn([2, 3, 4], &mut r);
    let b = Tensor::randn([2, 4, 5], &mut r);
    let c = Var::constant(a.clone()).matmul(&Var::constant(b.clone())).unwrap();
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.data()[bi * 12 + i * 4 + k] * b.data()[bi * 20 + k * 5 + j]).sum();
                assert!((c.data()[bi * 15 + i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_gradients() {
    let mut r = rng();
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = Tensor::randn([2, 3, 6, 6], &mut r);
        let w = Tensor::randn([4, 3, k, k], &mut r);
        let b = Tensor::randn([4], &mut r);
        let errs = check(
            |v| project(&v[0].conv2d(&v[1], Some(&v[2]), stride, pad)?, 5),
            &[x, w, b],
            1e-6,
        )
        .unwrap();
        assert_grads(&errs);
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng();
    let x = Tensor::randn([1, 2, 5, 5], &mut r);
    let w = Tensor::randn([3, 2, 3, 3], &mut r);
    let y = conv2d_forward(&x, &w, None, 2, 1).unwrap();
    assert_eq!(y.shape(), [1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                s += x.data()[c * 25 + iy as usize * 5 + ix as usize] * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                assert!((y.data()[o * 9 + oy * 3 + ox] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn group_norm_and_softmax_gradients() {
    let mut r = rng();
    let x = Tensor::randn([2, 4, 3, 3], &mut r);
    let g = Tensor::randn([4], &mut r);
    let b = Tensor::randn([4], &mut r);
    let errs = check(|v| project(&v[0].group_norm(2, &v[1], &v[2], 1e-5)?, 6), &[x, g, b], 1e-6).unwrap();
    assert_grads(&errs);

    let s = Tensor::randn([3, 5], &mut r);
    let errs = check(|v| project(&v[0].softmax_last()?, 7), &[s.clone()], 1e-6).unwrap();
    assert_grads(&errs);
    let errs = check(|v| project(&v[0].l2_normalize_last(1e-8)?, 8), &[s], 1e-6).unwrap();
    assert_grads(&errs);
}

#[test]
fn deform_sample_gradients() {
    let mut r = rng();
    let geom = DeformGeometry::same(3);
    let x = Tensor::randn([1, 2, 5, 5], &mut r);
    // Keep sampling points away from integer grid lines where bilinear
    // interpolation has kinks.
    let off = Tensor::uniform([1, 18, 5, 5], 0.1, 0.9, &mut r);
    let m = Tensor::uniform([1, 9, 5, 5], 0.2, 1.0, &mut r);
    let errs = check(|v| project(&v[0].deform_sample(&v[1], &v[2], geom)?, 9), &[x, off, m], 1e-6).unwrap();
    assert_grads(&errs);
}

#[test]
fn deform_sample_with_zero_offsets_is_im2col() {
    let mut r = rng();
    let x = Tensor::randn([1, 3, 6, 6], &mut r);
    let w = Tensor::randn([4, 3, 3, 3], &mut r);
    let cols = deform_sample_forward(
        &x,
        &Tensor::zeros([1, 18, 6, 6]),
        &Tensor::full([1, 9, 6, 6], 1.0),
        DeformGeometry::same(3),
    )
    .unwrap();
    let y = Var::constant(w.clone().reshape([1, 4, 27]).unwrap())
        .matmul(&Var::constant(cols))
        .unwrap();
    let plain = conv2d_forward(&x, &w, None, 1, 1).unwrap();
    let diff = y.value().clone().reshape([1, 4, 6, 6]).unwrap().max_abs_diff(&plain).unwrap();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn unused_inputs_get_no_gradient() {
    let a = Var::leaf(Tensor::scalar(2.0));
    let b = Var::leaf(Tensor::scalar(3.0));
    let y = a.square();
    let g = y.backward();
    assert_eq!(g.get(&a).unwrap(), &[4.0]);
    assert!(g.get(&b).is_none());
}

#[test]
fn shared_subexpressions_accumulate() {
    let a = Var::leaf(Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let y = a.mul(&a).unwrap().add(&a).unwrap().sum_all();
    let g = y.backward();
    assert_eq!(g.get(&a).unwrap(), &[3.0, -3.0]);
}

#[test]
fn constant_graphs_skip_backward() {
    let a = Var::constant(Tensor::scalar(1.0));
    assert!(!a.sigmoid().requires_grad());
}
