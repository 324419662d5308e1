use super::*;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
}

/// Central finite differences against analytic gradients for every input.
fn fd_check(f: impl Fn(&[Var]) -> Var, inputs: &[ArrayD<f64>], tol: f64) {
    let vars: Vec<Var> = inputs.iter().map(|a| Var::param(a.clone())).collect();
    let out = f(&vars);
    out.backward();
    let h = 1e-5;
    for (i, base) in inputs.iter().enumerate() {
        let analytic = vars[i]
            .grad()
            .unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
        for flat in 0..base.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[flat] += h;
            minus[i].as_slice_mut().unwrap()[flat] -= h;
            let fp = f(&plus.iter().map(|a| Var::param(a.clone())).collect::<Vec<_>>())
                .scalar_value();
            let fm = f(&minus
                .iter()
                .map(|a| Var::param(a.clone()))
                .collect::<Vec<_>>())
            .scalar_value();
            let numeric = (fp - fm) / (2.0 * h);
            let got = analytic.as_slice().unwrap()[flat];
            let denom = numeric.abs().max(got.abs()).max(1e-6);
            assert!(
                ((numeric - got) / denom).abs() < tol,
                "input {i} element {flat}: numeric {numeric} vs analytic {got}"
            );
        }
    }
}

#[test]
fn elementwise_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = randn(&mut rng, &[2, 3]);
    let b = randn(&mut rng, &[2, 3]);
    fd_check(|v| v[0].add(&v[1]).mul(&v[0]).sum_all(), &[a.clone(), b.clone()], 1e-6);
    fd_check(|v| v[0].sub(&v[1]).mul(&v[0]).mean_all(), &[a.clone(), b.clone()], 1e-6);
    fd_check(|v| v[0].neg().scale(0.7).add_scalar(2.0).sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].sigmoid().sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].leaky_relu(0.2).sum_all(), &[a.clone()], 1e-5);
    fd_check(|v| v[0].exp().sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].add_scalar(3.0).ln().sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].add_scalar(3.0).recip().sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].mul(&v[0]).sqrt_eps(1e-9).sum_all(), &[a.clone()], 1e-5);
    fd_check(|v| v[0].flip_cols().mul(&v[0]).sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| v[0].reshape(&[6]).mul(&v[1].reshape(&[6])).sum_all(), &[a, b], 1e-6);
}

#[test]
fn scalar_broadcast_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = randn(&mut rng, &[3, 2]);
    let s = randn(&mut rng, &[]);
    fd_check(|v| v[0].mul_scalar_var(&v[1]).sum_all(), &[a, s], 1e-6);
}

#[test]
fn clamp_passes_gradient_inside_range_only() {
    let x = Var::param(ndarray::arr1(&[-2.0, 0.3, 2.0]).into_dyn());
    let y = x.clamp(0.0, 1.0).sum_all();
    y.backward();
    let g = x.grad().unwrap();
    assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[4, 2]);
    let c = randn(&mut rng, &[5, 4]);
    fd_check(|v| matmul(&v[0], &v[1]).mul(&matmul(&v[0], &v[1])).sum_all(), &[a.clone(), b], 1e-6);
    fd_check(|v| matmul_nt(&v[0], &v[1]).sum_all(), &[a, c], 1e-6);
}

#[test]
fn conv_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = randn(&mut rng, &[5, 6, 2]);
    let w = randn(&mut rng, &[3, 3, 2, 3]);
    let b = randn(&mut rng, &[3]);
    fd_check(
        |v| {
            let y = conv2d(&v[0], &v[1], &v[2], 2, 1);
            y.mul(&y).sum_all()
        },
        &[x, w, b],
        1e-5,
    );
}

#[test]
fn conv_transpose_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[3, 4, 2]);
    let w = randn(&mut rng, &[4, 4, 2, 2]);
    let b = randn(&mut rng, &[2]);
    fd_check(
        |v| {
            let y = conv2d_transpose(&v[0], &v[1], &v[2], 2, 1);
            y.mul(&y).sum_all()
        },
        &[x, w, b],
        1e-5,
    );
}

#[test]
fn conv_transpose_doubles_spatial_size() {
    let x = Var::constant(ArrayD::zeros(IxDyn(&[16, 16, 4])));
    let w = Var::constant(ArrayD::zeros(IxDyn(&[4, 4, 4, 2])));
    let b = Var::constant(ArrayD::zeros(IxDyn(&[2])));
    let y = conv2d_transpose(&x, &w, &b, 2, 1);
    assert_eq!(y.shape(), &[32, 32, 2]);
}

#[test]
fn softmax_rows_is_row_stochastic_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = randn(&mut rng, &[4, 5]);
    let y = softmax_rows(&Var::constant(x.clone()));
    for row in y.value().view().into_dimensionality::<ndarray::Ix2>().unwrap().rows() {
        let s: f64 = row.sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    let probe = randn(&mut rng, &[4, 5]);
    fd_check(
        |v| softmax_rows(&v[0]).mul(&Var::constant(probe.clone())).sum_all(),
        &[x],
        1e-5,
    );
}

#[test]
fn structured_op_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = randn(&mut rng, &[3, 4, 2]);
    let b = randn(&mut rng, &[3, 4, 3]);
    let m = randn(&mut rng, &[3, 4, 1]);
    let bias = randn(&mut rng, &[2]);
    let probe = randn(&mut rng, &[3, 4, 5]);
    fd_check(
        |v| concat_channels(&v[0], &v[1]).mul(&Var::constant(probe.clone())).sum_all(),
        &[a.clone(), b],
        1e-6,
    );
    fd_check(|v| mul_channel_mask(&v[0], &v[1]).sum_all(), &[a.clone(), m], 1e-6);
    fd_check(|v| add_bias(&v[0], &v[1]).mul(&v[0]).sum_all(), &[a.clone(), bias], 1e-6);
    fd_check(|v| global_avg_pool(&v[0]).mul(&global_avg_pool(&v[0])).sum_all(), &[a.clone()], 1e-6);
    fd_check(|v| bilinear_resize(&v[0], 5, 7).mul(&bilinear_resize(&v[0], 5, 7)).sum_all(), &[a], 1e-5);
}

#[test]
fn sparse_affine_matches_dense_oracle_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = randn(&mut rng, &[2, 3, 2]); // 6 spatial positions
    let map = std::rc::Rc::new(SparseLinear {
        in_spatial: 6,
        out_spatial: 4,
        terms: vec![
            (0, 0, 0.5),
            (0, 1, 0.5),
            (1, 2, 1.0),
            (2, 5, 0.25),
            (2, 4, 0.75),
        ],
    });
    let base = randn(&mut rng, &[2, 2, 2]);

    // dense oracle
    let xf = x.view().into_shape_with_order((6, 2)).unwrap();
    let mut expect = base.clone().into_shape_with_order((4, 2)).unwrap();
    for &(o, i, w) in &map.terms {
        for ch in 0..2 {
            expect[(o as usize, ch)] += w * xf[(i as usize, ch)];
        }
    }
    let out = sparse_affine(&Var::constant(x.clone()), std::rc::Rc::clone(&map), base.clone());
    let of = out.value().view().into_shape_with_order((4, 2)).unwrap();
    for o in 0..4 {
        for ch in 0..2 {
            assert!((of[(o, ch)] - expect[(o, ch)]).abs() < 1e-12);
        }
    }

    let probe = randn(&mut rng, &[2, 2, 2]);
    fd_check(
        |v| {
            sparse_affine(&v[0], std::rc::Rc::clone(&map), base.clone())
                .mul(&Var::constant(probe.clone()))
                .sum_all()
        },
        &[x],
        1e-6,
    );
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = Var::param(ndarray::arr1(&[1.0, 2.0]).into_dyn());
    let y = x.detach().mul(&x).sum_all();
    y.backward();
    // d/dx (c * x) = c, with c = detached value of x
    assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[1.0, 2.0]);
}

#[test]
fn backward_accumulates_through_shared_subgraphs() {
    let x = Var::param(ndarray::arr1(&[3.0]).into_dyn());
    let y = x.mul(&x); // x^2
    let z = y.add(&y).sum_all(); // 2 x^2
    z.backward();
    assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[12.0]);
}
