use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// `x -> <grad f(x), v>`, a scalar whose gradient is the Hessian-vector
/// product of `f` along `v`.
fn directional_grad<F>(f: F, v: Tensor) -> impl Fn(&Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    move |x: &Tensor| {
        // Finite differences evaluate under no_grad; the inner gradient
        // still needs a recorded graph.
        with_grad_mode(true, || {
            let inner = if x.tracks_grad() { x.clone() } else { x.requires_grad() };
            let y = f(&inner)?;
            let g = grad(&y, &[inner], x.tracks_grad())?.remove(0);
            g.dot(&v)
        })
    }
}

#[test]
fn tanh_of_zero() {
    assert_eq!(Tensor::scalar(0.0).tanh().item(), 0.0);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let out = Tensor::eye(3).matmul(&a).unwrap();
    assert_eq!(out.data(), a.data());
}

#[test]
fn derivative_of_square() {
    let x = Tensor::scalar(3.0).requires_grad();
    let y = x.mul(&x).unwrap();
    assert_eq!(grad(&y, &[x], false).unwrap()[0].item(), 6.0);
}

#[test]
fn grad_of_sum_is_ones() {
    let x = Tensor::new(vec![0.5, -2.0, 3.0, 1.0], &[2, 2]).unwrap().requires_grad();
    let g = grad(&x.sum(), &[x], false).unwrap().remove(0);
    assert_eq!(g.data(), &[1.0; 4]);
    assert_eq!(g.shape(), &[2, 2]);
}

#[test]
fn grad_of_self_dot() {
    let a = Tensor::vector(vec![1.0, 2.0]).requires_grad();
    let g = grad(&a.dot(&a).unwrap(), &[a], false).unwrap().remove(0);
    assert_eq!(g.data(), &[2.0, 4.0]);
}

#[test]
fn grad_of_grad_cubic() {
    let x = Tensor::scalar(2.0).requires_grad();
    let y = x.mul(&x).unwrap().mul(&x).unwrap();
    let dy = grad(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
    assert!(dy.tracks_grad());
    let d2y = grad(&dy, &[x], false).unwrap().remove(0);
    assert!((d2y.item() - 12.0).abs() < 1e-12);
}

#[test]
fn third_order_nesting() {
    // d³/dx³ tanh(x) = -2 sech²(x) (1 - 3 tanh²(x))
    let x0 = 0.3f64;
    let x = Tensor::scalar(x0).requires_grad();
    let y = x.tanh();
    let d1 = grad(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
    let d2 = grad(&d1, std::slice::from_ref(&x), true).unwrap().remove(0);
    let d3 = grad(&d2, &[x], false).unwrap().remove(0);
    let t = x0.tanh();
    let expected = -2.0 * (1.0 - t * t) * (1.0 - 3.0 * t * t);
    assert!((d3.item() - expected).abs() < 1e-12);
}

#[test]
fn square_norm_gradient_matches_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[10]);
    let err = finite_diff_check(|t| Ok(t.sq_norm()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "err = {err}");
    let leaf = x.requires_grad();
    let g = grad(&leaf.sq_norm(), std::slice::from_ref(&leaf), false).unwrap().remove(0);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 2.0 * xi).abs() < 1e-14);
    }
}

#[test]
fn constant_function_has_zero_error() {
    let x = Tensor::vector(vec![0.1, 0.2, 0.3]);
    let err = finite_diff_check(|_| Ok(Tensor::scalar(4.0)), &x, 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn non_finite_objective_is_an_error() {
    let x = Tensor::vector(vec![0.0, 1.0]);
    let res = finite_diff_check(|t| Ok(t.sum().scale(f64::INFINITY)), &x, 1e-4);
    assert!(matches!(res, Err(TensorError::NonFinite { .. })));
}

#[test]
fn shape_errors_name_the_op() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 2]);
    match a.matmul(&b) {
        Err(TensorError::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(a.add(&b), Err(TensorError::Shape { op: "add", .. })));
    assert!(a.reshape(&[4]).is_err());
}

#[test]
fn grad_rejects_bad_requests() {
    let x = Tensor::vector(vec![1.0, 2.0]).requires_grad();
    let y = x.scale(2.0);
    assert!(matches!(grad(&y, std::slice::from_ref(&x), false), Err(TensorError::NonScalarOutput(_))));
    let c = Tensor::vector(vec![1.0, 2.0]);
    assert!(matches!(grad(&y.sum(), &[c], false), Err(TensorError::NotOnGraph(0))));
}

#[test]
fn unused_input_gets_zero_gradient() {
    let x = Tensor::vector(vec![1.0, 2.0]).requires_grad();
    let z = Tensor::scalar(5.0).requires_grad();
    let g = grad(&x.sum(), &[x, z], false).unwrap();
    assert_eq!(g[1].item(), 0.0);
}

#[test]
fn scalar_broadcasting() {
    let a = Tensor::scalar(2.0).requires_grad();
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let y = a.mul(&x).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 6.0]);
    let g = grad(&y.sum(), &[a], false).unwrap().remove(0);
    assert_eq!(g.shape(), &[] as &[usize]);
    assert_eq!(g.item(), 6.0);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::scalar(1.0).requires_grad();
    let y = no_grad(|| x.tanh());
    assert!(!y.tracks_grad());
    assert!(is_grad_enabled());
}

#[test]
fn conv_matches_direct_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 5]);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let y = x.conv2d(&k).unwrap();
    let at = |t: &Tensor, i: [usize; 4]| {
        let s = t.shape();
        t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
    };
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (si, sj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if (0..4).contains(&si) && (0..5).contains(&sj) {
                                    acc += at(&k, [o, c, di, dj]) * at(&x, [n, c, si as usize, sj as usize]);
                                }
                            }
                        }
                    }
                    assert!((at(&y, [n, o, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn concat_slice_pad_roundtrip() {
    let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::new(vec![5.0, 6.0], &[2, 1]).unwrap();
    let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
    assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
    assert_eq!(c.slice(1, 2, 1).unwrap().data(), b.data());
    assert_eq!(b.pad(1, 2, 3).unwrap().data(), &[0.0, 0.0, 5.0, 0.0, 0.0, 6.0]);
}

/// A scalar test function per op family, each with nonzero curvature.
fn op_cases() -> Vec<(&'static str, Vec<usize>, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let xin = rand_tensor(&mut rng, &[1, 2, 3, 4]);
    let other = rand_tensor(&mut rng, &[2, 3]);
    vec![
        ("add_sub_mul", vec![2, 3], Box::new(move |x: &Tensor| {
            let y = x.add(&other)?.mul(x)?.sub(&x.scale(0.5))?;
            Ok(y.mul(&y)?.sum())
        })),
        ("matmul_tanh", vec![2, 3], Box::new(move |x: &Tensor| Ok(x.matmul(&w)?.tanh().sq_norm()))),
        ("transpose", vec![2, 3], Box::new(|x: &Tensor| {
            let t = x.transpose()?;
            Ok(t.matmul(x)?.tanh().sum())
        })),
        ("conv_input", vec![1, 2, 3, 4], {
            let k = k.clone();
            Box::new(move |x: &Tensor| Ok(x.conv2d(&k)?.tanh().sq_norm()))
        }),
        ("conv_kernel", vec![2, 2, 3, 3], Box::new(move |kk: &Tensor| Ok(xin.conv2d(kk)?.softplus().sq_norm()))),
        ("sigmoid_softplus", vec![5], Box::new(|x: &Tensor| Ok(x.scale(2.0).softplus().mul(&x.sigmoid())?.sum()))),
        ("exp_sqrt_recip", vec![4], Box::new(|x: &Tensor| {
            let e = x.exp();
            Ok(e.add_scalar(1.0).sqrt()?.recip()?.sum())
        })),
        ("log_softmax", vec![2, 4], Box::new(|x: &Tensor| {
            let lp = x.log_softmax()?;
            let wts = Tensor::new(vec![1.0, 0.0, 0.5, -1.0, 0.2, 0.3, 0.0, 2.0], &[2, 4])?;
            Ok(lp.mul(&wts)?.sum())
        })),
        ("reductions", vec![3, 2], Box::new(|x: &Tensor| {
            let r = x.sum_keep_axis(1)?.tanh().expand_axis(&[3, 2], 1)?;
            let c = x.sum_keep_axis(0)?.expand_axis(&[3, 2], 0)?;
            Ok(r.mul(&c)?.mul(x)?.mean())
        })),
        ("concat_slice_reshape", vec![2, 3], Box::new(|x: &Tensor| {
            let joined = Tensor::concat(&[x.clone(), x.tanh()], 1)?;
            let s = joined.slice(1, 2, 3)?.reshape(&[3, 2])?;
            s.tanh().sq_norm().add(&x.pad(0, 1, 4)?.flatten().sq_norm())?.mul(&x.sum())
        })),
        ("div_cosine", vec![4], Box::new(|x: &Tensor| {
            let y = Tensor::vector(vec![0.3, -0.2, 0.9, 0.1]);
            let num = x.dot(&y)?;
            let den = x.sq_norm().sqrt()?.scale(y.sq_norm().item().sqrt());
            num.div(&den)
        })),
    ]
}

#[test]
fn first_order_matches_finite_differences_for_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, shape, f) in op_cases() {
        let x = rand_tensor(&mut rng, &shape);
        let err = finite_diff_check(&f, &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{name}: first-order error {err}");
    }
}

#[test]
fn second_order_matches_finite_differences_for_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (name, shape, f) in op_cases() {
        let x = rand_tensor(&mut rng, &shape);
        let v = rand_tensor(&mut rng, &shape);
        let hv = directional_grad(&f, v);
        let err = finite_diff_check(hv, &x, 1e-5).unwrap();
        assert!(err < 1e-3, "{name}: second-order error {err}");
    }
}

#[test]
fn abs_has_sign_gradient() {
    let x = Tensor::vector(vec![-2.0, 0.0, 3.0]).requires_grad();
    let g = grad(&x.abs().sum(), &[x], false).unwrap().remove(0);
    assert_eq!(g.data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn recip_of_zero_is_an_error() {
    let x = Tensor::vector(vec![1.0, 0.0]);
    assert!(matches!(x.recip(), Err(TensorError::NonFinite { op: "recip" })));
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[4, 3]).requires_grad();
        let w = rand_tensor(&mut rng, &[3, 2]);
        let y = x.matmul(&w).unwrap().tanh().log_softmax().unwrap().sum();
        let g = grad(&y, &[x], false).unwrap().remove(0);
        g.to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grad_is_linear(xs in prop::collection::vec(-1.0f64..1.0, 6), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let w = Tensor::new(vec![0.3, -0.5, 0.8, 0.1, -0.2, 0.7], &[3, 2]).unwrap();
            let x = Tensor::new(xs, &[2, 3]).unwrap().requires_grad();
            let f = x.matmul(&w).unwrap().tanh().sq_norm();
            let g = x.exp().sum();
            let combo = f.scale(a).add(&g.scale(b)).unwrap();
            let gc = grad(&combo, std::slice::from_ref(&x), false).unwrap().remove(0);
            let gf = grad(&f, std::slice::from_ref(&x), false).unwrap().remove(0);
            let gg = grad(&g, &[x], false).unwrap().remove(0);
            for i in 0..6 {
                let expect = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((gc.data()[i] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn flatten_reshape_is_lossless(xs in prop::collection::vec(-10.0f64..10.0, 12)) {
            let t = Tensor::new(xs.clone(), &[3, 4]).unwrap();
            prop_assert_eq!(t.flatten().reshape(&[2, 6]).unwrap().to_vec(), xs);
        }
    }
}
