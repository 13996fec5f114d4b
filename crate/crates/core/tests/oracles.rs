//! Small closed-form checks of the building blocks against independent
//! reference computations.

mod common;

use flowleak::attack::{match_reconstructions, sim_loss, surrogate_weights, total_loss, AttackConfig};
use flowleak::data::{gen_shapes_dataset, read_pnm, write_pnm};
use flowleak::defenses::{apply_defense, DefenseKind, DefenseSpec};
use flowleak::fl::{ClientUpdate, LocalTrainConfig};
use flowleak::flow::{flow_reg, fm_train, FlowTrainConfig};
use flowleak::metrics::{fmse, mse, psnr, ssim, tv};
use flowleak::nn::{classifier_features, cross_entropy, forward_classifier, ClassifierSpec, FlowNetSpec};
use flowleak::params::ParamSet;
use flowleak::tensor::{finite_diff_check, grad, with_grad_mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn small_update(steps: usize) -> (ClassifierSpec, ClientUpdate, flowleak::data::ClientDataset) {
    let spec = ClassifierSpec {
        hidden: vec![10],
        ..ClassifierSpec::mlp([1, 8, 8], 4)
    };
    let w0 = spec.init(&mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let data = gen_shapes_dataset(2, 8, 4, 12).unwrap();
    let u = ClientUpdate::train(&spec, &w0, &data, &LocalTrainConfig::sgd(steps, 2, 0.1)).unwrap();
    (spec, u, data)
}

#[test]
fn image_metrics_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for shape in [[1, 8, 8], [3, 10, 9], [1, 5, 5], [2, 7, 12]] {
        let n = shape.iter().product();
        for _ in 0..5 {
            let a = random_image(&mut rng, n);
            let b = random_image(&mut rng, n);
            assert!((mse(&a, &b) - common::mse(&a, &b)).abs() < 1e-12);
            assert!((psnr(&a, &b) - common::psnr(&a, &b)).abs() < 1e-9);
            assert!((ssim(&a, &b, shape) - common::ssim(&a, &b, shape)).abs() < 1e-9, "{shape:?}");
            assert!((tv(&a, shape) - common::tv(&a, shape)).abs() < 1e-12);
        }
    }
}

#[test]
fn fmse_is_mse_of_penultimate_features() {
    let spec = ClassifierSpec::convnet([1, 8, 8], 4);
    let p = spec.init(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 64);
    let b = random_image(&mut rng, 64);
    let fa = classifier_features(&spec, &p, &Tensor::new(a.clone(), &[1, 1, 8, 8]).unwrap()).unwrap();
    let fb = classifier_features(&spec, &p, &Tensor::new(b.clone(), &[1, 1, 8, 8]).unwrap()).unwrap();
    let by_hand = common::mse(fa.data(), fb.data());
    assert!((fmse(&a, &b, &spec, &p).unwrap() - by_hand).abs() < 1e-10);
}

#[test]
fn step_count_formula() {
    assert_eq!(LocalTrainConfig::sgd(5, 2, 0.1).steps_for(10), 25);
    assert_eq!(LocalTrainConfig::sgd(5, 1, 0.1).steps_for(5), 25);
    assert_eq!(LocalTrainConfig::sgd(2, 4, 0.1).steps_for(9), 6);
}

#[test]
fn surrogate_at_half_is_the_mean() {
    let (_, u, _) = small_update(3);
    let mid = surrogate_weights(&u.w0, &u.wt, &Tensor::scalar(0.5)).unwrap();
    for ((m, a), b) in mid.flatten().iter().zip(u.w0.flatten()).zip(u.wt.flatten()) {
        assert!((m - 0.5 * (a + b)).abs() < 1e-15);
    }
}

fn sim_at(u: &ClientUpdate, data: &flowleak::data::ClientDataset, delta: &[f64], w: &ParamSet) -> f64 {
    with_grad_mode(true, || {
        let w = w.leaves();
        let loss = cross_entropy(&forward_classifier(&u.arch, &w, &data.all()).unwrap(), data.labels()).unwrap();
        sim_loss(&Tensor::vector(delta.to_vec()), &w, &loss).unwrap().item()
    })
}

#[test]
fn similarity_is_scale_invariant() {
    let (_, u, data) = small_update(3);
    let d = u.weight_update().unwrap();
    let base = sim_at(&u, &data, &d, &u.w0);
    for c in [0.1, 10.0] {
        let scaled: Vec<f64> = d.iter().map(|v| c * v).collect();
        assert!((sim_at(&u, &data, &scaled, &u.w0) - base).abs() < 1e-10);
    }
}

#[test]
fn objective_is_the_weighted_sum_of_its_terms() {
    let (_, u, data) = small_update(2);
    let flow = fm_train(
        &FlowNetSpec::new(64, vec![8]),
        data.pixels(),
        &FlowTrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            seed: 0,
        },
        "test",
    )
    .unwrap();
    let cfg = AttackConfig {
        lambda: 0.3,
        tv_weight: 0.7,
        max_iters: 10,
        ..AttackConfig::default()
    };
    let delta = Tensor::vector(u.weight_update().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(random_image(&mut rng, 128), &[2, 1, 8, 8]).unwrap();
    with_grad_mode(true, || {
        let w = surrogate_weights(&u.w0, &u.wt, &Tensor::scalar(0.25).requires_grad()).unwrap();
        let o = total_loss(&u, &delta, &w, &x, data.labels(), Some(&flow), &cfg, 4).unwrap();
        let f = flow_reg(&flow, &x, 4, 10).unwrap().item();
        let t = (common::tv(&x.data()[..64], [1, 8, 8]) + common::tv(&x.data()[64..], [1, 8, 8])) / 2.0;
        assert!((o.flow.as_ref().unwrap().item() - f).abs() < 1e-12);
        assert!((o.tv.item() - t).abs() < 1e-12);
        let by_hand = o.sim.item() + 0.3 * f + 0.7 * t;
        assert!((o.total.item() - by_hand).abs() < 1e-12);
    });
}

#[test]
fn three_by_three_assignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let targets: Vec<Vec<f64>> = (0..3).map(|_| random_image(&mut rng, 6)).collect();
        let recons: Vec<Vec<f64>> = (0..3).map(|_| random_image(&mut rng, 6)).collect();
        let t: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
        let r: Vec<&[f64]> = recons.iter().map(|v| v.as_slice()).collect();
        let cost = |p: &[usize]| p.iter().enumerate().map(|(j, &k)| common::mse(r[k], t[j])).sum::<f64>();
        let best = common::permutations(3).iter().map(|p| cost(p)).fold(f64::INFINITY, f64::min);
        assert!((cost(&match_reconstructions(&r, &t).unwrap()) - best).abs() < 1e-12);
    }
}

#[test]
fn clipping_bound_example() {
    let out = apply_defense(&[0.1, -0.1, 0.02], &DefenseSpec::new(DefenseKind::Clipping, 0.05)).unwrap();
    assert_eq!(out, vec![0.05, -0.05, 0.02]);
}

#[test]
fn pnm_round_trip_is_within_quantisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for shape in [[1, 9, 7], [3, 4, 5]] {
        let img = random_image(&mut rng, shape.iter().product());
        let (s, back) = read_pnm(&write_pnm(shape, &img).unwrap()).unwrap();
        assert_eq!(s, shape);
        let worst = img.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 510.0 + 1e-12, "{worst}");
    }
}

#[test]
fn square_norm_gradient_against_analytic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::vector((0..20).map(|_| rng.random_range(-2.0..2.0)).collect());
    let err = finite_diff_check(|x| Ok(x.sq_norm()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
    let xl = x.requires_grad();
    let g = grad(&xl.sq_norm(), std::slice::from_ref(&xl), false).unwrap().remove(0);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn similarity_through_a_tanh_network_matches_finite_differences() {
    let (_, u, data) = small_update(2);
    let delta = Tensor::vector(u.weight_update().unwrap());
    let labels = data.labels().to_vec();
    let f = |x: &Tensor| {
        with_grad_mode(true, || {
            let w = u.w0.leaves();
            let loss = cross_entropy(&forward_classifier(&u.arch, &w, x).unwrap(), &labels).unwrap();
            Ok(sim_loss(&delta, &w, &loss).unwrap())
        })
    };
    let err = finite_diff_check(f, &data.all(), 1e-4).unwrap();
    assert!(err < 1e-3, "{err}");
}
