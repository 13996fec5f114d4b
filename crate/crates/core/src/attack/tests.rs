use super::*;
use crate::data::gen_shapes_dataset;
use crate::fl::LocalTrainConfig;
use crate::tensor::finite_diff_check;
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

fn setup(lr: f64, epochs: usize, batch: usize) -> (ClientUpdate, ClientDataset) {
    let spec = ClassifierSpec {
        hidden: vec![12],
        ..ClassifierSpec::mlp([1, 8, 8], 4)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = spec.init(&mut rng).unwrap();
    let data = gen_shapes_dataset(2, 8, 4, 7).unwrap();
    let u = ClientUpdate::train(&spec, &p, &data, &LocalTrainConfig::sgd(epochs, batch, lr)).unwrap();
    (u, data)
}

fn quick(iters: usize) -> AttackConfig {
    AttackConfig {
        max_iters: iters,
        lambda: 0.0,
        ..AttackConfig::default()
    }
}

#[test]
fn one_step_update_has_zero_loss_at_truth() {
    let (u, data) = setup(0.1, 1, 2);
    let delta = Tensor::vector(u.weight_update().unwrap());
    let w_hat = u.w0.leaves();
    let s = with_grad_mode(true, || {
        let loss = cross_entropy(&forward_classifier(&u.arch, &w_hat, &data.all()).unwrap(), data.labels()).unwrap();
        sim_loss(&delta, &w_hat, &loss).unwrap().item()
    });
    assert!(s.abs() < 1e-12, "{s}");
}

#[test]
fn zero_update_is_degenerate() {
    let (u, data) = setup(0.0, 1, 2);
    let err = run_attack(&u, data.labels(), None, &quick(3), AttackVariant::Surrogate, None).unwrap_err();
    assert!(matches!(err, AttackError::Degenerate(_)));
}

#[test]
fn zero_budget_returns_initialisation() {
    let (u, data) = setup(0.1, 1, 2);
    let cfg = quick(0);
    let r = run_attack(&u, data.labels(), None, &cfg, AttackVariant::Surrogate, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init: Vec<f64> = (0..r.images.len()).map(|_| rng.random_range(0.25..=0.75)).collect();
    assert_eq!(r.images, init);
    assert_eq!(r.stop_reason, StopReason::Budget);
    assert_eq!(r.iterations, 0);
    assert_eq!(r.alpha, 0.5);
}

#[test]
fn surrogate_endpoints() {
    let (u, _) = setup(0.1, 2, 1);
    let at0 = surrogate_weights(&u.w0, &u.wt, &Tensor::scalar(0.0)).unwrap();
    let at1 = surrogate_weights(&u.w0, &u.wt, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(at0.flatten(), u.wt.flatten());
    for (a, b) in at1.flatten().iter().zip(u.w0.flatten()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let (u, data) = setup(0.1, 2, 1);
    let delta = Tensor::vector(u.weight_update().unwrap());
    let labels = data.labels().to_vec();
    let cfg = AttackConfig {
        tv_weight: 0.0,
        ..quick(10)
    };
    let x = Tensor::new((0..128).map(|i| 0.3 + 0.4 * ((i * 29) % 17) as f64 / 17.0).collect(), &[2, 1, 8, 8]).unwrap();
    let f = |x: &Tensor| -> crate::tensor::Result<Tensor> {
        with_grad_mode(true, || {
            let w_hat = surrogate_weights(&u.w0, &u.wt, &Tensor::scalar(0.4).requires_grad()).unwrap();
            Ok(total_loss(&u, &delta, &w_hat, x, &labels, None, &cfg, 0).unwrap().total)
        })
    };
    let err = finite_diff_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attack_is_deterministic_and_stays_in_range() {
    let (u, data) = setup(0.1, 2, 1);
    let cfg = quick(15);
    let a = run_attack(&u, data.labels(), None, &cfg, AttackVariant::Surrogate, Some(&data)).unwrap();
    let b = run_attack(&u, data.labels(), None, &cfg, AttackVariant::Surrogate, Some(&data)).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.trace, b.trace);
    assert!(a.images.iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(a.trace.alpha.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(a.trace.len(), 15);
    assert!(a.trace.sim.last().unwrap() < &a.trace.sim[0]);
    assert!(a.panel.is_some());
}

#[test]
fn naive_keeps_alpha_at_one() {
    let (u, data) = setup(0.1, 2, 1);
    let r = naive_attack(&u, data.labels(), None, &quick(5), None).unwrap();
    assert!(r.trace.alpha.iter().all(|&a| a == 1.0));
}

#[test]
fn threshold_stop() {
    let (u, data) = setup(0.1, 2, 1);
    let cfg = AttackConfig { tau: 2.5, ..quick(10) };
    let r = run_attack(&u, data.labels(), None, &cfg, AttackVariant::Surrogate, None).unwrap();
    assert_eq!(r.stop_reason, StopReason::Threshold);
    assert_eq!(r.iterations, 0);
}

#[test]
fn soft_labels_run() {
    let (u, data) = setup(0.1, 2, 1);
    let cfg = AttackConfig {
        labels: LabelMode::Optimize,
        ..quick(5)
    };
    let r = run_attack(&u, &[], None, &cfg, AttackVariant::Surrogate, Some(&data)).unwrap();
    assert_eq!(r.trace.len(), 5);
}

#[test]
fn label_count_must_match() {
    let (u, _) = setup(0.1, 2, 1);
    assert!(run_attack(&u, &[0], None, &quick(2), AttackVariant::Surrogate, None).is_err());
}

#[test]
fn trace_csv_header() {
    let mut t = LossTrace::default();
    t.sim.push(0.5);
    t.flow.push(0.0);
    t.tv.push(0.1);
    t.total.push(0.51);
    t.alpha.push(0.5);
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    let s = String::from_utf8(out).unwrap();
    assert!(s.starts_with("iteration,L_sim,L_flow,TV,total,alpha\n0,"));
}

#[test]
fn matching_undoes_a_permutation() {
    let imgs: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64 / 5.0; 4]).collect();
    let perm = [3, 0, 4, 1, 2];
    let recons: Vec<&[f64]> = perm.iter().map(|&p| imgs[p].as_slice()).collect();
    let targets: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
    let a = match_reconstructions(&recons, &targets).unwrap();
    for (j, &r) in a.iter().enumerate() {
        assert_eq!(perm[r], j);
    }
    assert!(match_reconstructions(&recons[..4], &targets).is_err());
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], j: usize, used: &mut Vec<bool>) -> f64 {
        if j == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.len() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost[j][r] + go(cost, j + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.len()])
}

proptest! {
    #[test]
    fn exact_matching_is_optimal(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let a = exact_assignment(&cost);
        let mut seen = a.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let total: f64 = a.iter().enumerate().map(|(j, &r)| cost[j][r]).sum();
        prop_assert!((total - brute_force(&cost)).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_is_a_permutation(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let mut a = greedy_assignment(&cost);
        a.sort();
        prop_assert_eq!(a, (0..n).collect::<Vec<_>>());
    }
}
