//! Non-convex BN-ReLU reference models, their analytic gradients and
//! gradient-descent training.

mod forward;
mod grad;
mod params;
mod train;

pub use forward::{
    bn_apply, bn_apply_cnn, deep_forward, deep_forward_activations, forward, forward_input,
    forward_patches, objective, objective_input, predict_with_stats, BnStats, ForwardReport, Loss,
    NetInput, Regularization, SquaredLoss,
};
pub(crate) use forward::{combine, forward_states, BnScale};
pub use grad::{gradients, gradients_input, kink_distance, numerical_gradients, Gradients};
pub(crate) use grad::{head_gradient, unit_gradient, UnitGradient};
pub use params::{balancing_eta, rescale_units, Arch, BnLayerParams, BnNetwork, DeepBnNetwork};
pub use train::{train_gd, train_gd_eval, EpochRecord, EvalSet, TrainConfig, TrainError, TrainLog};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{center, compact_svd, DenseMatrix};
    use crate::rng::Prng;

    type M = DenseMatrix<f64>;

    fn m(rows: &[&[f64]]) -> M {
        M::from_f64_rows(rows).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut Prng) -> M {
        M::from_fn(rows, cols, |_, _| rng.gaussian())
    }

    fn single_unit(arch: Arch, w: &[f64], gamma: f64, alpha: f64, w2: f64) -> BnNetwork<f64> {
        let hidden = BnLayerParams::new(M::column_vector(w).unwrap(), vec![gamma], vec![alpha]).unwrap();
        BnNetwork::new(hidden, m(&[&[w2]]), arch).unwrap()
    }

    #[test]
    fn bn_apply_examples() {
        let a = m(&[&[1.0], &[2.0], &[3.0]]);
        let out = bn_apply(&a, &[1.0], 1.0, 0.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (o, e) in out.iter().zip([-h, 0.0, h]) {
            assert!((o - e).abs() < 1e-15);
        }
        let shift = bn_apply(&a, &[0.0], 0.0, 1.0).unwrap();
        assert!(shift.iter().all(|&v| (v - 1.0 / 3f64.sqrt()).abs() < 1e-15));
        assert!(matches!(bn_apply(&a, &[0.0], 1.0, 0.0), Err(crate::Error::DegenerateDirection { .. })));
    }

    #[test]
    fn bn_output_structure() {
        let mut rng = Prng::new(4);
        let a = random(7, 3, &mut rng);
        let w: Vec<f64> = rng.gaussian_vec(3);
        let out = bn_apply(&a, &w, -1.7, 0.4).unwrap();
        let mean = crate::linalg::vector::mean(&out);
        let c = crate::linalg::vector::centered(&out);
        assert!((crate::linalg::vector::norm2(&c) - 1.7).abs() < 1e-12);
        assert!((mean - 0.4 / 7f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cnn_bn_reduces_and_is_symmetric() {
        let a = m(&[&[1.0, 0.5], &[2.0, -1.0], &[3.0, 0.0]]);
        let w = [0.7, -0.2];
        let single = bn_apply_cnn(std::slice::from_ref(&a), &w, 0.8, 0.3).unwrap();
        assert_eq!(single[0], bn_apply(&a, &w, 0.8, 0.3).unwrap());
        let twin = bn_apply_cnn(&[a.clone(), a], &w, 0.8, 0.3).unwrap();
        assert_eq!(twin[0], twin[1]);
    }

    #[test]
    fn cnn_bn_toy_values() {
        // Patches [[1],[2]] and [[3],[5]], z = 1: mean 11/4, deviations
        // (-7/4, -3/4, 1/4, 9/4), squared norm 140/16.
        let p1 = m(&[&[1.0], &[2.0]]);
        let p2 = m(&[&[3.0], &[5.0]]);
        let out = bn_apply_cnn(&[p1, p2], &[1.0], 1.0, 1.0).unwrap();
        let norm = (140.0f64 / 16.0).sqrt();
        let expect = [[-1.75, -0.75], [0.25, 2.25]];
        for k in 0..2 {
            for i in 0..2 {
                assert!((out[k][i] - (expect[k][i] / norm + 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_examples() {
        let x = m(&[&[1.0], &[2.0], &[3.0]]);
        let net = single_unit(Arch::FcPreBn, &[1.0], 1.0, 0.0, 1.0);
        let f = forward(&net, &x).unwrap();
        assert_eq!(f[(0, 0)], 0.0);
        assert_eq!(f[(1, 0)], 0.0);
        assert!((f[(2, 0)] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        let zero = single_unit(Arch::FcPreBn, &[1.0], 1.0, 0.0, 0.0);
        assert_eq!(forward(&zero, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn degenerate_unit_is_flagged_and_zeroed() {
        let x = m(&[&[1.0, 2.0], &[1.0, 3.0], &[1.0, 4.0]]);
        let mut net = BnNetwork::<f64>::init(2, 2, 1, Arch::FcPreBn, 3);
        net.hidden.w.set_column(0, &[1.0, 0.0]);
        let report = forward_input(&net, &NetInput::Dense(x.clone())).unwrap();
        assert_eq!(report.degenerate_units, vec![0]);
        let only = forward(&net.select_units(&[1]), &x).unwrap();
        assert_eq!(report.output, only);
        let y = M::zeros(3, 1);
        assert!(matches!(gradients(&net, &x, &y, 0.1), Err(crate::Error::DegenerateDirection { unit: 0 })));
    }

    #[test]
    fn whitened_twin_matches() {
        let mut rng = Prng::new(10);
        let x = random(9, 4, &mut rng);
        let y = random(9, 2, &mut rng);
        let net = BnNetwork::init(4, 5, 2, Arch::FcPreBn, 11);
        let svd = compact_svd(&center(&x).unwrap(), 1e-10).unwrap();
        let twin = net.to_whitened(&svd).unwrap();
        let f1 = forward(&net, &x).unwrap();
        let f2 = forward(&twin, &svd.u).unwrap();
        assert!(f1.sub(&f2).max_abs() < 1e-12);
        let o1 = objective(&net, &x, &y, 0.3).unwrap();
        let o2 = objective(&twin, &svd.u, &y, 0.3).unwrap();
        assert!((o1 - o2).abs() < 1e-12);
    }

    #[test]
    fn objective_trivial_cases() {
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let y = m(&[&[1.0], &[-2.0], &[0.5]]);
        let empty = BnNetwork::empty(2, 1, Arch::FcPreBn);
        assert_eq!(objective(&empty, &x, &y, 0.7).unwrap(), 0.5 * 5.25);
        let net = BnNetwork::init(2, 3, 1, Arch::FcPreBn, 1);
        let f = forward(&net, &x).unwrap();
        let loss = 0.5 * f.sub(&y).frobenius_norm().powi(2);
        assert!((objective(&net, &x, &y, 0.0).unwrap() - loss).abs() < 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = Prng::new(2);
        let x = random(6, 3, &mut rng);
        let net = BnNetwork::init(3, 4, 2, Arch::FcPreBn, 5);
        let y = forward(&net, &x).unwrap();
        assert_eq!(gradients(&net, &x, &y, 0.0).unwrap().max_abs(), 0.0);
    }

    fn fd_check(arch: Arch, reg: Regularization, seed: u64) {
        let mut rng = Prng::new(seed);
        let (n, d, width, c) = (7, 3, 3, 2);
        let input = match arch {
            Arch::Cnn => NetInput::Patches(vec![random(n, d, &mut rng), random(n, d, &mut rng)]),
            _ => NetInput::Dense(random(n, d, &mut rng)),
        };
        let y = random(n, c, &mut rng);
        let mut attempt = 0;
        let net = loop {
            let mut net = BnNetwork::init(d, width, c, arch, seed * 100 + attempt);
            net.hidden.alpha = rng.gaussian_vec(width);
            if kink_distance(&net, &input).unwrap() > 1e-3 {
                break net;
            }
            attempt += 1;
        };
        let a = gradients_input(&net, &input, &y, 0.3, reg).unwrap();
        let b = numerical_gradients(&net, &input, &y, 0.3, reg, 1e-5).unwrap();
        let rel = |p: &M, q: &M| p.sub(q).frobenius_norm() / (1e-8 + q.frobenius_norm());
        assert!(rel(&a.w, &b.w) < 1e-6, "{arch:?} w: {}", rel(&a.w, &b.w));
        assert!(rel(&a.w2, &b.w2) < 1e-6);
        let gv = |v: &[f64]| M::column_vector(v).unwrap();
        assert!(rel(&gv(&a.gamma), &gv(&b.gamma)) < 1e-6);
        assert!(rel(&gv(&a.alpha), &gv(&b.alpha)) < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, arch) in [Arch::FcPreBn, Arch::FcPostBn, Arch::Cnn, Arch::Whitened].into_iter().enumerate() {
            fd_check(arch, Regularization::Head, 20 + k as u64);
            fd_check(arch, Regularization::Full, 40 + k as u64);
        }
    }

    #[test]
    fn rescaling_keeps_the_function() {
        let mut rng = Prng::new(8);
        let x = random(6, 3, &mut rng);
        let net = BnNetwork::init(3, 4, 2, Arch::FcPreBn, 9);
        assert_eq!(rescale_units(&net, &[1.0; 4]).unwrap(), net);
        let scaled = rescale_units(&net, &[2.0, 1.0, 0.5, 3.0]).unwrap();
        assert!(forward(&net, &x).unwrap().sub(&forward(&scaled, &x).unwrap()).max_abs() < 1e-12);
        assert!((scaled.head_regularizer() - net.head_regularizer()).abs() > 1e-3);
        let balanced = rescale_units(&net, &balancing_eta(&net)).unwrap();
        for j in 0..4 {
            let head = balanced.hidden.gamma[j].hypot(balanced.hidden.alpha[j]);
            let out = crate::linalg::vector::norm2(balanced.w2.row(j));
            assert!((head - out).abs() < 1e-12);
        }
        assert!((balanced.head_regularizer() - net.balanced_regularizer()).abs() < 1e-12);
        assert!(rescale_units(&net, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_learning_rate_is_flat() {
        let mut rng = Prng::new(3);
        let x = NetInput::Dense(random(8, 3, &mut rng));
        let y = random(8, 1, &mut rng);
        let net = BnNetwork::init(3, 4, 1, Arch::FcPreBn, 2);
        let cfg = TrainConfig { lr: 0.0, epochs: 5, ..TrainConfig::default() };
        let log = train_gd(&net, &x, &y, &cfg).unwrap();
        assert_eq!(log.network, net);
        assert!(log.records.iter().all(|r| r.objective == log.initial_objective));
    }

    #[test]
    fn one_step_is_one_gradient_update() {
        let mut rng = Prng::new(13);
        let xm = random(8, 3, &mut rng);
        let y = random(8, 1, &mut rng);
        let net = BnNetwork::init(3, 4, 1, Arch::FcPreBn, 2);
        let cfg = TrainConfig { lr: 0.05, epochs: 1, beta: 0.1, ..TrainConfig::default() };
        let log = train_gd(&net, &NetInput::Dense(xm.clone()), &y, &cfg).unwrap();
        let g = gradients(&net, &xm, &y, 0.1).unwrap();
        assert_eq!(log.network.hidden.w, net.hidden.w.sub(&g.w.scale(0.05)));
        assert_eq!(log.network.w2, net.w2.sub(&g.w2.scale(0.05)));
        for j in 0..4 {
            assert_eq!(log.network.hidden.gamma[j], net.hidden.gamma[j] - 0.05 * g.gamma[j]);
            assert_eq!(log.network.hidden.alpha[j], net.hidden.alpha[j] - 0.05 * g.alpha[j]);
        }
    }

    #[test]
    fn small_steps_descend() {
        let mut rng = Prng::new(17);
        let x = NetInput::Dense(random(8, 3, &mut rng));
        let y = random(8, 1, &mut rng);
        let net = BnNetwork::init(3, 16, 1, Arch::FcPreBn, 4);
        let cfg = TrainConfig { lr: 1e-3, epochs: 500, beta: 1e-2, ..TrainConfig::default() };
        let log = train_gd(&net, &x, &y, &cfg).unwrap();
        let mut prev = log.initial_objective;
        let mut down = 0;
        for r in &log.records {
            if r.objective <= prev {
                down += 1;
            }
            prev = r.objective;
        }
        assert!(down as f64 >= 0.95 * log.records.len() as f64);
    }

    #[test]
    fn minibatch_training_is_deterministic() {
        let mut rng = Prng::new(23);
        let x = NetInput::Dense(random(12, 3, &mut rng));
        let y = random(12, 2, &mut rng);
        let net = BnNetwork::init(3, 5, 2, Arch::FcPostBn, 6);
        let cfg = TrainConfig { lr: 0.01, epochs: 20, batch_size: Some(4), seed: 5, momentum: 0.9, ..TrainConfig::default() };
        let a = train_gd(&net, &x, &y, &cfg).unwrap();
        let b = train_gd(&net, &x, &y, &cfg).unwrap();
        assert_eq!(a, b);
        let p = predict_with_stats(&a.network, &x, &a.stats).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn full_batch_stats_reproduce_training_forward() {
        let mut rng = Prng::new(29);
        let xm = random(10, 3, &mut rng);
        let y = random(10, 1, &mut rng);
        let net = BnNetwork::init(3, 4, 1, Arch::FcPreBn, 7);
        let input = NetInput::Dense(xm.clone());
        let cfg = TrainConfig { lr: 0.01, epochs: 3, ..TrainConfig::default() };
        let log = train_gd(&net, &input, &y, &cfg).unwrap();
        let a = predict_with_stats(&log.network, &input, &log.stats).unwrap();
        let b = forward(&log.network, &xm).unwrap();
        assert!(a.sub(&b).max_abs() < 1e-12);
    }

    #[test]
    fn huge_step_reports_divergence() {
        let mut rng = Prng::new(31);
        let x = NetInput::Dense(random(8, 3, &mut rng));
        let y = random(8, 1, &mut rng).scale(1e100);
        let net = BnNetwork::init(3, 4, 1, Arch::FcPreBn, 7);
        let cfg = TrainConfig { lr: 1e250, epochs: 50, beta: 0.0, ..TrainConfig::default() };
        match train_gd(&net, &x, &y, &cfg) {
            Err(TrainError::Divergence { last, .. }) => assert!(last.final_objective().is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn deep_activations() {
        let mut rng = Prng::new(37);
        let x = random(6, 4, &mut rng);
        let deep = DeepBnNetwork::<f64>::init(&[4, 10, 12], 1, 2);
        assert_eq!(deep_forward_activations(&deep, &x, 0).unwrap(), x);
        let a1 = deep_forward_activations(&deep, &x, 1).unwrap();
        let two = BnNetwork::new(deep.layers[0].clone(), M::zeros(10, 1), Arch::FcPreBn).unwrap();
        let hidden = (0..10).map(|j| {
            let s = bn_apply(&x, &two.unit_weights(j), two.hidden.gamma[j], two.hidden.alpha[j]).unwrap();
            crate::linalg::vector::relu(&s)
        });
        for (j, col) in hidden.enumerate() {
            assert_eq!(a1.column(j), col);
        }
        let a2 = deep_forward_activations(&deep, &x, 2).unwrap();
        assert_eq!(a2.shape(), (6, 12));
        assert!(deep_forward_activations(&deep, &x, 3).is_err());
        assert_eq!(deep.depth(), 3);
    }

    #[test]
    fn json_roundtrip() {
        let net = BnNetwork::<f64>::init(3, 2, 1, Arch::Cnn, 1);
        let s = serde_json::to_string(&net).unwrap();
        assert!(s.contains("\"arch\":\"cnn\""));
        let back: BnNetwork<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, net);
    }
}
