use myoschema::mae::{BodySchemaNet, Mask, Normalizer, SensorSample};
use myoschema::{
    grow_network, grow_normalizer, retrain, retrain_loss, sample_pseudo_old, w_loss_value, Architecture,
    LossReduction, Method, RMask, RetrainConfig, SamplerRanges,
};
use proptest::prelude::*;

fn sample(m: usize) -> impl Strategy<Value = SensorSample> {
    (
        prop::collection::vec(0.0f64..2.1, 1),
        prop::collection::vec(0.0f64..80.0, m),
        prop::collection::vec(-0.08f64..0.06, m),
    )
        .prop_map(|(t, f, l)| SensorSample::new(t, f, l))
}

fn old_net(seed: u64) -> (BodySchemaNet, SamplerRanges) {
    let data: Vec<SensorSample> = (0..12)
        .map(|i| {
            let t = 0.17 * i as f64;
            SensorSample::new(vec![t], vec![10.0 + 3.0 * t, 25.0 - t, 18.0 + t], vec![-0.02 * t, 0.01 * t, -0.015 * t])
        })
        .collect();
    let arch = Architecture { hidden: 12, latent: 5 };
    let net = BodySchemaNet::new(1, 3, arch, Normalizer::fit(&data).unwrap(), seed).unwrap();
    (net, SamplerRanges::from_dataset(&data).unwrap())
}

/// L2 norm of each θ/f/l block of the normalized residual, r applied to f and l.
fn block_norms(net: &BodySchemaNet, s: &SensorSample, mask: Mask, r: &[f64]) -> f64 {
    let (n, m) = (net.n_joints(), net.n_muscles());
    let out = net.reconstruct_normalized(&net.assemble_input(s, mask).unwrap()).unwrap();
    let target = net.normalizer().normalize(s).unwrap();
    let res: Vec<f64> = (0..out.len()).map(|k| (out[k] - target[k]) * r[k]).collect();
    let norm = |lo: usize, hi: usize| res[lo..hi].iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(0, n) + norm(n, n + m) + norm(n + m, n + 2 * m)
}

fn oracle_term(net: &BodySchemaNet, batch: &[SensorSample], r: &[f64]) -> f64 {
    let total: f64 = batch.iter().flat_map(|s| Mask::ALL.map(|mask| block_norms(net, s, mask, r))).sum();
    total / (3 * batch.len()) as f64
}

fn grown(seed: u64, new_data: &[SensorSample]) -> BodySchemaNet {
    let (old, _) = old_net(seed);
    let mut net = grow_network(&old, 4).unwrap();
    net.set_normalizer(grow_normalizer(old.normalizer(), new_data).unwrap()).unwrap();
    net
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_matches_straight_line_oracle(
        seed in any::<u64>(),
        new in prop::collection::vec(sample(4), 1..4),
        pseudo in prop::collection::vec(sample(4), 1..4),
        w in 0.0f64..2.0,
    ) {
        let net = grown(seed, &new);
        let r = RMask::new(1, 3, 4).unwrap();
        let (loss, grads) = retrain_loss(&net, &new, &pseudo, &r, w, LossReduction::BatchMean).unwrap();
        let ones = vec![1.0; 9];
        let l_new = oracle_term(&net, &new, &ones);
        let l_old = oracle_term(&net, &pseudo, r.values());
        prop_assert!((loss.new - l_new).abs() < 1e-12 * (1.0 + l_new));
        if w != 0.0 {
            prop_assert!((loss.old - l_old).abs() < 1e-12 * (1.0 + l_old));
        }
        prop_assert!((loss.total - (l_new + w * l_old)).abs() < 1e-11 * (1.0 + loss.total));
        prop_assert!(grads.is_finite());
    }

    #[test]
    fn loss_is_linear_in_w(
        seed in any::<u64>(),
        new in prop::collection::vec(sample(4), 1..4),
        pseudo in prop::collection::vec(sample(4), 1..4),
        w in 0.01f64..3.0,
    ) {
        let net = grown(seed, &new);
        let r = RMask::new(1, 3, 4).unwrap();
        let (at_w, g_w) = retrain_loss(&net, &new, &pseudo, &r, w, LossReduction::BatchMean).unwrap();
        let (at_one, g_one) = retrain_loss(&net, &new, &pseudo, &r, 1.0, LossReduction::BatchMean).unwrap();
        let (at_zero, g_zero) = retrain_loss(&net, &new, &pseudo, &r, 0.0, LossReduction::BatchMean).unwrap();
        prop_assert_eq!(at_zero.total, at_zero.new);
        prop_assert!((at_w.total - (at_zero.total + w * (at_one.total - at_zero.total))).abs() < 1e-10 * (1.0 + at_w.total));
        // the gradient decomposes the same way
        let mut expect = g_one.clone();
        expect.add_scaled(&g_zero, -1.0);
        expect.scale(w);
        expect.add_scaled(&g_zero, 1.0);
        let diff = {
            let mut d = g_w.clone();
            d.add_scaled(&expect, -1.0);
            d.max_abs()
        };
        prop_assert!(diff < 1e-10 * (1.0 + g_w.max_abs()));
    }

    #[test]
    fn all_ones_r_mask_reduces_old_term_to_new_formula(
        seed in any::<u64>(),
        batch in prop::collection::vec(sample(4), 1..4),
    ) {
        let net = grown(seed, &batch);
        let ones = RMask::ones(1, 4);
        let (as_old, _) = retrain_loss(&net, &[], &batch, &ones, 1.0, LossReduction::BatchMean).unwrap();
        let (as_new, _) = retrain_loss(&net, &batch, &[], &ones, 0.0, LossReduction::BatchMean).unwrap();
        prop_assert!((as_old.old - as_new.new).abs() < 1e-12 * (1.0 + as_new.new));
    }

    #[test]
    fn masked_terms_never_train_added_output_rows(
        seed in any::<u64>(),
        pseudo in prop::collection::vec(sample(4), 1..5),
    ) {
        let net = grown(seed, &pseudo);
        let r = RMask::new(1, 3, 4).unwrap();
        let (_, grads) = retrain_loss(&net, &[], &pseudo, &r, 1.0, LossReduction::BatchMean).unwrap();
        let last = grads.decoder.layers().last().unwrap();
        // rows 4 (f4) and 8 (l4) of the output layer
        for row in [4usize, 8] {
            let w = &last.weights()[row * last.inputs()..(row + 1) * last.inputs()];
            prop_assert!(w.iter().all(|v| *v == 0.0));
            prop_assert_eq!(last.biases()[row], 0.0);
        }
    }

    #[test]
    fn pseudo_samples_come_from_the_teacher(seed in any::<u64>(), batch in 0usize..20) {
        let (old, ranges) = old_net(seed);
        let pb = sample_pseudo_old(&old, &ranges, batch, seed ^ 5, 5).unwrap();
        prop_assert_eq!(pb.samples.len(), batch);
        let expect = RMask::new(1, 3, 5).unwrap();
        prop_assert_eq!(pb.r_mask.values(), expect.values());
        for s in &pb.samples {
            prop_assert_eq!(&s.tension[3..], &[0.0, 0.0]);
            prop_assert_eq!(&s.length[3..], &[0.0, 0.0]);
            let (lo, hi) = ranges.theta[0];
            prop_assert!(s.theta[0] >= lo && s.theta[0] <= hi);
            for (i, f) in s.tension[..3].iter().enumerate() {
                prop_assert!(*f >= ranges.tension[i].0 && *f <= ranges.tension[i].1);
            }
            let direct = old
                .mae_forward(&SensorSample::new(s.theta.clone(), s.tension[..3].to_vec(), vec![0.0; 3]), Mask::ThetaF)
                .unwrap();
            prop_assert_eq!(&s.length[..3], &direct.length[..]);
        }
    }
}

#[test]
fn schedule_values() {
    assert_eq!(w_loss_value(Method::III, 0, 100).unwrap(), 1.0);
    assert_eq!(w_loss_value(Method::III, 99, 100).unwrap(), 0.01);
    for e in [0, 17, 99] {
        assert_eq!(w_loss_value(Method::I, e, 100).unwrap(), 0.0);
        assert_eq!(w_loss_value(Method::II, e, 100).unwrap(), 1.0);
    }
    assert!(w_loss_value(Method::II, 100, 100).is_err());
    for n in [1, 2, 7, 3000] {
        assert!(w_loss_value(Method::III, n - 1, n).unwrap() <= 1.0 / n as f64);
    }
}

#[test]
fn retraining_leaves_teacher_untouched_and_is_deterministic() {
    let (old, ranges) = old_net(3);
    let snapshot = old.clone();
    let d_new: Vec<SensorSample> = (0..4)
        .map(|i| {
            let t = 0.4 * i as f64;
            SensorSample::new(vec![t], vec![10.0, 20.0, 15.0, 9.0 + t], vec![-0.02 * t, 0.01 * t, -0.01 * t, -0.012 * t])
        })
        .collect();
    let mut net = grow_network(&old, 4).unwrap();
    net.set_normalizer(grow_normalizer(old.normalizer(), &d_new).unwrap()).unwrap();
    let cfg = RetrainConfig { epochs: 60, seed: 11, ..Default::default() };
    let (a, hist_a) = retrain(&net, &old, &d_new, &cfg, &ranges).unwrap();
    let (b, hist_b) = retrain(&net, &old, &d_new, &cfg, &ranges).unwrap();
    assert_eq!(old, snapshot);
    assert_eq!(a, b);
    assert_eq!(hist_a, hist_b);
    assert_eq!(hist_a.first().unwrap().w_loss, 1.0);
    assert!(hist_a.first().unwrap().total > hist_a.last().unwrap().total);

    let zero = RetrainConfig { epochs: 0, ..cfg.clone() };
    let (same, hist) = retrain(&net, &old, &d_new, &zero, &ranges).unwrap();
    assert!(hist.is_empty());
    assert_eq!(same.encoder(), net.encoder());
    assert_eq!(same.decoder(), net.decoder());
    assert!(retrain(&net, &old, &[], &cfg, &ranges).is_err());
}
