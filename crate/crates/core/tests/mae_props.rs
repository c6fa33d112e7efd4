use myoschema::mae::{assemble_input, BodySchemaNet, Mask, Normalizer, SensorSample};
use myoschema::netcore::DenseNet;
use myoschema::{solve_control, Architecture, ControlSolveConfig};
use proptest::prelude::*;

const M: usize = 3;

fn sample_strategy() -> impl Strategy<Value = SensorSample> {
    (
        prop::collection::vec(0.0f64..2.1, 1),
        prop::collection::vec(0.0f64..80.0, M),
        prop::collection::vec(-0.08f64..0.06, M),
    )
        .prop_map(|(t, f, l)| SensorSample::new(t, f, l))
}

fn dataset_strategy() -> impl Strategy<Value = Vec<SensorSample>> {
    prop::collection::vec(sample_strategy(), 2..30)
}

fn random_net(data: &[SensorSample], seed: u64) -> BodySchemaNet {
    let arch = Architecture { hidden: 12, latent: 4 };
    BodySchemaNet::new(1, M, arch, Normalizer::fit(data).unwrap(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_round_trips(data in dataset_strategy(), probe in sample_strategy()) {
        let norm = Normalizer::fit(&data).unwrap();
        let back = norm.denormalize(&norm.normalize(&probe).unwrap()).unwrap();
        for (a, b) in back.to_vec().iter().zip(probe.to_vec()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn masked_block_never_reaches_the_output(
        data in dataset_strategy(),
        seed in any::<u64>(),
        probe in sample_strategy(),
        other in sample_strategy(),
    ) {
        let net = random_net(&data, seed);
        for mask in Mask::ALL {
            let mut changed = probe.clone();
            match mask {
                Mask::ThetaF => changed.length = other.length.clone(),
                Mask::FL => changed.theta = other.theta.clone(),
                Mask::LTheta => changed.tension = other.tension.clone(),
            }
            prop_assert_eq!(net.mae_forward(&probe, mask).unwrap(), net.mae_forward(&changed, mask).unwrap());
        }
    }

    #[test]
    fn solve_loss_never_increases(data in dataset_strategy(), seed in any::<u64>(), theta in 0.0f64..2.1) {
        let net = random_net(&data, seed);
        let cfg = ControlSolveConfig { iterations: 40, weight_torque: 1.0, torque_ref: vec![0.5], ..Default::default() };
        let sol = solve_control(&net, &[theta], None, &cfg).unwrap();
        for w in sol.loss_history.windows(2) {
            prop_assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn assemble_zeroes_the_hidden_block() {
    let s = SensorSample::new(vec![0.4], vec![10.0, 20.0, 30.0], vec![0.01, -0.02, 0.03]);
    let id = Normalizer::identity(1, M);
    let x = assemble_input(&s, Mask::LTheta, &id).unwrap();
    assert_eq!(x, vec![0.4, 0.0, 0.0, 0.0, 0.01, -0.02, 0.03, 1.0, 0.0, 1.0]);
    let x = assemble_input(&s, Mask::ThetaF, &id).unwrap();
    assert_eq!(&x[4..7], &[0.0, 0.0, 0.0]);
    let x = assemble_input(&s, Mask::FL, &id).unwrap();
    assert_eq!(x[0], 0.0);
    assert!(assemble_input(&SensorSample::new(vec![0.0], vec![1.0], vec![1.0]), Mask::FL, &id).is_err());
}

fn zero_net() -> BodySchemaNet {
    let norm = Normalizer {
        theta: myoschema::ChannelStats { mean: vec![1.1], std: vec![0.5] },
        tension: myoschema::ChannelStats { mean: vec![12.0, 25.0, 31.0], std: vec![3.0, 4.0, 5.0] },
        length: myoschema::ChannelStats { mean: vec![0.01, -0.02, -0.03], std: vec![0.01, 0.01, 0.02] },
    };
    let enc = DenseNet::zeros(&[10, 8, 4]).unwrap();
    let dec = DenseNet::zeros(&[4, 8, 7]).unwrap();
    BodySchemaNet::from_parts(1, M, enc, dec, norm).unwrap()
}

#[test]
fn zero_weight_net_returns_channel_means() {
    let net = zero_net();
    let s = SensorSample::new(vec![0.2], vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]);
    for mask in Mask::ALL {
        let out = net.mae_forward(&s, mask).unwrap();
        assert_eq!(out.theta, vec![1.1]);
        assert_eq!(out.tension, vec![12.0, 25.0, 31.0]);
        assert_eq!(out.length, vec![0.01, -0.02, -0.03]);
    }
    assert_eq!(net.estimate_joint_angles(&s.tension, &s.length).unwrap(), vec![1.1]);
    assert_eq!(net.predict_muscle_length(&s.theta, &s.tension).unwrap(), vec![0.01, -0.02, -0.03]);
    assert_eq!(net.predict_tension(&s.theta, &s.length).unwrap(), vec![12.0, 25.0, 31.0]);
}

#[test]
fn zero_iterations_decode_the_seed_latent() {
    let data: Vec<SensorSample> = (0..10)
        .map(|i| {
            let t = 0.2 * i as f64;
            SensorSample::new(vec![t], vec![10.0 + t, 20.0, 30.0 - t], vec![-0.02 * t, 0.01 * t, -0.01 * t])
        })
        .collect();
    let net = random_net(&data, 9);
    let cfg = ControlSolveConfig { iterations: 0, ..Default::default() };
    let sol = solve_control(&net, &[0.7], None, &cfg).unwrap();
    let tension = net.normalizer().tension.mean.clone();
    let probe = SensorSample::new(vec![0.7], tension, vec![0.0; M]);
    let decoded = net.mae_forward(&probe, Mask::ThetaF).unwrap();
    for (a, b) in sol.length_ref.iter().zip(&decoded.length) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn model_file_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<SensorSample> = (0..5)
        .map(|i| SensorSample::new(vec![0.1 * i as f64], vec![1.0, 2.0 + i as f64, 3.0], vec![0.01, 0.02, 0.03 * i as f64]))
        .collect();
    let mut net = random_net(&data, 4);
    net.metadata.insert("seed".into(), "4".into());
    let path = dir.path().join("h.model");
    net.save(&path).unwrap();
    assert_eq!(BodySchemaNet::load(&path).unwrap(), net);
    assert!(BodySchemaNet::load(dir.path().join("missing.model")).is_err());
}
