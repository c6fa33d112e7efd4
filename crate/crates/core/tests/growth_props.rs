use myoschema::mae::{BodySchemaNet, Mask, Normalizer, SensorSample};
use myoschema::{grow_network, grow_network_with, grow_normalizer, Architecture, GrowOptions};
use proptest::prelude::*;

fn sample(m: usize) -> impl Strategy<Value = SensorSample> {
    (
        prop::collection::vec(0.0f64..2.1, 1),
        prop::collection::vec(0.0f64..80.0, m),
        prop::collection::vec(-0.08f64..0.06, m),
    )
        .prop_map(|(t, f, l)| SensorSample::new(t, f, l))
}

fn old_net(data: &[SensorSample], seed: u64) -> BodySchemaNet {
    let arch = Architecture { hidden: 16, latent: 6 };
    BodySchemaNet::new(1, 3, arch, Normalizer::fit(data).unwrap(), seed).unwrap()
}

fn garbage() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-1e3f64..1e3, 2), prop::collection::vec(-1e3f64..1e3, 2))
}

fn pad(s: &SensorSample, extra: &(Vec<f64>, Vec<f64>), added: usize) -> SensorSample {
    let mut out = s.clone();
    out.tension.extend(&extra.0[..added]);
    out.length.extend(&extra.1[..added]);
    out
}

fn near(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn grown_net_reproduces_old_channels(
        data in prop::collection::vec(sample(3), 3..12),
        seed in any::<u64>(),
        probe in sample(3),
        extra in garbage(),
        new_data in prop::collection::vec(sample(4), 1..6),
    ) {
        let old = old_net(&data, seed);
        let mut grown = grow_network(&old, 4).unwrap();
        let norm = grow_normalizer(old.normalizer(), &new_data).unwrap();
        grown.set_normalizer(norm.clone()).unwrap();
        let padded = pad(&probe, &extra, 1);
        for mask in Mask::ALL {
            let a = old.mae_forward(&probe, mask).unwrap();
            let b = grown.mae_forward(&padded, mask).unwrap();
            prop_assert!(near(&a.theta, &b.theta, 1e-9));
            prop_assert!(near(&a.tension, &b.tension[..3], 1e-9));
            prop_assert!(near(&a.length, &b.length[..3], 1e-9));
            // new outputs are the de-normalized zero
            prop_assert!((b.tension[3] - norm.tension.mean[3]).abs() <= 1e-9);
            prop_assert!((b.length[3] - norm.length.mean[3]).abs() <= 1e-9);
        }
    }

    #[test]
    fn growing_in_two_steps_matches_one(
        data in prop::collection::vec(sample(3), 3..12),
        seed in any::<u64>(),
        probe in sample(3),
        extra in garbage(),
    ) {
        let old = old_net(&data, seed);
        let once = grow_network(&old, 5).unwrap();
        let twice = grow_network(&grow_network(&old, 4).unwrap(), 5).unwrap();
        let padded = pad(&probe, &extra, 2);
        for mask in Mask::ALL {
            prop_assert_eq!(once.mae_forward(&padded, mask).unwrap(), twice.mae_forward(&padded, mask).unwrap());
        }
    }

    #[test]
    fn hidden_widening_keeps_invariance(
        data in prop::collection::vec(sample(3), 3..12),
        seed in any::<u64>(),
        probe in sample(3),
        extra in garbage(),
        width in 1usize..10,
    ) {
        let old = old_net(&data, seed);
        let grown = grow_network_with(&old, 4, &GrowOptions { extra_hidden: width, seed }).unwrap();
        let padded = pad(&probe, &extra, 1);
        for mask in Mask::ALL {
            let a = old.mae_forward(&probe, mask).unwrap();
            let b = grown.mae_forward(&padded, mask).unwrap();
            prop_assert!(near(&a.theta, &b.theta, 1e-9));
            prop_assert!(near(&a.length, &b.length[..3], 1e-9));
        }
    }

    #[test]
    fn new_channel_stats_match_two_pass(
        old_data in prop::collection::vec(sample(3), 2..6),
        new_data in prop::collection::vec(sample(4), 1..20),
    ) {
        let old = Normalizer::fit(&old_data).unwrap();
        let grown = grow_normalizer(&old, &new_data).unwrap();
        prop_assert_eq!(&grown.theta, &old.theta);
        prop_assert_eq!(&grown.tension.mean[..3], &old.tension.mean[..]);
        prop_assert_eq!(&grown.length.std[..3], &old.length.std[..]);
        let n = new_data.len() as f64;
        for (col, stats) in [(|s: &SensorSample| s.tension[3]) as fn(&SensorSample) -> f64, |s| s.length[3]]
            .iter()
            .zip([&grown.tension, &grown.length])
        {
            let mean = new_data.iter().map(col).sum::<f64>() / n;
            let var = new_data.iter().map(|s| (col(s) - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((stats.mean[3] - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
            prop_assert!((stats.std[3] - var.sqrt().max(1e-6)).abs() <= 1e-9 * (1.0 + var.sqrt()));
        }
    }
}

#[test]
fn constant_new_channel_gets_floored_std() {
    let old = Normalizer::identity(1, 3);
    let data = vec![SensorSample::new(vec![0.0], vec![1.0, 2.0, 3.0, 20.0], vec![0.0; 4]); 5];
    let grown = grow_normalizer(&old, &data).unwrap();
    assert_eq!(grown.tension.mean[3], 20.0);
    assert_eq!(grown.tension.std[3], 1e-6);
}

#[test]
fn layout_widths_and_rejections() {
    let data: Vec<SensorSample> = (0..4)
        .map(|i| SensorSample::new(vec![0.3 * i as f64], vec![5.0 * i as f64, 7.0, 9.0], vec![0.01, 0.0, -0.01 * i as f64]))
        .collect();
    let old = old_net(&data, 1);
    let grown = grow_network(&old, 4).unwrap();
    assert_eq!(old.encoder().input_width(), 10);
    assert_eq!(old.decoder().output_width(), 7);
    assert_eq!(grown.encoder().input_width(), 12);
    assert_eq!(grown.decoder().output_width(), 9);
    assert_eq!(grown.encoder().layer_sizes()[1], old.encoder().layer_sizes()[1]);
    assert!(grow_network(&old, 3).is_err());
    assert!(grow_network(&grown, 3).is_err());
}
