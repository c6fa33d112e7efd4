use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BodySchemaNet, Mask, SchemaGradients, SchemaOptimizer, SensorSample};
use crate::error::{Error, Result};

/// Supervised reconstruction training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier reached linearly by the last epoch.
    pub final_lr_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 32,
            learning_rate: 3e-3,
            final_lr_fraction: 0.05,
            seed: 0,
        }
    }
}

/// Per-sample reconstruction loss: mean squared error over all output
/// channels in normalized space, summed over the three masks.
pub(crate) fn accumulate_reconstruction(
    net: &BodySchemaNet,
    sample: &SensorSample,
    weight: f64,
    grads: &mut SchemaGradients,
) -> Result<f64> {
    let target = net.normalizer().normalize(sample)?;
    let width = target.len() as f64;
    let mut loss = 0.0;
    for mask in Mask::ALL {
        let input = net.assemble_input(sample, mask)?;
        let (enc, dec) = net.forward_cached(&input)?;
        let out = dec.output();
        let mut grad = Vec::with_capacity(out.len());
        for (y, t) in out.iter().zip(&target) {
            let r = y - t;
            loss += r * r / width;
            grad.push(weight * 2.0 * r / width);
        }
        net.backprop(&enc, &dec, &grad, grads)?;
    }
    Ok(loss)
}

/// Mean per-sample reconstruction loss over `dataset` without training.
pub fn reconstruction_loss(net: &BodySchemaNet, dataset: &[SensorSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut total = 0.0;
    for s in dataset {
        let target = net.normalizer().normalize(s)?;
        for mask in Mask::ALL {
            let out = net.reconstruct_normalized(&net.assemble_input(s, mask)?)?;
            total += out.iter().zip(&target).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / target.len() as f64;
        }
    }
    Ok(total / dataset.len() as f64)
}

/// Trains `net` in place with Adam on shuffled minibatches.
///
/// Returns the mean training loss of each epoch (measured on the minibatches
/// before each update).
pub fn train_mae(net: &mut BodySchemaNet, dataset: &[SensorSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    for s in dataset {
        s.check_dims(net.n_joints(), net.n_muscles())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SchemaOptimizer::adam(net, cfg.learning_rate);
    let mut grads = SchemaGradients::zeros_like(net);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs.max(1) as f64;
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        opt.set_learning_rate(lr);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += accumulate_reconstruction(net, &dataset[i], w, &mut grads)?;
            }
            if !grads.is_finite() {
                return Err(Error::NonFinite("training gradients"));
            }
            opt.apply(net, &grads)?;
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.push(mean);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{Architecture, Normalizer};

    fn toy_data(n: usize) -> Vec<SensorSample> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                SensorSample::new(
                    vec![t],
                    vec![10.0 + 5.0 * t, 20.0 - 3.0 * t],
                    vec![0.3 - 0.02 * t, 0.28 + 0.01 * t],
                )
            })
            .collect()
    }

    #[test]
    fn zero_epochs_leave_net_unchanged() {
        let data = toy_data(8);
        let norm = Normalizer::fit(&data).unwrap();
        let mut net = BodySchemaNet::new(1, 2, Architecture { hidden: 8, latent: 3 }, norm, 1).unwrap();
        let before = net.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(train_mae(&mut net, &data, &cfg).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut net = BodySchemaNet::new(1, 2, Architecture::default(), Normalizer::identity(1, 2), 1).unwrap();
        assert!(matches!(train_mae(&mut net, &[], &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn overfits_a_single_sample_under_all_masks() {
        let s = SensorSample::new(vec![0.7], vec![15.0, 25.0, 5.0], vec![0.31, 0.29, 0.33]);
        let mut norm = Normalizer::identity(1, 3);
        norm.tension.std = vec![10.0; 3];
        norm.tension.mean = vec![20.0; 3];
        norm.length.mean = vec![0.3; 3];
        norm.length.std = vec![0.02; 3];
        let mut net = BodySchemaNet::new(1, 3, Architecture { hidden: 16, latent: 4 }, norm, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3000,
            batch_size: 1,
            learning_rate: 1e-2,
            final_lr_fraction: 0.1,
            seed: 0,
        };
        train_mae(&mut net, std::slice::from_ref(&s), &cfg).unwrap();
        for mask in Mask::ALL {
            let out = net.mae_forward(&s, mask).unwrap();
            let target = net.normalizer().normalize(&s).unwrap();
            let got = net.normalizer().normalize(&out).unwrap();
            let err = got.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-3, "mask {mask:?} err {err}");
        }
    }

    #[test]
    fn duplicated_dataset_full_batch_matches() {
        let data = toy_data(6);
        let doubled: Vec<SensorSample> = data.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let norm = Normalizer::fit(&data).unwrap();
        let arch = Architecture { hidden: 8, latent: 3 };
        let mut a = BodySchemaNet::new(1, 2, arch, norm.clone(), 4).unwrap();
        let mut b = BodySchemaNet::new(1, 2, arch, norm, 4).unwrap();
        let cfg_a = TrainConfig { epochs: 40, batch_size: 6, ..TrainConfig::default() };
        let cfg_b = TrainConfig { epochs: 40, batch_size: 12, ..TrainConfig::default() };
        let ha = train_mae(&mut a, &data, &cfg_a).unwrap();
        let hb = train_mae(&mut b, &doubled, &cfg_b).unwrap();
        for (x, y) in ha.iter().zip(&hb) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_data(20);
        let norm = Normalizer::fit(&data).unwrap();
        let mut net = BodySchemaNet::new(1, 2, Architecture { hidden: 16, latent: 4 }, norm, 9).unwrap();
        let before = reconstruction_loss(&net, &data).unwrap();
        let cfg = TrainConfig { epochs: 200, batch_size: 5, ..TrainConfig::default() };
        let hist = train_mae(&mut net, &data, &cfg).unwrap();
        let after = reconstruction_loss(&net, &data).unwrap();
        assert!(after < 0.2 * before, "{before} -> {after}");
        assert!(hist.last().unwrap() < &hist[0]);
    }
}
