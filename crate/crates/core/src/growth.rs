//! Growing a body schema network when muscles are added.
//!
//! The old parameters are transplanted into a wider network: input columns
//! and output rows of existing channels move to their new positions, while
//! every row, column and bias touching an added muscle channel starts at
//! zero. Until retraining, the grown network therefore reproduces the old
//! network on the original channels whatever the added channels contain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mae::{BodySchemaNet, ChannelStats, Normalizer, SensorSample, MASK_WIDTH};
use crate::netcore::{DenseNet, Layer};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrowOptions {
    /// Extra units appended to every hidden layer. Their incoming weights are
    /// small random values and their outgoing weights zero, so behaviour is
    /// still preserved exactly.
    pub extra_hidden: usize,
    pub seed: u64,
}

/// Position of each old `[θ; f; l]` channel inside the grown layout.
pub fn channel_map(n_joints: usize, m_old: usize, m_new: usize) -> Vec<usize> {
    let theta = 0..n_joints;
    let tension = (0..m_old).map(|i| n_joints + i);
    let length = (0..m_old).map(|i| n_joints + m_new + i);
    theta.chain(tension).chain(length).collect()
}

fn input_map(n_joints: usize, m_old: usize, m_new: usize) -> Vec<usize> {
    let mut map = channel_map(n_joints, m_old, m_new);
    let tail = n_joints + 2 * m_new;
    map.extend((0..MASK_WIDTH).map(|k| tail + k));
    map
}

pub fn grow_network(net_old: &BodySchemaNet, m_new: usize) -> Result<BodySchemaNet> {
    grow_network_with(net_old, m_new, &GrowOptions::default())
}

pub fn grow_network_with(net_old: &BodySchemaNet, m_new: usize, opts: &GrowOptions) -> Result<BodySchemaNet> {
    let (n, m_old) = (net_old.n_joints(), net_old.n_muscles());
    if m_new <= m_old {
        return Err(Error::Config(format!(
            "growth needs more muscles than the old network: {m_new} <= {m_old}"
        )));
    }
    let in_map = input_map(n, m_old, m_new);
    let out_map = channel_map(n, m_old, m_new);
    let new_width = n + 2 * m_new;

    let mut enc_layers = net_old.encoder().layers().to_vec();
    let first = &enc_layers[0];
    let mut widened = Layer::zeros(new_width + MASK_WIDTH, first.outputs());
    for row in 0..first.outputs() {
        for (col, &dst) in in_map.iter().enumerate() {
            widened.set_weight(row, dst, first.weight(row, col));
        }
    }
    widened.biases_mut().copy_from_slice(first.biases());
    enc_layers[0] = widened;

    let mut dec_layers = net_old.decoder().layers().to_vec();
    let last_idx = dec_layers.len() - 1;
    let last = &dec_layers[last_idx];
    let mut widened = Layer::zeros(last.inputs(), new_width);
    for (row, &dst) in out_map.iter().enumerate() {
        for col in 0..last.inputs() {
            widened.set_weight(dst, col, last.weight(row, col));
        }
        widened.biases_mut()[dst] = last.biases()[row];
    }
    dec_layers[last_idx] = widened;

    if opts.extra_hidden > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        widen_hidden(&mut enc_layers, opts.extra_hidden, &mut rng);
        widen_hidden(&mut dec_layers, opts.extra_hidden, &mut rng);
    }

    let encoder = DenseNet::from_layers(enc_layers, net_old.encoder().activation())?;
    let decoder = DenseNet::from_layers(dec_layers, net_old.decoder().activation())?;
    let normalizer = pad_normalizer(net_old.normalizer(), m_new);
    let mut grown = BodySchemaNet::from_parts(n, m_new, encoder, decoder, normalizer)?;
    grown.metadata = net_old.metadata.clone();
    grown.metadata.insert("grown_from_muscles".into(), m_old.to_string());
    Ok(grown)
}

fn widen_hidden(layers: &mut [Layer], extra: usize, rng: &mut ChaCha8Rng) {
    for k in 0..layers.len().saturating_sub(1) {
        let (inputs, outputs) = (layers[k].inputs(), layers[k].outputs());
        let scale = 0.1 / (inputs as f64).sqrt();
        let mut grown = Layer::zeros(inputs, outputs + extra);
        grown.weights_mut()[..inputs * outputs].copy_from_slice(layers[k].weights());
        for w in &mut grown.weights_mut()[inputs * outputs..] {
            *w = rng.gen_range(-scale..scale);
        }
        grown.biases_mut()[..outputs].copy_from_slice(layers[k].biases());
        layers[k] = grown;

        let next = &layers[k + 1];
        let mut grown = Layer::zeros(next.inputs() + extra, next.outputs());
        for row in 0..next.outputs() {
            for col in 0..next.inputs() {
                grown.set_weight(row, col, next.weight(row, col));
            }
        }
        grown.biases_mut().copy_from_slice(next.biases());
        layers[k + 1] = grown;
    }
}

/// Old statistics with placeholder (mean 0, std 1) entries for added muscles.
fn pad_normalizer(old: &Normalizer, m_new: usize) -> Normalizer {
    let pad = |c: &ChannelStats| {
        let mut c = c.clone();
        c.mean.resize(m_new, 0.0);
        c.std.resize(m_new, 1.0);
        c
    };
    Normalizer {
        theta: old.theta.clone(),
        tension: pad(&old.tension),
        length: pad(&old.length),
    }
}

/// Extends `old` to the muscle count of `new_channel_data`, fitting the added
/// tension and length channels on that data.
pub fn grow_normalizer(old: &Normalizer, new_channel_data: &[SensorSample]) -> Result<Normalizer> {
    let first = new_channel_data
        .first()
        .ok_or_else(|| Error::Config("no data for the added muscle channels".into()))?;
    let (m_old, m_new) = (old.n_muscles(), first.n_muscles());
    if m_new <= m_old {
        return Err(Error::Config(format!(
            "data has {m_new} muscles, expected more than {m_old}"
        )));
    }
    for s in new_channel_data {
        if s.n_muscles() != m_new || s.length.len() != m_new {
            return Err(Error::shape("new channel data", m_new, s.n_muscles()));
        }
    }
    let added = m_new - m_old;
    let tension = ChannelStats::fit(new_channel_data.iter().map(|s| &s.tension[m_old..]), added)?;
    let length = ChannelStats::fit(new_channel_data.iter().map(|s| &s.length[m_old..]), added)?;
    let mut out = old.clone();
    out.tension.mean.extend(tension.mean);
    out.tension.std.extend(tension.std);
    out.length.mean.extend(length.mean);
    out.length.std.extend(length.std);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{Architecture, Mask};

    fn old_net() -> BodySchemaNet {
        let mut norm = Normalizer::identity(1, 3);
        norm.tension.mean = vec![20.0, 25.0, 30.0];
        norm.tension.std = vec![5.0, 6.0, 7.0];
        norm.length.mean = vec![0.3, 0.29, 0.31];
        norm.length.std = vec![0.01; 3];
        BodySchemaNet::new(1, 3, Architecture::default(), norm, 21).unwrap()
    }

    #[test]
    fn grown_widths() {
        let grown = grow_network(&old_net(), 4).unwrap();
        assert_eq!(grown.encoder().input_width(), 12);
        assert_eq!(grown.decoder().output_width(), 9);
        assert_eq!(old_net().encoder().input_width(), 10);
        assert_eq!(old_net().decoder().output_width(), 7);
        assert_eq!(grown.encoder().layer_sizes()[1], 64);
    }

    #[test]
    fn rejects_non_growth() {
        assert!(grow_network(&old_net(), 3).is_err());
        assert!(grow_network(&old_net(), 2).is_err());
    }

    #[test]
    fn old_channels_unchanged_for_arbitrary_new_inputs() {
        let old = old_net();
        let grown = grow_network(&old, 5).unwrap();
        let s_old = crate::mae::SensorSample::new(vec![0.9], vec![18.0, 27.0, 33.0], vec![0.305, 0.28, 0.32]);
        let mut s_new = s_old.clone();
        s_new.tension.extend([123.0, -4.0]);
        s_new.length.extend([9.0, 0.1]);
        for mask in Mask::ALL {
            let a = old.mae_forward(&s_old, mask).unwrap();
            let b = grown.mae_forward(&s_new, mask).unwrap();
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.tension[..], b.tension[..3]);
            assert_eq!(a.length[..], b.length[..3]);
            assert_eq!(&b.tension[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn hidden_widening_preserves_behaviour() {
        let old = old_net();
        let opts = GrowOptions { extra_hidden: 8, seed: 3 };
        let grown = grow_network_with(&old, 4, &opts).unwrap();
        assert_eq!(grown.encoder().layer_sizes(), vec![12, 72, 16]);
        assert_eq!(grown.decoder().layer_sizes(), vec![16, 72, 9]);
        let s = crate::mae::SensorSample::new(vec![0.4], vec![10.0, 12.0, 14.0, 50.0], vec![0.3, 0.3, 0.3, 1.0]);
        let mut s_old = s.clone();
        s_old.tension.truncate(3);
        s_old.length.truncate(3);
        let a = old.mae_forward(&s_old, Mask::FL).unwrap();
        let b = grown.mae_forward(&s, Mask::FL).unwrap();
        assert!((a.theta[0] - b.theta[0]).abs() < 1e-12);
    }

    #[test]
    fn channel_map_is_injective() {
        let map = channel_map(2, 3, 5);
        let mut sorted = map.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), map.len());
        assert_eq!(map, vec![0, 1, 2, 3, 4, 7, 8, 9]);
    }

    #[test]
    fn normalizer_growth() {
        let old = old_net().normalizer().clone();
        let data: Vec<SensorSample> = (0..4)
            .map(|_| SensorSample::new(vec![0.1], vec![1.0, 2.0, 3.0, 20.0], vec![0.3, 0.3, 0.3, 0.25]))
            .collect();
        let grown = grow_normalizer(&old, &data).unwrap();
        assert_eq!(grown.tension.mean[..3], old.tension.mean[..]);
        assert_eq!(grown.tension.std[..3], old.tension.std[..]);
        assert_eq!(grown.theta, old.theta);
        assert_eq!(grown.tension.mean[3], 20.0);
        assert_eq!(grown.tension.std[3], crate::mae::STD_FLOOR);
        assert!(grow_normalizer(&old, &[]).is_err());
    }
}
