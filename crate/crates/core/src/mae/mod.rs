//! Musculoskeletal autoencoder over joint angles, muscle tensions and muscle
//! lengths.
//!
//! The network sees a normalized `(θ, f, l)` vector in which one block has
//! been replaced by zeros, followed by a 3-element mask naming the blocks that
//! were kept. It always reconstructs all three blocks, which gives three
//! sensory mappings from one model:
//!
//! | mask        | known   | recovered            |
//! |-------------|---------|----------------------|
//! | `ThetaF`    | θ, f    | l (target lengths)   |
//! | `FL`        | f, l    | θ (angle estimation) |
//! | `LTheta`    | l, θ    | f (tension estimate) |
//!
//! Encoder and decoder are separate [`DenseNet`]s joined at the latent vector
//! so that the latent can be optimized directly (see [`control`]).

mod control;
mod io;
mod train;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::netcore::{DenseNet, ForwardCache, Gradients, OptimizerState};

pub use control::{solve_control, ControlSolution, ControlSolveConfig};
pub use train::{reconstruction_loss, train_mae, TrainConfig};

pub const MASK_WIDTH: usize = 3;
pub const STD_FLOOR: f64 = 1e-6;

/// One `(θ, f, l)` reading: joint angles in rad, tensions in N, lengths in m.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub theta: Vec<f64>,
    pub tension: Vec<f64>,
    pub length: Vec<f64>,
}

impl SensorSample {
    pub fn new(theta: Vec<f64>, tension: Vec<f64>, length: Vec<f64>) -> Self {
        Self {
            theta,
            tension,
            length,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.theta.len()
    }

    pub fn n_muscles(&self) -> usize {
        self.tension.len()
    }

    /// Checks the measured-sample invariants: finite values, non-negative tensions.
    pub fn validate(&self) -> Result<()> {
        if self.length.len() != self.tension.len() {
            return Err(Error::shape("sample length block", self.tension.len(), self.length.len()));
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sensor sample"));
        }
        if self.tension.iter().any(|&f| f < 0.0) {
            return Err(Error::Config("sensor sample has a negative tension".into()));
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + 2 * self.tension.len());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.tension);
        v.extend_from_slice(&self.length);
        v
    }

    pub fn from_slice(v: &[f64], n_joints: usize, n_muscles: usize) -> Result<Self> {
        let width = n_joints + 2 * n_muscles;
        if v.len() != width {
            return Err(Error::shape("sample vector", width, v.len()));
        }
        Ok(Self {
            theta: v[..n_joints].to_vec(),
            tension: v[n_joints..n_joints + n_muscles].to_vec(),
            length: v[n_joints + n_muscles..].to_vec(),
        })
    }

    fn check_dims(&self, n_joints: usize, n_muscles: usize) -> Result<()> {
        if self.theta.len() != n_joints {
            return Err(Error::shape("sample theta", n_joints, self.theta.len()));
        }
        if self.tension.len() != n_muscles {
            return Err(Error::shape("sample tension", n_muscles, self.tension.len()));
        }
        if self.length.len() != n_muscles {
            return Err(Error::shape("sample length", n_muscles, self.length.len()));
        }
        Ok(())
    }
}

/// Which sensor block is hidden from the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mask {
    /// `(1, 1, 0)`: θ and f known, l hidden.
    ThetaF,
    /// `(0, 1, 1)`: f and l known, θ hidden.
    FL,
    /// `(1, 0, 1)`: l and θ known, f hidden.
    LTheta,
}

impl Mask {
    pub const ALL: [Mask; 3] = [Mask::ThetaF, Mask::FL, Mask::LTheta];

    pub fn bits(self) -> [f64; MASK_WIDTH] {
        match self {
            Mask::ThetaF => [1.0, 1.0, 0.0],
            Mask::FL => [0.0, 1.0, 1.0],
            Mask::LTheta => [1.0, 0.0, 1.0],
        }
    }

    pub fn from_bits(bits: [u8; 3]) -> Option<Self> {
        match bits {
            [1, 1, 0] => Some(Mask::ThetaF),
            [0, 1, 1] => Some(Mask::FL),
            [1, 0, 1] => Some(Mask::LTheta),
            _ => None,
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Two-pass population mean/std for each column; std floored at [`STD_FLOOR`].
    pub fn fit<'a>(columns: impl IntoIterator<Item = &'a [f64]>, width: usize) -> Result<Self> {
        let rows: Vec<&[f64]> = columns.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Config("cannot fit channel statistics on no data".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in &rows {
            if r.len() != width {
                return Err(Error::shape("channel row", width, r.len()));
            }
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn normalize(&self, i: usize, v: f64) -> f64 {
        (v - self.mean[i]) / self.std[i]
    }

    #[inline]
    pub fn denormalize(&self, i: usize, v: f64) -> f64 {
        v * self.std[i] + self.mean[i]
    }

    fn check(&self) -> Result<()> {
        if self.std.len() != self.mean.len() {
            return Err(Error::shape("channel stats", self.mean.len(), self.std.len()));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("normalizer std must be positive".into()));
        }
        Ok(())
    }
}

/// Normalization statistics for the θ, f and l channels, frozen at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub theta: ChannelStats,
    pub tension: ChannelStats,
    pub length: ChannelStats,
}

impl Normalizer {
    pub fn identity(n_joints: usize, n_muscles: usize) -> Self {
        Self {
            theta: ChannelStats::identity(n_joints),
            tension: ChannelStats::identity(n_muscles),
            length: ChannelStats::identity(n_muscles),
        }
    }

    pub fn fit(samples: &[SensorSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit normalizer on an empty dataset".into()))?;
        let (n, m) = (first.n_joints(), first.n_muscles());
        for s in samples {
            s.check_dims(n, m)?;
        }
        Ok(Self {
            theta: ChannelStats::fit(samples.iter().map(|s| s.theta.as_slice()), n)?,
            tension: ChannelStats::fit(samples.iter().map(|s| s.tension.as_slice()), m)?,
            length: ChannelStats::fit(samples.iter().map(|s| s.length.as_slice()), m)?,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.theta.len()
    }

    pub fn n_muscles(&self) -> usize {
        self.tension.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.check()?;
        self.tension.check()?;
        self.length.check()?;
        if self.length.len() != self.tension.len() {
            return Err(Error::shape("normalizer length block", self.tension.len(), self.length.len()));
        }
        Ok(())
    }

    /// Full normalized vector `[θ; f; l]`.
    pub fn normalize(&self, sample: &SensorSample) -> Result<Vec<f64>> {
        sample.check_dims(self.n_joints(), self.n_muscles())?;
        let mut v = Vec::with_capacity(self.n_joints() + 2 * self.n_muscles());
        v.extend(sample.theta.iter().enumerate().map(|(i, &x)| self.theta.normalize(i, x)));
        v.extend(sample.tension.iter().enumerate().map(|(i, &x)| self.tension.normalize(i, x)));
        v.extend(sample.length.iter().enumerate().map(|(i, &x)| self.length.normalize(i, x)));
        Ok(v)
    }

    pub fn denormalize(&self, v: &[f64]) -> Result<SensorSample> {
        let (n, m) = (self.n_joints(), self.n_muscles());
        if v.len() != n + 2 * m {
            return Err(Error::shape("normalized vector", n + 2 * m, v.len()));
        }
        Ok(SensorSample {
            theta: (0..n).map(|i| self.theta.denormalize(i, v[i])).collect(),
            tension: (0..m).map(|i| self.tension.denormalize(i, v[n + i])).collect(),
            length: (0..m).map(|i| self.length.denormalize(i, v[n + m + i])).collect(),
        })
    }

    /// Scale (std) of every channel of the full output vector, in order.
    pub fn scales(&self) -> Vec<f64> {
        self.theta
            .std
            .iter()
            .chain(&self.tension.std)
            .chain(&self.length.std)
            .copied()
            .collect()
    }
}

/// Builds the encoder input: normalized blocks, the masked-out block zeroed,
/// then the mask bits.
pub fn assemble_input(sample: &SensorSample, mask: Mask, normalizer: &Normalizer) -> Result<Vec<f64>> {
    let mut v = normalizer.normalize(sample)?;
    let (n, m) = (normalizer.n_joints(), normalizer.n_muscles());
    let bits = mask.bits();
    let blocks = [(0, n), (n, n + m), (n + m, n + 2 * m)];
    for (bit, (lo, hi)) in bits.iter().zip(blocks) {
        if *bit == 0.0 {
            v[lo..hi].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    v.extend_from_slice(&bits);
    Ok(v)
}

/// Encoder/decoder widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub hidden: usize,
    pub latent: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 16,
        }
    }
}

/// The body schema network `h`: encoder, decoder and frozen normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct BodySchemaNet {
    n_joints: usize,
    n_muscles: usize,
    encoder: DenseNet,
    decoder: DenseNet,
    normalizer: Normalizer,
    /// Free-form `key=value` metadata stored in the model header.
    pub metadata: BTreeMap<String, String>,
}

pub(crate) fn io_width(n_joints: usize, n_muscles: usize) -> usize {
    n_joints + 2 * n_muscles
}

impl BodySchemaNet {
    pub fn new(
        n_joints: usize,
        n_muscles: usize,
        arch: Architecture,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        if n_joints == 0 || n_muscles == 0 {
            return Err(Error::Config("body schema needs at least one joint and one muscle".into()));
        }
        let width = io_width(n_joints, n_muscles);
        let encoder = DenseNet::new(&[width + MASK_WIDTH, arch.hidden, arch.latent], seed)?;
        let decoder = DenseNet::new(
            &[arch.latent, arch.hidden, width],
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1),
        )?;
        Self::from_parts(n_joints, n_muscles, encoder, decoder, normalizer)
    }

    pub fn from_parts(
        n_joints: usize,
        n_muscles: usize,
        encoder: DenseNet,
        decoder: DenseNet,
        normalizer: Normalizer,
    ) -> Result<Self> {
        let width = io_width(n_joints, n_muscles);
        if encoder.input_width() != width + MASK_WIDTH {
            return Err(Error::shape("encoder input", width + MASK_WIDTH, encoder.input_width()));
        }
        if decoder.output_width() != width {
            return Err(Error::shape("decoder output", width, decoder.output_width()));
        }
        if decoder.input_width() != encoder.output_width() {
            return Err(Error::shape("latent width", encoder.output_width(), decoder.input_width()));
        }
        if normalizer.n_joints() != n_joints || normalizer.n_muscles() != n_muscles {
            return Err(Error::shape("normalizer channels", width, io_width(normalizer.n_joints(), normalizer.n_muscles())));
        }
        normalizer.validate()?;
        Ok(Self {
            n_joints,
            n_muscles,
            encoder,
            decoder,
            normalizer,
            metadata: BTreeMap::new(),
        })
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn n_muscles(&self) -> usize {
        self.n_muscles
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn io_width(&self) -> usize {
        io_width(self.n_joints, self.n_muscles)
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut DenseNet {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut DenseNet {
        &mut self.decoder
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn set_normalizer(&mut self, normalizer: Normalizer) -> Result<()> {
        if normalizer.n_joints() != self.n_joints || normalizer.n_muscles() != self.n_muscles {
            return Err(Error::shape(
                "normalizer channels",
                self.io_width(),
                io_width(normalizer.n_joints(), normalizer.n_muscles()),
            ));
        }
        normalizer.validate()?;
        self.normalizer = normalizer;
        Ok(())
    }

    pub fn assemble_input(&self, sample: &SensorSample, mask: Mask) -> Result<Vec<f64>> {
        assemble_input(sample, mask, &self.normalizer)
    }

    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(input)
    }

    /// Decoder output in normalized units.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(z)
    }

    /// Normalized reconstruction for an already assembled input.
    pub fn reconstruct_normalized(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(input)?)
    }

    /// Masked reconstruction, de-normalized. Tensions are not clipped.
    pub fn mae_forward(&self, sample: &SensorSample, mask: Mask) -> Result<SensorSample> {
        let input = self.assemble_input(sample, mask)?;
        self.normalizer.denormalize(&self.reconstruct_normalized(&input)?)
    }

    /// θ from `(f, l)` using mask `FL`.
    pub fn estimate_joint_angles(&self, tension: &[f64], length: &[f64]) -> Result<Vec<f64>> {
        let probe = SensorSample::new(self.normalizer.theta.mean.clone(), tension.to_vec(), length.to_vec());
        Ok(self.mae_forward(&probe, Mask::FL)?.theta)
    }

    /// l from `(θ, f)` using mask `ThetaF`.
    pub fn predict_muscle_length(&self, theta: &[f64], tension: &[f64]) -> Result<Vec<f64>> {
        let probe = SensorSample::new(theta.to_vec(), tension.to_vec(), self.normalizer.length.mean.clone());
        Ok(self.mae_forward(&probe, Mask::ThetaF)?.length)
    }

    /// f from `(θ, l)` using mask `LTheta`.
    pub fn predict_tension(&self, theta: &[f64], length: &[f64]) -> Result<Vec<f64>> {
        let probe = SensorSample::new(theta.to_vec(), self.normalizer.tension.mean.clone(), length.to_vec());
        Ok(self.mae_forward(&probe, Mask::LTheta)?.tension)
    }

    /// Forward through encoder and decoder keeping both caches.
    pub(crate) fn forward_cached(&self, input: &[f64]) -> Result<(ForwardCache, ForwardCache)> {
        let enc = self.encoder.forward(input)?;
        let dec = self.decoder.forward(enc.output())?;
        Ok((enc, dec))
    }

    /// Backpropagates `dl_dout` (w.r.t. the normalized output) into `grads`.
    pub(crate) fn backprop(
        &self,
        enc: &ForwardCache,
        dec: &ForwardCache,
        dl_dout: &[f64],
        grads: &mut SchemaGradients,
    ) -> Result<()> {
        let dz = self
            .decoder
            .backward_accumulate(dec, dl_dout, Some(&mut grads.decoder), true)?
            .expect("latent gradient requested");
        self.encoder.backward_accumulate(enc, &dz, Some(&mut grads.encoder), false)?;
        Ok(())
    }
}

/// Gradients for both halves of a [`BodySchemaNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl SchemaGradients {
    pub fn zeros_like(net: &BodySchemaNet) -> Self {
        Self {
            encoder: Gradients::zeros_like(&net.encoder),
            decoder: Gradients::zeros_like(&net.decoder),
        }
    }

    pub fn clear(&mut self) {
        self.encoder.clear();
        self.decoder.clear();
    }

    pub fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        self.decoder.scale(factor);
    }

    pub fn add_scaled(&mut self, other: &SchemaGradients, factor: f64) {
        self.encoder.add_scaled(&other.encoder, factor);
        self.decoder.add_scaled(&other.decoder, factor);
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.encoder.max_abs().max(self.decoder.max_abs())
    }
}

/// Optimizer states for encoder and decoder.
#[derive(Debug, Clone)]
pub struct SchemaOptimizer {
    pub encoder: OptimizerState,
    pub decoder: OptimizerState,
}

impl SchemaOptimizer {
    pub fn adam(net: &BodySchemaNet, learning_rate: f64) -> Self {
        Self {
            encoder: OptimizerState::adam(&net.encoder, learning_rate),
            decoder: OptimizerState::adam(&net.decoder, learning_rate),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.encoder.set_learning_rate(lr);
        self.decoder.set_learning_rate(lr);
    }

    pub fn apply(&mut self, net: &mut BodySchemaNet, grads: &SchemaGradients) -> Result<()> {
        crate::netcore::apply_update(&mut net.encoder, &grads.encoder, &mut self.encoder)?;
        crate::netcore::apply_update(&mut net.decoder, &grads.decoder, &mut self.decoder)
    }
}
