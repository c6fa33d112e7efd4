//! Retraining a grown network from a small new dataset plus pseudo-data
//! distilled from the frozen old network.
//!
//! The loss is `L = L_new + w_loss · L_old`. Both terms sum, for each sample
//! and each of the three masks, the L2 norms of the θ, f and l residuals in
//! normalized space. In `L_old` the f and l residuals are multiplied
//! elementwise by the r-mask, which is 0 on the added muscles' channels; the
//! θ residual is left unmasked.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{BodySchemaNet, Mask, SchemaGradients, SchemaOptimizer, SensorSample};
use crate::netcore::{field, parse_header_fields, parse_numbers};

/// `w_loss` schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// `w_loss = 0`.
    #[serde(rename = "i")]
    I,
    /// `w_loss = 1`.
    #[serde(rename = "ii")]
    II,
    /// `w_loss = 1 − e / N_epoch`.
    #[serde(rename = "iii")]
    III,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::I, Method::II, Method::III];

    pub fn name(self) -> &'static str {
        match self {
            Method::I => "i",
            Method::II => "ii",
            Method::III => "iii",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Some(Method::I),
            "ii" | "2" => Some(Method::II),
            "iii" | "3" => Some(Method::III),
            _ => None,
        }
    }
}

pub fn w_loss_value(method: Method, epoch: usize, n_epoch: usize) -> Result<f64> {
    if epoch >= n_epoch {
        return Err(Error::Config(format!("epoch {epoch} outside 0..{n_epoch}")));
    }
    Ok(match method {
        Method::I => 0.0,
        Method::II => 1.0,
        // same as 1 − e/N, rounded once
        Method::III => (n_epoch - epoch) as f64 / n_epoch as f64,
    })
}

/// Per-channel 0/1 weights over `[θ; f; l]` for the pseudo-data residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct RMask {
    n_joints: usize,
    m_old: usize,
    m_new: usize,
    values: Vec<f64>,
}

impl RMask {
    pub fn new(n_joints: usize, m_old: usize, m_new: usize) -> Result<Self> {
        if m_new < m_old {
            return Err(Error::Config(format!("r-mask: m_new {m_new} < m_old {m_old}")));
        }
        let block = |_: ()| (0..m_new).map(move |i| if i < m_old { 1.0 } else { 0.0 });
        let values = std::iter::repeat_n(1.0, n_joints)
            .chain(block(()))
            .chain(block(()))
            .collect();
        Ok(Self {
            n_joints,
            m_old,
            m_new,
            values,
        })
    }

    /// All-ones mask (no added muscles).
    pub fn ones(n_joints: usize, n_muscles: usize) -> Self {
        Self::new(n_joints, n_muscles, n_muscles).expect("m_new == m_old")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn m_old(&self) -> usize {
        self.m_old
    }

    pub fn m_new(&self) -> usize {
        self.m_new
    }
}

/// Per-channel uniform sampling box for pseudo-data.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRanges {
    pub theta: Vec<(f64, f64)>,
    pub tension: Vec<(f64, f64)>,
}

pub const RANGES_FORMAT_VERSION: u32 = 1;

impl SamplerRanges {
    /// Per-channel min/max of a dataset.
    pub fn from_dataset(samples: &[SensorSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot derive sampler ranges from no data".into()))?;
        let span = |get: &dyn Fn(&SensorSample) -> &[f64], width: usize| {
            (0..width)
                .map(|i| {
                    samples.iter().map(|s| get(s)[i]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    })
                })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            theta: span(&|s| &s.theta, first.n_joints()),
            tension: span(&|s| &s.tension, first.n_muscles()),
        })
    }

    pub fn n_joints(&self) -> usize {
        self.theta.len()
    }

    pub fn n_muscles(&self) -> usize {
        self.tension.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "sampler_ranges version={} n_joints={} n_muscles={}\n",
            RANGES_FORMAT_VERSION,
            self.n_joints(),
            self.n_muscles()
        );
        for (key, ranges) in [("theta", &self.theta), ("tension", &self.tension)] {
            for (suffix, pick) in [("min", 0usize), ("max", 1)] {
                out.push_str(&format!("{key}_{suffix}"));
                for r in ranges.iter() {
                    let v = if pick == 0 { r.0 } else { r.1 };
                    let _ = write!(out, " {v:.16e}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty ranges file"))?;
        let fields = parse_header_fields(header, "sampler_ranges").map_err(|m| Error::parse(ln, m))?;
        let num = |k: &str| -> Result<usize> {
            field(&fields, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(ln, format!("bad or missing `{k}`")))
        };
        if num("version")? != RANGES_FORMAT_VERSION as usize {
            return Err(Error::parse(ln, "unsupported sampler_ranges version"));
        }
        let (n, m) = (num("n_joints")?, num("n_muscles")?);
        let mut rows = Vec::new();
        for (key, width) in [("theta_min", n), ("theta_max", n), ("tension_min", m), ("tension_max", m)] {
            let (ln, l) = lines.next().ok_or_else(|| Error::parse(ln, format!("missing `{key}`")))?;
            let rest = l.trim().strip_prefix(key).ok_or_else(|| Error::parse(ln, format!("expected `{key}`")))?;
            let vals = parse_numbers(rest).map_err(|e| Error::parse(ln, e))?;
            if vals.len() != width {
                return Err(Error::parse(ln, format!("`{key}` needs {width} values")));
            }
            rows.push(vals);
        }
        let zip = |a: &[f64], b: &[f64]| a.iter().copied().zip(b.iter().copied()).collect();
        Ok(Self {
            theta: zip(&rows[0], &rows[1]),
            tension: zip(&rows[2], &rows[3]),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Sidecar path stored next to a model file.
    pub fn sidecar_path(model_path: &Path) -> std::path::PathBuf {
        let mut name = model_path.as_os_str().to_owned();
        name.push(".ranges");
        name.into()
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Pseudo-samples distilled from `net_old`, zero-padded to `m_new` muscles.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub samples: Vec<SensorSample>,
    pub r_mask: RMask,
}

pub fn sample_pseudo_old(
    net_old: &BodySchemaNet,
    ranges: &SamplerRanges,
    batch: usize,
    seed: u64,
    m_new: usize,
) -> Result<PseudoBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_pseudo_old_with(net_old, ranges, batch, &mut rng, m_new)
}

pub fn sample_pseudo_old_with(
    net_old: &BodySchemaNet,
    ranges: &SamplerRanges,
    batch: usize,
    rng: &mut impl Rng,
    m_new: usize,
) -> Result<PseudoBatch> {
    let (n, m_old) = (net_old.n_joints(), net_old.n_muscles());
    if m_new < m_old {
        return Err(Error::Config(format!(
            "cannot pad a {m_old}-muscle network down to {m_new} muscles"
        )));
    }
    if ranges.n_joints() != n || ranges.n_muscles() != m_old {
        return Err(Error::shape("sampler ranges", n + m_old, ranges.n_joints() + ranges.n_muscles()));
    }
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let theta: Vec<f64> = ranges.theta.iter().map(|&r| uniform(rng, r)).collect();
        let mut tension: Vec<f64> = ranges.tension.iter().map(|&r| uniform(rng, r)).collect();
        let mut length = net_old.predict_muscle_length(&theta, &tension)?;
        tension.resize(m_new, 0.0);
        length.resize(m_new, 0.0);
        samples.push(SensorSample::new(theta, tension, length));
    }
    Ok(PseudoBatch {
        samples,
        r_mask: RMask::new(n, m_old, m_new)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Each term averaged over its batch and the three masks.
    #[default]
    BatchMean,
    /// Plain sums over samples and masks.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub new: f64,
    pub old: f64,
}

fn l2_with_grad(residual: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
    let norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for (g, r) in grad.iter_mut().zip(residual) {
            *g += weight * r / norm;
        }
    }
    norm
}

/// Block-norm loss of one sample under one mask, accumulating
/// `weight · ∂loss/∂params` into `grads` when given.
///
/// With `r_mask`, the f and l residuals are multiplied by the mask.
pub fn block_norm_loss(
    net: &BodySchemaNet,
    sample: &SensorSample,
    mask: Mask,
    r_mask: Option<&RMask>,
    weight: f64,
    grads: Option<&mut SchemaGradients>,
) -> Result<f64> {
    let (n, m) = (net.n_joints(), net.n_muscles());
    let target = net.normalizer().normalize(sample)?;
    let input = net.assemble_input(sample, mask)?;
    let (enc, dec) = net.forward_cached(&input)?;
    let mut residual: Vec<f64> = dec.output().iter().zip(&target).map(|(y, t)| y - t).collect();
    if let Some(r) = r_mask {
        if r.values.len() != residual.len() {
            return Err(Error::shape("r-mask", residual.len(), r.values.len()));
        }
        for (res, w) in residual.iter_mut().zip(&r.values).skip(n) {
            *res *= w;
        }
    }
    let mut grad = vec![0.0; residual.len()];
    let blocks = [(0, n), (n, n + m), (n + m, n + 2 * m)];
    let mut loss = 0.0;
    for (lo, hi) in blocks {
        loss += l2_with_grad(&residual[lo..hi], weight, &mut grad[lo..hi]);
    }
    if let Some(g) = grads {
        if let Some(r) = r_mask {
            for (gv, w) in grad.iter_mut().zip(&r.values).skip(n) {
                *gv *= w;
            }
        }
        net.backprop(&enc, &dec, &grad, g)?;
    }
    Ok(loss)
}

fn term(
    net: &BodySchemaNet,
    batch: &[SensorSample],
    r_mask: Option<&RMask>,
    scale: f64,
    reduction: LossReduction,
    grads: Option<&mut SchemaGradients>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let norm = match reduction {
        LossReduction::BatchMean => 1.0 / (batch.len() * Mask::ALL.len()) as f64,
        LossReduction::Sum => 1.0,
    };
    let mut grads = grads;
    let mut total = 0.0;
    for s in batch {
        for mask in Mask::ALL {
            total += block_norm_loss(net, s, mask, r_mask, scale * norm, grads.as_deref_mut())?;
        }
    }
    Ok(total * norm)
}

/// `L = L_new + w_loss · L_old` and its parameter gradients.
pub fn retrain_loss(
    net: &BodySchemaNet,
    new_batch: &[SensorSample],
    pseudo_batch: &[SensorSample],
    r_mask: &RMask,
    w_loss: f64,
    reduction: LossReduction,
) -> Result<(LossBreakdown, SchemaGradients)> {
    let mut grads = SchemaGradients::zeros_like(net);
    let loss = retrain_loss_into(net, new_batch, pseudo_batch, r_mask, w_loss, reduction, &mut grads)?;
    Ok((loss, grads))
}

fn retrain_loss_into(
    net: &BodySchemaNet,
    new_batch: &[SensorSample],
    pseudo_batch: &[SensorSample],
    r_mask: &RMask,
    w_loss: f64,
    reduction: LossReduction,
    grads: &mut SchemaGradients,
) -> Result<LossBreakdown> {
    if new_batch.is_empty() && pseudo_batch.is_empty() {
        return Err(Error::Config("retrain loss needs at least one non-empty batch".into()));
    }
    let new = term(net, new_batch, None, 1.0, reduction, Some(grads))?;
    let old = if w_loss != 0.0 {
        term(net, pseudo_batch, Some(r_mask), w_loss, reduction, Some(grads))?
    } else {
        0.0
    };
    let total = new + w_loss * old;
    if !total.is_finite() {
        return Err(Error::NonFinite("retrain loss"));
    }
    Ok(LossBreakdown { total, new, old })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub method: Method,
    /// N_epoch; one epoch is one gradient step on a new batch plus a fresh pseudo batch.
    pub epochs: usize,
    pub pseudo_batch: usize,
    /// D_new is used whole when it has at most this many samples.
    pub new_batch: usize,
    pub learning_rate: f64,
    /// Learning rate multiplier reached linearly by the last epoch.
    pub final_lr_fraction: f64,
    /// Stop after this many epochs without a relative improvement of the total loss.
    pub patience: Option<usize>,
    pub loss_reduction: LossReduction,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            method: Method::III,
            epochs: 3000,
            pseudo_batch: 64,
            new_batch: 32,
            learning_rate: 1e-3,
            final_lr_fraction: 0.1,
            patience: Some(300),
            loss_reduction: LossReduction::BatchMean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub total: f64,
    pub new: f64,
    /// `None` when `w_loss = 0` and the term was not evaluated.
    pub old: Option<f64>,
    pub w_loss: f64,
}

pub fn loss_history_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("epoch,L,L_new,L_old,w_loss\n");
    for r in records {
        let old = r.old.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:.9e},{:.9e},{},{:.6}", r.epoch, r.total, r.new, old, r.w_loss);
    }
    out
}

pub fn write_loss_history(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_history_csv(records)).map_err(|e| Error::io(path, e))
}

/// Retrains `net_new` against `d_new` and pseudo-data from `net_old`.
///
/// `net_old` is only read. Returns the retrained network and per-epoch losses.
pub fn retrain(
    net_new: &BodySchemaNet,
    net_old: &BodySchemaNet,
    d_new: &[SensorSample],
    cfg: &RetrainConfig,
    ranges: &SamplerRanges,
) -> Result<(BodySchemaNet, Vec<LossRecord>)> {
    if d_new.is_empty() {
        return Err(Error::Config("D_new is empty".into()));
    }
    if net_new.n_joints() != net_old.n_joints() || net_new.n_muscles() < net_old.n_muscles() {
        return Err(Error::shape("grown network muscles", net_old.n_muscles(), net_new.n_muscles()));
    }
    for s in d_new {
        if s.n_joints() != net_new.n_joints() || s.n_muscles() != net_new.n_muscles() {
            return Err(Error::shape("D_new sample", net_new.io_width(), s.to_vec().len()));
        }
    }
    let mut net = net_new.clone();
    let m_new = net.n_muscles();
    let r_mask = RMask::new(net.n_joints(), net_old.n_muscles(), m_new)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SchemaOptimizer::adam(&net, cfg.learning_rate);
    let mut grads = SchemaGradients::zeros_like(&net);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut batch_buf: Vec<SensorSample> = Vec::new();

    for epoch in 0..cfg.epochs {
        let w = w_loss_value(cfg.method, epoch, cfg.epochs)?;
        let new_batch: &[SensorSample] = if d_new.len() <= cfg.new_batch {
            d_new
        } else {
            batch_buf.clear();
            batch_buf.extend(sample_indices(&mut rng, d_new.len(), cfg.new_batch).into_iter().map(|i| d_new[i].clone()));
            &batch_buf
        };
        let pseudo = if w != 0.0 {
            sample_pseudo_old_with(net_old, ranges, cfg.pseudo_batch, &mut rng, m_new)?.samples
        } else {
            Vec::new()
        };
        let progress = epoch as f64 / cfg.epochs as f64;
        opt.set_learning_rate(cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress));
        grads.clear();
        let loss = retrain_loss_into(&net, new_batch, &pseudo, &r_mask, w, cfg.loss_reduction, &mut grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("retrain gradients"));
        }
        opt.apply(&mut net, &grads)?;
        history.push(LossRecord {
            epoch,
            total: loss.total,
            new: loss.new,
            old: (w != 0.0).then_some(loss.old),
            w_loss: w,
        });
        if let Some(patience) = cfg.patience {
            if loss.total < best * (1.0 - 1e-4) {
                best = loss.total;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::debug!("retrain plateau at epoch {epoch}");
                    break;
                }
            }
        }
    }
    net.metadata.insert("retrain_method".into(), cfg.method.name().into());
    net.metadata.insert("retrain_seed".into(), cfg.seed.to_string());
    net.metadata.remove("tag");
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae::{Architecture, Normalizer};

    #[test]
    fn schedule_values() {
        assert_eq!(w_loss_value(Method::III, 0, 100).unwrap(), 1.0);
        assert!((w_loss_value(Method::III, 99, 100).unwrap() - 0.01).abs() < 1e-15);
        for e in [0, 7, 99] {
            assert_eq!(w_loss_value(Method::I, e, 100).unwrap(), 0.0);
            assert_eq!(w_loss_value(Method::II, e, 100).unwrap(), 1.0);
        }
        assert!(w_loss_value(Method::II, 100, 100).is_err());
    }

    #[test]
    fn r_mask_layout() {
        let r = RMask::new(1, 3, 4).unwrap();
        assert_eq!(r.values(), &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(RMask::ones(2, 2).values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::from_name("IV"), None);
    }

    fn tiny_old() -> BodySchemaNet {
        let mut norm = Normalizer::identity(1, 2);
        norm.tension.mean = vec![20.0, 20.0];
        norm.tension.std = vec![5.0, 5.0];
        norm.length.mean = vec![0.3, 0.3];
        norm.length.std = vec![0.01, 0.01];
        BodySchemaNet::new(1, 2, Architecture { hidden: 6, latent: 3 }, norm, 8).unwrap()
    }

    fn ranges() -> SamplerRanges {
        SamplerRanges {
            theta: vec![(0.0, 2.0)],
            tension: vec![(5.0, 40.0), (5.0, 40.0)],
        }
    }

    #[test]
    fn pseudo_batch_padding() {
        let old = tiny_old();
        let empty = sample_pseudo_old(&old, &ranges(), 0, 1, 3).unwrap();
        assert!(empty.samples.is_empty());
        let batch = sample_pseudo_old(&old, &ranges(), 10, 1, 3).unwrap();
        for s in &batch.samples {
            assert_eq!(s.tension[2], 0.0);
            assert_eq!(s.length[2], 0.0);
            let direct = old.predict_muscle_length(&s.theta, &s.tension[..2]).unwrap();
            assert_eq!(direct[..], s.length[..2]);
            assert!((0.0..2.0).contains(&s.theta[0]));
        }
        assert!(sample_pseudo_old(&old, &ranges(), 1, 1, 1).is_err());
    }

    #[test]
    fn ranges_text_round_trip() {
        let r = ranges();
        assert_eq!(SamplerRanges::from_text(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn ranges_from_dataset() {
        let data = vec![
            SensorSample::new(vec![0.1], vec![3.0, 9.0], vec![0.3, 0.3]),
            SensorSample::new(vec![0.5], vec![1.0, 12.0], vec![0.3, 0.3]),
        ];
        let r = SamplerRanges::from_dataset(&data).unwrap();
        assert_eq!(r.theta, vec![(0.1, 0.5)]);
        assert_eq!(r.tension, vec![(1.0, 3.0), (9.0, 12.0)]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let old = tiny_old();
        let grown = crate::growth::grow_network(&old, 3).unwrap();
        let data = vec![SensorSample::new(vec![0.2], vec![10.0; 3], vec![0.3; 3])];
        let cfg = RetrainConfig { epochs: 0, ..Default::default() };
        let (net, hist) = retrain(&grown, &old, &data, &cfg, &ranges()).unwrap();
        assert!(hist.is_empty());
        assert_eq!(net.encoder(), grown.encoder());
        assert_eq!(net.decoder(), grown.decoder());
        assert!(retrain(&grown, &old, &[], &cfg, &ranges()).is_err());
    }
}
