//! Data collection on the simulated plant.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{BodySchemaNet, SensorSample};
use crate::sim::{MuscleCommand, PlantConfig, Side, Simulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub count: usize,
    /// rad.
    pub theta_range: (f64, f64),
    /// Range of commanded tensions for the existing muscles, N.
    pub tension_range: (f64, f64),
    /// Range of f_bias for added muscles during post-growth collection, N.
    pub new_bias_range: (f64, f64),
    /// k_stiff of position-controlled muscles, N/m.
    pub k_stiff: f64,
    /// Uniform offset added to l_ref during babbling, m.
    pub length_jitter: f64,
    /// s.
    pub settle_timeout: f64,
    pub seed: u64,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            count: 200,
            theta_range: (0.0, 120f64.to_radians()),
            tension_range: (5.0, 60.0),
            new_bias_range: (5.0, 60.0),
            k_stiff: 3000.0,
            length_jitter: 0.002,
            settle_timeout: 5.0,
            seed: 0,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if self.count == 0 {
            return Err(Error::Config("collection count must be at least 1".into()));
        }
        if !ok(self.theta_range) || !ok(self.tension_range) || !ok(self.new_bias_range) {
            return Err(Error::Config("collection ranges must be non-empty".into()));
        }
        if self.tension_range.0 < 0.0 || self.new_bias_range.0 < 0.0 {
            return Err(Error::Config("tension ranges must be non-negative".into()));
        }
        if !(self.k_stiff >= 0.0) || !(self.length_jitter >= 0.0) || !(self.settle_timeout > 0.0) {
            return Err(Error::Config("k_stiff, length_jitter and settle_timeout must be non-negative".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..hi)
}

/// Static tensions holding `theta`: random extensor tensions, with the
/// required flexor torque split at random between the flexors.
fn balanced_tensions(plant: &PlantConfig, theta: f64, range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gravity = plant.joint.gravity_torque(theta);
    let mut tensions = vec![0.0; plant.n_muscles()];
    for _ in 0..100 {
        let mut required = gravity;
        for (i, m) in plant.muscles.iter().enumerate() {
            if m.side == Side::Extensor {
                tensions[i] = uniform(rng, range);
                required += m.moment_arm(theta) * tensions[i];
            }
        }
        let shares: Vec<(usize, f64)> = plant
            .muscles
            .iter()
            .enumerate()
            .filter(|(_, m)| m.side == Side::Flexor)
            .map(|(i, _)| (i, rng.gen_range(0.05..1.0)))
            .collect();
        let total: f64 = shares.iter().map(|s| s.1).sum();
        let mut in_range = true;
        for &(i, w) in &shares {
            let f = required.max(0.0) * w / total / plant.muscles[i].moment_arm(theta);
            tensions[i] = f.max(range.0);
            in_range &= f <= range.1;
        }
        if in_range {
            break;
        }
    }
    tensions
}

fn settle_pass(sim: &mut Simulator, commands: &[MuscleCommand], timeout: f64) -> Result<Option<SensorSample>> {
    let out = sim.settle(commands, timeout)?;
    Ok((out.converged && out.sample.validate().is_ok()).then_some(out.sample))
}

fn check_rate(converged: usize, attempted: usize) -> Result<()> {
    if 2 * converged < attempted {
        return Err(Error::CollectionFault { converged, attempted });
    }
    Ok(())
}

/// Motor babbling: repeated stiffness-controlled moves to random postures
/// with random co-contraction, recording each settled `(θ, f, l)`.
pub fn collect_pretraining(plant: &PlantConfig, cfg: &CollectionConfig) -> Result<Vec<SensorSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sim = Simulator::new(plant.clone(), cfg.theta_range.0)?;
    let mut data = Vec::with_capacity(cfg.count);
    let mut attempted = 0usize;
    while data.len() < cfg.count && attempted < 2 * cfg.count {
        attempted += 1;
        let theta = uniform(&mut rng, cfg.theta_range);
        let tensions = balanced_tensions(plant, theta, cfg.tension_range, &mut rng);
        let commands: Vec<MuscleCommand> = plant
            .muscles
            .iter()
            .zip(&tensions)
            .map(|(m, &f)| {
                let jitter = if cfg.length_jitter > 0.0 {
                    rng.gen_range(-cfg.length_jitter..cfg.length_jitter)
                } else {
                    0.0
                };
                let l_ref = m.path_length(theta) - m.stretch_for_tension(f) + jitter;
                MuscleCommand::stiffness(l_ref, f, cfg.k_stiff)
            })
            .collect();
        if let Some(sample) = settle_pass(&mut sim, &commands, cfg.settle_timeout)? {
            data.push(sample);
        }
    }
    check_rate(data.len(), attempted)?;
    if data.len() < cfg.count {
        return Err(Error::CollectionFault {
            converged: data.len(),
            attempted,
        });
    }
    Ok(data)
}

/// Collects `n_new` samples on the grown plant. Muscles `0..m_old` follow
/// target lengths predicted by `net_new` for random `(θ, f)`; the added
/// muscles run pure tension control (`k_stiff = 0`) with random `f_bias`.
pub fn collect_post_growth(
    plant: &PlantConfig,
    net_new: &BodySchemaNet,
    cfg: &CollectionConfig,
    n_new: usize,
    m_old: usize,
) -> Result<Vec<SensorSample>> {
    let commands = post_growth_commands(plant, net_new, cfg, 2 * n_new.max(1), m_old)?;
    let mut sim = Simulator::new(plant.clone(), cfg.theta_range.0)?;
    let mut data = Vec::with_capacity(n_new);
    let mut attempted = 0usize;
    for cmd in &commands {
        if data.len() == n_new {
            break;
        }
        attempted += 1;
        if let Some(sample) = settle_pass(&mut sim, cmd, cfg.settle_timeout)? {
            data.push(sample);
        }
    }
    check_rate(data.len(), attempted)?;
    if data.len() < n_new {
        return Err(Error::CollectionFault {
            converged: data.len(),
            attempted,
        });
    }
    Ok(data)
}

/// Command sets used by [`collect_post_growth`], in order.
pub fn post_growth_commands(
    plant: &PlantConfig,
    net_new: &BodySchemaNet,
    cfg: &CollectionConfig,
    count: usize,
    m_old: usize,
) -> Result<Vec<Vec<MuscleCommand>>> {
    cfg.validate()?;
    let m_new = plant.n_muscles();
    if net_new.n_muscles() != m_new || m_old >= m_new {
        return Err(Error::shape("grown network muscles", m_new, net_new.n_muscles()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let theta = uniform(&mut rng, cfg.theta_range);
        let mut tension: Vec<f64> = (0..m_old).map(|_| uniform(&mut rng, cfg.tension_range)).collect();
        tension.extend((m_old..m_new).map(|_| uniform(&mut rng, cfg.new_bias_range)));
        let length = net_new.predict_muscle_length(&[theta], &tension)?;
        let commands = (0..m_new)
            .map(|i| {
                if i < m_old {
                    MuscleCommand::stiffness(length[i], tension[i], cfg.k_stiff)
                } else {
                    MuscleCommand::tension(tension[i])
                }
            })
            .collect();
        out.push(commands);
    }
    Ok(out)
}

/// Dataset as CSV with columns `theta1..,f1..,l1..`; values print losslessly.
pub fn dataset_csv(samples: &[SensorSample]) -> String {
    let (n, m) = samples.first().map_or((1, 0), |s| (s.n_joints(), s.n_muscles()));
    let mut out = String::new();
    let names = (1..=n)
        .map(|i| format!("theta{i}"))
        .chain((1..=m).map(|i| format!("f{i}")))
        .chain((1..=m).map(|i| format!("l{i}")));
    out.push_str(&names.collect::<Vec<_>>().join(","));
    out.push('\n');
    for s in samples {
        let row: Vec<String> = s.to_vec().iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn parse_dataset_csv(text: &str) -> Result<Vec<SensorSample>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let n = cols.iter().filter(|c| c.starts_with("theta")).count();
    let m = cols.iter().filter(|c| c.starts_with('f')).count();
    if n == 0 || cols.len() != n + 2 * m {
        return Err(Error::parse(1, format!("unexpected dataset header `{header}`")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines {
        let v = line
            .split(',')
            .map(|x| x.trim().parse::<f64>().map_err(|e| Error::parse(ln + 1, format!("{x}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        let sample = SensorSample::from_slice(&v, n, m).map_err(|_| Error::parse(ln + 1, "wrong column count"))?;
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[SensorSample]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_csv(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SensorSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_csv(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
