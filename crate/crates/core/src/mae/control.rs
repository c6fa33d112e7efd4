//! Target muscle lengths by gradient descent over the latent vector.
//!
//! The latent is seeded by encoding `(θ_ref, f_seed)` with mask `ThetaF`, then
//! moved downhill on a loss over the decoded state:
//!
//! ```text
//! L(z) = w_θ ‖(θ̂ − θ_ref)/σ_θ‖² + w_f ‖f̂/σ_f‖² + w_floor ‖max(0, f_min − f̂)/σ_f‖²
//!      + w_τ ‖τ̂ − τ_ref‖²,     τ̂ = −G(z)ᵀ f̂,  G = ∂l̂/∂θ̂
//! ```
//!
//! `G` is taken from the decoder Jacobian as `J_l J_θᵀ (J_θ J_θᵀ)⁻¹`. Steps
//! that increase the loss are halved until they do not.

use serde::{Deserialize, Serialize};

use super::{BodySchemaNet, Mask, SensorSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlSolveConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub weight_theta: f64,
    pub weight_tension: f64,
    pub weight_torque: f64,
    /// Weight of the hinge penalty on tensions below `tension_floor`.
    pub weight_floor: f64,
    /// Required joint torque, N·m. Empty means zero.
    pub torque_ref: Vec<f64>,
    /// N.
    pub tension_floor: f64,
    /// Lower bound on the per-muscle tension scale σ_f, N.
    pub min_tension_scale: f64,
}

impl Default for ControlSolveConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 0.05,
            weight_theta: 1.0,
            weight_tension: 1e-3,
            weight_torque: 0.0,
            weight_floor: 1.0,
            torque_ref: Vec::new(),
            tension_floor: 5.0,
            min_tension_scale: 1.0,
        }
    }
}

impl ControlSolveConfig {
    fn validate(&self, n_joints: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.min_tension_scale > 0.0) {
            return Err(Error::Config("control step_size must be positive".into()));
        }
        let weights = [self.weight_theta, self.weight_tension, self.weight_torque, self.weight_floor];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("control loss weights must be non-negative".into()));
        }
        if !self.torque_ref.is_empty() && self.torque_ref.len() != n_joints {
            return Err(Error::shape("torque_ref", n_joints, self.torque_ref.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    /// Commanded muscle lengths, m.
    pub length_ref: Vec<f64>,
    /// Decoded tensions at the solution, N (unclipped).
    pub tension: Vec<f64>,
    /// Decoded joint angles at the solution, rad.
    pub theta: Vec<f64>,
    pub latent: Vec<f64>,
    pub loss: f64,
    /// Loss after each accepted step, starting with the seed latent.
    pub loss_history: Vec<f64>,
}

struct Objective<'a> {
    net: &'a BodySchemaNet,
    cfg: &'a ControlSolveConfig,
    theta_ref_n: Vec<f64>,
}

struct Evaluation {
    loss: f64,
    grad: Vec<f64>,
    decoded: Vec<f64>,
}

impl Objective<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.net.n_joints(), self.net.n_muscles())
    }

    fn evaluate(&self, z: &[f64]) -> Result<Evaluation> {
        let (n, m) = self.dims();
        let norm = self.net.normalizer();
        let cache = self.net.decoder().forward(z)?;
        let y = cache.output().to_vec();
        let mut loss = 0.0;
        let mut dy = vec![0.0; y.len()];
        for j in 0..n {
            let r = y[j] - self.theta_ref_n[j];
            loss += self.cfg.weight_theta * r * r;
            dy[j] += 2.0 * self.cfg.weight_theta * r;
        }
        for i in 0..m {
            let sigma = norm.tension.std[i].max(self.cfg.min_tension_scale);
            let f = norm.tension.denormalize(i, y[n + i]);
            let scaled = f / sigma;
            loss += self.cfg.weight_tension * scaled * scaled;
            dy[n + i] += 2.0 * self.cfg.weight_tension * scaled;
            let short = ((self.cfg.tension_floor - f) / sigma).max(0.0);
            loss += self.cfg.weight_floor * short * short;
            dy[n + i] -= 2.0 * self.cfg.weight_floor * short;
        }
        let mut grad = self.net.decoder().backward_input(&cache, &dy)?;
        if self.cfg.weight_torque > 0.0 {
            let t = self.torque_term(z)?;
            loss += t;
            let h = 1e-6;
            let mut probe = z.to_vec();
            for k in 0..z.len() {
                probe[k] = z[k] + h;
                grad[k] += (self.torque_term(&probe)? - t) / h;
                probe[k] = z[k];
            }
        }
        Ok(Evaluation { loss, grad, decoded: y })
    }

    fn torque_term(&self, z: &[f64]) -> Result<f64> {
        let tau = estimated_torque(self.net, z)?;
        let zero = vec![0.0; tau.len()];
        let tau_ref = if self.cfg.torque_ref.is_empty() { &zero } else { &self.cfg.torque_ref };
        Ok(self.cfg.weight_torque * tau.iter().zip(tau_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
    }
}

/// Solves `M×N` `G = J_l J_θᵀ (J_θ J_θᵀ)⁻¹` from the decoder Jacobian at `z`,
/// in raw units (m/rad).
pub fn muscle_jacobian(net: &BodySchemaNet, z: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (n, m) = (net.n_joints(), net.n_muscles());
    let scales = net.normalizer().scales();
    let jac = net.decoder().input_jacobian(z)?;
    let raw_row = |c: usize| -> Vec<f64> { jac[c].iter().map(|v| v * scales[c]).collect() };
    let j_theta: Vec<Vec<f64>> = (0..n).map(raw_row).collect();
    let j_len: Vec<Vec<f64>> = (0..m).map(|i| raw_row(n + m + i)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = j_theta
        .iter()
        .map(|a| j_theta.iter().map(|b| dot(a, b)).collect())
        .collect();
    // rows of G: solve gram · g_iᵀ = J_θ · j_l,iᵀ
    j_len
        .iter()
        .map(|jl| {
            let rhs: Vec<f64> = j_theta.iter().map(|jt| dot(jt, jl)).collect();
            solve_small(gram.clone(), rhs)
        })
        .collect()
}

/// Joint torque implied by the decoded tensions at `z`: `τ̂ = −Gᵀ f̂`.
pub fn estimated_torque(net: &BodySchemaNet, z: &[f64]) -> Result<Vec<f64>> {
    let (n, _) = (net.n_joints(), net.n_muscles());
    let decoded = net.normalizer().denormalize(&net.decode(z)?)?;
    let g = muscle_jacobian(net, z)?;
    Ok((0..n)
        .map(|j| -g.iter().zip(&decoded.tension).map(|(row, f)| row[j] * f).sum::<f64>())
        .collect())
}

#[allow(clippy::needless_range_loop)]
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::NonFinite("singular joint Jacobian"));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Ok(x)
}

/// Computes target muscle lengths for `theta_ref`.
///
/// `tension_seed` defaults to the per-channel mean tensions.
pub fn solve_control(
    net: &BodySchemaNet,
    theta_ref: &[f64],
    tension_seed: Option<&[f64]>,
    cfg: &ControlSolveConfig,
) -> Result<ControlSolution> {
    let (n, m) = (net.n_joints(), net.n_muscles());
    if theta_ref.len() != n {
        return Err(Error::shape("theta_ref", n, theta_ref.len()));
    }
    cfg.validate(n)?;
    let norm = net.normalizer();
    let seed = match tension_seed {
        Some(f) if f.len() != m => return Err(Error::shape("tension_seed", m, f.len())),
        Some(f) => f.to_vec(),
        None => norm.tension.mean.clone(),
    };
    let probe = SensorSample::new(theta_ref.to_vec(), seed, norm.length.mean.clone());
    let mut z = net.encode(&net.assemble_input(&probe, Mask::ThetaF)?)?;
    let objective = Objective {
        net,
        cfg,
        theta_ref_n: theta_ref.iter().enumerate().map(|(j, &t)| norm.theta.normalize(j, t)).collect(),
    };
    let mut current = objective.evaluate(&z)?;
    if !current.loss.is_finite() {
        return Err(Error::SolveFailure { iteration: 0 });
    }
    let mut history = vec![current.loss];
    let mut step = cfg.step_size;
    let max_step = cfg.step_size * 16.0;
    'outer: for iteration in 0..cfg.iterations {
        loop {
            let candidate: Vec<f64> = z.iter().zip(&current.grad).map(|(v, g)| v - step * g).collect();
            let next = objective.evaluate(&candidate)?;
            if !next.loss.is_finite() {
                return Err(Error::SolveFailure { iteration: iteration + 1 });
            }
            if next.loss <= current.loss {
                z = candidate;
                current = next;
                history.push(current.loss);
                step = (step * 1.5).min(max_step);
                break;
            }
            step *= 0.5;
            if step < cfg.step_size * 1e-10 {
                break 'outer;
            }
        }
    }
    let decoded = norm.denormalize(&current.decoded)?;
    Ok(ControlSolution {
        length_ref: decoded.length,
        tension: decoded.tension,
        theta: decoded.theta,
        latent: z,
        loss: current.loss,
        loss_history: history,
    })
}
