//! Closed-loop evaluation over a sequence of target joint angles.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{solve_control, BodySchemaNet, ControlSolveConfig};
use crate::sim::{JointConfig, MuscleCommand, PlantConfig, Side, Simulator, TrajectoryRow};

/// 15°, 30°, …, 120°, 105°, …, 0° in rad; the plant starts at 0°.
pub fn default_targets() -> Vec<f64> {
    let up = (1..=8).map(|k| 15.0 * k as f64);
    let down = (0..=7).rev().map(|k| 15.0 * k as f64);
    up.chain(down).map(f64::to_radians).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// rad.
    pub targets: Vec<f64>,
    /// Posture settled before the first target, rad.
    pub start: f64,
    /// N/m, applied to every muscle.
    pub k_stiff: f64,
    /// s.
    pub settle_timeout: f64,
    /// Largest fraction of failed targets that is excluded rather than fatal.
    pub max_failure_fraction: f64,
    pub solve: ControlSolveConfig,
    /// Ask the solver for the joint's static gravity torque as the required
    /// muscle torque at each target.
    pub gravity_torque_ref: bool,
    /// Record the joint trajectory every this many steps.
    pub record_every: Option<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            targets: default_targets(),
            start: 0.0,
            k_stiff: 3000.0,
            settle_timeout: 5.0,
            max_failure_fraction: 0.2,
            solve: ControlSolveConfig {
                weight_tension: 1e-2,
                weight_torque: 10.0,
                ..ControlSolveConfig::default()
            },
            gravity_torque_ref: true,
            record_every: None,
        }
    }
}

/// Maps a target angle to one command per muscle.
pub trait Controller {
    fn commands(&self, theta_ref: f64, k_stiff: f64) -> Result<Vec<MuscleCommand>>;
}

/// Target lengths and bias tensions from a trained network.
pub struct NetworkController<'a> {
    pub net: &'a BodySchemaNet,
    pub solve: &'a ControlSolveConfig,
    /// When set, the required torque is this joint's gravity torque at the target.
    pub gravity: Option<&'a JointConfig>,
}

impl Controller for NetworkController<'_> {
    fn commands(&self, theta_ref: f64, k_stiff: f64) -> Result<Vec<MuscleCommand>> {
        let sol = match self.gravity {
            Some(joint) => {
                let solve = ControlSolveConfig {
                    torque_ref: vec![joint.gravity_torque(theta_ref)],
                    ..self.solve.clone()
                };
                solve_control(self.net, &[theta_ref], None, &solve)?
            }
            None => solve_control(self.net, &[theta_ref], None, self.solve)?,
        };
        Ok(sol
            .length_ref
            .iter()
            .zip(&sol.tension)
            .map(|(&l, &f)| MuscleCommand::stiffness(l, f.max(0.0), k_stiff))
            .collect())
    }
}

/// Uses the plant's true geometry: gravity-balancing tensions with
/// antagonists at `floor` and flexor load shared by moment arm.
pub struct OracleController<'a> {
    pub plant: &'a PlantConfig,
    /// N.
    pub floor: f64,
}

impl OracleController<'_> {
    pub fn tensions(&self, theta: f64) -> Vec<f64> {
        let muscles = &self.plant.muscles;
        let mut tensions = vec![self.floor; muscles.len()];
        let mut required = self.plant.joint.gravity_torque(theta);
        for m in muscles {
            required -= m.side.sign() * m.moment_arm(theta) * self.floor;
        }
        let side = if required >= 0.0 { Side::Flexor } else { Side::Extensor };
        let arms: Vec<(usize, f64)> = muscles
            .iter()
            .enumerate()
            .filter(|(_, m)| m.side == side)
            .map(|(i, m)| (i, m.moment_arm(theta)))
            .collect();
        let norm: f64 = arms.iter().map(|a| a.1 * a.1).sum();
        for (i, r) in arms {
            tensions[i] += required.abs() * r / norm;
        }
        tensions
    }
}

impl Controller for OracleController<'_> {
    fn commands(&self, theta_ref: f64, k_stiff: f64) -> Result<Vec<MuscleCommand>> {
        Ok(self
            .plant
            .muscles
            .iter()
            .zip(self.tensions(theta_ref))
            .map(|(m, f)| MuscleCommand::stiffness(m.path_length(theta_ref) - m.stretch_for_tension(f), f, k_stiff))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub theta_ref: f64,
    pub theta: f64,
    pub tension: Vec<f64>,
    pub length: Vec<f64>,
    /// Stiffness-law reference at the settled lengths.
    pub tension_ref: Vec<f64>,
    pub commands: Vec<MuscleCommand>,
    pub converged: bool,
    pub failure: Option<String>,
}

impl TargetRecord {
    pub fn ok(&self) -> bool {
        self.converged && self.failure.is_none()
    }

    pub fn error(&self) -> f64 {
        (self.theta_ref - self.theta).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Mean |θ_ref − θ| over successful targets, rad.
    pub e_theta: f64,
    pub targets: Vec<TargetRecord>,
    pub trajectory: Vec<TrajectoryRow>,
}

impl Evaluation {
    pub fn settled(&self) -> impl Iterator<Item = &TargetRecord> {
        self.targets.iter().filter(|t| t.ok())
    }

    /// Tension vectors at the successful targets.
    pub fn settled_tensions(&self) -> Vec<Vec<f64>> {
        self.settled().map(|t| t.tension.clone()).collect()
    }

    pub fn failures(&self) -> usize {
        self.targets.iter().filter(|t| !t.ok()).count()
    }

    pub fn targets_csv(&self) -> String {
        let m = self.targets.first().map_or(0, |t| t.tension.len());
        let mut out = String::from("theta_ref,theta,converged");
        for prefix in ["f", "l", "f_ref", "l_ref", "f_bias"] {
            for i in 1..=m {
                let _ = write!(out, ",{prefix}{i}");
            }
        }
        out.push('\n');
        for t in &self.targets {
            let _ = write!(out, "{:.9e},{:.9e},{}", t.theta_ref, t.theta, u8::from(t.ok()));
            let cols = [
                t.tension.clone(),
                t.length.clone(),
                t.tension_ref.clone(),
                t.commands.iter().map(|c| c.length_ref).collect(),
                t.commands.iter().map(|c| c.f_bias).collect::<Vec<_>>(),
            ];
            for v in cols.iter().flatten() {
                let _ = write!(out, ",{v:.9e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_targets_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.targets_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate_control(net: &BodySchemaNet, plant: &PlantConfig, cfg: &EvaluationConfig) -> Result<Evaluation> {
    if net.n_joints() != 1 || net.n_muscles() != plant.n_muscles() {
        return Err(Error::shape("network muscles vs plant", plant.n_muscles(), net.n_muscles()));
    }
    let controller = NetworkController {
        net,
        solve: &cfg.solve,
        gravity: cfg.gravity_torque_ref.then_some(&plant.joint),
    };
    evaluate_with(&controller, plant, cfg)
}

pub fn evaluate_with(controller: &dyn Controller, plant: &PlantConfig, cfg: &EvaluationConfig) -> Result<Evaluation> {
    if cfg.targets.is_empty() {
        return Err(Error::Config("evaluation needs at least one target".into()));
    }
    let mut sim = Simulator::new(plant.clone(), cfg.start)?;
    if let Ok(start) = controller.commands(cfg.start, cfg.k_stiff) {
        sim.settle(&start, cfg.settle_timeout)?;
    }
    sim.set_recording(cfg.record_every);
    let mut targets = Vec::with_capacity(cfg.targets.len());
    for &theta_ref in &cfg.targets {
        let record = match controller.commands(theta_ref, cfg.k_stiff) {
            Ok(commands) => {
                let out = sim.settle(&commands, cfg.settle_timeout)?;
                TargetRecord {
                    theta_ref,
                    theta: out.sample.theta[0],
                    tension: out.sample.tension,
                    length: out.sample.length,
                    tension_ref: out.tension_ref,
                    commands,
                    converged: out.converged,
                    failure: None,
                }
            }
            Err(e) => {
                let s = sim.sense();
                TargetRecord {
                    theta_ref,
                    theta: s.theta[0],
                    tension: s.tension,
                    length: s.length,
                    tension_ref: sim.tension_refs().to_vec(),
                    commands: Vec::new(),
                    converged: false,
                    failure: Some(e.to_string()),
                }
            }
        };
        if !record.ok() {
            log::warn!(
                "target {:.1}° failed: {}",
                theta_ref.to_degrees(),
                record.failure.as_deref().unwrap_or("settle timeout")
            );
        }
        targets.push(record);
    }
    let failed = targets.iter().filter(|t| !t.ok()).count();
    if failed as f64 > cfg.max_failure_fraction * targets.len() as f64 || failed == targets.len() {
        return Err(Error::EvaluationFault {
            failed,
            total: targets.len(),
        });
    }
    let ok: Vec<f64> = targets.iter().filter(|t| t.ok()).map(TargetRecord::error).collect();
    let e_theta = ok.iter().sum::<f64>() / ok.len() as f64;
    Ok(Evaluation {
        e_theta,
        targets,
        trajectory: sim.take_trajectory(),
    })
}
