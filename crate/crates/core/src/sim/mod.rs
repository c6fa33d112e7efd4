//! One-joint tendon-driven elbow.
//!
//! Each muscle is a winch in series with an exponential elastic element,
//! routed through a sheath with directional efficiency η and wrapping the
//! joint with an angle-dependent moment arm. Winches run a proportional
//! tension loop towards the muscle stiffness law
//! `f_ref = f_bias + k_stiff (l − l_ref)`, where `l` is the winch position.
//!
//! Joint dynamics, integrated with semi-implicit Euler:
//!
//! ```text
//! I θ̈ = Σ s_i r_i(θ) f_del,i − m g L_c sin(θ + θ_g) − b θ̇
//! ```
//!
//! Delivered tension is `f/η` for a tendon being pulled out by the joint and
//! `η f` for one pulling the joint along. At rest the sheath holds the joint
//! whenever gravity lies inside the band of achievable delivered torques,
//! which makes settled postures depend on the direction of approach.

mod muscle;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::SensorSample;

pub use muscle::{MuscleSpec, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    /// kg·m².
    pub inertia: f64,
    /// Forearm mass, kg.
    pub mass: f64,
    /// Distance from joint to forearm centre of mass, m.
    pub com_distance: f64,
    /// Viscous damping, N·m·s.
    pub damping: f64,
    pub gravity: f64,
    /// θ_g; 0 puts maximal gravity torque at 90° flexion.
    pub gravity_offset: f64,
    /// Joint stops, rad.
    pub theta_min: f64,
    pub theta_max: f64,
    /// Below this speed the sheath may hold the joint, rad/s.
    pub stick_speed: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            inertia: 0.05,
            mass: 1.0,
            com_distance: 0.15,
            damping: 0.5,
            gravity: 9.81,
            gravity_offset: 0.0,
            theta_min: 0.0,
            theta_max: 120f64.to_radians(),
            stick_speed: 1e-3,
        }
    }
}

impl JointConfig {
    #[inline]
    pub fn gravity_torque(&self, theta: f64) -> f64 {
        self.mass * self.gravity * self.com_distance * (theta + self.gravity_offset).sin()
    }

    pub fn clamp(&self, theta: f64) -> f64 {
        theta.clamp(self.theta_min, self.theta_max)
    }
}

/// Plant description: joint constants and muscle arrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    #[serde(default)]
    pub joint: JointConfig,
    /// Integration step, s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub muscles: Vec<MuscleSpec>,
}

fn default_dt() -> f64 {
    1e-3
}

fn muscle(name: &str, side: Side, a: f64, b: f64, phase: f64) -> MuscleSpec {
    MuscleSpec {
        name: name.into(),
        side,
        arm_a: a,
        arm_b: b,
        arm_phase: phase,
        rest_path: 0.0,
        elastic_gain: 10.0,
        elastic_exponent: 120.0,
        friction_efficiency: 0.92,
        max_speed: 0.2,
        tension_gain: 0.01,
    }
}

impl PlantConfig {
    /// Extensor #1 and flexors #2, #3.
    #[allow(clippy::approx_constant)]
    pub fn old_arrangement() -> Self {
        Self {
            joint: JointConfig::default(),
            dt: default_dt(),
            muscles: vec![
                muscle("extensor-1", Side::Extensor, 0.024, 0.006, 0.0),
                muscle("flexor-2", Side::Flexor, 0.030, 0.010, -1.5708),
                muscle("flexor-3", Side::Flexor, 0.026, 0.008, -0.9),
            ],
        }
    }

    /// The old arrangement plus flexor #4.
    pub fn new_arrangement() -> Self {
        let mut cfg = Self::old_arrangement();
        cfg.muscles.push(muscle("flexor-4", Side::Flexor, 0.028, 0.011, -2.1));
        cfg
    }

    pub fn n_muscles(&self) -> usize {
        self.muscles.len()
    }

    pub fn flexor_indices(&self) -> Vec<usize> {
        self.muscles
            .iter()
            .enumerate()
            .filter(|(_, m)| m.side == Side::Flexor)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.muscles.is_empty() {
            return Err(Error::Config("plant needs at least one muscle".into()));
        }
        if !(self.dt > 0.0 && self.dt <= 5e-3) {
            return Err(Error::Config(format!("dt must be in (0, 5 ms], got {}", self.dt)));
        }
        let j = &self.joint;
        if !(j.inertia > 0.0) || !(j.damping >= 0.0) || !(j.theta_max > j.theta_min) {
            return Err(Error::Config("invalid joint constants".into()));
        }
        for m in &self.muscles {
            m.validate((j.theta_min, j.theta_max)).map_err(Error::Config)?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("plant config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plant config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Per-muscle command for the stiffness law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuscleCommand {
    /// l_ref, m.
    pub length_ref: f64,
    /// N, ≥ 0.
    pub f_bias: f64,
    /// N/m, ≥ 0.
    pub k_stiff: f64,
}

impl MuscleCommand {
    pub fn tension(f_bias: f64) -> Self {
        Self {
            length_ref: 0.0,
            f_bias,
            k_stiff: 0.0,
        }
    }

    pub fn stiffness(length_ref: f64, f_bias: f64, k_stiff: f64) -> Self {
        Self {
            length_ref,
            f_bias,
            k_stiff,
        }
    }

    /// Eq. of the stiffness law, clamped at zero.
    #[inline]
    pub fn reference_tension(&self, length: f64) -> f64 {
        (self.f_bias + self.k_stiff * (length - self.length_ref)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub theta: f64,
    pub omega: f64,
    /// Winch positions (measured muscle lengths), m.
    pub winch: Vec<f64>,
    /// Tendon path lengths at `theta`, m.
    pub path: Vec<f64>,
    pub time: f64,
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub time: f64,
    pub theta: f64,
    pub tension: Vec<f64>,
    pub length: Vec<f64>,
    pub tension_ref: Vec<f64>,
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, rows: &[TrajectoryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let m = rows.first().map_or(0, |r| r.tension.len());
    out.push_str("t,theta");
    for prefix in ["f", "l", "f_ref"] {
        for i in 0..m {
            out.push_str(&format!(",{prefix}{i}"));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:.6},{:.9}", r.time, r.theta));
        for v in r.tension.iter().chain(&r.length).chain(&r.tension_ref) {
            out.push_str(&format!(",{v:.9}"));
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SettleCriteria {
    /// rad/s.
    pub max_speed: f64,
    /// N/s.
    pub max_tension_rate: f64,
    /// Required quiet time, s.
    pub hold: f64,
}

impl Default for SettleCriteria {
    fn default() -> Self {
        Self {
            max_speed: 1e-3,
            max_tension_rate: 0.5,
            hold: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettleOutcome {
    pub sample: SensorSample,
    pub converged: bool,
    /// Simulated time spent, s.
    pub elapsed: f64,
    /// Stiffness-law reference tensions at the final step, N.
    pub tension_ref: Vec<f64>,
}

/// Single-threaded plant instance.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: PlantConfig,
    state: PlantState,
    tension: Vec<f64>,
    tension_ref: Vec<f64>,
    record_every: Option<usize>,
    steps: usize,
    trajectory: Vec<TrajectoryRow>,
}

impl Simulator {
    /// Plant at rest at `theta` with every tendon just taut (zero tension).
    pub fn new(config: PlantConfig, theta: f64) -> Result<Self> {
        let m = config.n_muscles();
        Self::with_tensions(config, theta, &vec![0.0; m])
    }

    /// Plant at rest at `theta` with the given tendon tensions.
    pub fn with_tensions(config: PlantConfig, theta: f64, tensions: &[f64]) -> Result<Self> {
        config.validate()?;
        if tensions.len() != config.n_muscles() {
            return Err(Error::shape("initial tensions", config.n_muscles(), tensions.len()));
        }
        let theta = config.joint.clamp(theta);
        let path: Vec<f64> = config.muscles.iter().map(|m| m.path_length(theta)).collect();
        let winch = config
            .muscles
            .iter()
            .zip(&path)
            .zip(tensions)
            .map(|((m, c), &f)| c - m.stretch_for_tension(f))
            .collect();
        let mut sim = Self {
            state: PlantState {
                theta,
                omega: 0.0,
                winch,
                path,
                time: 0.0,
            },
            tension: Vec::new(),
            tension_ref: vec![0.0; config.n_muscles()],
            config,
            record_every: None,
            steps: 0,
            trajectory: Vec::new(),
        };
        sim.tension = sim.measured_tensions();
        Ok(sim)
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn n_muscles(&self) -> usize {
        self.config.n_muscles()
    }

    /// Records one trajectory row every `every` steps (`None` disables).
    pub fn set_recording(&mut self, every: Option<usize>) {
        self.record_every = every.filter(|&e| e > 0);
    }

    pub fn take_trajectory(&mut self) -> Vec<TrajectoryRow> {
        std::mem::take(&mut self.trajectory)
    }

    fn measured_tensions(&self) -> Vec<f64> {
        self.config
            .muscles
            .iter()
            .zip(&self.state.path)
            .zip(&self.state.winch)
            .map(|((m, c), p)| m.elastic_tension(c - p))
            .collect()
    }

    /// Current `(θ, f, l)` reading.
    pub fn sense(&self) -> SensorSample {
        SensorSample::new(vec![self.state.theta], self.tension.clone(), self.state.winch.clone())
    }

    pub fn tensions(&self) -> &[f64] {
        &self.tension
    }

    pub fn tension_refs(&self) -> &[f64] {
        &self.tension_ref
    }

    /// Kinetic plus elastic energy, J.
    pub fn mechanical_energy(&self) -> f64 {
        let ke = 0.5 * self.config.joint.inertia * self.state.omega * self.state.omega;
        let pe: f64 = self
            .config
            .muscles
            .iter()
            .zip(&self.state.path)
            .zip(&self.state.winch)
            .map(|((m, c), p)| m.elastic_energy(c - p))
            .sum();
        ke + pe
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.config.joint.inertia * self.state.omega * self.state.omega
    }

    /// Advances the plant by `dt` seconds.
    pub fn step(&mut self, commands: &[MuscleCommand], dt: f64) -> Result<()> {
        if commands.len() != self.n_muscles() {
            return Err(Error::shape("muscle commands", self.n_muscles(), commands.len()));
        }
        if !(dt > 0.0 && dt <= 5e-3) {
            return Err(Error::Config(format!("dt must be in (0, 5 ms], got {dt}")));
        }
        let joint = &self.config.joint;
        let theta = self.state.theta;
        let omega = self.state.omega;
        let gravity = joint.gravity_torque(theta);

        let mut winch_speed = Vec::with_capacity(self.n_muscles());
        let (mut tau_lo, mut tau_hi, mut tau_moving) = (0.0, 0.0, 0.0);
        for (i, m) in self.config.muscles.iter().enumerate() {
            let f = self.tension[i];
            let cmd = &commands[i];
            let f_ref = cmd.reference_tension(self.state.winch[i]);
            self.tension_ref[i] = f_ref;
            winch_speed.push((m.tension_gain * (f - f_ref)).clamp(-m.max_speed, m.max_speed));

            let s = m.side.sign();
            let r = m.moment_arm(theta);
            let eta = m.friction_efficiency;
            let (a, b) = (s * r * f * eta, s * r * f / eta);
            tau_lo += a.min(b);
            tau_hi += a.max(b);
            // tendon lengthening at the joint when -s r ω > 0
            let lengthening = -s * omega > 0.0;
            let delivered = if lengthening { f / eta } else { f * eta };
            tau_moving += s * r * delivered;
        }

        let mut new_omega;
        if omega.abs() < joint.stick_speed {
            if tau_lo <= gravity && gravity <= tau_hi {
                new_omega = 0.0;
            } else {
                let drive = if tau_lo > gravity { tau_lo - gravity } else { tau_hi - gravity };
                new_omega = omega + (drive - joint.damping * omega) / joint.inertia * dt;
            }
        } else {
            let accel = (tau_moving - gravity - joint.damping * omega) / joint.inertia;
            new_omega = omega + accel * dt;
            if new_omega * omega < 0.0 {
                new_omega = 0.0;
            }
        }
        let mut new_theta = theta + new_omega * dt;
        if new_theta <= joint.theta_min {
            new_theta = joint.theta_min;
            new_omega = new_omega.max(0.0);
        } else if new_theta >= joint.theta_max {
            new_theta = joint.theta_max;
            new_omega = new_omega.min(0.0);
        }

        for (p, v) in self.state.winch.iter_mut().zip(&winch_speed) {
            *p += v * dt;
        }
        self.state.theta = new_theta;
        self.state.omega = new_omega;
        for (c, m) in self.state.path.iter_mut().zip(&self.config.muscles) {
            *c = m.path_length(new_theta);
        }
        self.state.time += dt;
        self.tension = self.measured_tensions();

        let finite = self.state.theta.is_finite()
            && self.state.omega.is_finite()
            && self.state.winch.iter().all(|v| v.is_finite())
            && self.tension.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::SimulationFault {
                time: self.state.time,
                reason: "non-finite state".into(),
            });
        }

        self.steps += 1;
        if let Some(every) = self.record_every {
            if self.steps.is_multiple_of(every) {
                self.trajectory.push(TrajectoryRow {
                    time: self.state.time,
                    theta: self.state.theta,
                    tension: self.tension.clone(),
                    length: self.state.winch.clone(),
                    tension_ref: self.tension_ref.clone(),
                });
            }
        }
        Ok(())
    }

    /// Steps with fixed commands until the plant is quiet for
    /// `criteria.hold` seconds or `timeout` seconds elapse.
    pub fn settle_with(
        &mut self,
        commands: &[MuscleCommand],
        timeout: f64,
        criteria: &SettleCriteria,
    ) -> Result<SettleOutcome> {
        if !(timeout > 0.0) {
            return Err(Error::Config("settle timeout must be positive".into()));
        }
        let dt = self.config.dt;
        let start = self.state.time;
        let hold_steps = (criteria.hold / dt).round().max(1.0) as usize;
        let mut quiet = 0usize;
        let mut converged = false;
        while self.state.time - start < timeout - 1e-12 {
            let before = self.tension.clone();
            self.step(commands, dt)?;
            let rate = self
                .tension
                .iter()
                .zip(&before)
                .map(|(a, b)| ((a - b) / dt).abs())
                .fold(0.0, f64::max);
            if self.state.omega.abs() < criteria.max_speed && rate < criteria.max_tension_rate {
                quiet += 1;
                if quiet >= hold_steps {
                    converged = true;
                    break;
                }
            } else {
                quiet = 0;
            }
        }
        Ok(SettleOutcome {
            sample: self.sense(),
            converged,
            elapsed: self.state.time - start,
            tension_ref: self.tension_ref.clone(),
        })
    }

    pub fn settle(&mut self, commands: &[MuscleCommand], timeout: f64) -> Result<SettleOutcome> {
        self.settle_with(commands, timeout, &SettleCriteria::default())
    }
}
