use serde::{Deserialize, Serialize};

/// Torque sign of a muscle about the joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Flexor,
    Extensor,
}

impl Side {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Side::Flexor => 1.0,
            Side::Extensor => -1.0,
        }
    }
}

/// One tendon-driven muscle: routing geometry, series elastic element,
/// sheath friction and winch actuator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleSpec {
    #[serde(default)]
    pub name: String,
    pub side: Side,
    /// Moment arm `r(θ) = a + b·cos(θ + φ)`, m.
    pub arm_a: f64,
    pub arm_b: f64,
    pub arm_phase: f64,
    /// Tendon path length at θ = 0, m.
    pub rest_path: f64,
    /// `f = k_e (exp(c_e δ) − 1)` for stretch δ > 0; k_e in N.
    pub elastic_gain: f64,
    /// c_e in 1/m.
    pub elastic_exponent: f64,
    /// Directional sheath efficiency η ∈ (0, 1].
    pub friction_efficiency: f64,
    /// Winch speed limit, m/s.
    pub max_speed: f64,
    /// Winch velocity per unit tension error, m/(s·N).
    pub tension_gain: f64,
}

impl MuscleSpec {
    #[inline]
    pub fn moment_arm(&self, theta: f64) -> f64 {
        self.arm_a + self.arm_b * (theta + self.arm_phase).cos()
    }

    /// Tendon path length `c(θ) = c₀ − s·∫₀^θ r(u) du`.
    #[inline]
    pub fn path_length(&self, theta: f64) -> f64 {
        let integral =
            self.arm_a * theta + self.arm_b * ((theta + self.arm_phase).sin() - self.arm_phase.sin());
        self.rest_path - self.side.sign() * integral
    }

    /// Elastic element tension for stretch `delta`; zero when slack.
    #[inline]
    pub fn elastic_tension(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else {
            self.elastic_gain * ((self.elastic_exponent * delta).exp() - 1.0)
        }
    }

    /// Inverse of [`Self::elastic_tension`] for `f ≥ 0`.
    #[inline]
    pub fn stretch_for_tension(&self, f: f64) -> f64 {
        (f.max(0.0) / self.elastic_gain).ln_1p() / self.elastic_exponent
    }

    /// `df/dδ` at stretch `delta`.
    #[inline]
    pub fn elastic_stiffness(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else {
            self.elastic_gain * self.elastic_exponent * (self.elastic_exponent * delta).exp()
        }
    }

    /// Elastic potential energy stored at stretch `delta`, J.
    pub fn elastic_energy(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else {
            let c = self.elastic_exponent;
            self.elastic_gain * (((c * delta).exp() - 1.0) / c - delta)
        }
    }

    pub fn validate(&self, theta_range: (f64, f64)) -> Result<(), String> {
        if !(self.friction_efficiency > 0.0 && self.friction_efficiency <= 1.0) {
            return Err(format!("muscle `{}`: friction_efficiency must be in (0, 1]", self.name));
        }
        if !(self.elastic_gain > 0.0 && self.elastic_exponent > 0.0) {
            return Err(format!("muscle `{}`: elastic constants must be positive", self.name));
        }
        if !(self.max_speed > 0.0) || !(self.tension_gain >= 0.0) {
            return Err(format!("muscle `{}`: actuator constants must be positive", self.name));
        }
        let (lo, hi) = theta_range;
        let min_arm = (0..=200)
            .map(|k| self.moment_arm(lo + (hi - lo) * k as f64 / 200.0))
            .fold(f64::INFINITY, f64::min);
        if !(min_arm > 0.0) {
            return Err(format!("muscle `{}`: moment arm must stay positive over the joint range", self.name));
        }
        Ok(())
    }
}
