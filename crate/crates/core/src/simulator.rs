//! Planar N-link arm used as the agent's body.
//!
//! Velocity mode integrates commanded joint velocities directly. Torque mode
//! uses a lumped diagonal inertia per joint, gravity torques from point
//! masses at the link midpoints, and viscous damping, stepped with
//! semi-implicit Euler. Gravity points along the kinematic +x axis, so the
//! arm hangs straight at `q = 0` and a single link at `q = π/2` is
//! horizontal.

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AifError, Result};
use crate::genmodel::AnalyticFk;
use crate::types::{ActionMode, Channel, Observation};

/// Per-channel Gaussian noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// rad
    pub proprio_pos: f64,
    /// rad/s
    pub proprio_vel: f64,
    /// m
    pub visual: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            proprio_pos: 0.05,
            proprio_vel: 0.05,
            visual: 0.01,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            proprio_pos: 0.0,
            proprio_vel: 0.0,
            visual: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokenChannel {
    pub channel: Channel,
    /// First step at which the channel stops reporting.
    pub step: u64,
}

/// Online model-world mismatches, each a step function in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    #[serde(default)]
    pub enabled: bool,
    /// Displacement added to the visual end-effector reading, meters.
    #[serde(default)]
    pub visual_shift: [f64; 2],
    /// First step at which the shift is applied.
    #[serde(default)]
    pub shift_step: u64,
    #[serde(default)]
    pub broken_channels: Vec<BrokenChannel>,
}

impl PerturbationSpec {
    pub fn shift_active(&self, step: u64) -> bool {
        self.enabled && step >= self.shift_step && self.visual_shift != [0.0, 0.0]
    }

    pub fn channel_broken(&self, channel: Channel, step: u64) -> bool {
        self.enabled
            && self
                .broken_channels
                .iter()
                .any(|b| b.channel == channel && step >= b.step)
    }

    /// Whether any perturbation is in effect at `step`.
    pub fn active(&self, step: u64) -> bool {
        self.shift_active(step)
            || self
                .broken_channels
                .iter()
                .any(|b| self.channel_broken(b.channel, step))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// m
    pub link_lengths: Vec<f64>,
    /// kg
    pub link_masses: Vec<f64>,
    /// m/s², applied in torque mode.
    pub gravity: f64,
    /// N·m·s/rad
    pub damping: f64,
    #[serde(default)]
    pub mode: ActionMode,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    /// rad/s
    #[serde(default = "default_velocity_limit")]
    pub velocity_limit: f64,
    /// N·m
    #[serde(default = "default_torque_limit")]
    pub torque_limit: f64,
    /// Whether the arm reports joint velocities.
    #[serde(default = "default_true")]
    pub velocity_sensing: bool,
    /// Whether a camera reports the end-effector position.
    #[serde(default = "default_true")]
    pub visual_sensing: bool,
}

fn default_velocity_limit() -> f64 {
    2.0
}

fn default_torque_limit() -> f64 {
    10.0
}

impl WorldConfig {
    pub fn two_link() -> Self {
        Self {
            link_lengths: vec![1.0, 1.0],
            link_masses: vec![1.0, 1.0],
            gravity: 9.81,
            damping: 0.5,
            mode: ActionMode::Velocity,
            noise: NoiseSpec::default(),
            perturbation: PerturbationSpec::default(),
            velocity_limit: default_velocity_limit(),
            torque_limit: default_torque_limit(),
            velocity_sensing: true,
            visual_sensing: true,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.link_lengths.len();
        if n == 0 {
            return Err(AifError::invalid("world needs at least one link"));
        }
        check_dim("link masses", n, self.link_masses.len())?;
        if self.link_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(AifError::invalid("link lengths must be > 0"));
        }
        if self.link_masses.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(AifError::invalid("link masses must be > 0"));
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return Err(AifError::invalid("gravity must be >= 0"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(AifError::invalid("damping must be >= 0"));
        }
        let n = &self.noise;
        if [n.proprio_pos, n.proprio_vel, n.visual]
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(AifError::invalid("noise std devs must be >= 0"));
        }
        if self
            .perturbation
            .broken_channels
            .iter()
            .any(|b| b.channel == Channel::ProprioPos)
        {
            return Err(AifError::invalid("the proprio_pos channel cannot be broken"));
        }
        if self.perturbation.visual_shift.iter().any(|v| !v.is_finite()) {
            return Err(AifError::NonFinite("visual shift"));
        }
        if !(self.velocity_limit > 0.0 && self.torque_limit > 0.0) {
            return Err(AifError::invalid("actuator limits must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ArmWorld {
    cfg: WorldConfig,
    fk: AnalyticFk,
    q: DVector<f64>,
    qdot: DVector<f64>,
    step: u64,
    time: f64,
    rng: ChaCha8Rng,
}

impl ArmWorld {
    pub fn new(cfg: WorldConfig, q0: DVector<f64>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_dim("initial joint angles", cfg.n_joints(), q0.len())?;
        let fk = AnalyticFk::with_links(&cfg.link_lengths)?;
        let n = q0.len();
        Ok(Self {
            cfg,
            fk,
            q: q0,
            qdot: DVector::zeros(n),
            step: 0,
            time: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut WorldConfig {
        &mut self.cfg
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn qdot(&self) -> &DVector<f64> {
        &self.qdot
    }

    pub fn set_state(&mut self, q: DVector<f64>, qdot: DVector<f64>) -> Result<()> {
        check_dim("joint angles", self.q.len(), q.len())?;
        check_dim("joint velocities", self.q.len(), qdot.len())?;
        self.q = q;
        self.qdot = qdot;
        Ok(())
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn kinematics(&self) -> &AnalyticFk {
        &self.fk
    }

    pub fn end_effector(&self) -> Vector2<f64> {
        self.fk.predict(&self.q).expect("state matches link count")
    }

    /// `I_i = Σ_{j≥i} m_j (Σ_{k≤j} L_k)²`
    pub fn inertia(&self) -> DVector<f64> {
        let n = self.q.len();
        let reach: Vec<f64> = self
            .cfg
            .link_lengths
            .iter()
            .scan(0.0, |acc, l| {
                *acc += l;
                Some(*acc)
            })
            .collect();
        DVector::from_iterator(
            n,
            (0..n).map(|i| (i..n).map(|j| self.cfg.link_masses[j] * reach[j].powi(2)).sum()),
        )
    }

    /// Generalized gravity torques for point masses at link midpoints.
    pub fn gravity_torque(&self) -> DVector<f64> {
        let n = self.q.len();
        let theta: Vec<f64> = self
            .q
            .iter()
            .scan(0.0, |acc, qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect();
        let g = self.cfg.gravity;
        let (l, m) = (&self.cfg.link_lengths, &self.cfg.link_masses);
        // ∂x_cj/∂θ_k for the midpoint of link j: −L_k sin θ_k for k < j,
        // −(L_j/2) sin θ_j for k = j. The potential is −g Σ m_j x_cj.
        DVector::from_iterator(
            n,
            (0..n).map(|i| {
                let mut tau = 0.0;
                for j in i..n {
                    let mut dx = -0.5 * l[j] * theta[j].sin();
                    for k in i..j {
                        dx -= l[k] * theta[k].sin();
                    }
                    tau += g * m[j] * dx;
                }
                tau
            }),
        )
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self
            .inertia()
            .iter()
            .zip(self.qdot.iter())
            .map(|(i, v)| i * v * v)
            .sum::<f64>()
    }

    /// Advances the world by `dt` under action `a`.
    pub fn step(&mut self, a: &DVector<f64>, dt: f64) -> Result<()> {
        check_dim("action", self.q.len(), a.len())?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(AifError::invalid(format!("dt must be > 0, got {dt}")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(AifError::NonFinite("action"));
        }
        match self.cfg.mode {
            ActionMode::Velocity => {
                let lim = self.cfg.velocity_limit;
                self.qdot = a.map(|v| v.clamp(-lim, lim));
                self.q += &self.qdot * dt;
            }
            ActionMode::Torque => {
                let lim = self.cfg.torque_limit;
                let tau = a.map(|v| v.clamp(-lim, lim));
                let net = tau + self.gravity_torque() - &self.qdot * self.cfg.damping;
                let qddot = net.component_div(&self.inertia());
                self.qdot += qddot * dt;
                self.q += &self.qdot * dt;
            }
        }
        self.step += 1;
        self.time = self.step as f64 * dt;
        if self.q.iter().chain(self.qdot.iter()).any(|v| !v.is_finite()) {
            return Err(AifError::SimulationBlowUp { step: self.step });
        }
        Ok(())
    }

    fn gaussian(&mut self, std: f64) -> f64 {
        let e: f64 = StandardNormal.sample(&mut self.rng);
        std * e
    }

    /// Samples a noisy sensory snapshot of the current state.
    ///
    /// Noise is drawn for every channel on every call, including broken or
    /// disabled ones, so the random stream does not depend on which
    /// channels report.
    pub fn observe(&mut self) -> Observation {
        let noise = self.cfg.noise;
        let n = self.q.len();
        let pos_noise = DVector::from_fn(n, |_, _| self.gaussian(noise.proprio_pos));
        let vel_noise = DVector::from_fn(n, |_, _| self.gaussian(noise.proprio_vel));
        let vis_noise = Vector2::new(self.gaussian(noise.visual), self.gaussian(noise.visual));

        let step = self.step;
        let pert = &self.cfg.perturbation;
        let proprio_vel = (self.cfg.velocity_sensing && !pert.channel_broken(Channel::ProprioVel, step))
            .then(|| &self.qdot + vel_noise);
        let visual = (self.cfg.visual_sensing && !pert.channel_broken(Channel::Visual, step)).then(|| {
            let mut p = self.end_effector() + vis_noise;
            if pert.shift_active(step) {
                p += Vector2::new(pert.visual_shift[0], pert.visual_shift[1]);
            }
            p
        });
        Observation {
            proprio_pos: &self.q + pos_noise,
            proprio_vel,
            visual,
            timestamp: self.time,
        }
    }

    /// Channels currently reporting.
    pub fn live_channels(&self) -> BTreeMap<Channel, bool> {
        let pert = &self.cfg.perturbation;
        let step = self.step;
        BTreeMap::from([
            (Channel::ProprioPos, true),
            (
                Channel::ProprioVel,
                self.cfg.velocity_sensing && !pert.channel_broken(Channel::ProprioVel, step),
            ),
            (
                Channel::Visual,
                self.cfg.visual_sensing && !pert.channel_broken(Channel::Visual, step),
            ),
        ])
    }
}
