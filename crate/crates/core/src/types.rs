//! Shared domain types: beliefs in generalized coordinates, sensory
//! snapshots, covariance/precision blocks and agent configuration.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AifError, Result};

/// Highest generalized order an agent may carry.
pub const MAX_SUPPORTED_ORDER: usize = 3;

/// A latent joint state in generalized coordinates.
///
/// Order 0 holds joint angles (rad), order 1 velocities (rad/s), order `k`
/// the `k`-th time derivative. Every order has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedLatent {
    orders: Vec<DVector<f64>>,
}

impl GeneralizedLatent {
    pub fn new(orders: Vec<DVector<f64>>) -> Result<Self> {
        let first = orders
            .first()
            .ok_or_else(|| AifError::invalid("generalized state needs at least one order"))?;
        let n = first.len();
        if n == 0 {
            return Err(AifError::invalid("generalized state needs at least one joint"));
        }
        for order in &orders {
            check_dim("generalized order length", n, order.len())?;
            if order.iter().any(|v| !v.is_finite()) {
                return Err(AifError::NonFinite("generalized state"));
            }
        }
        Ok(Self { orders })
    }

    pub fn zeros(n_joints: usize, max_order: usize) -> Self {
        Self {
            orders: vec![DVector::zeros(n_joints); max_order + 1],
        }
    }

    /// A state at position `q` with all higher orders at rest.
    pub fn at_rest(q: &DVector<f64>, max_order: usize) -> Self {
        let mut z = Self::zeros(q.len(), max_order);
        z.orders[0].copy_from(q);
        z
    }

    pub fn from_slices(orders: &[&[f64]]) -> Result<Self> {
        Self::new(orders.iter().map(|o| DVector::from_row_slice(o)).collect())
    }

    pub fn n_joints(&self) -> usize {
        self.orders[0].len()
    }

    pub fn max_order(&self) -> usize {
        self.orders.len() - 1
    }

    pub fn order(&self, k: usize) -> &DVector<f64> {
        &self.orders[k]
    }

    pub fn order_mut(&mut self, k: usize) -> &mut DVector<f64> {
        &mut self.orders[k]
    }

    pub fn orders(&self) -> &[DVector<f64>] {
        &self.orders
    }

    /// The derivative operator `D`: order `k` of the result is order `k+1`
    /// of `self`; the top order becomes zero since `z^[n+1]` is not stored.
    pub fn shift(&self) -> Self {
        let n = self.n_joints();
        let mut orders: Vec<_> = self.orders.iter().skip(1).cloned().collect();
        orders.push(DVector::zeros(n));
        Self { orders }
    }

    /// All orders stacked into one vector, order 0 first.
    pub fn to_flat(&self) -> DVector<f64> {
        let n = self.n_joints();
        DVector::from_iterator(
            n * self.orders.len(),
            self.orders.iter().flat_map(|o| o.iter().copied()),
        )
    }

    pub fn from_flat(n_joints: usize, max_order: usize, flat: &DVector<f64>) -> Result<Self> {
        check_dim("flat generalized state", n_joints * (max_order + 1), flat.len())?;
        Self::new(
            (0..=max_order)
                .map(|k| flat.rows(k * n_joints, n_joints).into_owned())
                .collect(),
        )
    }

    /// `a * self + b * other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        check_dim("generalized order count", self.orders.len(), other.orders.len())?;
        check_dim("generalized order length", self.n_joints(), other.n_joints())?;
        let orders = self
            .orders
            .iter()
            .zip(&other.orders)
            .map(|(x, y)| x * a + y * b)
            .collect();
        Ok(Self { orders })
    }

    pub fn is_finite(&self) -> bool {
        self.orders.iter().all(|o| o.iter().all(|v| v.is_finite()))
    }
}

/// Free-function form of [`GeneralizedLatent::shift`].
pub fn shift_orders(z: &GeneralizedLatent) -> GeneralizedLatent {
    z.shift()
}

/// Sensory channels an agent can receive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    ProprioPos,
    ProprioVel,
    Visual,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::ProprioPos => "proprio_pos",
            Channel::ProprioVel => "proprio_vel",
            Channel::Visual => "visual",
        }
    }
}

/// One sensory snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub proprio_pos: DVector<f64>,
    pub proprio_vel: Option<DVector<f64>>,
    /// End-effector position in the task plane, meters. `None` when the
    /// camera channel is unavailable.
    pub visual: Option<Vector2<f64>>,
    pub timestamp: f64,
}

impl Observation {
    pub fn proprio(q: DVector<f64>) -> Self {
        Self {
            proprio_pos: q,
            proprio_vel: None,
            visual: None,
            timestamp: 0.0,
        }
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        check_dim("proprio_pos", n_joints, self.proprio_pos.len())?;
        if self.proprio_pos.iter().any(|v| !v.is_finite()) {
            return Err(AifError::NonFinite("proprio_pos"));
        }
        if let Some(vel) = &self.proprio_vel {
            check_dim("proprio_vel", n_joints, vel.len())?;
            if vel.iter().any(|v| !v.is_finite()) {
                return Err(AifError::NonFinite("proprio_vel"));
            }
        }
        if let Some(vis) = &self.visual {
            if vis.iter().any(|v| !v.is_finite()) {
                return Err(AifError::NonFinite("visual"));
            }
        }
        if !self.timestamp.is_finite() {
            return Err(AifError::NonFinite("timestamp"));
        }
        Ok(())
    }

    pub fn has(&self, channel: Channel) -> bool {
        match channel {
            Channel::ProprioPos => true,
            Channel::ProprioVel => self.proprio_vel.is_some(),
            Channel::Visual => self.visual.is_some(),
        }
    }
}

/// A covariance block with its cached precision and log-determinant.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlock {
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl CovarianceBlock {
    pub fn new(covariance: DMatrix<f64>) -> Result<Self> {
        if !covariance.is_square() || covariance.nrows() == 0 {
            return Err(AifError::invalid("covariance block must be square and non-empty"));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(AifError::NonFinite("covariance block"));
        }
        if covariance != covariance.transpose() {
            return Err(AifError::NotPositiveDefinite("covariance block is not symmetric"));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or(AifError::NotPositiveDefinite("covariance block"))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mut precision = chol.inverse();
        // Symmetrize away round-off from the triangular solves.
        precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self {
            covariance,
            precision,
            log_det,
        })
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(AifError::invalid(format!(
                "variance must be positive and finite, got {variance}"
            )));
        }
        Self::new(DMatrix::from_diagonal_element(dim, dim, variance))
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `ln |Σ|`
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.covariance * c)
    }
}

/// Sensory covariances `Σ_x` (one block per channel) and dynamics
/// covariances `Σ_z` (one block per generalized order).
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionSet {
    pub proprio_pos: CovarianceBlock,
    pub proprio_vel: CovarianceBlock,
    pub visual: CovarianceBlock,
    pub dynamics: Vec<CovarianceBlock>,
}

impl PrecisionSet {
    pub fn new(
        proprio_pos: CovarianceBlock,
        proprio_vel: CovarianceBlock,
        visual: CovarianceBlock,
        dynamics: Vec<CovarianceBlock>,
    ) -> Result<Self> {
        let n = proprio_pos.dim();
        check_dim("proprio_vel covariance", n, proprio_vel.dim())?;
        check_dim("visual covariance", 2, visual.dim())?;
        if dynamics.is_empty() {
            return Err(AifError::invalid("need one dynamics covariance per order"));
        }
        for block in &dynamics {
            check_dim("dynamics covariance", n, block.dim())?;
        }
        Ok(Self {
            proprio_pos,
            proprio_vel,
            visual,
            dynamics,
        })
    }

    /// Diagonal covariances from per-channel and per-order variances.
    pub fn isotropic(
        n_joints: usize,
        var_proprio_pos: f64,
        var_proprio_vel: f64,
        var_visual: f64,
        var_dynamics: &[f64],
    ) -> Result<Self> {
        Self::new(
            CovarianceBlock::isotropic(n_joints, var_proprio_pos)?,
            CovarianceBlock::isotropic(n_joints, var_proprio_vel)?,
            CovarianceBlock::isotropic(2, var_visual)?,
            var_dynamics
                .iter()
                .map(|&v| CovarianceBlock::isotropic(n_joints, v))
                .collect::<Result<_>>()?,
        )
    }

    pub fn n_joints(&self) -> usize {
        self.proprio_pos.dim()
    }

    pub fn max_order(&self) -> usize {
        self.dynamics.len() - 1
    }

    pub fn sensory(&self, channel: Channel) -> &CovarianceBlock {
        match channel {
            Channel::ProprioPos => &self.proprio_pos,
            Channel::ProprioVel => &self.proprio_vel,
            Channel::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    #[default]
    Velocity,
    Torque,
}

fn default_velocity_limit() -> f64 {
    2.0
}

fn default_torque_limit() -> f64 {
    10.0
}

fn default_torque_gain() -> f64 {
    1.0
}

/// Gains, step size and action wiring for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Perception gain, 1/s.
    pub k_z: f64,
    /// Action gain. Zero disables action (perception-only runs).
    pub k_a: f64,
    /// Integration step, seconds.
    pub dt: f64,
    pub n_joints: usize,
    pub max_order: usize,
    #[serde(default)]
    pub action_mode: ActionMode,
    /// Whether the visual channel contributes to the action update.
    #[serde(default)]
    pub visual_action_channel: bool,
    /// Effective inverse inertia applied to `ds/da` in torque mode.
    #[serde(default = "default_torque_gain")]
    pub torque_gain: f64,
    #[serde(default = "default_velocity_limit")]
    pub velocity_limit: f64,
    #[serde(default = "default_torque_limit")]
    pub torque_limit: f64,
}

impl AgentConfig {
    pub fn new(k_z: f64, k_a: f64, dt: f64, n_joints: usize, max_order: usize) -> Result<Self> {
        let cfg = Self {
            k_z,
            k_a,
            dt,
            n_joints,
            max_order,
            action_mode: ActionMode::Velocity,
            visual_action_channel: false,
            torque_gain: default_torque_gain(),
            velocity_limit: default_velocity_limit(),
            torque_limit: default_torque_limit(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_z > 0.0 && self.k_z.is_finite()) {
            return Err(AifError::invalid(format!("k_z must be > 0, got {}", self.k_z)));
        }
        if !(self.k_a >= 0.0 && self.k_a.is_finite()) {
            return Err(AifError::invalid(format!("k_a must be >= 0, got {}", self.k_a)));
        }
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(AifError::invalid(format!("dt must be in (0, 0.1], got {}", self.dt)));
        }
        if self.n_joints == 0 {
            return Err(AifError::invalid("n_joints must be >= 1"));
        }
        if self.max_order > MAX_SUPPORTED_ORDER {
            return Err(AifError::invalid(format!(
                "max_order must be <= {MAX_SUPPORTED_ORDER}, got {}",
                self.max_order
            )));
        }
        if !(self.torque_gain > 0.0 && self.torque_gain.is_finite()) {
            return Err(AifError::invalid("torque_gain must be > 0"));
        }
        if !(self.velocity_limit > 0.0 && self.torque_limit > 0.0) {
            return Err(AifError::invalid("actuator limits must be > 0"));
        }
        Ok(())
    }

    pub fn action_limit(&self) -> f64 {
        match self.action_mode {
            ActionMode::Velocity => self.velocity_limit,
            ActionMode::Torque => self.torque_limit,
        }
    }
}

/// Desired sensory outcome: a task-space end-effector position, joint
/// angles, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct Goal {
    pub desired_visual: Option<Vector2<f64>>,
    pub desired_joints: Option<DVector<f64>>,
}

impl Goal {
    pub fn visual(p: Vector2<f64>) -> Self {
        Self {
            desired_visual: Some(p),
            desired_joints: None,
        }
    }

    pub fn joints(q: DVector<f64>) -> Self {
        Self {
            desired_visual: None,
            desired_joints: Some(q),
        }
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        if self.desired_visual.is_none() && self.desired_joints.is_none() {
            return Err(AifError::invalid("goal needs a visual or joint target"));
        }
        if let Some(v) = &self.desired_visual {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(AifError::NonFinite("visual goal"));
            }
        }
        if let Some(q) = &self.desired_joints {
            check_dim("joint goal", n_joints, q.len())?;
            if q.iter().any(|x| !x.is_finite()) {
                return Err(AifError::NonFinite("joint goal"));
            }
        }
        Ok(())
    }
}
