//! Coupled perception and action by free-energy descent.
//!
//! Perception: `ż = Dz − k_z ∇_z F`.
//! Action: `ȧ = −k_a Σ_c (∂s_c/∂a)ᵀ ∇_{s_c} F`, summed over sensory channels.
//! Both are integrated with explicit Euler at the configured `dt`, from the
//! same pre-tick belief and observation.

use log::trace;
use nalgebra::DVector;

use crate::error::{check_dim, AifError, Result};
use crate::free_energy::{evaluate, FreeEnergyReport};
use crate::genmodel::{GenerativeModel, SensoryModel, TaskJacobian};
use crate::types::{ActionMode, AgentConfig, GeneralizedLatent, Observation, PrecisionSet};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub z: GeneralizedLatent,
    /// rad/s in velocity mode, N·m in torque mode.
    pub a: DVector<f64>,
    pub last_report: Option<FreeEnergyReport>,
    pub step_count: u64,
}

impl AgentState {
    pub fn new(z: GeneralizedLatent) -> Self {
        let n = z.n_joints();
        Self {
            z,
            a: DVector::zeros(n),
            last_report: None,
            step_count: 0,
        }
    }
}

/// `∂s/∂a` per sensory channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SensoryActionJacobian {
    /// Diagonal scale of the `proprio_pos` block (`dt`, times the torque gain).
    pub proprio_pos: f64,
    /// Diagonal scale of the `proprio_vel` block.
    pub proprio_vel: f64,
    /// `dt · J_g(z⁰)`, or zero when the visual channel does not drive action.
    pub visual: TaskJacobian,
}

impl SensoryActionJacobian {
    pub fn proprio_pos_matrix(&self, n: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_diagonal_element(n, n, self.proprio_pos)
    }

    pub fn proprio_vel_matrix(&self, n: usize) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_diagonal_element(n, n, self.proprio_vel)
    }
}

/// Builds `∂s/∂a` for a velocity command: the position reading moves by
/// `a·dt`, the velocity reading by `a`, the visual reading by `J_g·a·dt`.
/// Torque mode uses the same shape scaled by `cfg.torque_gain`.
pub fn sensory_action_jacobian(
    cfg: &AgentConfig,
    visual_model: Option<&dyn SensoryModel>,
    z: &GeneralizedLatent,
) -> Result<SensoryActionJacobian> {
    let n = z.n_joints();
    let jac = match visual_model {
        Some(g) if cfg.visual_action_channel => g.jacobian(z.order(0))?,
        _ => TaskJacobian::zeros(n),
    };
    sensory_action_jacobian_with(cfg, n, jac)
}

fn sensory_action_jacobian_with(
    cfg: &AgentConfig,
    n: usize,
    visual_jacobian: TaskJacobian,
) -> Result<SensoryActionJacobian> {
    check_dim("visual jacobian columns", n, visual_jacobian.ncols())?;
    let scale = match cfg.action_mode {
        ActionMode::Velocity => 1.0,
        ActionMode::Torque => cfg.torque_gain,
    };
    let visual = if cfg.visual_action_channel {
        visual_jacobian * (cfg.dt * scale)
    } else {
        TaskJacobian::zeros(n)
    };
    Ok(SensoryActionJacobian {
        proprio_pos: cfg.dt * scale,
        proprio_vel: scale,
        visual,
    })
}

/// Agent configuration bound to its generative model and precisions.
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    model: GenerativeModel,
    precisions: PrecisionSet,
}

impl Agent {
    pub fn new(cfg: AgentConfig, model: GenerativeModel, precisions: PrecisionSet) -> Result<Self> {
        cfg.validate()?;
        check_dim("precision joints", cfg.n_joints, precisions.n_joints())?;
        check_dim("precision orders", cfg.max_order, precisions.max_order())?;
        if let Some(g) = &model.visual {
            check_dim("visual model input", cfg.n_joints, g.input_dim())?;
        }
        Ok(Self {
            cfg,
            model,
            precisions,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GenerativeModel {
        &self.model
    }

    pub fn precisions(&self) -> &PrecisionSet {
        &self.precisions
    }

    /// A fresh state believing the arm rests at `q`.
    pub fn initial_state(&self, q: &DVector<f64>) -> Result<AgentState> {
        check_dim("initial belief", self.cfg.n_joints, q.len())?;
        Ok(AgentState::new(GeneralizedLatent::at_rest(q, self.cfg.max_order)))
    }

    fn check_state(&self, state: &AgentState) -> Result<()> {
        check_dim("belief joints", self.cfg.n_joints, state.z.n_joints())?;
        check_dim("belief orders", self.cfg.max_order, state.z.max_order())?;
        check_dim("action", self.cfg.n_joints, state.a.len())?;
        Ok(())
    }

    pub fn free_energy(&self, z: &GeneralizedLatent, s: &Observation) -> Result<FreeEnergyReport> {
        evaluate(z, s, &self.model, &self.precisions)
    }

    /// As [`Agent::free_energy`], but a belief that has run off to infinity
    /// is reported as divergence of the integration rather than bad input.
    fn report(&self, state: &AgentState, s: &Observation) -> Result<FreeEnergyReport> {
        self.free_energy(&state.z, s).map_err(|e| match e {
            AifError::NonFinite(what @ ("free energy" | "latent state")) => AifError::Divergence {
                step: state.step_count,
                what,
            },
            e => e,
        })
    }

    /// The two parts of `ż`: the `Dz` drift and the gradient correction
    /// `−k_z ∇_z F`.
    pub fn latent_velocity_parts(
        &self,
        z: &GeneralizedLatent,
        report: &FreeEnergyReport,
    ) -> (GeneralizedLatent, GeneralizedLatent) {
        let drift = z.shift();
        let correction = GeneralizedLatent::zeros(z.n_joints(), z.max_order())
            .lin_comb(0.0, &report.grad_latent, -self.cfg.k_z)
            .expect("gradient has the state's shape");
        (drift, correction)
    }

    fn integrate_latent(
        &self,
        state: &AgentState,
        report: &FreeEnergyReport,
    ) -> Result<GeneralizedLatent> {
        let (drift, correction) = self.latent_velocity_parts(&state.z, report);
        let dt = self.cfg.dt;
        let orders = (0..=state.z.max_order())
            .map(|k| state.z.order(k) + (drift.order(k) + correction.order(k)) * dt)
            .collect::<Vec<_>>();
        if orders.iter().any(|o| o.iter().any(|v| !v.is_finite())) {
            return Err(AifError::Divergence {
                step: state.step_count,
                what: "perception update",
            });
        }
        GeneralizedLatent::new(orders)
    }

    fn integrate_action(&self, state: &AgentState, report: &FreeEnergyReport) -> Result<DVector<f64>> {
        let n = self.cfg.n_joints;
        if self.cfg.k_a == 0.0 {
            return Ok(state.a.clone());
        }
        let visual_jac = match (&report.visual_jacobian, self.cfg.visual_action_channel) {
            (Some(j), true) => j.clone(),
            _ => TaskJacobian::zeros(n),
        };
        let dsda = sensory_action_jacobian_with(&self.cfg, n, visual_jac)?;
        let mut push = DVector::zeros(n);
        if let Some(w) = &report.grad_obs.proprio_pos {
            push += w * dsda.proprio_pos;
        }
        if let Some(w) = &report.grad_obs.proprio_vel {
            push += w * dsda.proprio_vel;
        }
        if let Some(w) = &report.grad_obs.visual {
            push += dsda.visual.tr_mul(w);
        }
        let raw = &state.a - push * (self.cfg.k_a * self.cfg.dt);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(AifError::Divergence {
                step: state.step_count,
                what: "action update",
            });
        }
        let limit = self.cfg.action_limit();
        let clamped = raw.map(|v| v.clamp(-limit, limit));
        if clamped != raw {
            trace!("step {}: action saturated at ±{limit}", state.step_count);
        }
        Ok(clamped)
    }

    pub fn perception_step(&self, state: &AgentState, s: &Observation) -> Result<GeneralizedLatent> {
        self.check_state(state)?;
        let report = self.report(state, s)?;
        self.integrate_latent(state, &report)
    }

    pub fn action_step(&self, state: &AgentState, s: &Observation) -> Result<DVector<f64>> {
        self.check_state(state)?;
        let report = self.report(state, s)?;
        self.integrate_action(state, &report)
    }

    /// One simultaneous perception and action update from the same
    /// `(z, s)` pair.
    pub fn tick(&self, state: &AgentState, s: &Observation) -> Result<AgentState> {
        self.check_state(state)?;
        let report = self.report(state, s)?;
        let z = self.integrate_latent(state, &report)?;
        let a = self.integrate_action(state, &report)?;
        Ok(AgentState {
            z,
            a,
            last_report: Some(report),
            step_count: state.step_count + 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::genmodel::{AnalyticFk, AttractorDynamics, LinearDynamics};
    use crate::types::{Goal, PrecisionSet};

    fn scalar_agent(k_z: f64, k_a: f64, max_order: usize) -> Agent {
        let cfg = AgentConfig::new(k_z, k_a, 0.01, 1, max_order).unwrap();
        Agent::new(
            cfg,
            GenerativeModel::static_proprio(),
            PrecisionSet::isotropic(1, 1.0, 1.0, 1.0, &vec![1.0; max_order + 1]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn fixed_point_is_exact() {
        let agent = scalar_agent(5.0, 3.0, 1);
        let state = agent.initial_state(&DVector::from_row_slice(&[0.4])).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[0.4]));
        let next = agent.tick(&state, &s).unwrap();
        assert_eq!(next.z, state.z);
        assert_eq!(next.a, state.a);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn geometric_convergence_without_dynamics() {
        let (k_z, dt) = (4.0, 0.01);
        let agent = scalar_agent(k_z, 0.0, 0);
        let mut state = agent.initial_state(&DVector::from_row_slice(&[0.0])).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[1.0]));
        for k in 1..=200 {
            state = agent.tick(&state, &s).unwrap();
            let expected = (1.0 - k_z * dt).powi(k);
            let err = 1.0 - state.z.order(0)[0];
            assert!((err - expected).abs() < 1e-12, "step {k}: {err} vs {expected}");
        }
    }

    #[test]
    fn action_sign_drives_observation_toward_prediction() {
        let agent = scalar_agent(1.0, 10.0, 0);
        let state = agent.initial_state(&DVector::from_row_slice(&[0.0])).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[0.3]));
        let a = agent.action_step(&state, &s).unwrap();
        assert!(a[0] < 0.0);
        let s = Observation::proprio(DVector::from_row_slice(&[-0.3]));
        assert!(agent.action_step(&state, &s).unwrap()[0] > 0.0);
    }

    #[test]
    fn action_unchanged_without_sensory_error() {
        let agent = scalar_agent(1.0, 10.0, 1);
        let mut state = agent.initial_state(&DVector::from_row_slice(&[0.2])).unwrap();
        state.a[0] = 0.7;
        state.z.order_mut(1)[0] = 0.7;
        let s = Observation {
            proprio_vel: Some(DVector::from_row_slice(&[0.7])),
            ..Observation::proprio(DVector::from_row_slice(&[0.2]))
        };
        assert_eq!(agent.action_step(&state, &s).unwrap()[0], 0.7);
    }

    #[test]
    fn action_is_clamped() {
        let mut cfg = AgentConfig::new(1.0, 1e6, 0.01, 1, 0).unwrap();
        cfg.velocity_limit = 0.5;
        let agent = Agent::new(
            cfg,
            GenerativeModel::static_proprio(),
            PrecisionSet::isotropic(1, 1.0, 1.0, 1.0, &[1.0]).unwrap(),
        )
        .unwrap();
        let state = agent.initial_state(&DVector::from_row_slice(&[0.0])).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[1.0]));
        assert_eq!(agent.action_step(&state, &s).unwrap()[0], -0.5);
    }

    #[test]
    fn sensory_action_blocks() {
        let mut cfg = AgentConfig::new(1.0, 1.0, 0.01, 2, 1).unwrap();
        let fk = AnalyticFk::with_links(&[1.0, 1.0]).unwrap();
        let z = GeneralizedLatent::zeros(2, 1);
        let j = sensory_action_jacobian(&cfg, Some(&fk), &z).unwrap();
        assert_eq!(j.proprio_pos_matrix(2), nalgebra::DMatrix::from_diagonal_element(2, 2, 0.01));
        assert_eq!(j.proprio_vel_matrix(2), nalgebra::DMatrix::identity(2, 2));
        assert_eq!(j.visual.amax(), 0.0);

        cfg.visual_action_channel = true;
        let j = sensory_action_jacobian(&cfg, Some(&fk), &z).unwrap();
        let expected = TaskJacobian::from_column_slice(&[0.0, 2.0, 0.0, 1.0]) * 0.01;
        assert!((j.visual - expected).amax() < 1e-16);

        cfg.dt = 1e-9;
        let j = sensory_action_jacobian(&cfg, Some(&fk), &z).unwrap();
        assert!(j.proprio_pos < 1e-8 && j.visual.amax() < 1e-8);
    }

    #[test]
    fn torque_mode_scales_blocks() {
        let mut cfg = AgentConfig::new(1.0, 1.0, 0.01, 1, 1).unwrap();
        cfg.action_mode = ActionMode::Torque;
        cfg.torque_gain = 3.0;
        let j = sensory_action_jacobian(&cfg, None, &GeneralizedLatent::zeros(1, 1)).unwrap();
        assert!((j.proprio_pos - 0.03).abs() < 1e-15);
        assert_eq!(j.proprio_vel, 3.0);
    }

    #[test]
    fn divergence_is_reported() {
        let agent = scalar_agent(1.0, 0.0, 0);
        let state = agent.initial_state(&DVector::from_row_slice(&[0.0])).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[1e308]));
        let err = agent.tick(&state, &s).unwrap_err();
        assert!(err.is_divergence() || matches!(err, AifError::NonFinite(_)));
    }

    #[test]
    fn reaching_goal_at_current_pose_keeps_action_zero() {
        let fk: Arc<dyn SensoryModel> = Arc::new(AnalyticFk::with_links(&[1.0, 1.0]).unwrap());
        let q = DVector::from_row_slice(&[0.3, 1.1]);
        let goal = Goal::visual(fk.predict(&q).unwrap());
        let dynamics = Arc::new(AttractorDynamics::new(Some(fk.clone()), goal).unwrap());
        let mut cfg = AgentConfig::new(2.0, 5.0, 0.01, 2, 1).unwrap();
        cfg.visual_action_channel = true;
        let agent = Agent::new(
            cfg,
            GenerativeModel::new(Some(fk.clone()), dynamics),
            PrecisionSet::isotropic(2, 1.0, 1.0, 0.1, &[1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let mut state = agent.initial_state(&q).unwrap();
        let s = Observation {
            proprio_pos: q.clone(),
            proprio_vel: Some(DVector::zeros(2)),
            visual: Some(fk.predict(&q).unwrap()),
            timestamp: 0.0,
        };
        for _ in 0..50 {
            state = agent.tick(&state, &s).unwrap();
            assert_eq!(state.a.amax(), 0.0);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let agent = scalar_agent(1.0, 1.0, 1);
        let state = AgentState::new(GeneralizedLatent::zeros(1, 0));
        let s = Observation::proprio(DVector::zeros(1));
        assert!(agent.tick(&state, &s).is_err());
        let wrong_dyn = LinearDynamics::uniform(1.0, Some(GeneralizedLatent::zeros(2, 1))).unwrap();
        let agent = Agent::new(
            AgentConfig::new(1.0, 1.0, 0.01, 1, 1).unwrap(),
            GenerativeModel::new(None, Arc::new(wrong_dyn)),
            PrecisionSet::isotropic(1, 1.0, 1.0, 1.0, &[1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let state = agent.initial_state(&DVector::zeros(1)).unwrap();
        assert!(agent.tick(&state, &s).is_err());
    }
}
