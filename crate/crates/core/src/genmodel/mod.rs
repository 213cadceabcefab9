//! Generative models: `g` maps a latent joint configuration to a predicted
//! sensation, `f` predicts the latent dynamics. Every model exposes both
//! its value and its Jacobian.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, OMatrix, Vector2, U2};

use crate::error::Result;
use crate::types::GeneralizedLatent;

mod dynamics;
mod fk;
mod gpr;

pub use dynamics::{AttractorDynamics, LinearDynamics};
pub use fk::AnalyticFk;
pub use gpr::{fk_training_set, halton, GprModel, GprParams, GPR_FORMAT_VERSION};

/// 2 × n Jacobian of a task-space prediction.
pub type TaskJacobian = OMatrix<f64, U2, Dyn>;

/// A learned or analytic mapping from joint angles to the 2-D visual
/// end-effector position.
pub trait SensoryModel: Debug + Send + Sync {
    fn input_dim(&self) -> usize;
    fn predict(&self, q: &DVector<f64>) -> Result<Vector2<f64>>;
    fn jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobian>;
}

/// Latent dynamics `f(z)`, returned with the same shape as `z`.
pub trait DynamicsModel: Debug + Send + Sync {
    fn predict(&self, z: &GeneralizedLatent) -> Result<GeneralizedLatent>;

    /// `∂f/∂z` over the flattened state (order 0 first).
    fn jacobian(&self, z: &GeneralizedLatent) -> Result<DMatrix<f64>>;
}

/// The pair `(g, f)`. Proprioceptive channels are identity readouts of
/// orders 0 and 1; the visual channel uses `visual` when present.
#[derive(Debug, Clone)]
pub struct GenerativeModel {
    pub visual: Option<Arc<dyn SensoryModel>>,
    pub dynamics: Arc<dyn DynamicsModel>,
}

impl GenerativeModel {
    pub fn new(visual: Option<Arc<dyn SensoryModel>>, dynamics: Arc<dyn DynamicsModel>) -> Self {
        Self { visual, dynamics }
    }

    /// Proprioception only, with no latent dynamics (`f = 0`).
    pub fn static_proprio() -> Self {
        Self::new(None, Arc::new(LinearDynamics::zero()))
    }
}

pub fn dynamics_predict(model: &dyn DynamicsModel, z: &GeneralizedLatent) -> Result<GeneralizedLatent> {
    model.predict(z)
}

pub fn dynamics_jacobian(model: &dyn DynamicsModel, z: &GeneralizedLatent) -> Result<DMatrix<f64>> {
    model.jacobian(z)
}
