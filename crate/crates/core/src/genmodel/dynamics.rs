use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{DynamicsModel, SensoryModel};
use crate::error::{check_dim, AifError, Result};
use crate::types::{GeneralizedLatent, Goal};

/// `f(z) = A (target − z)` per generalized order, or `f = 0` without a
/// target.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    /// Diagonal of `A`, 1/s. A single entry is broadcast over all joints.
    gain: Vec<f64>,
    target: Option<GeneralizedLatent>,
}

impl LinearDynamics {
    pub fn new(gain: Vec<f64>, target: Option<GeneralizedLatent>) -> Result<Self> {
        if gain.is_empty() || gain.iter().any(|g| !g.is_finite()) {
            return Err(AifError::invalid("linear dynamics gain must be finite and non-empty"));
        }
        if let Some(t) = &target {
            if gain.len() != 1 {
                check_dim("linear dynamics gain", t.n_joints(), gain.len())?;
            }
        }
        Ok(Self { gain, target })
    }

    pub fn uniform(gain: f64, target: Option<GeneralizedLatent>) -> Result<Self> {
        Self::new(vec![gain], target)
    }

    /// No latent dynamics: `f(z) = 0`.
    pub fn zero() -> Self {
        Self {
            gain: vec![0.0],
            target: None,
        }
    }

    fn gain_at(&self, joint: usize) -> f64 {
        if self.gain.len() == 1 {
            self.gain[0]
        } else {
            self.gain[joint]
        }
    }

    fn check_target(&self, z: &GeneralizedLatent) -> Result<()> {
        if let Some(t) = &self.target {
            check_dim("linear dynamics target joints", t.n_joints(), z.n_joints())?;
            check_dim("linear dynamics target orders", t.max_order(), z.max_order())?;
        } else if self.gain.len() != 1 {
            check_dim("linear dynamics gain", self.gain.len(), z.n_joints())?;
        }
        Ok(())
    }
}

impl DynamicsModel for LinearDynamics {
    fn predict(&self, z: &GeneralizedLatent) -> Result<GeneralizedLatent> {
        self.check_target(z)?;
        let Some(target) = &self.target else {
            return Ok(GeneralizedLatent::zeros(z.n_joints(), z.max_order()));
        };
        let orders = (0..=z.max_order())
            .map(|k| {
                let diff = target.order(k) - z.order(k);
                DVector::from_iterator(
                    diff.len(),
                    diff.iter().enumerate().map(|(j, d)| self.gain_at(j) * d),
                )
            })
            .collect();
        GeneralizedLatent::new(orders)
    }

    fn jacobian(&self, z: &GeneralizedLatent) -> Result<DMatrix<f64>> {
        self.check_target(z)?;
        let n = z.n_joints();
        let dim = n * (z.max_order() + 1);
        let mut jac = DMatrix::zeros(dim, dim);
        if self.target.is_some() {
            for i in 0..dim {
                jac[(i, i)] = -self.gain_at(i % n);
            }
        }
        Ok(jac)
    }
}

/// Goal-directed dynamics: order 0 is pulled along
/// `J_g(z⁰)ᵀ (s_d − g(z⁰))` for a visual goal plus `(q_d − z⁰)` for a joint
/// goal; higher orders are zero.
#[derive(Debug, Clone)]
pub struct AttractorDynamics {
    sensory: Option<Arc<dyn SensoryModel>>,
    goal: Goal,
    gain: f64,
}

/// Step for the central-difference Jacobian.
const FD_STEP: f64 = 1e-6;

impl AttractorDynamics {
    pub fn new(sensory: Option<Arc<dyn SensoryModel>>, goal: Goal) -> Result<Self> {
        Self::with_gain(sensory, goal, 1.0)
    }

    pub fn with_gain(sensory: Option<Arc<dyn SensoryModel>>, goal: Goal, gain: f64) -> Result<Self> {
        if goal.desired_visual.is_some() && sensory.is_none() {
            return Err(AifError::invalid("a visual goal needs a sensory model"));
        }
        if let (Some(q), Some(model)) = (&goal.desired_joints, &sensory) {
            check_dim("joint goal", model.input_dim(), q.len())?;
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(AifError::invalid("attractor gain must be > 0"));
        }
        let n = goal
            .desired_joints
            .as_ref()
            .map(DVector::len)
            .or_else(|| sensory.as_ref().map(|s| s.input_dim()))
            .unwrap_or(0);
        goal.validate(n)?;
        Ok(Self { sensory, goal, gain })
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    /// The order-0 pull at joint configuration `q`.
    pub fn pull(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(q.len());
        if let Some(target) = &self.goal.desired_visual {
            let model = self
                .sensory
                .as_ref()
                .ok_or_else(|| AifError::invalid("a visual goal needs a sensory model"))?;
            let err = target - model.predict(q)?;
            out += model.jacobian(q)?.tr_mul(&err);
        }
        if let Some(qd) = &self.goal.desired_joints {
            check_dim("joint goal", q.len(), qd.len())?;
            out += qd - q;
        }
        Ok(out * self.gain)
    }
}

impl DynamicsModel for AttractorDynamics {
    fn predict(&self, z: &GeneralizedLatent) -> Result<GeneralizedLatent> {
        let mut f = GeneralizedLatent::zeros(z.n_joints(), z.max_order());
        *f.order_mut(0) = self.pull(z.order(0))?;
        Ok(f)
    }

    fn jacobian(&self, z: &GeneralizedLatent) -> Result<DMatrix<f64>> {
        let n = z.n_joints();
        let dim = n * (z.max_order() + 1);
        let mut jac = DMatrix::zeros(dim, dim);
        let q = z.order(0);
        for col in 0..n {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[col] += FD_STEP;
            qm[col] -= FD_STEP;
            let d = (self.pull(&qp)? - self.pull(&qm)?) / (2.0 * FD_STEP);
            jac.view_mut((0, col), (n, 1)).copy_from(&d);
        }
        Ok(jac)
    }
}
