//! Laplace-approximated variational free energy and its gradients.
//!
//! ```text
//! F = ½ e_sᵀ Σ_x⁻¹ e_s + ½ e_zᵀ Σ_z⁻¹ e_z + ½ ln|Σ_x| + ½ ln|Σ_z|
//! e_s = s − g(z)        e_z = Dz − f(z)
//! ```
//!
//! Sensory channels are wired as: `proprio_pos` reads `z⁰`, `proprio_vel`
//! reads `z¹`, `visual` reads `g_v(z⁰)`. Channels missing from the
//! observation are dropped together with their covariance block.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{check_dim, AifError, Result};
use crate::genmodel::{GenerativeModel, TaskJacobian};
use crate::types::{Channel, CovarianceBlock, GeneralizedLatent, Observation, PrecisionSet};

/// Per-channel vectors; `None` for channels absent from the observation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChannelVectors {
    pub proprio_pos: Option<DVector<f64>>,
    pub proprio_vel: Option<DVector<f64>>,
    pub visual: Option<Vector2<f64>>,
}

impl ChannelVectors {
    pub fn norm(&self, channel: Channel) -> Option<f64> {
        match channel {
            Channel::ProprioPos => self.proprio_pos.as_ref().map(|v| v.norm()),
            Channel::ProprioVel => self.proprio_vel.as_ref().map(|v| v.norm()),
            Channel::Visual => self.visual.as_ref().map(|v| v.norm()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyReport {
    /// Total free energy, nats.
    pub value: f64,
    pub sensory_term: f64,
    pub dynamics_term: f64,
    pub logdet_term: f64,
    /// `∇_z F`
    pub grad_latent: GeneralizedLatent,
    /// `∇_s F = Σ_x⁻¹ (s − g(z))` per present channel.
    pub grad_obs: ChannelVectors,
    /// Sensory prediction errors `s − g(z)`.
    pub sensory_residuals: ChannelVectors,
    /// Dynamics prediction error `Dz − f(z)`.
    pub dynamics_residual: GeneralizedLatent,
    /// Visual Jacobian `∂g_v/∂z⁰`, when a visual model is present.
    pub visual_jacobian: Option<TaskJacobian>,
}

fn quad(block: &CovarianceBlock, e: &DVector<f64>) -> (DVector<f64>, f64) {
    let w = block.precision() * e;
    let q = e.dot(&w);
    (w, q)
}

/// Evaluates `F`, both gradients, and the residuals in one pass.
pub fn evaluate(
    z: &GeneralizedLatent,
    s: &Observation,
    model: &GenerativeModel,
    p: &PrecisionSet,
) -> Result<FreeEnergyReport> {
    let n = z.n_joints();
    let max_order = z.max_order();
    if !z.is_finite() {
        return Err(AifError::NonFinite("latent state"));
    }
    s.validate(n)?;
    check_dim("precision set joints", n, p.n_joints())?;
    check_dim("dynamics covariance orders", max_order + 1, p.dynamics.len())?;
    if s.proprio_vel.is_some() && max_order < 1 {
        return Err(AifError::invalid(
            "velocity observations need a latent state with max_order >= 1",
        ));
    }

    let mut grad = GeneralizedLatent::zeros(n, max_order);
    let mut sensory_term = 0.0;
    let mut logdet_term = 0.5 * p.proprio_pos.log_det();
    let mut grad_obs = ChannelVectors::default();
    let mut residuals = ChannelVectors::default();

    let e_pos = &s.proprio_pos - z.order(0);
    let (w_pos, q_pos) = quad(&p.proprio_pos, &e_pos);
    sensory_term += 0.5 * q_pos;
    *grad.order_mut(0) -= &w_pos;
    grad_obs.proprio_pos = Some(w_pos);
    residuals.proprio_pos = Some(e_pos);

    if let Some(vel) = &s.proprio_vel {
        let e_vel = vel - z.order(1);
        let (w_vel, q_vel) = quad(&p.proprio_vel, &e_vel);
        sensory_term += 0.5 * q_vel;
        logdet_term += 0.5 * p.proprio_vel.log_det();
        *grad.order_mut(1) -= &w_vel;
        grad_obs.proprio_vel = Some(w_vel);
        residuals.proprio_vel = Some(e_vel);
    }

    let visual_jacobian = match &model.visual {
        Some(g) => {
            check_dim("visual model input", n, g.input_dim())?;
            Some(g.jacobian(z.order(0))?)
        }
        None => None,
    };

    if let Some(vis) = &s.visual {
        let g = model.visual.as_ref().ok_or_else(|| {
            AifError::invalid("observation carries a visual channel but the model has no visual map")
        })?;
        let jac = visual_jacobian.as_ref().expect("jacobian computed with model");
        let e_vis: DVector<f64> = DVector::from_column_slice((vis - g.predict(z.order(0))?).as_slice());
        let (w_vis, q_vis) = quad(&p.visual, &e_vis);
        sensory_term += 0.5 * q_vis;
        logdet_term += 0.5 * p.visual.log_det();
        *grad.order_mut(0) -= jac.tr_mul(&w_vis);
        grad_obs.visual = Some(Vector2::new(w_vis[0], w_vis[1]));
        residuals.visual = Some(Vector2::new(e_vis[0], e_vis[1]));
    }

    let f = model.dynamics.predict(z)?;
    check_dim("dynamics output orders", max_order, f.max_order())?;
    check_dim("dynamics output joints", n, f.n_joints())?;
    let e_z = z.shift().lin_comb(1.0, &f, -1.0)?;
    let mut dynamics_term = 0.0;
    let mut wz = DVector::zeros(n * (max_order + 1));
    for (k, block) in p.dynamics.iter().enumerate() {
        let (w, q) = quad(block, e_z.order(k));
        dynamics_term += 0.5 * q;
        logdet_term += 0.5 * block.log_det();
        wz.rows_mut(k * n, n).copy_from(&w);
        // ∂(Dz)_k/∂z_{k+1} = I
        if k < max_order {
            *grad.order_mut(k + 1) += &w;
        }
    }
    let jf: DMatrix<f64> = model.dynamics.jacobian(z)?;
    check_dim("dynamics jacobian", n * (max_order + 1), jf.nrows())?;
    let from_f = jf.tr_mul(&wz);
    for k in 0..=max_order {
        *grad.order_mut(k) -= from_f.rows(k * n, n);
    }

    let value = sensory_term + dynamics_term + logdet_term;
    if !value.is_finite() || !grad.is_finite() {
        return Err(AifError::NonFinite("free energy"));
    }
    Ok(FreeEnergyReport {
        value,
        sensory_term,
        dynamics_term,
        logdet_term,
        grad_latent: grad,
        grad_obs,
        sensory_residuals: residuals,
        dynamics_residual: e_z,
        visual_jacobian,
    })
}

pub fn vfe(
    z: &GeneralizedLatent,
    s: &Observation,
    model: &GenerativeModel,
    p: &PrecisionSet,
) -> Result<FreeEnergyReport> {
    evaluate(z, s, model, p)
}

pub fn grad_vfe_latent(
    z: &GeneralizedLatent,
    s: &Observation,
    model: &GenerativeModel,
    p: &PrecisionSet,
) -> Result<GeneralizedLatent> {
    Ok(evaluate(z, s, model, p)?.grad_latent)
}

pub fn grad_vfe_obs(
    z: &GeneralizedLatent,
    s: &Observation,
    model: &GenerativeModel,
    p: &PrecisionSet,
) -> Result<ChannelVectors> {
    Ok(evaluate(z, s, model, p)?.grad_obs)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::genmodel::{AnalyticFk, LinearDynamics};

    fn proprio_only(n: usize, max_order: usize) -> (GenerativeModel, PrecisionSet) {
        (
            GenerativeModel::static_proprio(),
            PrecisionSet::isotropic(n, 1.0, 1.0, 1.0, &vec![1.0; max_order + 1]).unwrap(),
        )
    }

    #[test]
    fn zero_residuals_identity_covariance() {
        let (model, p) = proprio_only(2, 1);
        let z = GeneralizedLatent::from_slices(&[&[0.2, -0.4], &[0.0, 0.0]]).unwrap();
        let s = Observation::proprio(z.order(0).clone());
        let r = vfe(&z, &s, &model, &p).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad_latent, GeneralizedLatent::zeros(2, 1));
        assert_eq!(r.grad_obs.proprio_pos.unwrap().amax(), 0.0);
    }

    #[test]
    fn scalar_unit_residual() {
        let (model, p) = proprio_only(1, 0);
        let z = GeneralizedLatent::from_slices(&[&[0.0]]).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[1.0]));
        assert!((vfe(&z, &s, &model, &p).unwrap().value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn latent_gradient_by_hand() {
        let (model, p) = proprio_only(1, 1);
        let z = GeneralizedLatent::from_slices(&[&[0.3], &[0.0]]).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[0.5]));
        let g = grad_vfe_latent(&z, &s, &model, &p).unwrap();
        assert!((g.order(0)[0] + 0.2).abs() < 1e-15);
        assert_eq!(g.order(1)[0], 0.0);
    }

    #[test]
    fn observation_gradient_scales_with_precision() {
        let model = GenerativeModel::static_proprio();
        let p = PrecisionSet::isotropic(1, 2.0, 1.0, 1.0, &[1.0]).unwrap();
        let z = GeneralizedLatent::from_slices(&[&[0.0]]).unwrap();
        let s = Observation::proprio(DVector::from_row_slice(&[0.4]));
        let g = grad_vfe_obs(&z, &s, &model, &p).unwrap();
        assert!((g.proprio_pos.unwrap()[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn report_terms_sum_to_value() {
        let fk = Arc::new(AnalyticFk::with_links(&[1.0, 1.0]).unwrap());
        let target = GeneralizedLatent::from_slices(&[&[0.5, 0.5], &[0.0, 0.0]]).unwrap();
        let model = GenerativeModel::new(
            Some(fk),
            Arc::new(LinearDynamics::uniform(1.5, Some(target)).unwrap()),
        );
        let p = PrecisionSet::isotropic(2, 0.3, 0.7, 0.05, &[0.4, 2.0]).unwrap();
        let z = GeneralizedLatent::from_slices(&[&[0.1, 0.9], &[0.2, -0.1]]).unwrap();
        let s = Observation {
            proprio_pos: DVector::from_row_slice(&[0.2, 0.8]),
            proprio_vel: Some(DVector::from_row_slice(&[0.0, 0.1])),
            visual: Some(Vector2::new(1.2, 1.0)),
            timestamp: 0.0,
        };
        let r = vfe(&z, &s, &model, &p).unwrap();
        assert!((r.value - (r.sensory_term + r.dynamics_term + r.logdet_term)).abs() < 1e-10);
        assert!(r.value >= r.logdet_term);
    }

    #[test]
    fn visual_observation_without_model_is_an_error() {
        let (model, p) = proprio_only(2, 1);
        let s = Observation {
            visual: Some(Vector2::new(1.0, 1.0)),
            ..Observation::proprio(DVector::zeros(2))
        };
        assert!(vfe(&GeneralizedLatent::zeros(2, 1), &s, &model, &p).is_err());
    }

    #[test]
    fn dimension_and_order_mismatches() {
        let (model, p) = proprio_only(2, 1);
        let s = Observation::proprio(DVector::zeros(3));
        assert!(matches!(
            vfe(&GeneralizedLatent::zeros(2, 1), &s, &model, &p),
            Err(AifError::DimensionMismatch { .. })
        ));
        let (model0, p0) = proprio_only(2, 0);
        let s = Observation {
            proprio_vel: Some(DVector::zeros(2)),
            ..Observation::proprio(DVector::zeros(2))
        };
        assert!(vfe(&GeneralizedLatent::zeros(2, 0), &s, &model0, &p0).is_err());
        let s = Observation::proprio(DVector::from_row_slice(&[f64::NAN, 0.0]));
        assert!(vfe(&GeneralizedLatent::zeros(2, 1), &s, &model, &p).is_err());
    }
}
