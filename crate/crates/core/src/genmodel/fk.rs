use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::{SensoryModel, TaskJacobian};
use crate::error::{check_dim, AifError, Result};

/// Planar serial chain: end-effector position as a function of relative
/// joint angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticFk {
    link_lengths: Vec<f64>,
    base: [f64; 2],
}

impl AnalyticFk {
    pub fn new(link_lengths: Vec<f64>, base: Vector2<f64>) -> Result<Self> {
        if link_lengths.is_empty() {
            return Err(AifError::invalid("arm needs at least one link"));
        }
        if link_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(AifError::invalid("link lengths must be positive and finite"));
        }
        Ok(Self {
            link_lengths,
            base: [base.x, base.y],
        })
    }

    pub fn with_links(link_lengths: &[f64]) -> Result<Self> {
        Self::new(link_lengths.to_vec(), Vector2::zeros())
    }

    pub fn link_lengths(&self) -> &[f64] {
        &self.link_lengths
    }

    /// Total reach of the fully extended arm.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    fn absolute_angles(&self, q: &DVector<f64>) -> Result<Vec<f64>> {
        check_dim("joint vector", self.link_lengths.len(), q.len())?;
        Ok(q.iter()
            .scan(0.0, |acc, qi| {
                *acc += qi;
                Some(*acc)
            })
            .collect())
    }

    pub fn predict(&self, q: &DVector<f64>) -> Result<Vector2<f64>> {
        let theta = self.absolute_angles(q)?;
        let mut p = Vector2::new(self.base[0], self.base[1]);
        for (l, t) in self.link_lengths.iter().zip(&theta) {
            p += Vector2::new(l * t.cos(), l * t.sin());
        }
        Ok(p)
    }

    /// Column `i` is the sum over links `j ≥ i` of the derivative of link
    /// `j`'s tip with respect to its absolute angle.
    pub fn jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobian> {
        let theta = self.absolute_angles(q)?;
        let n = theta.len();
        let mut jac = TaskJacobian::zeros(n);
        let (mut dx, mut dy) = (0.0, 0.0);
        for i in (0..n).rev() {
            let l = self.link_lengths[i];
            dx -= l * theta[i].sin();
            dy += l * theta[i].cos();
            jac[(0, i)] = dx;
            jac[(1, i)] = dy;
        }
        Ok(jac)
    }
}

impl SensoryModel for AnalyticFk {
    fn input_dim(&self) -> usize {
        self.link_lengths.len()
    }

    fn predict(&self, q: &DVector<f64>) -> Result<Vector2<f64>> {
        AnalyticFk::predict(self, q)
    }

    fn jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobian> {
        AnalyticFk::jacobian(self, q)
    }
}
