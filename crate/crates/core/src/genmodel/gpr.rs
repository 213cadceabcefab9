//! Gaussian-process regression of the visual kinematic mapping with a
//! squared-exponential kernel. Predictions and their derivatives with
//! respect to the joint input are closed form.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};
use serde::{Deserialize, Serialize};

use super::{AnalyticFk, SensoryModel, TaskJacobian};
use crate::error::{check_dim, AifError, Result};

/// Version tag written at the head of serialized models.
pub const GPR_FORMAT_VERSION: u32 = 1;

const MIN_INPUT_SEPARATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GprParams {
    /// ℓ, rad
    pub length_scale: f64,
    /// σ_f²
    pub signal_variance: f64,
    /// σ_n²
    pub noise_variance: f64,
}

impl Default for GprParams {
    fn default() -> Self {
        Self {
            length_scale: 0.5,
            signal_variance: 1.0,
            noise_variance: 1e-4,
        }
    }
}

impl GprParams {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("length_scale", self.length_scale),
            ("signal_variance", self.signal_variance),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AifError::invalid(format!("GPR {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GprModel {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    params: GprParams,
    alpha: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn squared_distance<'a>(
    a: impl Iterator<Item = &'a f64>,
    b: impl Iterator<Item = &'a f64>,
) -> f64 {
    a.zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

impl GprModel {
    /// Fits the posterior weights `alpha = (K + σ_n² I)⁻¹ Y`.
    ///
    /// `x` is `m × n` (one joint configuration per row), `y` is `m × 2`.
    pub fn fit(x: DMatrix<f64>, y: DMatrix<f64>, params: GprParams) -> Result<Self> {
        params.validate()?;
        let m = x.nrows();
        if m == 0 || x.ncols() == 0 {
            return Err(AifError::invalid("GPR needs at least one training point"));
        }
        check_dim("GPR training targets (rows)", m, y.nrows())?;
        check_dim("GPR training targets (cols)", 2, y.ncols())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(AifError::NonFinite("GPR training data"));
        }
        for i in 0..m {
            for j in 0..i {
                let d2 = squared_distance(x.row(i).iter(), x.row(j).iter());
                if d2.sqrt() < MIN_INPUT_SEPARATION {
                    return Err(AifError::invalid(format!(
                        "duplicate GPR training inputs at rows {j} and {i}"
                    )));
                }
            }
        }

        let mut k = Self::kernel_matrix(&x, &params);
        for i in 0..m {
            k[(i, i)] += params.noise_variance;
        }
        let chol = k
            .cholesky()
            .ok_or(AifError::NotPositiveDefinite("GPR kernel matrix"))?;
        let alpha = chol.solve(&y);
        Ok(Self {
            x,
            y,
            params,
            alpha,
            chol,
        })
    }

    /// `K_ij = σ_f² exp(−‖x_i − x_j‖² / 2ℓ²)`, without the noise term.
    pub fn kernel_matrix(x: &DMatrix<f64>, params: &GprParams) -> DMatrix<f64> {
        let m = x.nrows();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            k[(i, i)] = params.signal_variance;
            for j in 0..i {
                let d2 = squared_distance(x.row(i).iter(), x.row(j).iter());
                let v = params.signal_variance * (-d2 / (2.0 * params.length_scale.powi(2))).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn kernel_vector(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("GPR query", self.x.ncols(), q.len())?;
        let two_l2 = 2.0 * self.params.length_scale.powi(2);
        Ok(DVector::from_iterator(
            self.x.nrows(),
            self.x.row_iter().map(|row| {
                self.params.signal_variance * (-squared_distance(row.iter(), q.iter()) / two_l2).exp()
            }),
        ))
    }

    pub fn params(&self) -> GprParams {
        self.params
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn train_targets(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + σ_n² I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior mean and variance at `q`.
    pub fn predict(&self, q: &DVector<f64>) -> Result<(Vector2<f64>, f64)> {
        let k = self.kernel_vector(q)?;
        let mean = self.alpha.tr_mul(&k);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&k)
            .ok_or(AifError::NotPositiveDefinite("GPR Cholesky factor"))?;
        let variance = (self.params.signal_variance - v.norm_squared()).max(0.0);
        Ok((Vector2::new(mean[0], mean[1]), variance))
    }

    pub fn predict_mean(&self, q: &DVector<f64>) -> Result<Vector2<f64>> {
        let k = self.kernel_vector(q)?;
        let mean = self.alpha.tr_mul(&k);
        Ok(Vector2::new(mean[0], mean[1]))
    }

    /// `∂mean/∂q = Σ_i alpha_i · (−k(q, x_i)(q − x_i)/ℓ²)`.
    pub fn jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobian> {
        let k = self.kernel_vector(q)?;
        let n = q.len();
        let inv_l2 = 1.0 / self.params.length_scale.powi(2);
        let mut jac = TaskJacobian::zeros(n);
        for (i, row) in self.x.row_iter().enumerate() {
            let w = -k[i] * inv_l2;
            for d in 0..n {
                let dk = w * (q[d] - row[d]);
                jac[(0, d)] += self.alpha[(i, 0)] * dk;
                jac[(1, d)] += self.alpha[(i, 1)] * dk;
            }
        }
        Ok(jac)
    }

    pub fn to_document(&self) -> GprDocument {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        GprDocument {
            version: GPR_FORMAT_VERSION,
            x: rows(&self.x),
            y: rows(&self.y),
            length_scale: self.params.length_scale,
            signal_variance: self.params.signal_variance,
            noise_variance: self.params.noise_variance,
            alpha: rows(&self.alpha),
        }
    }

    /// Rebuilds a model from a document, refactoring the kernel and
    /// checking that the stored weights agree with the refit.
    pub fn from_document(doc: &GprDocument) -> Result<Self> {
        if doc.version != GPR_FORMAT_VERSION {
            return Err(AifError::Parse {
                what: "GPR model".into(),
                message: format!(
                    "unsupported format version {} (expected {GPR_FORMAT_VERSION})",
                    doc.version
                ),
            });
        }
        let to_matrix = |rows: &[Vec<f64>], what: &'static str| -> Result<DMatrix<f64>> {
            let cols = rows.first().map_or(0, Vec::len);
            for r in rows {
                check_dim(what, cols, r.len())?;
            }
            Ok(DMatrix::from_row_iterator(
                rows.len(),
                cols,
                rows.iter().flat_map(|r| r.iter().copied()),
            ))
        };
        let model = Self::fit(
            to_matrix(&doc.x, "GPR inputs")?,
            to_matrix(&doc.y, "GPR targets")?,
            GprParams {
                length_scale: doc.length_scale,
                signal_variance: doc.signal_variance,
                noise_variance: doc.noise_variance,
            },
        )?;
        let stored = to_matrix(&doc.alpha, "GPR alpha")?;
        if stored.shape() != model.alpha.shape() {
            return Err(AifError::Parse {
                what: "GPR model".into(),
                message: "alpha shape does not match the training data".into(),
            });
        }
        let scale = model.alpha.amax().max(1.0);
        if (&stored - &model.alpha).amax() > 1e-6 * scale {
            return Err(AifError::Parse {
                what: "GPR model".into(),
                message: "stored alpha is inconsistent with the training data".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_document()).map_err(|e| AifError::Parse {
            what: "GPR model".into(),
            message: e.to_string(),
        })?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let doc: GprDocument = serde_json::from_str(&text).map_err(|e| AifError::Parse {
            what: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_document(&doc)
    }
}

impl SensoryModel for GprModel {
    fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    fn predict(&self, q: &DVector<f64>) -> Result<Vector2<f64>> {
        self.predict_mean(q)
    }

    fn jacobian(&self, q: &DVector<f64>) -> Result<TaskJacobian> {
        GprModel::jacobian(self, q)
    }
}

/// On-disk representation of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GprDocument {
    pub version: u32,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub alpha: Vec<Vec<f64>>,
}

/// Radical inverse of `index` in `base` (one Halton coordinate).
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

const HALTON_BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];

/// `samples` joint configurations spread over the box `[lower, upper]` by
/// a Halton sequence, paired with their forward-kinematics positions.
pub fn fk_training_set(
    fk: &AnalyticFk,
    samples: usize,
    lower: &[f64],
    upper: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = fk.link_lengths().len();
    check_dim("lower joint limits", n, lower.len())?;
    check_dim("upper joint limits", n, upper.len())?;
    if n > HALTON_BASES.len() {
        return Err(AifError::invalid(format!(
            "training-set sampler supports up to {} joints",
            HALTON_BASES.len()
        )));
    }
    let mut x = DMatrix::zeros(samples, n);
    let mut y = DMatrix::zeros(samples, 2);
    for s in 0..samples {
        // Skip index 0, which maps every coordinate to the lower corner.
        let idx = s as u64 + 1;
        for d in 0..n {
            x[(s, d)] = lower[d] + (upper[d] - lower[d]) * halton(idx, HALTON_BASES[d]);
        }
        let p = fk.predict(&x.row(s).transpose())?;
        y[(s, 0)] = p.x;
        y[(s, 1)] = p.y;
    }
    Ok((x, y))
}
