//! Multi-output affine least squares: the base learner mapping rectangular
//! voltage features to power quantities.
//!
//! Fitting centers the design matrix and labels, factors the centered design
//! once with an SVD, and back-solves per output. With `ridge_lambda = 0` and
//! a rank-deficient design (the slack imaginary column is identically zero,
//! so this is the common case) the solver returns the minimum-norm
//! coefficients; the intercept is recovered from the means and is never
//! penalized. The factorization is exposed so callers fitting many label
//! sets against one design (boosting stages, per-family models) pay for the
//! SVD once.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::NetworkCase;
use crate::datagen::Dataset;

#[derive(Debug, Error)]
pub enum LinModelError {
    #[error("design matrix contains non-finite entries")]
    NonFiniteFeatures,
    #[error("label matrix contains non-finite entries")]
    NonFiniteLabels,
    #[error("need at least 2 rows to fit, got {0}")]
    TooFewRows(usize),
    #[error("ridge_lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
}

/// Which slice of the full interleaved voltage vector a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// All 2n interleaved (e, f) columns.
    AllBuses,
    /// The four endpoint columns (e_from, f_from, e_to, f_to) of one branch.
    BranchEndpoints { from: usize, to: usize },
}

impl FeatureMap {
    /// Column indices into the full 2n feature vector.
    pub fn columns(&self, n_buses: usize) -> Vec<usize> {
        match *self {
            FeatureMap::AllBuses => (0..2 * n_buses).collect(),
            FeatureMap::BranchEndpoints { from, to } => {
                vec![2 * from, 2 * from + 1, 2 * to, 2 * to + 1]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// k × d: one row of coefficients per output.
    pub coeffs: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub feature_map: FeatureMap,
    pub ridge_lambda: f64,
}

impl LinearModel {
    pub fn n_outputs(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.coeffs.ncols()
    }

    /// A x + b for a vector in the model's native feature space.
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n_features(), "feature dimension mismatch");
        &self.coeffs * x + &self.intercept
    }

    /// Row-wise prediction: returns M × k.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.ncols(), self.n_features(), "feature dimension mismatch");
        let mut out = x * self.coeffs.transpose();
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }

    /// Predict from a full interleaved 2n vector, selecting the model's
    /// columns first.
    pub fn predict_from_full(&self, full: &[f64]) -> DVector<f64> {
        assert!(full.len() % 2 == 0);
        let cols = self.feature_map.columns(full.len() / 2);
        let x = DVector::from_iterator(cols.len(), cols.iter().map(|&c| full[c]));
        self.predict(&x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<LinearModel, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Centered SVD of a design matrix, reusable across label sets and ridge
/// strengths.
pub struct DesignFactorization {
    x_mean: RowDVector<f64>,
    u: DMatrix<f64>,
    singular_values: DVector<f64>,
    v_t: DMatrix<f64>,
    n_rows: usize,
}

impl DesignFactorization {
    pub fn new(x: &DMatrix<f64>) -> Result<Self, LinModelError> {
        if x.nrows() < 2 {
            return Err(LinModelError::TooFewRows(x.nrows()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LinModelError::NonFiniteFeatures);
        }
        let ones = DVector::from_element(x.nrows(), 1.0);
        let x_mean = x.row_mean();
        let xc = x - &ones * &x_mean;
        let svd = xc.svd(true, true);
        Ok(DesignFactorization {
            x_mean,
            u: svd.u.expect("svd requested u"),
            singular_values: svd.singular_values,
            v_t: svd.v_t.expect("svd requested v_t"),
            n_rows: x.nrows(),
        })
    }

    fn sigma_cutoff(&self) -> f64 {
        let dim = self.n_rows.max(self.v_t.ncols());
        self.singular_values.max() * dim as f64 * f64::EPSILON
    }

    /// Numerical rank of the centered design.
    pub fn rank(&self) -> usize {
        let cutoff = self.sigma_cutoff();
        self.singular_values.iter().filter(|&&s| s > cutoff).count()
    }

    /// Largest singular value of the centered design; the natural scale for
    /// choosing a ridge strength relative to the data.
    pub fn top_singular_value(&self) -> f64 {
        self.singular_values.max()
    }

    /// Solve for coefficients (k × d) and intercept (k) against one label
    /// matrix. λ = 0 takes the minimum-norm solution on the retained
    /// singular directions; λ > 0 applies ridge shrinkage σ/(σ² + λ).
    pub fn solve(
        &self,
        y: &DMatrix<f64>,
        ridge_lambda: f64,
    ) -> Result<(DMatrix<f64>, DVector<f64>), LinModelError> {
        if y.nrows() != self.n_rows {
            return Err(LinModelError::TooFewRows(y.nrows()));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(LinModelError::NonFiniteLabels);
        }
        if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
            return Err(LinModelError::BadLambda(ridge_lambda));
        }
        let ones = DVector::from_element(self.n_rows, 1.0);
        let y_mean = y.row_mean();
        let yc = y - &ones * &y_mean;

        let cutoff = self.sigma_cutoff();
        let sigma_min = self
            .singular_values
            .iter()
            .copied()
            .filter(|&s| s > cutoff)
            .fold(f64::INFINITY, f64::min);
        if ridge_lambda == 0.0 && sigma_min.is_finite() {
            let kappa = self.singular_values.max() / sigma_min;
            if kappa > 1e12 {
                log::warn!(
                    "design matrix is badly conditioned (κ ≈ {kappa:.1e}); consider ridge_lambda ≈ 1e-8"
                );
            }
        }

        let mut ut_yc = self.u.transpose() * &yc;
        for (i, &s) in self.singular_values.iter().enumerate() {
            let factor = if ridge_lambda > 0.0 {
                s / (s * s + ridge_lambda)
            } else if s > cutoff {
                1.0 / s
            } else {
                0.0
            };
            ut_yc.row_mut(i).scale_mut(factor);
        }
        let coeffs_t = self.v_t.transpose() * ut_yc; // d × k
        let coeffs = coeffs_t.transpose();
        let intercept = y_mean.transpose() - &coeffs * self.x_mean.transpose();
        Ok((coeffs, intercept))
    }

    pub fn fit(
        &self,
        y: &DMatrix<f64>,
        ridge_lambda: f64,
        feature_map: FeatureMap,
    ) -> Result<LinearModel, LinModelError> {
        let (coeffs, intercept) = self.solve(y, ridge_lambda)?;
        Ok(LinearModel { coeffs, intercept, feature_map, ridge_lambda })
    }
}

/// Fit one affine model Y ≈ X Aᵀ + b by least squares with optional ridge on
/// the coefficients (never the intercept).
pub fn fit_ols(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    ridge_lambda: f64,
) -> Result<LinearModel, LinModelError> {
    DesignFactorization::new(x)?.fit(y, ridge_lambda, FeatureMap::AllBuses)
}

/// Degree knob for the base learner: append element-wise powers x^2 … x^deg
/// as extra columns. Degree 1 is the identity and the only mode used by the
/// shipped pipelines.
pub fn expand_polynomial(x: &DMatrix<f64>, degree: u32) -> DMatrix<f64> {
    assert!(degree >= 1);
    let (m, d) = x.shape();
    let mut out = DMatrix::zeros(m, d * degree as usize);
    out.view_mut((0, 0), (m, d)).copy_from(x);
    for p in 2..=degree {
        for c in 0..d {
            for r in 0..m {
                out[(r, d * (p as usize - 1) + c)] = x[(r, c)].powi(p as i32);
            }
        }
    }
    out
}

pub fn fit_polynomial(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    degree: u32,
    ridge_lambda: f64,
) -> Result<LinearModel, LinModelError> {
    fit_ols(&expand_polynomial(x, degree), y, ridge_lambda)
}

fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |r, c| x[(r, cols[c])])
}

/// One 2-output (P, Q from-end flow) model per branch, restricted to the
/// branch's four endpoint voltage features.
pub fn fit_branch_models(
    ds: &Dataset,
    case: &NetworkCase,
    ridge_lambda: f64,
) -> Result<Vec<LinearModel>, LinModelError> {
    fit_branch_models_with(ds, case, ridge_lambda, true)
}

/// As `fit_branch_models`, but `endpoint_features = false` fits each branch
/// against all 2n voltage columns instead (for measuring what the endpoint
/// restriction costs).
pub fn fit_branch_models_with(
    ds: &Dataset,
    case: &NetworkCase,
    ridge_lambda: f64,
    endpoint_features: bool,
) -> Result<Vec<LinearModel>, LinModelError> {
    let n = case.n_buses();
    assert_eq!(ds.features.ncols(), 2 * n, "dataset does not match case topology");
    assert_eq!(ds.labels_branch_p.ncols(), case.n_branches());
    let full_fac = if endpoint_features { None } else { Some(DesignFactorization::new(&ds.features)?) };
    let mut models = Vec::with_capacity(case.n_branches());
    for (l, br) in case.branches.iter().enumerate() {
        let map = FeatureMap::BranchEndpoints { from: br.from, to: br.to };
        let m = ds.n_rows();
        let mut y = DMatrix::zeros(m, 2);
        y.column_mut(0).copy_from(&ds.labels_branch_p.column(l));
        y.column_mut(1).copy_from(&ds.labels_branch_q.column(l));
        let model = if let Some(fac) = &full_fac {
            fac.fit(&y, ridge_lambda, FeatureMap::AllBuses)?
        } else {
            let x = select_columns(&ds.features, &map.columns(n));
            DesignFactorization::new(&x)?.fit(&y, ridge_lambda, map)?
        };
        models.push(model);
    }
    Ok(models)
}
