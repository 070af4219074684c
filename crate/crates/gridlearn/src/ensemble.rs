//! Gradient boosting and bagging over the affine base learner.
//!
//! With squared loss the negative gradient at each boosting stage is exactly
//! the current residual, so each stage is an OLS fit to residuals; for such
//! stages the analytically exact line-search step is 1, which doubles as a
//! self-test. Since every stage is affine, any ensemble collapses to a
//! single affine map — the collapsed coefficients are what the OPF builder
//! consumes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linmodel::{DesignFactorization, FeatureMap, LinModelError, LinearModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LearningRateMode {
    /// Fixed step θ ∈ (0, 2) applied to every stage.
    Constant,
    /// Exact minimizing step ⟨R, Φ⟩/‖Φ‖²; analytically 1 for OLS stages.
    LineSearch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostConfig {
    pub n_learners: usize,
    pub learning_rate_mode: LearningRateMode,
    /// Step size used in Constant mode.
    pub theta: f64,
    pub ridge_lambda: f64,
    /// Per-stage ridge expressed as a fraction of σ₁² of the design each fit
    /// sees, added on top of `ridge_lambda`. An absolute λ that suits one
    /// system is orders of magnitude off for another, so data-relative
    /// shrinkage is the knob that transfers across cases.
    pub ridge_fraction: f64,
}

impl BoostConfig {
    pub fn constant(n_learners: usize, theta: f64) -> Self {
        BoostConfig {
            n_learners,
            learning_rate_mode: LearningRateMode::Constant,
            theta,
            ridge_lambda: 0.0,
            ridge_fraction: 0.0,
        }
    }

    pub fn line_search(n_learners: usize) -> Self {
        BoostConfig {
            n_learners,
            learning_rate_mode: LearningRateMode::LineSearch,
            theta: 1.0,
            ridge_lambda: 0.0,
            ridge_fraction: 0.0,
        }
    }

    fn validate(&self) {
        if self.learning_rate_mode == LearningRateMode::Constant {
            assert!(
                self.theta > 0.0 && self.theta < 2.0,
                "constant step size must lie in (0, 2), got {}",
                self.theta
            );
        }
    }
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig::constant(200, 0.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagConfig {
    pub n_bootstraps: usize,
    /// Rows drawn per bootstrap (with replacement); None means M.
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub ridge_lambda: f64,
}

impl BagConfig {
    pub fn new(n_bootstraps: usize, seed: u64) -> Self {
        BagConfig { n_bootstraps, sample_size: None, seed, ridge_lambda: 0.0 }
    }
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig::new(50, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnsembleModel {
    Boosted {
        /// Per-output training mean: the squared-loss-optimal constant init.
        base_constant: DVector<f64>,
        /// (stage model, step size), applied additively in order.
        stages: Vec<(LinearModel, f64)>,
        /// Kept at the top level so a zero-stage ensemble still knows its
        /// input width and column selection.
        n_features: usize,
        feature_map: FeatureMap,
    },
    Bagged {
        members: Vec<LinearModel>,
    },
}

impl EnsembleModel {
    pub fn n_outputs(&self) -> usize {
        match self {
            EnsembleModel::Boosted { base_constant, .. } => base_constant.len(),
            EnsembleModel::Bagged { members } => members[0].n_outputs(),
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            EnsembleModel::Boosted { n_features, .. } => *n_features,
            EnsembleModel::Bagged { members } => members[0].n_features(),
        }
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n_features(), "feature dimension mismatch");
        match self {
            EnsembleModel::Boosted { base_constant, stages, .. } => {
                let mut out = base_constant.clone();
                for (stage, theta) in stages {
                    out += *theta * stage.predict(x);
                }
                out
            }
            EnsembleModel::Bagged { members } => {
                let mut out = members[0].predict(x);
                for m in &members[1..] {
                    out += m.predict(x);
                }
                out / members.len() as f64
            }
        }
    }

    pub fn predict_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        // the collapsed form is exact for affine stages and much cheaper
        self.collapse().predict_batch(x)
    }

    /// Fold the ensemble into one affine map: sums of θ-scaled stages on top
    /// of the constant for boosting, the member average for bagging.
    pub fn collapse(&self) -> LinearModel {
        match self {
            EnsembleModel::Boosted { base_constant, stages, n_features, feature_map } => {
                let k = base_constant.len();
                let mut coeffs = DMatrix::zeros(k, *n_features);
                let mut intercept = base_constant.clone();
                for (stage, theta) in stages {
                    coeffs += *theta * &stage.coeffs;
                    intercept += *theta * &stage.intercept;
                }
                let ridge_lambda = stages.first().map_or(0.0, |(s, _)| s.ridge_lambda);
                LinearModel { coeffs, intercept, feature_map: *feature_map, ridge_lambda }
            }
            EnsembleModel::Bagged { members } => {
                let scale = 1.0 / members.len() as f64;
                let mut coeffs = members[0].coeffs.clone();
                let mut intercept = members[0].intercept.clone();
                for m in &members[1..] {
                    coeffs += &m.coeffs;
                    intercept += &m.intercept;
                }
                LinearModel {
                    coeffs: scale * coeffs,
                    intercept: scale * intercept,
                    feature_map: members[0].feature_map,
                    ridge_lambda: members[0].ridge_lambda,
                }
            }
        }
    }

    /// JSON containing both the staged form and the collapsed affine map.
    pub fn export_json(&self) -> String {
        #[derive(Serialize)]
        struct Export<'a> {
            ensemble: &'a EnsembleModel,
            collapsed: LinearModel,
        }
        serde_json::to_string(&Export { ensemble: self, collapsed: self.collapse() })
            .expect("ensemble serializes")
    }
}

pub fn predict_ensemble(model: &EnsembleModel, x: &DVector<f64>) -> DVector<f64> {
    model.predict(x)
}

pub fn fit_gradient_boosting(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &BoostConfig,
) -> Result<EnsembleModel, LinModelError> {
    fit_gradient_boosting_with_map(x, y, cfg, FeatureMap::AllBuses).map(|(m, _)| m)
}

/// Boosting fit that also records the training MSE after the constant init
/// (index 0) and after every stage, for descent checks and sweep curves.
pub fn fit_gradient_boosting_with_map(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &BoostConfig,
    feature_map: FeatureMap,
) -> Result<(EnsembleModel, Vec<f64>), LinModelError> {
    cfg.validate();
    let (m, k) = (y.nrows(), y.ncols());
    let fac = DesignFactorization::new(x)?;
    let base_constant: DVector<f64> = y.row_mean().transpose();

    let ones = DVector::from_element(m, 1.0);
    let mut residual = y - &ones * base_constant.transpose();
    let mse_of = |r: &DMatrix<f64>| r.norm_squared() / (m * k) as f64;
    let mut trace = Vec::with_capacity(cfg.n_learners + 1);
    trace.push(mse_of(&residual));

    let lambda = cfg.ridge_lambda + cfg.ridge_fraction * fac.top_singular_value().powi(2);
    let mut stages = Vec::with_capacity(cfg.n_learners);
    for _ in 0..cfg.n_learners {
        let stage = fac.fit(&residual, lambda, feature_map)?;
        let phi = stage.predict_batch(x);
        let theta = match cfg.learning_rate_mode {
            LearningRateMode::Constant => cfg.theta,
            LearningRateMode::LineSearch => {
                let denom = phi.norm_squared();
                if denom <= f64::EPSILON * (m * k) as f64 {
                    1.0
                } else {
                    residual.dot(&phi) / denom
                }
            }
        };
        residual -= theta * &phi;
        trace.push(mse_of(&residual));
        stages.push((stage, theta));
    }

    Ok((
        EnsembleModel::Boosted { base_constant, stages, n_features: x.ncols(), feature_map },
        trace,
    ))
}

pub fn fit_bagging(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &BagConfig,
) -> Result<EnsembleModel, LinModelError> {
    fit_bagging_with_map(x, y, cfg, FeatureMap::AllBuses)
}

pub fn fit_bagging_with_map(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cfg: &BagConfig,
    feature_map: FeatureMap,
) -> Result<EnsembleModel, LinModelError> {
    assert!(cfg.n_bootstraps >= 1, "need at least one bootstrap");
    let m = x.nrows();
    let m_prime = cfg.sample_size.unwrap_or(m);
    assert!((1..=m).contains(&m_prime), "sample_size must lie in 1..=M");
    let full_rank = DesignFactorization::new(x)?.rank();

    let members: Vec<LinearModel> = (0..cfg.n_bootstraps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64 + 1);
            let idx: Vec<usize> = (0..m_prime).map(|_| rng.random_range(0..m)).collect();
            fit_one_member(x, y, &idx, cfg.ridge_lambda, full_rank, feature_map)
        })
        .collect::<Result<_, _>>()?;

    Ok(EnsembleModel::Bagged { members })
}

/// Bagging with caller-supplied resample indices; the seeded path draws its
/// own, this entry point exists so tests can force particular resamples.
pub fn fit_bagging_from_indices(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    indices: &[Vec<usize>],
    ridge_lambda: f64,
    feature_map: FeatureMap,
) -> Result<EnsembleModel, LinModelError> {
    assert!(!indices.is_empty());
    let full_rank = DesignFactorization::new(x)?.rank();
    let members = indices
        .iter()
        .map(|idx| fit_one_member(x, y, idx, ridge_lambda, full_rank, feature_map))
        .collect::<Result<_, _>>()?;
    Ok(EnsembleModel::Bagged { members })
}

fn fit_one_member(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    idx: &[usize],
    ridge_lambda: f64,
    full_rank: usize,
    feature_map: FeatureMap,
) -> Result<LinearModel, LinModelError> {
    let xb = x.select_rows(idx.iter());
    let yb = y.select_rows(idx.iter());
    let fac = DesignFactorization::new(&xb)?;
    if fac.rank() < full_rank.min(idx.len().saturating_sub(1)) {
        log::warn!(
            "bootstrap resample lost design rank ({} < {}); refitting with ridge 1e-8",
            fac.rank(),
            full_rank
        );
        return fac.fit(&yb, ridge_lambda.max(1e-8), feature_map);
    }
    fac.fit(&yb, ridge_lambda, feature_map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::load_bundled;
    use crate::datagen::{generate, split, SamplerConfig};
    use crate::linmodel::fit_ols;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_data(seed: u64, m: usize, d: usize, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let noise = DMatrix::from_fn(m, k, |_, _| rng.random_range(-0.05..0.05));
        let y = &x * a.transpose() + noise;
        (x, y)
    }

    #[test]
    fn zero_stages_predict_training_mean() {
        let (x, y) = random_data(1, 30, 4, 3);
        let (model, trace) = fit_gradient_boosting_with_map(
            &x,
            &y,
            &BoostConfig::constant(0, 0.1),
            FeatureMap::AllBuses,
        )
        .unwrap();
        assert_eq!(trace.len(), 1);
        let p = model.predict(&DVector::from_element(4, 0.3));
        let mean = y.row_mean().transpose();
        assert_relative_eq!(p, mean, epsilon = 1e-12);
        let c = model.collapse();
        assert_eq!(c.coeffs, DMatrix::zeros(3, 4));
        assert_relative_eq!(c.intercept, mean, epsilon = 1e-12);
    }

    #[test]
    fn one_stage_unit_step_equals_direct_ols() {
        let (x, y) = random_data(2, 50, 5, 2);
        let boosted = fit_gradient_boosting(&x, &y, &BoostConfig::constant(1, 1.0)).unwrap();
        let direct = fit_ols(&x, &y, 0.0).unwrap();
        let err = (boosted.predict_batch(&x) - direct.predict_batch(&x)).amax();
        assert!(err <= 1e-8, "deviation {err}");
    }

    #[test]
    fn line_search_step_is_one_for_ols_stages() {
        let (x, y) = random_data(3, 40, 4, 2);
        let (model, _) =
            fit_gradient_boosting_with_map(&x, &y, &BoostConfig::line_search(5), FeatureMap::AllBuses)
                .unwrap();
        let EnsembleModel::Boosted { stages, .. } = &model else { panic!() };
        // after the first exact stage the residual is orthogonal to the
        // column space, so later stages are ~zero and default to θ = 1
        for (_, theta) in stages {
            assert!((theta - 1.0).abs() <= 1e-9, "θ = {theta}");
        }
    }

    #[test]
    fn stages_after_fixed_point_have_zero_coefficients() {
        let (x, y) = random_data(4, 30, 4, 2);
        let model = fit_gradient_boosting(&x, &y, &BoostConfig::constant(3, 1.0)).unwrap();
        let EnsembleModel::Boosted { stages, .. } = &model else { panic!() };
        for (stage, _) in &stages[1..] {
            assert!(stage.coeffs.amax() < 1e-9, "late stage coeffs {}", stage.coeffs.amax());
            assert!(stage.intercept.amax() < 1e-9);
        }
    }

    #[test]
    fn training_mse_never_increases_on_case5() {
        let case = load_bundled("case5").unwrap();
        let ds = generate(&case, &SamplerConfig::new(60, 31)).unwrap();
        let (_, trace) = fit_gradient_boosting_with_map(
            &ds.features,
            &ds.labels_bus_p,
            &BoostConfig::constant(200, 0.1),
            FeatureMap::AllBuses,
        )
        .unwrap();
        assert_eq!(trace.len(), 201);
        for t in 1..trace.len() {
            assert!(
                trace[t] <= trace[t - 1] * (1.0 + 1e-12) + 1e-18,
                "MSE rose at stage {t}: {} -> {}",
                trace[t - 1],
                trace[t]
            );
        }
    }

    #[test]
    fn bagged_average_of_opposite_members_is_the_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_vec(vec![0.7, -0.2]);
        let mk = |coeffs: DMatrix<f64>| LinearModel {
            coeffs,
            intercept: b.clone(),
            feature_map: FeatureMap::AllBuses,
            ridge_lambda: 0.0,
        };
        let model = EnsembleModel::Bagged { members: vec![mk(a.clone()), mk(-a)] };
        for _ in 0..10 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            assert_relative_eq!(model.predict(&x), b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_resample_equals_plain_ols() {
        let (x, y) = random_data(6, 35, 4, 2);
        let idx: Vec<usize> = (0..35).collect();
        let model =
            fit_bagging_from_indices(&x, &y, &[idx], 0.0, FeatureMap::AllBuses).unwrap();
        let direct = fit_ols(&x, &y, 0.0).unwrap();
        let c = model.collapse();
        assert_relative_eq!(c.coeffs, direct.coeffs, epsilon = 1e-10);
        assert_relative_eq!(c.intercept, direct.intercept, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_identical_rows_fall_back_gracefully() {
        let x = DMatrix::from_fn(10, 3, |_, c| c as f64);
        let y = DMatrix::from_fn(10, 2, |_, c| 1.0 + c as f64);
        let model = fit_bagging(&x, &y, &BagConfig::new(4, 7)).unwrap();
        let EnsembleModel::Bagged { members } = &model else { panic!() };
        let p = model.predict(&DVector::from_vec(vec![0.0, 1.0, 2.0]));
        let p0 = members[0].predict(&DVector::from_vec(vec![0.0, 1.0, 2.0]));
        assert_relative_eq!(p, p0, epsilon = 1e-12);
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(p[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn rank_losing_resample_triggers_ridge_fallback() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DMatrix::from_column_slice(3, 1, &[0.0, 2.0, 4.0]);
        let model =
            fit_bagging_from_indices(&x, &y, &[vec![1, 1, 1]], 0.0, FeatureMap::AllBuses).unwrap();
        let c = model.collapse();
        assert!(c.coeffs.iter().all(|v| v.is_finite()));
        // the constant resample carries no slope information, so the member
        // can only predict the resampled mean
        assert_relative_eq!(c.predict(&DVector::from_element(1, 5.0))[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn same_seed_reproduces_bitwise_identical_ensembles() {
        let (x, y) = random_data(8, 40, 5, 3);
        let cfg = BagConfig::new(12, 99);
        let a = fit_bagging(&x, &y, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| fit_bagging(&x, &y, &cfg).unwrap());
        assert_eq!(a, b);
        let c = fit_bagging(&x, &y, &BagConfig::new(12, 100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn jensen_bound_holds_on_held_out_data() {
        let case = load_bundled("case5").unwrap();
        let cfg = SamplerConfig::new(80, 41);
        let ds = generate(&case, &cfg).unwrap();
        let (train, test) = split(&ds, &cfg).unwrap();
        let model =
            fit_bagging(&train.features, &train.labels_bus_q, &BagConfig::new(20, 3)).unwrap();
        let EnsembleModel::Bagged { members } = &model else { panic!() };
        let mse = |pred: &DMatrix<f64>| {
            (pred - &test.labels_bus_q).norm_squared() / (pred.nrows() * pred.ncols()) as f64
        };
        let bagged_mse = mse(&model.predict_batch(&test.features));
        let member_mean: f64 = members
            .iter()
            .map(|m| mse(&m.predict_batch(&test.features)))
            .sum::<f64>()
            / members.len() as f64;
        assert!(
            bagged_mse <= member_mean + 1e-12,
            "bagged {bagged_mse} vs member mean {member_mean}"
        );
    }

    #[test]
    fn collapse_agrees_with_staged_prediction_on_random_inputs() {
        let (x, y) = random_data(10, 60, 6, 3);
        let boosted = fit_gradient_boosting(&x, &y, &BoostConfig::constant(25, 0.3)).unwrap();
        let bagged = fit_bagging(&x, &y, &BagConfig::new(15, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in [&boosted, &bagged] {
            let c = model.collapse();
            for _ in 0..100 {
                let xv = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
                let err = (model.predict(&xv) - c.predict(&xv)).amax();
                assert!(err <= 1e-10, "collapse deviates by {err}");
            }
        }
    }

    #[test]
    fn export_json_round_trips_the_staged_form() {
        let (x, y) = random_data(12, 25, 3, 2);
        let model = fit_gradient_boosting(&x, &y, &BoostConfig::constant(4, 0.5)).unwrap();
        let txt = model.export_json();
        let value: serde_json::Value = serde_json::from_str(&txt).unwrap();
        let back: EnsembleModel = serde_json::from_value(value["ensemble"].clone()).unwrap();
        assert_eq!(model, back);
        assert!(value["collapsed"].is_object());
    }
}
