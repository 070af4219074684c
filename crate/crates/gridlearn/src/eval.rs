//! Accuracy evaluation: average-RMSE metrics, three-way method comparison
//! (plain regression vs boosting vs bagging) over the four label families,
//! and tuning sweeps over ensemble size, emitted as CSV.
//!
//! Sweeps never refit per grid point: boosting stages do not depend on the
//! total stage count and bagging members are seeded independently, so one
//! long run is snapshotted at prefixes, which is exact.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::NetworkCase;
use crate::datagen::{generate, split, Dataset, DatagenError, SamplerConfig};
use crate::ensemble::{
    fit_bagging_with_map, fit_gradient_boosting_with_map, BagConfig, BoostConfig, EnsembleModel,
};
use crate::linmodel::{DesignFactorization, FeatureMap, LinModelError, LinearModel};

/// Decorrelates bagging bootstrap streams from the sampler streams when one
/// user-facing seed drives both.
pub const BAG_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// The plain-regression baseline is unregularized by definition.
const PR_RIDGE_LAMBDA: f64 = 0.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DatagenError),
    #[error(transparent)]
    Fit(#[from] LinModelError),
    #[error("parameter grid must be nonempty and strictly increasing")]
    BadGrid,
    #[error("cannot parse report: {0}")]
    BadCsv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Pr,
    Gb,
    Bagging,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Pr, Method::Gb, Method::Bagging];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Pr => "PR",
            Method::Gb => "GB",
            Method::Bagging => "Bagging",
        }
    }

    pub fn from_label(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    BusP,
    BusQ,
    BranchP,
    BranchQ,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::BusP, Family::BusQ, Family::BranchP, Family::BranchQ];

    pub fn label(&self) -> &'static str {
        match self {
            Family::BusP => "bus_P",
            Family::BusQ => "bus_Q",
            Family::BranchP => "branch_P",
            Family::BranchQ => "branch_Q",
        }
    }

    pub fn from_label(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.label().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 2] = [SplitKind::Train, SplitKind::Test];

    pub fn label(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }

    pub fn from_label(s: &str) -> Option<SplitKind> {
        SplitKind::ALL.into_iter().find(|k| k.label().eq_ignore_ascii_case(s))
    }
}

/// Mean over outputs of the per-output root-mean-square error.
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "prediction shape mismatch");
    assert!(pred.nrows() >= 1, "need at least one sample");
    let m = pred.nrows() as f64;
    let total: f64 = (0..pred.ncols())
        .map(|j| {
            let d = pred.column(j) - truth.column(j);
            (d.norm_squared() / m).sqrt()
        })
        .sum();
    total / pred.ncols() as f64
}

fn mse(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (pred - truth).norm_squared() / (pred.nrows() * pred.ncols()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseEntry {
    pub method: Method,
    pub family: Family,
    pub split: SplitKind,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub case_name: String,
    pub entries: Vec<RmseEntry>,
}

impl RmseReport {
    pub fn get(&self, method: Method, family: Family, split: SplitKind) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.family == family && e.split == split)
            .map(|e| e.rmse)
    }

    /// Columns: case, method, family, split, rmse, rmse_x1e5 (Table-style
    /// scaled copy of the same value).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,method,family,split,rmse,rmse_x1e5\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.case_name,
                e.method.label(),
                e.family.label(),
                e.split.label(),
                e.rmse,
                e.rmse * 1e5
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RmseReport, EvalError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EvalError::BadCsv("empty".into()))?;
        if !header.starts_with("case,method,family,split,rmse") {
            return Err(EvalError::BadCsv(format!("unexpected header {header}")));
        }
        let mut case_name = String::new();
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 5 {
                return Err(EvalError::BadCsv(format!("short row: {line}")));
            }
            if case_name.is_empty() {
                case_name = f[0].to_string();
            } else if case_name != f[0] {
                return Err(EvalError::BadCsv("mixed cases in one report".into()));
            }
            entries.push(RmseEntry {
                method: Method::from_label(f[1])
                    .ok_or_else(|| EvalError::BadCsv(format!("method {}", f[1])))?,
                family: Family::from_label(f[2])
                    .ok_or_else(|| EvalError::BadCsv(format!("family {}", f[2])))?,
                split: SplitKind::from_label(f[3])
                    .ok_or_else(|| EvalError::BadCsv(format!("split {}", f[3])))?,
                rmse: f[4].parse().map_err(|e| EvalError::BadCsv(format!("{e}: {line}")))?,
            });
        }
        Ok(RmseReport { case_name, entries })
    }
}

/// Per-branch designs: the four endpoint columns of each branch.
fn branch_design(features: &DMatrix<f64>, map: FeatureMap, n_buses: usize) -> DMatrix<f64> {
    let cols = map.columns(n_buses);
    DMatrix::from_fn(features.nrows(), cols.len(), |r, c| features[(r, cols[c])])
}

fn branch_labels(ds: &Dataset, l: usize) -> DMatrix<f64> {
    let m = ds.n_rows();
    let mut y = DMatrix::zeros(m, 2);
    y.column_mut(0).copy_from(&ds.labels_branch_p.column(l));
    y.column_mut(1).copy_from(&ds.labels_branch_q.column(l));
    y
}

fn bus_labels(ds: &Dataset, family: Family) -> &DMatrix<f64> {
    match family {
        Family::BusP => &ds.labels_bus_p,
        Family::BusQ => &ds.labels_bus_q,
        _ => unreachable!("bus_labels called for a branch family"),
    }
}

/// Assemble family-wide (M×L) P and Q predictions from per-branch 2-output
/// models.
fn assemble_branch_predictions(
    models: &[LinearModel],
    designs: &[DMatrix<f64>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = designs[0].nrows();
    let l_total = models.len();
    let mut pred_p = DMatrix::zeros(m, l_total);
    let mut pred_q = DMatrix::zeros(m, l_total);
    for (l, (model, x)) in models.iter().zip(designs).enumerate() {
        let out = model.predict_batch(x);
        pred_p.column_mut(l).copy_from(&out.column(0));
        pred_q.column_mut(l).copy_from(&out.column(1));
    }
    (pred_p, pred_q)
}

/// Generate, split, fit all three methods, and report train/test average
/// RMSE for every label family. The bagging Jensen bound (averaged predictor
/// loss ≤ average member loss, on held-out data) is asserted on every run.
pub fn compare_methods(
    case: &NetworkCase,
    sampler: &SamplerConfig,
    boost: &BoostConfig,
    bag: &BagConfig,
) -> Result<RmseReport, EvalError> {
    let ds = generate(case, sampler)?;
    let (train, test) = split(&ds, sampler)?;
    let mut entries = Vec::with_capacity(24);
    let push =
        |method: Method, family: Family, tr: f64, te: f64, entries: &mut Vec<RmseEntry>| {
            entries.push(RmseEntry { method, family, split: SplitKind::Train, rmse: tr });
            entries.push(RmseEntry { method, family, split: SplitKind::Test, rmse: te });
        };

    // Bus families share the full design; factor it once for the baseline.
    let fac = DesignFactorization::new(&train.features)?;
    for family in [Family::BusP, Family::BusQ] {
        let y_train = bus_labels(&train, family);
        let y_test = bus_labels(&test, family);

        let pr = fac.fit(y_train, PR_RIDGE_LAMBDA, FeatureMap::AllBuses)?;
        push(
            Method::Pr,
            family,
            rmse(&pr.predict_batch(&train.features), y_train),
            rmse(&pr.predict_batch(&test.features), y_test),
            &mut entries,
        );

        let (gb, _) =
            fit_gradient_boosting_with_map(&train.features, y_train, boost, FeatureMap::AllBuses)?;
        let gbc = gb.collapse();
        push(
            Method::Gb,
            family,
            rmse(&gbc.predict_batch(&train.features), y_train),
            rmse(&gbc.predict_batch(&test.features), y_test),
            &mut entries,
        );

        let bagged = fit_bagging_with_map(&train.features, y_train, bag, FeatureMap::AllBuses)?;
        let bc = bagged.collapse();
        let bagged_test_pred = bc.predict_batch(&test.features);
        if let EnsembleModel::Bagged { members } = &bagged {
            let member_mean: f64 = members
                .iter()
                .map(|m| mse(&m.predict_batch(&test.features), y_test))
                .sum::<f64>()
                / members.len() as f64;
            let bag_mse = mse(&bagged_test_pred, y_test);
            assert!(
                bag_mse <= member_mean * (1.0 + 1e-12) + 1e-18,
                "Jensen bound violated on {family:?}: bagged {bag_mse} vs member mean {member_mean}"
            );
        }
        push(
            Method::Bagging,
            family,
            rmse(&bc.predict_batch(&train.features), y_train),
            rmse(&bagged_test_pred, y_test),
            &mut entries,
        );
    }

    // Branch families: one 2-output model per branch, endpoint features.
    let n = case.n_buses();
    let maps: Vec<FeatureMap> = case
        .branches
        .iter()
        .map(|br| FeatureMap::BranchEndpoints { from: br.from, to: br.to })
        .collect();
    let train_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&train.features, m, n)).collect();
    let test_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&test.features, m, n)).collect();

    struct BranchFits {
        pr: LinearModel,
        gb: LinearModel,
        bag: EnsembleModel,
    }
    let fits: Vec<BranchFits> = (0..case.n_branches())
        .into_par_iter()
        .map(|l| {
            let y = branch_labels(&train, l);
            let bfac = DesignFactorization::new(&train_designs[l])?;
            let pr = bfac.fit(&y, PR_RIDGE_LAMBDA, maps[l])?;
            let (gb, _) = fit_gradient_boosting_with_map(&train_designs[l], &y, boost, maps[l])?;
            let bag = fit_bagging_with_map(&train_designs[l], &y, bag, maps[l])?;
            Ok(BranchFits { pr, gb: gb.collapse(), bag })
        })
        .collect::<Result<_, EvalError>>()?;

    for method in Method::ALL {
        let models: Vec<LinearModel> = fits
            .iter()
            .map(|f| match method {
                Method::Pr => f.pr.clone(),
                Method::Gb => f.gb.clone(),
                Method::Bagging => f.bag.collapse(),
            })
            .collect();
        let (tr_p, tr_q) = assemble_branch_predictions(&models, &train_designs);
        let (te_p, te_q) = assemble_branch_predictions(&models, &test_designs);
        push(
            method,
            Family::BranchP,
            rmse(&tr_p, &train.labels_branch_p),
            rmse(&te_p, &test.labels_branch_p),
            &mut entries,
        );
        push(
            method,
            Family::BranchQ,
            rmse(&tr_q, &train.labels_branch_q),
            rmse(&te_q, &test.labels_branch_q),
            &mut entries,
        );
        if method == Method::Bagging {
            // Jensen bound over the whole branch family, held-out split
            let n_members = match &fits[0].bag {
                EnsembleModel::Bagged { members } => members.len(),
                _ => unreachable!(),
            };
            let mut member_sse = vec![0.0f64; n_members];
            for (l, f) in fits.iter().enumerate() {
                let EnsembleModel::Bagged { members } = &f.bag else { unreachable!() };
                let truth = branch_labels(&test, l);
                for (b, m) in members.iter().enumerate() {
                    member_sse[b] += (m.predict_batch(&test_designs[l]) - &truth).norm_squared();
                }
            }
            let cells = (test.n_rows() * 2 * case.n_branches()) as f64;
            let member_mean = member_sse.iter().sum::<f64>() / n_members as f64 / cells;
            let bag_mse = (mse(&te_p, &test.labels_branch_p) + mse(&te_q, &test.labels_branch_q)) / 2.0;
            assert!(
                bag_mse <= member_mean * (1.0 + 1e-12) + 1e-18,
                "Jensen bound violated on branches: bagged {bag_mse} vs member mean {member_mean}"
            );
        }
    }

    Ok(RmseReport { case_name: case.name.clone(), entries })
}

/// Run `compare_methods` once per seed (the bagging seed is salted so the
/// two RNG consumers never share streams) and return the entrywise median
/// report.
pub fn compare_methods_median(
    case: &NetworkCase,
    sampler: &SamplerConfig,
    boost: &BoostConfig,
    bag: &BagConfig,
    seeds: &[u64],
) -> Result<RmseReport, EvalError> {
    assert!(!seeds.is_empty());
    let reports: Vec<RmseReport> = seeds
        .par_iter()
        .map(|&s| {
            let mut sc = sampler.clone();
            sc.seed = s;
            let mut bc = bag.clone();
            bc.seed = s ^ BAG_SEED_SALT;
            compare_methods(case, &sc, boost, &bc)
        })
        .collect::<Result<_, _>>()?;
    let mut entries = Vec::new();
    for template in &reports[0].entries {
        let mut vals: Vec<f64> = reports
            .iter()
            .map(|r| {
                r.get(template.method, template.family, template.split)
                    .expect("all reports share the same grid of entries")
            })
            .collect();
        vals.sort_by(f64::total_cmp);
        let mid = vals.len() / 2;
        let median =
            if vals.len() % 2 == 1 { vals[mid] } else { 0.5 * (vals[mid - 1] + vals[mid]) };
        entries.push(RmseEntry { rmse: median, ..template.clone() });
    }
    Ok(RmseReport { case_name: case.name.clone(), entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    T,
    Bt,
}

impl SweepParameter {
    pub fn label(&self) -> &'static str {
        match self {
            SweepParameter::T => "T",
            SweepParameter::Bt => "BT",
        }
    }

    pub fn from_label(s: &str) -> Option<SweepParameter> {
        match s {
            "T" => Some(SweepParameter::T),
            "BT" => Some(SweepParameter::Bt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub family: Family,
    pub split: SplitKind,
    pub rmse: f64,
}

/// Individual-member test RMSE, the scatter behind a bagging curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberPoint {
    pub member: usize,
    pub family: Family,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub case_name: String,
    pub parameter: SweepParameter,
    pub grid: Vec<usize>,
    pub points: Vec<SweepPoint>,
    pub scatter: Vec<MemberPoint>,
}

impl SweepCurve {
    pub fn rmse_at(&self, value: usize, family: Family, split: SplitKind) -> Option<f64> {
        self.points
            .iter()
            .find(|p| p.value == value && p.family == family && p.split == split)
            .map(|p| p.rmse)
    }

    /// Columns: case, param, value, family, split, rmse.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,param,value,family,split,rmse\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.case_name,
                self.parameter.label(),
                p.value,
                p.family.label(),
                p.split.label(),
                p.rmse
            ));
        }
        out
    }

    /// Columns: case, param, member, family, rmse (test split).
    pub fn scatter_to_csv(&self) -> String {
        let mut out = String::from("case,param,member,family,rmse\n");
        for p in &self.scatter {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.case_name,
                self.parameter.label(),
                p.member,
                p.family.label(),
                p.rmse
            ));
        }
        out
    }

    pub fn from_csv(curve: &str, scatter: Option<&str>) -> Result<SweepCurve, EvalError> {
        let mut lines = curve.lines();
        let header = lines.next().ok_or_else(|| EvalError::BadCsv("empty".into()))?;
        if header != "case,param,value,family,split,rmse" {
            return Err(EvalError::BadCsv(format!("unexpected header {header}")));
        }
        let mut case_name = String::new();
        let mut parameter = None;
        let mut points = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(EvalError::BadCsv(format!("bad row: {line}")));
            }
            if case_name.is_empty() {
                case_name = f[0].to_string();
            }
            parameter = Some(
                SweepParameter::from_label(f[1])
                    .ok_or_else(|| EvalError::BadCsv(format!("param {}", f[1])))?,
            );
            points.push(SweepPoint {
                value: f[2].parse().map_err(|e| EvalError::BadCsv(format!("{e}")))?,
                family: Family::from_label(f[3])
                    .ok_or_else(|| EvalError::BadCsv(format!("family {}", f[3])))?,
                split: SplitKind::from_label(f[4])
                    .ok_or_else(|| EvalError::BadCsv(format!("split {}", f[4])))?,
                rmse: f[5].parse().map_err(|e| EvalError::BadCsv(format!("{e}")))?,
            });
        }
        let mut grid: Vec<usize> = points.iter().map(|p| p.value).collect();
        grid.sort_unstable();
        grid.dedup();
        let mut scatter_points = Vec::new();
        if let Some(text) = scatter {
            for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 5 {
                    return Err(EvalError::BadCsv(format!("bad scatter row: {line}")));
                }
                scatter_points.push(MemberPoint {
                    member: f[2].parse().map_err(|e| EvalError::BadCsv(format!("{e}")))?,
                    family: Family::from_label(f[3])
                        .ok_or_else(|| EvalError::BadCsv(format!("family {}", f[3])))?,
                    rmse: f[4].parse().map_err(|e| EvalError::BadCsv(format!("{e}")))?,
                });
            }
        }
        Ok(SweepCurve {
            case_name,
            parameter: parameter.ok_or_else(|| EvalError::BadCsv("no rows".into()))?,
            grid,
            points,
            scatter: scatter_points,
        })
    }
}

fn check_grid(grid: &[usize]) -> Result<(), EvalError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadGrid);
    }
    Ok(())
}

/// Incremental prefix state for snapshotting an additive model sequence.
struct Prefix {
    coeffs: DMatrix<f64>,
    intercept: DVector<f64>,
    feature_map: FeatureMap,
}

impl Prefix {
    fn new(k: usize, d: usize, base: Option<&DVector<f64>>, feature_map: FeatureMap) -> Prefix {
        Prefix {
            coeffs: DMatrix::zeros(k, d),
            intercept: base.cloned().unwrap_or_else(|| DVector::zeros(k)),
            feature_map,
        }
    }

    fn add_scaled(&mut self, model: &LinearModel, weight: f64) {
        self.coeffs += weight * &model.coeffs;
        self.intercept += weight * &model.intercept;
    }

    fn model(&self, scale: f64) -> LinearModel {
        LinearModel {
            coeffs: scale * &self.coeffs,
            intercept: scale * &self.intercept,
            feature_map: self.feature_map,
            ridge_lambda: 0.0,
        }
    }
}

/// RMSE-vs-T curves from a single boosting run per family, snapshotted at
/// the grid values (exact: stages are independent of the total count).
pub fn sweep_boosting(
    case: &NetworkCase,
    sampler: &SamplerConfig,
    boost: &BoostConfig,
    grid: &[usize],
) -> Result<SweepCurve, EvalError> {
    check_grid(grid)?;
    let ds = generate(case, sampler)?;
    let (train, test) = split(&ds, sampler)?;
    let t_max = *grid.last().unwrap();
    let mut cfg = boost.clone();
    cfg.n_learners = t_max;
    let mut points = Vec::new();

    // bus families: one boosted run each
    for family in [Family::BusP, Family::BusQ] {
        let y_train = bus_labels(&train, family);
        let y_test = bus_labels(&test, family);
        let (model, _) =
            fit_gradient_boosting_with_map(&train.features, y_train, &cfg, FeatureMap::AllBuses)?;
        let EnsembleModel::Boosted { base_constant, stages, .. } = &model else { unreachable!() };
        let mut prefix = Prefix::new(
            base_constant.len(),
            train.features.ncols(),
            Some(base_constant),
            FeatureMap::AllBuses,
        );
        let mut next = 0usize;
        for t in 0..=t_max {
            if next < grid.len() && grid[next] == t {
                let m = prefix.model(1.0);
                points.push(SweepPoint {
                    value: t,
                    family,
                    split: SplitKind::Train,
                    rmse: rmse(&m.predict_batch(&train.features), y_train),
                });
                points.push(SweepPoint {
                    value: t,
                    family,
                    split: SplitKind::Test,
                    rmse: rmse(&m.predict_batch(&test.features), y_test),
                });
                next += 1;
            }
            if t < t_max {
                let (stage, theta) = &stages[t];
                prefix.add_scaled(stage, *theta);
            }
        }
    }

    // branch families: one boosted run per branch, snapshotted jointly
    let n = case.n_buses();
    let maps: Vec<FeatureMap> = case
        .branches
        .iter()
        .map(|br| FeatureMap::BranchEndpoints { from: br.from, to: br.to })
        .collect();
    let train_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&train.features, m, n)).collect();
    let test_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&test.features, m, n)).collect();
    let runs: Vec<EnsembleModel> = (0..case.n_branches())
        .into_par_iter()
        .map(|l| {
            let y = branch_labels(&train, l);
            Ok(fit_gradient_boosting_with_map(&train_designs[l], &y, &cfg, maps[l])?.0)
        })
        .collect::<Result<_, EvalError>>()?;
    let mut prefixes: Vec<Prefix> = runs
        .iter()
        .zip(&maps)
        .map(|(run, &map)| {
            let EnsembleModel::Boosted { base_constant, .. } = run else { unreachable!() };
            Prefix::new(2, 4, Some(base_constant), map)
        })
        .collect();
    let mut next = 0usize;
    for t in 0..=t_max {
        if next < grid.len() && grid[next] == t {
            let models: Vec<LinearModel> = prefixes.iter().map(|p| p.model(1.0)).collect();
            let (tr_p, tr_q) = assemble_branch_predictions(&models, &train_designs);
            let (te_p, te_q) = assemble_branch_predictions(&models, &test_designs);
            for (family, tr, te, truth_tr, truth_te) in [
                (Family::BranchP, &tr_p, &te_p, &train.labels_branch_p, &test.labels_branch_p),
                (Family::BranchQ, &tr_q, &te_q, &train.labels_branch_q, &test.labels_branch_q),
            ] {
                points.push(SweepPoint {
                    value: t,
                    family,
                    split: SplitKind::Train,
                    rmse: rmse(tr, truth_tr),
                });
                points.push(SweepPoint {
                    value: t,
                    family,
                    split: SplitKind::Test,
                    rmse: rmse(te, truth_te),
                });
            }
            next += 1;
        }
        if t < t_max {
            for (run, prefix) in runs.iter().zip(&mut prefixes) {
                let EnsembleModel::Boosted { stages, .. } = run else { unreachable!() };
                let (stage, theta) = &stages[t];
                prefix.add_scaled(stage, *theta);
            }
        }
    }

    Ok(SweepCurve {
        case_name: case.name.clone(),
        parameter: SweepParameter::T,
        grid: grid.to_vec(),
        points,
        scatter: Vec::new(),
    })
}

/// RMSE-vs-BT curves from nested prefixes of one member list, plus each
/// member's individual test RMSE as scatter.
pub fn sweep_bagging(
    case: &NetworkCase,
    sampler: &SamplerConfig,
    bag: &BagConfig,
    grid: &[usize],
) -> Result<SweepCurve, EvalError> {
    check_grid(grid)?;
    if grid[0] == 0 {
        return Err(EvalError::BadGrid);
    }
    let ds = generate(case, sampler)?;
    let (train, test) = split(&ds, sampler)?;
    let bt_max = *grid.last().unwrap();
    let mut cfg = bag.clone();
    cfg.n_bootstraps = bt_max;
    let mut points = Vec::new();
    let mut scatter = Vec::new();

    for family in [Family::BusP, Family::BusQ] {
        let y_train = bus_labels(&train, family);
        let y_test = bus_labels(&test, family);
        let model = fit_bagging_with_map(&train.features, y_train, &cfg, FeatureMap::AllBuses)?;
        let EnsembleModel::Bagged { members } = &model else { unreachable!() };
        for (b, member) in members.iter().enumerate() {
            scatter.push(MemberPoint {
                member: b,
                family,
                rmse: rmse(&member.predict_batch(&test.features), y_test),
            });
        }
        let mut prefix =
            Prefix::new(y_train.ncols(), train.features.ncols(), None, FeatureMap::AllBuses);
        let mut next = 0usize;
        for (b, member) in members.iter().enumerate() {
            prefix.add_scaled(member, 1.0);
            if next < grid.len() && grid[next] == b + 1 {
                let m = prefix.model(1.0 / (b + 1) as f64);
                points.push(SweepPoint {
                    value: b + 1,
                    family,
                    split: SplitKind::Train,
                    rmse: rmse(&m.predict_batch(&train.features), y_train),
                });
                points.push(SweepPoint {
                    value: b + 1,
                    family,
                    split: SplitKind::Test,
                    rmse: rmse(&m.predict_batch(&test.features), y_test),
                });
                next += 1;
            }
        }
    }

    // branch families
    let n = case.n_buses();
    let maps: Vec<FeatureMap> = case
        .branches
        .iter()
        .map(|br| FeatureMap::BranchEndpoints { from: br.from, to: br.to })
        .collect();
    let train_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&train.features, m, n)).collect();
    let test_designs: Vec<DMatrix<f64>> =
        maps.iter().map(|&m| branch_design(&test.features, m, n)).collect();
    let runs: Vec<EnsembleModel> = (0..case.n_branches())
        .into_par_iter()
        .map(|l| {
            let y = branch_labels(&train, l);
            Ok(fit_bagging_with_map(&train_designs[l], &y, &cfg, maps[l])?)
        })
        .collect::<Result<_, EvalError>>()?;

    // member scatter: per-branch column RMSEs averaged across branches
    let m_test = test.n_rows() as f64;
    for b in 0..bt_max {
        let mut sum_p = 0.0;
        let mut sum_q = 0.0;
        for (l, run) in runs.iter().enumerate() {
            let EnsembleModel::Bagged { members } = run else { unreachable!() };
            let pred = members[b].predict_batch(&test_designs[l]);
            let dp = pred.column(0) - test.labels_branch_p.column(l);
            let dq = pred.column(1) - test.labels_branch_q.column(l);
            sum_p += (dp.norm_squared() / m_test).sqrt();
            sum_q += (dq.norm_squared() / m_test).sqrt();
        }
        let l_total = case.n_branches() as f64;
        scatter.push(MemberPoint { member: b, family: Family::BranchP, rmse: sum_p / l_total });
        scatter.push(MemberPoint { member: b, family: Family::BranchQ, rmse: sum_q / l_total });
    }

    let mut prefixes: Vec<Prefix> =
        maps.iter().map(|&map| Prefix::new(2, 4, None, map)).collect();
    let mut next = 0usize;
    for b in 0..bt_max {
        for (run, prefix) in runs.iter().zip(&mut prefixes) {
            let EnsembleModel::Bagged { members } = run else { unreachable!() };
            prefix.add_scaled(&members[b], 1.0);
        }
        if next < grid.len() && grid[next] == b + 1 {
            let scale = 1.0 / (b + 1) as f64;
            let models: Vec<LinearModel> = prefixes.iter().map(|p| p.model(scale)).collect();
            let (tr_p, tr_q) = assemble_branch_predictions(&models, &train_designs);
            let (te_p, te_q) = assemble_branch_predictions(&models, &test_designs);
            for (family, tr, te, truth_tr, truth_te) in [
                (Family::BranchP, &tr_p, &te_p, &train.labels_branch_p, &test.labels_branch_p),
                (Family::BranchQ, &tr_q, &te_q, &train.labels_branch_q, &test.labels_branch_q),
            ] {
                points.push(SweepPoint {
                    value: b + 1,
                    family,
                    split: SplitKind::Train,
                    rmse: rmse(tr, truth_tr),
                });
                points.push(SweepPoint {
                    value: b + 1,
                    family,
                    split: SplitKind::Test,
                    rmse: rmse(te, truth_te),
                });
            }
            next += 1;
        }
    }

    Ok(SweepCurve {
        case_name: case.name.clone(),
        parameter: SweepParameter::Bt,
        grid: grid.to_vec(),
        points,
        scatter,
    })
}
