//! Comparative harness: runs competing dimension-reduction pipelines over a
//! shared set of pseudo-observed rows, reports mean RSSE relative to the
//! rejection baseline, and houses the collinearity/condition-number
//! diagnostic.

use crate::error::{AbcError, Result};
use crate::projection::{
    choose_pls_components, equalised_acceptance_fraction, fit_pls, fit_posterior_loss,
    pls_projection, BasisSpec,
};
use crate::regression::{
    adjust, adjusted_rejection, fit_neural_net, fit_ridge, fit_variance_model, fit_wls_min_norm,
    median_aggregate_predictions, standardised_obs, AdjustedSample, AdjustmentKind, DesignMatrix,
};
use crate::sampler::rejection_abc;
use crate::selection::{
    epsilon_sufficiency_test, information_criterion, minimum_entropy_mask, rsse, subset_search,
    EntropyStageConfig, IcVariant, SearchMode, SelectionResult,
};
use crate::table::{Observation, ReferenceTable, SubsetMask};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Reported condition number when the weighted Gram matrix is numerically
/// singular.
pub const KAPPA_SENTINEL: f64 = 1e25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionKind {
    None,
    Aic,
    Aicc,
    Bic,
    EpsSufficiency,
    Entropy,
    Pls,
    PosteriorLoss,
    Ridge,
}

impl ReductionKind {
    pub fn id(&self) -> &'static str {
        match self {
            ReductionKind::None => "none",
            ReductionKind::Aic => "aic",
            ReductionKind::Aicc => "aicc",
            ReductionKind::Bic => "bic",
            ReductionKind::EpsSufficiency => "eps-sufficiency",
            ReductionKind::Entropy => "entropy",
            ReductionKind::Pls => "pls",
            ReductionKind::PosteriorLoss => "posterior-loss",
            ReductionKind::Ridge => "ridge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    Wls,
    Ridge,
    NeuralNet,
}

/// Tuning knobs shared across pipeline stages; every field has a sensible
/// default so configs only name what they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Ridge penalties (also the pool the neural-net decay is drawn from).
    pub lambda_grid: Vec<f64>,
    /// Hidden units; defaults to the parameter dimension.
    pub hidden_units: Option<usize>,
    /// Neural-net fits aggregated by the pointwise median.
    pub restarts: usize,
    /// Bin count of the epsilon-sufficiency posterior grid.
    pub grid_size: usize,
    /// Standard-error multiplier of the epsilon-sufficiency test.
    pub threshold_multiplier: f64,
    /// Fixed PLS component count; cross-validated elbow when absent.
    pub n_components: Option<usize>,
    /// Basis id for posterior-loss summaries ("identity" | "powers" |
    /// "log-powers"); defaults to powers.
    pub basis: Option<String>,
    /// Training share of the posterior-loss split.
    pub split_fraction: f64,
    /// Largest p searched exhaustively; greedy forward search beyond.
    pub max_exhaustive_p: usize,
    /// Neighbour order of the entropy estimator.
    pub entropy_k: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_grid: vec![1e-3, 1e-2, 1e-1],
            hidden_units: None,
            restarts: 10,
            grid_size: 50,
            threshold_multiplier: 4.0,
            n_components: None,
            basis: None,
            split_fraction: 0.1,
            max_exhaustive_p: 15,
            entropy_k: 4,
        }
    }
}

/// One column of the comparison: a reduction rule, an adjustment level and the
/// regression family carrying it out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub reduction: ReductionKind,
    pub adjustment: AdjustmentKind,
    #[serde(default = "default_regressor")]
    pub regressor: RegressorKind,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

fn default_regressor() -> RegressorKind {
    RegressorKind::Wls
}

impl PipelineSpec {
    /// The reference column: every statistic, plain rejection.
    pub fn baseline() -> Self {
        Self {
            reduction: ReductionKind::None,
            adjustment: AdjustmentKind::None,
            regressor: RegressorKind::Wls,
            hyperparams: Hyperparams::default(),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.reduction == ReductionKind::None && self.adjustment == AdjustmentKind::None
    }

    pub fn validate(&self, q: usize, p: usize) -> Result<()> {
        let h = &self.hyperparams;
        if self.reduction == ReductionKind::Ridge && self.regressor != RegressorKind::Ridge {
            return Err(AbcError::Config(
                "ridge reduction keeps every statistic and relies on the ridge regressor; \
                 set regressor = \"ridge\""
                    .into(),
            ));
        }
        if self.reduction == ReductionKind::EpsSufficiency && q != 1 {
            return Err(AbcError::Config(
                "eps-sufficiency reduction is defined for univariate parameters only".into(),
            ));
        }
        if self.adjustment != AdjustmentKind::None
            && matches!(self.regressor, RegressorKind::Ridge | RegressorKind::NeuralNet)
        {
            if h.lambda_grid.is_empty() {
                return Err(AbcError::Config("lambda_grid must be nonempty".into()));
            }
            if h.lambda_grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return Err(AbcError::Config("lambda_grid entries must be finite and > 0".into()));
            }
        }
        if self.regressor == RegressorKind::NeuralNet && h.restarts == 0 {
            return Err(AbcError::Config("neural-net regressor needs restarts >= 1".into()));
        }
        if h.hidden_units == Some(0) {
            return Err(AbcError::Config("hidden_units must be >= 1 when given".into()));
        }
        if self.reduction == ReductionKind::EpsSufficiency {
            if h.grid_size < 2 {
                return Err(AbcError::Config("grid_size must be at least 2".into()));
            }
            if !(h.threshold_multiplier > 0.0) {
                return Err(AbcError::Config("threshold_multiplier must be > 0".into()));
            }
        }
        if self.reduction == ReductionKind::PosteriorLoss {
            if !(h.split_fraction > 0.0 && h.split_fraction < 1.0) {
                return Err(AbcError::Config("split_fraction must lie in (0, 1)".into()));
            }
            if let Some(id) = &h.basis {
                BasisSpec::from_id(id)?;
            }
        }
        if self.reduction == ReductionKind::Pls && h.n_components == Some(0) {
            return Err(AbcError::Config("n_components must be >= 1 when given".into()));
        }
        if h.max_exhaustive_p == 0 {
            return Err(AbcError::Config("max_exhaustive_p must be >= 1".into()));
        }
        if self.reduction == ReductionKind::Entropy && h.entropy_k == 0 {
            return Err(AbcError::Config("entropy_k must be >= 1".into()));
        }
        let _ = p;
        Ok(())
    }
}

/// One leave-one-out pipeline execution. Subset-selection reductions carry
/// their search trace for reporting.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub sample: AdjustedSample,
    pub selection: Option<SelectionResult>,
    pub criterion_id: Option<String>,
    /// Mask actually used for rejection, on the working statistic space.
    pub mask: SubsetMask,
}

fn mix_seed(seed: u64, row: usize) -> u64 {
    // splitmix-style mix so per-row seeds do not collide across nearby rows
    let mut z = seed ^ (row as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs one pipeline at one pseudo-observed row. The row is removed from the
/// reference table for its own evaluation so the exact self-match cannot
/// contaminate the accepted set.
pub fn run_pipeline(
    table: &ReferenceTable,
    row: usize,
    spec: &PipelineSpec,
    acceptance_fraction: f64,
    seed: u64,
) -> Result<PipelineRun> {
    if row >= table.n() {
        return Err(AbcError::InvalidInput("pseudo-observation row out of range".into()));
    }
    spec.validate(table.q(), table.p())?;
    let reduced = table.without_row(row);
    let obs = table.observation_from_row(row);
    let h = &spec.hyperparams;
    let run_seed = mix_seed(seed, row);

    // reduction stage: a mask over the original statistics, or a derived
    // working table for the projection methods
    let mut selection = None;
    let mut criterion_id = None;
    let mut working = reduced;
    let mut working_obs = obs;
    let mut fraction = acceptance_fraction;
    let p = working.p();
    let mask = match spec.reduction {
        ReductionKind::None | ReductionKind::Ridge => SubsetMask::all(p),
        ReductionKind::Aic | ReductionKind::Aicc | ReductionKind::Bic => {
            let variant = match spec.reduction {
                ReductionKind::Aic => IcVariant::Aic,
                ReductionKind::Aicc => IcVariant::Aicc,
                _ => IcVariant::Bic,
            };
            let scorer = |m: &SubsetMask| {
                information_criterion(&working, &working_obs, m, fraction, variant)
                    .map(|s| s.value)
                    .unwrap_or(f64::INFINITY)
            };
            let mode = if p <= h.max_exhaustive_p {
                SearchMode::Exhaustive
            } else {
                SearchMode::Forward
            };
            let sel = subset_search(&scorer, p, mode, h.max_exhaustive_p)?;
            let best = sel.best_mask.clone();
            criterion_id = Some(variant.id().to_string());
            selection = Some(sel);
            best
        }
        ReductionKind::EpsSufficiency => {
            let mut base = SubsetMask::singleton(p, 0);
            for j in 1..p {
                let out = epsilon_sufficiency_test(
                    &working,
                    &working_obs,
                    &base,
                    j,
                    fraction,
                    h.grid_size,
                    h.threshold_multiplier,
                )?;
                if out.accepted {
                    base = base.with(j);
                }
            }
            base
        }
        ReductionKind::Entropy => {
            let cfg = EntropyStageConfig {
                acceptance_fraction: fraction,
                k: h.entropy_k,
                n_star: 0,
                max_exhaustive_p: h.max_exhaustive_p,
            };
            let sel = minimum_entropy_mask(&working, &working_obs, &cfg)?;
            let best = sel.best_mask.clone();
            criterion_id = Some("entropy".to_string());
            selection = Some(sel);
            best
        }
        ReductionKind::Pls => {
            let map = match h.n_components {
                Some(k) => {
                    pls_projection(working.stats(), working.params(), k, working.stat_names())?
                }
                None => {
                    let fit = fit_pls(working.stats(), working.params(), p, working.stat_names())?;
                    let k = choose_pls_components(&fit.rmse, 0.01)?;
                    fit.maps[k - 1].clone()
                }
            };
            let derived = map.apply_rows(working.stats())?;
            let names =
                working.param_names().iter().map(|n| format!("pls_{n}")).collect::<Vec<_>>();
            working_obs = Observation::new(map.apply(&working_obs.s_obs)?);
            working = working.with_stats(derived, names)?;
            SubsetMask::all(working.p())
        }
        ReductionKind::PosteriorLoss => {
            let basis = match &h.basis {
                Some(id) => BasisSpec::from_id(id)?,
                None => BasisSpec::Powers,
            };
            let plf = fit_posterior_loss(&working, h.split_fraction, basis, run_seed)?;
            fraction =
                equalised_acceptance_fraction(working.n(), plf.heldout.n(), acceptance_fraction);
            working_obs = Observation::new(plf.map.apply(&working_obs.s_obs)?);
            working = plf.heldout;
            SubsetMask::all(working.p())
        }
    };

    let sample = match (spec.adjustment, spec.regressor) {
        (AdjustmentKind::None, _) | (_, RegressorKind::Wls) => {
            adjusted_rejection(&working, &working_obs, &mask, spec.adjustment, fraction)?
        }
        (kind, regressor) => {
            adjust_with_regressor(&working, &working_obs, &mask, kind, regressor, fraction, h, run_seed)?
        }
    };
    Ok(PipelineRun { sample, selection, criterion_id, mask })
}

/// Regression adjustment by the ridge or neural-net family: fits over the
/// lambda grid (or the restart draws), aggregates the conditional mean (and,
/// for the heteroscedastic variant, the conditional sd) by the pointwise
/// median, then applies the usual adjustment identity.
#[allow(clippy::too_many_arguments)]
fn adjust_with_regressor(
    working: &ReferenceTable,
    obs: &Observation,
    mask: &SubsetMask,
    kind: AdjustmentKind,
    regressor: RegressorKind,
    fraction: f64,
    h: &Hyperparams,
    seed: u64,
) -> Result<AdjustedSample> {
    let sample = rejection_abc(working, obs, mask, fraction)?;
    let scales = working.standardisation();
    let design = DesignMatrix::from_accepted(working, &sample, mask, scales);
    let w = sample.fitting_weights();
    let preds = design.predictors();
    let sobs = standardised_obs(obs, mask, scales);
    let hetero = kind == AdjustmentKind::Heteroscedastic;

    let mut mean_rows = Vec::new();
    let mut mean_obs = Vec::new();
    let mut sig_rows = Vec::new();
    let mut sig_obs = Vec::new();
    match regressor {
        RegressorKind::Ridge => {
            for &lambda in &h.lambda_grid {
                let fit = fit_ridge(&design, &sample.thetas, &w, lambda)?;
                let fitted = fit.predict_rows(&preds);
                mean_obs.push(row_matrix(&fit.predict(&sobs)));
                if hetero {
                    let resid = &sample.thetas - &fitted;
                    let vfit = fit_variance_model(&design, &resid, &w, Some(lambda))?;
                    sig_rows.push(vfit.predict_sigma_rows(&preds));
                    sig_obs.push(row_matrix(&vfit.predict_sigma(&sobs)));
                }
                mean_rows.push(fitted);
            }
        }
        RegressorKind::NeuralNet => {
            let hidden = h.hidden_units.unwrap_or_else(|| working.q().max(1));
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for r in 0..h.restarts {
                let lambda = h.lambda_grid[rng.gen_range(0..h.lambda_grid.len())];
                let fit = fit_neural_net(
                    &design,
                    &sample.thetas,
                    &w,
                    hidden,
                    lambda,
                    1,
                    seed.wrapping_add(r as u64),
                )?;
                let fitted = fit.predict_rows(&preds);
                mean_obs.push(row_matrix(&fit.predict(&sobs)));
                if hetero {
                    let resid = &sample.thetas - &fitted;
                    let log_sq = resid.map(|v| (v * v).max(1e-300).ln());
                    let vfit = fit_neural_net(
                        &design,
                        &log_sq,
                        &w,
                        hidden,
                        lambda,
                        1,
                        seed.wrapping_add(1000 + r as u64),
                    )?;
                    sig_rows.push(vfit.predict_rows(&preds).map(|v| (0.5 * v).exp()));
                    sig_obs.push(row_matrix(&vfit.predict(&sobs).map(|v| (0.5 * v).exp())));
                }
                mean_rows.push(fitted);
            }
        }
        RegressorKind::Wls => unreachable!("handled by adjusted_rejection"),
    }

    let fitted = median_aggregate_predictions(&mean_rows)?;
    let obs_pred = median_aggregate_predictions(&mean_obs)?.row(0).transpose();
    if hetero {
        let s_rows = median_aggregate_predictions(&sig_rows)?;
        let s_obs = median_aggregate_predictions(&sig_obs)?.row(0).transpose();
        adjust(&sample, &fitted, &obs_pred, Some((&s_rows, &s_obs)))
    } else {
        adjust(&sample, &fitted, &obs_pred, None)
    }
}

fn row_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(1, v.len(), |_, j| v[j])
}

/// One pipeline's aggregate over the shared pseudo-observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub params: String,
    pub reduction: String,
    pub adjustment: String,
    pub mean_rsse: f64,
    pub relative_pct: f64,
    /// Median accepted-set size over the successful runs.
    pub n_eff: usize,
    pub flags: String,
}

/// League table over pipelines, plus the per-pseudo-observation scores the
/// means were taken from (None where a run failed).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub pseudo_rows: Vec<usize>,
    pub scores: Vec<Vec<Option<f64>>>,
}

impl EvaluationReport {
    /// Percentages to one decimal; positive means worse than baseline.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["params", "reduction", "adjustment", "mean_rsse", "relative_pct", "n_eff", "flags"])?;
        for r in &self.rows {
            wtr.write_record([
                r.params.clone(),
                r.reduction.clone(),
                r.adjustment.clone(),
                format!("{:.6}", r.mean_rsse),
                format!("{:.1}", r.relative_pct),
                format!("{}", r.n_eff),
                r.flags.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// The shared pseudo-observation draw: n_star distinct rows, in index order.
pub fn draw_pseudo_rows(n: usize, n_star: usize, seed: u64) -> Result<Vec<usize>> {
    if n_star == 0 || n_star > n {
        return Err(AbcError::InvalidInput("n_star must lie in 1..=n".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, n, n_star).into_vec();
    rows.sort_unstable();
    Ok(rows)
}

/// Runs every pipeline over the same seeded pseudo-observation set and
/// reports mean RSSE relative to the all-statistics rejection baseline
/// (prepended automatically when absent). A pipeline failing on more than 10%
/// of its runs gets an `incomplete` flag instead of aborting the report.
pub fn run_comparison(
    table: &ReferenceTable,
    pipelines: &[PipelineSpec],
    n_star: usize,
    acceptance_fraction: f64,
    seed: u64,
) -> Result<EvaluationReport> {
    if pipelines.is_empty() {
        return Err(AbcError::InvalidInput("run_comparison needs at least one pipeline".into()));
    }
    if !(acceptance_fraction > 0.0 && acceptance_fraction <= 1.0) {
        return Err(AbcError::InvalidInput("acceptance_fraction must lie in (0, 1]".into()));
    }
    for spec in pipelines {
        spec.validate(table.q(), table.p())?;
    }
    let mut specs: Vec<PipelineSpec> = Vec::new();
    if !pipelines.iter().any(|s| s.is_baseline()) {
        specs.push(PipelineSpec::baseline());
    }
    specs.extend_from_slice(pipelines);
    let baseline_idx = specs.iter().position(|s| s.is_baseline()).unwrap();

    let rows = draw_pseudo_rows(table.n(), n_star, seed)?;
    let param_scales = table.param_sds();
    let params_label = table.param_names().join("+");

    let mut all_scores: Vec<Vec<Option<f64>>> = Vec::with_capacity(specs.len());
    let mut all_neff: Vec<Vec<usize>> = Vec::with_capacity(specs.len());
    for spec in &specs {
        let outcomes: Vec<Option<(f64, usize)>> = rows
            .par_iter()
            .map(|&r| {
                run_pipeline(table, r, spec, acceptance_fraction, seed)
                    .and_then(|run| {
                        let u = run.sample.with_uniform_weights();
                        rsse(&u.thetas_star, &u.weights, &table.param_row(r), &param_scales)
                            .map(|v| (v, run.sample.n_eff()))
                    })
                    .ok()
            })
            .collect();
        all_scores.push(outcomes.iter().map(|o| o.map(|(v, _)| v)).collect());
        all_neff.push(outcomes.iter().flatten().map(|&(_, ne)| ne).collect());
    }

    let mean_of = |scores: &[Option<f64>]| -> (f64, usize) {
        let ok: Vec<f64> = scores.iter().flatten().copied().collect();
        let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
        (mean, scores.len() - ok.len())
    };
    let (baseline_mean, _) = mean_of(&all_scores[baseline_idx]);

    let mut report_rows = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (mean, failures) = mean_of(&all_scores[i]);
        let relative = if i == baseline_idx {
            0.0
        } else {
            100.0 * (mean / baseline_mean - 1.0)
        };
        let mut neffs = all_neff[i].clone();
        neffs.sort_unstable();
        let n_eff = neffs.get(neffs.len() / 2).copied().unwrap_or(0);
        let flags = if failures == 0 {
            String::new()
        } else if failures * 10 > rows.len() {
            format!("incomplete({failures}/{})", rows.len())
        } else {
            format!("partial({failures}/{})", rows.len())
        };
        report_rows.push(ReportRow {
            params: params_label.clone(),
            reduction: spec.reduction.id().to_string(),
            adjustment: spec.adjustment.id().to_string(),
            mean_rsse: mean,
            relative_pct: relative,
            n_eff,
            flags,
        });
    }
    Ok(EvaluationReport { rows: report_rows, pseudo_rows: rows, scores: all_scores })
}

/// kappa = sqrt(lambda_max / lambda_min) of the weighted Gram matrix X'WX.
/// A numerically non-positive smallest eigenvalue yields [`KAPPA_SENTINEL`].
pub fn condition_number(design: &DesignMatrix, weights: &DVector<f64>) -> f64 {
    let m = design.nrows();
    let cols = design.k() + 1;
    let mut a = design.matrix().clone();
    for i in 0..m.min(weights.len()) {
        a.row_mut(i).scale_mut(weights[i].max(0.0).sqrt());
    }
    let gram = a.transpose() * a;
    let eig = gram.symmetric_eigen();
    let l_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let l_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = l_max.max(0.0) * (m.max(cols) as f64) * f64::EPSILON;
    if !(l_max > 0.0) || l_min <= tol {
        return KAPPA_SENTINEL;
    }
    (l_max / l_min).sqrt().max(1.0)
}

/// One pseudo-observation of the collinearity experiment: design conditioning
/// and how much each adjustment moved the error relative to plain rejection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub kappa: f64,
    pub rel_rsse_wls: f64,
    pub rel_rsse_ridge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionDiagnostic {
    pub rows: Vec<ConditionRow>,
    pub pseudo_rows: Vec<usize>,
}

impl ConditionDiagnostic {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["kappa", "rel_rsse_wls", "rel_rsse_ridge"])?;
        for r in &self.rows {
            wtr.write_record([
                format!("{:e}", r.kappa),
                format!("{:.1}", r.rel_rsse_wls),
                format!("{:.1}", r.rel_rsse_ridge),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Normal-equations least squares: fitted values over the design rows plus
/// the prediction at the observation. None when the LU solve fails outright.
fn naive_wls_predictions(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    sobs: &DVector<f64>,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let m = design.nrows();
    let mut a = design.matrix().clone();
    let mut b = targets.clone();
    for i in 0..m {
        let sw = weights[i].max(0.0).sqrt();
        a.row_mut(i).scale_mut(sw);
        b.row_mut(i).scale_mut(sw);
    }
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * b;
    let coef = gram.lu().solve(&rhs)?;
    if coef.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let fitted = design.matrix() * &coef;
    let k = design.k();
    let q = coef.ncols();
    let obs_pred = DVector::from_fn(q, |l, _| {
        coef[(0, l)] + (0..k).map(|j| sobs[j] * coef[(j + 1, l)]).sum::<f64>()
    });
    Some((fitted, obs_pred))
}

/// Per pseudo-observation: the condition number of the accepted weighted
/// design over all statistics, and the relative RSSE (vs unadjusted
/// rejection, percent) of the WLS- and ridge-adjusted posteriors, the ridge
/// arm median-aggregated over the lambda grid. Meant for
/// tables that deliberately carry near-collinear statistics.
pub fn collinearity_experiment(
    table: &ReferenceTable,
    n_pseudo: usize,
    lambdas: &[f64],
    acceptance_fraction: f64,
    seed: u64,
) -> Result<ConditionDiagnostic> {
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(AbcError::InvalidInput(
            "collinearity experiment needs a nonempty grid of lambdas > 0".into(),
        ));
    }
    let rows = draw_pseudo_rows(table.n(), n_pseudo, seed)?;
    let param_scales = table.param_sds();
    let mask = SubsetMask::all(table.p());
    let out: Vec<ConditionRow> = rows
        .par_iter()
        .map(|&r| {
            let reduced = table.without_row(r);
            let obs = table.observation_from_row(r);
            let theta_true = table.param_row(r);
            let sample = rejection_abc(&reduced, &obs, &mask, acceptance_fraction)?;
            let scales = reduced.standardisation();
            let design = DesignMatrix::from_accepted(&reduced, &sample, &mask, scales);
            let w = sample.fitting_weights();
            let kappa = condition_number(&design, &w);

            let uniform_rsse = |s: &AdjustedSample| {
                let u = s.with_uniform_weights();
                rsse(&u.thetas_star, &u.weights, &theta_true, &param_scales)
            };
            let base = uniform_rsse(&AdjustedSample::unadjusted(&sample))?;

            let preds = design.predictors();
            let sobs = standardised_obs(&obs, &mask, &scales);
            // the unregularised arm deliberately solves the normal equations:
            // a rank-revealing solver would mask exactly the instability this
            // diagnostic measures
            let wls_adj = match naive_wls_predictions(&design, &sample.thetas, &w, &sobs) {
                Some((fitted, obs_pred)) => adjust(&sample, &fitted, &obs_pred, None)?,
                None => {
                    let f = fit_wls_min_norm(&design, &sample.thetas, &w)?;
                    adjust(&sample, &f.predict_rows(&preds), &f.predict(&sobs), None)?
                }
            };
            let mut ridge_rows = Vec::with_capacity(lambdas.len());
            let mut ridge_obs = Vec::with_capacity(lambdas.len());
            for &lambda in lambdas {
                let fit = fit_ridge(&design, &sample.thetas, &w, lambda)?;
                ridge_rows.push(fit.predict_rows(&preds));
                ridge_obs.push(row_matrix(&fit.predict(&sobs)));
            }
            let ridge_adj = adjust(
                &sample,
                &median_aggregate_predictions(&ridge_rows)?,
                &median_aggregate_predictions(&ridge_obs)?.row(0).transpose(),
                None,
            )?;

            Ok(ConditionRow {
                kappa,
                rel_rsse_wls: 100.0 * (uniform_rsse(&wls_adj)? / base - 1.0),
                rel_rsse_ridge: 100.0 * (uniform_rsse(&ridge_adj)? / base - 1.0),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConditionDiagnostic { rows: out, pseudo_rows: rows })
}
