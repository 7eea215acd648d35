//! Best-subset machinery: information-criterion scoring of statistic subsets,
//! the epsilon-sufficiency candidate test, the weighted k-NN entropy criterion
//! with its two-stage mean-RSSE refinement, and exhaustive/greedy search
//! drivers.
//!
//! Epsilon is recalibrated on every candidate subset at the same acceptance
//! fraction, so the effective sample size is constant (up to distance ties)
//! across all masks scored in one run and the criteria stay comparable.

use crate::error::{AbcError, Result};
use crate::regression::{
    adjusted_rejection, fit_wls, AdjustmentKind, DesignMatrix,
};
use crate::sampler::rejection_abc;
use crate::table::{self, Observation, ReferenceTable, SubsetMask, WeightedSample};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};
use std::io::Write;

/// Criterion family. `AiccConventional` applies the standard small-sample
/// correction (an additive term on top of AIC); `Aicc` replaces the AIC
/// penalty count outright, which is the convention the rest of this crate
/// follows by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcVariant {
    Aic,
    Aicc,
    AiccConventional,
    Bic,
}

impl IcVariant {
    pub fn id(&self) -> &'static str {
        match self {
            IcVariant::Aic => "AIC",
            IcVariant::Aicc => "AICc",
            IcVariant::AiccConventional => "AICc-conventional",
            IcVariant::Bic => "BIC",
        }
    }
}

/// A scored criterion evaluation; lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionScore {
    pub value: f64,
    pub criterion_id: String,
    pub n_eff: usize,
    /// Weighted mean squared residual per parameter.
    pub sigma2: Vec<f64>,
    /// Number of estimated regression parameters, q * (k_mask + 1).
    pub d: usize,
}

/// Criterion value from its ingredients: goodness term n_eff * sum_j log
/// sigma2_j plus the variant's penalty.
pub fn criterion_value(variant: IcVariant, n_eff: usize, sigma2: &[f64], d: usize) -> f64 {
    let n = n_eff as f64;
    let df = d as f64;
    let goodness: f64 = n * sigma2.iter().map(|&s| s.max(1e-300).ln()).sum::<f64>();
    let penalty = match variant {
        IcVariant::Aic => 2.0 * df,
        IcVariant::Aicc => 2.0 * df * (df + 1.0) / (n - df - 1.0),
        IcVariant::AiccConventional => 2.0 * df + 2.0 * df * (df + 1.0) / (n - df - 1.0),
        IcVariant::Bic => df * n.ln(),
    };
    goodness + penalty
}

/// Scores a statistic subset: epsilon is recalibrated on the masked distances
/// at the given acceptance fraction, a homoscedastic WLS mean model is fitted
/// per parameter on the accepted rows, and the criterion combines the weighted
/// residual variances with the parameter-count penalty.
///
/// A singular design on the subset yields an infinite score rather than an
/// error so search traces stay complete.
pub fn information_criterion(
    table: &ReferenceTable,
    obs: &Observation,
    mask: &SubsetMask,
    acceptance_fraction: f64,
    variant: IcVariant,
) -> Result<CriterionScore> {
    if mask.count() == 0 {
        return Err(AbcError::InvalidInput("criterion scoring needs a nonempty mask".into()));
    }
    let scales = table.standardisation();
    let dists = table::distances(table, obs, scales, mask)?;
    let kernel = table::calibrate_epsilon(&dists, acceptance_fraction)?;
    let weights = table::kernel_weights(&dists, &kernel)?;
    let sample = table::assemble_sample(table, &weights)?;
    let n_eff = sample.n_eff();
    let q = sample.q();
    let d = q * (mask.count() + 1);
    if matches!(variant, IcVariant::Aicc | IcVariant::AiccConventional) && n_eff <= d + 2 {
        return Err(AbcError::InvalidInput(format!(
            "AICc needs n_eff > d + 2 (n_eff = {n_eff}, d = {d})"
        )));
    }
    let design = DesignMatrix::from_accepted(table, &sample, mask, &scales);
    let fit = match fit_wls(&design, &sample.thetas, &sample.weights) {
        Ok(f) => f,
        Err(AbcError::SingularDesign { .. }) => {
            return Ok(CriterionScore {
                value: f64::INFINITY,
                criterion_id: variant.id().to_string(),
                n_eff,
                sigma2: vec![f64::INFINITY; q],
                d,
            });
        }
        Err(e) => return Err(e),
    };
    let fitted = fit.predict_rows(&design.predictors());
    let wsum: f64 = sample.weights.sum();
    let sigma2: Vec<f64> = (0..q)
        .map(|j| {
            (0..n_eff)
                .map(|i| sample.weights[i] * (sample.thetas[(i, j)] - fitted[(i, j)]).powi(2))
                .sum::<f64>()
                / wsum
        })
        .collect();
    Ok(CriterionScore {
        value: criterion_value(variant, n_eff, &sigma2, d),
        criterion_id: variant.id().to_string(),
        n_eff,
        sigma2,
        d,
    })
}

/// Outcome of the epsilon-sufficiency candidate test.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsSufficiencyOutcome {
    pub accepted: bool,
    /// Largest |ratio - 1| / threshold over usable bins; acceptance means
    /// this exceeds 1.
    pub score: f64,
    pub bins_used: usize,
    /// Set when every bin was skipped for insufficient base mass.
    pub degenerate: bool,
}

/// Tests whether adding one candidate statistic changes the (univariate)
/// posterior. Both posteriors are binned on a regular grid spanning the
/// parameter range seen in the table; the candidate is accepted when some
/// bin's mass ratio differs from one by more than `threshold_multiplier`
/// binomial standard errors of the base mass. Bins with base mass below
/// 5 / n_eff are skipped.
pub fn epsilon_sufficiency_test(
    table: &ReferenceTable,
    obs: &Observation,
    base_mask: &SubsetMask,
    candidate_index: usize,
    acceptance_fraction: f64,
    grid_size: usize,
    threshold_multiplier: f64,
) -> Result<EpsSufficiencyOutcome> {
    if table.q() != 1 {
        return Err(AbcError::InvalidInput(
            "epsilon-sufficiency testing handles univariate parameters only".into(),
        ));
    }
    if base_mask.indices().contains(&candidate_index) {
        return Err(AbcError::InvalidInput("candidate already in the base subset".into()));
    }
    if grid_size < 2 {
        return Err(AbcError::InvalidInput("grid_size must be at least 2".into()));
    }
    let base = rejection_abc(table, obs, base_mask, acceptance_fraction)?;
    let cand = rejection_abc(table, obs, &base_mask.with(candidate_index), acceptance_fraction)?;

    let col = table.params().column(0);
    let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(AbcError::InvalidInput("degenerate parameter range".into()));
    }
    let bin_of = |theta: f64| -> usize {
        let t = ((theta - lo) / (hi - lo) * grid_size as f64).floor() as isize;
        t.clamp(0, grid_size as isize - 1) as usize
    };
    let mass = |s: &WeightedSample| -> Vec<f64> {
        let mut m = vec![0.0; grid_size];
        for i in 0..s.n_eff() {
            m[bin_of(s.thetas[(i, 0)])] += s.weights[i];
        }
        m
    };
    let base_mass = mass(&base);
    let cand_mass = mass(&cand);
    let n_eff = base.n_eff() as f64;
    let min_mass = 5.0 / n_eff;

    let mut score = 0.0f64;
    let mut bins_used = 0;
    for b in 0..grid_size {
        let p = base_mass[b];
        if p < min_mass {
            continue;
        }
        bins_used += 1;
        let se = (p * (1.0 - p) / n_eff).sqrt();
        let threshold = threshold_multiplier * se / p;
        let deviation = (cand_mass[b] / p - 1.0).abs();
        if threshold > 0.0 {
            score = score.max(deviation / threshold);
        }
    }
    let degenerate = bins_used == 0;
    Ok(EpsSufficiencyOutcome { accepted: !degenerate && score > 1.0, score, bins_used, degenerate })
}

/// Additive constant log(pi^{q/2} / Gamma(q/2 + 1)) of the entropy estimator.
pub fn entropy_constant(q: usize) -> f64 {
    let h = q as f64 / 2.0;
    h * std::f64::consts::PI.ln() - ln_gamma(h + 1.0)
}

/// Weighted k-th-nearest-neighbour differential entropy estimate. For each
/// point the k-NN radius is read off the weighted empirical CDF of distances
/// to the other points (step-function inverse at k / (n_eff - 1), remaining
/// weights renormalised); with uniform weights this is exactly the k-th
/// nearest neighbour distance. Zero distances are floored at 1e-12.
pub fn knn_entropy(sample: &WeightedSample, k: usize) -> Result<f64> {
    let n = sample.n_eff();
    let q = sample.q();
    if n <= k {
        return Err(AbcError::InvalidInput(format!(
            "entropy estimation needs n_eff > k (n_eff = {n}, k = {k})"
        )));
    }
    if k == 0 {
        return Err(AbcError::InvalidInput("k must be positive".into()));
    }
    let u = k as f64 / (n as f64 - 1.0);
    let log_radius_sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            if sample.weights[i] == 0.0 {
                return 0.0;
            }
            let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let mut d2 = 0.0;
                for l in 0..q {
                    let diff = sample.thetas[(i, l)] - sample.thetas[(j, l)];
                    d2 += diff * diff;
                }
                pairs.push((d2.sqrt().max(1e-12), sample.weights[j]));
            }
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let renorm: f64 = pairs.iter().map(|p| p.1).sum();
            let mut cum = 0.0;
            let mut radius = pairs.last().unwrap().0;
            for (d, w) in &pairs {
                cum += w / renorm;
                // relative slack so accumulation rounding cannot push a point
                // sitting exactly on the step boundary to the next neighbour
                if cum >= u * (1.0 - 1e-9) {
                    radius = *d;
                    break;
                }
            }
            sample.weights[i] * radius.ln()
        })
        .sum();
    Ok(entropy_constant(q) - digamma(k as f64) + (n as f64).ln()
        + q as f64 * log_radius_sum / sample.weights.sum())
}

/// Root sum of squared standardised errors against a known truth. Weights
/// must be normalised to sum one.
pub fn rsse(
    thetas: &DMatrix<f64>,
    weights: &DVector<f64>,
    theta_true: &DVector<f64>,
    param_scales: &DVector<f64>,
) -> Result<f64> {
    let (m, q) = (thetas.nrows(), thetas.ncols());
    if weights.len() != m || theta_true.len() != q || param_scales.len() != q {
        return Err(AbcError::InvalidInput("rsse dimension mismatch".into()));
    }
    if (weights.sum() - 1.0).abs() > 1e-8 {
        return Err(AbcError::InvalidInput("rsse weights must sum to one".into()));
    }
    let mut acc = 0.0;
    for i in 0..m {
        let mut err2 = 0.0;
        for j in 0..q {
            let e = (thetas[(i, j)] - theta_true[j]) / param_scales[j];
            err2 += e * e;
        }
        acc += weights[i] * err2;
    }
    Ok(acc.sqrt())
}

/// Settings for the two-stage entropy procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStageConfig {
    pub acceptance_fraction: f64,
    /// Neighbour order of the entropy estimator.
    pub k: usize,
    /// Number of pseudo-observations in stage two.
    pub n_star: usize,
    pub max_exhaustive_p: usize,
}

impl Default for EntropyStageConfig {
    fn default() -> Self {
        Self { acceptance_fraction: 0.01, k: 4, n_star: 100, max_exhaustive_p: 15 }
    }
}

/// Stage-one search: the subset minimising the posterior entropy estimate at
/// the observation. Exhaustive for p within the budget, forward otherwise.
pub fn minimum_entropy_mask(
    table: &ReferenceTable,
    obs: &Observation,
    cfg: &EntropyStageConfig,
) -> Result<SelectionResult> {
    let p = table.p();
    let scorer = |mask: &SubsetMask| -> f64 {
        rejection_abc(table, obs, mask, cfg.acceptance_fraction)
            .and_then(|s| knn_entropy(&s, cfg.k))
            .unwrap_or(f64::INFINITY)
    };
    let mode = if p <= cfg.max_exhaustive_p { SearchMode::Exhaustive } else { SearchMode::Forward };
    subset_search(&scorer, p, mode, cfg.max_exhaustive_p)
}

/// Stage two of the entropy procedure: scores a candidate pipeline (mask plus
/// adjustment) by its average RSSE over the n_star simulations whose
/// minimum-entropy statistics lie closest to the observation's. Each
/// pseudo-observed row is left out of the reference table for its own run and
/// RSSE uses uniform weights over the accepted rows.
pub fn mean_rsse(
    table: &ReferenceTable,
    obs: &Observation,
    mask: &SubsetMask,
    adjustment: AdjustmentKind,
    cfg: &EntropyStageConfig,
) -> Result<f64> {
    if cfg.n_star == 0 || cfg.n_star > table.n() {
        return Err(AbcError::InvalidInput("n_star must be in 1..=n".into()));
    }
    let me = minimum_entropy_mask(table, obs, cfg)?;
    let rows = closest_rows(table, obs, &me.best_mask, cfg.n_star)?;
    mean_rsse_over_rows(table, &rows, mask, adjustment, cfg.acceptance_fraction)
}

/// The n_star row indices whose masked standardised statistics are closest to
/// the observation.
pub fn closest_rows(
    table: &ReferenceTable,
    obs: &Observation,
    mask: &SubsetMask,
    n_star: usize,
) -> Result<Vec<usize>> {
    let scales = table.standardisation();
    let dists = table::distances(table, obs, scales, mask)?;
    let mut idx: Vec<usize> = (0..table.n()).collect();
    idx.sort_by(|&a, &b| dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b)));
    idx.truncate(n_star);
    Ok(idx)
}

/// Average leave-one-out RSSE of a pipeline over the given pseudo-observed
/// rows, with uniform accepted weights and parameter scales taken over the
/// whole table.
pub fn mean_rsse_over_rows(
    table: &ReferenceTable,
    rows: &[usize],
    mask: &SubsetMask,
    adjustment: AdjustmentKind,
    acceptance_fraction: f64,
) -> Result<f64> {
    let param_scales = table.param_sds();
    let scores: Vec<f64> = rows
        .par_iter()
        .map(|&j| {
            let reduced = table.without_row(j);
            let pseudo_obs = table.observation_from_row(j);
            let adjusted =
                adjusted_rejection(&reduced, &pseudo_obs, mask, adjustment, acceptance_fraction)?
                    .with_uniform_weights();
            rsse(&adjusted.thetas_star, &adjusted.weights, &table.param_row(j), &param_scales)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Exhaustive,
    Forward,
    Backward,
}

/// A completed subset search: every scored mask in visit order plus the best.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub best_mask: SubsetMask,
    pub best_score: f64,
    pub trace: Vec<(SubsetMask, f64)>,
    pub search_kind: SearchMode,
}

impl SelectionResult {
    /// CSV rows: mask bitstring, criterion id, score.
    pub fn write_csv<W: Write>(&self, criterion_id: &str, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["mask", "criterion", "score"])?;
        for (mask, score) in &self.trace {
            wtr.write_record([mask.bitstring(), criterion_id.to_string(), format!("{score}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn pick_best(trace: &[(SubsetMask, f64)]) -> (SubsetMask, f64) {
    let best = trace
        .iter()
        .min_by(|a, b| {
            a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.bitstring().cmp(&b.0.bitstring()))
        })
        .expect("nonempty trace");
    (best.0.clone(), best.1)
}

/// Searches the nonempty subsets of p statistics under the given scorer
/// (lower is better). Exhaustive mode enumerates all 2^p - 1 masks; forward
/// grows from the best singleton while a strict improvement exists; backward
/// shrinks from the full mask. Candidates within a step are scored
/// concurrently and ties break towards the lexicographically smallest
/// bitstring.
pub fn subset_search<F>(
    scorer: &F,
    p: usize,
    mode: SearchMode,
    max_exhaustive_p: usize,
) -> Result<SelectionResult>
where
    F: Fn(&SubsetMask) -> f64 + Sync,
{
    if p == 0 {
        return Err(AbcError::InvalidInput("subset search needs p >= 1".into()));
    }
    let trace = match mode {
        SearchMode::Exhaustive => {
            if p > max_exhaustive_p {
                return Err(AbcError::InvalidInput(format!(
                    "exhaustive search limited to p <= {max_exhaustive_p}, got {p}"
                )));
            }
            let masks: Vec<SubsetMask> = (1u64..1 << p)
                .map(|bits| {
                    SubsetMask::from_indices(
                        p,
                        &(0..p).filter(|j| bits >> j & 1 == 1).collect::<Vec<_>>(),
                    )
                })
                .collect();
            let scores: Vec<f64> = masks.par_iter().map(|m| scorer(m)).collect();
            masks.into_iter().zip(scores).collect()
        }
        SearchMode::Forward => greedy(scorer, p, true),
        SearchMode::Backward => greedy(scorer, p, false),
    };
    let (best_mask, best_score) = pick_best(&trace);
    Ok(SelectionResult { best_mask, best_score, trace, search_kind: mode })
}

fn greedy<F>(scorer: &F, p: usize, forward: bool) -> Vec<(SubsetMask, f64)>
where
    F: Fn(&SubsetMask) -> f64 + Sync,
{
    let mut trace: Vec<(SubsetMask, f64)> = Vec::new();
    let step_candidates = |cands: Vec<SubsetMask>, trace: &mut Vec<(SubsetMask, f64)>| {
        let scores: Vec<f64> = cands.par_iter().map(|m| scorer(m)).collect();
        let scored: Vec<(SubsetMask, f64)> = cands.into_iter().zip(scores).collect();
        let best = pick_best(&scored);
        trace.extend(scored);
        best
    };

    let (mut current, mut current_score) = if forward {
        let singletons = (0..p).map(|j| SubsetMask::singleton(p, j)).collect();
        step_candidates(singletons, &mut trace)
    } else {
        let full = SubsetMask::all(p);
        let s = scorer(&full);
        trace.push((full.clone(), s));
        (full, s)
    };

    loop {
        let cands: Vec<SubsetMask> = if forward {
            (0..p)
                .filter(|&j| !current.indices().contains(&j))
                .map(|j| current.with(j))
                .collect()
        } else {
            if current.count() <= 1 {
                break;
            }
            current.indices().into_iter().map(|j| current.without(j)).collect()
        };
        if cands.is_empty() {
            break;
        }
        let (mask, score) = step_candidates(cands, &mut trace);
        if score < current_score {
            current = mask;
            current_score = score;
        } else {
            break;
        }
    }
    trace
}
