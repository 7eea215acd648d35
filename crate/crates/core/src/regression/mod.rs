//! Regression-adjustment machinery: weighted least squares, ridge
//! regularisation, the log-variance model for heteroscedastic adjustment, and
//! the single-hidden-layer neural network (see [`neural`]).

pub mod neural;

pub use neural::{fit_neural_net, NeuralNetFit};

use crate::error::{AbcError, Result};
use crate::table::{Observation, ReferenceTable, StandardisationSpec, SubsetMask, WeightedSample};
use nalgebra::{DMatrix, DVector};

/// Regression design: first column all ones, remaining columns the
/// (standardised) selected statistics of the accepted simulations.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
}

impl DesignMatrix {
    /// Prepends the intercept column to an m x k predictor block.
    pub fn from_predictors(predictors: &DMatrix<f64>) -> Self {
        let (m, k) = (predictors.nrows(), predictors.ncols());
        let x = DMatrix::from_fn(m, k + 1, |i, j| if j == 0 { 1.0 } else { predictors[(i, j - 1)] });
        Self { x }
    }

    /// Design over the accepted rows of a weighted sample, statistics divided
    /// by their MAD scales.
    pub fn from_accepted(
        table: &ReferenceTable,
        sample: &WeightedSample,
        mask: &SubsetMask,
        scales: &StandardisationSpec,
    ) -> Self {
        let idx = mask.indices();
        let preds = DMatrix::from_fn(sample.n_eff(), idx.len(), |i, j| {
            let row = sample.source_rows[i];
            table.stats()[(row, idx[j])] / scales.scales[idx[j]]
        });
        Self::from_predictors(&preds)
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    /// Number of non-intercept predictors.
    pub fn k(&self) -> usize {
        self.x.ncols() - 1
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn predictors(&self) -> DMatrix<f64> {
        self.x.columns(1, self.k()).into()
    }

    pub fn predictor_row(&self, i: usize) -> DVector<f64> {
        DVector::from_fn(self.k(), |j, _| self.x[(i, j + 1)])
    }
}

/// The observation's predictor vector on the same standardised scale as
/// [`DesignMatrix::from_accepted`].
pub fn standardised_obs(
    obs: &Observation,
    mask: &SubsetMask,
    scales: &StandardisationSpec,
) -> DVector<f64> {
    let idx = mask.indices();
    DVector::from_fn(idx.len(), |j, _| obs.s_obs[idx[j]] / scales.scales[idx[j]])
}

/// Fitted linear mean model, one regression per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    /// Intercept per parameter (length q).
    pub alpha: DVector<f64>,
    /// Coefficients, q x k.
    pub beta: DMatrix<f64>,
    /// Regularisation parameter used (0 for plain WLS).
    pub lambda: f64,
    /// Set when the design was rank deficient and a minimum-norm solution was
    /// returned instead.
    pub rank_deficient: bool,
    /// Condition number of the weighted design (singular-value ratio).
    pub condition: f64,
}

impl LinearFit {
    pub fn q(&self) -> usize {
        self.alpha.len()
    }

    pub fn predict(&self, predictors: &DVector<f64>) -> DVector<f64> {
        &self.alpha + &self.beta * predictors
    }

    /// Predictions for every row of an m x k predictor block (m x q output).
    pub fn predict_rows(&self, predictors: &DMatrix<f64>) -> DMatrix<f64> {
        let m = predictors.nrows();
        let mut out = DMatrix::zeros(m, self.q());
        for i in 0..m {
            let p = self.predict(&predictors.row(i).transpose());
            out.row_mut(i).copy_from(&p.transpose());
        }
        out
    }
}

fn check_fit_inputs(design: &DesignMatrix, targets: &DMatrix<f64>, weights: &DVector<f64>) -> Result<()> {
    if targets.nrows() != design.nrows() || weights.len() != design.nrows() {
        return Err(AbcError::InvalidInput("design/target/weight row mismatch".into()));
    }
    if weights.iter().any(|&w| w < 0.0) || weights.iter().all(|&w| w == 0.0) {
        return Err(AbcError::InvalidInput(
            "weights must be non-negative and not all zero".into(),
        ));
    }
    Ok(())
}

fn wls_svd(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<(DMatrix<f64>, bool, f64)> {
    check_fit_inputs(design, targets, weights)?;
    let m = design.nrows();
    let cols = design.k() + 1;
    let sw = weights.map(|w| w.sqrt());
    let mut a = design.matrix().clone();
    let mut b = targets.clone();
    for i in 0..m {
        a.row_mut(i).scale_mut(sw[i]);
        b.row_mut(i).scale_mut(sw[i]);
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let max_sv = sv.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let tol = max_sv * (m.max(cols) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let condition = if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY };
    // Minimum-norm solve: truncate singular values at the rank threshold.
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let utb = u.transpose() * b;
    let mut scaled = utb;
    for r in 0..sv.len() {
        let f = if sv[r] > tol { 1.0 / sv[r] } else { 0.0 };
        scaled.row_mut(r).scale_mut(f);
    }
    let coeffs = vt.transpose() * scaled; // (k+1) x q
    Ok((coeffs, rank < cols, condition))
}

fn coeffs_to_fit(coeffs: &DMatrix<f64>, lambda: f64, rank_deficient: bool, condition: f64) -> LinearFit {
    let q = coeffs.ncols();
    let k = coeffs.nrows() - 1;
    let alpha = coeffs.row(0).transpose();
    let beta = DMatrix::from_fn(q, k, |l, j| coeffs[(j + 1, l)]);
    LinearFit { alpha, beta, lambda, rank_deficient, condition }
}

/// Weighted least squares, minimising sum_i w_i ||m(s_i) - theta_i||^2.
///
/// Solved through a rank-revealing SVD of the weighted design; a singular
/// design is an error carrying the condition-number diagnostic. Use
/// [`fit_wls_min_norm`] where the run must proceed regardless.
pub fn fit_wls(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<LinearFit> {
    let (coeffs, rank_deficient, condition) = wls_svd(design, targets, weights)?;
    if rank_deficient {
        return Err(AbcError::SingularDesign { condition });
    }
    Ok(coeffs_to_fit(&coeffs, 0.0, false, condition))
}

/// WLS that degrades to the minimum-norm solution on rank deficiency, with the
/// deficiency reported on the fit.
pub fn fit_wls_min_norm(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<LinearFit> {
    let (coeffs, rank_deficient, condition) = wls_svd(design, targets, weights)?;
    Ok(coeffs_to_fit(&coeffs, 0.0, rank_deficient, condition))
}

/// Ridge regression with the closed-form solution of the regularised weighted
/// sum of squares. The penalty applies to the slopes only (the intercept is
/// not shrunk), and the statistics and targets are z-scored with weighted
/// moments inside the fit, coefficients mapped back on output. Unique for any
/// lambda > 0.
pub fn fit_ridge(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> Result<LinearFit> {
    check_fit_inputs(design, targets, weights)?;
    if lambda <= 0.0 {
        return Err(AbcError::InvalidInput("ridge requires lambda > 0".into()));
    }
    let m = design.nrows();
    let k = design.k();
    let q = targets.ncols();
    let wsum: f64 = weights.sum();

    let preds = design.predictors();
    let wmean = |col: nalgebra::DVectorView<f64>| -> f64 {
        col.iter().zip(weights.iter()).map(|(v, w)| v * w).sum::<f64>() / wsum
    };
    let mut mu_x = DVector::zeros(k);
    let mut sd_x = DVector::zeros(k);
    for j in 0..k {
        let col = preds.column(j);
        let mu = wmean(col);
        let var = col
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * (v - mu).powi(2))
            .sum::<f64>()
            / wsum;
        mu_x[j] = mu;
        sd_x[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut mu_y = DVector::zeros(q);
    let mut sd_y = DVector::zeros(q);
    for l in 0..q {
        let col = targets.column(l);
        let mu = wmean(col);
        let var = col
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * (v - mu).powi(2))
            .sum::<f64>()
            / wsum;
        mu_y[l] = mu;
        sd_y[l] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }

    let xc = DMatrix::from_fn(m, k, |i, j| (preds[(i, j)] - mu_x[j]) / sd_x[j]);
    let yc = DMatrix::from_fn(m, q, |i, l| (targets[(i, l)] - mu_y[l]) / sd_y[l]);
    let mut xtw = xc.transpose();
    for i in 0..m {
        xtw.column_mut(i).scale_mut(weights[i]);
    }
    let mut gram = &xtw * &xc;
    for j in 0..k {
        gram[(j, j)] += lambda;
    }
    let rhs = &xtw * &yc;
    let b_std = gram
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| AbcError::InvalidInput("ridge system unexpectedly singular".into()))?;

    // Intercept in standardised space: weighted mean of (yc - Xc b) per target.
    let fitted = &xc * &b_std;
    let mut a_std = DVector::zeros(q);
    for l in 0..q {
        let resid_mean: f64 = (0..m)
            .map(|i| weights[i] * (yc[(i, l)] - fitted[(i, l)]))
            .sum::<f64>()
            / wsum;
        a_std[l] = resid_mean;
    }

    let mut beta = DMatrix::zeros(q, k);
    let mut alpha = DVector::zeros(q);
    for l in 0..q {
        let mut acc = mu_y[l] + sd_y[l] * a_std[l];
        for j in 0..k {
            let b = b_std[(j, l)] * sd_y[l] / sd_x[j];
            beta[(l, j)] = b;
            acc -= b * mu_x[j];
        }
        alpha[l] = acc;
    }
    let eig = gram.symmetric_eigenvalues();
    let lmax = eig.iter().cloned().fold(f64::MIN, f64::max);
    let lmin = eig.iter().cloned().fold(f64::MAX, f64::min);
    let condition = if lmin > 0.0 { (lmax / lmin).sqrt() } else { f64::INFINITY };
    Ok(LinearFit { alpha, beta, lambda, rank_deficient: false, condition })
}

/// Log-variance model fitted on the squared residuals of a mean fit;
/// sigma-hat(s) = exp(prediction / 2).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFit {
    pub fit: LinearFit,
}

impl VarianceFit {
    pub fn predict_sigma(&self, predictors: &DVector<f64>) -> DVector<f64> {
        self.fit.predict(predictors).map(|v| (0.5 * v).exp())
    }

    pub fn predict_sigma_rows(&self, predictors: &DMatrix<f64>) -> DMatrix<f64> {
        self.fit.predict_rows(predictors).map(|v| (0.5 * v).exp())
    }
}

/// Fits log(residual^2) by WLS (lambda = None) or ridge. Zero residuals are
/// floored at 1e-300 before the log.
pub fn fit_variance_model(
    design: &DesignMatrix,
    residuals: &DMatrix<f64>,
    weights: &DVector<f64>,
    lambda: Option<f64>,
) -> Result<VarianceFit> {
    let log_sq = residuals.map(|r| (r * r).max(1e-300).ln());
    let fit = match lambda {
        Some(l) if l > 0.0 => fit_ridge(design, &log_sq, weights, l)?,
        _ => fit_wls_min_norm(design, &log_sq, weights)?,
    };
    Ok(VarianceFit { fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjustmentKind {
    None,
    Homoscedastic,
    Heteroscedastic,
}

impl AdjustmentKind {
    pub fn id(&self) -> &'static str {
        match self {
            AdjustmentKind::None => "none",
            AdjustmentKind::Homoscedastic => "homoscedastic",
            AdjustmentKind::Heteroscedastic => "heteroscedastic",
        }
    }
}

/// Adjusted parameter draws with the weights inherited from the source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedSample {
    pub thetas_star: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub source_rows: Vec<usize>,
    pub kind: AdjustmentKind,
}

impl AdjustedSample {
    pub fn n_eff(&self) -> usize {
        self.thetas_star.nrows()
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        self.thetas_star.transpose() * &self.weights
    }

    pub fn unadjusted(sample: &WeightedSample) -> AdjustedSample {
        AdjustedSample {
            thetas_star: sample.thetas.clone(),
            weights: sample.weights.clone(),
            source_rows: sample.source_rows.clone(),
            kind: AdjustmentKind::None,
        }
    }

    pub fn with_uniform_weights(&self) -> AdjustedSample {
        let m = self.n_eff();
        AdjustedSample {
            thetas_star: self.thetas_star.clone(),
            weights: DVector::from_element(m, 1.0 / m as f64),
            source_rows: self.source_rows.clone(),
            kind: self.kind,
        }
    }
}

/// Sigma ratios are clamped to this band in heteroscedastic adjustment.
pub const SIGMA_RATIO_CLAMP: (f64, f64) = (1e-6, 1e6);

/// Regression adjustment: theta*_i = m(s_obs) + (theta_i - m(s_i)), with the
/// residual rescaled by sigma(s_obs)/sigma(s_i) in the heteroscedastic form.
///
/// `fitted` holds m(s_i) for exactly the sample's rows; `variance` optionally
/// holds (sigma(s_i), sigma(s_obs)).
pub fn adjust(
    sample: &WeightedSample,
    fitted: &DMatrix<f64>,
    obs_prediction: &DVector<f64>,
    variance: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<AdjustedSample> {
    let (m, q) = (sample.n_eff(), sample.q());
    if fitted.nrows() != m || fitted.ncols() != q || obs_prediction.len() != q {
        return Err(AbcError::InvalidInput(
            "adjustment fits must be produced on exactly this sample's rows".into(),
        ));
    }
    let mut thetas_star = DMatrix::zeros(m, q);
    for i in 0..m {
        for j in 0..q {
            let resid = sample.thetas[(i, j)] - fitted[(i, j)];
            let scaled = match variance {
                None => resid,
                Some((sig_rows, sig_obs)) => {
                    let ratio = (sig_obs[j] / sig_rows[(i, j)])
                        .clamp(SIGMA_RATIO_CLAMP.0, SIGMA_RATIO_CLAMP.1);
                    resid * ratio
                }
            };
            thetas_star[(i, j)] = obs_prediction[j] + scaled;
        }
    }
    Ok(AdjustedSample {
        thetas_star,
        weights: sample.weights.clone(),
        source_rows: sample.source_rows.clone(),
        kind: if variance.is_some() {
            AdjustmentKind::Heteroscedastic
        } else {
            AdjustmentKind::Homoscedastic
        },
    })
}

/// Rejection sampling over the masked statistics followed by the requested
/// adjustment, with the mean (and variance) models fitted by WLS. Rank
/// deficiency degrades to the minimum-norm fit so subset sweeps run to
/// completion.
pub fn adjusted_rejection(
    table: &ReferenceTable,
    obs: &Observation,
    mask: &SubsetMask,
    kind: AdjustmentKind,
    acceptance_fraction: f64,
) -> Result<AdjustedSample> {
    let sample = crate::sampler::rejection_abc(table, obs, mask, acceptance_fraction)?;
    if kind == AdjustmentKind::None {
        return Ok(AdjustedSample::unadjusted(&sample));
    }
    let scales = table.standardisation();
    let design = DesignMatrix::from_accepted(table, &sample, mask, scales);
    let w = sample.fitting_weights();
    let fit = fit_wls_min_norm(&design, &sample.thetas, &w)?;
    let preds = design.predictors();
    let fitted = fit.predict_rows(&preds);
    let sobs = standardised_obs(obs, mask, &scales);
    let obs_pred = fit.predict(&sobs);
    if kind == AdjustmentKind::Homoscedastic {
        adjust(&sample, &fitted, &obs_pred, None)
    } else {
        let resid = &sample.thetas - &fitted;
        let vfit = fit_variance_model(&design, &resid, &w, None)?;
        let sig_rows = vfit.predict_sigma_rows(&preds);
        let sig_obs = vfit.predict_sigma(&sobs);
        adjust(&sample, &fitted, &obs_pred, Some((&sig_rows, &sig_obs)))
    }
}

/// Componentwise median across fits' predictions, per evaluation point.
pub fn median_aggregate_predictions(predictions: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = predictions
        .first()
        .ok_or_else(|| AbcError::InvalidInput("median aggregate of zero fits".into()))?;
    let (m, q) = (first.nrows(), first.ncols());
    if predictions.iter().any(|p| p.nrows() != m || p.ncols() != q) {
        return Err(AbcError::InvalidInput("prediction shape mismatch".into()));
    }
    let mut out = DMatrix::zeros(m, q);
    let mut buf = Vec::with_capacity(predictions.len());
    for i in 0..m {
        for j in 0..q {
            buf.clear();
            buf.extend(predictions.iter().map(|p| p[(i, j)]));
            out[(i, j)] = median_in_place(&mut buf);
        }
    }
    Ok(out)
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Leave-one-out lambda selection for ridge via the closed-form hat-matrix
/// shortcut; ties resolve to the smaller lambda.
pub fn select_lambda_cv(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(AbcError::InvalidInput("empty lambda grid".into()));
    }
    let mut scored: Vec<(f64, f64)> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        scored.push((lambda, ridge_loo_press(design, targets, weights, lambda)?));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let best = scored
        .iter()
        .cloned()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    Ok(best.0)
}

/// Weighted PRESS statistic for ridge at a given lambda.
pub fn ridge_loo_press(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    let fit = fit_ridge(design, targets, weights, lambda)?;
    let m = design.nrows();
    let k = design.k();
    let q = targets.ncols();
    let wsum: f64 = weights.sum();

    // Recompute the standardised system to get leverage values consistent with
    // the internal z-scoring of fit_ridge.
    let preds = design.predictors();
    let mut mu = DVector::zeros(k);
    let mut sd = DVector::zeros(k);
    for j in 0..k {
        let col = preds.column(j);
        let m_j = col.iter().zip(weights.iter()).map(|(v, w)| v * w).sum::<f64>() / wsum;
        let var = col
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * (v - m_j).powi(2))
            .sum::<f64>()
            / wsum;
        mu[j] = m_j;
        sd[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let xc = DMatrix::from_fn(m, k, |i, j| (preds[(i, j)] - mu[j]) / sd[j]);
    let mut xtw = xc.transpose();
    for i in 0..m {
        xtw.column_mut(i).scale_mut(weights[i]);
    }
    let mut gram = &xtw * &xc;
    for j in 0..k {
        gram[(j, j)] += lambda;
    }
    let inv = gram
        .try_inverse()
        .ok_or_else(|| AbcError::InvalidInput("ridge gram not invertible".into()))?;

    let mut press = 0.0;
    for i in 0..m {
        let xi = xc.row(i).transpose();
        // leverage of the slope block plus the intercept share
        let h = weights[i] * (xi.dot(&(&inv * &xi)) + 1.0 / wsum);
        let denom = (1.0 - h).max(1e-8);
        let pred = fit.predict(&preds.row(i).transpose());
        for l in 0..q {
            let e = targets[(i, l)] - pred[l];
            press += weights[i] * (e / denom).powi(2);
        }
    }
    Ok(press)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn design_1d(xs: &[f64]) -> DesignMatrix {
        DesignMatrix::from_predictors(&DMatrix::from_column_slice(xs.len(), 1, xs))
    }

    #[test]
    fn wls_exact_interpolation() {
        let d = design_1d(&[0.0, 1.0]);
        let y = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let w = DVector::from_element(2, 1.0);
        let fit = fit_wls(&d, &y, &w).unwrap();
        assert_relative_eq!(fit.alpha[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(fit.beta[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_weighting_reports_rank_deficiency() {
        let d = design_1d(&[0.0, 1.0, 2.0]);
        let y = DMatrix::from_column_slice(3, 1, &[5.0, 1.0, 7.0]);
        let w = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let fit = fit_wls_min_norm(&d, &y, &w).unwrap();
        assert!(fit.rank_deficient);
        // fit passes through the single weighted point
        let pred = fit.predict(&DVector::from_element(1, 0.0));
        assert_relative_eq!(pred[0], 5.0, epsilon = 1e-8);
    }

    #[test]
    fn wls_residuals_orthogonal_to_design() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let (m, k, q) = (50, 3, 2);
        let preds = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(m, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(m, |_, _| rng.gen_range(0.1..2.0));
        let d = DesignMatrix::from_predictors(&preds);
        let fit = fit_wls(&d, &y, &w).unwrap();
        let resid = &y - fit.predict_rows(&preds);
        for c in 0..=k {
            for l in 0..q {
                let dot: f64 = (0..m).map(|i| w[i] * d.matrix()[(i, c)] * resid[(i, l)]).sum();
                assert!(dot.abs() < 1e-8, "normal-equation identity violated: {dot}");
            }
        }
    }

    #[test]
    fn ridge_scalar_closed_form() {
        // x = [1, -1], theta = [1, -1], unit weights, lambda = 2:
        // beta = sum x^2 / (sum x^2 + lambda) = 0.5, alpha = 0.
        let d = design_1d(&[1.0, -1.0]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let w = DVector::from_element(2, 1.0);
        let fit = fit_ridge(&d, &y, &w, 2.0).unwrap();
        assert_relative_eq!(fit.beta[(0, 0)], 0.5, epsilon = 1e-10);
        assert_relative_eq!(fit.alpha[0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn ridge_matches_wls_as_lambda_vanishes() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let (m, k) = (60, 4);
        let preds = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(m, 1, |i, _| {
            preds[(i, 0)] * 2.0 - preds[(i, 2)] + 0.3 * rng.sample::<f64, _>(StandardNormal)
        });
        let w = DVector::from_fn(m, |_, _| rng.gen_range(0.2..1.0));
        let d = DesignMatrix::from_predictors(&preds);
        let wls = fit_wls(&d, &y, &w).unwrap();
        let ridge = fit_ridge(&d, &y, &w, 1e-10).unwrap();
        for i in 0..m {
            let x = preds.row(i).transpose();
            assert_relative_eq!(wls.predict(&x)[0], ridge.predict(&x)[0], epsilon = 1e-6);
        }
    }

    #[test]
    fn ridge_duplicate_columns_share_coefficient() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let m = 40;
        let base: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let preds = DMatrix::from_fn(m, 2, |i, _| base[i]);
        let y = DMatrix::from_fn(m, 1, |i, _| 3.0 * base[i] + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_element(m, 1.0);
        let fit = fit_ridge(&DesignMatrix::from_predictors(&preds), &y, &w, 0.1).unwrap();
        assert_relative_eq!(fit.beta[(0, 0)], fit.beta[(0, 1)], epsilon = 1e-8);
    }

    #[test]
    fn ridge_stationarity_identity() {
        // On pre-standardised data the internal z-scoring is the identity, so
        // X'W(Y - Xb) = lambda * diag(0, 1, ..., 1) * b holds in these coords.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let (m, k) = (50, 3);
        let w = DVector::from_fn(m, |_, _| rng.gen_range(0.1..1.0));
        let wsum = w.sum();
        let mut preds = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        for j in 0..k {
            let mu: f64 = (0..m).map(|i| w[i] * preds[(i, j)]).sum::<f64>() / wsum;
            let var: f64 = (0..m).map(|i| w[i] * (preds[(i, j)] - mu).powi(2)).sum::<f64>() / wsum;
            for i in 0..m {
                preds[(i, j)] = (preds[(i, j)] - mu) / var.sqrt();
            }
        }
        let mut y = DMatrix::from_fn(m, 1, |i, _| {
            preds[(i, 1)] - 0.5 * preds[(i, 2)] + 0.2 * rng.sample::<f64, _>(StandardNormal)
        });
        let mu_y: f64 = (0..m).map(|i| w[i] * y[(i, 0)]).sum::<f64>() / wsum;
        let var_y: f64 = (0..m).map(|i| w[i] * (y[(i, 0)] - mu_y).powi(2)).sum::<f64>() / wsum;
        for i in 0..m {
            y[(i, 0)] = (y[(i, 0)] - mu_y) / var_y.sqrt();
        }
        let lambda = 0.05;
        let d = DesignMatrix::from_predictors(&preds);
        let fit = fit_ridge(&d, &y, &w, lambda).unwrap();
        let resid = &y - fit.predict_rows(&preds);
        // intercept column: unpenalised, gradient must vanish
        let g0: f64 = (0..m).map(|i| w[i] * resid[(i, 0)]).sum();
        assert!(g0.abs() < 1e-8, "intercept stationarity: {g0}");
        for j in 0..k {
            let gj: f64 = (0..m).map(|i| w[i] * preds[(i, j)] * resid[(i, 0)]).sum();
            assert!(
                (gj - lambda * fit.beta[(0, j)]).abs() < 1e-8,
                "slope stationarity at {j}: {gj} vs {}",
                lambda * fit.beta[(0, j)]
            );
        }
    }

    #[test]
    fn ridge_predictions_continuous_in_lambda() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (m, k) = (30, 2);
        let preds = DMatrix::from_fn(m, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(m, 1, |i, _| preds[(i, 0)] + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_element(m, 1.0);
        let d = DesignMatrix::from_predictors(&preds);
        let lam = 0.01;
        let f1 = fit_ridge(&d, &y, &w, lam).unwrap();
        let f2 = fit_ridge(&d, &y, &w, lam + 1e-9).unwrap();
        let x = preds.row(0).transpose();
        assert_relative_eq!(f1.predict(&x)[0], f2.predict(&x)[0], epsilon = 1e-6);
    }

    #[test]
    fn variance_model_constant_residuals() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let m = 40;
        let preds = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = 0.7;
        let resid = DMatrix::from_fn(m, 1, |i, _| if i % 2 == 0 { r } else { -r });
        let w = DVector::from_element(m, 1.0);
        let d = DesignMatrix::from_predictors(&preds);
        let vfit = fit_variance_model(&d, &resid, &w, None).unwrap();
        let sigma = vfit.predict_sigma(&DVector::from_element(1, 0.5));
        assert_relative_eq!(sigma[0], r, epsilon = 1e-6);
        assert!(vfit.fit.beta[(0, 0)].abs() < 1e-6);
    }

    #[test]
    fn variance_model_recovers_multiplicative_law() {
        // sd(residual | s) = 0.2 s on s in [1, 10]: slope of log-variance in
        // log s is 2, i.e. sigma(s) proportional to s.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let m = 6000;
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(1.0..10.0)).collect();
        let resid = DMatrix::from_fn(m, 1, |i, _| 0.2 * s[i] * rng.sample::<f64, _>(StandardNormal));
        // regress on log s so the law is exactly linear in the predictor
        let preds = DMatrix::from_fn(m, 1, |i, _| s[i].ln());
        let w = DVector::from_element(m, 1.0);
        let vfit = fit_variance_model(&DesignMatrix::from_predictors(&preds), &resid, &w, None).unwrap();
        let slope = vfit.fit.beta[(0, 0)];
        assert!((slope - 2.0).abs() < 0.2, "log-variance slope {slope}");
        let sig_at = |sv: f64| vfit.predict_sigma(&DVector::from_element(1, sv.ln()))[0];
        let ratio = sig_at(8.0) / sig_at(2.0);
        assert!((ratio - 4.0).abs() / 4.0 < 0.10, "sigma ratio {ratio}");
    }

    #[test]
    fn variance_model_survives_huge_outlier() {
        let m = 20;
        let preds = DMatrix::from_fn(m, 1, |i, _| i as f64 / m as f64);
        let mut resid = DMatrix::from_element(m, 1, 0.5);
        resid[(0, 0)] = 1e150;
        let w = DVector::from_element(m, 1.0);
        let vfit = fit_variance_model(&DesignMatrix::from_predictors(&preds), &resid, &w, None).unwrap();
        let sigma = vfit.predict_sigma(&DVector::from_element(1, 0.5));
        assert!(sigma[0].is_finite());
    }

    #[test]
    fn adjust_homoscedastic_arithmetic() {
        let sample = WeightedSample {
            thetas: DMatrix::from_element(1, 1, 2.0),
            weights: DVector::from_element(1, 1.0),
            source_rows: vec![0],
        };
        let fitted = DMatrix::from_element(1, 1, 1.5);
        let obs_pred = DVector::from_element(1, 1.0);
        let adj = adjust(&sample, &fitted, &obs_pred, None).unwrap();
        assert_relative_eq!(adj.thetas_star[(0, 0)], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn adjust_heteroscedastic_arithmetic() {
        let sample = WeightedSample {
            thetas: DMatrix::from_element(1, 1, 2.0),
            weights: DVector::from_element(1, 1.0),
            source_rows: vec![0],
        };
        let fitted = DMatrix::from_element(1, 1, 1.5);
        let obs_pred = DVector::from_element(1, 1.0);
        let sig_rows = DMatrix::from_element(1, 1, 1.0);
        let sig_obs = DVector::from_element(1, 2.0);
        let adj = adjust(&sample, &fitted, &obs_pred, Some((&sig_rows, &sig_obs))).unwrap();
        assert_relative_eq!(adj.thetas_star[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn perfect_linear_model_collapses_to_prediction() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let m = 25;
        let s: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let thetas = DMatrix::from_fn(m, 1, |i, _| 2.0 * s[i]);
        let sample = WeightedSample {
            thetas: thetas.clone(),
            weights: DVector::from_element(m, 1.0 / m as f64),
            source_rows: (0..m).collect(),
        };
        let d = design_1d(&s);
        let fit = fit_wls(&d, &thetas, &sample.weights).unwrap();
        let s_obs = 0.37;
        let fitted = fit.predict_rows(&d.predictors());
        let obs_pred = fit.predict(&DVector::from_element(1, s_obs));
        let adj = adjust(&sample, &fitted, &obs_pred, None).unwrap();
        for i in 0..m {
            assert_relative_eq!(adj.thetas_star[(i, 0)], 2.0 * s_obs, epsilon = 1e-10);
        }
    }

    #[test]
    fn adjusted_weighted_mean_equals_obs_prediction() {
        // With a WLS fit with intercept, the weighted mean residual is 0, so
        // the weighted mean of theta* equals m(s_obs).
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let m = 80;
        let s: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let thetas =
            DMatrix::from_fn(m, 1, |i, _| 1.2 * s[i] + rng.sample::<f64, _>(StandardNormal));
        let mut w = DVector::from_fn(m, |_, _| rng.gen_range(0.01..1.0));
        w /= w.sum();
        let sample = WeightedSample {
            thetas: thetas.clone(),
            weights: w.clone(),
            source_rows: (0..m).collect(),
        };
        let d = design_1d(&s);
        let fit = fit_wls(&d, &thetas, &w).unwrap();
        let fitted = fit.predict_rows(&d.predictors());
        let obs_pred = fit.predict(&DVector::from_element(1, 0.9));
        let adj = adjust(&sample, &fitted, &obs_pred, None).unwrap();
        assert_relative_eq!(adj.posterior_mean()[0], obs_pred[0], epsilon = 1e-10);
        assert_eq!(adj.n_eff(), sample.n_eff());
        assert_eq!(adj.weights, sample.weights);
    }

    #[test]
    fn median_aggregate_idempotent_and_median() {
        let a = DMatrix::from_element(2, 1, 1.0);
        let b = DMatrix::from_element(2, 1, 2.0);
        let c = DMatrix::from_element(2, 1, 100.0);
        let same = median_aggregate_predictions(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same, a);
        let med = median_aggregate_predictions(&[a, b.clone(), c]).unwrap();
        assert_eq!(med, b);
    }

    #[test]
    fn lambda_cv_prefers_smallest_on_linear_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let m = 50;
        let preds = DMatrix::from_fn(m, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(m, 1, |i, _| 2.0 * preds[(i, 0)] - preds[(i, 1)]);
        let w = DVector::from_element(m, 1.0);
        let d = DesignMatrix::from_predictors(&preds);
        let chosen = select_lambda_cv(&d, &y, &w, &[1e-3, 1e-2, 1e-1]).unwrap();
        assert_eq!(chosen, 1e-3);
    }

    #[test]
    fn lambda_cv_prefers_largest_on_pure_noise() {
        let mut wins = 0;
        for seed in 0..100 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let m = 30;
            let preds = DMatrix::from_fn(m, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w = DVector::from_element(m, 1.0);
            let d = DesignMatrix::from_predictors(&preds);
            let chosen = select_lambda_cv(&d, &y, &w, &[1e-3, 1e-1, 10.0]).unwrap();
            if chosen == 10.0 {
                wins += 1;
            }
        }
        assert!(wins >= 80, "largest lambda chosen in only {wins}/100 noise replicates");
    }

    #[test]
    fn lambda_cv_singleton_grid() {
        let d = design_1d(&[0.0, 1.0, 2.0]);
        let y = DMatrix::from_column_slice(3, 1, &[0.1, 0.9, 2.1]);
        let w = DVector::from_element(3, 1.0);
        assert_eq!(select_lambda_cv(&d, &y, &w, &[0.5]).unwrap(), 0.5);
    }
}
