//! Projection-based dimension reduction: partial least squares with
//! cross-validated component choice, and posterior-loss summaries built by
//! regressing parameters on a basis expansion of the statistics over a
//! held-out training split.

use crate::error::{AbcError, Result};
use crate::regression::{fit_wls_min_norm, DesignMatrix};
use crate::table::ReferenceTable;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::io::{Read, Write};

/// Above this many rows the component-selection criterion switches from exact
/// leave-one-out to 10-fold cross-validation.
pub const LOO_EXACT_MAX: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSpec {
    Identity,
    /// Powers 1..4 of every statistic.
    Powers,
    /// Powers 1..4 of the log of every statistic; inputs must be positive.
    LogPowers,
}

impl BasisSpec {
    pub fn id(&self) -> &'static str {
        match self {
            BasisSpec::Identity => "identity",
            BasisSpec::Powers => "powers",
            BasisSpec::LogPowers => "log-powers",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BasisSpec::Identity),
            "powers" => Ok(BasisSpec::Powers),
            "log-powers" => Ok(BasisSpec::LogPowers),
            other => Err(AbcError::Config(format!("unknown basis '{other}'"))),
        }
    }

    pub fn expanded_len(&self, p: usize) -> usize {
        match self {
            BasisSpec::Identity => p,
            BasisSpec::Powers | BasisSpec::LogPowers => 4 * p,
        }
    }

    /// Basis expansion of one raw statistic vector.
    pub fn expand(&self, stats: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
        match self {
            BasisSpec::Identity => Ok(stats.clone()),
            BasisSpec::Powers => {
                let mut out = DVector::zeros(4 * stats.len());
                for j in 0..stats.len() {
                    for r in 0..4 {
                        out[4 * j + r] = stats[j].powi(r as i32 + 1);
                    }
                }
                Ok(out)
            }
            BasisSpec::LogPowers => {
                let mut out = DVector::zeros(4 * stats.len());
                for j in 0..stats.len() {
                    if stats[j] <= 0.0 {
                        let name = names
                            .get(j)
                            .cloned()
                            .unwrap_or_else(|| format!("statistic {j}"));
                        return Err(AbcError::NonPositiveLogInput { name, value: stats[j] });
                    }
                    let l = stats[j].ln();
                    for r in 0..4 {
                        out[4 * j + r] = l.powi(r as i32 + 1);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Affine map from a (basis-expanded) statistic vector to derived summaries,
/// one per parameter (or PLS component).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMap {
    pub offset: DVector<f64>,
    /// out_dim x expanded_len.
    pub coefficients: DMatrix<f64>,
    pub basis: BasisSpec,
    pub n_components: usize,
    pub stat_names: Vec<String>,
}

impl ProjectionMap {
    pub fn out_dim(&self) -> usize {
        self.offset.len()
    }

    /// Derived summaries for one raw statistic vector.
    pub fn apply(&self, stats: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.basis.expand(stats, &self.stat_names)?;
        if f.len() != self.coefficients.ncols() {
            return Err(AbcError::InvalidInput(format!(
                "projection expects {} basis terms, got {}",
                self.coefficients.ncols(),
                f.len()
            )));
        }
        Ok(&self.offset + &self.coefficients * f)
    }

    /// Applies the map to every row of a raw statistic matrix.
    pub fn apply_rows(&self, stats: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let m = stats.nrows();
        let mut out = DMatrix::zeros(m, self.out_dim());
        for i in 0..m {
            let d = self.apply(&stats.row(i).transpose())?;
            out.row_mut(i).copy_from(&d.transpose());
        }
        Ok(out)
    }

    /// Rows: basis id and component count, then the offset, then one
    /// coefficient row per derived summary.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        wtr.write_record(["basis", self.basis.id(), &self.n_components.to_string()])?;
        wtr.write_record(
            std::iter::once("stat_names".to_string()).chain(self.stat_names.iter().cloned()),
        )?;
        wtr.write_record(
            std::iter::once("offset".to_string())
                .chain(self.offset.iter().map(|v| format!("{v}"))),
        )?;
        for l in 0..self.out_dim() {
            wtr.write_record(
                std::iter::once(format!("coef{l}"))
                    .chain(self.coefficients.row(l).iter().map(|v| format!("{v}"))),
            )?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(r);
        let records: Vec<csv::StringRecord> =
            rdr.records().collect::<std::result::Result<_, _>>()?;
        let bad = |m: &str| AbcError::Config(format!("projection csv: {m}"));
        let head = records.first().ok_or_else(|| bad("empty file"))?;
        if head.get(0) != Some("basis") || head.len() < 3 {
            return Err(bad("missing basis row"));
        }
        let basis = BasisSpec::from_id(head.get(1).unwrap())?;
        let n_components = head
            .get(2)
            .unwrap()
            .parse()
            .map_err(|_| bad("bad component count"))?;
        let names_row = records.get(1).ok_or_else(|| bad("missing stat_names row"))?;
        let stat_names: Vec<String> = names_row.iter().skip(1).map(str::to_string).collect();
        let offset_row = records.get(2).ok_or_else(|| bad("missing offset row"))?;
        let parse_row = |rec: &csv::StringRecord| -> Result<Vec<f64>> {
            rec.iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad number")))
                .collect()
        };
        let offset = DVector::from_vec(parse_row(offset_row)?);
        let mut coeff_rows = Vec::new();
        for rec in &records[3..] {
            coeff_rows.push(parse_row(rec)?);
        }
        if coeff_rows.len() != offset.len() {
            return Err(bad("coefficient row count mismatch"));
        }
        let cols = coeff_rows.first().map_or(0, Vec::len);
        let coefficients = DMatrix::from_fn(coeff_rows.len(), cols, |i, j| coeff_rows[i][j]);
        Ok(ProjectionMap { offset, coefficients, basis, n_components, stat_names })
    }
}

/// Internals of one fitted PLS sequence.
#[derive(Debug, Clone, PartialEq)]
struct PlsCore {
    x_mean: DVector<f64>,
    x_sd: DVector<f64>,
    y_mean: DVector<f64>,
    /// p x a loadings and weights, q x a target loadings.
    w: DMatrix<f64>,
    p_load: DMatrix<f64>,
    q_load: DMatrix<f64>,
    /// Component scores, m x a (training data).
    scores: DMatrix<f64>,
    /// Predictor columns retained after the zero-variance drop.
    kept: Vec<usize>,
}

impl PlsCore {
    /// Regression coefficients for the first k components, in standardised
    /// predictor space: p_kept x q.
    fn coefficients(&self, k: usize) -> DMatrix<f64> {
        let w = self.w.columns(0, k);
        let p = self.p_load.columns(0, k);
        let q = self.q_load.columns(0, k);
        let ptw = p.transpose() * w;
        let inv = ptw
            .lu()
            .solve(&DMatrix::identity(k, k))
            .expect("PLS triangular system is invertible");
        w * inv * q.transpose()
    }

    fn to_map(&self, k: usize, p_raw: usize, stat_names: &[String]) -> ProjectionMap {
        let b = self.coefficients(k);
        let q = b.ncols();
        let mut coefficients = DMatrix::zeros(q, p_raw);
        let mut offset = self.y_mean.clone();
        for (jk, &j) in self.kept.iter().enumerate() {
            for l in 0..q {
                let c = b[(jk, l)] / self.x_sd[jk];
                coefficients[(l, j)] = c;
                offset[l] -= c * self.x_mean[jk];
            }
        }
        ProjectionMap {
            offset,
            coefficients,
            basis: BasisSpec::Identity,
            n_components: k,
            stat_names: stat_names.to_vec(),
        }
    }
}

fn pls_nipals(x_raw: &DMatrix<f64>, y_raw: &DMatrix<f64>, a_max: usize) -> Result<PlsCore> {
    let m = x_raw.nrows();
    if y_raw.nrows() != m || m < 2 {
        return Err(AbcError::InvalidInput("PLS needs matching row counts, m >= 2".into()));
    }
    let q = y_raw.ncols();

    let mut kept = Vec::new();
    let mut x_mean = Vec::new();
    let mut x_sd = Vec::new();
    for j in 0..x_raw.ncols() {
        let col = x_raw.column(j);
        let mu = col.sum() / m as f64;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
        if var > 0.0 {
            kept.push(j);
            x_mean.push(mu);
            x_sd.push(var.sqrt());
        }
    }
    let p = kept.len();
    if p == 0 {
        return Err(AbcError::InvalidInput("all predictor columns are constant".into()));
    }
    let a_max = a_max.min(p).min(m - 1);
    if a_max == 0 {
        return Err(AbcError::InvalidInput("no PLS components requested".into()));
    }

    let mut x = DMatrix::from_fn(m, p, |i, j| (x_raw[(i, kept[j])] - x_mean[j]) / x_sd[j]);
    let y_mean = DVector::from_fn(q, |l, _| y_raw.column(l).sum() / m as f64);
    let mut y = DMatrix::from_fn(m, q, |i, l| y_raw[(i, l)] - y_mean[l]);

    let mut w_all = DMatrix::zeros(p, a_max);
    let mut p_all = DMatrix::zeros(p, a_max);
    let mut q_all = DMatrix::zeros(q, a_max);
    let mut t_all = DMatrix::zeros(m, a_max);
    let mut extracted = 0;
    for a in 0..a_max {
        // start from the y column with largest variance
        let lead = (0..q)
            .max_by(|&i, &j| {
                y.column(i)
                    .norm_squared()
                    .partial_cmp(&y.column(j).norm_squared())
                    .unwrap()
            })
            .unwrap();
        let mut u: DVector<f64> = y.column(lead).into_owned();
        if u.norm() < 1e-12 {
            break;
        }
        let mut w = DVector::zeros(p);
        let mut t = DVector::zeros(m);
        for _ in 0..500 {
            let mut w_new = x.transpose() * &u;
            let n = w_new.norm();
            if n < 1e-300 {
                break;
            }
            w_new /= n;
            let t_new = &x * &w_new;
            let qv = y.transpose() * &t_new / t_new.norm_squared();
            let u_new = if q == 1 { y.column(0).into_owned() } else { &y * &qv / qv.norm_squared() };
            let delta = (&w_new - &w).norm();
            w = w_new;
            t = t_new;
            u = u_new;
            if delta < 1e-12 {
                break;
            }
        }
        let tt = t.norm_squared();
        if tt < 1e-12 {
            break;
        }
        let p_vec = x.transpose() * &t / tt;
        let q_vec = y.transpose() * &t / tt;
        x -= &t * p_vec.transpose();
        y -= &t * q_vec.transpose();
        w_all.set_column(a, &w);
        p_all.set_column(a, &p_vec);
        q_all.set_column(a, &q_vec);
        t_all.set_column(a, &t);
        extracted = a + 1;
    }
    if extracted == 0 {
        return Err(AbcError::InvalidInput("PLS extracted no components".into()));
    }
    Ok(PlsCore {
        x_mean: DVector::from_vec(x_mean),
        x_sd: DVector::from_vec(x_sd),
        y_mean,
        w: w_all.columns(0, extracted).into(),
        p_load: p_all.columns(0, extracted).into(),
        q_load: q_all.columns(0, extracted).into(),
        scores: t_all.columns(0, extracted).into(),
        kept,
    })
}

/// A fitted PLS sequence: one projection per component count, the
/// cross-validated error curve, and how the curve was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsFit {
    pub maps: Vec<ProjectionMap>,
    /// Cross-validated prediction error for 1..=maps.len() components.
    pub rmse: Vec<f64>,
    /// False when 10-fold cross-validation replaced exact leave-one-out.
    pub loo_exact: bool,
    /// Predictor columns dropped for having zero variance.
    pub dropped_columns: Vec<usize>,
    core: PlsCore,
}

impl PlsFit {
    /// Component scores of the training data, m x a.
    pub fn scores(&self) -> &DMatrix<f64> {
        &self.core.scores
    }
}

/// Fits PLS components by the iterative deflation recursion on z-scored
/// predictors, returning one candidate projection per component count along
/// with the leave-one-out (or 10-fold, above [`LOO_EXACT_MAX`] rows) error
/// curve.
pub fn fit_pls(
    predictors: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    n_components_max: usize,
    stat_names: &[String],
) -> Result<PlsFit> {
    let core = pls_nipals(predictors, targets, n_components_max)?;
    let a = core.w.ncols();
    let p_raw = predictors.ncols();
    let dropped_columns: Vec<usize> =
        (0..p_raw).filter(|j| !core.kept.contains(j)).collect();
    let maps: Vec<ProjectionMap> =
        (1..=a).map(|k| core.to_map(k, p_raw, stat_names)).collect();

    let m = predictors.nrows();
    let loo_exact = m <= LOO_EXACT_MAX;
    let folds: Vec<Vec<usize>> = if loo_exact {
        (0..m).map(|i| vec![i]).collect()
    } else {
        let mut f: Vec<Vec<usize>> = vec![Vec::new(); 10];
        for i in 0..m {
            f[i % 10].push(i);
        }
        f
    };
    let q = targets.ncols();
    let fold_errors: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..m).filter(|i| !fold.contains(i)).collect();
            let xt = DMatrix::from_fn(train.len(), p_raw, |i, j| predictors[(train[i], j)]);
            let yt = DMatrix::from_fn(train.len(), q, |i, l| targets[(train[i], l)]);
            let core_f = match pls_nipals(&xt, &yt, a) {
                Ok(c) => c,
                Err(_) => return vec![f64::NAN; a],
            };
            let a_f = core_f.w.ncols();
            let mut errs = vec![0.0; a];
            for k in 1..=a {
                let map = core_f.to_map(k.min(a_f), p_raw, stat_names);
                let mut e = 0.0;
                for &i in fold {
                    let pred = map.apply(&predictors.row(i).transpose()).unwrap();
                    for l in 0..q {
                        e += (pred[l] - targets[(i, l)]).powi(2);
                    }
                }
                errs[k - 1] = e;
            }
            errs
        })
        .collect();
    let mut rmse = vec![0.0; a];
    for k in 0..a {
        let total: f64 = fold_errors.iter().map(|e| e[k]).sum();
        rmse[k] = (total / (m * q) as f64).sqrt();
    }
    Ok(PlsFit { maps, rmse, loo_exact, dropped_columns, core })
}

/// A single projection at a fixed component count, skipping the
/// cross-validation pass of [`fit_pls`]. Returns fewer components when the
/// recursion exhausts the predictor rank early.
pub fn pls_projection(
    predictors: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    n_components: usize,
    stat_names: &[String],
) -> Result<ProjectionMap> {
    let core = pls_nipals(predictors, targets, n_components)?;
    let a = core.w.ncols();
    Ok(core.to_map(a.min(n_components), predictors.ncols(), stat_names))
}

/// Elbow rule on the cross-validation curve: the smallest component count
/// whose relative improvement at the next step falls below `threshold`
/// (default 1%); the full curve length when every step keeps improving.
pub fn choose_pls_components(rmse_curve: &[f64], threshold: f64) -> Result<usize> {
    if rmse_curve.len() < 2 {
        return if rmse_curve.len() == 1 {
            Ok(1)
        } else {
            Err(AbcError::InvalidInput("component choice needs a curve of length >= 1".into()))
        };
    }
    let floor = 1e-12 * rmse_curve[0].abs().max(1e-300);
    for k in 0..rmse_curve.len() - 1 {
        // an error at rounding level cannot meaningfully improve further
        if rmse_curve[k] <= floor {
            return Ok(k + 1);
        }
        let improvement = (rmse_curve[k] - rmse_curve[k + 1]) / rmse_curve[k].abs().max(1e-300);
        if improvement < threshold {
            return Ok(k + 1);
        }
    }
    Ok(rmse_curve.len())
}

/// Output of the posterior-loss summary construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorLossFit {
    pub map: ProjectionMap,
    /// The rows not used for training, with statistics replaced by the
    /// derived summaries (one per parameter).
    pub heldout: ReferenceTable,
    pub train_rows: Vec<usize>,
    /// Set when the basis design was rank deficient and collinear directions
    /// were dropped by the minimum-norm solve.
    pub rank_deficient: bool,
}

/// Regresses each parameter on the basis expansion of the statistics over a
/// seeded random split (default 10%) by ordinary least squares; the fitted
/// predictions become the new summaries and the remaining rows are returned
/// as the reference table to run ABC on.
pub fn fit_posterior_loss(
    table: &ReferenceTable,
    split_fraction: f64,
    basis: BasisSpec,
    seed: u64,
) -> Result<PosteriorLossFit> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(AbcError::InvalidInput("split_fraction must lie in (0, 1)".into()));
    }
    let n = table.n();
    let n_train = ((split_fraction * n as f64).ceil() as usize).clamp(2, n - 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut train_rows: Vec<usize> =
        rand::seq::index::sample(&mut rng, n, n_train).into_vec();
    train_rows.sort_unstable();

    let len = basis.expanded_len(table.p());
    let mut f_train = DMatrix::zeros(n_train, len);
    for (i, &row) in train_rows.iter().enumerate() {
        let f = basis.expand(&table.stat_row(row), table.stat_names())?;
        f_train.row_mut(i).copy_from(&f.transpose());
    }
    let theta_train = DMatrix::from_fn(n_train, table.q(), |i, l| {
        table.params()[(train_rows[i], l)]
    });
    let design = DesignMatrix::from_predictors(&f_train);
    let unit = DVector::from_element(n_train, 1.0);
    let fit = fit_wls_min_norm(&design, &theta_train, &unit)?;

    let map = ProjectionMap {
        offset: fit.alpha.clone(),
        coefficients: fit.beta.clone(),
        basis,
        n_components: table.q(),
        stat_names: table.stat_names().to_vec(),
    };

    let heldout_rows: Vec<usize> = {
        let mut mark = vec![false; n];
        for &r in &train_rows {
            mark[r] = true;
        }
        (0..n).filter(|&i| !mark[i]).collect()
    };
    let base = table.subset_rows(&heldout_rows);
    let derived = map.apply_rows(base.stats())?;
    let names = table
        .param_names()
        .iter()
        .map(|p| format!("derived_{p}"))
        .collect();
    let heldout = base.with_stats(derived, names)?;
    Ok(PosteriorLossFit { map, heldout, train_rows, rank_deficient: fit.rank_deficient })
}

/// Acceptance fraction on a held-out table that reproduces the effective
/// sample size a full-table run would give.
pub fn equalised_acceptance_fraction(
    full_n: usize,
    heldout_n: usize,
    acceptance_fraction: f64,
) -> f64 {
    (acceptance_fraction * full_n as f64 / heldout_n as f64).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GaussianToyConfig, ModelConfig};
    use crate::sampler::{generate_table, rejection_abc, SimulatorSpec};
    use crate::table::SubsetMask;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("s{j}")).collect()
    }

    fn random_data(seed: u64, m: usize, p: usize) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn pls_scores_orthogonal() {
        let x = random_data(1, 40, 5);
        let y = random_data(2, 40, 2);
        let fit = fit_pls(&x, &y, 4, &names(5)).unwrap();
        let t = fit.scores();
        for a in 0..t.ncols() {
            for b in 0..a {
                let dot: f64 = t.column(a).dot(&t.column(b));
                assert!(dot.abs() < 1e-8, "scores {a},{b} dot {dot}");
            }
        }
    }

    #[test]
    fn pls_full_rank_matches_ols() {
        let x = random_data(3, 60, 4);
        let y = random_data(4, 60, 2);
        let fit = fit_pls(&x, &y, 4, &names(4)).unwrap();
        let map = fit.maps.last().unwrap();
        assert_eq!(map.n_components, 4);
        let design = DesignMatrix::from_predictors(&x);
        let unit = DVector::from_element(60, 1.0);
        let ols = crate::regression::fit_wls(&design, &y, &unit).unwrap();
        for i in 0..60 {
            let a = map.apply(&x.row(i).transpose()).unwrap();
            let b = ols.predict(&x.row(i).transpose());
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn pls_recovers_true_support() {
        // two targets, each an exact function of its own statistic; five
        // noise columns orthogonal to the informative ones
        let m = 200;
        let mut raw = random_data(5, m, 7);
        for j in 0..7 {
            let mu = raw.column(j).sum() / m as f64;
            raw.column_mut(j).add_scalar_mut(-mu);
        }
        let x: DMatrix<f64> = raw.qr().q();
        let y = DMatrix::from_fn(m, 2, |i, l| {
            if l == 0 { 2.0 * x[(i, 0)] } else { -1.5 * x[(i, 1)] }
        });
        let fit = fit_pls(&x, &y, 5, &names(7)).unwrap();
        assert_eq!(choose_pls_components(&fit.rmse, 0.01).unwrap(), 2);
        // at k = 2 the fit is exact and matches the least-squares solution
        let map = &fit.maps[1];
        for i in 0..m {
            let pred = map.apply(&x.row(i).transpose()).unwrap();
            assert_relative_eq!(pred[0], y[(i, 0)], epsilon = 1e-6);
            assert_relative_eq!(pred[1], y[(i, 1)], epsilon = 1e-6);
        }
    }

    #[test]
    fn pls_drops_constant_columns() {
        let mut x = random_data(6, 30, 3);
        x.set_column(1, &DVector::from_element(30, 2.5));
        let y = random_data(7, 30, 1);
        let fit = fit_pls(&x, &y, 2, &names(3)).unwrap();
        assert_eq!(fit.dropped_columns, vec![1]);
        for map in &fit.maps {
            assert_eq!(map.coefficients[(0, 1)], 0.0);
        }
    }

    #[test]
    fn component_choice_rules() {
        assert_eq!(choose_pls_components(&[1.0, 1.0, 1.0], 0.01).unwrap(), 1);
        assert_eq!(choose_pls_components(&[1.0, 0.5, 0.499, 0.498], 0.01).unwrap(), 2);
        let monotone = [1.0, 0.9, 0.81, 0.729, 0.6561];
        assert_eq!(choose_pls_components(&monotone, 0.01).unwrap(), 5);
    }

    #[test]
    fn rmse_sane_on_noise_free_linear_data() {
        let x = random_data(8, 80, 3);
        let y = DMatrix::from_fn(80, 1, |i, _| x[(i, 0)] + x[(i, 1)] - x[(i, 2)]);
        let fit = fit_pls(&x, &y, 3, &names(3)).unwrap();
        assert!(fit.loo_exact);
        assert!(fit.rmse[2] <= fit.rmse[0]);
        assert!(fit.rmse[2] < 1e-8);
    }

    #[test]
    fn apply_identity_and_zero_maps() {
        let p = 3;
        let map = ProjectionMap {
            offset: DVector::zeros(p),
            coefficients: DMatrix::identity(p, p),
            basis: BasisSpec::Identity,
            n_components: p,
            stat_names: names(p),
        };
        let s = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        assert_eq!(map.apply(&s).unwrap(), s);
        let zero = ProjectionMap { coefficients: DMatrix::zeros(p, p), ..map };
        assert_eq!(zero.apply(&s).unwrap(), DVector::zeros(p));
    }

    #[test]
    fn log_basis_rejects_nonpositive_naming_stat() {
        let map = ProjectionMap {
            offset: DVector::zeros(1),
            coefficients: DMatrix::zeros(1, 8),
            basis: BasisSpec::LogPowers,
            n_components: 1,
            stat_names: vec!["count".into(), "mass".into()],
        };
        let err = map.apply(&DVector::from_column_slice(&[2.0, -1.0])).unwrap_err();
        assert!(err.to_string().contains("mass"), "error was: {err}");
    }

    #[test]
    fn powers_basis_expansion_width() {
        // p = 2 -> 8 regressors plus intercept in the fitted model
        let spec =
            SimulatorSpec::new(ModelConfig::GaussianToy(GaussianToyConfig::default()), 10)
                .unwrap();
        let t = generate_table(&spec, 300).unwrap();
        let keep: Vec<usize> = vec![0, 2];
        let stats = DMatrix::from_fn(t.n(), 2, |i, j| t.stats()[(i, keep[j])]);
        let t2 = t.with_stats(stats, vec!["a".into(), "b".into()]).unwrap();
        let fit = fit_posterior_loss(&t2, 0.1, BasisSpec::Powers, 5).unwrap();
        assert_eq!(fit.map.coefficients.ncols(), 8);
        assert_eq!(fit.heldout.p(), t2.q());
    }

    #[test]
    fn posterior_loss_exact_identity_regression() {
        // theta = 3 s exactly, identity basis
        let theta = random_data(11, 100, 1);
        let stats = &theta / 3.0;
        let t = ReferenceTable::new(
            theta.clone(),
            stats,
            vec!["theta".into()],
            vec!["s".into()],
        )
        .unwrap();
        let fit = fit_posterior_loss(&t, 0.2, BasisSpec::Identity, 1).unwrap();
        assert_relative_eq!(fit.map.coefficients[(0, 0)], 3.0, epsilon = 1e-8);
        assert_relative_eq!(fit.map.offset[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let spec =
            SimulatorSpec::new(ModelConfig::GaussianToy(GaussianToyConfig::default()), 21)
                .unwrap();
        let t = generate_table(&spec, 500).unwrap();
        let fit = fit_posterior_loss(&t, 0.1, BasisSpec::Powers, 9).unwrap();
        assert_eq!(fit.train_rows.len(), 50);
        assert_eq!(fit.heldout.n(), 450);
        // training rows must not appear among held-out parameter rows: compare
        // counts after merging
        let mut all = fit.train_rows.clone();
        all.dedup();
        assert_eq!(all.len(), 50);
    }

    #[test]
    fn training_row_prediction_matches_fitted_value() {
        let spec =
            SimulatorSpec::new(ModelConfig::GaussianToy(GaussianToyConfig::default()), 33)
                .unwrap();
        let t = generate_table(&spec, 400).unwrap();
        let fit = fit_posterior_loss(&t, 0.15, BasisSpec::Identity, 3).unwrap();
        // refit by hand on the training rows and compare fitted values
        let rows = &fit.train_rows;
        let x = DMatrix::from_fn(rows.len(), t.p(), |i, j| t.stats()[(rows[i], j)]);
        let y = DMatrix::from_fn(rows.len(), 1, |i, _| t.params()[(rows[i], 0)]);
        let design = DesignMatrix::from_predictors(&x);
        let unit = DVector::from_element(rows.len(), 1.0);
        let ols = crate::regression::fit_wls(&design, &y, &unit).unwrap();
        for (i, &row) in rows.iter().enumerate() {
            let a = fit.map.apply(&t.stat_row(row)).unwrap();
            let b = ols.predict(&x.row(i).transpose());
            assert_relative_eq!(a[0], b[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn identity_basis_affine_equivariance() {
        // rescaling one raw statistic leaves fitted values unchanged
        let spec =
            SimulatorSpec::new(ModelConfig::GaussianToy(GaussianToyConfig::default()), 41)
                .unwrap();
        let t = generate_table(&spec, 300).unwrap();
        let fit_a = fit_posterior_loss(&t, 0.2, BasisSpec::Identity, 7).unwrap();
        let mut stats = t.stats().clone();
        for i in 0..t.n() {
            stats[(i, 1)] = 5.0 * stats[(i, 1)] - 2.0;
        }
        let t2 = t.with_stats(stats.clone(), t.stat_names().to_vec()).unwrap();
        let fit_b = fit_posterior_loss(&t2, 0.2, BasisSpec::Identity, 7).unwrap();
        for i in 0..5 {
            let a = fit_a.map.apply(&t.stat_row(i)).unwrap();
            let b = fit_b.map.apply(&t2.stat_row(i)).unwrap();
            assert_relative_eq!(a[0], b[0], epsilon = 1e-10);
        }
    }

    #[test]
    fn derived_statistic_tracks_posterior_mean() {
        let cfg = GaussianToyConfig::default();
        let spec = SimulatorSpec::new(ModelConfig::GaussianToy(cfg.clone()), 55).unwrap();
        let t = generate_table(&spec, 20_000).unwrap();
        let fit = fit_posterior_loss(&t, 0.1, BasisSpec::Identity, 2).unwrap();
        // correlation between derived statistic and the analytic posterior
        // mean given each held-out row's sample mean
        let m = fit.heldout.n();
        let derived: Vec<f64> = (0..m).map(|i| fit.heldout.stats()[(i, 0)]).collect();
        let rows: Vec<usize> = {
            let mut mark = vec![false; t.n()];
            for &r in &fit.train_rows {
                mark[r] = true;
            }
            (0..t.n()).filter(|&i| !mark[i]).collect()
        };
        let oracle: Vec<f64> =
            rows.iter().map(|&r| cfg.posterior_mean(t.stats()[(r, 0)])).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (md, mo) = (mean(&derived), mean(&oracle));
        let cov: f64 =
            derived.iter().zip(&oracle).map(|(a, b)| (a - md) * (b - mo)).sum();
        let va: f64 = derived.iter().map(|a| (a - md).powi(2)).sum();
        let vb: f64 = oracle.iter().map(|b| (b - mo).powi(2)).sum();
        let r = cov / (va * vb).sqrt();
        assert!(r.abs() > 0.99, "correlation {r}");
    }

    #[test]
    fn equalised_fraction_restores_n_eff() {
        let spec =
            SimulatorSpec::new(ModelConfig::GaussianToy(GaussianToyConfig::default()), 61)
                .unwrap();
        let t = generate_table(&spec, 4000).unwrap();
        let fit = fit_posterior_loss(&t, 0.1, BasisSpec::Identity, 4).unwrap();
        let f = equalised_acceptance_fraction(t.n(), fit.heldout.n(), 0.01);
        let obs = fit.heldout.observation_from_row(0);
        let s = rejection_abc(&fit.heldout, &obs, &SubsetMask::all(fit.heldout.p()), f)
            .unwrap();
        let target = (0.01 * t.n() as f64).ceil() as usize;
        assert!(s.n_eff() >= target && s.n_eff() <= target + 2, "n_eff {}", s.n_eff());
    }

    #[test]
    fn projection_csv_round_trip() {
        let map = ProjectionMap {
            offset: DVector::from_column_slice(&[0.5, -1.25]),
            coefficients: DMatrix::from_row_slice(2, 4, &[1.0, 0.0, -3.5, 2.0, 0.25, 4.0, 0.0, 1e-9]),
            basis: BasisSpec::Powers,
            n_components: 2,
            stat_names: vec!["count".into()],
        };
        let mut buf = Vec::new();
        map.write_csv(&mut buf).unwrap();
        let back = ProjectionMap::read_csv(buf.as_slice()).unwrap();
        assert_eq!(map, back);
    }
}
