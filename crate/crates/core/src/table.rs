//! Fundamental data types shared by every method: the reference table of
//! simulated (parameter, statistic) pairs, statistic standardisation,
//! distance computation, the Epanechnikov kernel and bandwidth calibration.

use crate::error::{AbcError, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{Read, Write};
use std::path::Path;

/// n simulated (parameter vector, summary vector) pairs with names.
///
/// Row `i` of `params` and row `i` of `stats` come from the same simulation.
#[derive(Debug, Clone)]
pub struct ReferenceTable {
    params: DMatrix<f64>,
    stats: DMatrix<f64>,
    param_names: Vec<String>,
    stat_names: Vec<String>,
    scales: std::sync::OnceLock<StandardisationSpec>,
}

impl PartialEq for ReferenceTable {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.stats == other.stats
            && self.param_names == other.param_names
            && self.stat_names == other.stat_names
    }
}

impl ReferenceTable {
    pub fn new(
        params: DMatrix<f64>,
        stats: DMatrix<f64>,
        param_names: Vec<String>,
        stat_names: Vec<String>,
    ) -> Result<Self> {
        if params.nrows() == 0 || params.ncols() == 0 || stats.ncols() == 0 {
            return Err(AbcError::InvalidInput(
                "reference table requires n >= 1, q >= 1, p >= 1".into(),
            ));
        }
        if params.nrows() != stats.nrows() {
            return Err(AbcError::InvalidInput(format!(
                "params has {} rows but stats has {}",
                params.nrows(),
                stats.nrows()
            )));
        }
        if param_names.len() != params.ncols() || stat_names.len() != stats.ncols() {
            return Err(AbcError::InvalidInput("name/column count mismatch".into()));
        }
        if params.iter().any(|v| !v.is_finite()) || stats.iter().any(|v| !v.is_finite()) {
            return Err(AbcError::InvalidInput(
                "reference table contains non-finite entries".into(),
            ));
        }
        Ok(Self { params, stats, param_names, stat_names, scales: std::sync::OnceLock::new() })
    }

    /// MAD standardisation scales, computed on first use and cached.
    pub fn standardisation(&self) -> &StandardisationSpec {
        self.scales.get_or_init(|| compute_scales(self))
    }

    pub fn n(&self) -> usize {
        self.params.nrows()
    }

    /// Number of parameters q.
    pub fn q(&self) -> usize {
        self.params.ncols()
    }

    /// Number of candidate summary statistics p.
    pub fn p(&self) -> usize {
        self.stats.ncols()
    }

    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }

    pub fn stats(&self) -> &DMatrix<f64> {
        &self.stats
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn param_row(&self, i: usize) -> DVector<f64> {
        self.params.row(i).transpose()
    }

    pub fn stat_row(&self, i: usize) -> DVector<f64> {
        self.stats.row(i).transpose()
    }

    /// Per-parameter standard deviations over all n simulations (the RSSE scale).
    pub fn param_sds(&self) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_fn(self.q(), |j, _| {
            let col = self.params.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
    }

    /// Copy of the table without row `i` (leave-one-out evaluation).
    pub fn without_row(&self, i: usize) -> ReferenceTable {
        let keep: Vec<usize> = (0..self.n()).filter(|&r| r != i).collect();
        self.subset_rows(&keep)
    }

    pub fn subset_rows(&self, rows: &[usize]) -> ReferenceTable {
        let params = DMatrix::from_fn(rows.len(), self.q(), |i, j| self.params[(rows[i], j)]);
        let stats = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.stats[(rows[i], j)]);
        ReferenceTable {
            params,
            stats,
            param_names: self.param_names.clone(),
            stat_names: self.stat_names.clone(),
            scales: std::sync::OnceLock::new(),
        }
    }

    /// Replaces the statistic block, keeping parameters (used after projection).
    pub fn with_stats(&self, stats: DMatrix<f64>, stat_names: Vec<String>) -> Result<ReferenceTable> {
        ReferenceTable::new(self.params.clone(), stats, self.param_names.clone(), stat_names)
    }

    /// Turns row `i` into an observation with known truth.
    pub fn observation_from_row(&self, i: usize) -> Observation {
        Observation {
            s_obs: self.stat_row(i),
            theta_true: Some(self.param_row(i)),
        }
    }

    /// CSV header `param:<name>,...,stat:<name>,...`, one simulation per row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let header: Vec<String> = self
            .param_names
            .iter()
            .map(|n| format!("param:{n}"))
            .chain(self.stat_names.iter().map(|n| format!("stat:{n}")))
            .collect();
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let rec: Vec<String> = (0..self.q())
                .map(|j| format!("{}", self.params[(i, j)]))
                .chain((0..self.p()).map(|j| format!("{}", self.stats[(i, j)])))
                .collect();
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let mut param_names = Vec::new();
        let mut stat_names = Vec::new();
        for field in header.iter() {
            if let Some(name) = field.strip_prefix("param:") {
                if !stat_names.is_empty() {
                    return Err(AbcError::Csv("param column after stat columns".into()));
                }
                param_names.push(name.to_string());
            } else if let Some(name) = field.strip_prefix("stat:") {
                stat_names.push(name.to_string());
            } else {
                return Err(AbcError::Csv(format!("unrecognised column `{field}`")));
            }
        }
        let (q, p) = (param_names.len(), stat_names.len());
        let mut values: Vec<f64> = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != q + p {
                return Err(AbcError::Csv(format!(
                    "row {} has {} fields, expected {}",
                    n + 1,
                    rec.len(),
                    q + p
                )));
            }
            for field in rec.iter() {
                values.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| AbcError::Csv(format!("bad number `{field}`: {e}")))?,
                );
            }
            n += 1;
        }
        let params = DMatrix::from_fn(n, q, |i, j| values[i * (q + p) + j]);
        let stats = DMatrix::from_fn(n, p, |i, j| values[i * (q + p) + q + j]);
        ReferenceTable::new(params, stats, param_names, stat_names)
    }

    pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Observed summary values, with the generating parameter when known
/// (leave-one-out evaluation mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub s_obs: DVector<f64>,
    pub theta_true: Option<DVector<f64>>,
}

impl Observation {
    pub fn new(s_obs: DVector<f64>) -> Self {
        Self { s_obs, theta_true: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Epanechnikov,
}

/// Smoothing kernel with scale (bandwidth) `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub epsilon: f64,
    pub family: KernelFamily,
    /// Realised effective number of simulations at calibration (accepted rows,
    /// ties included). May exceed ceil(n * fraction) when distances tie.
    pub n_eff: usize,
}

/// Boolean inclusion vector over the p candidate statistics.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    pub include: Vec<bool>,
}

impl SubsetMask {
    pub fn all(p: usize) -> Self {
        Self { include: vec![true; p] }
    }

    pub fn none(p: usize) -> Self {
        Self { include: vec![false; p] }
    }

    pub fn singleton(p: usize, j: usize) -> Self {
        let mut include = vec![false; p];
        include[j] = true;
        Self { include }
    }

    pub fn from_indices(p: usize, idx: &[usize]) -> Self {
        let mut include = vec![false; p];
        for &j in idx {
            include[j] = true;
        }
        Self { include }
    }

    pub fn count(&self) -> usize {
        self.include.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.include.len()).filter(|&j| self.include[j]).collect()
    }

    pub fn with(&self, j: usize) -> SubsetMask {
        let mut m = self.clone();
        m.include[j] = true;
        m
    }

    pub fn without(&self, j: usize) -> SubsetMask {
        let mut m = self.clone();
        m.include[j] = false;
        m
    }

    /// Bitstring form `01101...`, index 0 first (CSV trace format).
    pub fn bitstring(&self) -> String {
        self.include.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Accepted parameter draws with normalised kernel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub thetas: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub source_rows: Vec<usize>,
}

impl WeightedSample {
    /// Effective number of simulations (rows with strictly positive weight).
    pub fn n_eff(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn q(&self) -> usize {
        self.thetas.ncols()
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        self.thetas.transpose() * &self.weights
    }

    /// Weights rescaled so they average 1 (sum n_eff). Regularised fits use
    /// this scale: the lambda grids assume kernel weights in [0, 1] per row,
    /// not weights normalised to sum 1.
    pub fn fitting_weights(&self) -> DVector<f64> {
        &self.weights * self.n_eff() as f64
    }

    /// Same draws, weights reset to uniform 1/m (the evaluation-mode convention).
    pub fn with_uniform_weights(&self) -> WeightedSample {
        let m = self.n_eff();
        WeightedSample {
            thetas: self.thetas.clone(),
            weights: DVector::from_element(m, 1.0 / m as f64),
            source_rows: self.source_rows.clone(),
        }
    }
}

/// Per-statistic positive scales from mean-absolute-deviation standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardisationSpec {
    pub scales: DVector<f64>,
    /// Statistics whose MAD was zero (constant column); their scale is set to 1
    /// so the statistic is distance-neutral instead of dividing by zero.
    pub degenerate: Vec<usize>,
}

impl StandardisationSpec {
    pub fn method(&self) -> &'static str {
        "mean-absolute-deviation"
    }
}

/// Mean absolute deviation about the mean, per statistic column.
///
/// This is the MAD in the mean-deviation sense, not the median-based estimator;
/// the two are often conflated, hence the explicit name on the spec type.
/// Statistics are never centred: centring cancels in distances.
pub fn compute_scales(table: &ReferenceTable) -> StandardisationSpec {
    let n = table.n();
    let data = table.stats().as_slice(); // column-major
    let mut degenerate = Vec::new();
    let scales = DVector::from_fn(table.p(), |j, _| {
        let col = &data[j * n..(j + 1) * n];
        let mean = col.iter().sum::<f64>() / n as f64;
        let mad = col.iter().map(|v| (v - mean).abs()).sum::<f64>() / n as f64;
        if mad > 0.0 {
            mad
        } else {
            degenerate.push(j);
            1.0
        }
    });
    StandardisationSpec { scales, degenerate }
}

/// Standardised Euclidean distances from each table row to the observation,
/// over the masked statistics only.
pub fn distances(
    table: &ReferenceTable,
    obs: &Observation,
    spec: &StandardisationSpec,
    mask: &SubsetMask,
) -> Result<Vec<f64>> {
    if mask.include.len() != table.p() || obs.s_obs.len() != table.p() {
        return Err(AbcError::InvalidInput("mask/observation length mismatch".into()));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(AbcError::InvalidInput("mask selects no statistics".into()));
    }
    let data = table.stats().as_slice(); // column-major
    let n = table.n();
    let mut acc = vec![0.0f64; n];
    for &j in &idx {
        let col = &data[j * n..(j + 1) * n];
        let o = obs.s_obs[j];
        let inv = 1.0 / spec.scales[j];
        for (a, v) in acc.iter_mut().zip(col) {
            let z = (v - o) * inv;
            *a += z * z;
        }
    }
    for v in &mut acc {
        *v = v.sqrt();
    }
    Ok(acc)
}

/// Calibrates the kernel scale so that a fixed fraction of simulations is
/// accepted: with k = ceil(n * fraction), epsilon is placed strictly between
/// the k-th and (k+1)-th order statistic of the distances, so every accepted
/// row gets a strictly positive Epanechnikov weight. Rows tied at the k-th
/// distance are all accepted, so the realised n_eff may exceed k.
pub fn calibrate_epsilon(dists: &[f64], acceptance_fraction: f64) -> Result<KernelSpec> {
    let n = dists.len();
    if !(acceptance_fraction > 0.0 && acceptance_fraction <= 1.0) {
        return Err(AbcError::InvalidInput(format!(
            "acceptance fraction {acceptance_fraction} outside (0, 1]"
        )));
    }
    let k = (n as f64 * acceptance_fraction).ceil() as usize;
    if k < 2 {
        return Err(AbcError::InvalidInput(format!(
            "n * fraction = {} < 2 accepted simulations",
            n as f64 * acceptance_fraction
        )));
    }
    let mut work = dists.to_vec();
    if work.iter().any(|v| !v.is_finite()) {
        return Err(AbcError::InvalidInput("non-finite distance".into()));
    }
    let (_, d_k, _) = work.select_nth_unstable_by(k - 1, f64::total_cmp);
    let d_k = *d_k;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut n_eff = 0;
    let mut next = f64::INFINITY;
    for &d in dists {
        lo = lo.min(d);
        hi = hi.max(d);
        if d <= d_k {
            n_eff += 1;
        } else if d < next {
            next = d;
        }
    }
    if lo == hi {
        return Err(AbcError::DegenerateDistances);
    }
    // All rows tied at d_(k) are accepted.
    let epsilon = if n_eff < n {
        0.5 * (d_k + next)
    } else {
        // Full acceptance: nudge above the maximum so every row keeps a
        // strictly positive weight.
        let step = (d_k.abs() * 1e-9).max(1e-300);
        d_k + step
    };
    Ok(KernelSpec { epsilon, family: KernelFamily::Epanechnikov, n_eff })
}

/// Raw (pre-normalisation) Epanechnikov weights: w_i = 1 - (d_i/eps)^2 inside
/// the support, 0 outside.
pub fn kernel_weights(dists: &[f64], kernel: &KernelSpec) -> Result<Vec<f64>> {
    if kernel.epsilon <= 0.0 {
        return Err(AbcError::InvalidInput("kernel epsilon must be positive".into()));
    }
    let w: Vec<f64> = dists
        .iter()
        .map(|&d| {
            let u = d / kernel.epsilon;
            if u <= 1.0 {
                1.0 - u * u
            } else {
                0.0
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(AbcError::EmptyAcceptance);
    }
    Ok(w)
}

/// Assembles a weighted posterior sample: rows with zero weight are dropped
/// and the remaining weights normalised to sum to one.
pub fn assemble_sample(
    table: &ReferenceTable,
    raw_weights: &[f64],
) -> Result<WeightedSample> {
    let source_rows: Vec<usize> =
        (0..raw_weights.len()).filter(|&i| raw_weights[i] > 0.0).collect();
    if source_rows.is_empty() {
        return Err(AbcError::EmptyAcceptance);
    }
    let total: f64 = source_rows.iter().map(|&i| raw_weights[i]).sum();
    let thetas = DMatrix::from_fn(source_rows.len(), table.q(), |i, j| {
        table.params()[(source_rows[i], j)]
    });
    let weights = DVector::from_fn(source_rows.len(), |i, _| raw_weights[source_rows[i]] / total);
    Ok(WeightedSample { thetas, weights, source_rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn table_1col(stats: &[f64]) -> ReferenceTable {
        let n = stats.len();
        ReferenceTable::new(
            DMatrix::zeros(n, 1),
            DMatrix::from_column_slice(n, 1, stats),
            vec!["theta".into()],
            vec!["s".into()],
        )
        .unwrap()
    }

    #[test]
    fn mad_scale_direct_arithmetic() {
        let t = table_1col(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let spec = compute_scales(&t);
        assert_relative_eq!(spec.scales[0], 1.2, epsilon = 1e-12);
        assert!(spec.degenerate.is_empty());
    }

    #[test]
    fn constant_column_gets_unit_scale_and_flag() {
        let t = table_1col(&[7.0, 7.0, 7.0]);
        let spec = compute_scales(&t);
        assert_eq!(spec.scales[0], 1.0);
        assert_eq!(spec.degenerate, vec![0]);
    }

    #[test]
    fn mad_of_standard_normal_matches_closed_form() {
        // E|Z| = sqrt(2/pi) for Z ~ N(0,1).
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let spec = compute_scales(&table_1col(&draws));
        assert_relative_eq!(spec.scales[0], (2.0 / std::f64::consts::PI).sqrt(), epsilon = 0.02);
    }

    #[test]
    fn distances_identity_scaling() {
        let t = table_1col(&[0.0, 3.0]);
        let spec = StandardisationSpec { scales: DVector::from_element(1, 1.0), degenerate: vec![] };
        let obs = Observation::new(DVector::from_element(1, 0.0));
        let d = distances(&t, &obs, &spec, &SubsetMask::all(1)).unwrap();
        assert_eq!(d, vec![0.0, 3.0]);
    }

    #[test]
    fn duplicated_column_scales_distance_by_sqrt2() {
        let n = 4;
        let vals = [0.5, 1.5, -0.25, 2.0];
        let stats2 = DMatrix::from_fn(n, 2, |i, _| vals[i]);
        let t2 = ReferenceTable::new(
            DMatrix::zeros(n, 1),
            stats2,
            vec!["theta".into()],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let t1 = table_1col(&vals);
        let obs1 = Observation::new(DVector::from_element(1, 0.3));
        let obs2 = Observation::new(DVector::from_element(2, 0.3));
        let d1 = distances(&t1, &obs1, &compute_scales(&t1), &SubsetMask::all(1)).unwrap();
        let d2 = distances(&t2, &obs2, &compute_scales(&t2), &SubsetMask::all(2)).unwrap();
        for i in 0..n {
            assert_relative_eq!(d2[i], d1[i] * 2f64.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn distances_match_naive_double_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (n, p) = (40, 5);
        let stats = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t = ReferenceTable::new(
            DMatrix::zeros(n, 1),
            stats.clone(),
            vec!["theta".into()],
            (0..p).map(|j| format!("s{j}")).collect(),
        )
        .unwrap();
        let obs = Observation::new(DVector::from_fn(p, |_, _| rng.sample(StandardNormal)));
        let spec = compute_scales(&t);
        let d = distances(&t, &obs, &spec, &SubsetMask::all(p)).unwrap();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..p {
                let z = (stats[(i, j)] - obs.s_obs[j]) / spec.scales[j];
                acc += z * z;
            }
            assert_relative_eq!(d[i], acc.sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn epsilon_is_order_statistic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut dists: Vec<f64> = (0..1000).map(|i| i as f64 + 0.5).collect();
        dists.shuffle(&mut rng);
        let k = calibrate_epsilon(&dists, 0.01).unwrap();
        assert_eq!(k.n_eff, 10);
        // strictly between the 10th and 11th order statistics
        assert!(k.epsilon > 9.5 && k.epsilon < 10.5);
    }

    #[test]
    fn tie_rule_accepts_all_tied_rows() {
        let k = calibrate_epsilon(&[1.0, 1.0, 1.0, 2.0], 0.5).unwrap();
        assert_eq!(k.n_eff, 3);
        assert!(k.epsilon > 1.0 && k.epsilon < 2.0);
    }

    #[test]
    fn degenerate_distances_rejected() {
        assert!(matches!(
            calibrate_epsilon(&[2.0; 10], 0.5),
            Err(AbcError::DegenerateDistances)
        ));
    }

    #[test]
    fn full_acceptance_keeps_positive_weights() {
        let dists = [0.0, 1.0, 2.0, 3.0];
        let k = calibrate_epsilon(&dists, 1.0).unwrap();
        assert_eq!(k.n_eff, 4);
        let w = kernel_weights(&dists, &k).unwrap();
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn kernel_weight_values() {
        let k = KernelSpec { epsilon: 2.0, family: KernelFamily::Epanechnikov, n_eff: 0 };
        let w = kernel_weights(&[0.0, 1.0, 2.5], &k).unwrap();
        assert_eq!(w[0], 1.0); // kernel mode
        assert_relative_eq!(w[1], 0.75, epsilon = 1e-15); // d = eps/2
        assert_eq!(w[2], 0.0); // outside compact support
    }

    #[test]
    fn all_zero_weights_is_an_error() {
        let k = KernelSpec { epsilon: 0.5, family: KernelFamily::Epanechnikov, n_eff: 0 };
        assert!(matches!(kernel_weights(&[1.0, 2.0], &k), Err(AbcError::EmptyAcceptance)));
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let t = ReferenceTable::new(
            DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal)),
            DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal)),
            vec!["a".into(), "b".into()],
            vec!["s1".into(), "s2".into(), "s3".into()],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = ReferenceTable::read_csv(&buf[..]).unwrap();
        assert_eq!(t, back);
        let header = String::from_utf8_lossy(&buf);
        assert!(header.starts_with("param:a,param:b,stat:s1,stat:s2,stat:s3"));
    }

    proptest! {
        // MAD standardisation cancels any positive per-column rescaling.
        #[test]
        fn scale_invariance(c in 1e-3f64..1e3, seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 30;
            let vals: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let obs_v: f64 = rng.sample(StandardNormal);
            let t1 = table_1col(&vals);
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let t2 = table_1col(&scaled);
            let o1 = Observation::new(DVector::from_element(1, obs_v));
            let o2 = Observation::new(DVector::from_element(1, obs_v * c));
            let d1 = distances(&t1, &o1, &compute_scales(&t1), &SubsetMask::all(1)).unwrap();
            let d2 = distances(&t2, &o2, &compute_scales(&t2), &SubsetMask::all(1)).unwrap();
            for (a, b) in d1.iter().zip(&d2) {
                prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }

        // Kernel weights are non-increasing in distance.
        #[test]
        fn weights_monotone_in_distance(eps in 0.1f64..10.0, d1 in 0.0f64..20.0, d2 in 0.0f64..20.0) {
            let k = KernelSpec { epsilon: eps, family: KernelFamily::Epanechnikov, n_eff: 0 };
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            if let Ok(w) = kernel_weights(&[lo, hi], &k) {
                prop_assert!(w[0] >= w[1]);
            }
        }

        // Permuting rows permutes weights identically.
        #[test]
        fn row_permutation_equivariance(seed in 0u64..200) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 25;
            let vals: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let t1 = table_1col(&vals);
            let t2 = table_1col(&permuted);
            let obs = Observation::new(DVector::from_element(1, 0.1));
            let spec1 = compute_scales(&t1);
            let spec2 = compute_scales(&t2);
            let d1 = distances(&t1, &obs, &spec1, &SubsetMask::all(1)).unwrap();
            let d2 = distances(&t2, &obs, &spec2, &SubsetMask::all(1)).unwrap();
            if let (Ok(k1), Ok(k2)) = (calibrate_epsilon(&d1, 0.3), calibrate_epsilon(&d2, 0.3)) {
                let w1 = kernel_weights(&d1, &k1).unwrap();
                let w2 = kernel_weights(&d2, &k2).unwrap();
                for (i, &pi) in perm.iter().enumerate() {
                    prop_assert!((w2[i] - w1[pi]).abs() < 1e-12);
                }
            }
        }

        // Without ties, n_eff = ceil(n * f) exactly.
        #[test]
        fn n_eff_without_ties(seed in 0u64..200, f in 0.05f64..1.0) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 50;
            let dists: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let k = calibrate_epsilon(&dists, f).unwrap();
            prop_assert_eq!(k.n_eff, (n as f64 * f).ceil() as usize);
        }
    }
}
