//! Synthetic simulators at desk scale: a conjugate Gaussian toy with noise and
//! near-duplicate statistics, a heteroscedastic toy, and a spherical
//! stereological extremes model (Poisson inclusion count, generalised Pareto
//! sizes, planar sectioning).

use crate::error::{AbcError, Result};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

/// Per-parameter prior descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

impl Prior {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Uniform { lo, hi } => rng.gen_range(lo..hi),
            Prior::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(AbcError::Config(format!(
                        "uniform prior bounds ({lo}, {hi}) must be finite with lo < hi"
                    )));
                }
            }
            Prior::Normal { mean, sd } => {
                if !(mean.is_finite() && sd.is_finite() && sd > 0.0) {
                    return Err(AbcError::Config(format!(
                        "normal prior ({mean}, {sd}) requires finite mean and sd > 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Support bounds used for binning (normal priors use mean +/- 6 sd).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Prior::Uniform { lo, hi } => (lo, hi),
            Prior::Normal { mean, sd } => (mean - 6.0 * sd, mean + 6.0 * sd),
        }
    }
}

/// Gaussian conjugate toy: theta ~ N(0, tau0^2), data are n0 draws N(theta, 1).
/// Statistics: sample mean (sufficient), sample median, `k_noise` independent
/// N(0,1) columns, and `k_dup` near-exact duplicates of the mean column
/// (perturbation sd `dup_sd`, default 1e-3 so the duplicate variance is 1e-6)
/// for the collinearity experiment. Shrink `dup_sd` towards machine precision
/// to push the weighted design numerically singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianToyConfig {
    pub tau0: f64,
    pub n0: usize,
    pub k_noise: usize,
    pub k_dup: usize,
    pub dup_sd: f64,
}

impl Default for GaussianToyConfig {
    fn default() -> Self {
        Self { tau0: 3.0, n0: 20, k_noise: 4, k_dup: 0, dup_sd: 1e-3 }
    }
}

impl GaussianToyConfig {
    /// Conjugate posterior mean given the observed sample mean statistic.
    pub fn posterior_mean(&self, y_bar: f64) -> f64 {
        let t2 = self.tau0 * self.tau0;
        t2 * self.n0 as f64 * y_bar / (self.n0 as f64 * t2 + 1.0)
    }

    pub fn posterior_variance(&self) -> f64 {
        let t2 = self.tau0 * self.tau0;
        t2 / (self.n0 as f64 * t2 + 1.0)
    }
}

/// Heteroscedastic toy: theta ~ U(1,10), s1 = theta (1 + 0.3 N(0,1)) so the
/// conditional sd of s1 is 0.3 theta, s2 is pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeteroToyConfig {
    pub noise_coeff: f64,
}

impl Default for HeteroToyConfig {
    fn default() -> Self {
        Self { noise_coeff: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileSpacing {
    /// Probabilities i/(n_quantiles + 1), i = 1..n_quantiles.
    Equal,
    /// Spacing concentrated near the upper tail, always including the maximum.
    MaxFavouring,
}

/// Spherical stereological extremes model: inclusion count from a Poisson
/// process with rate tau, 3-D diameters u + GPD(sigma, xi), spheres cut by the
/// inspection plane when the centre depth is within half the diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereologyConfig {
    /// Measurement threshold (micrometres).
    pub threshold: f64,
    /// Slab half-depth Z (micrometres).
    pub half_depth: f64,
    pub n_quantiles: usize,
    pub spacing: QuantileSpacing,
    /// Cap on 3-D diameters; draws beyond it (large xi) are truncated.
    pub diameter_cap: f64,
}

impl Default for StereologyConfig {
    fn default() -> Self {
        Self {
            threshold: 5.0,
            half_depth: 60.0,
            n_quantiles: 20,
            spacing: QuantileSpacing::Equal,
            diameter_cap: 1e6,
        }
    }
}

impl StereologyConfig {
    pub fn quantile_probs(&self) -> Vec<f64> {
        let m = self.n_quantiles;
        match self.spacing {
            QuantileSpacing::Equal => (1..=m).map(|i| i as f64 / (m as f64 + 1.0)).collect(),
            QuantileSpacing::MaxFavouring => {
                // p_i = 1 - ((m - i)/m)^2: denser near 1, p_m = 1 exactly.
                (1..=m).map(|i| 1.0 - ((m - i) as f64 / m as f64).powi(2)).collect()
            }
        }
    }
}

/// Model identifier plus constants, as referenced by `SimulatorSpec` and the
/// CLI config (`gaussian-toy`, `hetero-toy`, `stereology`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_id", rename_all = "kebab-case")]
pub enum ModelConfig {
    GaussianToy(GaussianToyConfig),
    HeteroToy(HeteroToyConfig),
    Stereology(StereologyConfig),
}

impl ModelConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ModelConfig::GaussianToy(_) => "gaussian-toy",
            ModelConfig::HeteroToy(_) => "hetero-toy",
            ModelConfig::Stereology(_) => "stereology",
        }
    }

    pub fn priors(&self) -> Vec<Prior> {
        match self {
            ModelConfig::GaussianToy(c) => vec![Prior::Normal { mean: 0.0, sd: c.tau0 }],
            ModelConfig::HeteroToy(_) => vec![Prior::Uniform { lo: 1.0, hi: 10.0 }],
            ModelConfig::Stereology(_) => vec![
                Prior::Uniform { lo: 10.0, hi: 200.0 },
                Prior::Uniform { lo: 0.1, hi: 5.0 },
                Prior::Uniform { lo: -0.5, hi: 1.0 },
            ],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ModelConfig::GaussianToy(_) | ModelConfig::HeteroToy(_) => vec!["theta".into()],
            ModelConfig::Stereology(_) => vec!["tau".into(), "sigma".into(), "xi".into()],
        }
    }

    pub fn stat_names(&self) -> Vec<String> {
        match self {
            ModelConfig::GaussianToy(c) => {
                let mut names = vec!["mean".into(), "median".into()];
                names.extend((0..c.k_noise).map(|i| format!("noise{i}")));
                names.extend((0..c.k_dup).map(|i| format!("dup{i}")));
                names
            }
            ModelConfig::HeteroToy(_) => vec!["s1".into(), "s2".into()],
            ModelConfig::Stereology(c) => {
                let mut names = vec!["count".into()];
                names.extend((0..c.n_quantiles).map(|i| format!("q{i}")));
                names
            }
        }
    }

    pub fn q(&self) -> usize {
        self.param_names().len()
    }

    pub fn p(&self) -> usize {
        self.stat_names().len()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::GaussianToy(c) => {
                if c.n0 < 2 {
                    return Err(AbcError::Config("gaussian-toy requires n0 >= 2".into()));
                }
                if c.tau0 <= 0.0 {
                    return Err(AbcError::Config("gaussian-toy requires tau0 > 0".into()));
                }
                if c.dup_sd < 0.0 {
                    return Err(AbcError::Config("gaussian-toy requires dup_sd >= 0".into()));
                }
            }
            ModelConfig::HeteroToy(c) => {
                if c.noise_coeff <= 0.0 {
                    return Err(AbcError::Config("hetero-toy requires noise_coeff > 0".into()));
                }
            }
            ModelConfig::Stereology(c) => {
                if c.threshold <= 0.0 || c.half_depth <= 0.0 || c.n_quantiles == 0 {
                    return Err(AbcError::Config(
                        "stereology requires positive threshold, half-depth and quantile count"
                            .into(),
                    ));
                }
            }
        }
        for prior in self.priors() {
            prior.validate()?;
        }
        Ok(())
    }

    /// Runs one simulation: summary statistics for the given parameter draw.
    /// `None` signals a failed draw (redrawn by the sampler).
    pub fn simulate<R: Rng>(&self, theta: &DVector<f64>, rng: &mut R) -> Option<DVector<f64>> {
        let stats = match self {
            ModelConfig::GaussianToy(c) => simulate_gaussian_toy(c, theta[0], rng),
            ModelConfig::HeteroToy(c) => simulate_hetero_toy(c, theta[0], rng),
            ModelConfig::Stereology(c) => {
                simulate_stereology(c, theta[0], theta[1], theta[2], rng)
            }
        };
        if stats.iter().all(|v| v.is_finite()) {
            Some(stats)
        } else {
            None
        }
    }
}

fn simulate_gaussian_toy<R: Rng>(c: &GaussianToyConfig, theta: f64, rng: &mut R) -> DVector<f64> {
    let mut data: Vec<f64> =
        (0..c.n0).map(|_| theta + rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = data.iter().sum::<f64>() / c.n0 as f64;
    data.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if c.n0 % 2 == 0 {
        0.5 * (data[c.n0 / 2 - 1] + data[c.n0 / 2])
    } else {
        data[c.n0 / 2]
    };
    let mut stats = Vec::with_capacity(2 + c.k_noise + c.k_dup);
    stats.push(mean);
    stats.push(median);
    for _ in 0..c.k_noise {
        stats.push(rng.sample::<f64, _>(StandardNormal));
    }
    for _ in 0..c.k_dup {
        stats.push(mean + c.dup_sd * rng.sample::<f64, _>(StandardNormal));
    }
    DVector::from_vec(stats)
}

fn simulate_hetero_toy<R: Rng>(c: &HeteroToyConfig, theta: f64, rng: &mut R) -> DVector<f64> {
    let s1 = theta * (1.0 + c.noise_coeff * rng.sample::<f64, _>(StandardNormal));
    let s2 = rng.sample::<f64, _>(StandardNormal);
    DVector::from_vec(vec![s1, s2])
}

/// Exceedance draw from GPD(sigma, xi); xi = 0 reduces to Exponential(sigma).
pub fn sample_gpd<R: Rng>(sigma: f64, xi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    if xi.abs() < 1e-12 {
        -sigma * u.ln()
    } else {
        sigma * (u.powf(-xi) - 1.0) / xi
    }
}

fn simulate_stereology<R: Rng>(
    c: &StereologyConfig,
    tau: f64,
    sigma: f64,
    xi: f64,
    rng: &mut R,
) -> DVector<f64> {
    let rate = tau * c.half_depth;
    let n_spheres = Poisson::new(rate).map(|d| d.sample(rng) as usize).unwrap_or(0);
    let depth = Uniform::new(-c.half_depth, c.half_depth);
    let mut observed: Vec<f64> = Vec::new();
    for _ in 0..n_spheres {
        let v = (c.threshold + sample_gpd(sigma, xi, rng)).min(c.diameter_cap);
        let z = depth.sample(rng);
        // Cut by the plane iff the centre depth is within half the diameter;
        // spheres larger than the slab are always cut (truncation at Z).
        let half = (v / 2.0).min(c.half_depth);
        if z.abs() < half {
            let d = (v * v - 4.0 * z * z).sqrt();
            if d > c.threshold {
                observed.push(d - c.threshold);
            }
        }
    }
    observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut stats = Vec::with_capacity(1 + c.n_quantiles);
    stats.push(observed.len() as f64);
    if observed.is_empty() {
        stats.extend(std::iter::repeat(0.0).take(c.n_quantiles));
    } else {
        for prob in c.quantile_probs() {
            stats.push(empirical_quantile(&observed, prob));
        }
    }
    DVector::from_vec(stats)
}

/// Order-statistic quantile of a sorted slice: the ceil(p m)-th smallest value.
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let idx = ((p * m as f64).ceil() as usize).clamp(1, m) - 1;
    sorted[idx]
}

/// Convenience wrapper used by some callers that only need the median data draw.
pub fn normal_sample_mean<R: Rng>(theta: f64, n0: usize, rng: &mut R) -> f64 {
    let dist = Normal::new(theta, 1.0).unwrap();
    (0..n0).map(|_| dist.sample(rng)).sum::<f64>() / n0 as f64
}
