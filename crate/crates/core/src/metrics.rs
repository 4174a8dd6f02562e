//! Held-out log-likelihood, Wasserstein-2 and MMTV.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{DensityModel, FlowError};
use crate::preference::{Diagnostics, PreferenceDataset, PreferenceError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample sets differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("sample sets differ in dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("sample set is empty")]
    Empty,
    #[error("non-finite sample coordinate")]
    NonFinite,
    #[error("invalid metric configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Mean ranking log-likelihood with utilities `f`.
pub fn mean_ranking_loglik<F>(dataset: &PreferenceDataset, s: f64, mut f: F) -> Result<(f64, Diagnostics), MetricError>
where
    F: FnMut(&[f64]) -> Result<f64, MetricError>,
{
    if !(s > 0.0 && s.is_finite()) {
        return Err(PreferenceError::Precision(s).into());
    }
    if dataset.is_empty() {
        return Err(PreferenceError::Empty.into());
    }
    let mut diag = Diagnostics::default();
    let mut total = 0.0;
    let mut values = Vec::new();
    for obs in dataset.observations() {
        values.clear();
        for p in &obs.points {
            values.push(f(p)?);
        }
        total += obs.log_likelihood(&values, s, &mut diag);
    }
    Ok((total / dataset.len() as f64, diag))
}

pub fn heldout_loglik<M: DensityModel + ?Sized>(model: &M, dataset: &PreferenceDataset, s: f64) -> Result<f64, MetricError> {
    Ok(mean_ranking_loglik(dataset, s, |x| Ok(model.log_density(x)?))?.0)
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    // shortest augmenting paths with potentials; 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize, MetricError> {
    let (Some(a0), Some(b0)) = (a.first(), b.first()) else {
        return Err(MetricError::Empty);
    };
    let d = a0.len();
    if b0.len() != d {
        return Err(MetricError::DimensionMismatch(d, b0.len()));
    }
    for p in a.iter().chain(b) {
        if p.len() != d {
            return Err(MetricError::DimensionMismatch(d, p.len()));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(MetricError::NonFinite);
        }
    }
    Ok(d)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Exact W2 between two equal-size empirical measures.
pub fn wasserstein_exact(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    check_sets(a, b)?;
    let n = a.len();
    let mut cost = Vec::with_capacity(n * n);
    for x in a {
        for y in b {
            cost.push(sq_dist(x, y));
        }
    }
    let assignment = min_cost_assignment(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WassersteinConfig {
    /// Points per resample.
    pub m: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for WassersteinConfig {
    fn default() -> Self {
        Self {
            m: 512,
            resamples: 4,
            seed: 0,
        }
    }
}

/// Mean of exact W2 over resampled subsets. Each resample picks the same
/// indices from both sets; sets no larger than `m` are used whole.
pub fn wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &WassersteinConfig) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    check_sets(a, b)?;
    if cfg.m == 0 || cfg.resamples == 0 {
        return Err(MetricError::Config("m and resamples must be positive".into()));
    }
    if a.len() <= cfg.m {
        return wasserstein_exact(a, b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total = 0.0;
    for _ in 0..cfg.resamples {
        let idx = index::sample(&mut rng, a.len(), cfg.m);
        let sa: Vec<Vec<f64>> = idx.iter().map(|i| a[i].clone()).collect();
        let sb: Vec<Vec<f64>> = idx.iter().map(|i| b[i].clone()).collect();
        total += wasserstein_exact(&sa, &sb)?;
    }
    Ok(total / cfg.resamples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmtvConfig {
    pub bins: usize,
    /// Leading points of each set that enter the histograms.
    pub max_samples: usize,
}

impl Default for MmtvConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            max_samples: 5000,
        }
    }
}

/// Mean over coordinates of the histogram total variation.
pub fn mmtv(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &MmtvConfig) -> Result<f64, MetricError> {
    let d = check_sets(a, b)?;
    if cfg.bins == 0 || cfg.max_samples == 0 {
        return Err(MetricError::Config("bins and max_samples must be positive".into()));
    }
    let a = &a[..a.len().min(cfg.max_samples)];
    let b = &b[..b.len().min(cfg.max_samples)];
    let mut sum = 0.0;
    for i in 0..d {
        let (lo, hi) = a
            .iter()
            .chain(b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[i]), hi.max(p[i])));
        if hi <= lo {
            continue;
        }
        let width = (hi - lo) / cfg.bins as f64;
        let hist = |set: &[Vec<f64>]| {
            let mut h = vec![0.0; cfg.bins];
            for p in set {
                let j = (((p[i] - lo) / width) as usize).min(cfg.bins - 1);
                h[j] += 1.0 / set.len() as f64;
            }
            h
        };
        let (ha, hb) = (hist(a), hist(b));
        sum += 0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok((sum / d as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub samples: usize,
    pub wasserstein: WassersteinConfig,
    pub mmtv: MmtvConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            wasserstein: WassersteinConfig::default(),
            mmtv: MmtvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMetadata {
    pub model_samples: usize,
    pub target_samples: usize,
    pub heldout_observations: usize,
    pub wasserstein_order: u32,
    pub wasserstein_m: usize,
    pub wasserstein_resamples: usize,
    pub mmtv_bins: usize,
    pub sample_seed: u64,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub loglik: f64,
    pub wasserstein: f64,
    pub mmtv: f64,
    pub metadata: MetricMetadata,
}

/// Scores `model` against target draws and a held-out preference set.
pub fn evaluate<M: DensityModel + ?Sized>(
    model: &M,
    target_samples: &[Vec<f64>],
    heldout: &PreferenceDataset,
    s_lik: f64,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<MetricReport, MetricError> {
    let (loglik, diagnostics) = mean_ranking_loglik(heldout, s_lik, |x| Ok(model.log_density(x)?))?;
    let model_samples = model.sample(target_samples.len(), seed)?;
    let wcfg = WassersteinConfig { seed, ..cfg.wasserstein };
    Ok(MetricReport {
        loglik,
        wasserstein: wasserstein(&model_samples, target_samples, &wcfg)?,
        mmtv: mmtv(&model_samples, target_samples, &cfg.mmtv)?,
        metadata: MetricMetadata {
            model_samples: model_samples.len(),
            target_samples: target_samples.len(),
            heldout_observations: heldout.len(),
            wasserstein_order: 2,
            wasserstein_m: wcfg.m.min(target_samples.len()),
            wasserstein_resamples: if target_samples.len() <= wcfg.m { 1 } else { wcfg.resamples },
            mmtv_bins: cfg.mmtv.bins,
            sample_seed: seed,
            diagnostics,
        },
    })
}
