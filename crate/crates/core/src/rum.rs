//! Simulated experts under exponential-noise random utility models,
//! candidate distributions, and winner-distribution analytics.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::flow::BoxDomain;
use crate::preference::{self, WinScratch};
use crate::targets::TargetDensity;

#[derive(Debug, Error)]
pub enum RumError {
    #[error("precision must be positive and finite, got {0}")]
    Precision(f64),
    #[error("choice sets need k >= 2, got {0}")]
    ChoiceSetSize(usize),
    #[error("mixture weight must lie in [0, 1], got {0}")]
    Weight(f64),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gaussian scale must be positive, got {0}")]
    Scale(f64),
    #[error("normalizing integral estimate {0} is not positive and finite")]
    Integral(f64),
    #[error("{0}")]
    Grid(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Utility = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Expert answering with utility `f(x) + W(x)`, `W ~ Exp(s)` i.i.d.
#[derive(Clone)]
pub struct RumExpert {
    utility: Utility,
    precision: f64,
}

impl fmt::Debug for RumExpert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RumExpert")
            .field("precision", &self.precision)
            .finish_non_exhaustive()
    }
}

impl RumExpert {
    pub fn new(utility: Utility, precision: f64) -> Result<Self, RumError> {
        if !(precision > 0.0 && precision.is_finite()) {
            return Err(RumError::Precision(precision));
        }
        Ok(Self { utility, precision })
    }

    /// Expert whose utility is the target's log-density.
    pub fn from_target(target: TargetDensity, precision: f64) -> Result<Self, RumError> {
        Self::new(Arc::new(move |x: &[f64]| target.log_density(x)), precision)
    }

    pub fn utility(&self, x: &[f64]) -> f64 {
        (self.utility)(x)
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    /// Ranks `set` by realized utilities, most preferred first. Ties go to
    /// the lower index.
    pub fn respond<R: Rng + ?Sized>(&self, set: &ChoiceSet, rng: &mut R) -> RankingResponse {
        let noise = Exp::new(self.precision).expect("validated precision");
        let u: Vec<f64> = set
            .points
            .iter()
            .map(|x| self.utility(x) + noise.sample(rng))
            .collect();
        let mut ranking: Vec<usize> = (0..u.len()).collect();
        ranking.sort_by(|&a, &b| u[b].total_cmp(&u[a]));
        RankingResponse { ranking }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaKind {
    Uniform,
    /// Axis-aligned gaussian with per-coordinate standard deviations.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    /// Gaussian with probability `weight`, uniform on the box otherwise.
    Mixture {
        weight: f64,
        mean: Vec<f64>,
        sd: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Uniform,
    Gaussian,
}

/// Candidate distribution restricted to a box. Out-of-box draws are
/// discarded and redrawn from scratch, so the effective density is the
/// mixture density divided by its mass inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSampler {
    domain: BoxDomain,
    kind: LambdaKind,
    weight: f64,
    log_norm: f64,
}

impl CandidateSampler {
    pub fn new(domain: BoxDomain, kind: LambdaKind) -> Result<Self, RumError> {
        let d = domain.dim();
        let weight = match &kind {
            LambdaKind::Uniform => 0.0,
            LambdaKind::Gaussian { .. } => 1.0,
            LambdaKind::Mixture { weight, .. } => *weight,
        };
        if !(0.0..=1.0).contains(&weight) {
            return Err(RumError::Weight(weight));
        }
        let mut gaussian_mass = 0.0;
        if let LambdaKind::Gaussian { mean, sd } | LambdaKind::Mixture { mean, sd, .. } = &kind {
            for (what, v) in [("mean", mean), ("sd", sd)] {
                if v.len() != d {
                    return Err(RumError::Dimension {
                        what,
                        expected: d,
                        got: v.len(),
                    });
                }
            }
            if let Some(&bad) = sd.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(RumError::Scale(bad));
            }
            gaussian_mass = (0..d)
                .map(|i| {
                    let n = Normal::new(mean[i], sd[i]).expect("valid normal");
                    n.cdf(domain.upper()[i]) - n.cdf(domain.lower()[i])
                })
                .product();
        }
        let box_mass = weight * gaussian_mass + (1.0 - weight);
        if !(box_mass > 0.0) {
            return Err(RumError::Integral(box_mass));
        }
        Ok(Self {
            domain,
            kind,
            weight,
            log_norm: -box_mass.ln(),
        })
    }

    pub fn uniform(domain: BoxDomain) -> Self {
        Self::new(domain, LambdaKind::Uniform).expect("uniform is always valid")
    }

    /// Gaussian-uniform mixture centered on `mean` with standard deviation
    /// one twelfth of the box width per coordinate, so `+-3 sd` spans half
    /// the box.
    pub fn centered_mixture(domain: BoxDomain, mean: Vec<f64>, weight: f64) -> Result<Self, RumError> {
        let sd = (0..domain.dim()).map(|i| domain.width(i) / 12.0).collect();
        let kind = if weight == 1.0 {
            LambdaKind::Gaussian { mean, sd }
        } else if weight == 0.0 {
            LambdaKind::Uniform
        } else {
            LambdaKind::Mixture { weight, mean, sd }
        };
        Self::new(domain, kind)
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn kind(&self) -> &LambdaKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn gaussian_parts(&self) -> Option<(&[f64], &[f64])> {
        match &self.kind {
            LambdaKind::Uniform => None,
            LambdaKind::Gaussian { mean, sd } | LambdaKind::Mixture { mean, sd, .. } => Some((mean, sd)),
        }
    }

    /// One draw inside the box with the component that produced it.
    pub fn draw_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (Component, Vec<f64>) {
        loop {
            let gaussian = self.weight > 0.0 && (self.weight >= 1.0 || rng.random::<f64>() < self.weight);
            let (label, x) = match (gaussian, self.gaussian_parts()) {
                (true, Some((mean, sd))) => (
                    Component::Gaussian,
                    mean.iter()
                        .zip(sd)
                        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                ),
                _ => (Component::Uniform, self.domain.sample_uniform(rng)),
            };
            if self.domain.contains(&x) {
                return (label, x);
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.draw_labeled(rng).1
    }

    /// Normalized log-density of the box-restricted distribution;
    /// `-inf` outside the box.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return f64::NEG_INFINITY;
        }
        let uniform = -self.domain.volume().ln();
        let mixture = match self.gaussian_parts() {
            None => uniform,
            Some((mean, sd)) => {
                let g: f64 = x
                    .iter()
                    .zip(mean.iter().zip(sd))
                    .map(|(v, (m, s))| -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
                    .sum();
                if self.weight >= 1.0 {
                    g
                } else {
                    let (a, b) = (self.weight.ln() + g, (1.0 - self.weight).ln() + uniform);
                    let hi = a.max(b);
                    hi + ((a - hi).exp() + (b - hi).exp()).ln()
                }
            }
        };
        mixture + self.log_norm
    }

    /// `k` i.i.d. candidates.
    pub fn choice_set<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<ChoiceSet, RumError> {
        if k < 2 {
            return Err(RumError::ChoiceSetSize(k));
        }
        Ok(ChoiceSet {
            points: (0..k).map(|_| self.draw(rng)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub points: Vec<Vec<f64>>,
}

impl ChoiceSet {
    pub fn k(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingResponse {
    /// Indices into the choice set, most preferred first.
    pub ranking: Vec<usize>,
}

impl RankingResponse {
    pub fn winner(&self) -> usize {
        self.ranking[0]
    }
}

pub fn sample_choice_set(sampler: &CandidateSampler, k: usize, seed: u64) -> Result<ChoiceSet, RumError> {
    sampler.choice_set(k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn respond_ranking(expert: &RumExpert, set: &ChoiceSet, seed: u64) -> RankingResponse {
    expert.respond(set, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Points per axis for grid quadrature of the limit normalizer.
pub const LIMIT_GRID_POINTS: usize = 512;
/// Importance draws for the limit normalizer above two dimensions.
pub const LIMIT_IS_DRAWS: usize = 100_000;

/// Density of the winner of infinitely large choice sets,
/// `exp(s f) lambda / Z`, with `Z` computed once.
#[derive(Debug, Clone)]
pub struct LimitDensity {
    expert: RumExpert,
    sampler: CandidateSampler,
    log_z: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl LimitDensity {
    /// Midpoint quadrature with [`LIMIT_GRID_POINTS`] per axis for `d <= 2`,
    /// self-normalized importance sampling from `lambda` otherwise.
    pub fn new(expert: RumExpert, sampler: CandidateSampler, seed: u64) -> Result<Self, RumError> {
        let d = sampler.dim();
        let s = expert.precision();
        let log_z = if d <= 2 {
            let grid = GridSpec::over(sampler.domain(), LIMIT_GRID_POINTS)?;
            let cell = grid.cell_volume().ln();
            let terms: Vec<f64> = grid
                .points()
                .map(|x| s * expert.utility(&x) + sampler.log_density(&x) + cell)
                .collect();
            log_sum_exp(terms.iter().copied())
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms: Vec<f64> = (0..LIMIT_IS_DRAWS)
                .map(|_| s * expert.utility(&sampler.draw(&mut rng)))
                .collect();
            log_sum_exp(terms.iter().copied()) - (LIMIT_IS_DRAWS as f64).ln()
        };
        if !log_z.is_finite() {
            return Err(RumError::Integral(log_z.exp()));
        }
        Ok(Self {
            expert,
            sampler,
            log_z,
        })
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_z
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.expert.precision() * self.expert.utility(x) + self.sampler.log_density(x) - self.log_z
    }
}

/// `log p(x)` of the limit winner density; builds the normalizer afresh.
pub fn limit_winner_log_density(
    expert: &RumExpert,
    sampler: &CandidateSampler,
    x: &[f64],
) -> Result<f64, RumError> {
    Ok(LimitDensity::new(expert.clone(), sampler.clone(), 0)?.log_density(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }

    /// Cell midpoints.
    pub fn midpoints(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        (0..self.n).map(move |i| self.lo + (i as f64 + 0.5) * self.step())
    }
}

/// Regular midpoint grid over one or more axes, first axis slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self, RumError> {
        if axes.is_empty() {
            return Err(RumError::Grid("grid needs at least one axis".into()));
        }
        if let Some(a) = axes.iter().find(|a| a.n == 0 || !(a.lo < a.hi)) {
            return Err(RumError::Grid(format!("bad axis {a:?}")));
        }
        Ok(Self { axes })
    }

    pub fn over(domain: &BoxDomain, n: usize) -> Result<Self, RumError> {
        Self::new(
            (0..domain.dim())
                .map(|i| Axis {
                    lo: domain.lower()[i],
                    hi: domain.upper()[i],
                    n,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::step).product()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |mut flat| {
            let mut p = vec![0.0; self.axes.len()];
            for (i, a) in self.axes.iter().enumerate().rev() {
                p[i] = a.lo + ((flat % a.n) as f64 + 0.5) * a.step();
                flat /= a.n;
            }
            p
        })
    }
}

/// Density values on a [`GridSpec`], in [`GridSpec::points`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl DensityGrid {
    /// Rescales so that values times cell volume sum to one.
    pub fn normalized(mut self) -> Result<Self, RumError> {
        let mass: f64 = self.values.iter().sum::<f64>() * self.grid.cell_volume();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(RumError::Integral(mass));
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(self)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Half the L1 distance between two densities on the same grid.
    pub fn total_variation(&self, other: &DensityGrid) -> f64 {
        assert_eq!(self.grid, other.grid, "grids differ");
        0.5 * self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume()
    }

    /// CSV with columns `x0[,x1..],density`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RumError> {
        let mut w = csv::Writer::from_writer(writer);
        let d = self.grid.axes.len();
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("density".into());
        w.write_record(&header)?;
        for (p, v) in self.grid.points().zip(&self.values) {
            let mut row: Vec<String> = p.iter().map(f64::to_string).collect();
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Minimum competitor draws for the winner-density estimator.
pub const MIN_WINNER_DRAWS: usize = 10_000;

/// Monte-Carlo estimate of the k-wise winner density on a 1D or 2D grid,
/// normalized over the grid.
///
/// Competitor sets of size `k - 1` are drawn once from `lambda` and shared
/// by all grid points; each draw contributes the exact win probability of
/// the grid point against it, which removes the noise of simulating the
/// choice itself.
pub fn kwise_winner_density_grid(
    expert: &RumExpert,
    sampler: &CandidateSampler,
    k: usize,
    grid: &GridSpec,
    mc_draws: usize,
    seed: u64,
) -> Result<DensityGrid, RumError> {
    if k < 2 {
        return Err(RumError::ChoiceSetSize(k));
    }
    let d = grid.axes.len();
    if d > 2 || d != sampler.dim() {
        return Err(RumError::Grid(format!(
            "winner grids need a 1D or 2D grid matching the sampler dimension {}, got {d} axes",
            sampler.dim()
        )));
    }
    if mc_draws < MIN_WINNER_DRAWS {
        return Err(RumError::Grid(format!(
            "need at least {MIN_WINNER_DRAWS} competitor draws, got {mc_draws}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let competitors: Vec<f64> = (0..mc_draws * (k - 1))
        .map(|_| expert.utility(&sampler.draw(&mut rng)))
        .collect();
    let s = expert.precision();
    let mut scratch = WinScratch::default();
    let values = grid
        .points()
        .map(|x| {
            let log_lambda = sampler.log_density(&x);
            if log_lambda == f64::NEG_INFINITY {
                return 0.0;
            }
            let fx = expert.utility(&x);
            let acc: f64 = competitors
                .chunks_exact(k - 1)
                .map(|c| preference::win_probability(fx, c, s, &mut scratch))
                .sum();
            log_lambda.exp() * acc / mc_draws as f64
        })
        .collect();
    DensityGrid {
        grid: grid.clone(),
        values,
    }
    .normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::TargetName;

    fn normal_expert(s: f64) -> RumExpert {
        RumExpert::new(Arc::new(|x: &[f64]| -0.5 * x[0] * x[0]), s).unwrap()
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            RumExpert::new(Arc::new(|_: &[f64]| 0.0), 0.0),
            Err(RumError::Precision(_))
        ));
        let dom = BoxDomain::cube(2, 1.0);
        assert!(matches!(
            CandidateSampler::centered_mixture(dom.clone(), vec![0.0, 0.0], 1.5),
            Err(RumError::Weight(_))
        ));
        assert!(matches!(
            CandidateSampler::centered_mixture(dom.clone(), vec![0.0], 0.5),
            Err(RumError::Dimension { .. })
        ));
        assert!(matches!(
            sample_choice_set(&CandidateSampler::uniform(dom), 1, 0),
            Err(RumError::ChoiceSetSize(1))
        ));
    }

    #[test]
    fn uniform_draws_center_on_box() {
        let dom = BoxDomain::new(vec![-4.0, -3.0], vec![4.0, 1.0]).unwrap();
        let sampler = CandidateSampler::uniform(dom.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50_000;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| sampler.draw(&mut rng)).collect();
        for c in 0..2 {
            let mean = pts.iter().map(|p| p[c]).sum::<f64>() / n as f64;
            let sd = dom.width(c) / 12f64.sqrt();
            assert!((mean - dom.center()[c]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn gaussian_draws_match_mean() {
        let dom = BoxDomain::cube(2, 6.0);
        let sampler = CandidateSampler::centered_mixture(dom, vec![1.0, -0.5], 1.0).unwrap();
        assert!(matches!(sampler.kind(), LambdaKind::Gaussian { .. }));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50_000;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| sampler.draw(&mut rng)).collect();
        for (c, m) in [1.0, -0.5].iter().enumerate() {
            let mean = pts.iter().map(|p| p[c]).sum::<f64>() / n as f64;
            assert!((mean - m).abs() < 4.0 * 1.0 / (n as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn mixture_component_fraction() {
        let dom = BoxDomain::cube(2, 6.0);
        let w = 1.0 / 3.0;
        let sampler = CandidateSampler::centered_mixture(dom, vec![0.0, 0.0], w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 60_000;
        let g = (0..n)
            .filter(|_| sampler.draw_labeled(&mut rng).0 == Component::Gaussian)
            .count() as f64
            / n as f64;
        assert!((g - w).abs() < 3.0 * (w * (1.0 - w) / n as f64).sqrt(), "{g}");
    }

    #[test]
    fn sampler_density_integrates_to_one_with_truncation() {
        // gaussian sticking out of the box: truncation must be renormalized
        let dom = BoxDomain::new(vec![-1.0, -2.0], vec![3.0, 2.0]).unwrap();
        let kind = LambdaKind::Mixture {
            weight: 0.6,
            mean: vec![2.5, 0.0],
            sd: vec![1.0, 0.7],
        };
        let sampler = CandidateSampler::new(dom.clone(), kind).unwrap();
        let grid = GridSpec::over(&dom, 400).unwrap();
        let mass: f64 = grid.points().map(|x| sampler.log_density(&x).exp()).sum::<f64>() * grid.cell_volume();
        assert!((mass - 1.0).abs() < 1e-4, "{mass}");
        assert_eq!(sampler.log_density(&[5.0, 0.0]), f64::NEG_INFINITY);
        // and draws follow that density: mean of x0 against quadrature
        let quad: f64 = grid
            .points()
            .map(|x| x[0] * sampler.log_density(&x).exp())
            .sum::<f64>()
            * grid.cell_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mean = (0..n).map(|_| sampler.draw(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!((mean - quad).abs() < 4.0 * 1.2 / (n as f64).sqrt(), "{mean} vs {quad}");
    }

    #[test]
    fn equal_utilities_split_evenly() {
        let expert = RumExpert::new(Arc::new(|_: &[f64]| 0.3), 1.0).unwrap();
        let set = ChoiceSet {
            points: vec![vec![0.0], vec![1.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let first = (0..n).filter(|_| expert.respond(&set, &mut rng).winner() == 0).count() as f64 / n as f64;
        assert!((first - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn noiseless_limit_sorts_utilities() {
        let expert = RumExpert::new(Arc::new(|x: &[f64]| x[0]), 1e6).unwrap();
        let set = ChoiceSet {
            points: vec![vec![0.2], vec![1.5], vec![-3.0], vec![0.9]],
        };
        for seed in 0..20 {
            assert_eq!(respond_ranking(&expert, &set, seed).ranking, vec![1, 3, 0, 2]);
        }
    }

    #[test]
    fn pairwise_win_rate_ln2_gap() {
        let expert = RumExpert::new(Arc::new(|x: &[f64]| x[0]), 1.0).unwrap();
        let set = ChoiceSet {
            points: vec![vec![2f64.ln()], vec![0.0]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let rate = (0..n).filter(|_| expert.respond(&set, &mut rng).winner() == 0).count() as f64 / n as f64;
        assert!((rate - 0.75).abs() < 3.0 * (0.75 * 0.25 / n as f64).sqrt(), "{rate}");
    }

    #[test]
    fn winner_frequencies_match_comparison_likelihood() {
        let expert = RumExpert::new(Arc::new(|x: &[f64]| x[0]), 1.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut d = preference::Diagnostics::default();
        let n = 100_000;
        for f in [vec![0.7, -0.4], vec![0.7, -0.4, 1.1], vec![0.7, -0.4, 1.1, 0.0, 0.5]] {
            let set = ChoiceSet {
                points: f.iter().map(|v| vec![*v]).collect(),
            };
            let mut wins = vec![0usize; f.len()];
            for _ in 0..n {
                wins[expert.respond(&set, &mut rng).winner()] += 1;
            }
            for (w, c) in wins.iter().enumerate() {
                let p = preference::comparison_log_likelihood(&f, w, 1.3, &mut d).exp();
                let rate = *c as f64 / n as f64;
                assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "k={} w={w}", f.len());
            }
        }
    }

    fn moon_grid_normalized(power: f64, grid: &GridSpec, t: &TargetDensity) -> Vec<f64> {
        let vals: Vec<f64> = grid.points().map(|x| power * t.log_density(&x)).collect();
        let z = log_sum_exp(vals.iter().copied()) + grid.cell_volume().ln();
        vals.iter().map(|v| v - z).collect()
    }

    #[test]
    fn uniform_limit_equals_normalized_belief() {
        let t = TargetDensity::new(TargetName::Onemoon2D);
        let sampler = CandidateSampler::uniform(t.domain().clone());
        for s in [1.0, 2.0] {
            let expert = RumExpert::from_target(t.clone(), s).unwrap();
            let limit = LimitDensity::new(expert, sampler.clone(), 0).unwrap();
            let grid = GridSpec::over(t.domain(), LIMIT_GRID_POINTS).unwrap();
            let oracle = moon_grid_normalized(s, &grid, &t);
            let worst = grid
                .points()
                .zip(&oracle)
                .map(|(x, o)| (limit.log_density(&x) - o).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-9, "s={s}: {worst}");
            // an independent finer grid agrees on the normalizer
            let fine = GridSpec::over(t.domain(), 1500).unwrap();
            let fine_oracle = moon_grid_normalized(s, &fine, &t);
            let x = [-1.9, 0.3];
            let idx_lz = limit.log_density(&x) - s * t.log_density(&x);
            let fine_lz = fine_oracle[0] - s * t.log_density(&fine.points().next().unwrap());
            assert!((idx_lz - fine_lz).abs() < 1e-3, "{idx_lz} vs {fine_lz}");
        }
    }

    #[test]
    fn constant_utility_limit_is_lambda() {
        let dom = BoxDomain::cube(2, 3.0);
        let sampler = CandidateSampler::centered_mixture(dom, vec![0.5, 0.0], 0.4).unwrap();
        let expert = RumExpert::new(Arc::new(|_: &[f64]| 2.0), 1.7).unwrap();
        let limit = LimitDensity::new(expert.clone(), sampler.clone(), 0).unwrap();
        for x in [[0.0, 0.0], [1.0, -2.5], [-2.9, 2.9]] {
            assert!((limit.log_density(&x) - sampler.log_density(&x)).abs() < 1e-5);
        }
        let v = limit_winner_log_density(&expert, &sampler, &[0.0, 0.0]).unwrap();
        assert!((v - sampler.log_density(&[0.0, 0.0])).abs() < 1e-5);
    }

    #[test]
    fn importance_normalizer_in_higher_dimension() {
        let dom = BoxDomain::cube(3, 4.0);
        let sampler = CandidateSampler::uniform(dom);
        let expert = RumExpert::new(Arc::new(|x: &[f64]| -0.5 * x.iter().map(|v| v * v).sum::<f64>()), 1.0).unwrap();
        let limit = LimitDensity::new(expert, sampler, 3).unwrap();
        // Z = (2 pi)^{3/2} / 8^3 up to negligible truncation
        let expect = 1.5 * (2.0 * PI).ln() - 3.0 * 8f64.ln();
        assert!((limit.log_normalizer() - expect).abs() < 0.03, "{}", limit.log_normalizer());
    }

    #[test]
    fn pairwise_equal_utility_winner_density_is_lambda() {
        let dom = BoxDomain::cube(1, 5.0);
        let sampler = CandidateSampler::centered_mixture(dom.clone(), vec![1.0], 0.5).unwrap();
        let expert = RumExpert::new(Arc::new(|_: &[f64]| 0.0), 1.0).unwrap();
        let grid = GridSpec::over(&dom, 100).unwrap();
        let est = kwise_winner_density_grid(&expert, &sampler, 2, &grid, MIN_WINNER_DRAWS, 1).unwrap();
        let lambda = DensityGrid {
            grid: grid.clone(),
            values: grid.points().map(|x| sampler.log_density(&x).exp()).collect(),
        }
        .normalized()
        .unwrap();
        assert!(est.total_variation(&lambda) < 1e-12);
        assert!((est.mass() - 1.0).abs() < 1e-12);
    }

    /// Exact winner density for uniform lambda in 1D:
    /// `p_k(x) ~ int_0^inf s e^{-s w} G(f(x) + w)^{k-1} dw`, with `G(u)` the
    /// probability that a random competitor's utility falls below `u`.
    fn exact_winner_density(expert: &RumExpert, grid: &GridSpec, k: usize) -> DensityGrid {
        let s = expert.precision();
        let fine = GridSpec::over(&BoxDomain::cube(1, 5.0), 4000).unwrap();
        let comp: Vec<f64> = fine.points().map(|x| expert.utility(&x)).collect();
        let g = |u: f64| {
            comp.iter()
                .map(|f| if u > *f { 1.0 - (-s * (u - f)).exp() } else { 0.0 })
                .sum::<f64>()
                / comp.len() as f64
        };
        let (nw, wmax) = (3000, 30.0 / s);
        let values = grid
            .points()
            .map(|x| {
                let fx = expert.utility(&x);
                (0..nw)
                    .map(|i| {
                        let w = (i as f64 + 0.5) * wmax / nw as f64;
                        s * (-s * w).exp() * g(fx + w).powi(k as i32 - 1) * wmax / nw as f64
                    })
                    .sum()
            })
            .collect();
        DensityGrid {
            grid: grid.clone(),
            values,
        }
        .normalized()
        .unwrap()
    }

    #[test]
    fn winner_density_matches_exact_integral() {
        let dom = BoxDomain::cube(1, 5.0);
        let sampler = CandidateSampler::uniform(dom.clone());
        let expert = normal_expert(1.0);
        let grid = GridSpec::over(&dom, 60).unwrap();
        let est = kwise_winner_density_grid(&expert, &sampler, 5, &grid, 40_000, 2).unwrap();
        let exact = exact_winner_density(&expert, &grid, 5);
        assert!(est.total_variation(&exact) < 0.01, "{}", est.total_variation(&exact));
    }

    #[test]
    fn winner_density_tempers_toward_belief() {
        let dom = BoxDomain::cube(1, 5.0);
        let sampler = CandidateSampler::uniform(dom.clone());
        let expert = normal_expert(1.0);
        let grid = GridSpec::over(&dom, 100).unwrap();
        let belief = DensityGrid {
            grid: grid.clone(),
            values: grid.points().map(|x| expert.utility(&x).exp()).collect(),
        }
        .normalized()
        .unwrap();
        let tv: Vec<f64> = [2, 5, 10]
            .iter()
            .map(|&k| {
                kwise_winner_density_grid(&expert, &sampler, k, &grid, MIN_WINNER_DRAWS, 4)
                    .unwrap()
                    .total_variation(&belief)
            })
            .collect();
        assert!(tv[0] > tv[1] && tv[1] > tv[2], "{tv:?}");
        assert!(tv[2] <= 0.05, "{tv:?}");
    }

    #[test]
    fn grid_csv_layout() {
        let grid = GridSpec::new(vec![
            Axis { lo: 0.0, hi: 2.0, n: 2 },
            Axis { lo: 0.0, hi: 1.0, n: 2 },
        ])
        .unwrap();
        let pts: Vec<Vec<f64>> = grid.points().collect();
        assert_eq!(pts, vec![vec![0.5, 0.25], vec![0.5, 0.75], vec![1.5, 0.25], vec![1.5, 0.75]]);
        let dg = DensityGrid {
            grid,
            values: vec![1.0, 2.0, 3.0, 4.0],
        };
        let mut buf = Vec::new();
        dg.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,x1,density\n0.5,0.25,1\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
