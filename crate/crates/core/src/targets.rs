//! Synthetic belief densities with samplers.
//!
//! Log-densities are unnormalized and follow the published formulas
//! literally, including the funnel's unusual scaling.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::BoxDomain;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("unknown target `{0}`")]
    Unknown(String),
    #[error("rejection sampler gave up after {proposed} proposals ({accepted} accepted, rate {rate:.2e})")]
    RetryBudget {
        proposed: u64,
        accepted: usize,
        rate: f64,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TargetName {
    Onemoon2D,
    Gaussian6D,
    Twogaussians10D,
    Twogaussians20D,
    Funnel10D,
}

impl TargetName {
    pub const ALL: [TargetName; 5] = [
        TargetName::Onemoon2D,
        TargetName::Gaussian6D,
        TargetName::Twogaussians10D,
        TargetName::Twogaussians20D,
        TargetName::Funnel10D,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TargetName::Onemoon2D => "Onemoon2D",
            TargetName::Gaussian6D => "Gaussian6D",
            TargetName::Twogaussians10D => "Twogaussians10D",
            TargetName::Twogaussians20D => "Twogaussians20D",
            TargetName::Funnel10D => "Funnel10D",
        }
    }
}

impl fmt::Display for TargetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TargetName {
    type Err = TargetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TargetError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Exact,
    Rejection,
    Ancestral,
}

/// Multivariate normal through its Cholesky factor.
#[derive(Debug, Clone)]
struct Mvn {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Mvn {
    fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
        let d = mean.len();
        let chol = cov.cholesky().expect("covariance is positive definite").l();
        let log_det: f64 = 2.0 * (0..d).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Self {
            mean: DVector::from_vec(mean),
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        }
    }

    /// `(x - mu)^T Sigma^{-1} (x - mu)`.
    fn mahalanobis(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let y = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("non-singular factor");
        y.norm_squared()
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis(x)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        (&self.mean + &self.chol * z).as_slice().to_vec()
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Onemoon,
    Gaussian(Mvn),
    TwoGaussians(Mvn, Mvn),
    Funnel,
}

/// Funnel parameters as printed: `a = 3`, `b = 0.25`.
const FUNNEL_A: f64 = 3.0;
const FUNNEL_B: f64 = 0.25;

/// Marginal of `x0` after integrating out `x1..x9` of the funnel formula:
/// `N(1 - 9 a^2 b / 2, a^2 / 2)`. Given `x0`, each other coordinate is
/// `N(1, exp(2 b x0) / 2)`.
pub const FUNNEL_X0_MEAN: f64 = 1.0 - 9.0 * FUNNEL_A * FUNNEL_A * FUNNEL_B / 2.0;
pub const FUNNEL_X0_VAR: f64 = FUNNEL_A * FUNNEL_A / 2.0;

#[derive(Debug, Clone)]
pub struct TargetDensity {
    name: TargetName,
    domain: BoxDomain,
    shape: Shape,
}

fn compound_symmetric(d: usize, diag: f64, off: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { diag } else { off })
}

impl TargetDensity {
    pub fn new(name: TargetName) -> Self {
        let (domain, shape) = match name {
            TargetName::Onemoon2D => (
                BoxDomain::new(vec![-4.0, -3.0], vec![4.0, 3.0]).expect("box"),
                Shape::Onemoon,
            ),
            TargetName::Gaussian6D => {
                let mean = (1..=6).map(|i| 2.0 * (-1f64).powi(i)).collect();
                (
                    BoxDomain::cube(6, 6.0),
                    Shape::Gaussian(Mvn::new(mean, compound_symmetric(6, 0.6, 0.4))),
                )
            }
            TargetName::Twogaussians10D | TargetName::Twogaussians20D => {
                let d = if name == TargetName::Twogaussians10D { 10 } else { 20 };
                let (var, rho) = (1.0, 0.9);
                let s1 = compound_symmetric(d, var, rho * var);
                let s2 = DMatrix::from_fn(d, d, |i, j| {
                    s1[(i, j)] * if (i + j) % 2 == 0 { 1.0 } else { -1.0 }
                });
                (
                    BoxDomain::new(vec![-3.0; d], vec![9.0; d]).expect("box"),
                    Shape::TwoGaussians(Mvn::new(vec![3.0; d], s1), Mvn::new(vec![3.0; d], s2)),
                )
            }
            TargetName::Funnel10D => {
                let mut lower = vec![-20.0; 10];
                let mut upper = vec![22.0; 10];
                lower[0] = -25.0;
                upper[0] = 5.0;
                (BoxDomain::new(lower, upper).expect("box"), Shape::Funnel)
            }
        };
        Self {
            name,
            domain,
            shape,
        }
    }

    pub fn name(&self) -> TargetName {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn sampler_kind(&self) -> SamplerKind {
        match self.shape {
            Shape::Onemoon => SamplerKind::Rejection,
            Shape::Funnel => SamplerKind::Ancestral,
            _ => SamplerKind::Exact,
        }
    }

    /// Unnormalized log-density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "point dimension");
        match &self.shape {
            Shape::Onemoon => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                -0.5 * ((r - 2.0) / 0.2).powi(2) - 0.5 * ((x[0] + 2.0) / 0.3).powi(2)
            }
            Shape::Gaussian(mvn) => -0.5 * mvn.mahalanobis(x),
            Shape::TwoGaussians(a, b) => {
                let (la, lb) = (a.log_pdf(x), b.log_pdf(x));
                let m = la.max(lb);
                m + (0.5 * (la - m).exp() + 0.5 * (lb - m).exp()).ln()
            }
            Shape::Funnel => {
                let v = (2.0 * FUNNEL_B * x[0]).exp();
                let head = -((x[0] - 1.0).powi(2) / (FUNNEL_A * FUNNEL_A));
                let tail: f64 = x[1..]
                    .iter()
                    .map(|xi| (2.0 * PI * v).ln() + (xi - 1.0).powi(2) / v)
                    .sum();
                head - tail
            }
        }
    }

    /// Mean of the normalized target. The moon's mean comes from grid
    /// quadrature over the domain.
    pub fn mean(&self) -> Vec<f64> {
        match &self.shape {
            Shape::Onemoon => {
                let n = 512;
                let (lo, hi) = (self.domain.lower(), self.domain.upper());
                let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
                let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let x0 = lo[0] + (i as f64 + 0.5) * h[0];
                    for j in 0..n {
                        let x1 = lo[1] + (j as f64 + 0.5) * h[1];
                        let p = self.log_density(&[x0, x1]).exp();
                        z += p;
                        m0 += p * x0;
                        m1 += p * x1;
                    }
                }
                vec![m0 / z, m1 / z]
            }
            Shape::Gaussian(mvn) => mvn.mean.as_slice().to_vec(),
            Shape::TwoGaussians(a, _) => a.mean.as_slice().to_vec(),
            Shape::Funnel => {
                let mut m = vec![1.0; 10];
                m[0] = FUNNEL_X0_MEAN;
                m
            }
        }
    }

    /// `n` i.i.d. draws inside the domain; out-of-box draws are redrawn.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, TargetError> {
        self.sample_with_budget(n, seed, 2_000 * n as u64 + 1_000_000)
    }

    fn sample_with_budget(
        &self,
        n: usize,
        seed: u64,
        budget: u64,
    ) -> Result<Vec<Vec<f64>>, TargetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut proposed = 0u64;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if proposed >= budget {
                return Err(TargetError::RetryBudget {
                    proposed,
                    accepted: out.len(),
                    rate: out.len() as f64 / proposed as f64,
                });
            }
            proposed += 1;
            let x = match &self.shape {
                Shape::Onemoon => {
                    let x = self.domain.sample_uniform(&mut rng);
                    // envelope 1 bounds the unnormalized density
                    if rng.random::<f64>() >= self.log_density(&x).exp() {
                        continue;
                    }
                    x
                }
                Shape::Gaussian(mvn) => mvn.sample(&mut rng),
                Shape::TwoGaussians(a, b) => {
                    if rng.random::<bool>() {
                        a.sample(&mut rng)
                    } else {
                        b.sample(&mut rng)
                    }
                }
                Shape::Funnel => {
                    let z: f64 = rng.sample(StandardNormal);
                    let x0 = FUNNEL_X0_MEAN + FUNNEL_X0_VAR.sqrt() * z;
                    let sd = ((2.0 * FUNNEL_B * x0).exp() / 2.0).sqrt();
                    let mut x = vec![x0];
                    x.extend((1..10).map(|_| 1.0 + sd * rng.sample::<f64, _>(StandardNormal)));
                    x
                }
            };
            if self.domain.contains(&x) {
                out.push(x);
            }
        }
        Ok(out)
    }

    /// Mixture-component labels alongside draws (two-Gaussian targets only).
    pub fn sample_labeled(&self, n: usize, seed: u64) -> Option<Vec<(usize, Vec<f64>)>> {
        let Shape::TwoGaussians(a, b) = &self.shape else {
            return None;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let label = usize::from(rng.random::<bool>());
            let x = if label == 0 { a.sample(&mut rng) } else { b.sample(&mut rng) };
            if self.domain.contains(&x) {
                out.push((label, x));
            }
        }
        Some(out)
    }
}

/// Points as CSV with header `x0..x{d-1}`.
pub fn write_points_csv<W: Write>(writer: W, points: &[Vec<f64>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let d = points.first().map_or(0, Vec::len);
    w.write_record((0..d).map(|i| format!("x{i}")))?;
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
