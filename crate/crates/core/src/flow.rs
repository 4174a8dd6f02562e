//! Coupling-layer normalizing flows with exact log-density and sampling.
//!
//! A [`FlowModel`] maps base draws `z ~ N(0, I)` to the data domain. Data
//! points are first whitened affinely so the domain box lands on
//! `[-B, B]^d`; the coupling layers then act in whitened coordinates.
//!
//! The normalizing direction (data to base) is what training differentiates,
//! so it is recorded on a [`Tape`]. The generative direction is plain `f64`
//! arithmetic: for spline couplings it solves the rational-quadratic
//! inverse, which never needs a gradient.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{self, DiffError, ParamLayout, ParamVector, Tape, Var};

pub const CHECKPOINT_FORMAT: &str = "prefflow-flow-v1";

const MIN_BIN_WIDTH: f64 = 1e-3;
const MIN_BIN_HEIGHT: f64 = 1e-3;
const MIN_DERIVATIVE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("expected a point of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint format `{0}` is not supported")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FlowError> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(FlowError::Domain(format!(
                "bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(FlowError::Domain(format!(
                    "dimension {i}: need finite lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[-half, half]^dim`.
    pub fn cube(dim: usize, half: f64) -> Self {
        Self::new(vec![-half; dim], vec![half; dim]).expect("valid cube")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Uniform draw inside the box.
    pub fn sample_uniform<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| l + (u - l) * rng.random::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CouplingKind {
    /// `x = z * exp(s) + t` with `s = scale_bound * tanh(raw)`.
    Affine { scale_bound: f64 },
    /// Monotone rational-quadratic spline on `[-tail_bound, tail_bound]`,
    /// identity outside.
    Spline { bins: usize, tail_bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArchitecture {
    pub coupling: CouplingKind,
    pub layers: usize,
    /// Hidden widths of every conditioner network.
    pub hidden: Vec<usize>,
    /// Half-width of the whitened box the domain is mapped onto.
    pub whiten_bound: f64,
}

impl FlowArchitecture {
    pub fn affine(layers: usize, hidden: Vec<usize>) -> Self {
        Self {
            coupling: CouplingKind::Affine { scale_bound: 4.0 },
            layers,
            hidden,
            whiten_bound: 5.0,
        }
    }

    pub fn spline(layers: usize, hidden: Vec<usize>) -> Self {
        Self {
            coupling: CouplingKind::Spline {
                bins: 8,
                tail_bound: 5.0,
            },
            layers,
            hidden,
            whiten_bound: 5.0,
        }
    }

    /// Affine couplings for `d = 2`, spline couplings otherwise.
    pub fn default_for(dim: usize) -> Self {
        match dim {
            2 => Self::affine(8, vec![32; 4]),
            1 => Self::spline(4, vec![8]),
            _ => Self::spline(8, vec![128; 2]),
        }
    }

    /// Four hidden layers of two units each, the narrow reading of the
    /// published RealNVP configuration.
    pub fn narrow_affine(layers: usize) -> Self {
        Self::affine(layers, vec![2; 4])
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.layers == 0 {
            return Err(FlowError::Architecture("at least one layer required".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(FlowError::Architecture("hidden widths must be positive".into()));
        }
        if !(self.whiten_bound > 0.0) {
            return Err(FlowError::Architecture("whiten_bound must be positive".into()));
        }
        match self.coupling {
            CouplingKind::Affine { scale_bound } if !(scale_bound > 0.0) => Err(
                FlowError::Architecture("scale_bound must be positive".into()),
            ),
            CouplingKind::Spline { bins, tail_bound } if bins < 2 || !(tail_bound > 0.0) => Err(
                FlowError::Architecture("spline needs >= 2 bins and a positive tail bound".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Parses `affine:LAYERS:H1,H2,..` or `spline:LAYERS:H1,H2,..`.
impl std::str::FromStr for FlowArchitecture {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FlowError::Architecture(format!("expected kind:layers:h1,h2,.. got {s:?}"));
        let mut parts = s.split(':');
        let (Some(kind), Some(layers), Some(hidden), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let layers = layers.trim().parse().map_err(|_| bad())?;
        let hidden = hidden
            .split(',')
            .map(|h| h.trim().parse())
            .collect::<Result<Vec<usize>, _>>()
            .map_err(|_| bad())?;
        let arch = match kind.trim() {
            "affine" => Self::affine(layers, hidden),
            "spline" => Self::spline(layers, hidden),
            _ => return Err(bad()),
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Conditioning mask for layer `layer` of a `dim`-dimensional flow; `true`
/// marks coordinates passed through unchanged and fed to the conditioner.
pub fn coupling_mask(dim: usize, layer: usize) -> Vec<bool> {
    if dim == 1 {
        return vec![false];
    }
    let flip = layer % 2 == 1;
    let halves = dim > 2 && (layer / 2) % 2 == 1;
    (0..dim)
        .map(|i| {
            let base = if halves { i < dim / 2 } else { i % 2 == 0 };
            base != flip
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Linear {
    weight: usize,
    bias: usize,
    rows: usize,
    cols: usize,
}

/// Fully connected tanh network producing the coupling parameters.
#[derive(Debug, Clone)]
pub struct ConditionerNet {
    linears: Vec<Linear>,
}

impl ConditionerNet {
    fn build(layout: &mut ParamLayout, prefix: &str, widths: &[usize]) -> Self {
        let linears = widths
            .windows(2)
            .enumerate()
            .map(|(j, w)| {
                let (cols, rows) = (w[0], w[1]);
                let weight = layout.push(format!("{prefix}.linear{j}.weight"), rows * cols);
                let bias = layout.push(format!("{prefix}.linear{j}.bias"), rows);
                Linear {
                    weight,
                    bias,
                    rows,
                    cols,
                }
            })
            .collect();
        Self { linears }
    }

    pub fn input_width(&self) -> usize {
        self.linears[0].cols
    }

    pub fn output_width(&self) -> usize {
        self.linears.last().map_or(0, |l| l.rows)
    }

    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng) {
        let last = self.linears.len() - 1;
        for (j, lin) in self.linears.iter().enumerate() {
            let w = &mut values[lin.weight..lin.weight + lin.rows * lin.cols];
            if j == last {
                w.fill(0.0);
            } else {
                let a = (6.0 / (lin.rows + lin.cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                for v in w {
                    *v = dist.sample(rng);
                }
            }
            values[lin.bias..lin.bias + lin.rows].fill(0.0);
        }
    }

    fn eval(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = self.linears.len() - 1;
        for (j, lin) in self.linears.iter().enumerate() {
            let mut out = vec![0.0; lin.rows];
            for (r, o) in out.iter_mut().enumerate() {
                let w = &params[lin.weight + r * lin.cols..lin.weight + (r + 1) * lin.cols];
                *o = params[lin.bias + r] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
                if j != last {
                    *o = o.tanh();
                }
            }
            h = out;
        }
        h
    }

    fn record(&self, tape: &mut Tape<'_>, input: Var) -> Var {
        let mut h = input;
        let last = self.linears.len() - 1;
        for (j, lin) in self.linears.iter().enumerate() {
            h = tape.affine(h, lin.weight, lin.bias, lin.rows);
            if j != last {
                h = tape.tanh(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    cond_idx: Vec<usize>,
    trans_idx: Vec<usize>,
    kind: CouplingKind,
    conditioner: ConditionerNet,
}

impl CouplingLayer {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn kind(&self) -> CouplingKind {
        self.kind
    }

    pub fn conditioner(&self) -> &ConditionerNet {
        &self.conditioner
    }

    /// Generative direction on whitened coordinates, in place.
    fn forward(&self, params: &[f64], u: &mut [f64]) {
        let cond: Vec<f64> = self.cond_idx.iter().map(|&i| u[i]).collect();
        let raw = self.conditioner.eval(params, &cond);
        let m = self.trans_idx.len();
        match self.kind {
            CouplingKind::Affine { scale_bound } => {
                for (j, &i) in self.trans_idx.iter().enumerate() {
                    let s = scale_bound * raw[j].tanh();
                    u[i] = u[i] * s.exp() + raw[m + j];
                }
            }
            CouplingKind::Spline { bins, tail_bound } => {
                let per = 3 * bins - 1;
                for (j, &i) in self.trans_idx.iter().enumerate() {
                    let knots = SplineKnots::new(&raw[j * per..(j + 1) * per], bins, tail_bound);
                    u[i] = knots.solve(u[i]);
                }
            }
        }
    }

    /// Normalizing direction on the tape. Returns the new coordinates and
    /// the log-determinant contribution (length-1 node) if any.
    fn record_inverse(&self, tape: &mut Tape<'_>, u: Var) -> (Var, Option<Var>) {
        let cond = tape.gather(u, &self.cond_idx);
        let raw = self.conditioner.record(tape, cond);
        let m = self.trans_idx.len();
        match self.kind {
            CouplingKind::Affine { scale_bound } => {
                let s_raw = tape.slice(raw, 0, m);
                let th = tape.tanh(s_raw);
                let s = tape.scale(th, scale_bound);
                let t = tape.slice(raw, m, m);
                let x = tape.gather(u, &self.trans_idx);
                let centered = tape.sub(x, t);
                let neg_s = tape.neg(s);
                let inv_scale = tape.exp(neg_s);
                let z = tape.mul(centered, inv_scale);
                let sum_s = tape.sum(s);
                let logdet = tape.neg(sum_s);
                let merged = tape.concat(&[cond, z]);
                (tape.gather(merged, &self.merge_order()), Some(logdet))
            }
            CouplingKind::Spline { bins, tail_bound } => {
                let per = 3 * bins - 1;
                let mut parts = Vec::with_capacity(self.mask.len());
                let mut logdets = Vec::with_capacity(m);
                let mut trans_pos = 0;
                let mut cond_pos = 0;
                for keep in &self.mask {
                    if *keep {
                        parts.push(tape.slice(cond, cond_pos, 1));
                        cond_pos += 1;
                    } else {
                        let i = self.trans_idx[trans_pos];
                        let v = tape.slice(u, i, 1);
                        let theta = tape.slice(raw, trans_pos * per, per);
                        match record_spline(tape, theta, v, bins, tail_bound) {
                            Some((y, ld)) => {
                                parts.push(y);
                                logdets.push(ld);
                            }
                            None => parts.push(v),
                        }
                        trans_pos += 1;
                    }
                }
                let out = tape.concat(&parts);
                let logdet = match logdets.len() {
                    0 => None,
                    1 => Some(logdets[0]),
                    _ => {
                        let all = tape.concat(&logdets);
                        Some(tape.sum(all))
                    }
                };
                (out, logdet)
            }
        }
    }

    /// Positions in `concat([cond, transformed])` for each coordinate.
    fn merge_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.mask.len()];
        for (p, &i) in self.cond_idx.iter().enumerate() {
            order[i] = p;
        }
        for (p, &i) in self.trans_idx.iter().enumerate() {
            order[i] = self.cond_idx.len() + p;
        }
        order
    }
}

/// Knots of one rational-quadratic spline, computed from raw conditioner
/// outputs in the same order as [`record_spline`].
struct SplineKnots {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    bound: f64,
}

fn derivative_shift() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn knot_positions(raw: &[f64], min_size: f64, bound: f64) -> Vec<f64> {
    let k = raw.len();
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let total = diffnum::neumaier_sum(e.iter().copied());
    let mut knots = Vec::with_capacity(k + 1);
    knots.push(-bound);
    let mut acc = 0.0;
    for (i, ei) in e.iter().enumerate() {
        let w = (ei / total) * (1.0 - min_size * k as f64) + min_size;
        acc += w;
        knots.push(if i + 1 == k { bound } else { acc * (2.0 * bound) + (-bound) });
    }
    knots
}

impl SplineKnots {
    fn new(raw: &[f64], bins: usize, bound: f64) -> Self {
        let xs = knot_positions(&raw[..bins], MIN_BIN_WIDTH, bound);
        let ys = knot_positions(&raw[bins..2 * bins], MIN_BIN_HEIGHT, bound);
        let shift = derivative_shift();
        let mut ds = Vec::with_capacity(bins + 1);
        ds.push(1.0);
        ds.extend(
            raw[2 * bins..]
                .iter()
                .map(|u| diffnum::softplus(u + shift) + MIN_DERIVATIVE),
        );
        ds.push(1.0);
        Self { xs, ys, ds, bound }
    }

    /// Inverse of the spline: the input whose image is `y`.
    fn solve(&self, y: f64) -> f64 {
        if !(y > -self.bound && y < self.bound) {
            return y;
        }
        let i = bin_of(&self.ys, y);
        let (xk, w) = (self.xs[i], self.xs[i + 1] - self.xs[i]);
        let (yk, h) = (self.ys[i], self.ys[i + 1] - self.ys[i]);
        let (d0, d1) = (self.ds[i], self.ds[i + 1]);
        let s = h / w;
        let dy = y - yk;
        let a = h * (s - d0) + dy * (d1 + d0 - 2.0 * s);
        let b = h * d0 - dy * (d1 + d0 - 2.0 * s);
        let c = -s * dy;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let theta = (2.0 * c) / (-b - disc.sqrt());
        theta * w + xk
    }

    #[cfg(test)]
    fn eval(&self, x: f64) -> (f64, f64) {
        if !(x > -self.bound && x < self.bound) {
            return (x, 0.0);
        }
        let i = bin_of(&self.xs, x);
        let (xk, w) = (self.xs[i], self.xs[i + 1] - self.xs[i]);
        let (yk, h) = (self.ys[i], self.ys[i + 1] - self.ys[i]);
        let (d0, d1) = (self.ds[i], self.ds[i + 1]);
        let s = h / w;
        let theta = (x - xk) / w;
        let t1 = theta * (1.0 - theta);
        let den = s + (d1 + d0 - 2.0 * s) * t1;
        let y = yk + h * (s * theta * theta + d0 * t1) / den;
        let dnum = s * s * (d1 * theta * theta + 2.0 * s * t1 + d0 * (1.0 - theta) * (1.0 - theta));
        (y, dnum.ln() - 2.0 * den.ln())
    }
}

fn bin_of(knots: &[f64], v: f64) -> usize {
    let bins = knots.len() - 1;
    let i = knots.partition_point(|&k| k <= v);
    i.saturating_sub(1).min(bins - 1)
}

fn record_knots(tape: &mut Tape<'_>, raw: Var, min_size: f64, bound: f64) -> Var {
    let k = tape.len_of(raw);
    let max = tape.value(raw).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.offset(raw, -max);
    let e = tape.exp(shifted);
    let total = tape.sum(e);
    let p = tape.div(e, total);
    let scaled = tape.scale(p, 1.0 - min_size * k as f64);
    let w = tape.offset(scaled, min_size);
    let acc = tape.cumsum(w);
    let span = tape.scale(acc, 2.0 * bound);
    // interior knots 1..k-1; the outer ones are the fixed bounds
    tape.offset(span, -bound)
}

fn knot_at(tape: &mut Tape<'_>, interior: Var, i: usize, bins: usize, bound: f64) -> Var {
    if i == 0 {
        tape.scalar_constant(-bound)
    } else if i == bins {
        tape.scalar_constant(bound)
    } else {
        tape.slice(interior, i - 1, 1)
    }
}

/// Rational-quadratic spline of the scalar node `v`, parameterized by the
/// raw node `theta` (`3 * bins - 1` entries). `None` outside the tail bound.
fn record_spline(
    tape: &mut Tape<'_>,
    theta: Var,
    v: Var,
    bins: usize,
    bound: f64,
) -> Option<(Var, Var)> {
    let x = tape.scalar(v);
    if !(x > -bound && x < bound) {
        return None;
    }
    let uw = tape.slice(theta, 0, bins);
    let uh = tape.slice(theta, bins, bins);
    let ud = tape.slice(theta, 2 * bins, bins - 1);
    let xk = record_knots(tape, uw, MIN_BIN_WIDTH, bound);
    let yk = record_knots(tape, uh, MIN_BIN_HEIGHT, bound);

    let mut xs = Vec::with_capacity(bins + 1);
    xs.push(-bound);
    xs.extend_from_slice(&tape.value(xk)[..bins - 1]);
    xs.push(bound);
    let i = bin_of(&xs, x);

    let x0 = knot_at(tape, xk, i, bins, bound);
    let x1 = knot_at(tape, xk, i + 1, bins, bound);
    let y0 = knot_at(tape, yk, i, bins, bound);
    let y1 = knot_at(tape, yk, i + 1, bins, bound);
    let w = tape.sub(x1, x0);
    let h = tape.sub(y1, y0);

    let deriv_at = |tape: &mut Tape<'_>, j: usize| {
        if j == 0 || j == bins {
            tape.scalar_constant(1.0)
        } else {
            let u = tape.slice(ud, j - 1, 1);
            let shifted = tape.offset(u, derivative_shift());
            let sp = tape.softplus(shifted);
            tape.offset(sp, MIN_DERIVATIVE)
        }
    };
    let d0 = deriv_at(tape, i);
    let d1 = deriv_at(tape, i + 1);

    let s = tape.div(h, w);
    let dx = tape.sub(v, x0);
    let th = tape.div(dx, w);
    let one_minus = {
        let n = tape.neg(th);
        tape.offset(n, 1.0)
    };
    let t1 = tape.mul(th, one_minus);
    let th2 = tape.mul(th, th);
    // numerator h (s th^2 + d0 t1)
    let a = tape.mul(s, th2);
    let b = tape.mul(d0, t1);
    let ab = tape.add(a, b);
    let num = tape.mul(h, ab);
    // denominator s + (d1 + d0 - 2 s) t1
    let dsum = tape.add(d1, d0);
    let two_s = tape.scale(s, 2.0);
    let slope_gap = tape.sub(dsum, two_s);
    let sg = tape.mul(slope_gap, t1);
    let den = tape.add(s, sg);
    let ratio = tape.div(num, den);
    let y = tape.add(y0, ratio);
    // log derivative: ln(s^2 (d1 th^2 + 2 s t1 + d0 (1-th)^2)) - 2 ln(den)
    let p1 = tape.mul(d1, th2);
    let p2 = tape.mul(two_s, t1);
    let om2 = tape.mul(one_minus, one_minus);
    let p3 = tape.mul(d0, om2);
    let p12 = tape.add(p1, p2);
    let inner = tape.add(p12, p3);
    let s2 = tape.mul(s, s);
    let dnum = tape.mul(s2, inner);
    let ln_num = tape.ln(dnum);
    let ln_den = tape.ln(den);
    let ln_den2 = tape.scale(ln_den, 2.0);
    let logdet = tape.sub(ln_num, ln_den2);
    Some((y, logdet))
}

/// Log-density of `N(0, I)`.
pub fn std_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.len() as f64 * (2.0 * PI).ln() - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Family of trainable densities over a box domain.
///
/// [`DensityModel::record_log_density`] reads parameter values from the
/// tape, not from `self`, so the trainer can differentiate at any point.
pub trait DensityModel: Send + Sync {
    fn domain(&self) -> &BoxDomain;

    fn params(&self) -> &ParamVector;

    fn set_params(&mut self, values: &[f64]) -> Result<(), DiffError>;

    fn record_log_density(&self, tape: &mut Tape<'_>, x: &[f64]) -> Var;

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError>;

    fn dim(&self) -> usize {
        self.domain().dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64, FlowError> {
        check_dim(self.dim(), x)?;
        let obj = |t: &mut Tape<'_>| self.record_log_density(t, x);
        Ok(diffnum::value(&obj, self.params().values())?)
    }

    /// Serialized checkpoint document.
    fn checkpoint_json(&self) -> Result<String, FlowError>;
}

fn check_dim(expected: usize, x: &[f64]) -> Result<(), FlowError> {
    if x.len() != expected {
        return Err(FlowError::Dimension {
            expected,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite("input point"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    domain: BoxDomain,
    arch: FlowArchitecture,
    layers: Vec<CouplingLayer>,
    params: ParamVector,
    center: Vec<f64>,
    whiten_scale: Vec<f64>,
    whiten_logdet: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub format: String,
    pub domain: BoxDomain,
    pub architecture: FlowArchitecture,
    pub params: Vec<f64>,
}

impl FlowModel {
    /// Identity-initialized flow: every coupling starts as the identity map,
    /// hidden weights are drawn from `seed`.
    pub fn new(domain: BoxDomain, arch: FlowArchitecture, seed: u64) -> Result<Self, FlowError> {
        arch.validate()?;
        let dim = domain.dim();
        let mut layout = ParamLayout::new();
        let mut layers = Vec::with_capacity(arch.layers);
        for l in 0..arch.layers {
            let mask = coupling_mask(dim, l);
            let cond_idx: Vec<usize> = (0..dim).filter(|&i| mask[i]).collect();
            let trans_idx: Vec<usize> = (0..dim).filter(|&i| !mask[i]).collect();
            let per = match arch.coupling {
                CouplingKind::Affine { .. } => 2,
                CouplingKind::Spline { bins, .. } => 3 * bins - 1,
            };
            let mut widths = vec![cond_idx.len()];
            widths.extend(&arch.hidden);
            widths.push(per * trans_idx.len());
            let conditioner = ConditionerNet::build(&mut layout, &format!("coupling{l}"), &widths);
            layers.push(CouplingLayer {
                mask,
                cond_idx,
                trans_idx,
                kind: arch.coupling,
                conditioner,
            });
        }
        let mut values = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            layer.conditioner.init(&mut values, &mut rng);
        }
        let params = layout.finish(values)?;
        Ok(Self::assemble(domain, arch, layers, params))
    }

    fn assemble(
        domain: BoxDomain,
        arch: FlowArchitecture,
        layers: Vec<CouplingLayer>,
        params: ParamVector,
    ) -> Self {
        let center = domain.center();
        let whiten_scale: Vec<f64> = (0..domain.dim())
            .map(|i| 2.0 * arch.whiten_bound / domain.width(i))
            .collect();
        let whiten_logdet = whiten_scale.iter().map(|s| s.ln()).sum();
        Self {
            domain,
            arch,
            layers,
            params,
            center,
            whiten_scale,
            whiten_logdet,
        }
    }

    pub fn architecture(&self) -> &FlowArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Mutable access for tests and hand-built models.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// `x = T(z)`.
    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>, FlowError> {
        check_dim(self.dim(), z)?;
        let p = self.params.values();
        let mut u = z.to_vec();
        for layer in &self.layers {
            layer.forward(p, &mut u);
        }
        let x: Vec<f64> = u
            .iter()
            .enumerate()
            .map(|(i, v)| v / self.whiten_scale[i] + self.center[i])
            .collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("forward transform"));
        }
        Ok(x)
    }

    /// Records `T^{-1}(x)` on the tape; returns `(z, logdet)` where `logdet`
    /// is `log |det J_{T^{-1}}(x)|` as a length-1 node.
    pub fn record_inverse(&self, tape: &mut Tape<'_>, x: &[f64]) -> (Var, Var) {
        let white: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.center[i]) * self.whiten_scale[i])
            .collect();
        let mut u = tape.constant(&white);
        let mut logdets = Vec::with_capacity(self.layers.len() + 1);
        logdets.push(tape.scalar_constant(self.whiten_logdet));
        for layer in self.layers.iter().rev() {
            let (next, ld) = layer.record_inverse(tape, u);
            u = next;
            logdets.extend(ld);
        }
        let all = tape.concat(&logdets);
        let logdet = tape.sum(all);
        (u, logdet)
    }

    /// `(T^{-1}(x), log |det J_{T^{-1}}(x)|)`.
    pub fn inverse_with_logdet(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        check_dim(self.dim(), x)?;
        let mut tape = Tape::new(self.params.values());
        let (z, ld) = self.record_inverse(&mut tape, x);
        if tape.first_non_finite().is_some() {
            return Err(FlowError::NonFinite("inverse transform"));
        }
        Ok((tape.value(z).to_vec(), tape.scalar(ld)))
    }

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        FlowCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            domain: self.domain.clone(),
            architecture: self.arch.clone(),
            params: self.params.values().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: FlowCheckpoint) -> Result<Self, FlowError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(FlowError::Format(ck.format));
        }
        let mut model = Self::new(ck.domain, ck.architecture, 0)?;
        model.params.set_values(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let text = std::fs::read_to_string(path).map_err(|source| FlowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

impl DensityModel for FlowModel {
    fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    fn params(&self) -> &ParamVector {
        &self.params
    }

    fn set_params(&mut self, values: &[f64]) -> Result<(), DiffError> {
        self.params.set_values(values)
    }

    fn record_log_density(&self, tape: &mut Tape<'_>, x: &[f64]) -> Var {
        let (z, logdet) = self.record_inverse(tape, x);
        let sq = tape.mul(z, z);
        let ss = tape.sum(sq);
        let quad = tape.scale(ss, -0.5);
        let norm = -0.5 * self.dim() as f64 * (2.0 * PI).ln();
        let base = tape.offset(quad, norm);
        tape.add(base, logdet)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
                self.forward(&z)
            })
            .collect()
    }

    fn checkpoint_json(&self) -> Result<String, FlowError> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(model: &mut FlowModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..model.params.len())
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        model.params.set_values(&vals).unwrap();
    }

    #[test]
    fn identity_flow_log_density_matches_standard_normal() {
        let m1 = FlowModel::new(BoxDomain::cube(1, 5.0), FlowArchitecture::default_for(1), 1).unwrap();
        let v = m1.log_density(&[0.0]).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln())).abs() < 1e-12, "{v}");
        let m2 = FlowModel::new(BoxDomain::cube(2, 5.0), FlowArchitecture::default_for(2), 1).unwrap();
        assert_eq!(m2.log_density(&[0.0, 0.0]).unwrap(), -(2.0 * PI).ln());
        assert_eq!(m2.log_density(&[1.3, -0.4]).unwrap(), std_normal_log_density(&[1.3, -0.4]));
    }

    #[test]
    fn identity_flow_forward_and_logdet() {
        for dim in [2, 3] {
            let m = FlowModel::new(BoxDomain::cube(dim, 5.0), FlowArchitecture::default_for(dim), 3).unwrap();
            let z: Vec<f64> = (0..dim).map(|i| 0.7 * i as f64 - 1.1).collect();
            let x = m.forward(&z).unwrap();
            for (a, b) in x.iter().zip(&z) {
                assert!((a - b).abs() < 1e-12);
            }
            let (_, ld) = m.inverse_with_logdet(&z).unwrap();
            assert!(ld.abs() < 1e-12);
        }
    }

    #[test]
    fn single_affine_layer_by_hand() {
        let arch = FlowArchitecture::affine(1, vec![3]);
        let mut m = FlowModel::new(BoxDomain::cube(2, 5.0), arch, 9).unwrap();
        assert_eq!(m.layers()[0].mask(), &[true, false]);
        // final linear: rows = [scale, shift], cols = 3 hidden
        let w = m.params.segment("coupling0.linear1.weight").unwrap().range();
        let b = m.params.segment("coupling0.linear1.bias").unwrap().range();
        let mut vals = m.params.values().to_vec();
        vals[w.start..w.start + 3].copy_from_slice(&[0.4, -0.3, 0.2]);
        vals[b.start] = 0.1;
        vals[b.start + 1] = 3.0;
        m.params.set_values(&vals).unwrap();
        let (a, bb) = (0.8, -1.2);
        // hand evaluation of the scale head
        let w0 = m.params.segment("coupling0.linear0.weight").unwrap().range();
        let b0 = m.params.segment("coupling0.linear0.bias").unwrap().range();
        let hidden: Vec<f64> = (0..3)
            .map(|r| (vals[w0.start + r] * a + vals[b0.start + r]).tanh())
            .collect();
        let raw = 0.1 + 0.4 * hidden[0] - 0.3 * hidden[1] + 0.2 * hidden[2];
        let s = 4.0 * raw.tanh();
        let x = m.forward(&[a, bb]).unwrap();
        assert_eq!(x[0], a);
        assert!((x[1] - (bb * s.exp() + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn spline_inverse_roundtrip_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..23).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let knots = SplineKnots::new(&raw, 8, 5.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let x = -6.0 + 12.0 * i as f64 / 2000.0;
            let (y, _) = knots.eval(x);
            assert!(y >= prev);
            prev = y;
            assert!((knots.solve(y) - x).abs() < 1e-10);
            if x.abs() > 5.0 {
                assert_eq!(y, x);
            }
        }
    }

    #[test]
    fn round_trip_random_models() {
        for (dim, arch) in [
            (2, FlowArchitecture::affine(4, vec![16, 16])),
            (3, FlowArchitecture::spline(4, vec![16])),
            (1, FlowArchitecture::spline(3, vec![4])),
        ] {
            let mut m = FlowModel::new(BoxDomain::cube(dim, 4.0), arch, 11).unwrap();
            random_params(&mut m, 5, 0.3);
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                let x = m.domain().sample_uniform(&mut rng);
                let (z, _) = m.inverse_with_logdet(&x).unwrap();
                let back = m.forward(&z).unwrap();
                for (a, b) in back.iter().zip(&x) {
                    worst = worst.max((a - b).abs());
                }
            }
            assert!(worst <= 1e-8, "dim {dim}: {worst}");
        }
    }

    fn numerical_logdet(m: &FlowModel, x: &[f64]) -> f64 {
        let d = x.len();
        let h = 1e-5;
        let mut jac = nalgebra::DMatrix::zeros(d, d);
        for j in 0..d {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[j] += h;
            lo[j] -= h;
            let (zh, _) = m.inverse_with_logdet(&hi).unwrap();
            let (zl, _) = m.inverse_with_logdet(&lo).unwrap();
            for i in 0..d {
                jac[(i, j)] = (zh[i] - zl[i]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn logdet_matches_numerical_jacobian() {
        for (dim, arch) in [
            (2, FlowArchitecture::affine(4, vec![16])),
            (3, FlowArchitecture::spline(3, vec![8])),
            (4, FlowArchitecture::spline(4, vec![8])),
        ] {
            let mut m = FlowModel::new(BoxDomain::cube(dim, 3.0), arch, 2).unwrap();
            random_params(&mut m, 8, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..20 {
                let x = m.domain().sample_uniform(&mut rng);
                let (_, ld) = m.inverse_with_logdet(&x).unwrap();
                let num = numerical_logdet(&m, &x);
                assert!(
                    (ld - num).abs() <= 1e-5 * ld.abs().max(1.0),
                    "dim {dim}: {ld} vs {num}"
                );
            }
        }
    }

    #[test]
    fn two_layer_logdet_is_sum_of_parts() {
        let mut m = FlowModel::new(BoxDomain::cube(2, 5.0), FlowArchitecture::affine(2, vec![6]), 1).unwrap();
        random_params(&mut m, 3, 0.5);
        let x = [0.3, -1.7];
        let (_, total) = m.inverse_with_logdet(&x).unwrap();
        let mut tape = Tape::new(m.params.values());
        let mut u = tape.constant(&x);
        let mut parts = 0.0;
        for layer in m.layers.iter().rev() {
            let (next, ld) = layer.record_inverse(&mut tape, u);
            parts += tape.scalar(ld.unwrap());
            u = next;
        }
        assert!((total - parts).abs() < 1e-12);
    }

    #[test]
    fn random_2d_flow_integrates_to_sample_mass() {
        let mut m = FlowModel::new(BoxDomain::cube(2, 5.0), FlowArchitecture::affine(4, vec![8]), 7).unwrap();
        random_params(&mut m, 21, 0.15);
        let r = 6.0;
        let samples = m.sample(40000, 1).unwrap();
        let inside = samples.iter().filter(|p| p.iter().all(|v| v.abs() < r)).count();
        let mass = inside as f64 / samples.len() as f64;
        assert!(mass > 0.9, "{mass}");
        let n = 600;
        let h = 2.0 * r / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-r + (i as f64 + 0.5) * h, -r + (j as f64 + 0.5) * h];
                total += m.log_density(&x).unwrap().exp() * h * h;
            }
        }
        assert!((total - mass).abs() <= 0.02, "{total} vs {mass}");
    }

    #[test]
    fn sampling_is_deterministic_and_centered() {
        let m = FlowModel::new(BoxDomain::cube(2, 5.0), FlowArchitecture::default_for(2), 1).unwrap();
        let a = m.sample(5000, 42).unwrap();
        assert_eq!(a, m.sample(5000, 42).unwrap());
        for c in 0..2 {
            let mean = a.iter().map(|p| p[c]).sum::<f64>() / a.len() as f64;
            assert!(mean.abs() < 4.0 / (a.len() as f64).sqrt());
        }
    }

    #[test]
    fn constant_shift_moves_sample_mean() {
        let mut m = FlowModel::new(BoxDomain::cube(2, 5.0), FlowArchitecture::affine(2, vec![4]), 1).unwrap();
        let mut vals = m.params.values().to_vec();
        // shift head of each layer: bias entry 1 of the final linear
        for l in 0..2 {
            let b = m.params.segment(&format!("coupling{l}.linear1.bias")).unwrap().range();
            vals[b.start + 1] = 1.5;
        }
        m.params.set_values(&vals).unwrap();
        let s = m.sample(20000, 3).unwrap();
        for c in 0..2 {
            let mean = s.iter().map(|p| p[c]).sum::<f64>() / s.len() as f64;
            assert!((mean - 1.5).abs() < 4.0 / (s.len() as f64).sqrt(), "{mean}");
        }
    }

    #[test]
    fn whitening_is_part_of_the_density() {
        let dom = BoxDomain::new(vec![-4.0, -3.0], vec![4.0, 3.0]).unwrap();
        let m = FlowModel::new(dom, FlowArchitecture::default_for(2), 1).unwrap();
        // identity couplings: x_i ~ N(0, (width_i / 10)^2)
        let x = [1.0, -0.5];
        let expect = [(0.8f64, 1.0), (0.6, -0.5)]
            .iter()
            .map(|(sd, v)| -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * (v / sd) * (v / sd))
            .sum::<f64>();
        assert!((m.log_density(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut m = FlowModel::new(BoxDomain::cube(3, 2.0), FlowArchitecture::spline(2, vec![5]), 1).unwrap();
        random_params(&mut m, 2, 0.7);
        let text = m.checkpoint_json().unwrap();
        let back = FlowModel::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.params.values(), m.params.values());
        assert_eq!(back.checkpoint_json().unwrap(), text);
        let mut bad: FlowCheckpoint = serde_json::from_str(&text).unwrap();
        bad.format = "other".into();
        assert!(matches!(FlowModel::from_checkpoint(bad), Err(FlowError::Format(_))));
    }

    #[test]
    fn architecture_text_form() {
        let a: FlowArchitecture = "spline:6:32,32".parse().unwrap();
        assert_eq!(a, FlowArchitecture::spline(6, vec![32, 32]));
        let b: FlowArchitecture = "affine:8:32".parse().unwrap();
        assert_eq!(b, FlowArchitecture::affine(8, vec![32]));
        for bad in ["spline:6", "conv:2:4", "spline:0:4", "affine:2:4,0", "spline:x:4", "spline:2:4:1"] {
            assert!(bad.parse::<FlowArchitecture>().is_err(), "{bad}");
        }
    }

    #[test]
    fn masks_alternate_and_are_proper() {
        for dim in 2..7 {
            for l in 0..8 {
                let m = coupling_mask(dim, l);
                assert!(m.iter().any(|&b| b) && m.iter().any(|&b| !b));
                let next = coupling_mask(dim, l ^ 1);
                assert!(m.iter().zip(&next).all(|(a, b)| a != b));
            }
        }
    }
}
