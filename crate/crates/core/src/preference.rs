//! Preferential likelihoods under exponential-noise random utility models,
//! the functional prior, and the FS-MAP training objective.
//!
//! All likelihoods depend on utility differences only. Each comparison is
//! evaluated after shifting by `M = max(f(x), f*)`, where `f*` is the best
//! non-winner, so every `c_j` lies in `[-1, 0)`:
//!
//! `P(x > C) = exp(-s (M - f(x))) * sum_l e_l(c) / (l + 1)`,
//! `c_j = -exp(-s (M - f(x_j)))`.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{self, DiffError, DifferentiableScalar, Tape, Var};
use crate::flow::DensityModel;

/// Probabilities below this are floored and counted.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq)]
pub enum PreferenceError {
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("precision must be positive, got {0}")]
    Precision(f64),
}

/// Counters for numerically degenerate evaluations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub underflow_floors: u64,
    pub non_finite_recoveries: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: Diagnostics) {
        self.underflow_floors += other.underflow_floors;
        self.non_finite_recoveries += other.non_finite_recoveries;
    }
}

/// `e_0..=e_m` of `values`.
pub fn elementary_symmetric_sums(values: &[f64]) -> Result<Vec<f64>, PreferenceError> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(PreferenceError::NonFinite(i));
    }
    let mut out = vec![0.0; values.len() + 1];
    diffnum::symmetric_sums_into(values, &mut out);
    Ok(out)
}

/// Shifted series value and `s * (M - f(x))`; the probability is
/// `series * exp(-shift)`.
fn comparison_series(f: &[f64], winner: usize, s: f64) -> (f64, f64) {
    let others: Vec<f64> = f
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != winner)
        .map(|(_, &fj)| fj)
        .collect();
    let mut scratch = WinScratch::default();
    series_against(f[winner], &others, s, &mut scratch)
}

/// Reusable buffers for repeated win-probability evaluations.
#[derive(Debug, Default)]
pub struct WinScratch {
    c: Vec<f64>,
    b: Vec<f64>,
}

fn series_against(fx: f64, others: &[f64], s: f64, scratch: &mut WinScratch) -> (f64, f64) {
    let m = others.iter().copied().fold(fx, f64::max);
    scratch.c.clear();
    scratch.c.extend(others.iter().map(|&fj| -(-s * (m - fj)).exp()));
    scratch.b.clear();
    scratch.b.resize(others.len() + 1, 0.0);
    diffnum::symmetric_sums_into(&scratch.c, &mut scratch.b);
    let series = diffnum::neumaier_sum(
        scratch
            .b
            .iter()
            .enumerate()
            .map(|(l, bl)| bl / (l + 1) as f64),
    );
    (series, s * (m - fx))
}

/// Probability that utility `fx` beats every utility in `others`, clamped
/// to `[0, 1]`.
pub fn win_probability(fx: f64, others: &[f64], s: f64, scratch: &mut WinScratch) -> f64 {
    let (series, shift) = series_against(fx, others, s, scratch);
    (series * (-shift).exp()).clamp(0.0, 1.0)
}

/// Probability that `winner` beats the rest of the choice set, without
/// flooring. May be slightly off `[0, 1]` after cancellation.
pub fn comparison_probability(f: &[f64], winner: usize, s: f64) -> f64 {
    let (series, shift) = comparison_series(f, winner, s);
    series * (-shift).exp()
}

/// `log P(x_winner > C)`, floored at `log 1e-300`.
pub fn comparison_log_likelihood(f: &[f64], winner: usize, s: f64, diag: &mut Diagnostics) -> f64 {
    assert!(f.len() >= 2 && winner < f.len(), "need k >= 2 and a valid winner");
    let (series, shift) = comparison_series(f, winner, s);
    let log_p = if series > 0.0 { series.ln() - shift } else { f64::NEG_INFINITY };
    if log_p < PROBABILITY_FLOOR.ln() {
        diag.underflow_floors += 1;
        return PROBABILITY_FLOOR.ln();
    }
    log_p
}

/// Sum of comparison log-likelihoods over the shrinking suffixes of
/// `ranking` (most preferred first).
pub fn ranking_log_likelihood(f: &[f64], ranking: &[usize], s: f64, diag: &mut Diagnostics) -> f64 {
    let mut total = 0.0;
    let mut stage = Vec::with_capacity(ranking.len());
    for j in 0..ranking.len().saturating_sub(1) {
        stage.clear();
        stage.extend(ranking[j..].iter().map(|&i| f[i]));
        total += comparison_log_likelihood(&stage, 0, s, diag);
    }
    total
}

/// Sum of utilities at the winners; the uniform hyperprior is a constant.
pub fn log_functional_prior(f_at_winners: &[f64]) -> f64 {
    diffnum::neumaier_sum(f_at_winners.iter().copied())
}

/// Tape version of [`comparison_log_likelihood`]; `f` holds the `k`
/// utilities of the choice set.
pub fn record_comparison_log_likelihood(
    tape: &mut Tape<'_>,
    f: Var,
    winner: usize,
    s: f64,
    diag: &mut Diagnostics,
) -> Var {
    let k = tape.len_of(f);
    assert!(k >= 2 && winner < k, "need k >= 2 and a valid winner");
    let others: Vec<usize> = (0..k).filter(|&j| j != winner).collect();
    let fx = tape.slice(f, winner, 1);
    let fo = tape.gather(f, &others);
    let best_other = tape.max_all(fo);
    let m = tape.maximum(fx, best_other);
    let gap = tape.sub(fo, m);
    let scaled = tape.scale(gap, s);
    let a = tape.exp(scaled);
    let c = tape.neg(a);
    let b = tape.sym_sums(c);
    let weights: Vec<f64> = (0..k).map(|l| 1.0 / (l + 1) as f64).collect();
    let w = tape.constant(&weights);
    let terms = tape.mul(b, w);
    let series = tape.sum(terms);
    let lead = tape.sub(m, fx);
    let shift_value = s * tape.scalar(lead);
    let series_value = tape.scalar(series);
    if !(series_value > 0.0) || series_value.ln() - shift_value < PROBABILITY_FLOOR.ln() {
        diag.underflow_floors += 1;
        return tape.scalar_constant(PROBABILITY_FLOOR.ln());
    }
    let log_series = tape.ln(series);
    let shift = tape.scale(lead, s);
    tape.sub(log_series, shift)
}

/// Tape version of [`ranking_log_likelihood`].
pub fn record_ranking_log_likelihood(
    tape: &mut Tape<'_>,
    f: Var,
    ranking: &[usize],
    s: f64,
    diag: &mut Diagnostics,
) -> Var {
    let stages: Vec<Var> = (0..ranking.len().saturating_sub(1))
        .map(|j| {
            let stage = tape.gather(f, &ranking[j..]);
            record_comparison_log_likelihood(tape, stage, 0, s, diag)
        })
        .collect();
    match stages.len() {
        0 => tape.scalar_constant(0.0),
        1 => stages[0],
        _ => {
            let all = tape.concat(&stages);
            tape.sum(all)
        }
    }
}

/// One ranked (or partially ranked) choice set.
///
/// `ranking` lists point indices from most to least preferred. A full
/// ranking has `k` entries; a k-wise comparison keeps only the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub points: Vec<Vec<f64>>,
    pub ranking: Vec<usize>,
}

impl Observation {
    pub fn ranking(points: Vec<Vec<f64>>, ranking: Vec<usize>) -> Self {
        Self { points, ranking }
    }

    pub fn comparison(points: Vec<Vec<f64>>, winner: usize) -> Self {
        Self {
            points,
            ranking: vec![winner],
        }
    }

    pub fn k(&self) -> usize {
        self.points.len()
    }

    pub fn winner(&self) -> usize {
        self.ranking[0]
    }

    pub fn is_full_ranking(&self) -> bool {
        self.ranking.len() == self.points.len()
    }

    pub fn validate(&self, dim: usize) -> Result<(), String> {
        let k = self.k();
        if k < 2 {
            return Err(format!("choice set needs at least 2 points, got {k}"));
        }
        if let Some(p) = self.points.iter().find(|p| p.len() != dim) {
            return Err(format!("point of dimension {} in a {dim}-dimensional dataset", p.len()));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        if self.ranking.len() != 1 && self.ranking.len() != k {
            return Err(format!(
                "ranking must list 1 or {k} indices, got {}",
                self.ranking.len()
            ));
        }
        let mut seen = vec![false; k];
        for &i in &self.ranking {
            if i >= k || std::mem::replace(&mut seen[i], true) {
                return Err(format!("ranking {:?} is not a permutation of 0..{k}", self.ranking));
            }
        }
        Ok(())
    }

    /// Log-likelihood given utilities at the choice-set points.
    pub fn log_likelihood(&self, f: &[f64], s: f64, diag: &mut Diagnostics) -> f64 {
        if self.is_full_ranking() {
            ranking_log_likelihood(f, &self.ranking, s, diag)
        } else {
            comparison_log_likelihood(f, self.winner(), s, diag)
        }
    }

    fn record_log_likelihood(&self, tape: &mut Tape<'_>, f: Var, s: f64, diag: &mut Diagnostics) -> Var {
        if self.is_full_ranking() {
            record_ranking_log_likelihood(tape, f, &self.ranking, s, diag)
        } else {
            record_comparison_log_likelihood(tape, f, self.winner(), s, diag)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    dim: usize,
    observations: Vec<Observation>,
}

impl PreferenceDataset {
    pub fn new(dim: usize, observations: Vec<Observation>) -> Result<Self, PreferenceError> {
        for (index, obs) in observations.iter().enumerate() {
            obs.validate(dim)
                .map_err(|reason| PreferenceError::InvalidObservation { index, reason })?;
        }
        Ok(Self { dim, observations })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn push(&mut self, obs: Observation) -> Result<(), PreferenceError> {
        obs.validate(self.dim).map_err(|reason| PreferenceError::InvalidObservation {
            index: self.observations.len(),
            reason,
        })?;
        self.observations.push(obs);
        Ok(())
    }

    /// Shared choice-set size, if all observations agree.
    pub fn k(&self) -> Option<usize> {
        let k = self.observations.first()?.k();
        self.observations.iter().all(|o| o.k() == k).then_some(k)
    }

    /// `X_>`: the top element of every observation.
    pub fn winners(&self) -> Vec<&[f64]> {
        self.observations
            .iter()
            .map(|o| o.points[o.winner()].as_slice())
            .collect()
    }

    /// `X`: every point of every choice set.
    pub fn design(&self) -> Vec<&[f64]> {
        self.observations
            .iter()
            .flat_map(|o| o.points.iter().map(Vec::as_slice))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Noise precision assumed by the likelihood.
    pub s_lik: f64,
    /// Include the functional prior over winners.
    pub prior: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            s_lik: 1.0,
            prior: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        if !(self.s_lik > 0.0 && self.s_lik.is_finite()) {
            return Err(PreferenceError::Precision(self.s_lik));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub loglik: f64,
    pub log_prior: f64,
    pub total: f64,
}

/// FS-MAP objective over a subset of observations, maximized in training.
pub struct FsMapObjective<'a, M: DensityModel + ?Sized> {
    model: &'a M,
    observations: Vec<&'a Observation>,
    config: ObjectiveConfig,
    diagnostics: Cell<Diagnostics>,
}

impl<'a, M: DensityModel + ?Sized> FsMapObjective<'a, M> {
    pub fn new(model: &'a M, observations: Vec<&'a Observation>, config: ObjectiveConfig) -> Self {
        Self {
            model,
            observations,
            config,
            diagnostics: Cell::new(Diagnostics::default()),
        }
    }

    pub fn full(model: &'a M, dataset: &'a PreferenceDataset, config: ObjectiveConfig) -> Self {
        Self::new(model, dataset.observations().iter().collect(), config)
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics.get()
    }

    /// Records `(loglik, log_prior)`.
    pub fn record_terms(&self, tape: &mut Tape<'_>) -> (Var, Var) {
        let mut diag = self.diagnostics.get();
        let mut lik = Vec::with_capacity(self.observations.len());
        let mut prior = Vec::with_capacity(self.observations.len());
        for obs in &self.observations {
            let fs: Vec<Var> = obs
                .points
                .iter()
                .map(|p| self.model.record_log_density(tape, p))
                .collect();
            let f = tape.concat(&fs);
            lik.push(obs.record_log_likelihood(tape, f, self.config.s_lik, &mut diag));
            prior.push(fs[obs.winner()]);
        }
        self.diagnostics.set(diag);
        let sum_of = |tape: &mut Tape<'_>, parts: &[Var]| {
            if parts.is_empty() {
                tape.scalar_constant(0.0)
            } else {
                let all = tape.concat(parts);
                tape.sum(all)
            }
        };
        let loglik = sum_of(tape, &lik);
        let log_prior = sum_of(tape, &prior);
        (loglik, log_prior)
    }

    /// Term-by-term values at the model's current parameters.
    pub fn evaluate(&self) -> Result<ObjectiveTerms, DiffError> {
        let params = self.model.params().values();
        let mut tape = Tape::new(params);
        let (l, p) = self.record_terms(&mut tape);
        if let Some((node, primitive)) = tape.first_non_finite() {
            return Err(DiffError::NonFinite { primitive, node });
        }
        let (loglik, log_prior) = (tape.scalar(l), tape.scalar(p));
        let total = if self.config.prior { loglik + log_prior } else { loglik };
        Ok(ObjectiveTerms {
            loglik,
            log_prior,
            total,
        })
    }
}

impl<M: DensityModel + ?Sized> DifferentiableScalar for FsMapObjective<'_, M> {
    fn record(&self, tape: &mut Tape<'_>) -> Var {
        let (loglik, log_prior) = self.record_terms(tape);
        if self.config.prior {
            tape.add(loglik, log_prior)
        } else {
            loglik
        }
    }
}
