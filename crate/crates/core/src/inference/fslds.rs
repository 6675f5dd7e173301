//! Factorial SLDS filtered with GPB2: per step, every (previous, next)
//! configuration pair is propagated and the pairs are merged back into one
//! Gaussian per next configuration. Weights are kept in log space.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{initial_prior, observations, FilterInit, FilterState, InferenceOutput, Provenance, SwitchPosterior};
use crate::error::{Error, Result};
use crate::gaussian::{collapse_weighted, kalman_predict, kalman_update_with_loglik, GaussianBelief};
use crate::switch::{stationary_joint, RegimeSet};

fn log_normalize(log_w: &[f64], t: usize) -> Result<Vec<f64>> {
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::WeightUnderflow(t));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = w.iter().sum();
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::WeightUnderflow(t));
    }
    Ok(w.into_iter().map(|v| v / s).collect())
}

fn radix(regimes: &RegimeSet) -> Vec<usize> {
    regimes.factors.iter().map(|f| f.cardinality()).collect()
}

/// Conditions the stationary switch prior and the per-configuration state
/// priors on `y_1`.
pub fn fslds_initial_state(
    y0: &DVector<f64>,
    regimes: &RegimeSet,
    init: &FilterInit,
) -> Result<(FilterState, SwitchPosterior)> {
    if y0.len() != regimes.obs_dim() {
        return Err(Error::SchemaMismatch(format!(
            "model has {} channels, data has {}",
            regimes.obs_dim(),
            y0.len()
        )));
    }
    let prior = stationary_joint(&regimes.configs, &regimes.factors);
    let mut log_w = Vec::with_capacity(regimes.n_configs());
    let mut beliefs = Vec::with_capacity(regimes.n_configs());
    for (k, reg) in regimes.regimes.iter().enumerate() {
        let b0 = initial_prior(regimes, k, y0, init)?;
        let (b, ll) = kalman_update_with_loglik(&b0, y0, &reg.c, &reg.r)?;
        log_w.push(prior[k].ln() + ll);
        beliefs.push(b);
    }
    let weights = log_normalize(&log_w, 0)?;
    let post = SwitchPosterior::from_joint(weights.clone(), &radix(regimes));
    Ok((FilterState { weights, beliefs, t: 0 }, post))
}

/// One GPB2 step given the configuration transition matrix `z[(i, j)]`.
pub fn fslds_gpb_step(
    state: &FilterState,
    y: &DVector<f64>,
    regimes: &RegimeSet,
    z: &DMatrix<f64>,
) -> Result<(FilterState, SwitchPosterior)> {
    let k = regimes.n_configs();
    if state.weights.len() != k || state.beliefs.len() != k || z.shape() != (k, k) {
        return Err(Error::dim("filter state does not match the regime set"));
    }
    let t = state.t + 1;
    let per_next: Vec<(f64, GaussianBelief)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let reg = &regimes.regimes[j];
            let mut log_pair = Vec::new();
            let mut pair_beliefs = Vec::new();
            for i in 0..k {
                let prior = state.weights[i] * z[(i, j)];
                if prior <= 0.0 {
                    continue;
                }
                let pred = kalman_predict(&state.beliefs[i], &reg.a, &reg.q)?;
                let (b, ll) = kalman_update_with_loglik(&pred, y, &reg.c, &reg.r)?;
                log_pair.push(prior.ln() + ll);
                pair_beliefs.push(b);
            }
            if log_pair.is_empty() {
                // Unreachable configuration: keep a placeholder belief.
                return Ok((f64::NEG_INFINITY, state.beliefs[j].clone()));
            }
            let top = log_pair.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Ok((f64::NEG_INFINITY, state.beliefs[j].clone()));
            }
            let rel: Vec<f64> = log_pair.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = rel.iter().sum();
            let merged = collapse_weighted(rel.iter().map(|w| w / s).zip(pair_beliefs.iter()));
            Ok((top + s.ln(), merged))
        })
        .collect::<Result<Vec<_>>>()?;
    let log_w: Vec<f64> = per_next.iter().map(|p| p.0).collect();
    let weights = log_normalize(&log_w, t)?;
    let beliefs = per_next.into_iter().map(|p| p.1).collect();
    let post = SwitchPosterior::from_joint(weights.clone(), &radix(regimes));
    Ok((FilterState { weights, beliefs, t }, post))
}

/// Runs the GPB2 filter over a whole sequence.
pub fn fslds_filter(
    series: &[Vec<f64>],
    timestamps: &[f64],
    regimes: &RegimeSet,
    init: &FilterInit,
    channels: &[String],
) -> Result<InferenceOutput> {
    let ys = observations(series);
    if ys.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if timestamps.len() != ys.len() {
        return Err(Error::dim("timestamps and observations differ in length"));
    }
    let z = regimes.transition_matrix();
    let (mut state, post) = fslds_initial_state(&ys[0], regimes, init)?;
    let mut posteriors = vec![post];
    let mut beliefs = vec![collapse_weighted(state.weights.iter().copied().zip(state.beliefs.iter()))];
    for y in &ys[1..] {
        let (next, post) = fslds_gpb_step(&state, y, regimes, &z)?;
        beliefs.push(collapse_weighted(next.weights.iter().copied().zip(next.beliefs.iter())));
        posteriors.push(post);
        state = next;
    }
    InferenceOutput::assemble(Provenance::Fslds, timestamps.to_vec(), channels.to_vec(), posteriors, beliefs, regimes)
}
