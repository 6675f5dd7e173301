//! Per-channel dynamics learning: differencing, correlograms, order
//! suggestion, maximum-likelihood ARIMA-plus-noise fits, state-space casting
//! and EM refinement.

mod cast;
mod em;
mod fit;

pub use cast::{cast_to_state_space, inflate_block, inflate_x_factor, level_coefficients};
pub use em::{
    em_refine, em_refine_block, smooth, EmOptions, EmResult, SmoothedSequence,
};
pub use fit::{
    aic, arima_loglik, best_by_aic, fit_arima_ml, fit_arima_ml_from, fit_arima_ml_segments,
    select_fit, select_order, FitOptions,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }

    /// AR and MA coefficients plus the two noise variances.
    pub fn n_params(&self) -> usize {
        self.p + self.q + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d > 2 {
            return Err(Error::invalid(format!("differencing order {} exceeds 2", self.d)));
        }
        Ok(())
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ARIMA({},{},{})", self.p, self.d, self.q)
    }
}

/// ARIMA model of the latent level with additive white observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaFit {
    pub order: ArimaOrder,
    /// `φ` in `w_t = Σ φ_i w_{t−i} + ε_t + Σ θ_j ε_{t−j}`.
    pub ar_coeffs: Vec<f64>,
    pub ma_coeffs: Vec<f64>,
    /// Innovation variance of `ε`.
    pub system_var: f64,
    pub obs_var: f64,
    /// Mean removed before fitting (only when `d = 0`).
    pub mean: f64,
    pub log_likelihood: f64,
    pub n_params: usize,
}

/// `d`-th order differences. Missing values propagate.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::invalid(format!(
            "series of length {} too short for d = {d}",
            series.len()
        )));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

fn finite_mean_var(series: &[f64]) -> Option<(f64, f64, usize)> {
    let vals: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var, vals.len()))
}

/// Sample autocorrelation for lags `0..=max_lag`, skipping pairs with a
/// missing member.
pub fn acf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if series.len() <= max_lag {
        return Err(Error::invalid(format!(
            "series of length {} too short for {max_lag} lags",
            series.len()
        )));
    }
    let (mean, var, n) =
        finite_mean_var(series).ok_or_else(|| Error::invalid("series has no finite values"))?;
    if !(var > 0.0) {
        return Err(Error::invalid("zero-variance series has no autocorrelation"));
    }
    let gamma0 = var * n as f64;
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for k in 1..=max_lag {
        let s: f64 = series
            .iter()
            .zip(&series[k..])
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum();
        out.push((s / gamma0).clamp(-1.0, 1.0));
    }
    Ok(out)
}

/// Durbin–Levinson recursion on an autocorrelation sequence.
///
/// Returns `(pacf, phi, innovation ratio)` where `phi` holds the order
/// `len − 1` prediction coefficients and the ratio is `σ²/γ(0)`.
pub(crate) fn durbin_levinson(rho: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let m = rho.len().saturating_sub(1);
    let mut pacf = vec![1.0; m + 1];
    let mut phi: Vec<f64> = Vec::with_capacity(m);
    let mut v = 1.0;
    for k in 1..=m {
        let num = rho[k] - phi.iter().enumerate().map(|(j, p)| p * rho[k - 1 - j]).sum::<f64>();
        let r = if v > 0.0 { (num / v).clamp(-1.0, 1.0) } else { 0.0 };
        let prev = phi.clone();
        for j in 0..k - 1 {
            phi[j] = prev[j] - r * prev[k - 2 - j];
        }
        phi.push(r);
        v *= 1.0 - r * r;
        pacf[k] = r;
    }
    (pacf, phi, v)
}

/// Partial autocorrelations for lags `0..=max_lag` (`pacf[0] = 1`).
pub fn pacf(series: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let rho = acf(series, max_lag)?;
    Ok(durbin_levinson(&rho).0)
}

/// Smallest `d ∈ [min_d, max_d]` after which further differencing no
/// longer reduces the variance.
pub fn choose_d(series: &[f64], min_d: usize, max_d: usize) -> usize {
    let var_at = |d: usize| {
        difference(series, d)
            .ok()
            .and_then(|s| finite_mean_var(&s))
            .map(|(_, v, _)| v)
            .unwrap_or(f64::INFINITY)
    };
    let mut d = min_d.min(max_d);
    while d < max_d && var_at(d + 1) < var_at(d) {
        d += 1;
    }
    d
}

const MAX_SUGGESTED: usize = 8;
const MAX_SUGGESTED_ORDER: usize = 5;

/// Candidate `(p, 0, q)` orders from correlogram cut-offs.
///
/// A cut-off at lag `k` means lags `1..=k` lie outside the `1.96/√n` band
/// and lag `k + 1` inside. PACF cut-offs propose AR(k), ACF cut-offs MA(k),
/// each with `±1` neighbours.
pub fn suggest_orders(acf_vals: &[f64], pacf_vals: &[f64], n: usize) -> Vec<ArimaOrder> {
    let band = 1.96 / (n.max(1) as f64).sqrt();
    let cutoff = |vals: &[f64]| -> Option<usize> {
        let k = vals.iter().skip(1).take_while(|v| v.abs() > band).count();
        // A run reaching the last lag is a tail, not a cut-off.
        (k > 0 && k < vals.len().saturating_sub(1) && k <= MAX_SUGGESTED_ORDER).then_some(k)
    };
    let mut out: Vec<ArimaOrder> = Vec::new();
    let mut push = |p: usize, q: usize| {
        let o = ArimaOrder::new(p, 0, q);
        if p + q > 0 && p <= MAX_SUGGESTED_ORDER && q <= MAX_SUGGESTED_ORDER && !out.contains(&o) {
            out.push(o);
        }
    };
    let p_cut = cutoff(pacf_vals);
    let q_cut = cutoff(acf_vals);
    if let Some(p) = p_cut {
        push(p, 0);
        push(p - 1, 0);
        push(p + 1, 0);
    }
    if let Some(q) = q_cut {
        push(0, q);
        push(0, q - 1);
        push(0, q + 1);
    }
    if p_cut.is_some() && q_cut.is_some() {
        push(1, 1);
    }
    out.truncate(MAX_SUGGESTED);
    if out.is_empty() {
        out = (1..=3).map(|p| ArimaOrder::new(p, 0, 0)).collect();
    }
    out
}

/// Candidate orders for a series: `d` from the variance rule, `(p, q)` from
/// the correlograms of the differenced series.
pub fn candidate_orders(series: &[f64], min_d: usize, max_lag: usize) -> (usize, Vec<ArimaOrder>) {
    let d = choose_d(series, min_d, 2);
    let suggestions = difference(series, d)
        .ok()
        .and_then(|w| {
            let n = w.iter().filter(|v| v.is_finite()).count();
            let lag = max_lag.min(n.saturating_sub(2) / 2).max(1);
            let a = acf(&w, lag).ok()?;
            let p = durbin_levinson(&a).0;
            Some(suggest_orders(&a, &p, n))
        })
        .unwrap_or_else(|| suggest_orders(&[], &[], 1));
    (d, suggestions.into_iter().map(|o| ArimaOrder { d, ..o }).collect())
}
