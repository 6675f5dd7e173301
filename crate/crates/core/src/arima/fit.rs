//! Exact maximum-likelihood fitting of ARIMA models observed with noise.
//!
//! With `y_t = x_t + v_t` and `(1 − B)^d x_t = w_t` an ARMA(p, q) process, the
//! differenced observations are `z_t = w_t + Σ_k c_k v_{t−k}` with
//! `c_k = (−1)^k C(d, k)`. That model is stationary, so its likelihood is
//! evaluated by a Kalman filter started from the stationary covariance.

use nalgebra::{DMatrix, DVector};

use super::{acf, difference, durbin_levinson, finite_mean_var, ArimaFit, ArimaOrder};
use crate::error::{Error, Result};
use crate::gaussian::univariate_loglik;
use crate::linalg::solve_discrete_lyapunov;
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub optimizer: NelderMeadOptions,
    /// Starting shares of the differenced variance given to observation noise.
    pub obs_noise_shares: [f64; 3],
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { optimizer: NelderMeadOptions::default(), obs_noise_shares: [0.01, 0.5, 0.95] }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Maps partial autocorrelations in (−1, 1) to stationary AR coefficients.
pub(crate) fn pacf_to_ar(r: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(r.len());
    for (k, &rk) in r.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - rk * prev[k - 1 - j];
        }
        phi.push(rk);
    }
    phi
}

/// Inverse of [`pacf_to_ar`]; `None` when the polynomial is not stationary.
pub(crate) fn ar_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let mut cur = phi.to_vec();
    let mut r = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let rk = cur[k];
        if !(rk.abs() < 1.0) {
            return None;
        }
        r[k] = rk;
        let denom = 1.0 - rk * rk;
        cur = (0..k).map(|j| (cur[j] + rk * cur[k - 1 - j]) / denom).collect();
    }
    Some(r)
}

struct Problem {
    order: ArimaOrder,
    segments: Vec<Vec<f64>>,
    var: f64,
    floor: f64,
}

/// State-space matrices of the differenced model.
fn differenced_model(
    order: ArimaOrder,
    ar: &[f64],
    ma: &[f64],
    sigma2: f64,
    obs_var: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let ArimaOrder { p, d, q } = order;
    let nw = p.max(1);
    let ve = nw + q;
    let n = ve + d + 1;
    let mut a = DMatrix::zeros(n, n);
    for (i, phi) in ar.iter().enumerate() {
        a[(0, i)] = *phi;
    }
    for (j, theta) in ma.iter().enumerate() {
        a[(0, nw + j)] = *theta;
    }
    for i in 1..nw {
        a[(i, i - 1)] = 1.0;
    }
    for k in 1..q {
        a[(nw + k, nw + k - 1)] = 1.0;
    }
    for k in 1..=d {
        a[(ve + k, ve + k - 1)] = 1.0;
    }
    let mut qm = DMatrix::zeros(n, n);
    qm[(0, 0)] = sigma2;
    if q > 0 {
        qm[(0, nw)] = sigma2;
        qm[(nw, 0)] = sigma2;
        qm[(nw, nw)] = sigma2;
    }
    qm[(ve, ve)] = obs_var;
    let mut h = DVector::zeros(n);
    h[0] = 1.0;
    for k in 0..=d {
        h[ve + k] = if k % 2 == 0 { 1.0 } else { -1.0 } * binomial(d, k);
    }
    (a, qm, h)
}

fn loglik_of(
    order: ArimaOrder,
    ar: &[f64],
    ma: &[f64],
    sigma2: f64,
    obs_var: f64,
    segments: &[Vec<f64>],
) -> Result<f64> {
    let (a, q, h) = differenced_model(order, ar, ma, sigma2, obs_var);
    let p0 = solve_discrete_lyapunov(&a, &q)?;
    let m0 = DVector::zeros(a.nrows());
    let mut ll = 0.0;
    for seg in segments {
        ll += univariate_loglik(&a, &q, &h, 0.0, &m0, &p0, seg)?;
    }
    Ok(ll)
}

impl Problem {
    fn new(segments: &[&[f64]], order: ArimaOrder) -> Result<(Self, f64)> {
        order.validate()?;
        let mut diffed: Vec<Vec<f64>> = segments
            .iter()
            .filter(|s| s.len() > order.d + 1)
            .map(|s| difference(s, order.d))
            .collect::<Result<_>>()?;
        let pooled: Vec<f64> = diffed.iter().flatten().copied().collect();
        let (mean, var, n) = finite_mean_var(&pooled)
            .ok_or_else(|| Error::invalid("no finite observations to fit"))?;
        if n < 10 * order.n_params() {
            return Err(Error::invalid(format!(
                "{n} usable observations are too few for {order} (need {})",
                10 * order.n_params()
            )));
        }
        if !(var > 0.0) {
            return Err(Error::invalid("differenced series has zero variance"));
        }
        let mean = if order.d == 0 { mean } else { 0.0 };
        for s in &mut diffed {
            for v in s.iter_mut() {
                *v -= mean;
            }
        }
        let floor = 1e-8 * var;
        Ok((
            Self { order, segments: diffed, var, floor },
            mean,
        ))
    }

    fn unpack(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let ArimaOrder { p, q, .. } = self.order;
        let r_ar: Vec<f64> = u[..p].iter().map(|v| v.tanh()).collect();
        let r_ma: Vec<f64> = u[p..p + q].iter().map(|v| v.tanh()).collect();
        let ar = pacf_to_ar(&r_ar);
        let ma: Vec<f64> = pacf_to_ar(&r_ma).iter().map(|v| -v).collect();
        let sigma2 = u[p + q].exp();
        let obs = self.floor + u[p + q + 1].exp();
        (ar, ma, sigma2, obs)
    }

    fn pack(&self, ar: &[f64], ma: &[f64], sigma2: f64, obs: f64) -> Option<Vec<f64>> {
        let atanh = |r: f64| r.clamp(-0.999_999, 0.999_999).atanh();
        let mut u: Vec<f64> = ar_to_pacf(ar)?.into_iter().map(atanh).collect();
        let neg: Vec<f64> = ma.iter().map(|v| -v).collect();
        u.extend(ar_to_pacf(&neg)?.into_iter().map(atanh));
        u.push(sigma2.max(1e-300).ln());
        u.push((obs - self.floor).max(self.floor * 1e-6).max(1e-300).ln());
        Some(u)
    }

    fn objective(&self, u: &[f64]) -> f64 {
        let (ar, ma, s2, obs) = self.unpack(u);
        match loglik_of(self.order, &ar, &ma, s2, obs, &self.segments) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    }

    fn starts(&self, shares: &[f64]) -> Vec<Vec<f64>> {
        let ArimaOrder { p, q, d } = self.order;
        let joined: Vec<f64> = self
            .segments
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat(f64::NAN).take(p + 1)))
            .collect();
        let (r_ar, ratio) = match acf(&joined, p) {
            Ok(rho) if p > 0 => {
                let (pac, _, v) = durbin_levinson(&rho);
                (pac[1..].to_vec(), v)
            }
            _ => (vec![0.0; p], 1.0),
        };
        let ar = pacf_to_ar(&r_ar.iter().map(|r| r.clamp(-0.95, 0.95)).collect::<Vec<_>>());
        let ma = vec![0.0; q];
        let gain = binomial(2 * d, d);
        shares
            .iter()
            .filter_map(|&f| {
                let obs = (f * self.var / gain).max(self.floor * 2.0);
                let s2 = ((1.0 - f) * self.var * ratio.max(1e-3)).max(self.floor);
                self.pack(&ar, &ma, s2, obs)
            })
            .collect()
    }

    fn finish(&self, u: &[f64], mean: f64) -> Result<ArimaFit> {
        let (ar, ma, s2, obs) = self.unpack(u);
        let ll = loglik_of(self.order, &ar, &ma, s2, obs, &self.segments)?;
        Ok(ArimaFit {
            order: self.order,
            ar_coeffs: ar,
            ma_coeffs: ma,
            system_var: s2,
            obs_var: obs,
            mean,
            log_likelihood: ll,
            n_params: self.order.n_params(),
        })
    }

    fn optimise(&self, starts: Vec<Vec<f64>>, mean: f64, opts: &FitOptions) -> Result<ArimaFit> {
        // Screen every start loosely, then polish the best one.
        let screen = NelderMeadOptions {
            f_tol: opts.optimizer.f_tol.max(1e-8),
            x_tol: opts.optimizer.x_tol.max(1e-3),
            restarts: 0,
            ..opts.optimizer
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for x0 in starts {
            let m = nelder_mead(|u| self.objective(u), &x0, &screen);
            if best.as_ref().map_or(true, |(f, _)| m.f < *f) {
                best = Some((m.f, m.x));
            }
        }
        let (_, x0) = best.ok_or_else(|| Error::invalid("no valid starting point"))?;
        let m = nelder_mead(|u| self.objective(u), &x0, &opts.optimizer);
        let (f, x, converged) = (m.f, m.x, m.converged);
        if !f.is_finite() {
            return Err(Error::Singular("likelihood undefined at every start"));
        }
        let fit = self.finish(&x, mean)?;
        if converged {
            Ok(fit)
        } else {
            Err(Error::NotConverged { iterations: opts.optimizer.max_evals, best: Box::new(fit) })
        }
    }
}

/// Maximum-likelihood fit of `order` on a single series.
pub fn fit_arima_ml(series: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
    fit_arima_ml_segments(&[series], order, &FitOptions::default())
}

/// Fit on several independent segments sharing one set of parameters.
pub fn fit_arima_ml_segments(
    segments: &[&[f64]],
    order: ArimaOrder,
    opts: &FitOptions,
) -> Result<ArimaFit> {
    let (problem, mean) = Problem::new(segments, order)?;
    let starts = problem.starts(&opts.obs_noise_shares);
    problem.optimise(starts, mean, opts)
}

/// Fit started from given parameters; the result's log-likelihood is never
/// below that of the start.
pub fn fit_arima_ml_from(
    segments: &[&[f64]],
    start: &ArimaFit,
    opts: &FitOptions,
) -> Result<ArimaFit> {
    let (problem, mean) = Problem::new(segments, start.order)?;
    let x0 = problem
        .pack(&start.ar_coeffs, &start.ma_coeffs, start.system_var, start.obs_var.max(problem.floor * 1.000_001))
        .ok_or_else(|| Error::invalid("starting parameters are not stationary/invertible"))?;
    problem.optimise(vec![x0], mean, opts)
}

/// Exact log-likelihood of `fit` on the (differenced, demeaned) segments.
pub fn arima_loglik(segments: &[&[f64]], fit: &ArimaFit) -> Result<f64> {
    let (problem, _) = Problem::new(segments, fit.order)?;
    let demeaned: Vec<Vec<f64>> = if fit.order.d == 0 {
        segments.iter().map(|s| s.iter().map(|v| v - fit.mean).collect()).collect()
    } else {
        problem.segments.clone()
    };
    loglik_of(fit.order, &fit.ar_coeffs, &fit.ma_coeffs, fit.system_var, fit.obs_var, &demeaned)
}

/// `2k − 2 log L`.
pub fn aic(fit: &ArimaFit) -> f64 {
    2.0 * fit.n_params as f64 - 2.0 * fit.log_likelihood
}

/// Smallest AIC; equal AIC goes to the fit with fewer parameters.
pub fn best_by_aic(fits: Vec<ArimaFit>) -> Option<ArimaFit> {
    fits.into_iter().min_by(|a, b| aic(a).total_cmp(&aic(b)).then(a.n_params.cmp(&b.n_params)))
}

/// Fits every candidate and keeps the AIC-best successful fit.
pub fn select_fit(segments: &[&[f64]], candidates: &[ArimaOrder], opts: &FitOptions) -> Result<ArimaFit> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate orders"));
    }
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for &order in candidates {
        match fit_arima_ml_segments(segments, order, opts) {
            Ok(f) => fits.push(f),
            Err(e) => failures.push(format!("{order}: {e}")),
        }
    }
    best_by_aic(fits).ok_or_else(|| Error::AllFitsFailed(failures.join("; ")))
}

pub fn select_order(series: &[f64], candidates: &[ArimaOrder]) -> Result<ArimaOrder> {
    select_fit(&[series], candidates, &FitOptions::default()).map(|f| f.order)
}
