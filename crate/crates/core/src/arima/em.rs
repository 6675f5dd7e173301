//! EM refinement of linear-Gaussian state-space parameters with `C` fixed.
//!
//! E-step: Kalman filter plus Rauch–Tung–Striebel smoother with lag-one
//! covariances. M-step: closed-form `A`, `Q` and diagonal `R`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{kalman_predict, kalman_update_with_loglik, GaussianBelief, RegimeParams};
use crate::linalg::{self, symmetrize, JITTER};
use crate::switch::ChannelDynamicsBlock;

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub update_r: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iters: 100, rel_tol: 1e-6, update_r: true }
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub params: RegimeParams,
    /// Marginal log-likelihood of every visited parameter set, in order; the
    /// last entry belongs to `params`.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SmoothedSequence {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `Cov(x_t, x_{t−1} | y_{1:T})` for `t ≥ 1` (index 0 unused).
    pub lag_one: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

fn inverse_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    match linalg::cholesky_jittered(m, "smoother gain") {
        Ok(ch) => ch.inverse(),
        Err(_) => m
            .clone()
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::zeros(n, n)),
    }
}

/// Filter and smooth one sequence. `prior` is the belief on `x_1` before
/// seeing `y_1`.
pub fn smooth(
    params: &RegimeParams,
    seq: &[DVector<f64>],
    prior: &GaussianBelief,
) -> Result<SmoothedSequence> {
    let t_len = seq.len();
    if t_len == 0 {
        return Err(Error::invalid("cannot smooth an empty sequence"));
    }
    let mut pred: Vec<GaussianBelief> = Vec::with_capacity(t_len);
    let mut filt: Vec<GaussianBelief> = Vec::with_capacity(t_len);
    let mut ll = 0.0;
    for (t, y) in seq.iter().enumerate() {
        let p = if t == 0 {
            prior.clone()
        } else {
            kalman_predict(&filt[t - 1], &params.a, &params.q)?
        };
        let (f, l) = kalman_update_with_loglik(&p, y, &params.c, &params.r)?;
        ll += l;
        pred.push(p);
        filt.push(f);
    }

    let mut means = vec![DVector::zeros(0); t_len];
    let mut covs = vec![DMatrix::zeros(0, 0); t_len];
    let mut lag_one = vec![DMatrix::zeros(0, 0); t_len];
    means[t_len - 1] = filt[t_len - 1].mean.clone();
    covs[t_len - 1] = filt[t_len - 1].cov.clone();
    for t in (0..t_len - 1).rev() {
        let j = &filt[t].cov * params.a.transpose() * inverse_psd(&pred[t + 1].cov);
        means[t] = &filt[t].mean + &j * (&means[t + 1] - &pred[t + 1].mean);
        covs[t] = symmetrize(&(&filt[t].cov + &j * (&covs[t + 1] - &pred[t + 1].cov) * j.transpose()));
        lag_one[t + 1] = &covs[t + 1] * j.transpose();
    }
    Ok(SmoothedSequence { means, covs, lag_one, log_likelihood: ll })
}

struct Stats {
    s11: DMatrix<f64>,
    s10: DMatrix<f64>,
    s00: DMatrix<f64>,
    transitions: usize,
    r_num: Vec<f64>,
    r_den: Vec<usize>,
    ll: f64,
}

fn e_step(
    params: &RegimeParams,
    sequences: &[Vec<DVector<f64>>],
    priors: &[GaussianBelief],
) -> Result<Stats> {
    let n = params.state_dim();
    let m = params.obs_dim();
    let mut st = Stats {
        s11: DMatrix::zeros(n, n),
        s10: DMatrix::zeros(n, n),
        s00: DMatrix::zeros(n, n),
        transitions: 0,
        r_num: vec![0.0; m],
        r_den: vec![0; m],
        ll: 0.0,
    };
    for (seq, prior) in sequences.iter().zip(priors) {
        let sm = smooth(params, seq, prior)?;
        st.ll += sm.log_likelihood;
        for t in 0..seq.len() {
            let second = &sm.covs[t] + &sm.means[t] * sm.means[t].transpose();
            if t > 0 {
                st.s11 += &second;
                st.s10 += &sm.lag_one[t] + &sm.means[t] * sm.means[t - 1].transpose();
                st.transitions += 1;
            }
            if t + 1 < seq.len() {
                st.s00 += &second;
            }
            for i in 0..m {
                let row = params.c.row(i);
                if !seq[t][i].is_finite() || row.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let resid = seq[t][i] - (row * &sm.means[t])[0];
                let spread = (row * &sm.covs[t] * row.transpose())[0];
                st.r_num[i] += resid * resid + spread;
                st.r_den[i] += 1;
            }
        }
    }
    Ok(st)
}

fn m_step(params: &RegimeParams, st: &Stats, update_r: bool) -> Option<RegimeParams> {
    if st.transitions == 0 {
        return None;
    }
    let s00_inv = st.s00.clone().try_inverse()?;
    let a = &st.s10 * s00_inv;
    let mut q = (&st.s11 - &a * st.s10.transpose()) / st.transitions as f64;
    q = symmetrize(&q);
    let min_eig = linalg::min_eigenvalue(&q);
    if min_eig < 0.0 {
        // round-off on deterministic (lag) coordinates
        let eig = q.clone().symmetric_eigen();
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        q = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()));
    }
    let mut r = params.r.clone();
    if update_r {
        for i in 0..r.nrows() {
            if st.r_den[i] > 0 {
                // The filter adds JITTER to the innovation variance, so the
                // stored value is reduced by it to keep the effective R exact.
                r[(i, i)] = (st.r_num[i] / st.r_den[i] as f64 - JITTER).max(0.0);
            }
        }
    }
    let out = RegimeParams { a, q, r, ..params.clone() };
    (linalg::all_finite_mat(&out.a) && linalg::all_finite_mat(&out.q) && linalg::all_finite_mat(&out.r))
        .then_some(out)
}

/// Runs EM from `params`. Stops when the relative log-likelihood improvement
/// falls below `rel_tol` or after `max_iters` M-steps.
pub fn em_refine(
    params: &RegimeParams,
    sequences: &[Vec<DVector<f64>>],
    priors: &[GaussianBelief],
    opts: &EmOptions,
) -> Result<EmResult> {
    params.check_dims()?;
    if sequences.is_empty() || sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("EM needs at least one non-empty sequence"));
    }
    if priors.len() != sequences.len() {
        return Err(Error::dim("one prior per sequence required"));
    }
    let mut current = params.clone();
    let mut stats = e_step(&current, sequences, priors)?;
    let mut lls = vec![stats.ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let Some(next) = m_step(&current, &stats, opts.update_r) else { break };
        let next_stats = match e_step(&next, sequences, priors) {
            Ok(s) => s,
            Err(_) if iterations > 0 => break,
            Err(e) => return Err(e),
        };
        iterations += 1;
        let prev_ll = stats.ll;
        current = next;
        stats = next_stats;
        lls.push(stats.ll);
        if (stats.ll - prev_ll) < opts.rel_tol * prev_ll.abs() {
            converged = true;
            break;
        }
    }
    Ok(EmResult { params: current, log_likelihoods: lls, iterations, converged })
}

/// Broad prior for a univariate block: every lag at the first observed
/// value, innovations at zero, variance `10·var(y)` on the diagonal.
pub(crate) fn block_prior(block: &ChannelDynamicsBlock, first: f64, var: f64) -> GaussianBelief {
    let n = block.dim();
    let mut mean = DVector::zeros(n);
    for i in 0..block.n_pos {
        mean[i] = first;
    }
    let cov = DMatrix::identity(n, n) * (10.0 * var).max(1e-6);
    GaussianBelief { mean, cov }
}

/// EM refinement of a single-channel block on univariate segments.
pub fn em_refine_block(
    block: &ChannelDynamicsBlock,
    segments: &[&[f64]],
    opts: &EmOptions,
) -> Result<(ChannelDynamicsBlock, EmResult)> {
    let vals: Vec<f64> = segments.iter().flat_map(|s| s.iter().copied()).filter(|v| v.is_finite()).collect();
    if vals.len() < 2 {
        return Err(Error::invalid("EM needs observed values"));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    let mut seqs = Vec::new();
    let mut priors = Vec::new();
    for seg in segments {
        let Some(first) = seg.iter().copied().find(|v| v.is_finite()) else { continue };
        seqs.push(seg.iter().map(|&v| DVector::from_element(1, v)).collect::<Vec<_>>());
        priors.push(block_prior(block, first, var));
    }
    let res = em_refine(&block.as_regime(0), &seqs, &priors, opts)?;
    Ok((block.with_regime(&res.params)?, res))
}
