//! Discriminative SLDS: classifier switch posterior, conditional x-update.

use std::collections::VecDeque;

use nalgebra::DVector;

use super::{initial_prior, observations, FilterInit, FilterState, InferenceOutput, Provenance, SwitchPosterior};
use crate::error::{Error, Result};
use crate::features::{feature_rows, feature_values_from, WindowSpec};
use crate::forest::FactorClassifier;
use crate::gaussian::{collapse_weighted, kalman_predict, kalman_update, GaussianBelief};
use crate::switch::RegimeSet;

/// Per-factor marginals from the classifiers, joint as their product.
pub fn dslds_switch_posterior(classifiers: &[FactorClassifier], features: &[f64]) -> Result<SwitchPosterior> {
    let marginals = classifiers.iter().map(|c| c.marginal(features)).collect::<Result<Vec<_>>>()?;
    Ok(SwitchPosterior::from_marginals(marginals))
}

/// Switch posteriors for every step of a sequence.
pub fn dslds_switch_posteriors(
    series: &[Vec<f64>],
    spec: &WindowSpec,
    classifiers: &[FactorClassifier],
) -> Result<Vec<SwitchPosterior>> {
    let t_len = series.first().map_or(0, Vec::len);
    if t_len == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    let steps: Vec<usize> = (0..t_len).collect();
    let rows = feature_rows(series, spec, &steps);
    rows.iter().map(|f| dslds_switch_posterior(classifiers, f)).collect()
}

fn condition_all(
    priors: impl Fn(usize) -> Result<GaussianBelief>,
    s_post: &SwitchPosterior,
    y: &DVector<f64>,
    regimes: &RegimeSet,
    t: usize,
) -> Result<(FilterState, GaussianBelief)> {
    if s_post.joint.len() != regimes.n_configs() {
        return Err(Error::dim("switch posterior does not match the regime set"));
    }
    let mut beliefs = Vec::with_capacity(regimes.n_configs());
    for (k, reg) in regimes.regimes.iter().enumerate() {
        beliefs.push(kalman_update(&priors(k)?, y, &reg.c, &reg.r)?);
    }
    let collapsed = collapse_weighted(s_post.joint.iter().copied().zip(beliefs.iter()));
    Ok((FilterState { weights: s_post.joint.clone(), beliefs, t }, collapsed))
}

/// One x-step: per configuration, predict with `(A, Q)` and update with
/// `(C, R)` (artifact and missing rows removed); collapse with the switch
/// posterior as weights.
pub fn dslds_x_step(
    prev: &GaussianBelief,
    s_post: &SwitchPosterior,
    y: &DVector<f64>,
    regimes: &RegimeSet,
) -> Result<(FilterState, GaussianBelief)> {
    condition_all(
        |k| {
            let reg = &regimes.regimes[k];
            kalman_predict(prev, &reg.a, &reg.q)
        },
        s_post,
        y,
        regimes,
        0,
    )
}

/// x-filtering under a given sequence of switch posteriors.
pub fn dslds_filter_with_posteriors(
    series: &[Vec<f64>],
    timestamps: &[f64],
    posteriors: Vec<SwitchPosterior>,
    regimes: &RegimeSet,
    init: &FilterInit,
    channels: &[String],
    provenance: Provenance,
) -> Result<InferenceOutput> {
    let ys = observations(series);
    if ys.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    if posteriors.len() != ys.len() || timestamps.len() != ys.len() {
        return Err(Error::dim("posteriors, timestamps and observations differ in length"));
    }
    if ys[0].len() != regimes.obs_dim() {
        return Err(Error::SchemaMismatch(format!(
            "model has {} channels, data has {}",
            regimes.obs_dim(),
            ys[0].len()
        )));
    }
    let mut beliefs = Vec::with_capacity(ys.len());
    let (_, mut cur) = condition_all(|k| initial_prior(regimes, k, &ys[0], init), &posteriors[0], &ys[0], regimes, 0)?;
    beliefs.push(cur.clone());
    for t in 1..ys.len() {
        let (_, next) = dslds_x_step(&cur, &posteriors[t], &ys[t], regimes)?;
        cur = next;
        beliefs.push(cur.clone());
    }
    InferenceOutput::assemble(provenance, timestamps.to_vec(), channels.to_vec(), posteriors, beliefs, regimes)
}

/// Full DSLDS run: windowed features, classifier posteriors, x-filter.
pub fn dslds_filter(
    series: &[Vec<f64>],
    timestamps: &[f64],
    spec: &WindowSpec,
    classifiers: &[FactorClassifier],
    regimes: &RegimeSet,
    init: &FilterInit,
    channels: &[String],
) -> Result<InferenceOutput> {
    let posteriors = dslds_switch_posteriors(series, spec, classifiers)?;
    dslds_filter_with_posteriors(series, timestamps, posteriors, regimes, init, channels, Provenance::Dslds)
}

/// Output of the streaming driver for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStep {
    pub step: usize,
    pub timestamp: f64,
    /// Timestamp of the sample whose arrival released this step.
    pub emit_timestamp: f64,
    pub posterior: SwitchPosterior,
    pub belief: GaussianBelief,
}

/// Online DSLDS: step `t` is emitted once `y_{t+r}` has arrived.
pub struct StreamingDslds<'a> {
    spec: WindowSpec,
    classifiers: &'a [FactorClassifier],
    regimes: &'a RegimeSet,
    init: FilterInit,
    /// Last `l + r + 1` samples with their step index and timestamp.
    buffer: VecDeque<(usize, f64, DVector<f64>)>,
    first: Option<DVector<f64>>,
    received: usize,
    next_step: usize,
    belief: Option<GaussianBelief>,
}

impl<'a> StreamingDslds<'a> {
    pub fn new(spec: WindowSpec, classifiers: &'a [FactorClassifier], regimes: &'a RegimeSet, init: FilterInit) -> Self {
        Self {
            spec,
            classifiers,
            regimes,
            init,
            buffer: VecDeque::new(),
            first: None,
            received: 0,
            next_step: 0,
            belief: None,
        }
    }

    fn window_series(&self, t: usize, last: usize) -> Vec<Vec<f64>> {
        let n_ch = self.regimes.obs_dim();
        let sample = |i: isize| -> &DVector<f64> {
            if i < 0 {
                return self.first.as_ref().expect("first sample");
            }
            let i = (i as usize).min(last);
            let (idx0, _, _) = &self.buffer[0];
            &self.buffer[i - idx0].2
        };
        let start = t as isize - self.spec.l as isize;
        (0..n_ch)
            .map(|c| (0..self.spec.width()).map(|k| sample(start + k as isize)[c]).collect())
            .collect()
    }

    fn emit(&mut self, last: usize, emit_timestamp: f64) -> Result<StreamStep> {
        let t = self.next_step;
        let win = self.window_series(t, last);
        let feats = feature_values_from(&win, &self.spec);
        let post = super::dslds_switch_posterior(self.classifiers, &feats)?;
        let idx0 = self.buffer[0].0;
        let (_, ts, y) = self.buffer[t - idx0].clone();
        let belief = match &self.belief {
            None => {
                let regimes = self.regimes;
                let init = &self.init;
                condition_all(|k| initial_prior(regimes, k, &y, init), &post, &y, regimes, 0)?.1
            }
            Some(prev) => dslds_x_step(prev, &post, &y, self.regimes)?.1,
        };
        self.belief = Some(belief.clone());
        self.next_step += 1;
        while self.buffer[0].0 + self.spec.l < self.next_step {
            self.buffer.pop_front();
        }
        Ok(StreamStep { step: t, timestamp: ts, emit_timestamp, posterior: post, belief })
    }

    /// Feeds one sample; returns the step released by it, if any.
    pub fn push(&mut self, timestamp: f64, y: DVector<f64>) -> Result<Option<StreamStep>> {
        if y.len() != self.regimes.obs_dim() {
            return Err(Error::SchemaMismatch("sample width differs from the model".into()));
        }
        if self.first.is_none() {
            self.first = Some(y.clone());
        }
        let idx = self.received;
        self.buffer.push_back((idx, timestamp, y));
        self.received += 1;
        if idx >= self.next_step + self.spec.r {
            return self.emit(idx, timestamp).map(Some);
        }
        Ok(None)
    }

    /// Releases the remaining steps with end-of-stream edge replication.
    pub fn finish(mut self) -> Result<Vec<StreamStep>> {
        let mut out = Vec::new();
        let Some(last) = self.received.checked_sub(1) else { return Ok(out) };
        let last_ts = self.buffer.back().map(|b| b.1).unwrap_or(f64::NAN);
        while self.next_step <= last {
            out.push(self.emit(last, last_ts)?);
        }
        Ok(out)
    }
}
