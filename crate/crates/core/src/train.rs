//! Model training from an annotated dataset: channel dynamics (ARIMA by ML,
//! cast to state space, EM-refined), factor transitions, initialization
//! statistics and the per-factor forests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arima::{candidate_orders, cast_to_state_space, em_refine_block, inflate_block, select_fit, EmOptions, FitOptions};
use crate::error::{Error, Result};
use crate::features::{feature_rows, WindowSpec};
use crate::forest::{FactorClassifier, ForestParams};
use crate::inference::InitStats;
use crate::io::{AnnotatedDataset, ModelBundle, BUNDLE_FORMAT_VERSION};
use crate::switch::{
    default_transition, ChannelDynamicsBlock, ChannelLayout, ChannelModelSource, FactorSpec, KeyedBlock, ModelKey,
    DEFAULT_SELF_TRANSITION,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub l: usize,
    pub r: usize,
    pub forest: ForestParams,
    /// Lower bound on the differencing order of channel models.
    pub min_d: usize,
    pub max_lag: usize,
    /// Cap on the number of steps used per ARIMA fit.
    pub max_fit_steps: usize,
    /// Labelled runs shorter than this are ignored when fitting dynamics.
    pub min_segment: usize,
    pub em_iters: usize,
    /// Inflation used when a factor value's own fit fails.
    pub fallback_xi: f64,
    pub alpha: f64,
    /// Every `stride`-th step becomes a forest training row.
    pub feature_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l: 9,
            r: 5,
            forest: ForestParams::default(),
            min_d: 1,
            max_lag: 10,
            max_fit_steps: 3000,
            min_segment: 20,
            em_iters: 10,
            fallback_xi: 2.0,
            alpha: 0.5,
            feature_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.l, self.r)
    }
}

/// Learned dynamics shared by both models.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub factors: Vec<FactorSpec>,
    pub layout: ChannelLayout,
    pub init: InitStats,
    /// Keys whose own fit failed and were replaced by inflated stable dynamics.
    pub fallbacks: Vec<ModelKey>,
}

/// Per-patient, per-factor value paths.
pub fn value_paths(ds: &AnnotatedDataset, patients: &[usize]) -> Result<Vec<Vec<Vec<usize>>>> {
    patients
        .iter()
        .map(|&p| {
            let rec = &ds.patients[p];
            rec.annotations.value_paths(&ds.factors, rec.len())
        })
        .collect()
}

/// Maximal runs where `keep(t)` holds, at least `min_len` long.
fn runs_where<'a>(series: &'a [f64], min_len: usize, keep: impl Fn(usize) -> bool) -> Vec<&'a [f64]> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < series.len() {
        if keep(t) {
            let s = t;
            while t < series.len() && keep(t) {
                t += 1;
            }
            if t - s >= min_len.max(2) {
                out.push(&series[s..t]);
            }
        } else {
            t += 1;
        }
    }
    out
}

/// Keeps whole segments (the last one truncated) up to `cap` steps.
fn cap_segments<'a>(segments: Vec<&'a [f64]>, cap: usize) -> Vec<&'a [f64]> {
    let mut left = cap;
    let mut out = Vec::new();
    for s in segments {
        if left < 2 {
            break;
        }
        let take = s.len().min(left);
        out.push(&s[..take]);
        left -= take;
    }
    out
}

/// ARIMA order search, ML fit, cast, then EM refinement.
pub fn fit_channel_block(segments: &[&[f64]], cfg: &TrainConfig) -> Result<ChannelDynamicsBlock> {
    let longest = segments.iter().max_by_key(|s| s.len()).ok_or_else(|| Error::invalid("no segments to fit"))?;
    let (_, orders) = candidate_orders(longest, cfg.min_d, cfg.max_lag);
    let fit = select_fit(segments, &orders, &FitOptions::default())?;
    let block = cast_to_state_space(&fit);
    if cfg.em_iters == 0 {
        return Ok(block);
    }
    let opts = EmOptions { max_iters: cfg.em_iters, ..EmOptions::default() };
    match em_refine_block(&block, segments, &opts) {
        Ok((refined, _)) => Ok(refined),
        Err(_) => Ok(block),
    }
}

/// Transition counts with one pseudo-count per entry; rows never visited
/// keep the default sticky row.
pub fn estimate_transition(paths: &[&[usize]], cardinality: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; cardinality]; cardinality];
    for path in paths {
        for w in path.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
    }
    let default = default_transition(cardinality, DEFAULT_SELF_TRANSITION);
    counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: f64 = row.iter().sum();
            if n == 0.0 {
                return default[i].clone();
            }
            let total = n + cardinality as f64;
            row.iter().map(|c| (c + 1.0) / total).collect()
        })
        .collect()
}

enum Job {
    Stable(usize),
    Value(ModelKey),
}

/// Fits all channel dynamics on `patients`, in parallel over
/// (channel, model) jobs.
pub fn fit_dynamics(ds: &AnnotatedDataset, patients: &[usize], cfg: &TrainConfig) -> Result<Dynamics> {
    if patients.is_empty() {
        return Err(Error::invalid("training needs at least one patient"));
    }
    let n_ch = ds.channels.len();
    let paths = value_paths(ds, patients)?;

    let affects = |f: usize, v: usize, ch: usize| ds.factors[f].values[v].affected_channels.contains(&ch);
    // Channel `ch` is stable at `t` when no active value touches it.
    let stable_at = |pi: usize, ch: usize, t: usize| {
        paths[pi].iter().enumerate().all(|(f, path)| path[t] == 0 || !affects(f, path[t], ch))
    };

    let stable_segments = |ch: usize| -> Vec<&[f64]> {
        let segs: Vec<&[f64]> = patients
            .iter()
            .enumerate()
            .flat_map(|(pi, &p)| runs_where(&ds.patients[p].series[ch], cfg.min_segment, |t| stable_at(pi, ch, t)))
            .collect();
        cap_segments(segs, cfg.max_fit_steps)
    };
    let value_segments = |key: ModelKey| -> Vec<&[f64]> {
        let segs: Vec<&[f64]> = patients
            .iter()
            .enumerate()
            .flat_map(|(pi, &p)| {
                runs_where(&ds.patients[p].series[key.channel], cfg.min_segment, |t| {
                    paths[pi][key.factor][t] == key.value
                })
            })
            .collect();
        cap_segments(segs, cfg.max_fit_steps)
    };

    let mut jobs: Vec<Job> = (0..n_ch).map(Job::Stable).collect();
    for (f, spec) in ds.factors.iter().enumerate() {
        for (v, val) in spec.values.iter().enumerate().skip(1) {
            if val.model == ChannelModelSource::Fit {
                jobs.extend(val.affected_channels.iter().map(|&channel| Job::Value(ModelKey { factor: f, value: v, channel })));
            }
        }
    }
    let fitted: Vec<Result<ChannelDynamicsBlock>> = jobs
        .par_iter()
        .map(|job| match job {
            Job::Stable(ch) => {
                let segs = stable_segments(*ch);
                if segs.is_empty() {
                    return Err(Error::invalid(format!("no stable data for channel {}", ds.channels[*ch].name)));
                }
                fit_channel_block(&segs, cfg)
            }
            Job::Value(key) => {
                let segs = value_segments(*key);
                if segs.is_empty() {
                    return Err(Error::invalid("no labelled data"));
                }
                fit_channel_block(&segs, cfg)
            }
        })
        .collect();

    let mut stable = Vec::with_capacity(n_ch);
    let mut fitted_values = Vec::new();
    for (job, res) in jobs.iter().zip(fitted) {
        match job {
            Job::Stable(_) => stable.push(res?),
            Job::Value(key) => fitted_values.push((*key, res)),
        }
    }

    let mut models = Vec::new();
    let mut fallbacks = Vec::new();
    for (key, res) in fitted_values {
        let block = match res {
            Ok(b) => b,
            Err(_) => {
                fallbacks.push(key);
                inflate_block(&stable[key.channel], cfg.fallback_xi)?
            }
        };
        models.push(KeyedBlock { key, block });
    }
    for (f, spec) in ds.factors.iter().enumerate() {
        for (v, val) in spec.values.iter().enumerate().skip(1) {
            if let ChannelModelSource::InflateStable { xi } = val.model {
                for &channel in &val.affected_channels {
                    let key = ModelKey { factor: f, value: v, channel };
                    models.push(KeyedBlock { key, block: inflate_block(&stable[channel], xi)? });
                }
            }
        }
    }
    models.sort_by_key(|m| m.key);

    let mut factors = ds.factors.clone();
    for (f, spec) in factors.iter_mut().enumerate() {
        let ps: Vec<&[usize]> = paths.iter().map(|p| p[f].as_slice()).collect();
        spec.transition = estimate_transition(&ps, spec.cardinality());
    }

    let mut means = Vec::with_capacity(n_ch);
    let mut vars = Vec::with_capacity(n_ch);
    for ch in 0..n_ch {
        let mut vals: Vec<f64> = Vec::new();
        for (pi, &p) in patients.iter().enumerate() {
            let s = &ds.patients[p].series[ch];
            vals.extend((0..s.len()).filter(|&t| stable_at(pi, ch, t) && s[t].is_finite()).map(|t| s[t]));
        }
        if vals.len() < 2 {
            vals = patients.iter().flat_map(|&p| ds.patients[p].series[ch].iter().copied()).filter(|v| v.is_finite()).collect();
        }
        if vals.len() < 2 {
            return Err(Error::invalid(format!("channel {} has no observed values", ds.channels[ch].name)));
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        means.push(m);
        vars.push(v.max(1e-12));
    }

    let layout = ChannelLayout { channels: ds.channel_names(), stable, models };
    Ok(Dynamics { factors, layout, init: InitStats { means, vars }, fallbacks })
}

/// Feature rows (every `stride`-th step) and per-factor value labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRows {
    pub rows: Vec<Vec<f64>>,
    /// `labels[factor][row]`.
    pub labels: Vec<Vec<usize>>,
}

impl TrainingRows {
    pub fn concat(parts: &[&TrainingRows]) -> Self {
        let n_f = parts.first().map_or(0, |p| p.labels.len());
        let mut out = TrainingRows { rows: Vec::new(), labels: vec![Vec::new(); n_f] };
        for p in parts {
            out.rows.extend(p.rows.iter().cloned());
            for (f, l) in p.labels.iter().enumerate() {
                out.labels[f].extend_from_slice(l);
            }
        }
        out
    }
}

pub fn patient_rows(ds: &AnnotatedDataset, patient: usize, spec: &WindowSpec, stride: usize) -> Result<TrainingRows> {
    let rec = &ds.patients[patient];
    let paths = rec.annotations.value_paths(&ds.factors, rec.len())?;
    let steps: Vec<usize> = (0..rec.len()).step_by(stride.max(1)).collect();
    let rows = feature_rows(&rec.series, spec, &steps);
    let labels = paths.iter().map(|p| steps.iter().map(|&t| p[t]).collect()).collect();
    Ok(TrainingRows { rows, labels })
}

/// One classifier per factor; forest seeds are offset per factor.
pub fn fit_classifiers(data: &TrainingRows, factors: &[FactorSpec], params: &ForestParams) -> Result<Vec<FactorClassifier>> {
    factors
        .iter()
        .enumerate()
        .map(|(f, spec)| {
            let p = ForestParams { seed: params.seed.wrapping_add(1_000_003 * f as u64), ..*params };
            FactorClassifier::fit(&data.rows, &data.labels[f], spec.cardinality(), &p).map_err(|e| {
                Error::invalid(format!("classifier for factor {}: {e}", spec.name))
            })
        })
        .collect()
}

/// Full training on `patients` (all patients when empty).
pub fn train_bundle(ds: &AnnotatedDataset, patients: &[usize], cfg: &TrainConfig) -> Result<ModelBundle> {
    train_bundle_with_fallbacks(ds, patients, cfg).map(|(b, _)| b)
}

/// As [`train_bundle`], also returning the keys whose dynamics fell back.
pub fn train_bundle_with_fallbacks(
    ds: &AnnotatedDataset,
    patients: &[usize],
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<ModelKey>)> {
    ds.validate()?;
    let all: Vec<usize> = (0..ds.patients.len()).collect();
    let patients = if patients.is_empty() { all.as_slice() } else { patients };
    let spec = cfg.window()?;
    let dynamics = fit_dynamics(ds, patients, cfg)?;
    let parts = patients
        .iter()
        .map(|&p| patient_rows(ds, p, &spec, cfg.feature_stride))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainingRows::concat(&parts.iter().collect::<Vec<_>>());
    let classifiers = fit_classifiers(&data, &dynamics.factors, &cfg.forest)?;
    let fallbacks = dynamics.fallbacks;
    let bundle = ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        channels: ds.channel_names(),
        factors: dynamics.factors,
        layout: dynamics.layout,
        window: spec,
        forest_params: cfg.forest,
        classifiers,
        alpha: cfg.alpha,
        init: dynamics.init,
    };
    bundle.validate()?;
    Ok((bundle, fallbacks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_from_counts() {
        let p: Vec<usize> = vec![0, 0, 0, 1, 1, 0];
        let t = estimate_transition(&[&p], 2);
        assert!((t[0][1] - 2.0 / 5.0).abs() < 1e-12);
        assert!((t[1][0] - 2.0 / 4.0).abs() < 1e-12);
        let never = estimate_transition(&[&[0usize, 0][..]], 3);
        assert_eq!(never[2], default_transition(3, DEFAULT_SELF_TRANSITION)[2]);
    }

    #[test]
    fn segments_respect_minimum_and_cap() {
        let s: Vec<f64> = (0..100).map(|v| v as f64).collect();
        let segs = runs_where(&s, 10, |t| !(40..45).contains(&t));
        assert_eq!(segs.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![40, 55]);
        let capped = cap_segments(segs, 50);
        assert_eq!(capped.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![40, 10]);
    }
}
