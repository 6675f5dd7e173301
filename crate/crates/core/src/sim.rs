//! Synthetic annotated vital-sign data.
//!
//! Each event becomes one binary factor whose chain uses
//! `[[1 − rate, rate], [1/duration, 1 − 1/duration]]`, so durations are
//! geometric with the given mean. Physiology follows the channel ARIMA
//! models in level space (inflated system noise while an X-factor is on);
//! artifact channels are overwritten by the event template.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arima::{cast_to_state_space, inflate_block, ArimaFit, ArimaOrder};
use crate::error::{Error, Result};
use crate::eval::AnnotationTrack;
use crate::io::{AnnotatedDataset, ChannelInfo, PatientRecord};
use crate::linalg::solve_discrete_lyapunov;
use crate::switch::{
    ChannelDynamicsBlock, ChannelLayout, ChannelModelSource, FactorSpec, FactorValue, KeyedBlock, ModelKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    #[serde(default)]
    pub unit: String,
    pub baseline: f64,
    #[serde(default)]
    pub ar: Vec<f64>,
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default)]
    pub ma: Vec<f64>,
    pub system_var: f64,
    pub obs_var: f64,
}

fn one() -> usize {
    1
}

impl ChannelSpec {
    pub fn fit(&self) -> ArimaFit {
        ArimaFit {
            order: ArimaOrder::new(self.ar.len(), self.d, self.ma.len()),
            ar_coeffs: self.ar.clone(),
            ma_coeffs: self.ma.clone(),
            system_var: self.system_var,
            obs_var: self.obs_var,
            mean: self.baseline,
            log_likelihood: 0.0,
            n_params: self.ar.len() + self.ma.len() + 2,
        }
    }

    pub fn block(&self) -> ChannelDynamicsBlock {
        cast_to_state_space(&self.fit())
    }

    /// Constant added to the level-space state: the baseline for `d = 0`
    /// (zero-mean deviations), zero otherwise (levels start at the baseline).
    pub fn offset(&self) -> f64 {
        if self.d == 0 {
            self.baseline
        } else {
            0.0
        }
    }
}

/// Event shapes. Numeric defaults are scenario choices, not clinical values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Template {
    /// Ramp, zero dropout, stable, then an AR(3) flush spike.
    BloodSample {
        #[serde(default = "d_ramp_rate")]
        ramp_rate: f64,
        #[serde(default)]
        zero_level: f64,
        #[serde(default = "d_flush_height")]
        flush_height: f64,
        #[serde(default = "d_flush_ar")]
        flush_ar: [f64; 3],
        #[serde(default = "d_noise")]
        noise_sd: f64,
        #[serde(default = "d_stages")]
        stage_fractions: [f64; 4],
    },
    /// Additive rise on every affected channel.
    Suction {
        #[serde(default = "d_suction_amp")]
        amplitude: f64,
        #[serde(default = "d_suction_sd")]
        noise_sd: f64,
    },
    /// Affected channels collapse to their common mean with high variance.
    DampedTrace {
        #[serde(default = "d_damped_sd")]
        noise_sd: f64,
        #[serde(default = "d_damped_keep")]
        keep: f64,
    },
    /// Stable dynamics with system noise scaled by `xi` (physiological).
    XFactor {
        #[serde(default = "d_xi")]
        xi: f64,
    },
}

fn d_ramp_rate() -> f64 {
    0.8
}
fn d_flush_height() -> f64 {
    40.0
}
fn d_flush_ar() -> [f64; 3] {
    [0.7, 0.15, 0.05]
}
fn d_noise() -> f64 {
    1.0
}
fn d_stages() -> [f64; 4] {
    [0.35, 0.2, 0.15, 0.3]
}
fn d_suction_amp() -> f64 {
    15.0
}
fn d_suction_sd() -> f64 {
    3.0
}
fn d_damped_sd() -> f64 {
    6.0
}
fn d_damped_keep() -> f64 {
    0.2
}
fn d_xi() -> f64 {
    100.0
}

impl Template {
    pub fn blood_sample() -> Self {
        Template::BloodSample {
            ramp_rate: d_ramp_rate(),
            zero_level: 0.0,
            flush_height: d_flush_height(),
            flush_ar: d_flush_ar(),
            noise_sd: d_noise(),
            stage_fractions: d_stages(),
        }
    }

    pub fn suction() -> Self {
        Template::Suction { amplitude: d_suction_amp(), noise_sd: d_suction_sd() }
    }

    pub fn damped_trace() -> Self {
        Template::DampedTrace { noise_sd: d_damped_sd(), keep: d_damped_keep() }
    }

    pub fn x_factor(xi: f64) -> Self {
        Template::XFactor { xi }
    }

    pub fn is_artifact(&self) -> bool {
        !matches!(self, Template::XFactor { .. })
    }

    fn validate(&self) -> Result<()> {
        match self {
            Template::BloodSample { stage_fractions, noise_sd, flush_ar, .. } => {
                let s: f64 = stage_fractions.iter().sum();
                if stage_fractions.iter().any(|f| *f < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("blood-sample stage fractions must be non-negative and sum to 1"));
                }
                if !(*noise_sd >= 0.0) || flush_ar.iter().map(|a| a.abs()).sum::<f64>() >= 1.0 {
                    return Err(Error::invalid("blood-sample flush AR(3) must be stable"));
                }
            }
            Template::Suction { noise_sd, .. } | Template::DampedTrace { noise_sd, .. } => {
                if !(*noise_sd >= 0.0) {
                    return Err(Error::invalid("template noise must be non-negative"));
                }
            }
            Template::XFactor { xi } => {
                if !(*xi > 1.0 && xi.is_finite()) {
                    return Err(Error::invalid("X-factor inflation must exceed 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Factor name; the "on" value is labelled with the same name.
    pub factor: String,
    pub template: Template,
    /// Channel names the event affects.
    pub channels: Vec<String>,
    /// Mean duration in steps.
    pub mean_duration: f64,
    /// Per-step onset probability while off.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub length: usize,
    pub patients: usize,
    pub seed: u64,
    #[serde(default = "one_hz")]
    pub sample_rate_hz: f64,
    /// Probability that any single cell is missing.
    #[serde(default)]
    pub missing_rate: f64,
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

fn one_hz() -> f64 {
    1.0
}

/// Default mean durations in seconds: blood sample 1.6 min, suction
/// 4.3 min, damped trace 14 min, X-factor 7.5 min.
pub const BLOOD_SAMPLE_SECONDS: f64 = 96.0;
pub const SUCTION_SECONDS: f64 = 258.0;
pub const DAMPED_TRACE_SECONDS: f64 = 840.0;
pub const X_FACTOR_SECONDS: f64 = 450.0;

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |sp| text[..sp.start].lines().count().max(1) as u64);
            Error::Parse { path: "<scenario>".into(), line, msg: e.message().to_string() }
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("scenario: {e}")))
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.patients == 0 || self.channels.is_empty() {
            return Err(Error::invalid("scenario needs T ≥ 1, at least one patient and one channel"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) || !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("missing rate must lie in [0, 1) and the sample rate be positive"));
        }
        for c in &self.channels {
            if !(c.system_var > 0.0 && c.obs_var > 0.0 && c.baseline.is_finite()) || c.d > 2 {
                return Err(Error::invalid(format!("channel {}: bad parameters", c.name)));
            }
        }
        for e in &self.events {
            e.template.validate()?;
            if !(e.rate >= 0.0 && e.rate < 1.0) || !(e.mean_duration >= 1.0) {
                return Err(Error::invalid(format!("event {}: rate must be in [0, 1) and duration ≥ 1", e.factor)));
            }
            if e.channels.is_empty() {
                return Err(Error::invalid(format!("event {} affects no channel", e.factor)));
            }
            for c in &e.channels {
                if self.channel_index(c).is_none() {
                    return Err(Error::invalid(format!("event {} references unknown channel `{c}`", e.factor)));
                }
            }
        }
        Ok(())
    }

    /// One binary factor per event, with the generating transition matrix.
    pub fn factors(&self) -> Vec<FactorSpec> {
        self.events
            .iter()
            .map(|e| {
                let on = FactorValue {
                    label: e.factor.clone(),
                    is_artifact: e.template.is_artifact(),
                    affected_channels: e.channels.iter().filter_map(|c| self.channel_index(c)).collect(),
                    order_hints: Vec::new(),
                    model: ChannelModelSource::Fit,
                };
                let mut f = FactorSpec::new(&e.factor, vec![FactorValue::baseline("normal"), on]);
                let exit = 1.0 / e.mean_duration;
                f.transition = vec![vec![1.0 - e.rate, e.rate], vec![exit, 1.0 - exit]];
                f
            })
            .collect()
    }

    /// Generating dynamics as a layout. X-factor blocks are exact; artifact
    /// blocks are random-walk stand-ins with the template's spread, since
    /// the templates themselves are not linear-Gaussian.
    pub fn true_layout(&self) -> Result<ChannelLayout> {
        let stable: Vec<ChannelDynamicsBlock> = self.channels.iter().map(ChannelSpec::block).collect();
        let mut models = Vec::new();
        for (f, e) in self.events.iter().enumerate() {
            for name in &e.channels {
                let ch = self.channel_index(name).expect("validated");
                let key = ModelKey { factor: f, value: 1, channel: ch };
                let block = match &e.template {
                    Template::XFactor { xi } => inflate_block(&stable[ch], *xi)?,
                    t => artifact_stand_in(t, &self.channels[ch]),
                };
                models.push(KeyedBlock { key, block });
            }
        }
        Ok(ChannelLayout { channels: self.channels.iter().map(|c| c.name.clone()).collect(), stable, models })
    }

    pub fn simulate(&self) -> Result<AnnotatedDataset> {
        simulate(self)
    }
}

fn artifact_stand_in(t: &Template, ch: &ChannelSpec) -> ChannelDynamicsBlock {
    let spread = match t {
        Template::BloodSample { ramp_rate, noise_sd, flush_height, .. } => {
            ramp_rate.powi(2) + noise_sd.powi(2) + (0.1 * flush_height).powi(2)
        }
        Template::Suction { amplitude, noise_sd } => (0.1 * amplitude).powi(2) + noise_sd.powi(2),
        Template::DampedTrace { noise_sd, .. } => noise_sd.powi(2),
        Template::XFactor { .. } => ch.system_var,
    };
    let fit = ArimaFit {
        order: ArimaOrder::new(0, 1, 0),
        ar_coeffs: Vec::new(),
        ma_coeffs: Vec::new(),
        system_var: spread.max(ch.system_var),
        obs_var: ch.obs_var,
        mean: ch.baseline,
        log_likelihood: 0.0,
        n_params: 2,
    };
    cast_to_state_space(&fit)
}

fn psd_sqrt(q: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(q.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Binary chain starting off.
fn sample_path(rng: &mut ChaCha8Rng, t_len: usize, rate: f64, mean_duration: f64) -> Vec<usize> {
    let exit = 1.0 / mean_duration;
    let mut s = 0;
    (0..t_len)
        .map(|t| {
            if t > 0 {
                let u: f64 = rng.random();
                s = match s {
                    0 if u < rate => 1,
                    1 if u < exit => 0,
                    other => other,
                };
            }
            s
        })
        .collect()
}

/// `(start, end)` of every run of 1s.
fn runs(path: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < path.len() {
        if path[t] == 1 {
            let s = t;
            while t < path.len() && path[t] == 1 {
                t += 1;
            }
            out.push((s, t));
        } else {
            t += 1;
        }
    }
    out
}

struct ChannelSim {
    a: DMatrix<f64>,
    sqrt_q: DMatrix<f64>,
    h: usize,
    offset: f64,
    obs_sd: f64,
}

fn simulate_patient(spec: &ScenarioSpec, index: usize) -> Result<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let t_len = spec.length;
    let n_ch = spec.channels.len();
    let factors = spec.factors();

    let paths: Vec<Vec<usize>> =
        spec.events.iter().map(|e| sample_path(&mut rng, t_len, e.rate, e.mean_duration)).collect();

    // Per channel: product of active X-factor inflations at each step.
    let mut inflation = vec![vec![1.0; t_len]; n_ch];
    for (e, path) in spec.events.iter().zip(&paths) {
        if let Template::XFactor { xi } = e.template {
            for name in &e.channels {
                let ch = spec.channel_index(name).expect("validated");
                for t in 0..t_len {
                    if path[t] == 1 {
                        inflation[ch][t] *= xi;
                    }
                }
            }
        }
    }

    let sims: Vec<ChannelSim> = spec
        .channels
        .iter()
        .map(|c| {
            let b = c.block();
            ChannelSim {
                sqrt_q: psd_sqrt(&b.noise),
                a: b.transition,
                h: 0,
                offset: c.offset(),
                obs_sd: c.obs_var.sqrt(),
            }
        })
        .collect();

    let mut latent = vec![vec![0.0; t_len]; n_ch];
    let mut clean = vec![vec![0.0; t_len]; n_ch];
    for (ch, (c, sim)) in spec.channels.iter().zip(&sims).enumerate() {
        let n = sim.a.nrows();
        let mut x = if c.d == 0 {
            let p0 = solve_discrete_lyapunov(&sim.a, &c.block().noise)?;
            let z = DVector::from_fn(n, |_, _| normal(&mut rng));
            psd_sqrt(&p0) * z
        } else {
            let b = c.block();
            DVector::from_fn(n, |i, _| if i < b.n_pos { c.baseline } else { 0.0 })
        };
        for t in 0..t_len {
            if t > 0 {
                let z = DVector::from_fn(n, |_, _| normal(&mut rng));
                x = &sim.a * &x + &sim.sqrt_q * z * inflation[ch][t].sqrt();
            }
            latent[ch][t] = sim.offset + x[sim.h];
            clean[ch][t] = latent[ch][t] + sim.obs_sd * normal(&mut rng);
        }
    }

    let mut series = clean.clone();
    for (e, path) in spec.events.iter().zip(&paths) {
        let chans: Vec<usize> = e.channels.iter().map(|n| spec.channel_index(n).expect("validated")).collect();
        for (start, end) in runs(path) {
            apply_template(&e.template, &chans, start, end, &latent, &clean, &mut series, &mut rng);
        }
    }

    if spec.missing_rate > 0.0 {
        for s in series.iter_mut() {
            for v in s.iter_mut() {
                if rng.random::<f64>() < spec.missing_rate {
                    *v = f64::NAN;
                }
            }
        }
    }

    let timestamps = (0..t_len).map(|t| t as f64 / spec.sample_rate_hz).collect();
    let mut annotations = AnnotationTrack::from_value_paths(&factors, &paths);
    annotations.sample_rate_hz = spec.sample_rate_hz;
    Ok(PatientRecord { id: format!("p{index:02}"), timestamps, series, annotations, latent: Some(latent) })
}

#[allow(clippy::too_many_arguments)]
fn apply_template(
    template: &Template,
    chans: &[usize],
    start: usize,
    end: usize,
    latent: &[Vec<f64>],
    clean: &[Vec<f64>],
    series: &mut [Vec<f64>],
    rng: &mut ChaCha8Rng,
) {
    let len = end - start;
    match template {
        Template::BloodSample { ramp_rate, zero_level, flush_height, flush_ar, noise_sd, stage_fractions } => {
            let mut bounds = [0usize; 4];
            let mut acc = 0.0;
            for (i, f) in stage_fractions.iter().enumerate() {
                acc += f;
                bounds[i] = ((acc * len as f64).round() as usize).min(len);
            }
            for &ch in chans {
                let mut spike = [*flush_height, 0.0, 0.0];
                for k in 0..len {
                    let t = start + k;
                    let level = latent[ch][t];
                    let e = noise_sd * normal(rng);
                    series[ch][t] = if k < bounds[0] {
                        level + ramp_rate * k as f64 + e
                    } else if k < bounds[1] {
                        zero_level + 0.1 * e
                    } else if k < bounds[2] {
                        level + e
                    } else {
                        let s = spike[0];
                        let next = flush_ar[0] * spike[0] + flush_ar[1] * spike[1] + flush_ar[2] * spike[2] + e;
                        spike = [next, spike[0], spike[1]];
                        level + s
                    };
                }
            }
        }
        Template::Suction { amplitude, noise_sd } => {
            for &ch in chans {
                for t in start..end {
                    series[ch][t] = clean[ch][t] + amplitude + noise_sd * normal(rng);
                }
            }
        }
        Template::DampedTrace { noise_sd, keep } => {
            for t in start..end {
                let target = chans.iter().map(|&c| latent[c][t]).sum::<f64>() / chans.len() as f64;
                for &ch in chans {
                    series[ch][t] = target + keep * (latent[ch][t] - target) + noise_sd * normal(rng);
                }
            }
        }
        Template::XFactor { .. } => {}
    }
}

/// Simulates every patient (in parallel; each has its own RNG stream).
pub fn simulate(spec: &ScenarioSpec) -> Result<AnnotatedDataset> {
    spec.validate()?;
    let patients = (0..spec.patients)
        .into_par_iter()
        .map(|i| simulate_patient(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let ds = AnnotatedDataset {
        channels: spec.channels.iter().map(|c| ChannelInfo { name: c.name.clone(), unit: c.unit.clone() }).collect(),
        factors: spec.factors(),
        sample_rate_hz: spec.sample_rate_hz,
        patients,
    };
    ds.validate()?;
    Ok(ds)
}

/// Neonatal-style benchmark: HR, BPsys, BPdia and a blood-sample artifact
/// on the two BP channels plus an X-factor on every channel.
pub fn benchmark_scenario(length: usize, patients: usize, seed: u64) -> ScenarioSpec {
    let ch = |name: &str, unit: &str, baseline: f64, ar: f64| ChannelSpec {
        name: name.into(),
        unit: unit.into(),
        baseline,
        ar: vec![ar],
        d: 1,
        ma: Vec::new(),
        system_var: 0.02,
        obs_var: 1.0,
    };
    let all: Vec<String> = ["HR", "BPsys", "BPdia"].iter().map(|s| s.to_string()).collect();
    ScenarioSpec {
        name: "benchmark".into(),
        length,
        patients,
        seed,
        sample_rate_hz: 1.0,
        missing_rate: 0.0,
        channels: vec![ch("HR", "bpm", 150.0, 0.3), ch("BPsys", "mmHg", 50.0, 0.2), ch("BPdia", "mmHg", 30.0, 0.2)],
        events: vec![
            EventSpec {
                factor: "blood_sample".into(),
                template: Template::blood_sample(),
                channels: vec!["BPsys".into(), "BPdia".into()],
                mean_duration: BLOOD_SAMPLE_SECONDS,
                rate: 0.0015,
            },
            EventSpec {
                factor: "x_factor".into(),
                template: Template::x_factor(d_xi()),
                channels: all,
                mean_duration: X_FACTOR_SECONDS,
                rate: 0.0005,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_toml_round_trip() {
        let s = benchmark_scenario(100, 2, 3);
        let text = s.to_toml().unwrap();
        assert_eq!(ScenarioSpec::from_toml(&text).unwrap(), s);
    }

    #[test]
    fn rejects_unknown_channel() {
        let mut s = benchmark_scenario(100, 1, 3);
        s.events[0].channels.push("ICP".into());
        assert!(s.simulate().is_err());
    }

    #[test]
    fn geometric_durations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let path = sample_path(&mut rng, 400_000, 0.01, 20.0);
        let r = runs(&path);
        let mean = r.iter().map(|(s, e)| (e - s) as f64).sum::<f64>() / r.len() as f64;
        assert!((mean - 20.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn deterministic() {
        let s = benchmark_scenario(300, 2, 11);
        assert_eq!(
            s.simulate().unwrap().patients[1].series[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.simulate().unwrap().patients[1].series[0].iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
