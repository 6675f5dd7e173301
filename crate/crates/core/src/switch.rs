//! Factored switch space and per-regime parameter composition.
//!
//! The switch is the cross product of `M` discrete factors. Configurations
//! are numbered in mixed radix with the first factor most significant.
//!
//! Latent layout: every channel owns one *physiology block* holding the
//! channel's companion-form state. Physiological factor values replace the
//! dynamics of the blocks they claim. Artifact factor values never touch the
//! physiology block; they sever the observation (discriminative convention)
//! or, under the generative convention, redirect the channel's observation to
//! a dedicated *artifact block*. While its factor value is inactive an
//! artifact block shadows the physiology block exactly, so an artifact starts
//! from the current physiological state.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arima::ArimaOrder;
use crate::error::{Error, Result};
use crate::gaussian::RegimeParams;
use crate::linalg;

pub const DEFAULT_CONFIG_LIMIT: usize = 4096;
pub const DEFAULT_SELF_TRANSITION: f64 = 0.999;

/// How the learned dynamics of a factor value are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelModelSource {
    /// Fit ARIMA models on the labelled segments.
    #[default]
    Fit,
    /// Stable dynamics with system noise scaled by `xi`.
    InflateStable { xi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorValue {
    pub label: String,
    #[serde(default)]
    pub is_artifact: bool,
    /// Channel indices whose dynamics or observation this value affects.
    #[serde(default)]
    pub affected_channels: Vec<usize>,
    /// Candidate ARIMA orders; empty means "suggest from ACF/PACF".
    #[serde(default)]
    pub order_hints: Vec<ArimaOrder>,
    #[serde(default)]
    pub model: ChannelModelSource,
}

impl FactorValue {
    pub fn baseline(label: &str) -> Self {
        Self {
            label: label.to_string(),
            is_artifact: false,
            affected_channels: Vec::new(),
            order_hints: Vec::new(),
            model: ChannelModelSource::Fit,
        }
    }
}

/// One discrete cause. Value 0 is the baseline ("off") value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    /// Row-stochastic `L × L` matrix, `transition[from][to]`.
    pub transition: Vec<Vec<f64>>,
    pub values: Vec<FactorValue>,
    /// Lower wins when several active values claim the same channel.
    #[serde(default)]
    pub priority: u32,
}

impl FactorSpec {
    /// A factor with the default sticky transition matrix.
    pub fn new(name: &str, values: Vec<FactorValue>) -> Self {
        let l = values.len();
        Self {
            name: name.to_string(),
            transition: default_transition(l, DEFAULT_SELF_TRANSITION),
            values,
            priority: 0,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self, n_channels: usize) -> Result<()> {
        let l = self.cardinality();
        if l < 2 {
            return Err(Error::invalid(format!("factor {} needs at least two values", self.name)));
        }
        if self.transition.len() != l || self.transition.iter().any(|r| r.len() != l) {
            return Err(Error::dim(format!(
                "factor {}: transition must be {l}x{l}",
                self.name
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid(format!(
                    "factor {}: transition row {i} has a negative or non-finite entry",
                    self.name
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "factor {}: transition row {i} sums to {s}",
                    self.name
                )));
            }
        }
        for v in &self.values {
            if let Some(&c) = v.affected_channels.iter().find(|&&c| c >= n_channels) {
                return Err(Error::invalid(format!(
                    "factor {} value {}: channel {c} out of range ({n_channels} channels)",
                    self.name, v.label
                )));
            }
            if let ChannelModelSource::InflateStable { xi } = v.model {
                if !(xi > 1.0) {
                    return Err(Error::invalid(format!(
                        "factor {} value {}: inflation factor must exceed 1",
                        self.name, v.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stationary distribution of this factor's chain.
    pub fn stationary(&self) -> Vec<f64> {
        let l = self.cardinality();
        // Solve πᵀ(T − I) = 0 with Σπ = 1 by replacing one equation.
        let mut m = DMatrix::<f64>::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                m[(j, i)] = self.transition[i][j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        for j in 0..l {
            m[(l - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(l);
        rhs[l - 1] = 1.0;
        match m.lu().solve(&rhs) {
            Some(pi) if pi.iter().all(|p| p.is_finite() && *p >= -1e-12) => {
                let s: f64 = pi.iter().map(|p| p.max(0.0)).sum();
                pi.iter().map(|p| p.max(0.0) / s).collect()
            }
            // reducible chains: fall back to uniform
            _ => vec![1.0 / l as f64; l],
        }
    }
}

/// Sticky transition matrix: `stay` on the diagonal, the rest spread evenly.
pub fn default_transition(l: usize, stay: f64) -> Vec<Vec<f64>> {
    (0..l)
        .map(|i| {
            (0..l)
                .map(|j| if i == j { stay } else { (1.0 - stay) / (l - 1) as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwitchConfig {
    pub values: Vec<usize>,
    pub linear_index: usize,
}

fn radices(factors: &[FactorSpec]) -> Vec<usize> {
    factors.iter().map(FactorSpec::cardinality).collect()
}

/// Mixed-radix index of a value tuple (first factor most significant).
pub fn config_index(values: &[usize], radix: &[usize]) -> usize {
    values.iter().zip(radix).fold(0, |acc, (&v, &l)| acc * l + v)
}

pub fn config_values(mut index: usize, radix: &[usize]) -> Vec<usize> {
    let mut out = vec![0; radix.len()];
    for (slot, &l) in out.iter_mut().zip(radix).rev() {
        *slot = index % l;
        index /= l;
    }
    out
}

/// All `K = Π L⁽ᵐ⁾` configurations in mixed-radix order.
pub fn enumerate_configs(factors: &[FactorSpec]) -> Result<Vec<SwitchConfig>> {
    enumerate_configs_with_limit(factors, DEFAULT_CONFIG_LIMIT)
}

pub fn enumerate_configs_with_limit(
    factors: &[FactorSpec],
    limit: usize,
) -> Result<Vec<SwitchConfig>> {
    let radix = radices(factors);
    let k = radix.iter().fold(1u128, |acc, &l| acc.saturating_mul(l as u128));
    if k > limit as u128 {
        return Err(Error::TooManyConfigs { configs: k, limit });
    }
    Ok((0..k as usize)
        .map(|i| SwitchConfig { values: config_values(i, &radix), linear_index: i })
        .collect())
}

/// `p(s_t | s_{t−1}) = Π_m p(f_t^m | f_{t−1}^m)`.
pub fn factored_transition(prev: &SwitchConfig, next: &SwitchConfig, factors: &[FactorSpec]) -> f64 {
    factors
        .iter()
        .enumerate()
        .map(|(m, f)| f.transition[prev.values[m]][next.values[m]])
        .product()
}

/// Dense `K × K` factored transition matrix.
pub fn transition_matrix(configs: &[SwitchConfig], factors: &[FactorSpec]) -> DMatrix<f64> {
    let k = configs.len();
    DMatrix::from_fn(k, k, |i, j| factored_transition(&configs[i], &configs[j], factors))
}

/// Product of per-factor stationary distributions, indexed by configuration.
pub fn stationary_joint(configs: &[SwitchConfig], factors: &[FactorSpec]) -> Vec<f64> {
    let per: Vec<Vec<f64>> = factors.iter().map(FactorSpec::stationary).collect();
    configs
        .iter()
        .map(|c| c.values.iter().enumerate().map(|(m, &v)| per[m][v]).product())
        .collect()
}

/// State-space form of one channel's dynamics.
///
/// The state is `[x_t, …, x_{t−n_pos+1}, ε_t, …, ε_{t−n_ma+1}]`: lagged
/// levels followed by the innovations needed for MA terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDynamicsBlock {
    #[serde(with = "linalg::row_major")]
    pub transition: DMatrix<f64>,
    #[serde(with = "linalg::row_major")]
    pub noise: DMatrix<f64>,
    pub obs_noise: f64,
    #[serde(with = "linalg::vector")]
    pub selector: DVector<f64>,
    pub order: ArimaOrder,
    pub n_pos: usize,
    pub n_ma: usize,
}

impl ChannelDynamicsBlock {
    pub fn dim(&self) -> usize {
        self.n_pos + self.n_ma
    }

    /// Embeds the block into a larger layout with `n_pos` lag slots and
    /// `n_ma` innovation slots. New lag slots shift the oldest lag, new
    /// innovation slots shift the oldest innovation (or stay at zero when
    /// the block has none).
    pub fn pad_to(&self, n_pos: usize, n_ma: usize) -> Result<Self> {
        if n_pos < self.n_pos || n_ma < self.n_ma {
            return Err(Error::dim(format!(
                "cannot shrink block ({}, {}) to ({n_pos}, {n_ma})",
                self.n_pos, self.n_ma
            )));
        }
        if n_pos == self.n_pos && n_ma == self.n_ma {
            return Ok(self.clone());
        }
        let old_map = |i: usize| if i < self.n_pos { i } else { n_pos + (i - self.n_pos) };
        let n = n_pos + n_ma;
        let mut a = DMatrix::zeros(n, n);
        let mut q = DMatrix::zeros(n, n);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                a[(old_map(i), old_map(j))] = self.transition[(i, j)];
                q[(old_map(i), old_map(j))] = self.noise[(i, j)];
            }
        }
        for i in self.n_pos.max(1)..n_pos {
            a[(i, i - 1)] = 1.0;
        }
        if self.n_ma > 0 {
            for j in self.n_ma..n_ma {
                a[(n_pos + j, n_pos + j - 1)] = 1.0;
            }
        }
        let mut selector = DVector::zeros(n);
        for i in 0..self.dim() {
            selector[old_map(i)] = self.selector[i];
        }
        Ok(Self {
            transition: a,
            noise: q,
            obs_noise: self.obs_noise,
            selector,
            order: self.order,
            n_pos,
            n_ma,
        })
    }

    /// The block as a single-channel regime (selector as `C`).
    pub fn as_regime(&self, regime_id: usize) -> RegimeParams {
        RegimeParams {
            a: self.transition.clone(),
            q: self.noise.clone(),
            c: DMatrix::from_row_slice(1, self.dim(), self.selector.as_slice()),
            r: DMatrix::from_element(1, 1, self.obs_noise),
            regime_id,
        }
    }

    /// Replaces dynamics and noise from a single-channel regime of the same
    /// dimension.
    pub fn with_regime(&self, params: &RegimeParams) -> Result<Self> {
        if params.state_dim() != self.dim() || params.obs_dim() != 1 {
            return Err(Error::dim("regime does not match block layout"));
        }
        Ok(Self {
            transition: params.a.clone(),
            noise: params.q.clone(),
            obs_noise: params.r[(0, 0)],
            ..self.clone()
        })
    }
}

/// Which observation model the composed regimes encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationConvention {
    /// Binary `C`; artifact channels are disconnected from the latent state.
    Discriminative,
    /// Artifact channels are explained by dedicated artifact blocks.
    Generative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelKey {
    pub factor: usize,
    pub value: usize,
    pub channel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyedBlock {
    pub key: ModelKey,
    pub block: ChannelDynamicsBlock,
}

/// Channel names plus the learned per-channel dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub channels: Vec<String>,
    pub stable: Vec<ChannelDynamicsBlock>,
    pub models: Vec<KeyedBlock>,
}

impl ChannelLayout {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn model(&self, key: ModelKey) -> Option<&ChannelDynamicsBlock> {
        self.models.iter().find(|m| m.key == key).map(|m| &m.block)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}

/// Offsets of every block inside the composed state vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    pub convention: ObservationConvention,
    /// Per channel `(n_pos, n_ma)` after padding.
    pub block_shape: Vec<(usize, usize)>,
    pub physiology_offset: Vec<usize>,
    pub artifact_offset: Vec<(ModelKey, usize)>,
    pub state_dim: usize,
}

impl StateLayout {
    pub fn build(
        layout: &ChannelLayout,
        factors: &[FactorSpec],
        convention: ObservationConvention,
    ) -> Result<Self> {
        let n_ch = layout.n_channels();
        if layout.stable.len() != n_ch {
            return Err(Error::dim("one stable block per channel required"));
        }
        let mut shape: Vec<(usize, usize)> =
            layout.stable.iter().map(|b| (b.n_pos, b.n_ma)).collect();
        for m in &layout.models {
            if m.key.channel >= n_ch {
                return Err(Error::invalid(format!("model for unknown channel {}", m.key.channel)));
            }
            let s = &mut shape[m.key.channel];
            s.0 = s.0.max(m.block.n_pos);
            s.1 = s.1.max(m.block.n_ma);
        }
        let mut off = 0;
        let mut physiology_offset = Vec::with_capacity(n_ch);
        for &(p, q) in &shape {
            physiology_offset.push(off);
            off += p + q;
        }
        let mut artifact_offset = Vec::new();
        if convention == ObservationConvention::Generative {
            for (f, spec) in factors.iter().enumerate() {
                for (v, val) in spec.values.iter().enumerate() {
                    if !val.is_artifact {
                        continue;
                    }
                    for &c in &val.affected_channels {
                        let key = ModelKey { factor: f, value: v, channel: c };
                        artifact_offset.push((key, off));
                        off += shape[c].0 + shape[c].1;
                    }
                }
            }
        }
        Ok(Self {
            convention,
            block_shape: shape,
            physiology_offset,
            artifact_offset,
            state_dim: off,
        })
    }

    pub fn block_dim(&self, channel: usize) -> usize {
        let (p, q) = self.block_shape[channel];
        p + q
    }

    /// Row of the stable observation matrix for `channel`.
    pub fn stable_selector(&self, channel: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.state_dim);
        v[self.physiology_offset[channel]] = 1.0;
        v
    }

    fn artifact_block_offset(&self, key: ModelKey) -> Option<usize> {
        self.artifact_offset.iter().find(|(k, _)| *k == key).map(|(_, o)| *o)
    }
}

/// Active claims of one configuration on one channel.
fn claims(
    config: &SwitchConfig,
    factors: &[FactorSpec],
    channel: usize,
    artifact: bool,
) -> Vec<(u32, ModelKey)> {
    let mut out: Vec<(u32, ModelKey)> = factors
        .iter()
        .enumerate()
        .filter_map(|(f, spec)| {
            let v = config.values[f];
            let val = &spec.values[v];
            (val.is_artifact == artifact && val.affected_channels.contains(&channel))
                .then_some((spec.priority, ModelKey { factor: f, value: v, channel }))
        })
        .collect();
    out.sort();
    out
}

fn place(m: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    m.view_mut((row, col), block.shape()).copy_from(block);
}

/// Per-regime `(A, Q, C, R)` for one configuration.
pub fn compose_regime(
    config: &SwitchConfig,
    factors: &[FactorSpec],
    layout: &ChannelLayout,
    state: &StateLayout,
) -> Result<RegimeParams> {
    let n = state.state_dim;
    let d_y = layout.n_channels();
    let mut a = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    let mut c = DMatrix::zeros(d_y, n);
    let mut r = DMatrix::zeros(d_y, d_y);

    let mut physiology: Vec<ChannelDynamicsBlock> = Vec::with_capacity(d_y);
    for ch in 0..d_y {
        let (n_pos, n_ma) = state.block_shape[ch];
        let phys = claims(config, factors, ch, false);
        if phys.len() > 1 && phys[0].0 == phys[1].0 {
            let names: Vec<String> = phys
                .iter()
                .map(|(_, k)| {
                    format!("{}={}", factors[k.factor].name, factors[k.factor].values[k.value].label)
                })
                .collect();
            return Err(Error::Conflict(format!(
                "channel {} claimed by {} with equal priority",
                layout.channels[ch],
                names.join(", ")
            )));
        }
        let block = match phys.first() {
            Some((_, key)) => layout.model(*key).ok_or_else(|| {
                Error::invalid(format!(
                    "no dynamics learned for {}={} on channel {}",
                    factors[key.factor].name,
                    factors[key.factor].values[key.value].label,
                    layout.channels[ch]
                ))
            })?,
            None => &layout.stable[ch],
        }
        .pad_to(n_pos, n_ma)?;
        let off = state.physiology_offset[ch];
        place(&mut a, off, off, &block.transition);
        place(&mut q, off, off, &block.noise);

        let art = claims(config, factors, ch, true);
        match (art.first(), state.convention) {
            (None, _) => {
                c[(ch, off)] = 1.0;
                r[(ch, ch)] = block.obs_noise;
            }
            (Some(_), ObservationConvention::Discriminative) => {
                r[(ch, ch)] = block.obs_noise;
            }
            (Some((_, key)), ObservationConvention::Generative) => {
                let art_off = state
                    .artifact_block_offset(*key)
                    .ok_or_else(|| Error::invalid("artifact block missing from layout"))?;
                let art_block = layout.model(*key).ok_or_else(|| {
                    Error::invalid(format!(
                        "no artifact dynamics learned for {} on channel {}",
                        factors[key.factor].name, layout.channels[ch]
                    ))
                })?;
                c[(ch, art_off)] = 1.0;
                r[(ch, ch)] = art_block.obs_noise;
            }
        }
        physiology.push(block);
    }

    for &(key, off) in &state.artifact_offset {
        let ch = key.channel;
        let (n_pos, n_ma) = state.block_shape[ch];
        if config.values[key.factor] == key.value {
            let block = layout
                .model(key)
                .ok_or_else(|| Error::invalid("artifact dynamics missing"))?
                .pad_to(n_pos, n_ma)?;
            place(&mut a, off, off, &block.transition);
            place(&mut q, off, off, &block.noise);
        } else {
            // shadow the physiology block
            let phys_off = state.physiology_offset[ch];
            let block = &physiology[ch];
            place(&mut a, off, phys_off, &block.transition);
            place(&mut q, off, off, &block.noise);
            place(&mut q, off, phys_off, &block.noise);
            place(&mut q, phys_off, off, &block.noise);
        }
    }

    RegimeParams::new(a, q, c, r, config.linear_index)
}

/// All configurations together with their composed regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSet {
    pub factors: Vec<FactorSpec>,
    pub configs: Vec<SwitchConfig>,
    pub regimes: Vec<RegimeParams>,
    pub state: StateLayout,
}

impl RegimeSet {
    pub fn build(
        factors: &[FactorSpec],
        layout: &ChannelLayout,
        convention: ObservationConvention,
    ) -> Result<Self> {
        for f in factors {
            f.validate(layout.n_channels())?;
        }
        let configs = enumerate_configs(factors)?;
        let state = StateLayout::build(layout, factors, convention)?;
        let regimes = configs
            .iter()
            .map(|cfg| compose_regime(cfg, factors, layout, &state))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { factors: factors.to_vec(), configs, regimes, state })
    }

    /// A one-regime set (no factors), mostly for plain Kalman filtering.
    pub fn single(params: RegimeParams) -> Self {
        let n = params.state_dim();
        let d_y = params.obs_dim();
        let physiology_offset = (0..d_y)
            .map(|i| (0..n).find(|&j| params.c[(i, j)] != 0.0).unwrap_or(0))
            .collect();
        Self {
            factors: Vec::new(),
            configs: vec![SwitchConfig { values: Vec::new(), linear_index: 0 }],
            regimes: vec![RegimeParams { regime_id: 0, ..params }],
            state: StateLayout {
                convention: ObservationConvention::Discriminative,
                block_shape: vec![(1, 0); d_y],
                physiology_offset,
                artifact_offset: Vec::new(),
                state_dim: n,
            },
        }
    }

    pub fn n_configs(&self) -> usize {
        self.configs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state.state_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.regimes.first().map(|r| r.obs_dim()).unwrap_or(0)
    }

    pub fn transition_matrix(&self) -> DMatrix<f64> {
        transition_matrix(&self.configs, &self.factors)
    }

    /// Whether `channel` is claimed by an active artifact value in `config`.
    pub fn is_artifact_channel(&self, config: usize, channel: usize) -> bool {
        let cfg = &self.configs[config];
        self.factors.iter().enumerate().any(|(f, spec)| {
            let val = &spec.values[cfg.values[f]];
            val.is_artifact && val.affected_channels.contains(&channel)
        })
    }

    pub fn stable_config(&self) -> usize {
        0
    }
}

/// Resolves a map of names to channel indices.
pub fn channel_indices(names: &[String], channels: &[String]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> =
        channels.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    names
        .iter()
        .map(|n| {
            index
                .get(n.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown channel {n}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(name: &str, artifact: bool, channels: Vec<usize>) -> FactorSpec {
        let mut on = FactorValue::baseline("on");
        on.is_artifact = artifact;
        on.affected_channels = channels;
        FactorSpec::new(name, vec![FactorValue::baseline("off"), on])
    }

    /// AR(2) block with `[x_t, x_{t−1}, x_{t−2}]` and selector `[1, 0, 0]`.
    pub(crate) fn ar2_block(phi1: f64, phi2: f64, var: f64, obs: f64) -> ChannelDynamicsBlock {
        let mut q = DMatrix::zeros(3, 3);
        q[(0, 0)] = var;
        ChannelDynamicsBlock {
            transition: DMatrix::from_row_slice(3, 3, &[phi1, phi2, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            noise: q,
            obs_noise: obs,
            selector: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            order: ArimaOrder { p: 2, d: 0, q: 0 },
            n_pos: 3,
            n_ma: 0,
        }
    }

    #[test]
    fn enumerate_counts() {
        assert_eq!(enumerate_configs(&[binary("a", false, vec![])]).unwrap().len(), 2);
        let mut three = binary("b", false, vec![]);
        three.values.push(FactorValue::baseline("high"));
        three.transition = default_transition(3, 0.9);
        let cfgs = enumerate_configs(&[binary("a", false, vec![]), three]).unwrap();
        assert_eq!(cfgs.len(), 6);
        let five: Vec<_> = (0..5).map(|i| binary(&format!("f{i}"), false, vec![])).collect();
        assert_eq!(enumerate_configs(&five).unwrap().len(), 32);
    }

    #[test]
    fn enumerate_guards_blowup() {
        let many: Vec<_> = (0..13).map(|i| binary(&format!("f{i}"), false, vec![])).collect();
        assert!(matches!(enumerate_configs(&many), Err(Error::TooManyConfigs { .. })));
    }

    #[test]
    fn transition_examples() {
        let mut a = binary("a", false, vec![]);
        let mut b = binary("b", false, vec![]);
        a.transition = default_transition(2, 0.9);
        b.transition = default_transition(2, 0.9);
        let factors = vec![a, b];
        let cfgs = enumerate_configs(&factors).unwrap();
        assert!((factored_transition(&cfgs[1], &cfgs[1], &factors) - 0.81).abs() < 1e-15);

        let mut id = factors.clone();
        for f in &mut id {
            f.transition = default_transition(2, 1.0);
        }
        for p in &cfgs {
            for n in &cfgs {
                let t = factored_transition(p, n, &id);
                assert_eq!(t, if p == n { 1.0 } else { 0.0 });
            }
        }

        let mut uni = factors;
        for f in &mut uni {
            f.transition = default_transition(2, 0.5);
        }
        for n in &cfgs {
            assert!((factored_transition(&cfgs[0], n, &uni) - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn stationary_of_two_state_chain() {
        let mut f = binary("a", false, vec![]);
        f.transition = vec![vec![0.99, 0.01], vec![0.1, 0.9]];
        let pi = f.stationary();
        assert!((pi[0] - 10.0 / 11.0).abs() < 1e-12);
    }

    fn four_channel_layout() -> (ChannelLayout, Vec<FactorSpec>) {
        let channels: Vec<String> =
            ["HR", "BPsys", "BPdia", "ICPsys"].iter().map(|s| s.to_string()).collect();
        let stable = (0..4).map(|_| ar2_block(0.5, -0.3, 1.0, 0.5)).collect();
        let factors = vec![binary("blood_sample", true, vec![1, 2])];
        let models = [1, 2]
            .iter()
            .map(|&c| KeyedBlock {
                key: ModelKey { factor: 0, value: 1, channel: c },
                block: ar2_block(0.9, 0.0, 25.0, 4.0),
            })
            .collect();
        (ChannelLayout { channels, stable, models }, factors)
    }

    #[test]
    fn stable_regime_selects_lag_zero() {
        let (layout, factors) = four_channel_layout();
        let set = RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap();
        let stable = &set.regimes[0];
        stable.validate(true).unwrap();
        assert_eq!(stable.c.iter().filter(|&&v| v == 1.0).count(), 4);
        for ch in 0..4 {
            assert_eq!(stable.c[(ch, 3 * ch)], 1.0);
        }
    }

    #[test]
    fn blood_sample_zeroes_bp_rows_only() {
        let (layout, factors) = four_channel_layout();
        let set = RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap();
        let bs = &set.regimes[1];
        bs.validate(true).unwrap();
        for ch in [1, 2] {
            assert!(bs.c.row(ch).iter().all(|&v| v == 0.0));
        }
        for ch in [0, 3] {
            assert_eq!(bs.c.row(ch), set.regimes[0].c.row(ch));
        }
        // physiology keeps its dynamics under an artifact
        assert_eq!(bs.a, set.regimes[0].a);
    }

    #[test]
    fn generative_blood_sample_redirects_to_artifact_block() {
        let (layout, factors) = four_channel_layout();
        let set = RegimeSet::build(&factors, &layout, ObservationConvention::Generative).unwrap();
        assert_eq!(set.state_dim(), 4 * 3 + 2 * 3);
        let stable = &set.regimes[0];
        let bs = &set.regimes[1];
        stable.validate(true).unwrap();
        bs.validate(true).unwrap();
        assert_eq!(bs.c[(1, 12)], 1.0);
        assert_eq!(bs.c[(2, 15)], 1.0);
        assert_eq!(bs.r[(1, 1)], 4.0);
        // while inactive the artifact block copies the physiology block
        assert_eq!(stable.a[(12, 3)], 0.5);
        assert_eq!(stable.q[(12, 3)], 1.0);
        assert_eq!(bs.a[(12, 12)], 0.9);
        assert_eq!(bs.q[(12, 3)], 0.0);
    }

    #[test]
    fn single_channel_artifact_regimes_differ_in_c_row() {
        let layout = ChannelLayout {
            channels: vec!["x".into()],
            stable: vec![ar2_block(0.5, 0.0, 1.0, 1.0)],
            models: vec![KeyedBlock {
                key: ModelKey { factor: 0, value: 1, channel: 0 },
                block: ar2_block(0.2, 0.0, 9.0, 1.0),
            }],
        };
        let factors = vec![binary("art", true, vec![0])];
        let set = RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap();
        assert_eq!(set.n_configs(), 2);
        assert_eq!(set.regimes[0].a, set.regimes[1].a);
        assert_ne!(set.regimes[0].c, set.regimes[1].c);
    }

    #[test]
    fn physiological_value_replaces_block_dynamics() {
        let layout = ChannelLayout {
            channels: vec!["x".into()],
            stable: vec![ar2_block(0.5, 0.0, 1.0, 1.0)],
            models: vec![KeyedBlock {
                key: ModelKey { factor: 0, value: 1, channel: 0 },
                block: ar2_block(0.2, 0.0, 9.0, 2.0),
            }],
        };
        let factors = vec![binary("phys", false, vec![0])];
        let set = RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap();
        assert_eq!(set.regimes[1].a[(0, 0)], 0.2);
        assert_eq!(set.regimes[1].q[(0, 0)], 9.0);
        assert_eq!(set.regimes[1].r[(0, 0)], 2.0);
        assert_eq!(set.regimes[1].c[(0, 0)], 1.0);
    }

    #[test]
    fn equal_priority_physiological_claims_conflict() {
        let layout = ChannelLayout {
            channels: vec!["x".into()],
            stable: vec![ar2_block(0.5, 0.0, 1.0, 1.0)],
            models: (0..2)
                .map(|f| KeyedBlock {
                    key: ModelKey { factor: f, value: 1, channel: 0 },
                    block: ar2_block(0.2, 0.0, 9.0, 2.0),
                })
                .collect(),
        };
        let mut factors = vec![binary("a", false, vec![0]), binary("b", false, vec![0])];
        let err = RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap_err();
        assert!(matches!(err, Error::Conflict(ref m) if m.contains("a=on") && m.contains("b=on")));
        factors[1].priority = 1;
        RegimeSet::build(&factors, &layout, ObservationConvention::Discriminative).unwrap();
    }

    #[test]
    fn padding_keeps_shift_structure() {
        let b = ar2_block(0.5, -0.3, 1.0, 0.5);
        let p = b.pad_to(5, 1).unwrap();
        assert_eq!(p.dim(), 6);
        assert_eq!(p.transition[(0, 1)], -0.3);
        assert_eq!(p.transition[(3, 2)], 1.0);
        assert_eq!(p.transition[(4, 3)], 1.0);
        assert!(p.transition.row(5).iter().all(|&v| v == 0.0));
        assert_eq!(p.selector[0], 1.0);
    }

    proptest! {
        #[test]
        fn index_round_trip(radix in proptest::collection::vec(2usize..5, 1..5)) {
            let k: usize = radix.iter().product();
            for i in 0..k {
                let v = config_values(i, &radix);
                prop_assert_eq!(config_index(&v, &radix), i);
            }
        }

        #[test]
        fn transition_rows_sum_to_one(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 3 * 2),
        ) {
            let mut factors = Vec::new();
            for (m, chunk) in raw.chunks(3).enumerate().take(2) {
                let mut f = binary(&format!("f{m}"), false, vec![]);
                f.values.push(FactorValue::baseline("x"));
                f.transition = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, _)| {
                        let row: Vec<f64> = (0..3).map(|j| raw[(m * 3 + i + j) % raw.len()][j]).collect();
                        let s: f64 = row.iter().sum();
                        row.iter().map(|v| v / s).collect()
                    })
                    .collect();
                factors.push(f);
            }
            let cfgs = enumerate_configs(&factors).unwrap();
            for p in &cfgs {
                let s: f64 = cfgs.iter().map(|n| factored_transition(p, n, &factors)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}
