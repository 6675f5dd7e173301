//! Switch posteriors, the DSLDS and FSLDS filters, their α-mixture and
//! imputation of the latent physiology.

mod dslds;
mod fslds;
mod output;

pub use dslds::{
    dslds_filter, dslds_filter_with_posteriors, dslds_switch_posterior, dslds_switch_posteriors,
    dslds_x_step, StreamStep, StreamingDslds,
};
pub use fslds::{fslds_filter, fslds_gpb_step, fslds_initial_state};
pub use output::{
    impute_physiology, write_inference_csv, ImputedValue, InferenceOutput, Provenance,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::switch::{config_index, config_values, RegimeSet};

/// Per-factor marginals plus the joint over all configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchPosterior {
    pub marginals: Vec<Vec<f64>>,
    pub joint: Vec<f64>,
}

impl SwitchPosterior {
    /// Product-of-marginals joint.
    pub fn from_marginals(marginals: Vec<Vec<f64>>) -> Self {
        let radix: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let k: usize = radix.iter().product();
        let joint = (0..k)
            .map(|i| {
                config_values(i, &radix)
                    .iter()
                    .enumerate()
                    .map(|(m, &v)| marginals[m][v])
                    .product()
            })
            .collect();
        Self { marginals, joint }
    }

    /// Marginals by summing the joint; `radix` gives the factor cardinalities.
    pub fn from_joint(joint: Vec<f64>, radix: &[usize]) -> Self {
        let mut marginals: Vec<Vec<f64>> = radix.iter().map(|&l| vec![0.0; l]).collect();
        for (i, &p) in joint.iter().enumerate() {
            for (m, v) in config_values(i, radix).into_iter().enumerate() {
                marginals[m][v] += p;
            }
        }
        Self { marginals, joint }
    }

    /// Point mass on one configuration.
    pub fn degenerate(values: &[usize], radix: &[usize]) -> Self {
        let k: usize = radix.iter().product();
        let mut joint = vec![0.0; k];
        joint[config_index(values, radix)] = 1.0;
        Self::from_joint(joint, radix)
    }

    pub fn radix(&self) -> Vec<usize> {
        self.marginals.iter().map(Vec::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64]| {
            v.iter().all(|p| p.is_finite() && *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if !self.marginals.iter().all(|m| ok(m)) || !ok(&self.joint) {
            return Err(Error::invalid("switch posterior is not normalized"));
        }
        Ok(())
    }

    /// Most probable configuration (first on ties).
    pub fn map_config(&self) -> usize {
        self.joint
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    /// Probability that factor `m` is away from its baseline value.
    pub fn factor_score(&self, m: usize) -> f64 {
        1.0 - self.marginals[m][0]
    }
}

const ALPHA_FLOOR: f64 = 1e-6;
const ALPHA_LIMIT: f64 = 1e6;

fn floor_normalize(p: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|v| v.max(ALPHA_FLOOR)).collect();
    let s: f64 = f.iter().sum();
    f.iter().map(|v| v / s).collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `c (p_g^β + p_d^β)^{1/β}` with `β = (1 − α)/2`, elementwise, normalized.
pub fn alpha_combine(pg: &[f64], pd: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if pg.len() != pd.len() || pg.is_empty() {
        return Err(Error::dim("α-mixture needs distributions over the same values"));
    }
    if !alpha.is_finite() {
        return Err(Error::invalid("α must be finite"));
    }
    if pg == pd {
        return Ok(pg.to_vec());
    }
    let g = floor_normalize(pg);
    let d = floor_normalize(pd);
    let out: Vec<f64> = if alpha >= ALPHA_LIMIT {
        g.iter().zip(&d).map(|(a, b)| a.min(*b)).collect()
    } else if alpha <= -ALPHA_LIMIT {
        g.iter().zip(&d).map(|(a, b)| a.max(*b)).collect()
    } else if alpha == 1.0 {
        g.iter().zip(&d).map(|(a, b)| (a * b).sqrt()).collect()
    } else {
        let beta = (1.0 - alpha) / 2.0;
        let logs: Vec<f64> = g
            .iter()
            .zip(&d)
            .map(|(a, b)| {
                let (x, y) = (beta * a.ln(), beta * b.ln());
                let m = x.max(y);
                (m + ((x - m).exp() + (y - m).exp()).ln()) / beta
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|l| (l - top).exp()).collect()
    };
    Ok(normalize(out))
}

/// α-mixture of two switch posteriors, per factor marginal; the joint is
/// the product of the combined marginals.
pub fn alpha_mixture(pg: &SwitchPosterior, pd: &SwitchPosterior, alpha: f64) -> Result<SwitchPosterior> {
    if pg.radix() != pd.radix() {
        return Err(Error::dim("α-mixture of posteriors over different factor spaces"));
    }
    let marginals = pg
        .marginals
        .iter()
        .zip(&pd.marginals)
        .map(|(g, d)| alpha_combine(g, d, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(SwitchPosterior::from_marginals(marginals))
}

/// Joint-level variant: combine the joints, then marginalize.
pub fn alpha_mixture_joint(pg: &SwitchPosterior, pd: &SwitchPosterior, alpha: f64) -> Result<SwitchPosterior> {
    if pg.radix() != pd.radix() {
        return Err(Error::dim("α-mixture of posteriors over different factor spaces"));
    }
    let joint = alpha_combine(&pg.joint, &pd.joint, alpha)?;
    Ok(SwitchPosterior::from_joint(joint, &pg.radix()))
}

/// Per-configuration weights and beliefs (one Gaussian per configuration).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub weights: Vec<f64>,
    pub beliefs: Vec<GaussianBelief>,
    pub t: usize,
}

/// Channel statistics used to initialise the filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitStats {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

/// How `p(x_1 | s_1)` is formed before conditioning on `y_1`.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterInit {
    /// Lags at `y_1` (or the channel mean where `y_1` is missing or
    /// artifactual), diagonal covariance `10 · var`.
    Stats(InitStats),
    /// The same explicit prior for every configuration.
    Prior(GaussianBelief),
}

pub(crate) fn initial_prior(
    regimes: &RegimeSet,
    config: usize,
    y0: &DVector<f64>,
    init: &FilterInit,
) -> Result<GaussianBelief> {
    let stats = match init {
        FilterInit::Prior(b) => {
            if b.dim() != regimes.state_dim() {
                return Err(Error::dim("initial prior does not match the state dimension"));
            }
            return Ok(b.clone());
        }
        FilterInit::Stats(s) => s,
    };
    let n_ch = regimes.obs_dim();
    if stats.means.len() != n_ch || stats.vars.len() != n_ch || y0.len() != n_ch {
        return Err(Error::dim("initial statistics do not match the channel count"));
    }
    let n = regimes.state_dim();
    let mut mean = DVector::zeros(n);
    let mut diag = DVector::from_element(n, 1.0);
    let state = &regimes.state;
    let mut fill = |off: usize, ch: usize, level: f64| {
        let (n_pos, n_ma) = state.block_shape[ch];
        for i in 0..n_pos + n_ma {
            if i < n_pos {
                mean[off + i] = level;
            }
            diag[off + i] = 10.0 * stats.vars[ch].max(1e-12);
        }
    };
    for ch in 0..n_ch {
        let present = y0[ch].is_finite();
        let level = if present && !regimes.is_artifact_channel(config, ch) { y0[ch] } else { stats.means[ch] };
        fill(state.physiology_offset[ch], ch, level);
    }
    for (key, off) in &state.artifact_offset {
        let ch = key.channel;
        fill(*off, ch, if y0[ch].is_finite() { y0[ch] } else { stats.means[ch] });
    }
    Ok(GaussianBelief { mean, cov: DMatrix::from_diagonal(&diag) })
}

/// Observation vectors per step from channel-major series.
pub fn observations(series: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let t_len = series.first().map_or(0, Vec::len);
    (0..t_len).map(|t| DVector::from_iterator(series.len(), series.iter().map(|c| c[t]))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn joint_is_product_of_marginals() {
        let p = SwitchPosterior::from_marginals(vec![vec![0.9, 0.1], vec![0.5, 0.5]]);
        assert_eq!(p.joint, vec![0.45, 0.45, 0.05, 0.05]);
        let d = SwitchPosterior::from_marginals(vec![vec![1.0, 0.0], vec![0.3, 0.7]]);
        assert_eq!(d.joint[2], 0.0);
        assert_eq!(d.joint[3], 0.0);
        let one = SwitchPosterior::from_marginals(vec![vec![0.2, 0.8]]);
        assert_eq!(one.joint, vec![0.2, 0.8]);
        let none = SwitchPosterior::from_marginals(vec![]);
        assert_eq!(none.joint, vec![1.0]);
    }

    #[test]
    fn alpha_named_cases() {
        let g = [0.2, 0.8];
        let d = [0.6, 0.4];
        let arith = alpha_combine(&g, &d, -1.0).unwrap();
        assert!((arith[0] - 0.4).abs() < 1e-12 && (arith[1] - 0.6).abs() < 1e-12);
        let geo = alpha_combine(&g, &d, 1.0).unwrap();
        assert!((geo[0] - 0.3798).abs() < 5e-5 && (geo[1] - 0.6202).abs() < 5e-5);
        let near = alpha_combine(&g, &d, 1.0 + 1e-7).unwrap();
        assert!((near[0] - geo[0]).abs() < 1e-6);
        for a in [-3.0, 0.0, 0.5, 1.0, 6.0, 1e7] {
            assert_eq!(alpha_combine(&g, &g, a).unwrap(), g.to_vec());
        }
        assert!(alpha_combine(&g, &[1.0], 0.0).is_err());
    }

    #[test]
    fn alpha_extremes() {
        let g = [0.1, 0.9];
        let d = [0.7, 0.3];
        let min = alpha_combine(&g, &d, 1e6).unwrap();
        assert!((min[0] - 0.25).abs() < 1e-12);
        let max = alpha_combine(&g, &d, -1e6).unwrap();
        assert!((max[0] - 0.7 / 1.6).abs() < 1e-12);
        let a50 = alpha_combine(&g, &d, 50.0).unwrap();
        assert!((a50[0] - 0.25).abs() < 1e-3);
        let m50 = alpha_combine(&g, &d, -50.0).unwrap();
        assert!((m50[0] - 0.7 / 1.6).abs() < 1e-3);
    }

    #[test]
    fn mixture_checks_spaces() {
        let a = SwitchPosterior::from_marginals(vec![vec![0.5, 0.5]]);
        let b = SwitchPosterior::from_marginals(vec![vec![0.5, 0.5], vec![0.1, 0.9]]);
        assert!(alpha_mixture(&a, &b, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn mixture_outputs_are_normalized(
            a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, alpha in -10.0f64..10.0,
        ) {
            let g = SwitchPosterior::from_marginals(vec![vec![a, 1.0 - a], vec![c, 1.0 - c]]);
            let d = SwitchPosterior::from_marginals(vec![vec![b, 1.0 - b], vec![1.0 - c, c]]);
            alpha_mixture(&g, &d, alpha).unwrap().validate().unwrap();
            alpha_mixture_joint(&g, &d, alpha).unwrap().validate().unwrap();
        }
    }
}
