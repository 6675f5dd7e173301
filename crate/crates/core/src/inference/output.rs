use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SwitchPosterior;
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::switch::RegimeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Dslds,
    Fslds,
    AlphaMixture,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Dslds => "dslds",
            Provenance::Fslds => "fslds",
            Provenance::AlphaMixture => "alpha",
        }
    }
}

/// Filtered estimate of one channel's physiological level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputedValue {
    pub mean: f64,
    pub sigma: f64,
    /// The channel is artifactual under the MAP configuration.
    pub artifact: bool,
}

/// Per-step results of one inference run.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub provenance: Provenance,
    pub timestamps: Vec<f64>,
    pub channels: Vec<String>,
    pub factor_names: Vec<String>,
    pub posteriors: Vec<SwitchPosterior>,
    /// Collapsed state moments.
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub map_config: Vec<usize>,
    /// `imputed[t][channel]`.
    pub imputed: Vec<Vec<ImputedValue>>,
}

impl InferenceOutput {
    pub fn assemble(
        provenance: Provenance,
        timestamps: Vec<f64>,
        channels: Vec<String>,
        posteriors: Vec<SwitchPosterior>,
        beliefs: Vec<GaussianBelief>,
        regimes: &RegimeSet,
    ) -> Result<Self> {
        let n = beliefs.len();
        if posteriors.len() != n || timestamps.len() != n {
            return Err(Error::dim("inference output pieces differ in length"));
        }
        if channels.len() != regimes.obs_dim() {
            return Err(Error::dim("channel names do not match the model"));
        }
        let map_config: Vec<usize> = posteriors.iter().map(SwitchPosterior::map_config).collect();
        let imputed = beliefs
            .iter()
            .zip(&map_config)
            .map(|(b, &k)| {
                (0..channels.len())
                    .map(|ch| {
                        let i = regimes.state.physiology_offset[ch];
                        ImputedValue {
                            mean: b.mean[i],
                            sigma: b.cov[(i, i)].max(0.0).sqrt(),
                            artifact: regimes.is_artifact_channel(k, ch),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            provenance,
            timestamps,
            channels,
            factor_names: regimes.factors.iter().map(|f| f.name.clone()).collect(),
            posteriors,
            means: beliefs.iter().map(|b| b.mean.clone()).collect(),
            covs: beliefs.into_iter().map(|b| b.cov).collect(),
            map_config,
            imputed,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// `P(factor m away from baseline)` per step.
    pub fn factor_scores(&self, m: usize) -> Vec<f64> {
        self.posteriors.iter().map(|p| p.factor_score(m)).collect()
    }
}

/// Imputed physiology series for one channel.
pub fn impute_physiology(output: &InferenceOutput, channel: &str) -> Result<Vec<ImputedValue>> {
    let ch = output
        .channels
        .iter()
        .position(|c| c == channel)
        .ok_or_else(|| Error::invalid(format!("unknown channel `{channel}`")))?;
    Ok(output.imputed.iter().map(|row| row[ch]).collect())
}

/// Columns: `timestamp`, `<provenance>.<factor>` (probability away from
/// baseline), `map_config`, then `<channel>.mean`, `.sigma`, `.artifact`.
pub fn write_inference_csv<W: Write>(out: W, output: &InferenceOutput) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let prov = output.provenance.label();
    let mut header = vec!["timestamp".to_string()];
    header.extend(output.factor_names.iter().map(|f| format!("{prov}.{f}")));
    header.push("map_config".into());
    for c in &output.channels {
        header.extend([format!("{c}.mean"), format!("{c}.sigma"), format!("{c}.artifact")]);
    }
    let csv_err = |e: csv::Error| Error::invalid(format!("writing inference CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..output.len() {
        let mut row = vec![output.timestamps[t].to_string()];
        row.extend((0..output.factor_names.len()).map(|m| output.posteriors[t].factor_score(m).to_string()));
        row.push(output.map_config[t].to_string());
        for v in &output.imputed[t] {
            row.extend([v.mean.to_string(), v.sigma.to_string(), u8::from(v.artifact).to_string()]);
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing inference CSV: {e}")))?;
    Ok(())
}
