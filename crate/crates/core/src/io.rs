//! Dataset directories and model bundles.
//!
//! A dataset directory holds `manifest.toml` plus, per patient,
//! `<id>.vitals.csv` (`timestamp,<chan1>,…`; empty cell = missing),
//! `<id>.annotations.csv` (`factor,value,start,end`, end exclusive, in
//! steps) and optionally `<id>.latent.csv` (same layout as the vitals).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Annotation, AnnotationTrack};
use crate::features::{feature_count, WindowSpec};
use crate::forest::{FactorClassifier, ForestParams};
use crate::inference::InitStats;
use crate::switch::{ChannelLayout, FactorSpec, ObservationConvention, RegimeSet};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub timestamps: Vec<f64>,
    /// Channel-major: `series[channel][t]`, `NaN` = missing.
    pub series: Vec<Vec<f64>>,
    pub annotations: AnnotationTrack,
    /// Ground-truth physiological level per channel (simulated data only).
    pub latent: Option<Vec<Vec<f64>>>,
}

impl PatientRecord {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDataset {
    pub channels: Vec<ChannelInfo>,
    pub factors: Vec<FactorSpec>,
    pub sample_rate_hz: f64,
    pub patients: Vec<PatientRecord>,
}

impl AnnotatedDataset {
    pub fn channel_names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.patients.iter().map(|p| p.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n_ch = self.channels.len();
        if n_ch == 0 {
            return Err(Error::invalid("dataset has no channels"));
        }
        for f in &self.factors {
            f.validate(n_ch)?;
        }
        for p in &self.patients {
            let t = p.len();
            if p.series.len() != n_ch || p.series.iter().any(|s| s.len() != t) {
                return Err(Error::dim(format!("patient {}: series do not match the channel list", p.id)));
            }
            if p.timestamps.windows(2).any(|w| !(w[1] > w[0])) || p.timestamps.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("patient {}: timestamps not strictly increasing", p.id)));
            }
            if let Some(lat) = &p.latent {
                if lat.len() != n_ch || lat.iter().any(|s| s.len() != t) {
                    return Err(Error::dim(format!("patient {}: latent series length mismatch", p.id)));
                }
            }
            p.annotations.validate(t, &self.factors)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    sample_rate_hz: f64,
    patients: Vec<String>,
    #[serde(default)]
    latent: bool,
    channels: Vec<ChannelInfo>,
    #[serde(default)]
    factors: Vec<FactorSpec>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fmt_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn series_csv(channels: &[String], timestamps: &[f64], series: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["timestamp".to_string()];
    header.extend(channels.iter().cloned());
    let err = |e: csv::Error| Error::invalid(format!("writing CSV: {e}"));
    w.write_record(&header).map_err(err)?;
    for (t, ts) in timestamps.iter().enumerate() {
        let mut row = vec![ts.to_string()];
        row.extend(series.iter().map(|s| fmt_cell(s[t])));
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("writing CSV: {e}")))
}

fn annotations_csv(track: &AnnotationTrack) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("writing CSV: {e}"));
    w.write_record(["factor", "value", "start", "end"]).map_err(err)?;
    for a in &track.intervals {
        w.write_record([a.factor.clone(), a.value.clone(), a.start.to_string(), a.end.to_string()]).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::invalid(format!("writing CSV: {e}")))
}

pub fn vitals_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.vitals.csv"))
}

pub fn annotations_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.annotations.csv"))
}

pub fn latent_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.latent.csv"))
}

/// Writes the dataset directory (created if absent).
pub fn save_dataset(ds: &AnnotatedDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let has_latent = !ds.patients.is_empty() && ds.patients.iter().all(|p| p.latent.is_some());
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        sample_rate_hz: ds.sample_rate_hz,
        patients: ds.patient_ids(),
        latent: has_latent,
        channels: ds.channels.clone(),
        factors: ds.factors.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest: {e}")))?;
    write_file(&dir.join("manifest.toml"), text.as_bytes())?;
    let names = ds.channel_names();
    for p in &ds.patients {
        write_file(&vitals_path(dir, &p.id), &series_csv(&names, &p.timestamps, &p.series)?)?;
        write_file(&annotations_path(dir, &p.id), &annotations_csv(&p.annotations)?)?;
        if has_latent {
            let lat = p.latent.as_ref().expect("checked");
            write_file(&latent_path(dir, &p.id), &series_csv(&names, &p.timestamps, lat)?)?;
        }
    }
    Ok(())
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, msg: msg.into() }
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads a `timestamp,<channels…>` file; the header must list `channels`.
pub fn read_series_csv(path: &Path, channels: &[String]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    let expected: Vec<&str> = std::iter::once("timestamp").chain(channels.iter().map(String::as_str)).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(parse_err(path, 1, format!("header must be `{}`", expected.join(","))));
    }
    let mut ts = Vec::new();
    let mut series = vec![Vec::new(); channels.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        if rec.len() != expected.len() {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", expected.len(), rec.len())));
        }
        let t: f64 = rec[0].trim().parse().map_err(|_| parse_err(path, line, format!("bad timestamp `{}`", &rec[0])))?;
        if !t.is_finite() {
            return Err(parse_err(path, line, "non-finite timestamp"));
        }
        if ts.last().is_some_and(|&prev| t <= prev) {
            return Err(parse_err(path, line, "timestamps must be strictly increasing"));
        }
        ts.push(t);
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                let v: f64 = cell.parse().map_err(|_| parse_err(path, line, format!("bad value `{cell}`")))?;
                if !v.is_finite() {
                    return Err(parse_err(path, line, format!("non-finite value `{cell}`")));
                }
                v
            };
            series[c].push(v);
        }
    }
    Ok((ts, series))
}

pub fn read_annotations_csv(path: &Path) -> Result<AnnotationTrack> {
    let text = read_file(path)?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["factor", "value", "start", "end"] {
        return Err(parse_err(path, 1, "header must be `factor,value,start,end`"));
    }
    let mut intervals = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != 4 {
            return Err(parse_err(path, line, "expected 4 fields"));
        }
        let num = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| parse_err(path, line, format!("bad step index `{s}`")))
        };
        let (start, end) = (num(&rec[2])?, num(&rec[3])?);
        if start >= end {
            return Err(parse_err(path, line, "interval end must exceed start"));
        }
        intervals.push(Annotation { factor: rec[0].to_string(), value: rec[1].to_string(), start, end });
    }
    Ok(AnnotationTrack::new(intervals))
}

pub fn load_dataset(dir: &Path) -> Result<AnnotatedDataset> {
    let mpath = dir.join("manifest.toml");
    let text = read_file(&mpath)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1) as u64);
        parse_err(&mpath, line, e.message().to_string())
    })?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: DATASET_FORMAT_VERSION });
    }
    let names: Vec<String> = manifest.channels.iter().map(|c| c.name.clone()).collect();
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for id in &manifest.patients {
        let (timestamps, series) = read_series_csv(&vitals_path(dir, id), &names)?;
        let mut annotations = read_annotations_csv(&annotations_path(dir, id))?;
        annotations.sample_rate_hz = manifest.sample_rate_hz;
        annotations.validate(timestamps.len(), &manifest.factors).map_err(|e| {
            parse_err(&annotations_path(dir, id), 0, e.to_string())
        })?;
        let latent = if manifest.latent {
            let lp = latent_path(dir, id);
            let (lt, lat) = read_series_csv(&lp, &names)?;
            if lt != timestamps {
                return Err(parse_err(&lp, 0, "latent timestamps differ from the vitals"));
            }
            Some(lat)
        } else {
            None
        };
        patients.push(PatientRecord { id: id.clone(), timestamps, series, annotations, latent });
    }
    let ds = AnnotatedDataset {
        channels: manifest.channels,
        factors: manifest.factors,
        sample_rate_hz: manifest.sample_rate_hz,
        patients,
    };
    ds.validate()?;
    Ok(ds)
}

/// Everything needed to run both filters on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub channels: Vec<String>,
    pub factors: Vec<FactorSpec>,
    pub layout: ChannelLayout,
    pub window: WindowSpec,
    pub forest_params: ForestParams,
    /// One classifier per factor, in factor order.
    pub classifiers: Vec<FactorClassifier>,
    pub alpha: f64,
    pub init: InitStats,
}

impl ModelBundle {
    pub fn regimes(&self, convention: ObservationConvention) -> Result<RegimeSet> {
        RegimeSet::build(&self.factors, &self.layout, convention)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: BUNDLE_FORMAT_VERSION });
        }
        let n_ch = self.channels.len();
        if self.layout.channels != self.channels {
            return Err(Error::Corrupted("layout channels differ from bundle channels".into()));
        }
        if self.classifiers.len() != self.factors.len() {
            return Err(Error::Corrupted("one classifier per factor required".into()));
        }
        self.window.validate().map_err(|e| Error::Corrupted(e.to_string()))?;
        let n_feat = feature_count(&self.window, n_ch);
        for (c, f) in self.classifiers.iter().zip(&self.factors) {
            if c.cardinality != f.cardinality() {
                return Err(Error::Corrupted(format!("classifier for {} has the wrong cardinality", f.name)));
            }
            c.validate()?;
            if c.forests.iter().any(|forest| forest.n_features != n_feat) {
                return Err(Error::Corrupted(format!("classifier for {} expects a different feature count", f.name)));
            }
        }
        if self.init.means.len() != n_ch || self.init.vars.len() != n_ch {
            return Err(Error::Corrupted("initialization statistics do not match the channels".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Corrupted("non-finite α".into()));
        }
        for conv in [ObservationConvention::Discriminative, ObservationConvention::Generative] {
            self.regimes(conv).map_err(|e| Error::Corrupted(e.to_string()))?;
        }
        Ok(())
    }

    /// Errors unless `channels` equals the bundle's channel list.
    pub fn check_channels(&self, channels: &[String]) -> Result<()> {
        if channels != self.channels.as_slice() {
            return Err(Error::SchemaMismatch(format!(
                "bundle expects channels [{}], data has [{}]",
                self.channels.join(", "),
                channels.join(", ")
            )));
        }
        Ok(())
    }
}

pub fn bundle_to_string(bundle: &ModelBundle) -> Result<String> {
    serde_json::to_string_pretty(bundle).map_err(|e| Error::invalid(format!("serializing bundle: {e}")))
}

pub fn bundle_from_str(text: &str) -> Result<ModelBundle> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Corrupted(format!("line {}: {e}", e.line())))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Corrupted("missing format_version".into()))?;
    if found != BUNDLE_FORMAT_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: BUNDLE_FORMAT_VERSION });
    }
    // Re-parse from text: going through `Value` would lose float round-tripping guarantees.
    let bundle: ModelBundle = serde_json::from_str(text).map_err(|e| Error::Corrupted(e.to_string()))?;
    bundle.validate()?;
    Ok(bundle)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_file(path, bundle_to_string(bundle)?.as_bytes())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    bundle_from_str(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::switch::FactorValue;

    fn tiny() -> AnnotatedDataset {
        let mut bs = FactorValue::baseline("on");
        bs.is_artifact = true;
        bs.affected_channels = vec![1];
        AnnotatedDataset {
            channels: vec![
                ChannelInfo { name: "HR".into(), unit: "bpm".into() },
                ChannelInfo { name: "BP".into(), unit: "mmHg".into() },
            ],
            factors: vec![FactorSpec::new("bs", vec![FactorValue::baseline("off"), bs])],
            sample_rate_hz: 1.0,
            patients: vec![PatientRecord {
                id: "p0".into(),
                timestamps: vec![0.0, 1.0, 2.0, 3.5],
                series: vec![vec![1.0, f64::NAN, 0.1 + 0.2, -4e-300], vec![5.0, 6.0, 7.0, 8.0]],
                annotations: AnnotationTrack::new(vec![Annotation {
                    factor: "bs".into(),
                    value: "on".into(),
                    start: 1,
                    end: 3,
                }]),
                latent: None,
            }],
        }
    }

    fn same(a: &AnnotatedDataset, b: &AnnotatedDataset) -> bool {
        let bits = |d: &AnnotatedDataset| -> Vec<u64> {
            d.patients.iter().flat_map(|p| p.series.iter().flatten().map(|v| v.to_bits())).collect()
        };
        bits(a) == bits(b) && a.channels == b.channels && a.factors == b.factors
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(same(&ds, &back));
        assert!(back.patients[0].series[0][1].is_nan());
        assert_eq!(back.patients[0].annotations, ds.patients[0].annotations);
    }

    #[test]
    fn rejects_out_of_range_annotation() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::write(annotations_path(dir.path(), "p0"), "factor,value,start,end\nbs,on,2,9\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        fs::write(vitals_path(dir.path(), "p0"), "timestamp,HR,BP\n0,1,2\n1,x,3\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(vitals_path(dir.path(), "p0"), "timestamp,HR,BP\n0,1,2\n0,2,3\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 3, .. })));
    }
}
