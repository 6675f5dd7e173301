//! Sliding-window feature vectors for the switch classifiers.
//!
//! Per channel, in order: raw window values, per-segment least-squares
//! slopes, final EWMA value, per-segment min/median/max (interleaved per
//! segment), first differences. Then, for every channel pair `i < j`, the
//! per-position differences `y_i − y_j`. `NaN` marks missing values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub l: usize,
    pub r: usize,
    pub seg_len: usize,
    pub ewma_width: f64,
}

impl WindowSpec {
    pub fn new(l: usize, r: usize) -> Result<Self> {
        let w = l + r + 1;
        if w < 2 {
            return Err(Error::invalid("window must span at least two steps"));
        }
        let fifth = w as f64 / 5.0;
        let seg_len = (fifth.round() as usize).max(5).min(w);
        Ok(Self { l, r, seg_len, ewma_width: fifth.max(5.0) })
    }

    pub fn width(&self) -> usize {
        self.l + self.r + 1
    }

    /// `(start, len)` of every sub-segment; the remainder joins the last.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        let n = (w / self.seg_len).max(1);
        (0..n)
            .map(|i| {
                let start = i * self.seg_len;
                let len = if i + 1 == n { w - start } else { self.seg_len };
                (start, len)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width() < 2 || self.seg_len == 0 || self.seg_len > self.width() {
            return Err(Error::invalid("inconsistent window specification"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWindow {
    pub values: Vec<f64>,
    /// Position was filled by edge replication.
    pub replicated: Vec<bool>,
}

/// Window `y[t−l ..= t+r]` per channel with edge replication.
pub fn extract_window(series: &[Vec<f64>], t: usize, spec: &WindowSpec) -> Vec<ChannelWindow> {
    series
        .iter()
        .map(|ch| {
            let last = ch.len() as isize - 1;
            let mut values = Vec::with_capacity(spec.width());
            let mut replicated = Vec::with_capacity(spec.width());
            for k in 0..spec.width() {
                let idx = t as isize - spec.l as isize + k as isize;
                let clamped = idx.clamp(0, last.max(0));
                values.push(ch.get(clamped as usize).copied().unwrap_or(f64::NAN));
                replicated.push(idx != clamped);
            }
            ChannelWindow { values, replicated }
        })
        .collect()
}

/// OLS slope against the position index, ignoring missing points.
pub fn least_squares_slope(segment: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = segment
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| (i as f64, *v))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Exponentially weighted average with the newest sample at age 0.
pub fn ewma(values: &[f64], width: f64) -> f64 {
    let lambda = 1.0 - 2.0 / (width + 1.0);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut weight = 1.0;
    for v in values.iter().rev() {
        if v.is_finite() {
            num += weight * v;
            den += weight;
        }
        weight *= lambda;
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

fn min_med_max(segment: &[f64]) -> [f64; 3] {
    let mut v: Vec<f64> = segment.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return [f64::NAN; 3];
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    [v[0], med, v[n - 1]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub id: String,
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

pub fn schema_id(spec: &WindowSpec, n_channels: usize) -> String {
    format!("win-l{}-r{}-s{}-c{}", spec.l, spec.r, spec.seg_len, n_channels)
}

/// Deterministic feature names for `(spec, channels)`.
pub fn feature_schema(spec: &WindowSpec, channels: &[String]) -> FeatureSchema {
    let w = spec.width();
    let pos = |k: usize| k as isize - spec.l as isize;
    let segs = spec.segments().len();
    let mut names = Vec::new();
    for c in channels {
        names.extend((0..w).map(|k| format!("{c}.raw[{}]", pos(k))));
        names.extend((0..segs).map(|s| format!("{c}.slope[{s}]")));
        names.push(format!("{c}.ewma"));
        for s in 0..segs {
            for stat in ["min", "med", "max"] {
                names.push(format!("{c}.{stat}[{s}]"));
            }
        }
        names.extend((1..w).map(|k| format!("{c}.diff[{}]", pos(k))));
    }
    for i in 0..channels.len() {
        for j in i + 1..channels.len() {
            names.extend((0..w).map(|k| format!("{}-{}[{}]", channels[i], channels[j], pos(k))));
        }
    }
    FeatureSchema { id: schema_id(spec, channels.len()), names }
}

pub fn feature_count(spec: &WindowSpec, n_channels: usize) -> usize {
    let w = spec.width();
    let segs = spec.segments().len();
    n_channels * (w + segs + 1 + 3 * segs + (w - 1)) + n_channels * n_channels.saturating_sub(1) / 2 * w
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema_id: String,
}

pub fn compute_features(windows: &[ChannelWindow], spec: &WindowSpec) -> FeatureVector {
    FeatureVector { values: feature_values(windows, spec), schema_id: schema_id(spec, windows.len()) }
}

fn feature_values(windows: &[ChannelWindow], spec: &WindowSpec) -> Vec<f64> {
    let vals: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
    feature_values_from(&vals, spec)
}

/// Features from raw per-channel window values (each of length `l + r + 1`).
pub fn feature_values_from<V: AsRef<[f64]>>(windows: &[V], spec: &WindowSpec) -> Vec<f64> {
    let segs = spec.segments();
    let mut out = Vec::with_capacity(feature_count(spec, windows.len()));
    for win in windows {
        let v = win.as_ref();
        out.extend_from_slice(v);
        out.extend(segs.iter().map(|&(s, n)| least_squares_slope(&v[s..s + n])));
        out.push(ewma(v, spec.ewma_width));
        for &(s, n) in &segs {
            out.extend(min_med_max(&v[s..s + n]));
        }
        out.extend(v.windows(2).map(|p| p[1] - p[0]));
    }
    for i in 0..windows.len() {
        for j in i + 1..windows.len() {
            out.extend(windows[i].as_ref().iter().zip(windows[j].as_ref()).map(|(a, b)| a - b));
        }
    }
    out
}

/// Feature rows for every step `t` in `steps` (parallel over steps).
pub fn feature_rows(series: &[Vec<f64>], spec: &WindowSpec, steps: &[usize]) -> Vec<Vec<f64>> {
    steps
        .par_iter()
        .map(|&t| feature_values(&extract_window(series, t, spec), spec))
        .collect()
}

/// Feature rows for all steps of a sequence.
pub fn feature_matrix(series: &[Vec<f64>], spec: &WindowSpec) -> Vec<Vec<f64>> {
    let t_len = series.first().map_or(0, Vec::len);
    let steps: Vec<usize> = (0..t_len).collect();
    feature_rows(series, spec, &steps)
}

/// CSV export with the schema names as header (missing = empty cell).
pub fn write_feature_csv<W: std::io::Write>(
    out: W,
    schema: &FeatureSchema,
    timestamps: &[f64],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(schema.names.iter().cloned());
    let csv_err = |e: csv::Error| Error::invalid(format!("feature csv: {e}"));
    wtr.write_record(&header).map_err(csv_err)?;
    for (t, row) in timestamps.iter().zip(rows) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| if v.is_finite() { v.to_string() } else { String::new() }));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("feature csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spec_derivation() {
        let s = WindowSpec::new(4, 0).unwrap();
        assert_eq!((s.seg_len, s.segments().len()), (5, 1));
        let s = WindowSpec::new(49, 10).unwrap();
        assert_eq!(s.seg_len, 12);
        assert_eq!(s.segments(), vec![(0, 12), (12, 12), (24, 12), (36, 12), (48, 12)]);
        let s = WindowSpec::new(14, 5).unwrap();
        assert_eq!(s.seg_len, 5);
        assert_eq!(s.segments().last(), Some(&(15, 5)));
        let s = WindowSpec::new(9, 3).unwrap();
        assert_eq!(s.segments(), vec![(0, 5), (5, 8)]);
        assert!(WindowSpec::new(0, 0).is_err());
    }

    #[test]
    fn windows_and_edges() {
        let series = vec![(0..20).map(|v| v as f64).collect::<Vec<_>>()];
        let spec = WindowSpec::new(4, 2).unwrap();
        let w = &extract_window(&series, 10, &spec)[0];
        assert_eq!(w.values, vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert!(w.replicated.iter().all(|f| !f));

        let w = &extract_window(&series, 0, &WindowSpec::new(4, 0).unwrap())[0];
        assert_eq!(w.values, vec![0.0; 5]);
        assert_eq!(w.replicated, vec![true, true, true, true, false]);

        let w = &extract_window(&series, 19, &spec)[0];
        assert_eq!(&w.values[4..], &[19.0, 19.0, 19.0]);
        assert_eq!(w.values.last(), Some(&19.0));
        let online = &extract_window(&series, 7, &WindowSpec::new(3, 0).unwrap())[0];
        assert_eq!(online.values.last(), Some(&7.0));
    }

    #[test]
    fn slopes() {
        assert_eq!(least_squares_slope(&[1.0, 2.0, 3.0, 4.0, 5.0]), 1.0);
        assert_eq!(least_squares_slope(&[3.0; 5]), 0.0);
        assert_eq!(least_squares_slope(&[0.0, 1.0, 0.0, 1.0, 0.0]), 0.0);
        assert!(least_squares_slope(&[f64::NAN, 1.0, f64::NAN]).is_nan());
        assert_eq!(least_squares_slope(&[1.0, f64::NAN, 3.0]), 1.0);
    }

    #[test]
    fn ewma_weights_newest() {
        assert_eq!(ewma(&[4.0; 6], 5.0), 4.0);
        // λ = 2/3 for width 5
        let v = ewma(&[0.0, 3.0], 5.0);
        assert!((v - 3.0 / (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!(ewma(&[f64::NAN; 3], 5.0).is_nan());
    }

    #[test]
    fn constant_series_features() {
        let series = vec![vec![2.0; 30], vec![2.0; 30]];
        let spec = WindowSpec::new(9, 0).unwrap();
        let fv = compute_features(&extract_window(&series, 15, &spec), &spec);
        let schema = feature_schema(&spec, &["a".into(), "b".into()]);
        assert_eq!(fv.values.len(), schema.len());
        for (name, v) in schema.names.iter().zip(&fv.values) {
            let expect = if name.contains("slope") || name.contains("diff") || name.starts_with("a-b") {
                0.0
            } else {
                2.0
            };
            assert_eq!(*v, expect, "{name}");
        }
    }

    #[test]
    fn cross_channel_offsets() {
        let series = vec![vec![7.0; 30], vec![2.0; 30]];
        let spec = WindowSpec::new(4, 2).unwrap();
        let fv = compute_features(&extract_window(&series, 12, &spec), &spec).values;
        let w = spec.width();
        assert!(fv[fv.len() - w..].iter().all(|&v| v == 5.0));
    }

    #[test]
    fn schema_arithmetic() {
        let spec = WindowSpec::new(4, 0).unwrap();
        assert_eq!(feature_count(&spec, 1), 14);
        assert_eq!(feature_schema(&spec, &["hr".into()]).len(), 14);
        let spec = WindowSpec::new(19, 10).unwrap();
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(feature_schema(&spec, &names).len(), feature_count(&spec, 3));
    }

    #[test]
    fn missing_support_stays_missing() {
        let mut ch = vec![1.0; 30];
        for v in &mut ch[10..20] {
            *v = f64::NAN;
        }
        let spec = WindowSpec::new(4, 0).unwrap();
        let fv = compute_features(&extract_window(&[ch], 16, &spec), &spec).values;
        assert!(fv.iter().all(|v| v.is_nan()));
    }

    proptest! {
        #[test]
        fn time_shift_equivariance(
            vals in proptest::collection::vec(-100.0f64..100.0, 60),
            shift in 1usize..10,
            t in 15usize..40,
        ) {
            let spec = WindowSpec::new(6, 3).unwrap();
            let a = vec![vals.clone()];
            let mut shifted = vec![0.0; shift];
            shifted.extend_from_slice(&vals);
            let b = vec![shifted];
            let fa = compute_features(&extract_window(&a, t, &spec), &spec).values;
            let fb = compute_features(&extract_window(&b, t + shift, &spec), &spec).values;
            prop_assert_eq!(fa, fb);
        }

        #[test]
        fn missing_never_creates_information(
            vals in proptest::collection::vec(-10.0f64..10.0, 40),
            mask in proptest::collection::vec(any::<bool>(), 40),
        ) {
            let spec = WindowSpec::new(5, 2).unwrap();
            let masked: Vec<f64> = vals.iter().zip(&mask).map(|(v, m)| if *m { f64::NAN } else { *v }).collect();
            let full = compute_features(&extract_window(&[vals.clone()], 20, &spec), &spec).values;
            let part = compute_features(&extract_window(&[masked], 20, &spec), &spec).values;
            prop_assert_eq!(full.len(), part.len());
            // raw positions: a masked input yields a missing feature
            for k in 0..spec.width() {
                if mask[20 - spec.l + k] {
                    prop_assert!(part[k].is_nan());
                }
            }
            let fully_masked = (0..40).map(|_| f64::NAN).collect::<Vec<_>>();
            let none = compute_features(&extract_window(&[fully_masked], 20, &spec), &spec).values;
            prop_assert!(none.iter().all(|v| v.is_nan()));
        }
    }
}
