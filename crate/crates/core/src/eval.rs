//! ROC/AUC, nested cross-validation plans, grid search, α selection and
//! result tables.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{alpha_mixture, alpha_mixture_joint, SwitchPosterior};
use crate::switch::FactorSpec;

/// One labelled interval `[start, end)` in steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub factor: String,
    pub value: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTrack {
    pub intervals: Vec<Annotation>,
    pub sample_rate_hz: f64,
}

impl AnnotationTrack {
    pub fn new(intervals: Vec<Annotation>) -> Self {
        Self { intervals, sample_rate_hz: 1.0 }
    }

    /// Non-empty, in-bounds, non-overlapping per factor, known labels.
    pub fn validate(&self, t_len: usize, factors: &[FactorSpec]) -> Result<()> {
        for a in &self.intervals {
            if a.start >= a.end || a.end > t_len {
                return Err(Error::invalid(format!(
                    "annotation {}={} [{}, {}) outside the sequence of length {t_len}",
                    a.factor, a.value, a.start, a.end
                )));
            }
            let f = factors
                .iter()
                .find(|f| f.name == a.factor)
                .ok_or_else(|| Error::invalid(format!("annotation for unknown factor `{}`", a.factor)))?;
            if !f.values.iter().any(|v| v.label == a.value) {
                return Err(Error::invalid(format!("unknown value `{}` for factor `{}`", a.value, a.factor)));
            }
        }
        for f in factors {
            let mut spans: Vec<(usize, usize)> =
                self.intervals.iter().filter(|a| a.factor == f.name).map(|a| (a.start, a.end)).collect();
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                return Err(Error::invalid(format!("overlapping annotations for factor `{}`", f.name)));
            }
        }
        Ok(())
    }

    /// Per-factor, per-step value index (0 outside every interval).
    pub fn value_paths(&self, factors: &[FactorSpec], t_len: usize) -> Result<Vec<Vec<usize>>> {
        self.validate(t_len, factors)?;
        let mut paths = vec![vec![0usize; t_len]; factors.len()];
        for a in &self.intervals {
            let f = factors.iter().position(|f| f.name == a.factor).expect("validated");
            let v = factors[f].values.iter().position(|v| v.label == a.value).expect("validated");
            paths[f][a.start..a.end].iter_mut().for_each(|x| *x = v);
        }
        Ok(paths)
    }

    /// Per-factor binary labels: inside any non-baseline interval.
    pub fn binary_labels(&self, factors: &[FactorSpec], t_len: usize) -> Result<Vec<Vec<bool>>> {
        Ok(self
            .value_paths(factors, t_len)?
            .into_iter()
            .map(|p| p.into_iter().map(|v| v != 0).collect())
            .collect())
    }

    /// Inverse of [`AnnotationTrack::value_paths`]: maximal runs of non-baseline values.
    pub fn from_value_paths(factors: &[FactorSpec], paths: &[Vec<usize>]) -> Self {
        let mut intervals = Vec::new();
        for (f, path) in factors.iter().zip(paths) {
            let mut t = 0;
            while t < path.len() {
                let v = path[t];
                let start = t;
                while t < path.len() && path[t] == v {
                    t += 1;
                }
                if v != 0 {
                    intervals.push(Annotation {
                        factor: f.name.clone(),
                        value: f.values[v].label.clone(),
                        start,
                        end: t,
                    });
                }
            }
        }
        Self::new(intervals)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub auc: f64,
    /// From the highest threshold down to `−∞`, starting at `(0, 0)`.
    pub points: Vec<RocPoint>,
}

/// Mann–Whitney AUC with ties counted as one half, plus the ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::dim("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Descending sweep: each positive is concordant with every negative
    // still below it; ties within a group count half (kept as 2× integers).
    let mut twice: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        let neg_below = n_neg - fp - gn;
        twice += 2 * gp as u128 * neg_below as u128 + gp as u128 * gn as u128;
        tp += gp;
        fp += gn;
        points.push(RocPoint { threshold: s, fpr: fp as f64 / n_neg as f64, tpr: tp as f64 / n_pos as f64 });
    }
    let auc = twice as f64 / (2 * n_pos as u128 * n_neg as u128) as f64;
    Ok(Roc { auc, points })
}

/// One inner fold: train on `train`, validate on the single held-out patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerFold {
    pub train: Vec<usize>,
    pub validation: usize,
}

/// Outer partition into `P` test sets with leave-one-patient-out inner loops.
/// Patients are referred to by their index in `patients`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub patients: Vec<String>,
    pub seed: u64,
    pub outer: Vec<Vec<usize>>,
    pub inner: Vec<Vec<InnerFold>>,
}

impl FoldPlan {
    pub fn n_outer(&self) -> usize {
        self.outer.len()
    }

    /// Patients outside outer test set `k`, ascending.
    pub fn outer_train(&self, k: usize) -> Vec<usize> {
        let test: BTreeSet<usize> = self.outer[k].iter().copied().collect();
        (0..self.patients.len()).filter(|p| !test.contains(p)).collect()
    }

    /// Structural checks: disjoint exhaustive outer sets; inner folds are
    /// exactly leave-one-out over the outer training patients and never
    /// touch the outer test set.
    pub fn verify(&self) -> Result<()> {
        let n = self.patients.len();
        if self.outer.len() < 2 || self.inner.len() != self.outer.len() {
            return Err(Error::invalid("fold plan needs at least two outer folds"));
        }
        let mut seen = vec![false; n];
        for set in &self.outer {
            if set.is_empty() {
                return Err(Error::invalid("empty outer test set"));
            }
            for &p in set {
                if p >= n || seen[p] {
                    return Err(Error::invalid(format!("patient index {p} repeated or out of range")));
                }
                seen[p] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::invalid("outer test sets do not cover every patient"));
        }
        for (k, inner) in self.inner.iter().enumerate() {
            let test: BTreeSet<usize> = self.outer[k].iter().copied().collect();
            let train = self.outer_train(k);
            if inner.len() != train.len() {
                return Err(Error::invalid("inner loop is not leave-one-patient-out"));
            }
            for (fold, &held) in inner.iter().zip(&train) {
                if fold.validation != held {
                    return Err(Error::invalid("inner folds out of order"));
                }
                let expect: Vec<usize> = train.iter().copied().filter(|&p| p != held).collect();
                if fold.train != expect {
                    return Err(Error::invalid("inner training set is not the outer training set minus one"));
                }
                if test.contains(&fold.validation) || fold.train.iter().any(|p| test.contains(p)) {
                    return Err(Error::invalid(format!("outer test patient leaks into inner fold of outer fold {k}")));
                }
            }
        }
        Ok(())
    }
}

/// Shuffles patients with `seed` and deals them round-robin into `p` sets.
pub fn build_fold_plan(patients: &[String], p: usize, seed: u64) -> Result<FoldPlan> {
    if p < 2 || patients.len() < p {
        return Err(Error::invalid(format!(
            "{} patients cannot form {p} outer folds (need at least {p}, and p ≥ 2)",
            patients.len()
        )));
    }
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut outer = vec![Vec::new(); p];
    for (i, idx) in order.into_iter().enumerate() {
        outer[i % p].push(idx);
    }
    for set in &mut outer {
        set.sort_unstable();
    }
    let mut plan = FoldPlan { patients: patients.to_vec(), seed, outer, inner: Vec::new() };
    plan.inner = (0..p)
        .map(|k| {
            let train = plan.outer_train(k);
            train
                .iter()
                .map(|&held| InnerFold {
                    train: train.iter().copied().filter(|&q| q != held).collect(),
                    validation: held,
                })
                .collect()
        })
        .collect();
    plan.verify()?;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_trees: usize,
    pub l: usize,
    pub r: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grid {
    pub n_trees: Vec<usize>,
    pub l: Vec<usize>,
    pub r: Vec<usize>,
}

impl Default for Grid {
    fn default() -> Self {
        Self { n_trees: vec![10, 25, 50, 100, 200], l: vec![4, 9, 14, 19, 29, 49], r: vec![0, 5, 10] }
    }
}

impl Grid {
    pub fn single(point: GridPoint) -> Self {
        Self { n_trees: vec![point.n_trees], l: vec![point.l], r: vec![point.r] }
    }

    /// Every point once, in tie-break order (fewer trees, smaller l, smaller r).
    pub fn points(&self) -> Vec<GridPoint> {
        let mut pts: BTreeSet<GridPoint> = BTreeSet::new();
        for &n_trees in &self.n_trees {
            for &l in &self.l {
                for &r in &self.r {
                    pts.insert(GridPoint { n_trees, l, r });
                }
            }
        }
        pts.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub best: GridPoint,
    pub best_score: f64,
    /// Mean objective per point; `None` where any fold failed.
    pub scores: Vec<(GridPoint, Option<f64>)>,
}

/// Maximizes the fold-averaged objective over the grid. The objective is
/// called once per (point, fold) in parallel; `Ok(None)` marks a fold where
/// the objective is undefined (skipped in the average), an error fails the
/// whole point.
pub fn grid_search<F>(grid: &Grid, n_folds: usize, objective: F) -> Result<GridSearchResult>
where
    F: Fn(&GridPoint, usize) -> Result<Option<f64>> + Sync,
{
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if n_folds == 0 {
        return Err(Error::invalid("grid search needs at least one fold"));
    }
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..n_folds).map(move |f| (p, f))).collect();
    let values: Vec<Result<Option<f64>, ()>> = jobs
        .par_iter()
        .map(|&(p, f)| match objective(&points[p], f) {
            Ok(Some(v)) if v.is_finite() => Ok(Some(v)),
            Ok(None) => Ok(None),
            _ => Err(()),
        })
        .collect();
    let scores: Vec<(GridPoint, Option<f64>)> = points
        .iter()
        .enumerate()
        .map(|(p, pt)| {
            let vals: Result<Vec<Option<f64>>, ()> = values[p * n_folds..(p + 1) * n_folds].iter().copied().collect();
            let mean = vals.ok().and_then(|v| {
                let defined: Vec<f64> = v.into_iter().flatten().collect();
                (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
            });
            (*pt, mean)
        })
        .collect();
    let mut best: Option<(GridPoint, f64)> = None;
    for (pt, s) in &scores {
        if let Some(s) = s {
            if best.is_none_or(|b| *s > b.1) {
                best = Some((*pt, *s));
            }
        }
    }
    let (best, best_score) = best.ok_or_else(|| Error::invalid("every grid point failed"))?;
    Ok(GridSearchResult { best, best_score, scores })
}

/// Mean over factors of the per-factor AUC of `1 − P(baseline)`. Factors
/// whose labels hold a single class are skipped; `None` if all are.
pub fn mean_factor_auc(posteriors: &[SwitchPosterior], labels: &[Vec<bool>]) -> Result<Option<f64>> {
    let mut aucs = Vec::new();
    for (m, lab) in labels.iter().enumerate() {
        if lab.len() != posteriors.len() {
            return Err(Error::dim("labels and posteriors differ in length"));
        }
        let pos = lab.iter().filter(|&&b| b).count();
        if pos == 0 || pos == lab.len() {
            continue;
        }
        let scores: Vec<f64> = posteriors.iter().map(|p| p.factor_score(m)).collect();
        aucs.push(roc_auc(&scores, lab)?.auc);
    }
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

/// Aligned generative/discriminative posteriors and labels for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScores {
    pub generative: Vec<SwitchPosterior>,
    pub discriminative: Vec<SwitchPosterior>,
    /// Per factor, per step.
    pub labels: Vec<Vec<bool>>,
}

/// `lo, lo + step, …` up to `hi` inclusive (computed by index, not by
/// repeated addition).
pub fn alpha_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

pub fn default_alpha_grid() -> Vec<f64> {
    alpha_grid(-3.0, 6.0, 0.25)
}

/// Mixes the two posterior sequences step by step.
pub fn mix_posteriors(
    generative: &[SwitchPosterior],
    discriminative: &[SwitchPosterior],
    alpha: f64,
    joint_level: bool,
) -> Result<Vec<SwitchPosterior>> {
    if generative.len() != discriminative.len() {
        return Err(Error::dim("posterior sequences differ in length"));
    }
    generative
        .iter()
        .zip(discriminative)
        .map(|(g, d)| if joint_level { alpha_mixture_joint(g, d, alpha) } else { alpha_mixture(g, d, alpha) })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// `(α, fold-averaged mean factor AUC)` over the grid.
    pub curve: Vec<(f64, f64)>,
}

/// α maximizing the fold-averaged mean factor AUC; ties go to the smallest α.
pub fn select_alpha(folds: &[FoldScores], alphas: &[f64]) -> Result<AlphaSelection> {
    if alphas.is_empty() || folds.is_empty() {
        return Err(Error::invalid("α selection needs a grid and at least one fold"));
    }
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let curve = sorted
        .par_iter()
        .map(|&a| {
            let mut vals = Vec::new();
            for f in folds {
                let mixed = mix_posteriors(&f.generative, &f.discriminative, a, false)?;
                if let Some(v) = mean_factor_auc(&mixed, &f.labels)? {
                    vals.push(v);
                }
            }
            if vals.is_empty() {
                return Err(Error::invalid("no fold has both classes for any factor"));
            }
            Ok((a, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = curve[0];
    for &(a, v) in &curve[1..] {
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(AlphaSelection { alpha: best.0, curve })
}

/// Per-model, per-factor AUCs pooled over all outer test sets, plus the
/// same table per outer fold (`NaN` where a fold lacks one class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucTable {
    pub models: Vec<String>,
    pub factors: Vec<String>,
    pub pooled: Vec<Vec<f64>>,
    pub per_fold: Vec<Vec<Vec<f64>>>,
}

impl AucTable {
    pub fn cell(&self, model: &str, factor: &str) -> Option<f64> {
        let m = self.models.iter().position(|x| x == model)?;
        let f = self.factors.iter().position(|x| x == factor)?;
        Some(self.pooled[m][f])
    }

    pub fn model_mean(&self, model: &str) -> Option<f64> {
        let m = self.models.iter().position(|x| x == model)?;
        let row = &self.pooled[m];
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }
}

/// Scores of one model on one outer fold: per factor, per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFoldScores {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<bool>>,
}

/// Pools `scores[model][fold]` into an [`AucTable`]; ROC curves of the
/// pooled scores are returned per model and factor.
pub fn auc_table(
    models: &[String],
    factors: &[String],
    scores: &[Vec<ModelFoldScores>],
) -> Result<(AucTable, Vec<Vec<Roc>>)> {
    if scores.len() != models.len() {
        return Err(Error::invalid("missing model output"));
    }
    let mut pooled = Vec::new();
    let mut per_fold = Vec::new();
    let mut rocs = Vec::new();
    for folds in scores {
        if folds.is_empty() {
            return Err(Error::invalid("missing model output"));
        }
        let mut row = Vec::new();
        let mut row_roc = Vec::new();
        for f in 0..factors.len() {
            let mut s = Vec::new();
            let mut l = Vec::new();
            for fold in folds {
                if fold.scores.len() != factors.len() || fold.labels.len() != factors.len() {
                    return Err(Error::invalid("missing model output"));
                }
                s.extend_from_slice(&fold.scores[f]);
                l.extend_from_slice(&fold.labels[f]);
            }
            let roc = roc_auc(&s, &l)?;
            row.push(roc.auc);
            row_roc.push(roc);
        }
        pooled.push(row);
        rocs.push(row_roc);
        per_fold.push(
            folds
                .iter()
                .map(|fold| {
                    (0..factors.len())
                        .map(|f| roc_auc(&fold.scores[f], &fold.labels[f]).map_or(f64::NAN, |r| r.auc))
                        .collect()
                })
                .collect(),
        );
    }
    Ok((AucTable { models: models.to_vec(), factors: factors.to_vec(), pooled, per_fold }, rocs))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("writing CSV: {e}"))
}

/// `model,<factor>...,mean` rows of pooled AUCs.
pub fn write_auc_table_csv<W: Write>(out: W, table: &AucTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(table.factors.iter().cloned());
    header.push("mean".into());
    w.write_record(&header).map_err(csv_err)?;
    for (m, row) in table.models.iter().zip(&table.pooled) {
        let mut rec = vec![m.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push((row.iter().sum::<f64>() / row.len() as f64).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}

/// `fold,model,<factor>...` rows of per-fold AUCs.
pub fn write_per_fold_csv<W: Write>(out: W, table: &AucTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["fold".to_string(), "model".to_string()];
    header.extend(table.factors.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (m, folds) in table.models.iter().zip(&table.per_fold) {
        for (k, row) in folds.iter().enumerate() {
            let mut rec = vec![k.to_string(), m.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}

pub fn write_roc_csv<W: Write>(out: W, roc: &Roc) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "fpr", "tpr"]).map_err(csv_err)?;
    for p in &roc.points {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}

/// `fold,alpha,mean_auc` for every selection curve.
pub fn write_alpha_sweep_csv<W: Write>(out: W, curves: &[Vec<(f64, f64)>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fold", "alpha", "mean_auc"]).map_err(csv_err)?;
    for (k, curve) in curves.iter().enumerate() {
        for (a, v) in curve {
            w.write_record([k.to_string(), a.to_string(), v.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap().auc, 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.3], &[false, true, true]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[false, true, true, false, true, false]).unwrap().auc, 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn roc_curve_ends_at_one() {
        let roc = roc_auc(&[0.1, 0.4, 0.4, 0.8], &[false, true, false, true]).unwrap();
        let last = roc.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(roc.points.len(), 4);
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn fold_plan_shapes() {
        let plan = build_fold_plan(&names(9), 3, 1).unwrap();
        assert!(plan.outer.iter().all(|s| s.len() == 3));
        assert!(plan.inner.iter().all(|i| i.len() == 6));
        let plan = build_fold_plan(&names(15), 3, 1).unwrap();
        assert!(plan.outer.iter().all(|s| s.len() == 5));
        let loo = build_fold_plan(&names(4), 4, 1).unwrap();
        assert!(loo.outer.iter().all(|s| s.len() == 1));
        assert!(build_fold_plan(&names(2), 3, 1).is_err());
        assert_eq!(build_fold_plan(&names(9), 3, 5).unwrap(), build_fold_plan(&names(9), 3, 5).unwrap());
    }

    #[test]
    fn verify_catches_leakage() {
        let mut plan = build_fold_plan(&names(6), 3, 2).unwrap();
        let leaked = plan.outer[0][0];
        plan.inner[0][0].train.push(leaked);
        assert!(plan.verify().is_err());
    }

    #[test]
    fn grid_order_and_ties() {
        let grid = Grid::default();
        assert_eq!(grid.points().len(), 90);
        let res = grid_search(&grid, 2, |_, _| Ok(Some(0.7))).unwrap();
        assert_eq!(res.best, GridPoint { n_trees: 10, l: 4, r: 0 });
        let target = GridPoint { n_trees: 50, l: 19, r: 5 };
        let res = grid_search(&grid, 3, |p, f| Ok((f != 1).then_some(if *p == target { 1.0 } else { 0.6 }))).unwrap();
        assert_eq!(res.best, target);
        assert!(grid_search(&grid, 1, |_, _| Err(Error::invalid("x"))).is_err());
    }

    #[test]
    fn alpha_grid_has_37_points() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 37);
        assert_eq!(g[0], -3.0);
        assert_eq!(*g.last().unwrap(), 6.0);
        assert_eq!(g[14], 0.5);
    }

    #[test]
    fn equal_models_select_smallest_alpha() {
        let post: Vec<SwitchPosterior> =
            [0.1, 0.7, 0.4, 0.9].iter().map(|&p| SwitchPosterior::from_marginals(vec![vec![1.0 - p, p]])).collect();
        let fold = FoldScores {
            generative: post.clone(),
            discriminative: post,
            labels: vec![vec![false, true, false, true]],
        };
        let sel = select_alpha(&[fold], &default_alpha_grid()).unwrap();
        assert_eq!(sel.alpha, -3.0);
        assert!(sel.curve.iter().all(|c| c.1 == 1.0));
    }

    #[test]
    fn annotations_round_trip_paths() {
        use crate::switch::FactorValue;
        let mut f = FactorSpec::new("bs", vec![FactorValue::baseline("off"), FactorValue::baseline("on")]);
        f.values[1].is_artifact = true;
        let track = AnnotationTrack::new(vec![Annotation { factor: "bs".into(), value: "on".into(), start: 2, end: 5 }]);
        let paths = track.value_paths(std::slice::from_ref(&f), 8).unwrap();
        assert_eq!(paths[0], vec![0, 0, 1, 1, 1, 0, 0, 0]);
        assert_eq!(AnnotationTrack::from_value_paths(std::slice::from_ref(&f), &paths), track);
        let bad = AnnotationTrack::new(vec![Annotation { factor: "bs".into(), value: "on".into(), start: 6, end: 9 }]);
        assert!(bad.validate(8, std::slice::from_ref(&f)).is_err());
    }
}
