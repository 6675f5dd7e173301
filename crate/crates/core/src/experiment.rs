//! Running trained bundles on patients and the nested cross-validation
//! evaluation of DSLDS, FSLDS and their α-mixture.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    auc_table, default_alpha_grid, grid_search, mean_factor_auc, mix_posteriors, select_alpha, AlphaSelection,
    AucTable, FoldPlan, FoldScores, Grid, GridPoint, ModelFoldScores, Roc,
};
use crate::features::WindowSpec;
use crate::forest::ForestParams;
use crate::gaussian::GaussianBelief;
use crate::inference::{
    dslds_filter, dslds_filter_with_posteriors, dslds_switch_posterior, dslds_switch_posteriors, fslds_filter,
    FilterInit, InferenceOutput, Provenance, SwitchPosterior,
};
use crate::io::{AnnotatedDataset, ModelBundle, PatientRecord};
use crate::switch::{ModelKey, ObservationConvention};
use crate::train::{fit_classifiers, patient_rows, train_bundle_with_fallbacks, TrainConfig, TrainingRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dslds,
    Fslds,
    Mixture,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Dslds => "DSLDS",
            ModelKind::Fslds => "FSLDS",
            ModelKind::Mixture => "alpha-mixture",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Overrides the bundle's α.
    pub alpha: Option<f64>,
    /// Weight the x-filter with the mixed posterior instead of the DSLDS one.
    pub mixture_feeds_x: bool,
    /// Mix joints instead of per-factor marginals.
    pub joint_level: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { alpha: None, mixture_feeds_x: false, joint_level: false }
    }
}

/// Runs one model of `bundle` on one patient.
pub fn run_model(bundle: &ModelBundle, rec: &PatientRecord, kind: ModelKind, opts: &RunOptions) -> Result<InferenceOutput> {
    let init = FilterInit::Stats(bundle.init.clone());
    let channels = &bundle.channels;
    if rec.series.len() != channels.len() {
        return Err(Error::SchemaMismatch(format!(
            "bundle has {} channels, data has {}",
            channels.len(),
            rec.series.len()
        )));
    }
    let disc = || bundle.regimes(ObservationConvention::Discriminative);
    let gen = || bundle.regimes(ObservationConvention::Generative);
    match kind {
        ModelKind::Dslds => dslds_filter(&rec.series, &rec.timestamps, &bundle.window, &bundle.classifiers, &disc()?, &init, channels),
        ModelKind::Fslds => fslds_filter(&rec.series, &rec.timestamps, &gen()?, &init, channels),
        ModelKind::Mixture => {
            let alpha = opts.alpha.unwrap_or(bundle.alpha);
            let regimes = disc()?;
            let f = fslds_filter(&rec.series, &rec.timestamps, &gen()?, &init, channels)?;
            let pd = dslds_switch_posteriors(&rec.series, &bundle.window, &bundle.classifiers)?;
            let mixed = mix_posteriors(&f.posteriors, &pd, alpha, opts.joint_level)?;
            if opts.mixture_feeds_x {
                return dslds_filter_with_posteriors(
                    &rec.series,
                    &rec.timestamps,
                    mixed,
                    &regimes,
                    &init,
                    channels,
                    Provenance::AlphaMixture,
                );
            }
            let d = dslds_filter_with_posteriors(&rec.series, &rec.timestamps, pd, &regimes, &init, channels, Provenance::Dslds)?;
            let beliefs = d
                .means
                .into_iter()
                .zip(d.covs)
                .map(|(mean, cov)| GaussianBelief { mean, cov })
                .collect();
            InferenceOutput::assemble(Provenance::AlphaMixture, d.timestamps, d.channels, mixed, beliefs, &regimes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub train: TrainConfig,
    pub grid: Grid,
    /// Row stride for the inner grid search (training and validation).
    pub grid_stride: usize,
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), grid: Grid::default(), grid_stride: 1, alphas: default_alpha_grid() }
    }
}

/// Choices made inside one outer fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterFoldRecord {
    pub fold: usize,
    pub test_patients: Vec<String>,
    pub grid_point: GridPoint,
    pub grid_score: f64,
    pub alpha: f64,
    /// Dynamics that fell back to inflated stable models.
    pub fallbacks: Vec<ModelKey>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub plan: FoldPlan,
    pub table: AucTable,
    /// `rocs[model][factor]` over pooled scores.
    pub rocs: Vec<Vec<Roc>>,
    pub folds: Vec<OuterFoldRecord>,
    pub alpha_curves: Vec<AlphaSelection>,
}

/// Config, seeds and fold plan of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: EvalConfig,
    pub plan: FoldPlan,
    pub folds: Vec<OuterFoldRecord>,
}

impl EvalReport {
    pub fn manifest(&self, config: &EvalConfig) -> RunManifest {
        RunManifest { config: config.clone(), plan: self.plan.clone(), folds: self.folds.clone() }
    }
}

type RowCache = HashMap<(usize, usize), Vec<OnceLock<Result<TrainingRows, String>>>>;

fn cached_rows<'a>(cache: &'a RowCache, ds: &AnnotatedDataset, l: usize, r: usize, p: usize, stride: usize) -> Result<&'a TrainingRows> {
    let slot = &cache[&(l, r)][p];
    slot.get_or_init(|| {
        WindowSpec::new(l, r)
            .and_then(|spec| patient_rows(ds, p, &spec, stride))
            .map_err(|e| e.to_string())
    })
    .as_ref()
    .map_err(|e| Error::invalid(e.clone()))
}

fn has_all_classes(labels: &[Vec<usize>]) -> bool {
    labels.iter().all(|l| l.iter().any(|&v| v == 0) && l.iter().any(|&v| v != 0))
}

/// Per-step binary labels of every factor.
fn patient_labels(ds: &AnnotatedDataset, p: usize) -> Result<Vec<Vec<bool>>> {
    let rec = &ds.patients[p];
    rec.annotations.binary_labels(&ds.factors, rec.len())
}

/// Nested cross-validation: per outer fold, the DSLDS window and forest
/// size come from an inner leave-one-patient-out grid search, the FSLDS is
/// trained directly, and α is chosen on the other outer folds' outputs.
/// AUCs are pooled over all outer test sets.
pub fn evaluate_models(ds: &AnnotatedDataset, plan: &FoldPlan, cfg: &EvalConfig) -> Result<EvalReport> {
    ds.validate()?;
    plan.verify()?;
    if plan.patients != ds.patient_ids() {
        return Err(Error::invalid("fold plan was built for a different patient list"));
    }
    let n_p = ds.patients.len();
    let points = cfg.grid.points();
    let mut cache: RowCache = HashMap::new();
    for pt in &points {
        cache.entry((pt.l, pt.r)).or_insert_with(|| (0..n_p).map(|_| OnceLock::new()).collect());
    }

    let mut fold_scores: Vec<FoldScores> = Vec::new();
    let mut dslds_scores = Vec::new();
    let mut fslds_scores = Vec::new();
    let mut records = Vec::new();
    for k in 0..plan.n_outer() {
        let train = plan.outer_train(k);
        let inner = &plan.inner[k];
        let search = grid_search(&cfg.grid, inner.len(), |pt, i| {
            let fold = &inner[i];
            let parts = fold
                .train
                .iter()
                .map(|&p| cached_rows(&cache, ds, pt.l, pt.r, p, cfg.grid_stride))
                .collect::<Result<Vec<_>>>()?;
            let data = TrainingRows::concat(&parts);
            if !has_all_classes(&data.labels) {
                return Ok(None);
            }
            let params = ForestParams { n_trees: pt.n_trees, ..cfg.train.forest };
            let classifiers = fit_classifiers(&data, &ds.factors, &params)?;
            let val = cached_rows(&cache, ds, pt.l, pt.r, fold.validation, cfg.grid_stride)?;
            let posts = val
                .rows
                .iter()
                .map(|row| dslds_switch_posterior(&classifiers, row))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<Vec<bool>> = val.labels.iter().map(|l| l.iter().map(|&v| v != 0).collect()).collect();
            mean_factor_auc(&posts, &labels)
        })?;
        let best = search.best;

        let tcfg = TrainConfig {
            l: best.l,
            r: best.r,
            forest: ForestParams { n_trees: best.n_trees, ..cfg.train.forest },
            ..cfg.train.clone()
        };
        let (bundle, fallbacks) = train_bundle_with_fallbacks(ds, &train, &tcfg)?;
        let gen_regimes = bundle.regimes(ObservationConvention::Generative)?;
        let init = FilterInit::Stats(bundle.init.clone());

        let outputs = plan.outer[k]
            .par_iter()
            .map(|&p| {
                let rec = &ds.patients[p];
                let pd = dslds_switch_posteriors(&rec.series, &bundle.window, &bundle.classifiers)?;
                let pg = fslds_filter(&rec.series, &rec.timestamps, &gen_regimes, &init, &bundle.channels)?.posteriors;
                Ok((pg, pd, patient_labels(ds, p)?))
            })
            .collect::<Result<Vec<(Vec<SwitchPosterior>, Vec<SwitchPosterior>, Vec<Vec<bool>>)>>>()?;
        let mut fs = FoldScores { generative: Vec::new(), discriminative: Vec::new(), labels: vec![Vec::new(); ds.factors.len()] };
        for (pg, pd, labels) in outputs {
            fs.generative.extend(pg);
            fs.discriminative.extend(pd);
            for (f, l) in labels.into_iter().enumerate() {
                fs.labels[f].extend(l);
            }
        }
        let scores = |posts: &[SwitchPosterior]| -> Vec<Vec<f64>> {
            (0..ds.factors.len()).map(|m| posts.iter().map(|p| p.factor_score(m)).collect()).collect()
        };
        dslds_scores.push(ModelFoldScores { scores: scores(&fs.discriminative), labels: fs.labels.clone() });
        fslds_scores.push(ModelFoldScores { scores: scores(&fs.generative), labels: fs.labels.clone() });
        records.push(OuterFoldRecord {
            fold: k,
            test_patients: plan.outer[k].iter().map(|&p| plan.patients[p].clone()).collect(),
            grid_point: best,
            grid_score: search.best_score,
            alpha: f64::NAN,
            fallbacks,
        });
        fold_scores.push(fs);
    }

    let mut mixture_scores = Vec::new();
    let mut curves = Vec::new();
    for k in 0..fold_scores.len() {
        let others: Vec<FoldScores> =
            fold_scores.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| f.clone()).collect();
        let sel = select_alpha(&others, &cfg.alphas)?;
        let fs = &fold_scores[k];
        let mixed = mix_posteriors(&fs.generative, &fs.discriminative, sel.alpha, false)?;
        mixture_scores.push(ModelFoldScores {
            scores: (0..ds.factors.len()).map(|m| mixed.iter().map(|p| p.factor_score(m)).collect()).collect(),
            labels: fs.labels.clone(),
        });
        records[k].alpha = sel.alpha;
        curves.push(sel);
    }

    let models: Vec<String> =
        [ModelKind::Dslds, ModelKind::Fslds, ModelKind::Mixture].iter().map(|m| m.label().to_string()).collect();
    let factors: Vec<String> = ds.factors.iter().map(|f| f.name.clone()).collect();
    let (table, rocs) = auc_table(&models, &factors, &[dslds_scores, fslds_scores, mixture_scores])?;
    Ok(EvalReport { plan: plan.clone(), table, rocs, folds: records, alpha_curves: curves })
}

/// Scores of a fixed bundle on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleReport {
    pub table: AucTable,
    pub rocs: Vec<Vec<Roc>>,
    /// Mean factor AUC of the mixture over `alphas`; the table uses the bundle's α.
    pub alpha_curve: Vec<(f64, f64)>,
}

/// Applies `bundle` to every patient of `ds` (no retraining) and scores
/// the three models; each patient counts as one fold.
pub fn evaluate_bundle(ds: &AnnotatedDataset, bundle: &ModelBundle, alphas: &[f64]) -> Result<BundleReport> {
    ds.validate()?;
    bundle.check_channels(&ds.channel_names())?;
    if bundle.factors.iter().map(|f| &f.name).ne(ds.factors.iter().map(|f| &f.name)) {
        return Err(Error::SchemaMismatch("bundle and dataset factors differ".into()));
    }
    let gen = bundle.regimes(ObservationConvention::Generative)?;
    let init = FilterInit::Stats(bundle.init.clone());
    let folds = (0..ds.patients.len())
        .into_par_iter()
        .map(|p| {
            let rec = &ds.patients[p];
            let discriminative = dslds_switch_posteriors(&rec.series, &bundle.window, &bundle.classifiers)?;
            let generative = fslds_filter(&rec.series, &rec.timestamps, &gen, &init, &bundle.channels)?.posteriors;
            Ok(FoldScores { generative, discriminative, labels: patient_labels(ds, p)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = select_alpha(&folds, alphas)?.curve;
    let n_f = ds.factors.len();
    let scores = |posts: &[SwitchPosterior]| -> Vec<Vec<f64>> {
        (0..n_f).map(|m| posts.iter().map(|p| p.factor_score(m)).collect()).collect()
    };
    let mut per_model: Vec<Vec<ModelFoldScores>> = vec![Vec::new(); 3];
    for f in &folds {
        let mixed = mix_posteriors(&f.generative, &f.discriminative, bundle.alpha, false)?;
        for (m, posts) in [&f.discriminative, &f.generative, &mixed].into_iter().enumerate() {
            per_model[m].push(ModelFoldScores { scores: scores(posts), labels: f.labels.clone() });
        }
    }
    let models: Vec<String> =
        [ModelKind::Dslds, ModelKind::Fslds, ModelKind::Mixture].iter().map(|m| m.label().to_string()).collect();
    let factors: Vec<String> = ds.factors.iter().map(|f| f.name.clone()).collect();
    let (table, rocs) = auc_table(&models, &factors, &per_model)?;
    Ok(BundleReport { table, rocs, alpha_curve: curve })
}
