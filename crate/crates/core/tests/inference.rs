use dslds_core::eval::roc_auc;
use dslds_core::features::{feature_count, WindowSpec};
use dslds_core::forest::{FactorClassifier, ForestParams};
use dslds_core::gaussian::{kalman_predict, kalman_update_with_loglik, GaussianBelief, RegimeParams};
use dslds_core::inference::{
    dslds_filter, dslds_filter_with_posteriors, fslds_filter, fslds_gpb_step, fslds_initial_state, observations,
    FilterInit, FilterState, InitStats, Provenance, StreamingDslds, SwitchPosterior,
};
use dslds_core::sim::benchmark_scenario;
use dslds_core::switch::{enumerate_configs, FactorSpec, FactorValue, ObservationConvention, RegimeSet};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn m(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn scalar_regime(a: f64, q: f64, r: f64, id: usize) -> RegimeParams {
    RegimeParams::new(m(a), m(q), m(1.0), m(r), id).unwrap()
}

fn walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x = 0.9 * x + rng.sample::<f64, _>(StandardNormal);
            x + 0.5 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn kalman_reference(series: &[f64], reg: &RegimeParams, prior: &GaussianBelief) -> Vec<GaussianBelief> {
    let mut out = Vec::new();
    let mut b = prior.clone();
    for (t, y) in series.iter().enumerate() {
        if t > 0 {
            b = kalman_predict(&b, &reg.a, &reg.q).unwrap();
        }
        b = kalman_update_with_loglik(&b, &DVector::from_element(1, *y), &reg.c, &reg.r).unwrap().0;
        out.push(b.clone());
    }
    out
}

#[test]
fn single_regime_filters_reduce_to_kalman() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let series = walk(&mut rng, 200);
    let ts: Vec<f64> = (0..200).map(|t| t as f64).collect();
    let reg = scalar_regime(0.9, 1.0, 0.25, 0);
    let set = RegimeSet::single(reg.clone());
    let prior = GaussianBelief::new(DVector::zeros(1), m(4.0)).unwrap();
    let reference = kalman_reference(&series, &reg, &prior);
    let init = FilterInit::Prior(prior);
    let names = vec!["x".to_string()];

    let posts = vec![SwitchPosterior::from_joint(vec![1.0], &[]); 200];
    let d = dslds_filter_with_posteriors(&[series.clone()], &ts, posts, &set, &init, &names, Provenance::Dslds).unwrap();
    let f = fslds_filter(&[series], &ts, &set, &init, &names).unwrap();
    for (t, b) in reference.iter().enumerate() {
        for out in [&d, &f] {
            assert!((out.means[t][0] - b.mean[0]).abs() < 1e-12);
            assert!((out.covs[t][(0, 0)] - b.cov[(0, 0)]).abs() < 1e-12);
        }
    }
}

fn two_regime_set(z_stay: f64) -> RegimeSet {
    let mut factor = FactorSpec::new("s", vec![FactorValue::baseline("a"), FactorValue::baseline("b")]);
    factor.transition = vec![vec![z_stay, 1.0 - z_stay], vec![1.0 - z_stay, z_stay]];
    let mut set = RegimeSet::single(scalar_regime(0.9, 1.0, 0.25, 0));
    set.factors = vec![factor.clone()];
    set.configs = enumerate_configs(&[factor]).unwrap();
    set.regimes = vec![scalar_regime(0.9, 1.0, 0.25, 0), scalar_regime(0.5, 0.2, 4.0, 1)];
    set
}

#[test]
fn identity_transitions_run_independent_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let series = walk(&mut rng, 60);
    let set = two_regime_set(1.0);
    let prior = GaussianBelief::new(DVector::zeros(1), m(2.0)).unwrap();
    let init = FilterInit::Prior(prior.clone());
    let z = DMatrix::identity(2, 2);
    let ys = observations(&[series.clone()]);

    // Oracle: one Kalman filter per regime, weights ∝ prior × evidence.
    let refs: Vec<Vec<GaussianBelief>> = set.regimes.iter().map(|r| kalman_reference(&series, r, &prior)).collect();
    let mut log_ev = [0.5f64.ln(), 0.5f64.ln()];

    let (mut state, _) = fslds_initial_state(&ys[0], &set, &init).unwrap();
    for t in 0..series.len() {
        if t > 0 {
            state = fslds_gpb_step(&state, &ys[t], &set, &z).unwrap().0;
        }
        for (k, reg) in set.regimes.iter().enumerate() {
            let prev = if t == 0 { prior.clone() } else { kalman_predict(&refs[k][t - 1], &reg.a, &reg.q).unwrap() };
            log_ev[k] += kalman_update_with_loglik(&prev, &ys[t], &reg.c, &reg.r).unwrap().1;
            assert!((state.beliefs[k].mean[0] - refs[k][t].mean[0]).abs() < 1e-10);
            assert!((state.beliefs[k].cov[(0, 0)] - refs[k][t].cov[(0, 0)]).abs() < 1e-10);
        }
        let w0 = 1.0 / (1.0 + (log_ev[1] - log_ev[0]).exp());
        assert!((state.weights[0] - w0).abs() < 1e-9, "t={t}: {} vs {w0}", state.weights[0]);
    }
}

#[test]
fn gpb_weights_stay_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let series = walk(&mut rng, 300);
    let set = two_regime_set(0.95);
    let ys = observations(&[series]);
    let init = FilterInit::Prior(GaussianBelief::new(DVector::zeros(1), m(1.0)).unwrap());
    let z = set.transition_matrix();
    let (mut state, _): (FilterState, _) = fslds_initial_state(&ys[0], &set, &init).unwrap();
    for y in &ys[1..] {
        let (next, post) = fslds_gpb_step(&state, y, &set, &z).unwrap();
        post.validate().unwrap();
        assert!((next.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        state = next;
    }
}

#[test]
fn x_factor_bursts_are_detected_with_true_parameters() {
    let spec = benchmark_scenario(3000, 2, 21);
    let ds = spec.simulate().unwrap();
    let factors = spec.factors();
    let xf = factors.iter().position(|f| f.name == "x_factor").unwrap();
    let regimes = RegimeSet::build(&factors, &spec.true_layout().unwrap(), ObservationConvention::Generative).unwrap();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for rec in &ds.patients {
        let stats = InitStats { means: rec.series.iter().map(|s| s[0]).collect(), vars: vec![1.0; rec.series.len()] };
        let out = fslds_filter(&rec.series, &rec.timestamps, &regimes, &FilterInit::Stats(stats), &ds.channel_names()).unwrap();
        scores.extend(out.factor_scores(xf));
        labels.extend(rec.annotations.binary_labels(&factors, rec.len()).unwrap()[xf].iter().copied());
    }
    assert!(labels.iter().any(|&l| l), "scenario produced no X-factor episode");
    let auc = roc_auc(&scores, &labels).unwrap().auc;
    assert!(auc > 0.9, "x-factor AUC {auc}");
}

#[test]
fn streaming_matches_batch() {
    let spec = benchmark_scenario(400, 1, 5);
    let ds = spec.simulate().unwrap();
    let rec = &ds.patients[0];
    let regimes =
        RegimeSet::build(&spec.factors(), &spec.true_layout().unwrap(), ObservationConvention::Discriminative).unwrap();
    let window = WindowSpec::new(4, 2).unwrap();
    let n_feat = feature_count(&window, rec.series.len());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ForestParams { n_trees: 5, seed: 1, ..ForestParams::default() };
    let classifiers: Vec<FactorClassifier> = (0..2)
        .map(|_| {
            let x: Vec<Vec<f64>> =
                (0..200).map(|_| (0..n_feat).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] + r[n_feat - 1] > 0.0)).collect();
            FactorClassifier::fit(&x, &y, 2, &params).unwrap()
        })
        .collect();
    let init = FilterInit::Stats(InitStats { means: vec![150.0, 50.0, 30.0], vars: vec![4.0; 3] });
    let batch =
        dslds_filter(&rec.series, &rec.timestamps, &window, &classifiers, &regimes, &init, &ds.channel_names()).unwrap();

    let mut stream = StreamingDslds::new(window, &classifiers, &regimes, init);
    let mut steps = Vec::new();
    for (t, y) in observations(&rec.series).into_iter().enumerate() {
        if let Some(s) = stream.push(rec.timestamps[t], y).unwrap() {
            assert_eq!(s.emit_timestamp, rec.timestamps[s.step + 2]);
            steps.push(s);
        }
    }
    steps.extend(stream.finish().unwrap());
    assert_eq!(steps.len(), batch.len());
    for s in &steps {
        assert_eq!(s.posterior, batch.posteriors[s.step]);
        assert!((&s.belief.mean - &batch.means[s.step]).amax() < 1e-9);
    }
}

#[test]
fn missing_observations_give_the_prediction_recursion() {
    let reg = scalar_regime(0.8, 0.5, 1.0, 0);
    let set = RegimeSet::single(reg.clone());
    let prior = GaussianBelief::new(DVector::from_element(1, 3.0), m(1.0)).unwrap();
    let mut series = vec![f64::NAN; 30];
    series[0] = 2.0;
    let ts: Vec<f64> = (0..30).map(|t| t as f64).collect();
    let posts = vec![SwitchPosterior::from_joint(vec![1.0], &[]); 30];
    let out = dslds_filter_with_posteriors(
        &[series.clone()],
        &ts,
        posts,
        &set,
        &FilterInit::Prior(prior.clone()),
        &["x".into()],
        Provenance::Dslds,
    )
    .unwrap();
    let mut b = kalman_reference(&series[..1], &reg, &prior).pop().unwrap();
    for t in 1..30 {
        b = kalman_predict(&b, &reg.a, &reg.q).unwrap();
        assert!((out.means[t][0] - b.mean[0]).abs() < 1e-12);
        assert!((out.covs[t][(0, 0)] - b.cov[(0, 0)]).abs() < 1e-12);
    }
}
