use dslds_core::inference::{fslds_filter, FilterInit, InitStats};
use dslds_core::sim::{benchmark_scenario, ChannelSpec, ScenarioSpec};
use dslds_core::switch::{ObservationConvention, RegimeSet};

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn stationary_channel_has_the_model_moments() {
    let spec = ScenarioSpec {
        name: "ar1".into(),
        length: 40_000,
        patients: 1,
        seed: 9,
        sample_rate_hz: 1.0,
        missing_rate: 0.0,
        channels: vec![ChannelSpec {
            name: "x".into(),
            unit: String::new(),
            baseline: 10.0,
            ar: vec![0.5],
            d: 0,
            ma: Vec::new(),
            system_var: 1.0,
            obs_var: 0.5,
        }],
        events: Vec::new(),
    };
    let ds = spec.simulate().unwrap();
    let rec = &ds.patients[0];
    let latent = &rec.latent.as_ref().unwrap()[0];
    let (m, v) = mean_var(latent);
    // Long-run variance of the mean is σ²/(1−φ)² = 4.
    let se = (4.0 / latent.len() as f64).sqrt();
    assert!((m - 10.0).abs() < 4.0 * se, "mean {m}");
    assert!((v / (1.0 / 0.75) - 1.0).abs() < 0.05, "var {v}");
    let noise: Vec<f64> = rec.series[0].iter().zip(latent).map(|(y, x)| y - x).collect();
    let (nm, nv) = mean_var(&noise);
    assert!(nm.abs() < 4.0 * (0.5 / noise.len() as f64).sqrt());
    assert!((nv / 0.5 - 1.0).abs() < 0.05, "obs var {nv}");
}

#[test]
fn same_seed_same_dataset() {
    let a = benchmark_scenario(500, 2, 4).simulate().unwrap();
    let b = benchmark_scenario(500, 2, 4).simulate().unwrap();
    let c = benchmark_scenario(500, 2, 5).simulate().unwrap();
    assert_eq!(a, b);
    assert_ne!(a.patients[0].series, c.patients[0].series);
}

#[test]
fn blood_samples_leave_heart_rate_alone() {
    let spec = benchmark_scenario(20_000, 1, 13);
    let ds = spec.simulate().unwrap();
    let factors = spec.factors();
    let rec = &ds.patients[0];
    let paths = rec.annotations.value_paths(&factors, rec.len()).unwrap();
    let bs = factors.iter().position(|f| f.name == "blood_sample").unwrap();
    let latent = rec.latent.as_ref().unwrap();
    let resid = |ch: usize| -> Vec<f64> {
        (0..rec.len())
            .filter(|&t| paths[bs][t] == 1 && paths.iter().enumerate().all(|(m, p)| m == bs || p[t] == 0))
            .map(|t| rec.series[ch][t] - latent[ch][t])
            .collect()
    };
    let hr = resid(0);
    assert!(hr.len() > 200, "too few blood-sample steps: {}", hr.len());
    let msq = hr.iter().map(|e| e * e).sum::<f64>() / hr.len() as f64;
    assert!((msq - 1.0).abs() < 0.2, "HR residual mean square {msq}");
    let bp = resid(1);
    let bp_msq = bp.iter().map(|e| e * e).sum::<f64>() / bp.len() as f64;
    assert!(bp_msq > 10.0, "BPsys residual mean square {bp_msq}");
}

#[test]
fn true_parameters_explain_stable_periods() {
    let spec = benchmark_scenario(3000, 2, 17);
    let ds = spec.simulate().unwrap();
    let factors = spec.factors();
    let regimes = RegimeSet::build(&factors, &spec.true_layout().unwrap(), ObservationConvention::Generative).unwrap();
    let stable = regimes.stable_config();
    let (mut hits, mut total) = (0usize, 0usize);
    for rec in &ds.patients {
        let stats = InitStats { means: rec.series.iter().map(|s| s[0]).collect(), vars: vec![1.0; rec.series.len()] };
        let out = fslds_filter(&rec.series, &rec.timestamps, &regimes, &FilterInit::Stats(stats), &ds.channel_names()).unwrap();
        let paths = rec.annotations.value_paths(&factors, rec.len()).unwrap();
        for t in 0..rec.len() {
            if paths.iter().all(|p| p[t] == 0) {
                total += 1;
                if out.posteriors[t].joint[stable] > 0.5 {
                    hits += 1;
                }
            }
        }
    }
    let frac = hits as f64 / total as f64;
    assert!(frac >= 0.9, "stable configuration preferred at {frac:.3} of stable steps");
}
