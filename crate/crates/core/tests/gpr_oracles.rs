mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use trendeq::gpr::{
    fit, log_marginal_likelihood, resample_fixed_range, resample_in_range, FitConfig, GprModel, Hyperparams,
};
use trendeq::{Observation, PatientSeries};

fn series(id: &str, xs: &[f64], ys: &[f64]) -> PatientSeries {
    let obs = xs.iter().zip(ys).map(|(&a, &e)| Observation::new(a, e).unwrap()).collect();
    PatientSeries::new(id, obs).unwrap()
}

fn jitter_for(xs: &[f64], ys: &[f64], m: f64, hp: Hyperparams) -> f64 {
    GprModel::condition(xs.to_vec(), ys.to_vec(), m, hp).unwrap().jitter()
}

#[test]
fn two_point_evidence_matches_direct_inversion() {
    let xs = [40.0, 47.5];
    let ys = [72.0, 61.0];
    let m = 66.5;
    for (l, sf2, sn2) in [(5.0, 100.0, 4.0), (1.0, 1.0, 0.5), (30.0, 900.0, 25.0)] {
        let hp = Hyperparams::new(l, sf2, sn2).unwrap();
        let diag = sn2 + jitter_for(&xs, &ys, m, hp);
        let got = log_marginal_likelihood(&hp, &xs, &ys, m).unwrap();
        let want = common::gp_evidence(&xs, &ys, m, l, sf2, diag);
        assert!((got - want).abs() <= 1e-10, "l={l}: {got} vs {want}");
    }
}

#[test]
fn three_point_prediction_matches_direct_inversion() {
    let xs = vec![50.0, 53.0, 60.0];
    let ys = vec![80.0, 74.0, 66.0];
    let m = 220.0 / 3.0;
    let hp = Hyperparams::new(6.0, 150.0, 3.0).unwrap();
    let model = GprModel::condition(xs.clone(), ys.clone(), m, hp).unwrap();
    let diag = 3.0 + model.jitter();
    for x in [30.0, 50.0, 51.5, 57.0, 60.0, 75.0, 90.0] {
        let p = model.predict(x);
        let (om, ov) = common::gp_posterior(&xs, &ys, m, 6.0, 150.0, diag, x);
        assert!((p.mean - om).abs() <= 1e-8 * om.abs().max(1.0), "mean at {x}");
        assert!((p.variance - ov).abs() <= 1e-8 * ov.max(1.0), "variance at {x}");
    }
}

#[test]
fn recovers_generating_hyperparameters() {
    let (l, sf2, sn2) = (5.0_f64, 100.0_f64, 4.0_f64);
    let n = 60;
    let xs: Vec<f64> = (0..n).map(|i| 30.0 + 60.0 * i as f64 / (n - 1) as f64).collect();
    let cov = DMatrix::from_fn(n, n, |i, j| {
        sf2 * common::se(xs[i], xs[j], l) + if i == j { sn2 } else { 0.0 }
    });
    let chol = cov.cholesky().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let draw = chol.l() * z;
    let ys: Vec<f64> = draw.iter().map(|v| 60.0 + v).collect();
    let model = fit(&series("gp", &xs, &ys), &FitConfig::default()).unwrap();
    let hp = model.hyperparams();
    let pairs = [
        ("length scale", hp.length_scale, l),
        ("signal variance", hp.signal_variance, sf2),
        ("noise variance", hp.noise_variance, sn2),
    ];
    for (name, got, want) in pairs {
        assert!((got.ln() - want.ln()).abs() <= 0.7, "{name}: {got} vs {want}");
    }
}

#[test]
fn variance_grows_away_from_observations() {
    let xs: Vec<f64> = (0..8).map(|i| 55.0 + 20.0 * i as f64 / 7.0).collect();
    let ys: Vec<f64> = xs.iter().map(|a| 95.0 - 0.6 * a).collect();
    let s = series("p", &xs, &ys);
    let model = fit(&s, &FitConfig::default()).unwrap();
    let inside = model.predict(65.0).variance;
    for x in [30.0, 40.0, 85.0, 90.0] {
        assert!(model.predict(x).variance > inside, "at {x}");
    }
    let fixed = resample_fixed_range(&model);
    let in_range = resample_in_range(&model, &s).unwrap();
    let max_fixed = fixed.variances.iter().cloned().fold(0.0, f64::max);
    assert!(in_range.variances.iter().all(|&v| v <= max_fixed));
    assert_eq!(fixed.grid.len(), 50);
    assert_eq!(fixed.grid[0], 30.0);
    assert_eq!(fixed.grid[49], 90.0);
    assert_eq!(in_range.grid[0], 55.0);
    assert!((in_range.grid[49] - 75.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_variance_is_bounded_by_prior(
        pts in prop::collection::btree_map(300u32..900, 20.0f64..110.0, 1..8),
        l in 1.0f64..30.0,
        sf2 in 1.0f64..1000.0,
        sn2 in 0.5f64..50.0,
        x in 25.0f64..95.0,
    ) {
        let xs: Vec<f64> = pts.keys().map(|&k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = pts.values().cloned().collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let hp = Hyperparams::new(l, sf2, sn2).unwrap();
        let model = GprModel::condition(xs, ys, m, hp).unwrap();
        let p = model.predict(x);
        prop_assert!(p.variance >= 0.0);
        prop_assert!(p.variance <= sf2 * (1.0 + 1e-12));
    }

    #[test]
    fn evidence_is_finite_for_valid_inputs(
        pts in prop::collection::btree_map(300u32..900, 20.0f64..110.0, 1..10),
        l in 1.0f64..30.0,
        sf2 in 1.0f64..1000.0,
        sn2 in 0.5f64..50.0,
    ) {
        let xs: Vec<f64> = pts.keys().map(|&k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = pts.values().cloned().collect();
        let hp = Hyperparams::new(l, sf2, sn2).unwrap();
        prop_assert!(log_marginal_likelihood(&hp, &xs, &ys, 60.0).unwrap().is_finite());
    }
}
