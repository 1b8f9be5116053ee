use chrono::NaiveDate;
use manf_core::data::{Freq, SeriesFrame};
use manf_core::metrics::{baseline_forecast, crps_energy, crps_per_series, crps_samples, crps_sum, mse, Baseline, ScoreReport};
use manf_core::{ForecastSamples, Rng};
use proptest::prelude::*;

/// Closed-form CRPS of N(0, σ²) at x = 0: σ(2φ(0) − 1/√π).
fn gaussian_crps_at_zero(sigma: f64) -> f64 {
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    sigma * (2.0 * phi0 - 1.0 / std::f64::consts::PI.sqrt())
}

fn random_forecast(rng: &mut Rng, n: usize, k: usize, d: usize) -> (ForecastSamples, Vec<f64>) {
    let s = rng.normal_vec(n * k * d);
    let obs = rng.normal_vec(k * d);
    (ForecastSamples::new(n, k, d, s, vec![1.0; d], 0).unwrap(), obs)
}

#[test]
fn energy_and_piecewise_forms_agree() {
    let mut rng = Rng::new(1);
    for case in 0..200 {
        let n = 1 + case % 37;
        let s: Vec<f64> = rng.normal_vec(n).iter().map(|v| (v * 4.0).round() / 2.0).collect();
        let x = (rng.normal() * 4.0).round() / 2.0;
        let a = crps_samples(&s, x).unwrap();
        let b = crps_energy(&s, x).unwrap();
        assert!((a - b).abs() <= 1e-10, "{a} {b}");
    }
}

#[test]
fn two_point_piecewise_oracle() {
    // F̂ = ½ on [0, 1): ∫₀^½ ¼ + ∫_½^1 ¼ = ¼
    assert_eq!(crps_samples(&[0.0, 1.0], 0.5).unwrap(), 0.25);
    assert_eq!(crps_samples(&[2.0], 0.0).unwrap(), 2.0);
}

#[test]
fn gaussian_closed_form() {
    let mut rng = Rng::new(2024);
    let s = rng.normal_vec(1_000_000);
    let c = crps_samples(&s, 0.0).unwrap();
    let expect = gaussian_crps_at_zero(1.0);
    assert!((expect - 0.2337).abs() < 1e-4);
    assert!((c - expect).abs() <= 0.003, "{c}");
}

#[test]
fn crps_sum_matches_loop_oracle() {
    let mut rng = Rng::new(5);
    let (n, k, d) = (30, 6, 4);
    let (f, obs) = random_forecast(&mut rng, n, k, d);
    let mut oracle = 0.0;
    for t in 0..k {
        let sums: Vec<f64> = (0..n)
            .map(|s| (0..d).map(|j| f.samples[(s * k + t) * d + j]).sum())
            .collect();
        let x: f64 = (0..d).map(|j| obs[t * d + j]).sum();
        oracle += crps_energy(&sums, x).unwrap();
    }
    oracle /= k as f64;
    assert!((crps_sum(&f, &obs).unwrap() - oracle).abs() <= 1e-12);
}

#[test]
fn crps_sum_single_series_is_time_averaged_crps() {
    let mut rng = Rng::new(6);
    let (f, obs) = random_forecast(&mut rng, 20, 5, 1);
    let per = crps_per_series(&f, &obs).unwrap();
    assert!((crps_sum(&f, &obs).unwrap() - per[0]).abs() <= 1e-15);
}

#[test]
fn perfect_samples_score_zero() {
    let obs = vec![1.0, -2.0, 3.5, 0.0, 7.0, 1.0];
    let f = ForecastSamples::new(4, 3, 2, obs.repeat(4), vec![1.0; 2], 0).unwrap();
    assert_eq!(crps_sum(&f, &obs).unwrap(), 0.0);
    assert_eq!(mse(&f, &obs).unwrap(), 0.0);
}

#[test]
fn mse_examples_and_oracle() {
    let f = ForecastSamples::new(1, 1, 1, vec![3.0], vec![1.0], 0).unwrap();
    assert_eq!(mse(&f, &[1.0]).unwrap(), 4.0);
    let mut rng = Rng::new(7);
    let (n, k, d) = (11, 4, 3);
    let (f, obs) = random_forecast(&mut rng, n, k, d);
    let mut oracle = 0.0;
    for i in 0..k * d {
        let m: f64 = (0..n).map(|s| f.samples[s * k * d + i]).sum::<f64>() / n as f64;
        oracle += (m - obs[i]).powi(2);
    }
    oracle /= (k * d) as f64;
    assert!((mse(&f, &obs).unwrap() - oracle).abs() <= 1e-12);
}

#[test]
fn score_report_aggregates_and_serializes() {
    let mut rng = Rng::new(8);
    let (f1, o1) = random_forecast(&mut rng, 10, 3, 2);
    let (f2, o2) = random_forecast(&mut rng, 10, 3, 2);
    let r = ScoreReport::score(&[f1.clone(), f2.clone()], &[o1.clone(), o2.clone()], false).unwrap();
    let expect = (crps_sum(&f1, &o1).unwrap() + crps_sum(&f2, &o2).unwrap()) / 2.0;
    assert!((r.crps_sum - expect).abs() <= 1e-12);
    assert_eq!((r.n_samples, r.windows), (10, 2));
    let json: serde_json::Value = serde_json::to_value(&r).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    keys.sort();
    assert_eq!(keys, ["crps_sum", "mse", "n_samples", "per_series_crps", "windows"]);
}

fn frame_from(values: Vec<f64>, dims: usize) -> SeriesFrame {
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    SeriesFrame::dense(Freq::Hourly, start, dims, values).unwrap()
}

#[test]
fn climatology_stays_in_context_envelope() {
    let mut rng = Rng::new(9);
    let f = frame_from(rng.normal_vec(3 * 120), 3);
    let w = f.window(0, 100, 20).unwrap();
    let fc = baseline_forecast(Baseline::Climatology, &w, 50, &mut rng).unwrap();
    for d in 0..3 {
        let col: Vec<f64> = (0..100).map(|t| w.context[t * 3 + d]).collect();
        let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for t in 0..20 {
            assert!(fc.marginal(t, d).iter().all(|&v| v >= lo && v <= hi));
        }
    }
}

#[test]
fn climatology_on_standard_normal_matches_gaussian_constant() {
    let mut rng = Rng::new(10);
    let f = frame_from(rng.normal_vec(5000 + 50), 1);
    let mut w = f.window(0, 5000, 50).unwrap();
    w.future.fill(0.0);
    let fc = baseline_forecast(Baseline::Climatology, &w, 2000, &mut rng).unwrap();
    let c = crps_per_series(&fc, &w.future).unwrap()[0];
    let expect = gaussian_crps_at_zero(1.0);
    assert!((c - expect).abs() <= 0.1 * expect, "{c}");
}

#[test]
fn persistence_on_constant_series_is_constant() {
    let f = frame_from(vec![4.25; 2 * 60], 2);
    let w = f.window(0, 48, 12).unwrap();
    let fc = baseline_forecast(Baseline::Persistence, &w, 30, &mut Rng::new(11)).unwrap();
    assert!(fc.samples.iter().all(|&v| v == 4.25));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn crps_is_nonnegative_and_zero_only_at_point_mass(
        s in prop::collection::vec(-50.0f64..50.0, 1..40), x in -50.0f64..50.0,
    ) {
        let c = crps_samples(&s, x).unwrap();
        prop_assert!(c >= 0.0);
        prop_assert_eq!(c == 0.0, s.iter().all(|&v| v == x));
    }

    #[test]
    fn crps_forms_agree(s in prop::collection::vec(-50.0f64..50.0, 1..40), x in -50.0f64..50.0) {
        prop_assert!((crps_samples(&s, x).unwrap() - crps_energy(&s, x).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn crps_is_positively_homogeneous(
        s in prop::collection::vec(-10.0f64..10.0, 1..40), x in -10.0f64..10.0, c in 0.01f64..100.0,
    ) {
        let base = crps_samples(&s, x).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
        let lhs = crps_samples(&scaled, c * x).unwrap();
        prop_assert!((lhs - c * base).abs() <= 1e-10 * (1.0 + c * base));
    }

    #[test]
    fn crps_is_translation_invariant(
        s in prop::collection::vec(-10.0f64..10.0, 1..40), x in -10.0f64..10.0, b in -100.0f64..100.0,
    ) {
        let base = crps_samples(&s, x).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + b).collect();
        prop_assert!((crps_samples(&shifted, x + b).unwrap() - base).abs() <= 1e-10);
    }
}
