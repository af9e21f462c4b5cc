//! Independent oracles: closed forms evaluated without the library's own
//! numerics, and Monte Carlo ensembles checked against them.

use fpt_core::estimator::{estimate_fpt, gaussian_gap, stddev_at_horizon, survival, wiener_fpt};
use fpt_core::scaling::{dispersion_theta, scale_by_volatility, scale_time, AxisRole, CommonGrid};
use fpt_core::surrogate::{surrogate_experiment, ExperimentOptions, SurrogateKind, SurrogateSpec};
use fpt_core::synth::{analytic_fpt, generate, Clock, IncrementDist, ProcessSpec};
use fpt_core::{HorizonGrid, LevelGrid, Wing};

/// Maclaurin series of erfc, summed in order of decreasing magnitude
/// terms; accurate to a few ulp for |z| <= 2.
fn erfc_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -z * z / n;
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-20 {
            break;
        }
    }
    1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
}

const SIGMA_DAILY: f64 = 0.003_402_069_087_198_858; // 1 / sqrt(86400)

#[test]
fn wiener_law_at_one_standard_deviation() {
    let frozen = 0.317_310_507_862_914_1;
    let series = erfc_series(std::f64::consts::FRAC_1_SQRT_2);
    assert!((series - frozen).abs() < 1e-15, "{series}");
    let st = statrs::function::erf::erfc(std::f64::consts::FRAC_1_SQRT_2);
    // statrs uses a rational approximation good to about 1e-10
    assert!((st - frozen).abs() < 1e-10, "{st}");
    let sigma = 0.013;
    let t: f64 = 900.0;
    assert!((wiener_fpt(sigma * t.sqrt(), t, sigma) - frozen).abs() < 1e-15);
    assert!((wiener_fpt(-sigma * t.sqrt(), t, sigma) - frozen).abs() < 1e-15);
}

#[test]
fn wiener_law_against_series_over_a_grid() {
    for k in 0..=40 {
        let z = k as f64 * 0.05;
        let x = z * (2.0f64 * 1e-6 * 3600.0).sqrt();
        let got = wiener_fpt(x, 3600.0, 1e-3);
        assert!((got - erfc_series(z)).abs() < 5e-15, "z = {z}");
    }
    assert_eq!(wiener_fpt(0.0, 60.0, 0.01), 1.0);
}

#[test]
fn sigma_per_day_constant() {
    assert!((SIGMA_DAILY - 1.0 / 86_400f64.sqrt()).abs() < 1e-18);
}

fn monitored_wiener(paths: usize, seed: u64, session_s: i64) -> ProcessSpec {
    ProcessSpec::wiener(SIGMA_DAILY, Clock::Uniform { step_ms: 60_000 }, session_s, paths, seed).with_continuous_monitoring()
}

#[test]
fn monte_carlo_wiener_at_one_standard_deviation() {
    let spec = monitored_wiener(100_000, 11, 900);
    let paths = generate(&spec).unwrap();
    let t: f64 = 900.0;
    let x = SIGMA_DAILY * t.sqrt();
    let s = estimate_fpt(&paths, &LevelGrid::symmetric(&[x]).unwrap(), &HorizonGrid::from_seconds(&[900]).unwrap());
    let p = erfc_series(std::f64::consts::FRAC_1_SQRT_2);
    let se = (p * (1.0 - p) / 1e5).sqrt();
    for wing in Wing::BOTH {
        let w = s.value(wing, 0, 0).unwrap();
        assert!((w - p).abs() <= 3.0 * se, "{wing:?}: {w} vs {p}");
    }
    assert_eq!(analytic_fpt(&spec, x, t).unwrap(), wiener_fpt(x, t, SIGMA_DAILY));
}

#[test]
fn monte_carlo_wiener_variance() {
    let spec = monitored_wiener(100_000, 12, 1800);
    let paths = generate(&spec).unwrap();
    for t in [300.0, 900.0, 1800.0] {
        let v = stddev_at_horizon(&paths, (t * 1000.0) as i64).unwrap();
        let var = v * v;
        let exact = SIGMA_DAILY * SIGMA_DAILY * t;
        assert!((var - exact).abs() / exact < 0.02, "t = {t}: {var} vs {exact}");
    }
}

#[test]
fn wiener_curves_collapse_across_horizons() {
    let spec = monitored_wiener(50_000, 13, 3600);
    let paths = generate(&spec).unwrap();
    let horizons = HorizonGrid::from_seconds(&[900, 3600]).unwrap();
    let v900 = SIGMA_DAILY * 30.0;
    let levels = LevelGrid::relative(v900, 0.05, 6.0, 40).unwrap();
    let s = estimate_fpt(&paths, &levels, &horizons);
    let curves = scale_by_volatility(&s, Wing::Positive, 7).unwrap();
    let report = dispersion_theta(&curves, AxisRole::Level).unwrap();
    // Monte Carlo spread of W at 5e4 paths is at most 0.0023
    assert!(report.theta < 0.006, "theta {}", report.theta);
    for (x, t) in [(0.5, 900.0f64), (1.0, 3600.0)] {
        let u: f64 = x;
        let w = wiener_fpt(u * SIGMA_DAILY * t.sqrt(), t, SIGMA_DAILY);
        assert!((w - erfc_series(u / 2f64.sqrt())).abs() < 1e-14);
    }
}

#[test]
fn wiener_survival_collapses_in_scaled_time() {
    let spec = monitored_wiener(50_000, 14, 7200);
    let paths = generate(&spec).unwrap();
    let horizons = HorizonGrid::default_minutes();
    let v0 = SIGMA_DAILY * 1800f64.sqrt();
    let levels = LevelGrid::symmetric(&[0.6 * v0, 0.8 * v0, 1.0 * v0]).unwrap();
    let s = survival(&estimate_fpt(&paths, &levels, &horizons));
    let curves = scale_time(&s, Wing::Positive, v0).unwrap();
    let grid = CommonGrid::spanning(&curves, 7).unwrap();
    let resampled: Vec<_> = curves.iter().map(|c| grid.resample(c).unwrap()).collect();
    let theta = dispersion_theta(&resampled, AxisRole::Time).unwrap().theta;
    assert!(theta < 0.01, "theta {theta}");
}

#[test]
fn student_walk_beats_gaussian_far_out() {
    let spec = ProcessSpec::iid(IncrementDist::Student { nu: 3.5 }, 1e-3, Clock::Uniform { step_ms: 60_000 }, 900, 100_000, 15);
    let paths = generate(&spec).unwrap();
    let v = 1e-3 * 30.0;
    let s = estimate_fpt(&paths, &LevelGrid::symmetric(&[5.0 * v]).unwrap(), &HorizonGrid::from_seconds(&[900]).unwrap());
    let gap = gaussian_gap(&s);
    for wing in Wing::BOTH {
        let cell = gap.cell(wing, 0, 0).unwrap();
        assert!(cell.gap > 0.0, "{cell:?}");
    }
}

#[test]
fn shuffled_iid_walk_shows_no_change() {
    let spec = ProcessSpec::iid(IncrementDist::Laplace, 1e-3, Clock::Exponential { mean_ms: 20_000.0 }, 1800, 20_000, 16);
    let paths = generate(&spec).unwrap();
    let levels = LevelGrid::relative(1e-3 * 30.0, 0.2, 4.0, 8).unwrap();
    let horizons = HorizonGrid::from_seconds(&[300, 900, 1800]).unwrap();
    for kind in [SurrogateKind::ShuffleReturns, SurrogateKind::ShuffleTimes] {
        let r = surrogate_experiment(&paths, &levels, &horizons, SurrogateSpec { kind, seed: 3 }, 1, &ExperimentOptions::default())
            .unwrap();
        assert!(!r.summary.significant_change, "{kind:?}: {:?}", r.summary);
        assert_eq!(r.summary.verdict, "no significant change");
    }
}
