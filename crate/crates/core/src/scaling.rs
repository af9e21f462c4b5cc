//! Scaled coordinates (`x / v_t` and `tau = (v_0 / x)^2 t`) and the
//! dispersion measure used to score how well a family of curves collapses.
//!
//! Curves are compared on a common log-spaced grid. Each grid point is the
//! geometric centre of a bin; the bin width used as a weight is the linear
//! width between geometric midpoints, so `L = sum of widths` is roughly the
//! largest abscissa covered.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{FptSurface, Quantity, Wing};
use crate::math;
use crate::MS_PER_SEC;

/// Default number of common-grid bins (seven horizons / levels per family).
pub const DEFAULT_BINS: usize = 7;

/// Reference horizon for `v_0`: 30 minutes.
pub const REFERENCE_HORIZON_MS: i64 = 1800 * MS_PER_SEC;

/// Survival decay fit window in `tau` seconds (`10^2 .. 10^4` minutes).
pub const DEFAULT_DECAY_WINDOW: (f64, f64) = (6.0e3, 6.0e5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveLabel {
    pub market: String,
    pub wing: Wing,
    pub horizon_seconds: Option<f64>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledCurve {
    pub axis: Vec<f64>,
    pub values: Vec<f64>,
    pub bin_width: Vec<f64>,
    pub label: CurveLabel,
}

impl ScaledCurve {
    /// Builds a curve, deriving bin widths from geometric midpoints.
    pub fn new(axis: Vec<f64>, values: Vec<f64>, label: CurveLabel) -> Result<Self> {
        if axis.len() != values.len() || axis.is_empty() {
            return Err(Error::InvalidInput("curve axis and values must be non-empty and equal length".into()));
        }
        if axis[0] <= 0.0 || axis.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("curve axis must be positive and strictly increasing".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("curve values must be probabilities".into()));
        }
        let bin_width = geometric_widths(&axis);
        Ok(Self { axis, values, bin_width, label })
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Linear interpolation in `(ln axis, value)`; `None` outside the support.
    pub fn interpolate(&self, u: f64) -> Option<f64> {
        let (lo, hi) = (self.axis[0], *self.axis.last()?);
        let tol = 1e-12;
        if u < lo * (1.0 - tol) || u > hi * (1.0 + tol) {
            return None;
        }
        let u = u.clamp(lo, hi);
        let k = self.axis.partition_point(|&a| a < u);
        if k == 0 {
            return Some(self.values[0]);
        }
        if self.axis[k] == u {
            return Some(self.values[k]);
        }
        let (a0, a1) = (math::ln(self.axis[k - 1]), math::ln(self.axis[k]));
        let f = (math::ln(u) - a0) / (a1 - a0);
        Some(self.values[k - 1] + f * (self.values[k] - self.values[k - 1]))
    }
}

fn geometric_widths(axis: &[f64]) -> Vec<f64> {
    let n = axis.len();
    if n == 1 {
        return alloc::vec![axis[0]];
    }
    let mid: Vec<f64> = axis.windows(2).map(|w| math::sqrt(w[0] * w[1])).collect();
    (0..n)
        .map(|i| {
            let left = if i == 0 { axis[0] * axis[0] / mid[0] } else { mid[i - 1] };
            let right = if i == n - 1 { axis[n - 1] * axis[n - 1] / mid[n - 2] } else { mid[i] };
            right - left
        })
        .collect()
}

/// Log-spaced evaluation grid shared by a family of curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonGrid {
    pub points: Vec<f64>,
    pub widths: Vec<f64>,
}

impl CommonGrid {
    pub fn log_spaced(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || bins < 2 {
            return Err(Error::Grid(format!("cannot build {bins} log bins over [{lo}, {hi}]")));
        }
        let points = math::log_space(lo, hi, bins);
        let widths = geometric_widths(&points);
        Ok(Self { points, widths })
    }

    /// Grid over the intersection of the curves' supports.
    pub fn spanning(curves: &[ScaledCurve], bins: usize) -> Result<Self> {
        let lo = curves.iter().map(|c| c.axis[0]).fold(f64::MIN, f64::max);
        let hi = curves.iter().map(|c| *c.axis.last().unwrap()).fold(f64::MAX, f64::min);
        if curves.is_empty() || !(hi > lo) {
            return Err(Error::Grid(format!("curves share no common support ([{lo}, {hi}])")));
        }
        Self::log_spaced(lo, hi, bins)
    }

    pub fn resample(&self, curve: &ScaledCurve) -> Result<ScaledCurve> {
        let values = self
            .points
            .iter()
            .map(|&u| {
                curve.interpolate(u).ok_or_else(|| {
                    Error::Grid(format!("grid point {u} lies outside the support of curve {:?}", curve.label))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ScaledCurve {
            axis: self.points.clone(),
            values,
            bin_width: self.widths.clone(),
            label: curve.label.clone(),
        })
    }
}

/// Raw curves `W` against `|x| / v_t`, one per horizon with a defined `v_t`.
pub fn scaled_return_curves(surface: &FptSurface, wing: Wing) -> Result<Vec<ScaledCurve>> {
    let levels = surface.levels.wing(wing);
    let mut out = Vec::new();
    for j in 0..surface.horizons.len() {
        let Some(vt) = surface.vt[j] else { continue };
        if !(vt > 0.0) {
            return Err(Error::DegenerateScale(format!(
                "v_t = {vt} at horizon {} s",
                surface.horizons.seconds(j)
            )));
        }
        let (mut axis, mut values) = (Vec::new(), Vec::new());
        for i in 0..levels.len() {
            if let Some(v) = surface.value(wing, i, j) {
                axis.push(levels[i].abs() / vt);
                values.push(v);
            }
        }
        if axis.is_empty() {
            continue;
        }
        let label = CurveLabel {
            market: surface.market.clone(),
            wing,
            horizon_seconds: Some(surface.horizons.seconds(j)),
            level: None,
        };
        out.push(ScaledCurve::new(axis, values, label)?);
    }
    Ok(out)
}

/// Curves against `x / v_t`, resampled onto `bins` common log-spaced points.
pub fn scale_by_volatility(surface: &FptSurface, wing: Wing, bins: usize) -> Result<Vec<ScaledCurve>> {
    let raw = scaled_return_curves(surface, wing)?;
    resample_all(&raw, bins)
}

/// Resamples a family onto a grid spanning the common support.
pub fn resample_all(curves: &[ScaledCurve], bins: usize) -> Result<Vec<ScaledCurve>> {
    let grid = CommonGrid::spanning(curves, bins)?;
    curves.iter().map(|c| grid.resample(c)).collect()
}

/// `v_t` of a surface at `t_ms`.
pub fn reference_volatility(surface: &FptSurface, t_ms: i64) -> Result<f64> {
    let j = surface
        .horizons
        .index_of_ms(t_ms)
        .ok_or_else(|| Error::InvalidInput(format!("reference horizon {t_ms} ms is not on the grid")))?;
    match surface.vt[j] {
        Some(v) if v > 0.0 => Ok(v),
        other => Err(Error::DegenerateScale(format!("reference volatility is {other:?}"))),
    }
}

/// Survival curves against `tau = (v0 / x)^2 t`, one per level (raw, not
/// resampled). Accepts either a first-passage or a survival surface.
pub fn scale_time(surface: &FptSurface, wing: Wing, v0: f64) -> Result<Vec<ScaledCurve>> {
    if !(v0 > 0.0) {
        return Err(Error::DegenerateScale(format!("v0 = {v0}")));
    }
    let levels = surface.levels.wing(wing);
    let mut out = Vec::new();
    for (i, &x) in levels.iter().enumerate() {
        let r = v0 / x;
        let (mut axis, mut values) = (Vec::new(), Vec::new());
        for j in 0..surface.horizons.len() {
            if let Some(v) = surface.value(wing, i, j) {
                axis.push(r * r * surface.horizons.seconds(j));
                values.push(if surface.quantity == Quantity::Fpt { 1.0 - v } else { v });
            }
        }
        if axis.is_empty() {
            continue;
        }
        let label = CurveLabel { market: surface.market.clone(), wing, horizon_seconds: None, level: Some(x) };
        out.push(ScaledCurve::new(axis, values, label)?);
    }
    Ok(out)
}

/// Indices of up to `n` levels of `wing` nearest (in log) to log-spaced
/// targets over `[lo, hi] * v0`.
pub fn levels_near(surface: &FptSurface, wing: Wing, v0: f64, lo: f64, hi: f64, n: usize) -> Vec<usize> {
    let levels = surface.levels.wing(wing);
    let mut picked: Vec<usize> = math::log_space(lo * v0, hi * v0, n)
        .into_iter()
        .filter_map(|target| {
            (0..levels.len()).min_by(|&a, &b| {
                let da = (math::ln(levels[a].abs()) - math::ln(target)).abs();
                let db = (math::ln(levels[b].abs()) - math::ln(target)).abs();
                da.total_cmp(&db)
            })
        })
        .collect();
    picked.dedup();
    picked
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisRole {
    /// Curves at different horizons against `x / v_t`.
    Level,
    /// Survival curves at different levels against `tau`.
    Time,
    /// Curves of different markets at one horizon.
    Market,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinSpread {
    pub center: f64,
    pub width: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionReport {
    pub theta: f64,
    pub wing: Wing,
    pub role: AxisRole,
    pub curve_count: usize,
    pub binning: String,
    pub profile: Vec<BinSpread>,
}

/// Width-weighted mean over bins of the cross-curve (population) standard
/// deviation: `sum_i w_i * std_i / sum_i w_i`.
pub fn theta_from_rows(widths: &[f64], rows: &[&[f64]]) -> (f64, Vec<(f64, f64)>) {
    let m = rows.len() as f64;
    let mut total = 0.0;
    let mut profile = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let mean = rows.iter().map(|r| r[i]).sum::<f64>() / m;
        let std = math::population_std(rows.iter().map(|r| r[i]));
        total += w * std;
        profile.push((mean, std));
    }
    let l: f64 = widths.iter().sum();
    (total / l, profile)
}

pub fn dispersion_theta(curves: &[ScaledCurve], role: AxisRole) -> Result<DispersionReport> {
    if curves.len() < 2 {
        return Err(Error::InvalidInput(format!("dispersion needs at least 2 curves, got {}", curves.len())));
    }
    let first = &curves[0];
    for c in &curves[1..] {
        if c.axis != first.axis || c.bin_width != first.bin_width {
            return Err(Error::Grid("curves are not on a common grid; resample first".into()));
        }
        if c.label.wing != first.label.wing {
            return Err(Error::Grid("curves from different wings cannot be mixed".into()));
        }
    }
    let rows: Vec<&[f64]> = curves.iter().map(|c| c.values.as_slice()).collect();
    let (theta, profile) = theta_from_rows(&first.bin_width, &rows);
    Ok(DispersionReport {
        theta,
        wing: first.label.wing,
        role,
        curve_count: curves.len(),
        binning: format!(
            "{} log-spaced centres over the common support; weights are linear widths between geometric midpoints",
            first.axis.len()
        ),
        profile: first
            .axis
            .iter()
            .zip(&first.bin_width)
            .zip(profile)
            .map(|((&center, &width), (mean, std))| BinSpread { center, width, mean, std })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Least-squares slope of `ln S` against `ln tau` inside `window`.
pub fn decay_exponent(curve: &ScaledCurve, window: (f64, f64)) -> Result<DecayFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = curve
        .axis
        .iter()
        .zip(&curve.values)
        .filter(|(&a, &v)| a >= window.0 && a <= window.1 && v > 0.0)
        .map(|(&a, &v)| (math::ln(a), math::ln(v)))
        .unzip();
    if xs.len() < 5 {
        return Err(Error::InsufficientData(format!("{} points with S > 0 inside the fit window", xs.len())));
    }
    let fit = math::fit_line(&xs, &ys).ok_or_else(|| Error::Fit("degenerate abscissa".into()))?;
    Ok(DecayFit { slope: fit.slope, stderr: fit.slope_stderr, points: xs.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate_fpt, HorizonGrid, LevelGrid};
    use crate::ingest::ReturnPath;
    use alloc::vec;
    use proptest::prelude::*;

    fn label() -> CurveLabel {
        CurveLabel { market: "m".into(), wing: Wing::Positive, horizon_seconds: None, level: None }
    }

    fn curve(axis: &[f64], values: &[f64]) -> ScaledCurve {
        ScaledCurve::new(axis.to_vec(), values.to_vec(), label()).unwrap()
    }

    #[test]
    fn single_curve_abscissa_is_divided_by_vt() {
        let paths = vec![
            ReturnPath::new(0, vec![0, 10_000], vec![0.0, 0.02], 0).unwrap(),
            ReturnPath::new(0, vec![0, 10_000], vec![0.0, -0.02], 0).unwrap(),
        ];
        let levels = LevelGrid::new(&[0.01, 0.03]).unwrap();
        let s = estimate_fpt(&paths, &levels, &HorizonGrid::from_seconds(&[10]).unwrap());
        let c = scaled_return_curves(&s, Wing::Positive).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].axis, vec![0.01 / 0.02, 0.03 / 0.02]);
        assert_eq!(c[0].values, vec![0.5, 0.0]);
    }

    #[test]
    fn zero_volatility_is_degenerate() {
        let paths = vec![ReturnPath::new(0, vec![0, 10_000], vec![0.0, 0.02], 0).unwrap(); 2];
        let s = estimate_fpt(&paths, &LevelGrid::new(&[0.01]).unwrap(), &HorizonGrid::from_seconds(&[10]).unwrap());
        assert!(matches!(scaled_return_curves(&s, Wing::Positive), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn tau_scaling_identities() {
        let paths = vec![
            ReturnPath::new(0, vec![0, 10_000, 20_000], vec![0.0, 0.02, 0.05], 0).unwrap(),
            ReturnPath::new(0, vec![0, 10_000, 20_000], vec![0.0, -0.02, 0.0], 0).unwrap(),
        ];
        let v0 = 0.02;
        let levels = LevelGrid::new(&[v0, 2.0 * v0]).unwrap();
        let s = estimate_fpt(&paths, &levels, &HorizonGrid::from_seconds(&[10, 20]).unwrap());
        let c = scale_time(&s, Wing::Positive, v0).unwrap();
        assert_eq!(c[0].axis, vec![10.0, 20.0]); // x = v0: tau = t
        assert_eq!(c[1].axis, vec![2.5, 5.0]); // doubling x quarters tau
        assert_eq!(c[0].values, vec![1.0, 0.5]); // S = 1 - W
    }

    #[test]
    fn identical_curves_have_zero_theta() {
        let a = curve(&[0.1, 1.0, 10.0], &[0.9, 0.3, 0.01]);
        let r = dispersion_theta(&[a.clone(), a], AxisRole::Level).unwrap();
        assert_eq!(r.theta, 0.0);
    }

    #[test]
    fn zero_and_one_curves_give_one_half() {
        let rows: [&[f64]; 2] = [&[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]];
        let (theta, prof) = theta_from_rows(&[0.2, 0.3, 0.5], &rows);
        assert_eq!(theta, 0.5);
        assert!(prof.iter().all(|&(_, s)| s == 0.5));
    }

    #[test]
    fn mismatched_grids_and_arity_are_rejected() {
        let a = curve(&[0.1, 1.0], &[0.9, 0.3]);
        let b = curve(&[0.2, 1.0], &[0.9, 0.3]);
        assert!(matches!(dispersion_theta(&[a.clone(), b], AxisRole::Level), Err(Error::Grid(_))));
        assert!(matches!(dispersion_theta(&[a], AxisRole::Level), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn resampling_is_linear_in_log_abscissa() {
        let a = curve(&[1.0, 100.0], &[1.0, 0.0]);
        assert_eq!(a.interpolate(10.0), Some(0.5));
        assert_eq!(a.interpolate(0.5), None);
        let grid = CommonGrid::log_spaced(1.0, 100.0, 3).unwrap();
        let r = grid.resample(&a).unwrap();
        assert!((r.values[1] - 0.5).abs() < 1e-15);
        assert!(CommonGrid::spanning(&[a, curve(&[200.0, 300.0], &[0.5, 0.4])], 7).is_err());
    }

    #[test]
    fn geometric_widths_sum_to_span() {
        let g = CommonGrid::log_spaced(1.0, 100.0, 3).unwrap();
        // edges 1/sqrt(10) .. 100*sqrt(10)
        let l: f64 = g.widths.iter().sum();
        assert!((l - (100.0 * 10f64.sqrt() - 1.0 / 10f64.sqrt())).abs() < 1e-9);
    }

    #[test]
    fn decay_of_exact_power_law() {
        let axis: Vec<f64> = math::log_space(1e2, 1e4, 9);
        let values: Vec<f64> = axis.iter().map(|t| 1.0 / t.sqrt()).collect();
        let f = decay_exponent(&curve(&axis, &values), (1e2, 1e4)).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        let flat = curve(&axis, &[0.4; 9]);
        assert!(decay_exponent(&flat, (1e2, 1e4)).unwrap().slope.abs() < 1e-12);
        assert!(matches!(decay_exponent(&flat, (1e2, 3e2)), Err(Error::InsufficientData(_))));
    }

    fn rows_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (2usize..6, 2usize..8).prop_flat_map(|(m, n)| {
            (
                proptest::collection::vec(0.01f64..5.0, n),
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, n), m),
            )
        })
    }

    proptest! {
        #[test]
        fn theta_permutation_invariant((w, rows) in rows_strategy()) {
            let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let mut rev = r.clone();
            rev.reverse();
            let (a, _) = theta_from_rows(&w, &r);
            let (b, _) = theta_from_rows(&w, &rev);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn theta_shift_and_scale((w, rows) in rows_strategy(), shift in -3.0f64..3.0, c in -4.0f64..4.0) {
            let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let (base, _) = theta_from_rows(&w, &r);
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let (s, _) = theta_from_rows(&w, &shifted.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
            let (k, _) = theta_from_rows(&w, &scaled.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
            prop_assert!((s - base).abs() <= 1e-9);
            prop_assert!((k - c.abs() * base).abs() <= 1e-9);
        }

        #[test]
        fn theta_zero_iff_curves_coincide((w, rows) in rows_strategy()) {
            let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let same: Vec<&[f64]> = core::iter::repeat_n(r[0], r.len()).collect();
            prop_assert_eq!(theta_from_rows(&w, &same).0, 0.0);
            let distinct = rows.iter().any(|row| row != &rows[0]);
            prop_assert_eq!(theta_from_rows(&w, &r).0 > 0.0, distinct);
        }
    }
}
