//! Modified Weibull and Student first-passage laws with a square-root time
//! dependence, fitted jointly over all horizons of one wing:
//!
//! ```text
//! W_wei(x, t) = exp(-(x / sqrt(b t))^beta)
//! W_stu(x, t) = (1 + x / sqrt(a t))^(-alpha)
//! ```
//!
//! Rates `a`, `b` are per second. Fits minimise the count-weighted squared
//! error of `ln W` with a Levenberg–Marquardt search over `(shape, ln rate)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{FptSurface, Wing};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Weibull,
    Student,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Weibull => "weibull",
            Family::Student => "student",
        }
    }

    /// Allowed range of the shape parameter.
    pub fn shape_bounds(self) -> (f64, f64) {
        match self {
            Family::Weibull => (0.1, 10.0),
            Family::Student => (0.5, 20.0),
        }
    }

    fn initial_shape(self) -> f64 {
        match self {
            Family::Weibull => 1.0,
            Family::Student => 3.0,
        }
    }
}

/// `ln W` of the model at `(|x|, t)`.
pub fn ln_model(family: Family, shape: f64, rate: f64, x: f64, t_seconds: f64) -> f64 {
    let q = x.abs() / math::sqrt(rate * t_seconds);
    match family {
        Family::Weibull => -math::powf(q, shape),
        Family::Student => -shape * math::ln_1p(q),
    }
}

/// Model probability; the negative wing uses `|x|`.
pub fn eval_model(family: Family, shape: f64, rate: f64, x: f64, t_seconds: f64) -> f64 {
    let q = x.abs() / math::sqrt(rate * t_seconds);
    match family {
        Family::Weibull => math::exp(-math::powf(q, shape)),
        Family::Student => math::powf(1.0 + q, -shape),
    }
}

/// `(ln W, d ln W / d shape, d ln W / d ln rate)`.
fn ln_model_grad(family: Family, shape: f64, ln_rate: f64, ln_x: f64, ln_t: f64) -> (f64, f64, f64) {
    let ln_q = ln_x - 0.5 * (ln_rate + ln_t);
    match family {
        Family::Weibull => {
            let g = math::exp(shape * ln_q);
            (-g, -ln_q * g, 0.5 * shape * g)
        }
        Family::Student => {
            let q = math::exp(ln_q);
            let l = math::ln_1p(q);
            (-shape * l, -l, 0.5 * shape * q / (1.0 + q))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Boundary between the small-target and tail regions, in units of `v_t`.
    pub crossover_multiple: f64,
    /// Fit a single horizon (index into the surface grid) instead of all.
    pub horizon: Option<usize>,
    /// Keep only cells with `lo <= |x| / v_t < hi`.
    pub scaled_range: Option<(f64, f64)>,
    /// Starting `(shape, rate)`; the default start matches `W = 1/2`.
    pub start: Option<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 500, crossover_multiple: 5.0, horizon: None, scaled_range: None, start: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub wing: Wing,
    pub market: String,
    pub shape: f64,
    /// `b` (Weibull) or `a` (Student), per second.
    pub rate: f64,
    pub shape_stderr: f64,
    pub rate_stderr: f64,
    pub iterations: usize,
    pub at_bound: bool,
    pub cells_used: usize,
    /// Cells with `W = 0` or `W = 1`, which have no finite logarithm.
    pub cells_excluded: usize,
    pub horizons_used: usize,
    pub objective: f64,
    /// Weighted RMSE of `ln W` over all cells.
    pub rmse_log: f64,
    /// Weighted RMSE of `ln W` below / above `crossover_multiple * v_t`.
    pub rmse_small: Option<f64>,
    pub rmse_tail: Option<f64>,
    pub crossover_multiple: f64,
    /// Weighted RMSE of `ln S` with the same parameters.
    pub rmse_log_survival: Option<f64>,
    pub stderr_method: String,
}

impl FitResult {
    pub fn eval(&self, x: f64, t_seconds: f64) -> f64 {
        eval_model(self.family, self.shape, self.rate, x, t_seconds)
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    x: f64,
    t: f64,
    w: f64,
    weight: f64,
    /// `|x| / v_t` when `v_t` is known.
    scaled: Option<f64>,
}

fn usable_cells(
    surface: &FptSurface,
    wing: Wing,
    horizon: Option<usize>,
    range: Option<(f64, f64)>,
) -> (Vec<Cell>, usize) {
    let mut cells = Vec::new();
    let mut excluded = 0;
    for (_, j, x, t, w, n) in surface.cells(wing) {
        if horizon.is_some_and(|h| h != j) {
            continue;
        }
        let scaled = surface.vt[j].filter(|v| *v > 0.0).map(|v| x.abs() / v);
        if let Some((lo, hi)) = range {
            if !scaled.is_some_and(|u| u >= lo && u < hi) {
                continue;
            }
        }
        if w <= 0.0 || w >= 1.0 {
            excluded += 1;
            continue;
        }
        cells.push(Cell { x: x.abs(), t, w, weight: n as f64, scaled });
    }
    let mean = cells.iter().map(|c| c.weight).sum::<f64>() / cells.len().max(1) as f64;
    for c in &mut cells {
        c.weight /= mean;
    }
    (cells, excluded)
}

/// Abscissa where `W` falls to 1/2 at one horizon, interpolating `W` in
/// `ln x`; falls back to the level whose `W` is nearest 1/2.
fn half_crossing(cells: &[&Cell]) -> f64 {
    for pair in cells.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if (a.w - 0.5) * (b.w - 0.5) <= 0.0 && a.w != b.w {
            let f = (a.w - 0.5) / (a.w - b.w);
            return math::exp(math::ln(a.x) + f * (math::ln(b.x) - math::ln(a.x)));
        }
    }
    cells
        .iter()
        .min_by(|a, b| (a.w - 0.5).abs().total_cmp(&(b.w - 0.5).abs()))
        .map(|c| c.x)
        .unwrap_or(1.0)
}

fn initial_rate(family: Family, cells: &[Cell]) -> f64 {
    let mut ts: Vec<f64> = cells.iter().map(|c| c.t).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let t_med = ts[(ts.len() - 1) / 2];
    let mut at: Vec<&Cell> = cells.iter().filter(|c| c.t == t_med).collect();
    at.sort_by(|a, b| a.x.total_cmp(&b.x));
    let x_half = half_crossing(&at);
    let q_half = match family {
        Family::Weibull => core::f64::consts::LN_2,
        Family::Student => math::powf(2.0, 1.0 / 3.0) - 1.0,
    };
    let r = x_half / q_half;
    r * r / t_med
}

struct Evaluation {
    objective: f64,
    residuals: Vec<f64>,
    jac: Vec<[f64; 2]>,
}

fn evaluate(family: Family, theta: [f64; 2], cells: &[Cell], pre: &[(f64, f64, f64)]) -> Evaluation {
    let mut objective = 0.0;
    let mut residuals = Vec::with_capacity(cells.len());
    let mut jac = Vec::with_capacity(cells.len());
    for (c, &(ln_x, ln_t, ln_w)) in cells.iter().zip(pre) {
        let (m, d_shape, d_rate) = ln_model_grad(family, theta[0], theta[1], ln_x, ln_t);
        let r = m - ln_w;
        objective += c.weight * r * r;
        residuals.push(r);
        jac.push([d_shape, d_rate]);
    }
    Evaluation { objective, residuals, jac }
}

fn normal_matrix(cells: &[Cell], ev: &Evaluation) -> ([[f64; 2]; 2], [f64; 2]) {
    let mut a = [[0.0; 2]; 2];
    let mut g = [0.0; 2];
    for ((c, r), j) in cells.iter().zip(&ev.residuals).zip(&ev.jac) {
        for p in 0..2 {
            g[p] += c.weight * j[p] * r;
            for q in 0..2 {
                a[p][q] += c.weight * j[p] * j[q];
            }
        }
    }
    (a, g)
}

fn invert(a: [[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > 0.0) || !det.is_finite() {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

fn weighted_rmse<'a>(pairs: impl Iterator<Item = (&'a Cell, f64)>) -> Option<f64> {
    let (mut ssr, mut w) = (0.0, 0.0);
    for (c, r) in pairs {
        ssr += c.weight * r * r;
        w += c.weight;
    }
    (w > 0.0).then(|| math::sqrt(ssr / w))
}

/// Joint weighted least-squares fit of one family to one wing.
pub fn fit_model(surface: &FptSurface, family: Family, wing: Wing, options: &FitOptions) -> Result<FitResult> {
    let (cells, excluded) = usable_cells(surface, wing, options.horizon, options.scaled_range);
    let mut horizons: Vec<f64> = cells.iter().map(|c| c.t).collect();
    horizons.sort_by(f64::total_cmp);
    horizons.dedup();
    let mut levels: Vec<f64> = cells.iter().map(|c| c.x).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let min_horizons = if options.horizon.is_some() { 1 } else { 2 };
    if horizons.len() < min_horizons || levels.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "fit needs >= {min_horizons} horizons and >= 5 levels with 0 < W < 1; have {} and {}",
            horizons.len(),
            levels.len()
        )));
    }
    if cells.iter().all(|c| c.w == cells[0].w) {
        return Err(Error::Fit("degenerate surface: all cells share one value".into()));
    }

    let pre: Vec<(f64, f64, f64)> = cells.iter().map(|c| (math::ln(c.x), math::ln(c.t), math::ln(c.w))).collect();
    let (lo, hi) = family.shape_bounds();
    let mut theta = match options.start {
        Some((shape, rate)) if rate > 0.0 => [shape.clamp(lo, hi), math::ln(rate)],
        _ => [family.initial_shape(), math::ln(initial_rate(family, &cells))],
    };
    let mut ev = evaluate(family, theta, &cells, &pre);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let (a, g) = normal_matrix(&cells, &ev);
        let mut improved = false;
        for _ in 0..60 {
            let damped = [[a[0][0] * (1.0 + lambda), a[0][1]], [a[1][0], a[1][1] * (1.0 + lambda)]];
            let Some(inv) = invert(damped) else {
                lambda *= 10.0;
                continue;
            };
            let mut step = [-(inv[0][0] * g[0] + inv[0][1] * g[1]), -(inv[1][0] * g[0] + inv[1][1] * g[1])];
            let pinned = (theta[0] <= lo && step[0] < 0.0) || (theta[0] >= hi && step[0] > 0.0);
            if pinned {
                // shape held at its bound: minimise over the rate alone
                step = [0.0, -g[1] / damped[1][1]];
            }
            let trial = [(theta[0] + step[0]).clamp(lo, hi), theta[1] + step[1]];
            let tev = evaluate(family, trial, &cells, &pre);
            if tev.objective.is_finite() && tev.objective <= ev.objective {
                let moved = (trial[0] - theta[0]).abs().max((trial[1] - theta[1]).abs());
                let drop = ev.objective - tev.objective;
                theta = trial;
                ev = tev;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if moved < 1e-12 || drop <= 1e-13 * ev.objective {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left: a (possibly constrained) minimum
            converged = true;
        }
        if converged {
            break;
        }
    }
    if !converged {
        return Err(Error::Fit(format!(
            "{} fit did not converge in {iterations} iterations (objective {:.3e}, shape {:.4}, rate {:.4e})",
            family.name(),
            ev.objective,
            theta[0],
            math::exp(theta[1])
        )));
    }

    // sandwich covariance around the Gauss-Newton Hessian, leverage-corrected residuals
    let (a, _) = normal_matrix(&cells, &ev);
    let (shape_stderr, ln_rate_stderr) = match invert(a) {
        Some(inv) => {
            let mut meat = [[0.0; 2]; 2];
            for ((c, r), j) in cells.iter().zip(&ev.residuals).zip(&ev.jac) {
                let h = c.weight
                    * (j[0] * (inv[0][0] * j[0] + inv[0][1] * j[1]) + j[1] * (inv[1][0] * j[0] + inv[1][1] * j[1]));
                let s = c.weight * r / (1.0 - h.min(0.99));
                for p in 0..2 {
                    for q in 0..2 {
                        meat[p][q] += s * s * j[p] * j[q];
                    }
                }
            }
            let mut cov = [[0.0; 2]; 2];
            for p in 0..2 {
                for q in 0..2 {
                    for u in 0..2 {
                        for v in 0..2 {
                            cov[p][q] += inv[p][u] * meat[u][v] * inv[v][q];
                        }
                    }
                }
            }
            (math::sqrt(cov[0][0]), math::sqrt(cov[1][1]))
        }
        None => (f64::INFINITY, f64::INFINITY),
    };
    let rate = math::exp(theta[1]);
    let c = options.crossover_multiple;
    let pairs = || cells.iter().zip(ev.residuals.iter().copied());
    let rmse_log = weighted_rmse(pairs()).unwrap_or(0.0);
    let rmse_small = weighted_rmse(pairs().filter(|(cell, _)| cell.scaled.is_some_and(|u| u < c)));
    let rmse_tail = weighted_rmse(pairs().filter(|(cell, _)| cell.scaled.is_some_and(|u| u >= c)));
    let rmse_log_survival = weighted_rmse(cells.iter().filter_map(|cell| {
        let m = eval_model(family, theta[0], rate, cell.x, cell.t);
        (m < 1.0).then(|| (cell, math::ln_1p(-m) - math::ln_1p(-cell.w)))
    }));
    Ok(FitResult {
        family,
        wing,
        market: surface.market.clone(),
        shape: theta[0],
        rate,
        shape_stderr,
        rate_stderr: rate * ln_rate_stderr,
        iterations,
        at_bound: theta[0] <= lo || theta[0] >= hi,
        cells_used: cells.len(),
        cells_excluded: excluded,
        horizons_used: horizons.len(),
        objective: ev.objective,
        rmse_log,
        rmse_small,
        rmse_tail,
        crossover_multiple: c,
        rmse_log_survival,
        stderr_method: "HC3 sandwich around the Gauss-Newton Hessian; rate error by the delta method".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow {
    pub multiple: f64,
    pub small_cells: usize,
    pub tail_cells: usize,
    /// Regional RMSE of `ln W` under the two global fits.
    pub weibull_small: Option<f64>,
    pub student_small: Option<f64>,
    pub weibull_tail: Option<f64>,
    pub student_tail: Option<f64>,
    /// RMSE of the two-piece model: Weibull refitted below the boundary,
    /// Student refitted above it. `None` when either piece cannot be fitted.
    pub mixed_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub wing: Wing,
    pub rows: Vec<CrossoverRow>,
    pub best_multiple: f64,
    pub best_mixed_rmse: f64,
    /// Regional RMSE of each family refitted on its own region at the best
    /// boundary, `[weibull, student]`.
    pub small_region_rmse: [Option<f64>; 2],
    pub tail_region_rmse: [Option<f64>; 2],
    /// Family with the lower regional RMSE in each region at the best
    /// boundary; global fits decide when a regional refit fails.
    pub small_winner: Option<Family>,
    pub tail_winner: Option<Family>,
    /// Sweep values whose small or tail region was empty or unfittable.
    pub skipped: Vec<f64>,
}

/// Default boundary sweep: 0.5 to 10 `v_t` in steps of 0.25.
pub fn default_sweep() -> Vec<f64> {
    (2..=40).map(|k| k as f64 * 0.25).collect()
}

fn winner(w: Option<f64>, s: Option<f64>) -> Option<Family> {
    match (w, s) {
        (Some(w), Some(s)) => Some(if w <= s { Family::Weibull } else { Family::Student }),
        _ => None,
    }
}

/// Regional comparison of a Weibull and a Student fit of the same wing,
/// and the boundary `c v_t` that best splits the surface into a Weibull
/// core and a Student tail.
pub fn crossover_report(
    surface: &FptSurface,
    weibull: &FitResult,
    student: &FitResult,
    sweep: &[f64],
) -> Result<CrossoverReport> {
    if weibull.family != Family::Weibull || student.family != Family::Student {
        return Err(Error::InvalidInput("crossover needs a weibull and a student fit".into()));
    }
    if weibull.wing != student.wing {
        return Err(Error::InvalidInput("fits belong to different wings".into()));
    }
    let wing = weibull.wing;
    let (cells, _) = usable_cells(surface, wing, None, Some((0.0, f64::INFINITY)));
    if cells.is_empty() {
        return Err(Error::InsufficientData("no cells with a defined v_t".into()));
    }
    let resid = |f: &FitResult, c: &Cell| ln_model(f.family, f.shape, f.rate, c.x, c.t) - math::ln(c.w);
    let rw: Vec<f64> = cells.iter().map(|c| resid(weibull, c)).collect();
    let rs: Vec<f64> = cells.iter().map(|c| resid(student, c)).collect();
    let total_weight: f64 = cells.iter().map(|c| c.weight).sum();
    let piece = |family: Family, start: &FitResult, range: (f64, f64)| {
        let options = FitOptions { scaled_range: Some(range), start: Some((start.shape, start.rate)), ..FitOptions::default() };
        fit_model(surface, family, wing, &options).ok()
    };

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &m in sweep {
        let small: Vec<bool> = cells.iter().map(|c| c.scaled.unwrap() < m).collect();
        let region = |r: &[f64], keep: bool| {
            weighted_rmse(cells.iter().zip(r).zip(&small).filter(|(_, s)| **s == keep).map(|((c, r), _)| (c, *r)))
        };
        let small_cells = small.iter().filter(|s| **s).count();
        let mixed_rmse = match (piece(Family::Weibull, weibull, (0.0, m)), piece(Family::Student, student, (m, f64::INFINITY))) {
            (Some(core), Some(tail)) => {
                // objectives share the weight normalisation only within a piece
                let ssr = |f: &FitResult, keep: bool| -> f64 {
                    cells
                        .iter()
                        .zip(&small)
                        .filter(|(_, s)| **s == keep)
                        .map(|(c, _)| {
                            let r = ln_model(f.family, f.shape, f.rate, c.x, c.t) - math::ln(c.w);
                            c.weight * r * r
                        })
                        .sum()
                };
                Some(math::sqrt((ssr(&core, true) + ssr(&tail, false)) / total_weight))
            }
            _ => None,
        };
        let row = CrossoverRow {
            multiple: m,
            small_cells,
            tail_cells: cells.len() - small_cells,
            weibull_small: region(&rw, true),
            student_small: region(&rs, true),
            weibull_tail: region(&rw, false),
            student_tail: region(&rs, false),
            mixed_rmse,
        };
        if row.mixed_rmse.is_none() {
            skipped.push(m);
        }
        rows.push(row);
    }
    let best = rows
        .iter()
        .filter_map(|r| r.mixed_rmse.map(|e| (r, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(r, _)| *r)
        .ok_or_else(|| Error::InsufficientData("no sweep value leaves two fittable regions".into()))?;
    let m = best.multiple;
    let regional = |family: Family, start: &FitResult, range: (f64, f64)| piece(family, start, range).map(|f| f.rmse_log);
    let small_region_rmse = [regional(Family::Weibull, weibull, (0.0, m)), regional(Family::Student, student, (0.0, m))];
    let tail_region_rmse =
        [regional(Family::Weibull, weibull, (m, f64::INFINITY)), regional(Family::Student, student, (m, f64::INFINITY))];
    let pick = |r: [Option<f64>; 2], global: (Option<f64>, Option<f64>)| {
        winner(r[0], r[1]).or_else(|| winner(global.0, global.1))
    };
    Ok(CrossoverReport {
        wing,
        best_multiple: m,
        best_mixed_rmse: best.mixed_rmse.unwrap_or(f64::NAN),
        small_winner: pick(small_region_rmse, (best.weibull_small, best.student_small)),
        tail_winner: pick(tail_region_rmse, (best.weibull_tail, best.student_tail)),
        small_region_rmse,
        tail_region_rmse,
        rows,
        skipped,
    })
}
