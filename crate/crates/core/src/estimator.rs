//! Empirical first-passage probability `W(x,t)`, survival `S = 1 - W`, the
//! horizon volatility `v_t` and the driftless Wiener baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ReturnPath;
use crate::math;
use crate::MS_PER_SEC;

/// Paths folded per partial accumulator. Fixed so that sequential and
/// parallel reductions add floating-point sums in the same order.
pub const REDUCTION_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wing {
    Positive,
    Negative,
}

impl Wing {
    pub const BOTH: [Wing; 2] = [Wing::Positive, Wing::Negative];

    pub fn sign(self) -> f64 {
        match self {
            Wing::Positive => 1.0,
            Wing::Negative => -1.0,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Wing::Positive => "+",
            Wing::Negative => "-",
        }
    }
}

/// Signed target levels, split into wings. Each wing is ordered by
/// increasing `|x|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    positive: Vec<f64>,
    negative: Vec<f64>,
}

impl LevelGrid {
    pub fn new(levels: &[f64]) -> Result<Self> {
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for &x in levels {
            if !x.is_finite() || x == 0.0 {
                return Err(Error::InvalidInput(format!("level {x} is zero or not finite")));
            }
            if x > 0.0 { positive.push(x) } else { negative.push(x) }
        }
        positive.sort_by(f64::total_cmp);
        negative.sort_by(|a, b| b.total_cmp(a));
        if positive.windows(2).any(|w| w[0] == w[1]) || negative.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate levels".into()));
        }
        if positive.is_empty() && negative.is_empty() {
            return Err(Error::InvalidInput("level grid is empty".into()));
        }
        Ok(Self { positive, negative })
    }

    /// Mirrored levels `±m` for every magnitude.
    pub fn symmetric(magnitudes: &[f64]) -> Result<Self> {
        let mut all = Vec::with_capacity(2 * magnitudes.len());
        for &m in magnitudes {
            all.push(m.abs());
            all.push(-m.abs());
        }
        Self::new(&all)
    }

    /// `count` log-spaced magnitudes over `[lo, hi] * v_ref`, both wings.
    pub fn relative(v_ref: f64, lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(v_ref > 0.0) {
            return Err(Error::DegenerateScale(format!("reference volatility {v_ref} is not positive")));
        }
        if !(lo > 0.0 && hi > lo) || count < 2 {
            return Err(Error::InvalidInput("relative grid needs 0 < lo < hi and count >= 2".into()));
        }
        let mags: Vec<f64> = math::log_space(lo, hi, count).into_iter().map(|u| u * v_ref).collect();
        Self::symmetric(&mags)
    }

    pub fn wing(&self, wing: Wing) -> &[f64] {
        match wing {
            Wing::Positive => &self.positive,
            Wing::Negative => &self.negative,
        }
    }

    /// Same grid with every level multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            positive: self.positive.iter().map(|x| x * c).collect(),
            negative: self.negative.iter().map(|x| x * c).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonGrid {
    horizons_ms: Vec<i64>,
}

impl HorizonGrid {
    pub const DEFAULT_SECONDS: [i64; 7] = [60, 300, 900, 1800, 3600, 5400, 7200];

    pub fn new(horizons_ms: Vec<i64>) -> Result<Self> {
        if horizons_ms.is_empty() {
            return Err(Error::InvalidInput("horizon grid is empty".into()));
        }
        if horizons_ms[0] <= 0 || horizons_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("horizons must be positive and strictly increasing".into()));
        }
        Ok(Self { horizons_ms })
    }

    pub fn from_seconds(seconds: &[i64]) -> Result<Self> {
        Self::new(seconds.iter().map(|s| s * MS_PER_SEC).collect())
    }

    pub fn default_minutes() -> Self {
        Self::from_seconds(&Self::DEFAULT_SECONDS).expect("static grid")
    }

    pub fn ms(&self) -> &[i64] {
        &self.horizons_ms
    }

    pub fn seconds(&self, j: usize) -> f64 {
        self.horizons_ms[j] as f64 / MS_PER_SEC as f64
    }

    pub fn len(&self) -> usize {
        self.horizons_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons_ms.is_empty()
    }

    pub fn index_of_ms(&self, t_ms: i64) -> Option<usize> {
        self.horizons_ms.iter().position(|&h| h == t_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// First-passage probability `W`.
    Fpt,
    /// Survival probability `S = 1 - W`.
    Survival,
}

/// Per-wing cells, row-major `[level][horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WingSurface {
    pub values: Vec<f64>,
    pub n: Vec<u64>,
    pub crossings: Vec<u64>,
}

impl WingSurface {
    fn zeros(cells: usize) -> Self {
        Self { values: alloc::vec![0.0; cells], n: alloc::vec![0; cells], crossings: alloc::vec![0; cells] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FptSurface {
    pub market: String,
    pub quantity: Quantity,
    pub levels: LevelGrid,
    pub horizons: HorizonGrid,
    pub positive: WingSurface,
    pub negative: WingSurface,
    /// `v_t` per horizon; `None` when fewer than two paths cover it.
    pub vt: Vec<Option<f64>>,
    /// Cells adjusted by the monotone-in-time pooling (non-zero only when
    /// paths have unequal spans).
    pub pooled_cells: usize,
}

impl FptSurface {
    pub fn wing(&self, wing: Wing) -> &WingSurface {
        match wing {
            Wing::Positive => &self.positive,
            Wing::Negative => &self.negative,
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.horizons.len() + j
    }

    /// Estimate at `(level i, horizon j)`, or `None` for an empty cell.
    pub fn value(&self, wing: Wing, i: usize, j: usize) -> Option<f64> {
        let k = self.idx(i, j);
        let ws = self.wing(wing);
        (ws.n[k] > 0).then(|| ws.values[k])
    }

    pub fn count(&self, wing: Wing, i: usize, j: usize) -> u64 {
        self.wing(wing).n[self.idx(i, j)]
    }

    /// Binomial standard error of a cell.
    pub fn stderr(&self, wing: Wing, i: usize, j: usize) -> Option<f64> {
        let n = self.count(wing, i, j);
        self.value(wing, i, j).map(|p| math::sqrt(p * (1.0 - p) / n as f64))
    }

    /// Iterates non-empty cells as `(i, j, x, t_seconds, value, n)`.
    pub fn cells(&self, wing: Wing) -> impl Iterator<Item = (usize, usize, f64, f64, f64, u64)> + '_ {
        let levels = self.levels.wing(wing);
        let h = self.horizons.len();
        (0..levels.len() * h).filter_map(move |k| {
            let (i, j) = (k / h, k % h);
            let ws = self.wing(wing);
            (ws.n[k] > 0).then(|| (i, j, levels[i], self.horizons.seconds(j), ws.values[k], ws.n[k]))
        })
    }

    /// Checks range and monotonicity of a first-passage surface; returns the
    /// first violation.
    pub fn check_invariants(&self) -> core::result::Result<(), String> {
        let h = self.horizons.len();
        for wing in Wing::BOTH {
            let ws = self.wing(wing);
            let nl = self.levels.wing(wing).len();
            for i in 0..nl {
                for j in 0..h {
                    let Some(v) = self.value(wing, i, j) else { continue };
                    if !(0.0..=1.0).contains(&v) {
                        return Err(format!("{wing:?} cell ({i},{j}) = {v} out of range"));
                    }
                    let sign = if self.quantity == Quantity::Fpt { 1.0 } else { -1.0 };
                    if j + 1 < h && ws.n[self.idx(i, j + 1)] > 0 {
                        let next = ws.values[self.idx(i, j + 1)];
                        if sign * (next - v) < 0.0 {
                            return Err(format!("{wing:?} level {i}: not monotone in t at horizon {j}"));
                        }
                    }
                    if i + 1 < nl && ws.n[self.idx(i + 1, j)] > 0 {
                        let next = ws.values[self.idx(i + 1, j)];
                        if sign * (next - v) > 0.0 {
                            return Err(format!("{wing:?} horizon {j}: not monotone in |x| at level {i}"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// First offset at which the path strictly exceeds `level` (above for
/// `level > 0`, below for `level < 0`). Only trade offsets are examined.
pub fn first_crossing(path: &ReturnPath, level: f64) -> Option<i64> {
    path.returns
        .iter()
        .position(|&x| if level > 0.0 { x > level } else { x < level })
        .map(|k| path.offsets_ms[k])
}

/// Order-independent integer counts plus ordered floating sums for `v_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FptAccumulator {
    levels: LevelGrid,
    horizons: HorizonGrid,
    crossings_pos: Vec<u64>,
    crossings_neg: Vec<u64>,
    eligible: Vec<u64>,
    mean_x: Vec<f64>,
    m2_x: Vec<f64>,
    scratch: Vec<f64>,
}

impl FptAccumulator {
    pub fn new(levels: &LevelGrid, horizons: &HorizonGrid) -> Self {
        let h = horizons.len();
        Self {
            levels: levels.clone(),
            horizons: horizons.clone(),
            crossings_pos: alloc::vec![0; levels.positive.len() * h],
            crossings_neg: alloc::vec![0; levels.negative.len() * h],
            eligible: alloc::vec![0; h],
            mean_x: alloc::vec![0.0; h],
            m2_x: alloc::vec![0.0; h],
            scratch: Vec::new(),
        }
    }

    pub fn add_path(&mut self, path: &ReturnPath) {
        let span = path.span_ms();
        let hs = self.horizons.ms();
        let usable = hs.partition_point(|&t| t <= span);
        if usable == 0 {
            return;
        }
        for j in 0..usable {
            let x = path.value_at(hs[j]);
            self.eligible[j] += 1;
            let d = x - self.mean_x[j];
            self.mean_x[j] += d / self.eligible[j] as f64;
            self.m2_x[j] += d * (x - self.mean_x[j]);
        }
        // running maximum, then running minimum: first crossings by bisection
        for wing in Wing::BOTH {
            self.scratch.clear();
            let mut ext = 0.0f64;
            for &x in &path.returns {
                ext = if wing == Wing::Positive { ext.max(x) } else { ext.min(x) };
                self.scratch.push(ext);
            }
            let (levels, counts) = match wing {
                Wing::Positive => (&self.levels.positive, &mut self.crossings_pos),
                Wing::Negative => (&self.levels.negative, &mut self.crossings_neg),
            };
            for (i, &level) in levels.iter().enumerate() {
                let k = match wing {
                    Wing::Positive => self.scratch.partition_point(|&m| m <= level),
                    Wing::Negative => self.scratch.partition_point(|&m| m >= level),
                };
                if k == path.returns.len() {
                    // levels are ordered by |x|: no further level is reached
                    break;
                }
                let hit = path.offsets_ms[k];
                let from = hs[..usable].partition_point(|&t| t < hit);
                for j in from..usable {
                    counts[i * hs.len() + j] += 1;
                }
            }
        }
    }

    /// Adds `other` into `self`; call in a fixed order for reproducible sums.
    pub fn merge(&mut self, other: &FptAccumulator) {
        debug_assert_eq!(self.levels, other.levels);
        debug_assert_eq!(self.horizons, other.horizons);
        for (a, b) in self.crossings_pos.iter_mut().zip(&other.crossings_pos) {
            *a += b;
        }
        for (a, b) in self.crossings_neg.iter_mut().zip(&other.crossings_neg) {
            *a += b;
        }
        for j in 0..self.eligible.len() {
            let (na, nb) = (self.eligible[j] as f64, other.eligible[j] as f64);
            if nb == 0.0 {
                continue;
            }
            let n = na + nb;
            let delta = other.mean_x[j] - self.mean_x[j];
            self.mean_x[j] += delta * nb / n;
            self.m2_x[j] += other.m2_x[j] + delta * delta * na * nb / n;
            self.eligible[j] += other.eligible[j];
        }
    }

    /// Folds a slice of paths chunk by chunk, in the canonical order.
    pub fn from_paths(levels: &LevelGrid, horizons: &HorizonGrid, paths: &[ReturnPath]) -> Self {
        let mut total = Self::new(levels, horizons);
        for chunk in paths.chunks(REDUCTION_CHUNK) {
            let mut part = Self::new(levels, horizons);
            for p in chunk {
                part.add_path(p);
            }
            total.merge(&part);
        }
        total
    }

    pub fn finish(&self, market: impl Into<String>) -> FptSurface {
        let h = self.horizons.len();
        let mut pooled = 0;
        let mut wing_surface = |counts: &[u64], nl: usize| {
            let mut ws = WingSurface::zeros(nl * h);
            for i in 0..nl {
                let cols: Vec<usize> = (0..h).filter(|&j| self.eligible[j] > 0).collect();
                let raw: Vec<f64> =
                    cols.iter().map(|&j| counts[i * h + j] as f64 / self.eligible[j] as f64).collect();
                let weights: Vec<f64> = cols.iter().map(|&j| self.eligible[j] as f64).collect();
                let fitted = math::isotonic_non_decreasing(&raw, &weights);
                for (c, &j) in cols.iter().enumerate() {
                    let k = i * h + j;
                    if fitted[c] != raw[c] {
                        pooled += 1;
                    }
                    ws.values[k] = fitted[c];
                    ws.n[k] = self.eligible[j];
                    ws.crossings[k] = counts[i * h + j];
                }
            }
            ws
        };
        let positive = wing_surface(&self.crossings_pos, self.levels.positive.len());
        let negative = wing_surface(&self.crossings_neg, self.levels.negative.len());
        let vt = (0..h)
            .map(|j| {
                let n = self.eligible[j];
                (n >= 2).then(|| math::sqrt(self.m2_x[j].max(0.0) / n as f64))
            })
            .collect();
        FptSurface {
            market: market.into(),
            quantity: Quantity::Fpt,
            levels: self.levels.clone(),
            horizons: self.horizons.clone(),
            positive,
            negative,
            vt,
            pooled_cells: pooled,
        }
    }
}

/// `W(x_i, t_j)` as the fraction of paths covering `t_j` whose first
/// crossing of `x_i` happens no later than `t_j`.
pub fn estimate_fpt(paths: &[ReturnPath], levels: &LevelGrid, horizons: &HorizonGrid) -> FptSurface {
    FptAccumulator::from_paths(levels, horizons, paths).finish("")
}

/// `S = 1 - W` with counts carried through.
pub fn survival(surface: &FptSurface) -> FptSurface {
    let flip = |ws: &WingSurface| WingSurface {
        values: ws.values.iter().zip(&ws.n).map(|(&v, &n)| if n > 0 { 1.0 - v } else { 0.0 }).collect(),
        ..ws.clone()
    };
    let quantity = match surface.quantity {
        Quantity::Fpt => Quantity::Survival,
        Quantity::Survival => Quantity::Fpt,
    };
    FptSurface { quantity, positive: flip(&surface.positive), negative: flip(&surface.negative), ..surface.clone() }
}

/// Population standard deviation of `X(t)` across the paths covering `t`.
pub fn stddev_at_horizon(paths: &[ReturnPath], t_ms: i64) -> Result<f64> {
    let xs: Vec<f64> = paths.iter().filter(|p| p.span_ms() >= t_ms).map(|p| p.value_at(t_ms)).collect();
    if xs.len() < 2 {
        return Err(Error::InsufficientData(format!("{} paths cover horizon {t_ms} ms", xs.len())));
    }
    Ok(math::population_std(xs.iter().copied()))
}

/// `erfc(|x| / sqrt(2 sigma^2 t))` with `sigma` per square-root second.
pub fn wiener_fpt(x: f64, t_seconds: f64, sigma: f64) -> f64 {
    math::erfc(x.abs() / math::sqrt(2.0 * sigma * sigma * t_seconds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCell {
    pub x: f64,
    pub t_seconds: f64,
    pub scaled_x: f64,
    pub w: f64,
    pub w_gauss: f64,
    pub gap: f64,
    pub stderr: f64,
    /// `gap / stderr`.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    /// Row-major `[level][horizon]`; `None` for empty cells or missing `v_t`.
    pub positive: Vec<Option<GapCell>>,
    pub negative: Vec<Option<GapCell>>,
    pub horizons: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub cells: usize,
    pub mean_gap: f64,
    pub positive_cells: usize,
}

impl GapTable {
    pub fn wing(&self, wing: Wing) -> &[Option<GapCell>] {
        match wing {
            Wing::Positive => &self.positive,
            Wing::Negative => &self.negative,
        }
    }

    pub fn cell(&self, wing: Wing, i: usize, j: usize) -> Option<&GapCell> {
        self.wing(wing)[i * self.horizons + j].as_ref()
    }

    /// Gap statistics over cells whose `|x| / v_t` satisfies `keep`.
    pub fn region(&self, wing: Wing, keep: impl Fn(f64) -> bool) -> RegionSummary {
        let cells: Vec<&GapCell> = self.wing(wing).iter().flatten().filter(|c| keep(c.scaled_x)).collect();
        let n = cells.len();
        RegionSummary {
            cells: n,
            mean_gap: if n == 0 { 0.0 } else { cells.iter().map(|c| c.gap).sum::<f64>() / n as f64 },
            positive_cells: cells.iter().filter(|c| c.gap > 0.0).count(),
        }
    }

    /// Large targets (`|x| >= v_t`) and small targets (`|x| <= 0.1 v_t`).
    pub fn sign_pattern(&self, wing: Wing) -> (RegionSummary, RegionSummary) {
        (self.region(wing, |u| u >= 1.0), self.region(wing, |u| u <= 0.1))
    }
}

/// `W - W_G` per cell, with `W_G` using `sigma = v_t / sqrt(t)` at each
/// horizon.
pub fn gaussian_gap(surface: &FptSurface) -> GapTable {
    let h = surface.horizons.len();
    let table = |wing: Wing| {
        let levels = surface.levels.wing(wing);
        let mut out = alloc::vec![None; levels.len() * h];
        for (i, &x) in levels.iter().enumerate() {
            for j in 0..h {
                let (Some(w), Some(Some(vt))) = (surface.value(wing, i, j), surface.vt.get(j).copied()) else {
                    continue;
                };
                if vt <= 0.0 {
                    continue;
                }
                let t = surface.horizons.seconds(j);
                let w_gauss = wiener_fpt(x, t, vt / math::sqrt(t));
                let n = surface.count(wing, i, j) as f64;
                let mut se = math::sqrt(w * (1.0 - w) / n);
                if se == 0.0 {
                    se = math::sqrt(w_gauss * (1.0 - w_gauss) / n);
                }
                let gap = w - w_gauss;
                let z = if se > 0.0 { gap / se } else { 0.0 };
                out[i * h + j] =
                    Some(GapCell { x, t_seconds: t, scaled_x: x.abs() / vt, w, w_gauss, gap, stderr: se, z });
            }
        }
        out
    };
    GapTable { positive: table(Wing::Positive), negative: table(Wing::Negative), horizons: h }
}

/// Counts cells whose estimate lies within `k` standard errors of an
/// analytic `oracle(x, t_seconds)`; the standard error uses the oracle
/// probability. Returns `(agreeing, non-empty)`.
pub fn oracle_agreement(surface: &FptSurface, k: f64, oracle: impl Fn(f64, f64) -> f64) -> (usize, usize) {
    let (mut ok, mut total) = (0, 0);
    for wing in Wing::BOTH {
        for (_, _, x, t, w, n) in surface.cells(wing) {
            let p = oracle(x, t);
            let se = math::sqrt(p * (1.0 - p) / n as f64);
            total += 1;
            if (w - p).abs() <= k * se {
                ok += 1;
            }
        }
    }
    (ok, total)
}
