//! Shuffle surrogates separating the roles of return ordering and
//! inter-trade-time ordering.
//!
//! Each path is shuffled independently with its own random stream
//! (`seed`, stream = replicate/path index), using an explicit Fisher–Yates
//! permutation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimator::{estimate_fpt, FptAccumulator, FptSurface, HorizonGrid, LevelGrid, Wing};
use crate::ingest::ReturnPath;
use crate::math;
use crate::rng::{replicate_stream, stream_rng, RNG_ALGORITHM};
use crate::scaling::{decay_exponent, reference_volatility, scale_time, DEFAULT_DECAY_WINDOW, REFERENCE_HORIZON_MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Permute return increments, keep the inter-trade durations.
    ShuffleReturns,
    /// Permute inter-trade durations, keep the increment sequence.
    ShuffleTimes,
}

impl SurrogateKind {
    pub fn name(self) -> &'static str {
        match self {
            SurrogateKind::ShuffleReturns => "shuffle_returns",
            SurrogateKind::ShuffleTimes => "shuffle_times",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub kind: SurrogateKind,
    pub seed: u64,
}

fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Shuffles one path; `index` is its position in the ensemble.
pub fn shuffle_path(path: &ReturnPath, kind: SurrogateKind, seed: u64, replicate: u32, index: usize) -> ReturnPath {
    let mut rng = stream_rng(seed, replicate_stream(replicate, index as u64));
    match kind {
        SurrogateKind::ShuffleReturns => {
            let mut inc = path.increments();
            fisher_yates(&mut inc, &mut rng);
            let mut returns = Vec::with_capacity(path.returns.len());
            let mut x = 0.0;
            returns.push(x);
            for d in inc {
                x += d;
                returns.push(x);
            }
            ReturnPath { returns, ..path.clone() }
        }
        SurrogateKind::ShuffleTimes => {
            let mut dur = path.durations_ms();
            fisher_yates(&mut dur, &mut rng);
            let mut offsets_ms = Vec::with_capacity(path.offsets_ms.len());
            let mut t = 0;
            offsets_ms.push(t);
            for d in dur {
                t += d;
                offsets_ms.push(t);
            }
            ReturnPath { offsets_ms, ..path.clone() }
        }
    }
}

fn shuffle_all(paths: &[ReturnPath], kind: SurrogateKind, seed: u64, replicate: u32) -> Vec<ReturnPath> {
    paths.iter().enumerate().map(|(i, p)| shuffle_path(p, kind, seed, replicate, i)).collect()
}

pub fn shuffle_returns(paths: &[ReturnPath], seed: u64) -> Vec<ReturnPath> {
    shuffle_all(paths, SurrogateKind::ShuffleReturns, seed, 0)
}

pub fn shuffle_times(paths: &[ReturnPath], seed: u64) -> Vec<ReturnPath> {
    shuffle_all(paths, SurrogateKind::ShuffleTimes, seed, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub decay_window: (f64, f64),
    pub reference_ms: i64,
    /// Family-wise significance level for flagging a change.
    pub alpha: f64,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self { decay_window: DEFAULT_DECAY_WINDOW, reference_ms: REFERENCE_HORIZON_MS, alpha: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellChange {
    pub wing: Wing,
    pub x: f64,
    pub t_seconds: f64,
    pub original: f64,
    pub surrogate: f64,
    pub diff: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailShape {
    pub wing: Wing,
    pub t_seconds: f64,
    /// R^2 of `ln W` against `x` over cells with `|x| >= v_t`.
    pub exponential_r2: f64,
    /// R^2 of `ln W` against `ln |x|` over the same cells.
    pub power_law_r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecay {
    pub wing: Wing,
    pub level: f64,
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSummary {
    pub cells: usize,
    pub max_abs_z: f64,
    pub critical_z: f64,
    pub significant_cells: usize,
    pub significant_change: bool,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDiagnostics {
    pub tail_shape: Vec<TailShape>,
    pub decay: Vec<LevelDecay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub spec: SurrogateSpec,
    pub rng: String,
    pub original: FptSurface,
    pub replicates: Vec<FptSurface>,
    pub pooled: FptSurface,
    pub changes: Vec<CellChange>,
    pub summary: ChangeSummary,
    pub original_diagnostics: SurfaceDiagnostics,
    pub pooled_diagnostics: SurfaceDiagnostics,
}

/// Tail linearity and survival decay diagnostics for one surface.
pub fn diagnose(surface: &FptSurface, options: &ExperimentOptions) -> SurfaceDiagnostics {
    let mut tail_shape = Vec::new();
    for wing in Wing::BOTH {
        for j in 0..surface.horizons.len() {
            let Some(vt) = surface.vt[j] else { continue };
            let (mut xs, mut lx, mut ly) = (Vec::new(), Vec::new(), Vec::new());
            for (i, &x) in surface.levels.wing(wing).iter().enumerate() {
                match surface.value(wing, i, j) {
                    Some(w) if w > 0.0 && x.abs() >= vt => {
                        xs.push(x.abs());
                        lx.push(math::ln(x.abs()));
                        ly.push(math::ln(w));
                    }
                    _ => {}
                }
            }
            if xs.len() >= 3 {
                let e = math::fit_line(&xs, &ly);
                let p = math::fit_line(&lx, &ly);
                if let (Some(e), Some(p)) = (e, p) {
                    tail_shape.push(TailShape {
                        wing,
                        t_seconds: surface.horizons.seconds(j),
                        exponential_r2: e.r_squared,
                        power_law_r2: p.r_squared,
                        points: xs.len(),
                    });
                }
            }
        }
    }
    let mut decay = Vec::new();
    if let Ok(v0) = reference_volatility(surface, options.reference_ms) {
        for wing in Wing::BOTH {
            if let Ok(curves) = scale_time(surface, wing, v0) {
                for c in curves {
                    if let Ok(f) = decay_exponent(&c, options.decay_window) {
                        decay.push(LevelDecay {
                            wing,
                            level: c.label.level.unwrap_or(0.0),
                            slope: f.slope,
                            stderr: f.stderr,
                            points: f.points,
                        });
                    }
                }
            }
        }
    }
    SurfaceDiagnostics { tail_shape, decay }
}

/// Cell-by-cell comparison with `z = diff / sqrt(se_a^2 + se_b^2)`.
pub fn compare_surfaces(original: &FptSurface, other: &FptSurface, alpha: f64) -> (Vec<CellChange>, ChangeSummary) {
    let mut changes = Vec::new();
    for wing in Wing::BOTH {
        for (i, &x) in original.levels.wing(wing).iter().enumerate() {
            for j in 0..original.horizons.len() {
                let (Some(a), Some(b)) = (original.value(wing, i, j), other.value(wing, i, j)) else { continue };
                let na = original.count(wing, i, j) as f64;
                let nb = other.count(wing, i, j) as f64;
                let se = math::sqrt(a * (1.0 - a) / na + b * (1.0 - b) / nb);
                let diff = b - a;
                let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY.copysign(diff) };
                changes.push(CellChange { wing, x, t_seconds: original.horizons.seconds(j), original: a, surrogate: b, diff, z });
            }
        }
    }
    let cells = changes.len();
    let critical_z = if cells > 0 { math::normal_isf(alpha / (2.0 * cells as f64)) } else { f64::INFINITY };
    let max_abs_z = changes.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    let significant_cells = changes.iter().filter(|c| c.z.abs() > critical_z).count();
    let significant_change = significant_cells > 0;
    let verdict = if significant_change {
        format!("significant change in {significant_cells} of {cells} cells")
    } else {
        String::from("no significant change")
    };
    (changes, ChangeSummary { cells, max_abs_z, critical_z, significant_cells, significant_change, verdict })
}

/// Surfaces of the original ensemble and `replicates` surrogates, the
/// pooled surrogate surface and their comparison.
pub fn surrogate_experiment(
    paths: &[ReturnPath],
    levels: &LevelGrid,
    horizons: &HorizonGrid,
    spec: SurrogateSpec,
    replicates: u32,
    options: &ExperimentOptions,
) -> Result<SurrogateReport> {
    if replicates == 0 {
        return Err(crate::Error::InvalidInput("at least one surrogate replicate is required".into()));
    }
    let original = estimate_fpt(paths, levels, horizons);
    let mut pooled_acc = FptAccumulator::new(levels, horizons);
    let mut surfaces = Vec::with_capacity(replicates as usize);
    for r in 0..replicates {
        let shuffled = shuffle_all(paths, spec.kind, spec.seed, r);
        let acc = FptAccumulator::from_paths(levels, horizons, &shuffled);
        pooled_acc.merge(&acc);
        surfaces.push(acc.finish(original.market.clone()));
    }
    let pooled = pooled_acc.finish(original.market.clone());
    Ok(assemble_report(spec, original, surfaces, pooled, options))
}

/// Builds the report from surfaces computed elsewhere (for example by a
/// parallel driver).
pub fn assemble_report(
    spec: SurrogateSpec,
    original: FptSurface,
    replicates: Vec<FptSurface>,
    pooled: FptSurface,
    options: &ExperimentOptions,
) -> SurrogateReport {
    let (changes, summary) = compare_surfaces(&original, &pooled, options.alpha);
    SurrogateReport {
        spec,
        rng: RNG_ALGORITHM.into(),
        original_diagnostics: diagnose(&original, options),
        pooled_diagnostics: diagnose(&pooled, options),
        original,
        replicates,
        pooled,
        changes,
        summary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::vec;

    fn dyadic_path(incs: &[f64], durs: &[i64]) -> ReturnPath {
        let mut offs = vec![0];
        let mut rets = vec![0.0];
        for (d, t) in incs.iter().zip(durs) {
            rets.push(rets.last().unwrap() + d);
            offs.push(offs.last().unwrap() + t);
        }
        ReturnPath::new(0, offs, rets, 0).unwrap()
    }

    fn sorted<T: PartialOrd + Copy>(v: &[T]) -> Vec<T> {
        let mut v = v.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn single_increment_is_unchanged() {
        let p = dyadic_path(&[0.25], &[1000]);
        assert_eq!(shuffle_returns(core::slice::from_ref(&p), 1)[0], p);
        assert_eq!(shuffle_times(core::slice::from_ref(&p), 1)[0], p);
    }

    #[test]
    fn equal_durations_are_unchanged_by_time_shuffle() {
        let p = dyadic_path(&[0.25, -0.5, 0.125, 0.0625], &[1000; 4]);
        assert_eq!(shuffle_times(core::slice::from_ref(&p), 3)[0], p);
    }

    #[test]
    fn shuffles_preserve_their_invariants() {
        let p = dyadic_path(&[0.25, -0.5, 0.125, 0.0625], &[1000, 3000, 500, 7000]);
        for seed in 0..50 {
            let r = &shuffle_returns(core::slice::from_ref(&p), seed)[0];
            assert_eq!(sorted(&r.increments()), sorted(&p.increments()));
            assert_eq!(r.offsets_ms, p.offsets_ms);
            assert_eq!(r.final_return(), p.final_return());
            let t = &shuffle_times(core::slice::from_ref(&p), seed)[0];
            assert_eq!(t.returns, p.returns);
            assert_eq!(sorted(&t.durations_ms()), sorted(&p.durations_ms()));
            assert_eq!(t.span_ms(), p.span_ms());
        }
    }

    #[test]
    fn shuffles_are_deterministic() {
        let p = dyadic_path(&[0.25, -0.5, 0.125, 0.0625], &[1000, 3000, 500, 7000]);
        assert_eq!(shuffle_returns(core::slice::from_ref(&p), 5), shuffle_returns(core::slice::from_ref(&p), 5));
        assert_eq!(shuffle_times(core::slice::from_ref(&p), 5), shuffle_times(&[p], 5));
    }

    #[test]
    fn permutations_are_uniform() {
        let p = dyadic_path(&[1.0, 2.0, 4.0], &[1, 1, 1]);
        let trials = 6000u64;
        let mut freq: BTreeMap<Vec<i64>, u64> = BTreeMap::new();
        for seed in 0..trials {
            let s = &shuffle_returns(core::slice::from_ref(&p), seed)[0];
            let key: Vec<i64> = s.increments().iter().map(|&d| d as i64).collect();
            *freq.entry(key).or_default() += 1;
        }
        assert_eq!(freq.len(), 6);
        let p6 = 1.0 / 6.0;
        let se = math::sqrt(p6 * (1.0 - p6) / trials as f64);
        for &c in freq.values() {
            assert!((c as f64 / trials as f64 - p6).abs() <= 3.0 * se);
        }
    }

    #[test]
    fn identical_surfaces_show_no_change() {
        let paths = vec![dyadic_path(&[0.25, -0.5, 0.125], &[1000, 1000, 1000]); 4];
        let levels = LevelGrid::symmetric(&[0.1, 0.3]).unwrap();
        let horizons = HorizonGrid::from_seconds(&[1, 3]).unwrap();
        let s = estimate_fpt(&paths, &levels, &horizons);
        let (_, sum) = compare_surfaces(&s, &s, 0.01);
        assert!(!sum.significant_change);
        assert_eq!(sum.verdict, "no significant change");
    }

    #[test]
    fn zero_replicates_is_an_error() {
        let paths = vec![dyadic_path(&[0.25, -0.5], &[1000, 1000])];
        let levels = LevelGrid::symmetric(&[0.1]).unwrap();
        let horizons = HorizonGrid::from_seconds(&[1]).unwrap();
        let spec = SurrogateSpec { kind: SurrogateKind::ShuffleReturns, seed: 1 };
        assert!(surrogate_experiment(&paths, &levels, &horizons, spec, 0, &ExperimentOptions::default()).is_err());
        let r = surrogate_experiment(&paths, &levels, &horizons, spec, 2, &ExperimentOptions::default()).unwrap();
        assert_eq!(r.replicates.len(), 2);
    }
}
