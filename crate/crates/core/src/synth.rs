//! Seeded synthetic tick paths with known first-passage behaviour.
//!
//! Path `i` is laid out as one trading session on local day
//! `start_day + i` and draws from its own random stream, so any subset of
//! paths can be generated independently and in parallel.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::wiener_fpt;
use crate::ingest::{build_return_paths, AnchorPolicy, ReturnPath, SessionCalendar, TickRecord, TickSeries};
use crate::math;
use crate::rng::stream_rng;
use crate::MS_PER_SEC;

const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum IncrementDist {
    Gaussian,
    Laplace,
    Student { nu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ProcessFamily {
    /// Driftless Brownian motion observed at the clock times. With
    /// `continuous_monitoring`, every inter-trade interval also carries two
    /// extra ticks at the exact bridge maximum and minimum, so the
    /// trade-only estimator sees the running extremes of the continuous path.
    Wiener { continuous_monitoring: bool },
    /// iid increments with per-step variance `sigma^2 * mean step`.
    IidWalk { increments: IncrementDist },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clock", rename_all = "snake_case")]
pub enum Clock {
    Uniform { step_ms: i64 },
    Exponential { mean_ms: f64 },
}

impl Clock {
    fn mean_step_seconds(&self) -> f64 {
        match *self {
            Clock::Uniform { step_ms } => step_ms as f64 / MS_PER_SEC as f64,
            Clock::Exponential { mean_ms } => mean_ms / MS_PER_SEC as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub family: ProcessFamily,
    /// Volatility per square-root second.
    pub sigma: f64,
    pub clock: Clock,
    pub session_seconds: i64,
    pub paths: usize,
    pub seed: u64,
    pub initial_price: f64,
    /// Local day (days since 1970-01-01) of the first session.
    pub start_day: i64,
    pub open_minute: u32,
    pub trim_minutes: u32,
}

impl ProcessSpec {
    pub fn new(family: ProcessFamily, sigma: f64, clock: Clock, session_seconds: i64, paths: usize, seed: u64) -> Self {
        Self {
            family,
            sigma,
            clock,
            session_seconds,
            paths,
            seed,
            initial_price: 100.0,
            start_day: 18_262, // 2020-01-01
            open_minute: 8 * 60,
            trim_minutes: SessionCalendar::DEFAULT_TRIM_MINUTES,
        }
    }

    pub fn wiener(sigma: f64, clock: Clock, session_seconds: i64, paths: usize, seed: u64) -> Self {
        Self::new(ProcessFamily::Wiener { continuous_monitoring: false }, sigma, clock, session_seconds, paths, seed)
    }

    pub fn iid(dist: IncrementDist, sigma: f64, clock: Clock, session_seconds: i64, paths: usize, seed: u64) -> Self {
        Self::new(ProcessFamily::IidWalk { increments: dist }, sigma, clock, session_seconds, paths, seed)
    }

    pub fn with_continuous_monitoring(mut self) -> Self {
        if let ProcessFamily::Wiener { .. } = self.family {
            self.family = ProcessFamily::Wiener { continuous_monitoring: true };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma = {} must be positive", self.sigma)));
        }
        if self.paths == 0 {
            return Err(Error::InvalidInput("path count must be at least 1".into()));
        }
        if self.session_seconds <= 0 {
            return Err(Error::InvalidInput("session length must be positive".into()));
        }
        if !(self.initial_price > 0.0) {
            return Err(Error::InvalidInput("initial price must be positive".into()));
        }
        match self.clock {
            Clock::Uniform { step_ms } if step_ms <= 0 => {
                return Err(Error::InvalidInput("clock step must be positive".into()))
            }
            Clock::Exponential { mean_ms } if !(mean_ms >= 1.0) => {
                return Err(Error::InvalidInput("mean clock step must be at least 1 ms".into()))
            }
            _ => {}
        }
        if let ProcessFamily::IidWalk { increments: IncrementDist::Student { nu } } = self.family {
            if !(nu > 2.0) {
                return Err(Error::InvalidInput(format!("student nu = {nu} must exceed 2 (finite variance)")));
            }
        }
        if self.open_minute as i64 * 60 + 2 * self.trim_minutes as i64 * 60 + self.session_seconds + 60 > 86_400 {
            return Err(Error::InvalidInput("session does not fit in one day".into()));
        }
        Ok(())
    }

    /// Calendar under which every generated tick survives cleaning.
    pub fn calendar(&self) -> SessionCalendar {
        let minutes = (self.session_seconds + 59) / 60;
        let close = self.open_minute + 2 * self.trim_minutes + minutes as u32;
        SessionCalendar::every_day(self.open_minute, close).with_trim(self.trim_minutes)
    }

    fn session_start_ms(&self, index: usize) -> i64 {
        (self.start_day + index as i64) * MS_PER_DAY
            + (self.open_minute as i64 + self.trim_minutes as i64) * 60 * MS_PER_SEC
    }
}

fn standardized_draw<R: Rng + ?Sized>(dist: IncrementDist, student: Option<&StudentT<f64>>, rng: &mut R) -> f64 {
    match dist {
        IncrementDist::Gaussian => rng.sample(StandardNormal),
        IncrementDist::Laplace => {
            // inverse CDF, unit variance (scale 1/sqrt 2)
            let u: f64 = rng.random::<f64>() - 0.5;
            let a = u.abs();
            let mag = -core::f64::consts::FRAC_1_SQRT_2 * math::ln(1.0 - 2.0 * a);
            if u < 0.0 { -mag } else { mag }
        }
        IncrementDist::Student { nu } => {
            let t = student.expect("student sampler").sample(rng);
            t * math::sqrt((nu - 2.0) / nu)
        }
    }
}

fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // (0, 1]
    1.0 - rng.random::<f64>()
}

/// Ticks of session `index`, absolute epoch-millisecond timestamps.
pub fn generate_ticks(spec: &ProcessSpec, index: usize) -> Vec<TickRecord> {
    let mut rng = stream_rng(spec.seed, index as u64);
    let start = spec.session_start_ms(index);
    let end_offset = spec.session_seconds * MS_PER_SEC;

    let mut offsets = alloc::vec![0i64];
    match spec.clock {
        Clock::Uniform { step_ms } => {
            let mut t = step_ms;
            while t < end_offset {
                offsets.push(t);
                t += step_ms;
            }
        }
        Clock::Exponential { mean_ms } => {
            let mut t = 0i64;
            loop {
                let d = math::round(-mean_ms * math::ln(open_uniform(&mut rng))).max(1.0) as i64;
                t += d;
                if t >= end_offset {
                    break;
                }
                offsets.push(t);
            }
        }
    }
    offsets.push(end_offset);

    let student = match spec.family {
        ProcessFamily::IidWalk { increments: IncrementDist::Student { nu } } => {
            Some(StudentT::new(nu).expect("validated nu"))
        }
        _ => None,
    };
    let step_scale = spec.sigma * math::sqrt(spec.clock.mean_step_seconds());

    let mut points: Vec<(i64, f64)> = Vec::with_capacity(offsets.len() * 3);
    points.push((0, 0.0));
    let mut level = 0.0f64;
    for w in offsets.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dt_s = (t1 - t0) as f64 / MS_PER_SEC as f64;
        let next = match spec.family {
            ProcessFamily::Wiener { .. } => {
                let z: f64 = rng.sample(StandardNormal);
                level + spec.sigma * math::sqrt(dt_s) * z
            }
            ProcessFamily::IidWalk { increments } => level + step_scale * standardized_draw(increments, student.as_ref(), &mut rng),
        };
        if let ProcessFamily::Wiener { continuous_monitoring: true } = spec.family {
            if t1 - t0 >= 3 {
                let var = spec.sigma * spec.sigma * dt_s;
                let diff = next - level;
                let hi = 0.5 * (level + next + math::sqrt(diff * diff - 2.0 * var * math::ln(open_uniform(&mut rng))));
                let lo = 0.5 * (level + next - math::sqrt(diff * diff - 2.0 * var * math::ln(open_uniform(&mut rng))));
                let (first, second) = if rng.random::<bool>() { (hi, lo) } else { (lo, hi) };
                let third = (t1 - t0) / 3;
                points.push((t0 + third, first));
                points.push((t0 + 2 * third, second));
            }
        }
        points.push((t1, next));
        level = next;
    }

    points
        .into_iter()
        .map(|(t, l)| TickRecord::new(start + t, spec.initial_price * math::exp(l)))
        .collect()
}

/// Return path of session `index`, computed from its prices exactly as the
/// ingest pipeline would.
pub fn generate_path(spec: &ProcessSpec, index: usize) -> ReturnPath {
    let ticks = generate_ticks(spec, index);
    let series = TickSeries { segment_starts: alloc::vec![0], ..TickSeries::new("", ticks).expect("positive prices") };
    let mut built = build_return_paths(&series, AnchorPolicy::SessionStart).expect("sorted ticks");
    let mut path = built.paths.pop().expect("session has at least two ticks");
    path.session_id = index as u32;
    path
}

pub fn generate_range(spec: &ProcessSpec, range: Range<usize>) -> Vec<ReturnPath> {
    range.map(|i| generate_path(spec, i)).collect()
}

pub fn generate(spec: &ProcessSpec) -> Result<Vec<ReturnPath>> {
    spec.validate()?;
    Ok(generate_range(spec, 0..spec.paths))
}

/// All sessions as one tick series, one segment per session.
pub fn generate_tick_series(spec: &ProcessSpec, symbol: &str) -> Result<TickSeries> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut segment_starts = Vec::with_capacity(spec.paths);
    for i in 0..spec.paths {
        segment_starts.push(records.len());
        records.extend(generate_ticks(spec, i));
    }
    let mut series = TickSeries::new(symbol, records)?;
    series.segment_starts = segment_starts;
    Ok(series)
}

/// Closed-form first-passage probability; only the Wiener family has one.
pub fn analytic_fpt(spec: &ProcessSpec, x: f64, t_seconds: f64) -> Result<f64> {
    match spec.family {
        ProcessFamily::Wiener { .. } => Ok(wiener_fpt(x, t_seconds, spec.sigma)),
        ProcessFamily::IidWalk { .. } => {
            Err(Error::UnsupportedOracle("no closed-form first-passage law for iid walks".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(family: ProcessFamily) -> ProcessSpec {
        ProcessSpec::new(family, 0.01, Clock::Uniform { step_ms: 1000 }, 60, 3, 9)
    }

    #[test]
    fn same_seed_same_paths() {
        let spec = small(ProcessFamily::IidWalk { increments: IncrementDist::Student { nu: 3.5 } });
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = ProcessSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn vanishing_sigma_gives_flat_paths() {
        let spec = ProcessSpec { sigma: 1e-12, ..small(ProcessFamily::Wiener { continuous_monitoring: false }) };
        for p in generate(&spec).unwrap() {
            assert!(p.returns.iter().all(|x| x.abs() < 1e-6));
        }
    }

    #[test]
    fn uniform_clock_layout() {
        let spec = small(ProcessFamily::Wiener { continuous_monitoring: false });
        let p = generate_path(&spec, 0);
        assert_eq!(p.offsets_ms.len(), 61);
        assert_eq!(p.span_ms(), 60_000);
        let m = generate_path(&spec.clone().with_continuous_monitoring(), 0);
        assert_eq!(m.offsets_ms.len(), 181);
        assert_eq!(m.offsets_ms[1], 333);
        // grid ticks are unchanged by the bridge extremes
        for k in 0..=60 {
            assert!(m.offsets_ms.contains(&(k * 1000)));
        }
    }

    #[test]
    fn bridge_extremes_bound_their_interval() {
        let spec = small(ProcessFamily::Wiener { continuous_monitoring: true });
        let p = generate_path(&spec, 1);
        for k in 0..60 {
            let seg = &p.returns[3 * k..=3 * k + 3];
            let (a, b) = (seg[0], seg[3]);
            let hi = seg[1].max(seg[2]);
            let lo = seg[1].min(seg[2]);
            assert!(hi >= a.max(b) - 1e-15 && lo <= a.min(b) + 1e-15);
        }
    }

    #[test]
    fn exponential_clock_ends_at_session_close() {
        let spec = ProcessSpec { clock: Clock::Exponential { mean_ms: 2000.0 }, ..small(ProcessFamily::Wiener { continuous_monitoring: false }) };
        let p = generate_path(&spec, 2);
        assert_eq!(p.span_ms(), 60_000);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn ticks_survive_their_calendar() {
        let spec = small(ProcessFamily::IidWalk { increments: IncrementDist::Laplace });
        let cal = spec.calendar();
        let s = generate_tick_series(&spec, "SYN").unwrap();
        assert!(s.records.iter().all(|r| cal.in_trimmed_session(r.timestamp_ms)));
        let (c, rep) = crate::ingest::clean_sessions(&s, &cal, 0.02).unwrap();
        assert_eq!(rep.trimmed, 0);
        assert_eq!(c.segment_starts, s.segment_starts);
    }

    #[test]
    fn validation() {
        let bad = small(ProcessFamily::IidWalk { increments: IncrementDist::Student { nu: 2.0 } });
        assert!(bad.validate().is_err());
        assert!(ProcessSpec { paths: 0, ..small(ProcessFamily::Wiener { continuous_monitoring: false }) }.validate().is_err());
        assert!(ProcessSpec { sigma: 0.0, ..small(ProcessFamily::Wiener { continuous_monitoring: false }) }.validate().is_err());
    }

    #[test]
    fn analytic_oracle_only_for_wiener() {
        let w = small(ProcessFamily::Wiener { continuous_monitoring: false });
        assert_eq!(analytic_fpt(&w, 0.0, 10.0).unwrap(), 1.0);
        let a = analytic_fpt(&w, 0.01, 100.0).unwrap();
        let b = analytic_fpt(&w, 0.01 * 2f64.sqrt(), 200.0).unwrap();
        assert!((a - b).abs() < 1e-15);
        let iid = small(ProcessFamily::IidWalk { increments: IncrementDist::Gaussian });
        assert!(matches!(analytic_fpt(&iid, 0.01, 10.0), Err(Error::UnsupportedOracle(_))));
    }
}
