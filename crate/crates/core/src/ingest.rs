//! Tick records, trading-session cleaning and per-anchor return paths.
//!
//! Timestamps are integer epoch milliseconds. Session hours are expressed in
//! local minutes-after-midnight with a fixed UTC offset (no DST rules).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

const MS_PER_MINUTE: i64 = 60_000;
const MS_PER_DAY: i64 = 86_400_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub timestamp_ms: i64,
    pub price: f64,
    pub volume: Option<u64>,
}

impl TickRecord {
    pub fn new(timestamp_ms: i64, price: f64) -> Self {
        Self { timestamp_ms, price, volume: None }
    }
}

/// Ordered trade records for one instrument.
///
/// `segment_starts` holds the index of the first record of every contiguous
/// segment; returns are never computed across a segment boundary. A freshly
/// parsed series is a single segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickSeries {
    pub symbol: String,
    pub records: Vec<TickRecord>,
    pub segment_starts: Vec<usize>,
    pub source_meta: BTreeMap<String, String>,
}

impl TickSeries {
    /// Validates prices and ordering; the result is one segment.
    pub fn new(symbol: impl Into<String>, records: Vec<TickRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if !(r.price > 0.0 && r.price.is_finite()) {
                return Err(Error::InvalidInput(format!("record {i}: price {} is not positive", r.price)));
            }
        }
        if records.windows(2).any(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
            return Err(Error::InvalidInput("timestamps are not non-decreasing".into()));
        }
        let segment_starts = if records.is_empty() { Vec::new() } else { alloc::vec![0] };
        Ok(Self { symbol: symbol.into(), records, segment_starts, source_meta: BTreeMap::new() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index ranges of the segments, in order.
    pub fn segments(&self) -> impl Iterator<Item = core::ops::Range<usize>> + '_ {
        let n = self.records.len();
        self.segment_starts.iter().enumerate().map(move |(k, &s)| {
            let e = self.segment_starts.get(k + 1).copied().unwrap_or(n);
            s..e
        })
    }

    /// Collapses records sharing a timestamp into the last one (volumes are
    /// summed). Returns how many records were dropped.
    pub fn collapse_simultaneous(&mut self) -> usize {
        let before = self.records.len();
        let mut out: Vec<TickRecord> = Vec::with_capacity(before);
        for r in self.records.drain(..) {
            match out.last_mut() {
                Some(last) if last.timestamp_ms == r.timestamp_ms => {
                    let volume = match (last.volume, r.volume) {
                        (Some(a), Some(b)) => Some(a + b),
                        (a, b) => b.or(a),
                    };
                    *last = TickRecord { volume, ..r };
                }
                _ => out.push(r),
            }
        }
        self.records = out;
        self.segment_starts = if self.records.is_empty() { Vec::new() } else { alloc::vec![0] };
        before - self.records.len()
    }
}

/// Open and close of one trading day, minutes after local midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionHours {
    pub open_minute: u32,
    pub close_minute: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCalendar {
    /// Monday first; `None` marks a closed day.
    pub hours: [Option<SessionHours>; 7],
    pub trim_minutes: u32,
    pub timezone: String,
    pub utc_offset_minutes: i32,
}

impl SessionCalendar {
    pub const DEFAULT_TRIM_MINUTES: u32 = 30;

    /// Monday–Friday sessions, UTC.
    pub fn weekdays(open_minute: u32, close_minute: u32) -> Self {
        let h = Some(SessionHours { open_minute, close_minute });
        Self {
            hours: [h, h, h, h, h, None, None],
            trim_minutes: Self::DEFAULT_TRIM_MINUTES,
            timezone: "UTC".into(),
            utc_offset_minutes: 0,
        }
    }

    /// Same session every day of the week, UTC.
    pub fn every_day(open_minute: u32, close_minute: u32) -> Self {
        let h = Some(SessionHours { open_minute, close_minute });
        Self { hours: [h; 7], ..Self::weekdays(open_minute, close_minute) }
    }

    pub fn with_trim(mut self, trim_minutes: u32) -> Self {
        self.trim_minutes = trim_minutes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (d, h) in self.hours.iter().enumerate() {
            if let Some(h) = h {
                if h.close_minute > 24 * 60 {
                    return Err(Error::InvalidInput(format!("weekday {d}: close after midnight")));
                }
                if h.open_minute + 2 * self.trim_minutes >= h.close_minute {
                    return Err(Error::InvalidInput(format!(
                        "weekday {d}: open + 2*trim must be before close"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Local calendar day of a timestamp (days since 1970-01-01).
    pub fn local_day(&self, timestamp_ms: i64) -> i64 {
        (timestamp_ms + self.utc_offset_minutes as i64 * MS_PER_MINUTE).div_euclid(MS_PER_DAY)
    }

    /// Trimmed session window `[start, end]` (epoch ms) for a local day.
    pub fn trimmed_window(&self, day: i64) -> Option<(i64, i64)> {
        let weekday = (day + 3).rem_euclid(7) as usize;
        let h = self.hours[weekday]?;
        let base = day * MS_PER_DAY - self.utc_offset_minutes as i64 * MS_PER_MINUTE;
        let trim = self.trim_minutes as i64;
        Some((
            base + (h.open_minute as i64 + trim) * MS_PER_MINUTE,
            base + (h.close_minute as i64 - trim) * MS_PER_MINUTE,
        ))
    }

    pub fn in_trimmed_session(&self, timestamp_ms: i64) -> bool {
        self.trimmed_window(self.local_day(timestamp_ms))
            .is_some_and(|(s, e)| timestamp_ms >= s && timestamp_ms <= e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollSplit {
    /// Index in the cleaned series of the first record after the split.
    pub index: usize,
    pub timestamp_ms: i64,
    pub log_jump: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_records: usize,
    pub trimmed: usize,
    pub output_records: usize,
    pub sessions: usize,
    pub roll_splits: Vec<RollSplit>,
}

/// Drops ticks outside the trimmed sessions and segments the series per
/// session. Jumps across a session gap larger than `roll_threshold`
/// (absolute log-price) are reported as roll splits.
pub fn clean_sessions(
    series: &TickSeries,
    cal: &SessionCalendar,
    roll_threshold: f64,
) -> Result<(TickSeries, CleaningReport)> {
    cal.validate()?;
    if !(roll_threshold > 0.0) {
        return Err(Error::InvalidInput("roll_threshold must be > 0".into()));
    }
    if series.records.windows(2).any(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        return Err(Error::InvalidInput("series is not sorted by timestamp".into()));
    }

    let mut records = Vec::with_capacity(series.records.len());
    let mut segment_starts = Vec::new();
    let mut roll_splits = Vec::new();
    let mut last_day: Option<i64> = None;
    for r in &series.records {
        if !cal.in_trimmed_session(r.timestamp_ms) {
            continue;
        }
        let day = cal.local_day(r.timestamp_ms);
        if last_day != Some(day) {
            if let Some(prev) = records.last() {
                let prev: &TickRecord = prev;
                let jump = math::ln(r.price / prev.price).abs();
                if jump > roll_threshold {
                    roll_splits.push(RollSplit { index: records.len(), timestamp_ms: r.timestamp_ms, log_jump: jump });
                }
            }
            segment_starts.push(records.len());
            last_day = Some(day);
        }
        records.push(*r);
    }
    if records.is_empty() {
        return Err(Error::EmptyData(format!("no ticks of '{}' fall inside the trimmed sessions", series.symbol)));
    }
    let report = CleaningReport {
        input_records: series.records.len(),
        trimmed: series.records.len() - records.len(),
        output_records: records.len(),
        sessions: segment_starts.len(),
        roll_splits,
    };
    let cleaned = TickSeries {
        symbol: series.symbol.clone(),
        records,
        segment_starts,
        source_meta: series.source_meta.clone(),
    };
    Ok((cleaned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum AnchorPolicy {
    EveryTrade,
    Stride { stride_ms: i64 },
    SessionStart,
}

/// Log-return trajectory `X(t') = ln(S(t')/S_0)` from one anchor trade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPath {
    pub anchor_time_ms: i64,
    pub offsets_ms: Vec<i64>,
    pub returns: Vec<f64>,
    pub session_id: u32,
}

impl ReturnPath {
    /// Builds a path from offsets and returns, checking the invariants.
    pub fn new(anchor_time_ms: i64, offsets_ms: Vec<i64>, returns: Vec<f64>, session_id: u32) -> Result<Self> {
        let p = Self { anchor_time_ms, offsets_ms, returns, session_id };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets_ms.is_empty() || self.offsets_ms.len() != self.returns.len() {
            return Err(Error::InvalidInput("path offsets and returns must be non-empty and equal length".into()));
        }
        if self.offsets_ms[0] != 0 || self.returns[0] != 0.0 {
            return Err(Error::InvalidInput("path must start at offset 0 with X = 0".into()));
        }
        if self.offsets_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("path offsets must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    /// Elapsed time covered by the path.
    pub fn span_ms(&self) -> i64 {
        self.offsets_ms.last().copied().unwrap_or(0)
    }

    /// `X(t)` under piecewise-constant evaluation: the last return at an
    /// offset `<= t`.
    pub fn value_at(&self, t_ms: i64) -> f64 {
        let k = self.offsets_ms.partition_point(|&o| o <= t_ms);
        if k == 0 { 0.0 } else { self.returns[k - 1] }
    }

    pub fn final_return(&self) -> f64 {
        self.returns.last().copied().unwrap_or(0.0)
    }

    pub fn increments(&self) -> Vec<f64> {
        self.returns.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn durations_ms(&self) -> Vec<i64> {
        self.offsets_ms.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Multiplies every return by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { returns: self.returns.iter().map(|x| x * c).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathBuild {
    pub paths: Vec<ReturnPath>,
    /// Anchors dropped because fewer than two ticks remained in the segment.
    pub skipped_anchors: usize,
}

/// One return path per anchor; each runs to the end of its segment.
pub fn build_return_paths(series: &TickSeries, policy: AnchorPolicy) -> Result<PathBuild> {
    if let AnchorPolicy::Stride { stride_ms } = policy {
        if stride_ms <= 0 {
            return Err(Error::InvalidInput("anchor stride must be positive".into()));
        }
    }
    let recs = &series.records;
    let mut out = PathBuild::default();
    for (seg_id, seg) in series.segments().enumerate() {
        if recs[seg.clone()].windows(2).any(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
            return Err(Error::InvalidInput(format!(
                "segment {seg_id} has non-increasing timestamps; collapse simultaneous ticks first"
            )));
        }
        let anchors: Vec<usize> = match policy {
            AnchorPolicy::SessionStart => alloc::vec![seg.start],
            AnchorPolicy::EveryTrade => seg.clone().collect(),
            AnchorPolicy::Stride { stride_ms } => {
                let mut v = Vec::new();
                let mut a = seg.start;
                while a < seg.end {
                    v.push(a);
                    let next_t = recs[a].timestamp_ms + stride_ms;
                    a += recs[a..seg.end].partition_point(|r| r.timestamp_ms < next_t);
                }
                v
            }
        };
        for a in anchors {
            if seg.end - a < 2 {
                out.skipped_anchors += 1;
                continue;
            }
            let p0 = recs[a].price;
            let t0 = recs[a].timestamp_ms;
            let offsets_ms = recs[a..seg.end].iter().map(|r| r.timestamp_ms - t0).collect();
            let returns = recs[a..seg.end].iter().map(|r| math::ln(r.price / p0)).collect();
            out.paths.push(ReturnPath { anchor_time_ms: t0, offsets_ms, returns, session_id: seg_id as u32 });
        }
    }
    Ok(out)
}
