//! Delimited tick files: parsing and the cleaned-tick output format.

use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime};
use fpt_core::{TickRecord, TickSeries};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// A column selected by header name or by zero-based index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// ISO-8601 when the field contains a date separator, otherwise epoch
    /// milliseconds for magnitudes of at least 1e11 and epoch seconds below.
    #[default]
    Auto,
    EpochS,
    EpochMs,
    Iso8601,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatConfig {
    /// `,` or `\t`.
    pub delimiter: char,
    pub has_header: bool,
    pub timestamp: ColumnRef,
    pub price: ColumnRef,
    pub volume: Option<ColumnRef>,
    pub timestamp_format: TimestampFormat,
    /// Largest tolerated fraction of malformed rows.
    pub malformed_tolerance: f64,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            delimiter: ',',
            has_header: true,
            timestamp: ColumnRef::Index(0),
            price: ColumnRef::Index(1),
            volume: None,
            timestamp_format: TimestampFormat::Auto,
            malformed_tolerance: 0.001,
        }
    }
}

impl FormatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delimiter != ',' && self.delimiter != '\t' {
            return Err(CliError::Config(format!("unsupported delimiter {:?}", self.delimiter)));
        }
        if !(0.0..=1.0).contains(&self.malformed_tolerance) {
            return Err(CliError::Config("malformed_tolerance must lie in [0, 1]".into()));
        }
        let named = |c: &ColumnRef| matches!(c, ColumnRef::Name(_));
        if !self.has_header && (named(&self.timestamp) || named(&self.price) || self.volume.as_ref().is_some_and(named)) {
            return Err(CliError::Config("columns can only be selected by name when the file has a header".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub accepted: usize,
    /// Rows with a zero or negative price.
    pub rejected: usize,
    pub malformed: usize,
    /// Records removed by collapsing simultaneous ticks.
    pub collapsed: usize,
    /// Rows that arrived out of timestamp order (sorted stably).
    pub reordered: usize,
    /// The first few diagnostics, one per offending row.
    pub diagnostics: Vec<String>,
}

const MAX_DIAGNOSTICS: usize = 20;

fn parse_timestamp(field: &str, format: TimestampFormat) -> Option<i64> {
    let field = field.trim();
    // `per_unit`: milliseconds per unit of the field
    let epoch = |per_unit: i64| -> Option<i64> {
        if let Ok(v) = field.parse::<i64>() {
            return v.checked_mul(per_unit);
        }
        let v: f64 = field.parse().ok()?;
        let ms = (v * per_unit as f64).round();
        (ms.is_finite() && ms.abs() < 9.0e18).then_some(ms as i64)
    };
    match format {
        TimestampFormat::EpochMs => epoch(1),
        TimestampFormat::EpochS => epoch(1000),
        TimestampFormat::Iso8601 => parse_iso(field),
        TimestampFormat::Auto => {
            if field.contains('-') && field.len() >= 10 && !field.starts_with('-') {
                parse_iso(field)
            } else {
                let v: f64 = field.parse().ok()?;
                if v.abs() >= 1e11 { epoch(1) } else { epoch(1000) }
            }
        }
    }
}

fn parse_iso(field: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(field) {
        return Some(dt.timestamp_millis());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(field, fmt) {
            return Some(dt.and_utc().timestamp_millis());
        }
    }
    None
}

fn resolve(col: &ColumnRef, header: Option<&csv::StringRecord>) -> Result<usize> {
    match (col, header) {
        (ColumnRef::Index(i), _) => Ok(*i),
        (ColumnRef::Name(name), Some(h)) => h
            .iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| CliError::Data(format!("header has no column named '{name}'"))),
        (ColumnRef::Name(name), None) => Err(CliError::Config(format!("column '{name}' selected by name without a header"))),
    }
}

/// Parses a delimited tick stream. Rows are sorted stably by timestamp and
/// simultaneous ticks collapse to the last price.
pub fn parse_ticks(input: impl Read, format: &FormatConfig, symbol: &str) -> Result<(TickSeries, ParseReport)> {
    format.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter as u8)
        .has_headers(format.has_header)
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(input);
    let header = if format.has_header {
        let h = reader.headers().map_err(|e| CliError::Data(format!("unparsable header: {e}")))?.clone();
        if h.is_empty() || h.iter().all(|c| c.trim().is_empty()) {
            return Err(CliError::Data("missing or empty header".into()));
        }
        Some(h)
    } else {
        None
    };
    let ts_col = resolve(&format.timestamp, header.as_ref())?;
    let price_col = resolve(&format.price, header.as_ref())?;
    let vol_col = format.volume.as_ref().map(|c| resolve(c, header.as_ref())).transpose()?;

    let mut report = ParseReport::default();
    let mut records = Vec::new();
    let note = |report: &mut ParseReport, msg: String| {
        if report.diagnostics.len() < MAX_DIAGNOSTICS {
            report.diagnostics.push(msg);
        }
    };
    for (k, row) in reader.records().enumerate() {
        let line = k + 1 + usize::from(format.has_header);
        report.rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.malformed += 1;
                note(&mut report, format!("row {line}: {e}"));
                continue;
            }
        };
        let ts = row.get(ts_col).and_then(|f| parse_timestamp(f, format.timestamp_format));
        let price = row.get(price_col).and_then(|f| f.trim().parse::<f64>().ok()).filter(|p| p.is_finite());
        let volume = match vol_col {
            None => Some(None),
            Some(c) => match row.get(c).map(str::trim) {
                None | Some("") => Some(None),
                Some(f) => f.parse::<u64>().ok().map(Some),
            },
        };
        match (ts, price, volume) {
            (Some(timestamp_ms), Some(price), Some(volume)) if price > 0.0 => {
                records.push(TickRecord { timestamp_ms, price, volume });
            }
            (Some(_), Some(price), Some(_)) => {
                report.rejected += 1;
                note(&mut report, format!("row {line}: price {price} is not positive"));
            }
            _ => {
                report.malformed += 1;
                note(&mut report, format!("row {line}: cannot parse timestamp, price or volume"));
            }
        }
    }
    if report.rows > 0 && report.malformed as f64 > format.malformed_tolerance * report.rows as f64 {
        return Err(CliError::Data(format!(
            "{} of {} rows are malformed (tolerance {}); first: {}",
            report.malformed,
            report.rows,
            format.malformed_tolerance,
            report.diagnostics.first().map(String::as_str).unwrap_or("")
        )));
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("no valid tick rows in '{symbol}'")));
    }
    report.reordered = records.windows(2).filter(|w| w[1].timestamp_ms < w[0].timestamp_ms).count();
    records.sort_by_key(|r| r.timestamp_ms);
    let mut series = TickSeries::new(symbol, records)?;
    report.collapsed = series.collapse_simultaneous();
    report.accepted = series.len();
    Ok((series, report))
}

/// Header of the cleaned-tick file.
pub const TICK_COLUMNS: [&str; 4] = ["timestamp_ms", "price", "volume", "segment"];

/// Writes `timestamp_ms,price,volume,segment` rows. Prices use the shortest
/// representation that parses back to the same `f64`.
pub fn write_ticks(series: &TickSeries, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| CliError::Data(format!("cannot serialize ticks: {e}"));
    w.write_record(TICK_COLUMNS).map_err(io)?;
    for (seg, range) in series.segments().enumerate() {
        for r in &series.records[range] {
            let volume = r.volume.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.timestamp_ms.to_string(), r.price.to_string(), volume, seg.to_string()]).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::Data(format!("cannot serialize ticks: {e}")))?;
    Ok(())
}

/// Format that reads files produced by [`write_ticks`].
pub fn tick_file_format() -> FormatConfig {
    FormatConfig {
        timestamp: ColumnRef::Name("timestamp_ms".into()),
        price: ColumnRef::Name("price".into()),
        volume: Some(ColumnRef::Name("volume".into())),
        timestamp_format: TimestampFormat::EpochMs,
        ..FormatConfig::default()
    }
}
