//! Market loading and the parallel, order-deterministic reductions.

use std::borrow::Cow;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use fpt_core::estimator::REDUCTION_CHUNK;
use fpt_core::ingest::CleaningReport;
use fpt_core::surrogate::shuffle_path;
use fpt_core::synth::{generate_range, generate_ticks};
use fpt_core::{
    build_return_paths, clean_sessions, FptAccumulator, HorizonGrid, LevelGrid, ProcessSpec, ReturnPath, SurrogateKind,
    TickSeries,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::parse::{parse_ticks, ParseReport};

/// Chunks handed to the thread pool per batch; bounds peak memory when
/// synthetic paths are generated on the fly.
const BATCH_CHUNKS: usize = 64;

pub enum PathSource {
    Paths(Vec<ReturnPath>),
    Synthetic(ProcessSpec),
}

impl PathSource {
    pub fn len(&self) -> usize {
        match self {
            PathSource::Paths(p) => p.len(),
            PathSource::Synthetic(s) => s.paths,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn chunk_count(&self) -> usize {
        self.len().div_ceil(REDUCTION_CHUNK)
    }

    fn chunk(&self, k: usize) -> Cow<'_, [ReturnPath]> {
        let start = k * REDUCTION_CHUNK;
        let end = (start + REDUCTION_CHUNK).min(self.len());
        match self {
            PathSource::Paths(p) => Cow::Borrowed(&p[start..end]),
            PathSource::Synthetic(s) => Cow::Owned(generate_range(s, start..end)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub parse: ParseReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub files: Vec<FileReport>,
    /// Simultaneous ticks merged across files of one market.
    pub collapsed_across_files: usize,
    pub cleaning: CleaningReport,
    pub paths: usize,
    pub skipped_anchors: usize,
}

pub struct Market {
    pub name: String,
    pub source: PathSource,
    pub ingest: Option<IngestSummary>,
    pub cleaned: Option<TickSeries>,
}

/// Parses, merges and cleans the files of one market.
pub fn ingest_files(name: &str, files: &[PathBuf], cfg: &RunConfig) -> Result<(TickSeries, IngestSummary)> {
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for path in files {
        let file = File::open(path).map_err(|source| CliError::Read { path: path.clone(), source })?;
        let (series, parse) = parse_ticks(BufReader::new(file), &cfg.format, name)
            .map_err(|e| match e {
                CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
                other => other,
            })?;
        records.extend(series.records);
        reports.push(FileReport { path: path.clone(), parse });
    }
    records.sort_by_key(|r| r.timestamp_ms);
    let mut merged = TickSeries::new(name, records)?;
    let collapsed_across_files = if files.len() > 1 { merged.collapse_simultaneous() } else { 0 };
    merged.source_meta.insert("files".into(), files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";"));
    let (cleaned, cleaning) = clean_sessions(&merged, &cfg.calendar.calendar()?, cfg.ingest.roll_threshold)?;
    let summary = IngestSummary { files: reports, collapsed_across_files, cleaning, paths: 0, skipped_anchors: 0 };
    Ok((cleaned, summary))
}

fn file_market(name: &str, files: &[PathBuf], cfg: &RunConfig) -> Result<Market> {
    let (cleaned, mut summary) = ingest_files(name, files, cfg)?;
    let build = build_return_paths(&cleaned, cfg.anchor()?)?;
    if build.paths.is_empty() {
        return Err(CliError::Data(format!("market '{name}': no return path has two or more ticks")));
    }
    summary.paths = build.paths.len();
    summary.skipped_anchors = build.skipped_anchors;
    Ok(Market { name: name.into(), source: PathSource::Paths(build.paths), ingest: Some(summary), cleaned: Some(cleaned) })
}

fn stem(path: &std::path::Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "market".into());
    name.split('.').next().filter(|s| !s.is_empty()).unwrap_or("market").to_string()
}

/// Suffixes repeated names with `#2`, `#3`, ... in order of appearance.
pub fn unique_names(names: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(names.len());
    for name in names {
        let mut candidate = name.clone();
        let mut k = 1;
        while out.contains(&candidate) {
            k += 1;
            candidate = format!("{name}#{k}");
        }
        out.push(candidate);
    }
    out
}

/// Every market of the configured data source, in configuration order.
pub fn load_markets(cfg: &RunConfig) -> Result<Vec<Market>> {
    cfg.check_source()?;
    let mut out = Vec::new();
    for path in &cfg.data.files {
        out.push(file_market(&stem(path), std::slice::from_ref(path), cfg)?);
    }
    for m in &cfg.data.markets {
        out.push(file_market(&m.name, &m.files, cfg)?);
    }
    for (i, m) in cfg.synthetic.iter().enumerate() {
        out.push(Market { name: m.name.clone(), source: PathSource::Synthetic(m.spec(cfg.seed(), i)?), ingest: None, cleaned: None });
    }
    let names: Vec<String> = out.iter().map(|m| m.name.clone()).collect();
    for (m, name) in out.iter_mut().zip(unique_names(&names)) {
        m.name = name;
    }
    Ok(out)
}

/// Maps every chunk of `source` (optionally shuffled) through `f`, in
/// parallel, returning results in chunk order.
fn map_chunks<T: Send>(
    source: &PathSource,
    shuffle: Option<(SurrogateKind, u64, u32)>,
    f: impl Fn(&[ReturnPath]) -> T + Sync,
) -> Vec<T> {
    let n = source.chunk_count();
    let mut out = Vec::with_capacity(n);
    for batch in (0..n).step_by(BATCH_CHUNKS) {
        let part: Vec<T> = (batch..(batch + BATCH_CHUNKS).min(n))
            .into_par_iter()
            .map(|k| {
                let paths = source.chunk(k);
                match shuffle {
                    None => f(&paths),
                    Some((kind, seed, replicate)) => {
                        let base = k * REDUCTION_CHUNK;
                        let shuffled: Vec<ReturnPath> = paths
                            .iter()
                            .enumerate()
                            .map(|(i, p)| shuffle_path(p, kind, seed, replicate, base + i))
                            .collect();
                        f(&shuffled)
                    }
                }
            })
            .collect();
        out.extend(part);
    }
    out
}

/// First-passage counts over a source; identical to
/// [`FptAccumulator::from_paths`] on the materialised paths.
pub fn accumulate(
    source: &PathSource,
    levels: &LevelGrid,
    horizons: &HorizonGrid,
    shuffle: Option<(SurrogateKind, u64, u32)>,
) -> FptAccumulator {
    let parts = map_chunks(source, shuffle, |paths| {
        let mut acc = FptAccumulator::new(levels, horizons);
        for p in paths {
            acc.add_path(p);
        }
        acc
    });
    let mut total = FptAccumulator::new(levels, horizons);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Population standard deviation of `X(t)` over paths spanning `t_ms`,
/// reduced chunk by chunk in a fixed order.
pub fn reference_scale(source: &PathSource, t_ms: i64) -> Result<f64> {
    let parts = map_chunks(source, None, |paths| {
        let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for p in paths.iter().filter(|p| p.span_ms() >= t_ms) {
            let x = p.value_at(t_ms);
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        (n, mean, m2)
    });
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for (nb, mb, m2b) in parts {
        if nb == 0.0 {
            continue;
        }
        let total = n + nb;
        let delta = mb - mean;
        mean += delta * nb / total;
        m2 += m2b + delta * delta * n * nb / total;
        n = total;
    }
    if n < 2.0 {
        return Err(CliError::Data(format!("{n} paths span the reference horizon of {} s", t_ms / 1000)));
    }
    let v = (m2.max(0.0) / n).sqrt();
    if !(v > 0.0) {
        return Err(CliError::Numerical("reference volatility is zero".into()));
    }
    Ok(v)
}

/// The configured level grid for one market.
pub fn levels_for(source: &PathSource, cfg: &RunConfig) -> Result<(LevelGrid, Option<f64>)> {
    match &cfg.grid.levels {
        Some(levels) => Ok((LevelGrid::symmetric(levels).map_err(|e| CliError::Config(format!("grid.levels: {e}")))?, None)),
        None => {
            let v_ref = reference_scale(source, cfg.reference_ms()?)?;
            let g = &cfg.grid;
            Ok((LevelGrid::relative(v_ref, g.level_lo, g.level_hi, g.level_count)?, Some(v_ref)))
        }
    }
}

/// Raw ticks of all sessions of a synthetic market, in session order.
pub fn synthetic_ticks(spec: &ProcessSpec, symbol: &str) -> Result<TickSeries> {
    let n = spec.paths;
    let mut records = Vec::new();
    let mut segment_starts = Vec::with_capacity(n);
    let per_batch = BATCH_CHUNKS * REDUCTION_CHUNK;
    for batch in (0..n).step_by(per_batch) {
        let sessions: Vec<Vec<fpt_core::TickRecord>> =
            (batch..(batch + per_batch).min(n)).into_par_iter().map(|i| generate_ticks(spec, i)).collect();
        for s in sessions {
            segment_starts.push(records.len());
            records.extend(s);
        }
    }
    let mut series = TickSeries::new(symbol, records)?;
    series.segment_starts = segment_starts;
    Ok(series)
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpt_core::synth::{generate, Clock};
    use fpt_core::{estimate_fpt, shuffle_returns};

    fn spec(paths: usize) -> ProcessSpec {
        ProcessSpec::wiener(1e-3, Clock::Exponential { mean_ms: 20_000.0 }, 1800, paths, 4)
    }

    #[test]
    fn streamed_and_materialised_sources_agree_bitwise() {
        let s = spec(2500);
        let paths = generate(&s).unwrap();
        let levels = LevelGrid::relative(0.03, 0.1, 3.0, 9).unwrap();
        let horizons = HorizonGrid::from_seconds(&[60, 600, 1800]).unwrap();
        let direct = estimate_fpt(&paths, &levels, &horizons);
        let mem = PathSource::Paths(paths.clone());
        let syn = PathSource::Synthetic(s);
        for threads in [1, 3] {
            let pool = thread_pool(Some(threads)).unwrap();
            let a = pool.install(|| accumulate(&syn, &levels, &horizons, None)).finish("");
            let b = pool.install(|| accumulate(&mem, &levels, &horizons, None)).finish("");
            assert_eq!(a, direct);
            assert_eq!(b, direct);
            assert_eq!(
                pool.install(|| reference_scale(&syn, 1_800_000)).unwrap().to_bits(),
                reference_scale(&mem, 1_800_000).unwrap().to_bits()
            );
        }
        let shuffled = estimate_fpt(&shuffle_returns(&paths, 9), &levels, &horizons);
        let streamed = accumulate(&syn, &levels, &horizons, Some((SurrogateKind::ShuffleReturns, 9, 0))).finish("");
        assert_eq!(streamed, shuffled);
    }

    #[test]
    fn synthetic_ticks_have_one_segment_per_session() {
        let s = spec(5);
        let t = synthetic_ticks(&s, "S").unwrap();
        assert_eq!(t.segment_starts.len(), 5);
        assert_eq!(t.segments().count(), 5);
    }
}
