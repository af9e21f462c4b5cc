//! The six subcommands. Each returns the files it would write; nothing
//! touches the output directory until the caller commits them.

use std::path::{Path, PathBuf};

use fpt_core::estimator::{oracle_agreement, Quantity};
use fpt_core::fits::{crossover_report, fit_model, CrossoverReport, Family, FitOptions, FitResult};
use fpt_core::scaling::{levels_near, reference_volatility, resample_all, scaled_return_curves, DispersionReport};
use fpt_core::surrogate::{assemble_report, ExperimentOptions, SurfaceDiagnostics, SurrogateReport};
use fpt_core::synth::{analytic_fpt, ProcessFamily};
use fpt_core::{
    dispersion_theta, gaussian_gap, scale_by_volatility, scale_time, survival, AxisRole, FptAccumulator, FptSurface,
    ProcessSpec, ScaledCurve, SurrogateKind, SurrogateSpec, Wing,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnchorKind, CalendarConfig, MarketFiles, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{read_provenance, CsvTable, Field, OutputSet, Provenance};
use crate::parse::{tick_file_format, write_ticks};
use crate::pipeline::{
    accumulate, levels_for, load_markets, synthetic_ticks, unique_names, IngestSummary, Market, PathSource,
};

pub const SURFACE_SCHEMA: &str = "fpt.surface/1";
pub const SURFACE_CSV_SCHEMA: &str = "fpt.surface-csv/1";
pub const GAP_CSV_SCHEMA: &str = "fpt.gap-csv/1";
pub const CLEANING_SCHEMA: &str = "fpt.cleaning/1";
pub const TICKS_CSV_SCHEMA: &str = "fpt.ticks-csv/1";
pub const SYNTH_SCHEMA: &str = "fpt.synth/1";
pub const COLLAPSE_SCHEMA: &str = "fpt.collapse/1";
pub const COLLAPSE_CSV_SCHEMA: &str = "fpt.collapse-csv/1";
pub const SCALED_X_CSV_SCHEMA: &str = "fpt.scaled-x-csv/1";
pub const SCALED_TIME_CSV_SCHEMA: &str = "fpt.scaled-time-csv/1";
pub const SURROGATE_SCHEMA: &str = "fpt.surrogate/1";
pub const COMPARISON_CSV_SCHEMA: &str = "fpt.comparison-csv/1";
pub const FITS_SCHEMA: &str = "fpt.fits/1";
pub const FITS_CSV_SCHEMA: &str = "fpt.fits-csv/1";
pub const FITS_HORIZON_CSV_SCHEMA: &str = "fpt.fits-horizon-csv/1";
pub const FIT_CURVES_CSV_SCHEMA: &str = "fpt.fit-curves-csv/1";
pub const CROSSOVER_CSV_SCHEMA: &str = "fpt.crossover-csv/1";

const ORACLE_K: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurrogateDescriptor {
    pub kind: SurrogateKind,
    pub seed: u64,
    /// `None` for the surface pooled over all replicates.
    pub replicate: Option<u32>,
    pub replicates: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAgreement {
    pub oracle: String,
    pub k_stderr: f64,
    pub agreeing: usize,
    pub cells: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    Explicit,
    /// `level_lo..level_hi` times the measured `v_t` at the reference horizon.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub provenance: Provenance,
    pub level_mode: LevelMode,
    pub reference_seconds: i64,
    pub reference_scale: Option<f64>,
    pub surrogate: Option<SurrogateDescriptor>,
    pub oracle: Option<OracleAgreement>,
    pub surface: FptSurface,
}

struct Estimated {
    surface: FptSurface,
    v_ref: Option<f64>,
}

fn estimate_market(m: &Market, cfg: &RunConfig) -> Result<Estimated> {
    let (levels, v_ref) = levels_for(&m.source, cfg)?;
    let horizons = cfg.horizons()?;
    let surface = accumulate(&m.source, &levels, &horizons, None).finish(m.name.clone());
    Ok(Estimated { surface, v_ref })
}

fn oracle_for(m: &Market, surface: &FptSurface) -> Option<OracleAgreement> {
    let PathSource::Synthetic(spec) = &m.source else { return None };
    if !matches!(spec.family, ProcessFamily::Wiener { .. }) {
        return None;
    }
    let (agreeing, cells) =
        oracle_agreement(surface, ORACLE_K, |x, t| analytic_fpt(spec, x, t).expect("wiener oracle"));
    let fraction = if cells == 0 { 0.0 } else { agreeing as f64 / cells as f64 };
    Some(OracleAgreement { oracle: "erfc(|x| / sqrt(2 sigma^2 t))".into(), k_stderr: ORACLE_K, agreeing, cells, fraction })
}

fn surface_file(
    prov: &Provenance,
    cfg: &RunConfig,
    est: &Estimated,
    surface: FptSurface,
    surrogate: Option<SurrogateDescriptor>,
    oracle: Option<OracleAgreement>,
) -> SurfaceFile {
    SurfaceFile {
        provenance: prov.with_schema(SURFACE_SCHEMA),
        level_mode: if cfg.grid.levels.is_some() { LevelMode::Explicit } else { LevelMode::Relative },
        reference_seconds: cfg.grid.reference_seconds,
        reference_scale: est.v_ref,
        surrogate,
        oracle,
        surface,
    }
}

pub fn surface_csv(prov: &Provenance, s: &FptSurface) -> CsvTable {
    let mut t = CsvTable::new(
        &prov.with_schema(SURFACE_CSV_SCHEMA),
        &["market", "wing", "x", "t_seconds", "w", "n", "crossings", "vt", "se"],
    );
    for wing in Wing::BOTH {
        let ws = s.wing(wing);
        let h = s.horizons.len();
        for (i, j, x, t_s, w, n) in s.cells(wing) {
            t.row(&[
                Field::Str(&s.market),
                Field::Str(wing.symbol()),
                Field::F(x),
                Field::F(t_s),
                Field::F(w),
                Field::U(n),
                Field::U(ws.crossings[i * h + j]),
                Field::OptF(s.vt[j]),
                Field::OptF(s.stderr(wing, i, j)),
            ]);
        }
    }
    t
}

fn gap_csv(prov: &Provenance, s: &FptSurface) -> CsvTable {
    let gap = gaussian_gap(s);
    let mut t = CsvTable::new(
        &prov.with_schema(GAP_CSV_SCHEMA),
        &["market", "wing", "x", "t_seconds", "scaled_x", "w", "w_gauss", "gap", "se", "z"],
    );
    for wing in Wing::BOTH {
        for c in gap.wing(wing).iter().flatten() {
            t.row(&[
                Field::Str(&s.market),
                Field::Str(wing.symbol()),
                Field::F(c.x),
                Field::F(c.t_seconds),
                Field::F(c.scaled_x),
                Field::F(c.w),
                Field::F(c.w_gauss),
                Field::F(c.gap),
                Field::F(c.stderr),
                Field::F(c.z),
            ]);
        }
    }
    t
}

#[derive(Serialize)]
struct CleaningFile<'a> {
    provenance: Provenance,
    market: &'a str,
    #[serde(flatten)]
    summary: &'a IngestSummary,
}

fn add_cleaning(out: &mut OutputSet, prov: &Provenance, m: &Market) -> Result<()> {
    if let Some(summary) = &m.ingest {
        let doc = CleaningFile { provenance: prov.with_schema(CLEANING_SCHEMA), market: &m.name, summary };
        out.add_json(format!("{}.cleaning.json", m.name), &doc)?;
    }
    Ok(())
}

fn estimate_all(markets: &[Market], cfg: &RunConfig) -> Result<Vec<Estimated>> {
    markets.iter().map(|m| estimate_market(m, cfg)).collect()
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<OutputSet> {
    if !cfg.synthetic.is_empty() {
        return Err(CliError::Config("ingest reads tick files; use synth for synthetic markets".into()));
    }
    let prov = Provenance::new(cfg, "ingest", CLEANING_SCHEMA);
    let mut out = OutputSet::default();
    for m in load_markets(cfg)? {
        let cleaned = m.cleaned.as_ref().expect("file market keeps its cleaned ticks");
        let mut bytes = prov.with_schema(TICKS_CSV_SCHEMA).csv_header().into_bytes();
        write_ticks(cleaned, &mut bytes)?;
        out.add(format!("{}.ticks.csv", m.name), bytes);
        add_cleaning(&mut out, &prov, &m)?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct SynthMarketDoc<'a> {
    name: &'a str,
    file: String,
    ticks: usize,
    spec: &'a ProcessSpec,
    oracle: Option<&'static str>,
}

#[derive(Serialize)]
struct SynthDoc<'a> {
    provenance: Provenance,
    markets: Vec<SynthMarketDoc<'a>>,
    reingest_config: &'static str,
}

/// Configuration that reads the generated tick files back with the same
/// grids and the analysis settings of `cfg`.
pub fn reingest_config(cfg: &RunConfig, specs: &[(String, ProcessSpec)]) -> RunConfig {
    let longest = specs.iter().map(|(_, s)| s).max_by_key(|s| s.session_seconds).expect("at least one market");
    let mut re = cfg.clone();
    re.threads = None;
    re.out = None;
    re.synthetic.clear();
    re.data.files.clear();
    re.data.markets =
        specs.iter().map(|(name, _)| MarketFiles { name: name.clone(), files: vec![format!("{name}.ticks.csv").into()] }).collect();
    re.format = tick_file_format();
    re.calendar = CalendarConfig::from_calendar(&longest.calendar());
    re.ingest.anchor = AnchorKind::SessionStart;
    re.ingest.stride_seconds = None;
    re
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<OutputSet> {
    if cfg.synthetic.is_empty() {
        return Err(CliError::Config("synth needs at least one [[synthetic]] market".into()));
    }
    cfg.check_source()?;
    let prov = Provenance::new(cfg, "synth", SYNTH_SCHEMA);
    let specs: Vec<(String, ProcessSpec)> = cfg
        .synthetic
        .iter()
        .enumerate()
        .map(|(i, m)| Ok((m.name.clone(), m.spec(cfg.seed(), i)?)))
        .collect::<Result<_>>()?;
    let mut out = OutputSet::default();
    let mut docs = Vec::new();
    for (name, spec) in &specs {
        let series = synthetic_ticks(spec, name)?;
        let mut bytes = prov.with_schema(TICKS_CSV_SCHEMA).csv_header().into_bytes();
        write_ticks(&series, &mut bytes)?;
        let file = format!("{name}.ticks.csv");
        out.add(file.clone(), bytes);
        let oracle = matches!(spec.family, ProcessFamily::Wiener { .. }).then_some("wiener erfc law");
        docs.push(SynthMarketDoc { name, file, ticks: series.len(), spec, oracle });
    }
    let re = reingest_config(cfg, &specs);
    let toml = toml::to_string(&re).map_err(|e| CliError::Config(format!("cannot serialize ingest.toml: {e}")))?;
    out.add("ingest.toml", toml.into_bytes());
    out.add_json("synth.json", &SynthDoc { provenance: prov, markets: docs, reingest_config: "ingest.toml" })?;
    Ok(out)
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<OutputSet> {
    let prov = Provenance::new(cfg, "estimate", SURFACE_SCHEMA);
    let markets = load_markets(cfg)?;
    let estimated = estimate_all(&markets, cfg)?;
    let mut out = OutputSet::default();
    for (m, est) in markets.iter().zip(&estimated) {
        let oracle = oracle_for(m, &est.surface);
        out.add_json(format!("{}.surface.json", m.name), &surface_file(&prov, cfg, est, est.surface.clone(), None, oracle))?;
        out.add_csv(format!("{}.surface.csv", m.name), surface_csv(&prov, &est.surface));
        out.add_csv(format!("{}.gap.csv", m.name), gap_csv(&prov, &est.surface));
        add_cleaning(&mut out, &prov, m)?;
    }
    Ok(out)
}

/// Surfaces computed from the data source, or read from `files`, with
/// unique market names.
fn surfaces_from(cfg: &RunConfig, files: &[PathBuf]) -> Result<(Vec<FptSurface>, Vec<Provenance>)> {
    let (mut surfaces, inputs): (Vec<FptSurface>, Vec<Provenance>) = if files.is_empty() {
        let markets = load_markets(cfg)?;
        (estimate_all(&markets, cfg)?.into_iter().map(|e| e.surface).collect(), Vec::new())
    } else {
        if cfg.has_files() || !cfg.synthetic.is_empty() {
            return Err(CliError::Config("give either --surface files or a data source, not both".into()));
        }
        read_surfaces(files)?.into_iter().unzip()
    };
    let names: Vec<String> = surfaces.iter().map(|s| s.market.clone()).collect();
    for (s, name) in surfaces.iter_mut().zip(unique_names(&names)) {
        s.market = name;
    }
    Ok((surfaces, inputs))
}

/// Surfaces previously written by `estimate`; all must share one analysis hash.
pub fn read_surfaces(paths: &[PathBuf]) -> Result<Vec<(FptSurface, Provenance)>> {
    let mut out: Vec<(FptSurface, Provenance)> = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.clone(), source })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let prov = read_provenance(&value, path)?;
        if prov.schema != SURFACE_SCHEMA {
            return Err(CliError::Config(format!("{}: expected schema {SURFACE_SCHEMA}, found {}", path.display(), prov.schema)));
        }
        if let Some((_, first)) = out.first() {
            if first.analysis_hash != prov.analysis_hash {
                return Err(CliError::Config(format!(
                    "{} was produced with different analysis settings (analysis_hash {} vs {}); refusing to mix",
                    path.display(),
                    prov.analysis_hash,
                    first.analysis_hash
                )));
            }
        }
        let file: SurfaceFile =
            serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        out.push((file.surface, prov));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayRow {
    pub level: f64,
    pub slope: f64,
    pub stderr: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarketCollapse {
    pub market: String,
    pub reference_scale: f64,
    pub theta_x_pos: f64,
    pub theta_x_neg: f64,
    pub theta_t_pos: f64,
    pub theta_t_neg: f64,
    pub reports: Vec<DispersionReport>,
    pub decay_pos: Vec<DecayRow>,
    pub decay_neg: Vec<DecayRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarketTheta {
    pub horizon_seconds: f64,
    pub theta_pos: f64,
    pub theta_neg: f64,
    pub reports: Vec<DispersionReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CollapseFile {
    pub provenance: Provenance,
    pub inputs: Vec<Provenance>,
    pub binning: String,
    pub time_levels: String,
    pub decay_window: [f64; 2],
    pub table: Vec<MarketCollapse>,
    /// `None` when fewer than two markets are present.
    pub theta_mkt: Option<MarketTheta>,
    pub theta_mkt_note: Option<String>,
}

fn time_curves(surface: &FptSurface, wing: Wing, v0: f64, cfg: &RunConfig) -> Result<Vec<ScaledCurve>> {
    let sv = survival(surface);
    let c = &cfg.collapse;
    let idx = levels_near(&sv, wing, v0, c.time_level_lo, c.time_level_hi, c.time_level_count);
    Ok(scale_time(&sv, wing, v0)?
        .into_iter()
        .filter(|curve| idx.iter().any(|&i| Some(sv.levels.wing(wing)[i]) == curve.label.level))
        .collect())
}

fn collapse_market(surface: &FptSurface, cfg: &RunConfig) -> Result<MarketCollapse> {
    let bins = cfg.collapse.bins;
    let v0 = reference_volatility(surface, cfg.reference_ms()?)?;
    let window = (cfg.collapse.decay_window[0], cfg.collapse.decay_window[1]);
    let mut reports = Vec::new();
    let mut thetas = [0.0; 4];
    let mut decay = [Vec::new(), Vec::new()];
    for (k, wing) in Wing::BOTH.into_iter().enumerate() {
        let x = dispersion_theta(&scale_by_volatility(surface, wing, bins)?, AxisRole::Level)?;
        let raw_t = time_curves(surface, wing, v0, cfg)?;
        let t = dispersion_theta(&resample_all(&raw_t, bins)?, AxisRole::Time)?;
        thetas[k] = x.theta;
        thetas[2 + k] = t.theta;
        reports.push(x);
        reports.push(t);
        for c in &raw_t {
            if let Ok(f) = fpt_core::decay_exponent(c, window) {
                decay[k].push(DecayRow { level: c.label.level.unwrap_or(0.0), slope: f.slope, stderr: f.stderr, points: f.points });
            }
        }
    }
    let [decay_pos, decay_neg] = decay;
    Ok(MarketCollapse {
        market: surface.market.clone(),
        reference_scale: v0,
        theta_x_pos: thetas[0],
        theta_x_neg: thetas[1],
        theta_t_pos: thetas[2],
        theta_t_neg: thetas[3],
        reports,
        decay_pos,
        decay_neg,
    })
}

fn theta_market(surfaces: &[FptSurface], cfg: &RunConfig) -> Result<MarketTheta> {
    let t_ms = cfg.reference_ms()?;
    let horizon_seconds = t_ms as f64 / 1000.0;
    let mut reports = Vec::new();
    for wing in Wing::BOTH {
        let mut curves = Vec::new();
        for s in surfaces {
            let curve = scaled_return_curves(s, wing)?
                .into_iter()
                .find(|c| c.label.horizon_seconds == Some(horizon_seconds))
                .ok_or_else(|| {
                    CliError::Config(format!("market '{}' has no curve at the reference horizon {horizon_seconds} s", s.market))
                })?;
            curves.push(curve);
        }
        reports.push(dispersion_theta(&resample_all(&curves, cfg.collapse.bins)?, AxisRole::Market)?);
    }
    Ok(MarketTheta { horizon_seconds, theta_pos: reports[0].theta, theta_neg: reports[1].theta, reports })
}

fn scaled_x_csv(prov: &Provenance, surfaces: &[FptSurface]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&prov.with_schema(SCALED_X_CSV_SCHEMA), &["market", "wing", "t_seconds", "scaled_x", "w"]);
    for s in surfaces {
        for wing in Wing::BOTH {
            for c in scaled_return_curves(s, wing)? {
                for (&u, &w) in c.axis.iter().zip(&c.values) {
                    t.row(&[
                        Field::Str(&s.market),
                        Field::Str(wing.symbol()),
                        Field::OptF(c.label.horizon_seconds),
                        Field::F(u),
                        Field::F(w),
                    ]);
                }
            }
        }
    }
    Ok(t)
}

fn scaled_time_csv(prov: &Provenance, surfaces: &[FptSurface], table: &[MarketCollapse]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&prov.with_schema(SCALED_TIME_CSV_SCHEMA), &["market", "wing", "x", "tau", "s"]);
    for (s, row) in surfaces.iter().zip(table) {
        for wing in Wing::BOTH {
            for c in scale_time(&survival(s), wing, row.reference_scale)? {
                for (&tau, &v) in c.axis.iter().zip(&c.values) {
                    t.row(&[
                        Field::Str(&s.market),
                        Field::Str(wing.symbol()),
                        Field::OptF(c.label.level),
                        Field::F(tau),
                        Field::F(v),
                    ]);
                }
            }
        }
    }
    Ok(t)
}

pub fn cmd_collapse(cfg: &RunConfig, surface_files: &[PathBuf]) -> Result<OutputSet> {
    let prov = Provenance::new(cfg, "collapse", COLLAPSE_SCHEMA);
    let (mut surfaces, inputs) = surfaces_from(cfg, surface_files)?;
    for s in surfaces.iter_mut() {
        if s.quantity == Quantity::Survival {
            *s = survival(s);
        }
    }
    let table = surfaces.iter().map(|s| collapse_market(s, cfg)).collect::<Result<Vec<_>>>()?;
    let (theta_mkt, theta_mkt_note) = if surfaces.len() >= 2 {
        (Some(theta_market(&surfaces, cfg)?), None)
    } else {
        (None, Some("refused: the market dispersion needs at least two markets".to_string()))
    };

    let mut csv = CsvTable::new(
        &prov.with_schema(COLLAPSE_CSV_SCHEMA),
        &["market", "theta_x_pos", "theta_x_neg", "theta_t_pos", "theta_t_neg"],
    );
    for r in &table {
        csv.row(&[
            Field::Str(&r.market),
            Field::F(r.theta_x_pos),
            Field::F(r.theta_x_neg),
            Field::F(r.theta_t_pos),
            Field::F(r.theta_t_neg),
        ]);
    }
    let mut out = OutputSet::default();
    out.add_csv("scaled_x.csv", scaled_x_csv(&prov, &surfaces)?);
    out.add_csv("scaled_time.csv", scaled_time_csv(&prov, &surfaces, &table)?);
    out.add_csv("collapse.csv", csv);
    let c = &cfg.collapse;
    out.add_json(
        "collapse.json",
        &CollapseFile {
            provenance: prov,
            inputs,
            binning: format!(
                "{} log-spaced bin centres over the common support of each curve family; weights are linear widths between geometric midpoints; curves are linearly interpolated in log axis",
                c.bins
            ),
            time_levels: format!(
                "{} levels nearest to log-spaced targets over [{}, {}] times v_t at {} s",
                c.time_level_count, c.time_level_lo, c.time_level_hi, cfg.grid.reference_seconds
            ),
            decay_window: c.decay_window,
            table,
            theta_mkt,
            theta_mkt_note,
        },
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct SurrogateFile<'a> {
    provenance: Provenance,
    market: &'a str,
    spec: SurrogateSpec,
    replicates: u32,
    rng: &'a str,
    summary: &'a fpt_core::surrogate::ChangeSummary,
    original_diagnostics: &'a SurfaceDiagnostics,
    pooled_diagnostics: &'a SurfaceDiagnostics,
}

fn comparison_csv(prov: &Provenance, market: &str, report: &SurrogateReport) -> CsvTable {
    let mut t = CsvTable::new(
        &prov.with_schema(COMPARISON_CSV_SCHEMA),
        &["market", "kind", "wing", "x", "t_seconds", "w_original", "w_surrogate", "diff", "z"],
    );
    for c in &report.changes {
        t.row(&[
            Field::Str(market),
            Field::Str(report.spec.kind.name()),
            Field::Str(c.wing.symbol()),
            Field::F(c.x),
            Field::F(c.t_seconds),
            Field::F(c.original),
            Field::F(c.surrogate),
            Field::F(c.diff),
            Field::F(c.z),
        ]);
    }
    t
}

pub fn cmd_surrogate(cfg: &RunConfig) -> Result<OutputSet> {
    let prov = Provenance::new(cfg, "surrogate", SURROGATE_SCHEMA);
    let sc = &cfg.surrogate;
    let replicates = sc.replicates();
    let seed = sc.seed.unwrap_or(cfg.seed());
    let options = ExperimentOptions {
        decay_window: (cfg.collapse.decay_window[0], cfg.collapse.decay_window[1]),
        reference_ms: cfg.reference_ms()?,
        alpha: sc.alpha,
    };
    let markets = load_markets(cfg)?;
    let mut out = OutputSet::default();
    for m in &markets {
        let est = estimate_market(m, cfg)?;
        let (levels, horizons) = (&est.surface.levels, &est.surface.horizons);
        out.add_json(
            format!("{}.original.surface.json", m.name),
            &surface_file(&prov, cfg, &est, est.surface.clone(), None, None),
        )?;
        out.add_csv(format!("{}.original.surface.csv", m.name), surface_csv(&prov, &est.surface));
        for kind in sc.kinds() {
            let spec = SurrogateSpec { kind, seed };
            let mut pooled = FptAccumulator::new(levels, horizons);
            let mut surfaces = Vec::new();
            for r in 0..replicates {
                let acc = accumulate(&m.source, levels, horizons, Some((kind, seed, r)));
                pooled.merge(&acc);
                let s = acc.finish(m.name.clone());
                let d = SurrogateDescriptor { kind, seed, replicate: Some(r), replicates };
                let stem = format!("{}.{}.r{r}", m.name, kind.name());
                out.add_json(format!("{stem}.surface.json"), &surface_file(&prov, cfg, &est, s.clone(), Some(d), None))?;
                out.add_csv(format!("{stem}.surface.csv"), surface_csv(&prov, &s));
                surfaces.push(s);
            }
            let pooled = pooled.finish(m.name.clone());
            let stem = format!("{}.{}", m.name, kind.name());
            let d = SurrogateDescriptor { kind, seed, replicate: None, replicates };
            out.add_json(format!("{stem}.pooled.surface.json"), &surface_file(&prov, cfg, &est, pooled.clone(), Some(d), None))?;
            out.add_csv(format!("{stem}.pooled.surface.csv"), surface_csv(&prov, &pooled));
            let report = assemble_report(spec, est.surface.clone(), surfaces, pooled, &options);
            out.add_csv(format!("{stem}.comparison.csv"), comparison_csv(&prov, &m.name, &report));
            out.add_json(
                format!("{stem}.report.json"),
                &SurrogateFile {
                    provenance: prov.clone(),
                    market: &m.name,
                    spec,
                    replicates,
                    rng: &report.rng,
                    summary: &report.summary,
                    original_diagnostics: &report.original_diagnostics,
                    pooled_diagnostics: &report.pooled_diagnostics,
                },
            )?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonFit {
    pub t_seconds: f64,
    pub fit: FitResult,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitsFile {
    pub provenance: Provenance,
    pub inputs: Vec<Provenance>,
    pub objective: &'static str,
    pub optimizer: &'static str,
    pub fits: Vec<FitResult>,
    pub per_horizon: Vec<HorizonFit>,
    pub crossover: Vec<(String, CrossoverReport)>,
}

const OBJECTIVE: &str = "least squares in ln W over all cells with 0 < W < 1 and every horizon, each cell weighted by its path count; wings fitted separately";
const OPTIMIZER: &str = "bounded Levenberg-Marquardt on (shape, ln rate) from shape 1 (weibull) / 3 (student) and the rate matching W = 1/2 at the median horizon";

struct FitJob<'a> {
    surface: &'a FptSurface,
    family: Family,
    wing: Wing,
    horizon: Option<usize>,
}

fn fits_csv(prov: &Provenance, surfaces: &[FptSurface], fits: &[FitResult]) -> CsvTable {
    let mut t = CsvTable::new(
        &prov.with_schema(FITS_CSV_SCHEMA),
        &[
            "market", "wing", "beta", "beta_se", "b", "b_se", "alpha", "alpha_se", "a", "a_se", "rmse_weibull",
            "rmse_student",
        ],
    );
    for s in surfaces {
        for wing in Wing::BOTH {
            let get = |f: Family| fits.iter().find(|r| r.market == s.market && r.wing == wing && r.family == f);
            let (w, st) = (get(Family::Weibull), get(Family::Student));
            if w.is_none() && st.is_none() {
                continue;
            }
            let cols = |r: Option<&FitResult>| {
                [r.map(|r| r.shape), r.map(|r| r.shape_stderr), r.map(|r| r.rate), r.map(|r| r.rate_stderr)]
            };
            let mut row = vec![Field::Str(&s.market), Field::Str(wing.symbol())];
            row.extend(cols(w).into_iter().chain(cols(st)).map(Field::OptF));
            row.push(Field::OptF(w.map(|r| r.rmse_log)));
            row.push(Field::OptF(st.map(|r| r.rmse_log)));
            t.row(&row);
        }
    }
    t
}

fn fit_curves_csv(prov: &Provenance, surfaces: &[FptSurface], fits: &[FitResult]) -> CsvTable {
    let mut t = CsvTable::new(
        &prov.with_schema(FIT_CURVES_CSV_SCHEMA),
        &["market", "wing", "x", "t_seconds", "scaled_x", "w", "w_weibull", "w_student"],
    );
    for s in surfaces {
        for wing in Wing::BOTH {
            let get = |f: Family| fits.iter().find(|r| r.market == s.market && r.wing == wing && r.family == f);
            let (w, st) = (get(Family::Weibull), get(Family::Student));
            if w.is_none() && st.is_none() {
                continue;
            }
            for (_, j, x, t_s, value, _) in s.cells(wing) {
                t.row(&[
                    Field::Str(&s.market),
                    Field::Str(wing.symbol()),
                    Field::F(x),
                    Field::F(t_s),
                    Field::OptF(s.vt[j].map(|v| x.abs() / v)),
                    Field::F(value),
                    Field::OptF(w.map(|r| r.eval(x, t_s))),
                    Field::OptF(st.map(|r| r.eval(x, t_s))),
                ]);
            }
        }
    }
    t
}

pub fn cmd_fit(
    cfg: &RunConfig,
    surface_files: &[PathBuf],
    flag_families: &[Family],
    per_horizon_flag: bool,
) -> Result<OutputSet> {
    let prov = Provenance::new(cfg, "fit", FITS_SCHEMA);
    let mut families: Vec<Family> = match &cfg.fit.families {
        Some(f) => f.clone(),
        None if !flag_families.is_empty() => flag_families.to_vec(),
        None => vec![Family::Weibull, Family::Student],
    };
    families.sort_unstable();
    families.dedup();
    let per_horizon = cfg.fit.per_horizon || per_horizon_flag;
    let (mut surfaces, inputs) = surfaces_from(cfg, surface_files)?;
    for s in surfaces.iter_mut() {
        if s.quantity == Quantity::Survival {
            *s = survival(s);
        }
    }

    let mut jobs = Vec::new();
    for s in &surfaces {
        for wing in Wing::BOTH {
            for &family in &families {
                jobs.push(FitJob { surface: s, family, wing, horizon: None });
                if per_horizon {
                    for j in 0..s.horizons.len() {
                        jobs.push(FitJob { surface: s, family, wing, horizon: Some(j) });
                    }
                }
            }
        }
    }
    let results: Vec<Result<FitResult>> = jobs
        .par_iter()
        .map(|job| {
            let options = FitOptions { crossover_multiple: cfg.fit.crossover_multiple, horizon: job.horizon, ..FitOptions::default() };
            fit_model(job.surface, job.family, job.wing, &options).map_err(|e| {
                let at = job.horizon.map(|j| format!(" at {} s", job.surface.horizons.seconds(j))).unwrap_or_default();
                let e = CliError::from(e);
                let ctx = format!("{} fit of '{}' ({} wing{at})", job.family.name(), job.surface.market, job.wing.symbol());
                match e {
                    CliError::Numerical(m) => CliError::Numerical(format!("{ctx}: {m}")),
                    CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
                    CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
                    other => other,
                }
            })
        })
        .collect();
    let mut fits = Vec::new();
    let mut horizon_fits = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        let fit = r?;
        match job.horizon {
            None => fits.push(fit),
            Some(j) => horizon_fits.push(HorizonFit { t_seconds: job.surface.horizons.seconds(j), fit }),
        }
    }
    let mut crossover = Vec::new();
    if families.len() == 2 {
        for s in &surfaces {
            for wing in Wing::BOTH {
                let get = |f: Family| fits.iter().find(|r| r.market == s.market && r.wing == wing && r.family == f);
                if let (Some(w), Some(st)) = (get(Family::Weibull), get(Family::Student)) {
                    crossover.push((s.market.clone(), crossover_report(s, w, st, &cfg.fit.sweep)?));
                }
            }
        }
    }

    let mut out = OutputSet::default();
    out.add_csv("fits.csv", fits_csv(&prov, &surfaces, &fits));
    out.add_csv("fit_curves.csv", fit_curves_csv(&prov, &surfaces, &fits));
    if per_horizon {
        let mut t = CsvTable::new(
            &prov.with_schema(FITS_HORIZON_CSV_SCHEMA),
            &["market", "wing", "family", "t_seconds", "shape", "shape_se", "rate", "rate_se", "rmse_log"],
        );
        for h in &horizon_fits {
            let f = &h.fit;
            t.row(&[
                Field::Str(&f.market),
                Field::Str(f.wing.symbol()),
                Field::Str(f.family.name()),
                Field::F(h.t_seconds),
                Field::F(f.shape),
                Field::F(f.shape_stderr),
                Field::F(f.rate),
                Field::F(f.rate_stderr),
                Field::F(f.rmse_log),
            ]);
        }
        out.add_csv("fits_per_horizon.csv", t);
    }
    if !crossover.is_empty() {
        let mut t = CsvTable::new(
            &prov.with_schema(CROSSOVER_CSV_SCHEMA),
            &[
                "market", "wing", "multiple", "small_cells", "tail_cells", "weibull_small", "student_small", "weibull_tail",
                "student_tail", "mixed_rmse",
            ],
        );
        for (market, rep) in &crossover {
            for r in &rep.rows {
                t.row(&[
                    Field::Str(market),
                    Field::Str(rep.wing.symbol()),
                    Field::F(r.multiple),
                    Field::U(r.small_cells as u64),
                    Field::U(r.tail_cells as u64),
                    Field::OptF(r.weibull_small),
                    Field::OptF(r.student_small),
                    Field::OptF(r.weibull_tail),
                    Field::OptF(r.student_tail),
                    Field::OptF(r.mixed_rmse),
                ]);
            }
        }
        out.add_csv("crossover.csv", t);
    }
    out.add_json(
        "fits.json",
        &FitsFile { provenance: prov, inputs, objective: OBJECTIVE, optimizer: OPTIMIZER, fits, per_horizon: horizon_fits, crossover },
    )?;
    Ok(out)
}

/// Reads a surface JSON written by this tool.
pub fn load_surface_file(path: &Path) -> Result<SurfaceFile> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
