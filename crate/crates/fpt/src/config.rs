//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use fpt_core::fits::Family;
use fpt_core::ingest::SessionHours;
use fpt_core::scaling::{DEFAULT_BINS, DEFAULT_DECAY_WINDOW, REFERENCE_HORIZON_MS};
use fpt_core::synth::{Clock, IncrementDist, ProcessFamily, ProcessSpec};
use fpt_core::{AnchorPolicy, HorizonGrid, SessionCalendar, SurrogateKind, MS_PER_SEC};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::parse::FormatConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub synthetic: Vec<SyntheticMarket>,
    pub format: FormatConfig,
    pub calendar: CalendarConfig,
    pub ingest: IngestConfig,
    pub grid: GridConfig,
    pub collapse: CollapseConfig,
    pub surrogate: SurrogateConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One market per file, named after the file stem.
    pub files: Vec<PathBuf>,
    pub markets: Vec<MarketFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketFiles {
    pub name: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Wiener,
    IidWalk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementKind {
    Gaussian,
    Laplace,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Uniform,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMarket {
    pub name: String,
    pub process: ProcessKind,
    pub increments: IncrementKind,
    pub nu: f64,
    pub continuous_monitoring: bool,
    /// Volatility per square-root second.
    pub sigma: f64,
    pub clock: ClockKind,
    pub clock_step_seconds: f64,
    pub session_seconds: i64,
    pub paths: usize,
    /// Defaults to the run seed plus the market's position in the list.
    pub seed: Option<u64>,
    pub initial_price: f64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            process: ProcessKind::Wiener,
            increments: IncrementKind::Gaussian,
            nu: 3.5,
            continuous_monitoring: false,
            sigma: 1.0 / 86_400f64.sqrt(),
            clock: ClockKind::Uniform,
            clock_step_seconds: 1.0,
            session_seconds: 7200,
            paths: 10_000,
            seed: None,
            initial_price: 100.0,
        }
    }
}

impl SyntheticMarket {
    pub fn spec(&self, run_seed: u64, position: usize) -> Result<ProcessSpec> {
        let step_ms = (self.clock_step_seconds * MS_PER_SEC as f64).round();
        let clock = match self.clock {
            ClockKind::Uniform => Clock::Uniform { step_ms: step_ms as i64 },
            ClockKind::Exponential => Clock::Exponential { mean_ms: self.clock_step_seconds * MS_PER_SEC as f64 },
        };
        let family = match self.process {
            ProcessKind::Wiener => ProcessFamily::Wiener { continuous_monitoring: self.continuous_monitoring },
            ProcessKind::IidWalk => ProcessFamily::IidWalk {
                increments: match self.increments {
                    IncrementKind::Gaussian => IncrementDist::Gaussian,
                    IncrementKind::Laplace => IncrementDist::Laplace,
                    IncrementKind::Student => IncrementDist::Student { nu: self.nu },
                },
            },
        };
        let seed = self.seed.unwrap_or(run_seed.wrapping_add(position as u64));
        let mut spec = ProcessSpec::new(family, self.sigma, clock, self.session_seconds, self.paths, seed);
        spec.initial_price = self.initial_price;
        spec.validate().map_err(|e| CliError::Config(format!("synthetic market '{}': {e}", self.name)))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradingDays {
    Weekdays,
    EveryDay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalendarConfig {
    /// Local `HH:MM`.
    pub open: String,
    pub close: String,
    pub trim_minutes: u32,
    pub days: TradingDays,
    pub timezone: String,
    pub utc_offset_minutes: i32,
}

impl Default for CalendarConfig {
    fn default() -> Self {
        Self {
            open: "08:00".into(),
            close: "16:30".into(),
            trim_minutes: SessionCalendar::DEFAULT_TRIM_MINUTES,
            days: TradingDays::Weekdays,
            timezone: "UTC".into(),
            utc_offset_minutes: 0,
        }
    }
}

fn minute_of_day(s: &str) -> Result<u32> {
    let bad = || CliError::Config(format!("time of day '{s}' is not HH:MM"));
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    let (h, m): (u32, u32) = (h.trim().parse().map_err(|_| bad())?, m.trim().parse().map_err(|_| bad())?);
    if h > 24 || m > 59 || h * 60 + m > 24 * 60 {
        return Err(bad());
    }
    Ok(h * 60 + m)
}

impl CalendarConfig {
    pub fn calendar(&self) -> Result<SessionCalendar> {
        let open_minute = minute_of_day(&self.open)?;
        let close_minute = minute_of_day(&self.close)?;
        let mut cal = match self.days {
            TradingDays::Weekdays => SessionCalendar::weekdays(open_minute, close_minute),
            TradingDays::EveryDay => SessionCalendar::every_day(open_minute, close_minute),
        };
        cal.trim_minutes = self.trim_minutes;
        cal.timezone = self.timezone.clone();
        cal.utc_offset_minutes = self.utc_offset_minutes;
        cal.validate().map_err(|e| CliError::Config(format!("calendar: {e}")))?;
        Ok(cal)
    }

    pub fn from_calendar(cal: &SessionCalendar) -> Self {
        let hours = cal.hours.iter().flatten().next().copied().unwrap_or(SessionHours { open_minute: 0, close_minute: 1440 });
        let hhmm = |m: u32| format!("{:02}:{:02}", m / 60, m % 60);
        Self {
            open: hhmm(hours.open_minute),
            close: hhmm(hours.close_minute),
            trim_minutes: cal.trim_minutes,
            days: if cal.hours.iter().all(Option::is_some) { TradingDays::EveryDay } else { TradingDays::Weekdays },
            timezone: cal.timezone.clone(),
            utc_offset_minutes: cal.utc_offset_minutes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Stride,
    EveryTrade,
    SessionStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Absolute log-price jump across a session gap reported as a roll.
    pub roll_threshold: f64,
    pub anchor: AnchorKind,
    /// Stride between anchors; defaults to the largest horizon.
    pub stride_seconds: Option<f64>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { roll_threshold: 0.02, anchor: AnchorKind::Stride, stride_seconds: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizons_seconds: Vec<i64>,
    /// Explicit level magnitudes (log-return units), mirrored on both wings.
    /// When absent, `level_count` levels are log-spaced over
    /// `[level_lo, level_hi] * v_ref`.
    pub levels: Option<Vec<f64>>,
    pub level_lo: f64,
    pub level_hi: f64,
    pub level_count: usize,
    /// Horizon of `v_ref` and of the time-scaling volatility `v0`.
    pub reference_seconds: i64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizons_seconds: HorizonGrid::DEFAULT_SECONDS.to_vec(),
            levels: None,
            level_lo: 0.01,
            level_hi: 10.0,
            level_count: 40,
            reference_seconds: REFERENCE_HORIZON_MS / MS_PER_SEC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseConfig {
    pub bins: usize,
    /// Scaled-time window (seconds) of the survival decay fit.
    pub decay_window: [f64; 2],
    /// Levels of the time collapse: `time_level_count` targets log-spaced
    /// over `[time_level_lo, time_level_hi] * v0`.
    pub time_level_lo: f64,
    pub time_level_hi: f64,
    pub time_level_count: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            decay_window: [DEFAULT_DECAY_WINDOW.0, DEFAULT_DECAY_WINDOW.1],
            time_level_lo: 0.2,
            time_level_hi: 1.0,
            time_level_count: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    /// Unset means both kinds (or those given by `--kind`).
    pub kinds: Option<Vec<SurrogateKind>>,
    /// Unset means 1 (or `--replicates`).
    pub replicates: Option<u32>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    pub alpha: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { kinds: None, replicates: None, seed: None, alpha: 0.01 }
    }
}

impl SurrogateConfig {
    pub fn kinds(&self) -> Vec<SurrogateKind> {
        self.kinds.clone().unwrap_or_else(|| vec![SurrogateKind::ShuffleReturns, SurrogateKind::ShuffleTimes])
    }

    pub fn replicates(&self) -> u32 {
        self.replicates.unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Families to fit; unset means both (or those given by `--family`).
    pub families: Option<Vec<Family>>,
    pub crossover_multiple: f64,
    /// Also fit every horizon on its own.
    pub per_horizon: bool,
    /// Crossover boundaries to try, in units of `v_t`.
    pub sweep: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            families: None,
            crossover_multiple: 5.0,
            per_horizon: false,
            sweep: fpt_core::fits::default_sweep(),
        }
    }
}

/// Values given on the command line; the configuration file wins where
/// both set a value.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // relative data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.files.iter_mut().for_each(rebase);
        cfg.data.markets.iter_mut().flat_map(|m| m.files.iter_mut()).for_each(rebase);
        Ok(cfg)
    }

    pub fn merge_flags(mut self, flags: &FlagOverrides) -> Self {
        self.seed = self.seed.or(flags.seed);
        self.threads = self.threads.or(flags.threads);
        self.out = self.out.take().or_else(|| flags.out.clone());
        if self.data.files.is_empty() && self.data.markets.is_empty() {
            self.data.files = flags.inputs.clone();
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("fpt-out"))
    }

    pub fn has_files(&self) -> bool {
        !self.data.files.is_empty() || !self.data.markets.is_empty()
    }

    /// Exactly one data source must be configured.
    pub fn check_source(&self) -> Result<()> {
        match (self.has_files(), !self.synthetic.is_empty()) {
            (true, true) => Err(CliError::Config("configure either input files or synthetic markets, not both".into())),
            (false, false) => Err(CliError::Config("no data source: give input files or a [[synthetic]] market".into())),
            _ => Ok(()),
        }
    }

    pub fn horizons(&self) -> Result<HorizonGrid> {
        HorizonGrid::from_seconds(&self.grid.horizons_seconds).map_err(|e| CliError::Config(format!("grid: {e}")))
    }

    pub fn reference_ms(&self) -> Result<i64> {
        if self.grid.reference_seconds <= 0 {
            return Err(CliError::Config("grid.reference_seconds must be positive".into()));
        }
        Ok(self.grid.reference_seconds * MS_PER_SEC)
    }

    pub fn anchor(&self) -> Result<AnchorPolicy> {
        Ok(match self.ingest.anchor {
            AnchorKind::EveryTrade => AnchorPolicy::EveryTrade,
            AnchorKind::SessionStart => AnchorPolicy::SessionStart,
            AnchorKind::Stride => {
                let stride_ms = match self.ingest.stride_seconds {
                    Some(s) => (s * MS_PER_SEC as f64).round() as i64,
                    None => *self.horizons()?.ms().last().unwrap(),
                };
                if stride_ms <= 0 {
                    return Err(CliError::Config("ingest.stride_seconds must be positive".into()));
                }
                AnchorPolicy::Stride { stride_ms }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.format.validate()?;
        self.horizons()?;
        self.reference_ms()?;
        self.anchor()?;
        if self.has_files() {
            self.calendar.calendar()?;
        }
        if !(self.ingest.roll_threshold > 0.0) {
            return Err(CliError::Config("ingest.roll_threshold must be > 0".into()));
        }
        let g = &self.grid;
        if g.levels.is_none() && !(g.level_lo > 0.0 && g.level_hi > g.level_lo && g.level_count >= 1) {
            return Err(CliError::Config("grid: need 0 < level_lo < level_hi and level_count >= 1".into()));
        }
        let c = &self.collapse;
        if c.bins < 2 || !(c.decay_window[0] > 0.0 && c.decay_window[1] > c.decay_window[0]) {
            return Err(CliError::Config("collapse: need bins >= 2 and a positive increasing decay window".into()));
        }
        if !(c.time_level_lo > 0.0 && c.time_level_hi >= c.time_level_lo && c.time_level_count >= 1) {
            return Err(CliError::Config("collapse: invalid time-level range".into()));
        }
        if self.surrogate.replicates() == 0 || self.surrogate.kinds().is_empty() || !(self.surrogate.alpha > 0.0 && self.surrogate.alpha < 1.0) {
            return Err(CliError::Config("surrogate: need replicates >= 1 and 0 < alpha < 1".into()));
        }
        if self.fit.families.as_ref().is_some_and(|f| f.is_empty()) || self.fit.sweep.is_empty() || !(self.fit.crossover_multiple > 0.0) {
            return Err(CliError::Config("fit: need at least one family, a sweep and a positive crossover".into()));
        }
        let mut names: Vec<&str> = self.synthetic.iter().map(|m| m.name.as_str()).collect();
        names.extend(self.data.markets.iter().map(|m| m.name.as_str()));
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("market names must be unique".into()));
        }
        for (i, m) in self.synthetic.iter().enumerate() {
            m.spec(self.seed(), i)?;
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}
