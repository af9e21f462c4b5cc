//! Provenance, hashing and all-or-nothing output trees.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fpt_core::rng::RNG_ALGORITHM;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = "fpt";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    pub seed: u64,
    pub rng: String,
    /// SHA-256 of the canonical JSON configuration (without `threads` and `out`).
    pub config_hash: String,
    /// SHA-256 of the settings that fix the meaning of a surface (grid,
    /// anchoring, calendar, collapse binning). Files from different runs
    /// can be combined only when this matches.
    pub analysis_hash: String,
}

fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn config_hash(cfg: &RunConfig) -> String {
    let mut canonical = cfg.clone();
    canonical.threads = None;
    canonical.out = None;
    sha256_json(&canonical)
}

pub fn analysis_hash(cfg: &RunConfig) -> String {
    sha256_json(&(&cfg.grid, &cfg.ingest, &cfg.calendar, &cfg.collapse))
}

impl Provenance {
    pub fn new(cfg: &RunConfig, command: &str, schema: &str) -> Self {
        Self {
            schema: schema.into(),
            tool: TOOL.into(),
            version: VERSION.into(),
            core_version: fpt_core::VERSION.into(),
            command: command.into(),
            seed: cfg.seed(),
            rng: RNG_ALGORITHM.into(),
            config_hash: config_hash(cfg),
            analysis_hash: analysis_hash(cfg),
        }
    }

    pub fn with_schema(&self, schema: &str) -> Self {
        Self { schema: schema.into(), ..self.clone() }
    }

    /// First line of every CSV file.
    pub fn csv_header(&self) -> String {
        format!(
            "# schema={} tool={} version={} seed={} config_hash={} analysis_hash={}\n",
            self.schema, self.tool, self.version, self.seed, self.config_hash, self.analysis_hash
        )
    }
}

/// Long-format CSV rows; floats use the shortest round-trip representation.
pub struct CsvTable {
    text: String,
}

impl CsvTable {
    pub fn new(provenance: &Provenance, columns: &[&str]) -> Self {
        let mut text = provenance.csv_header();
        text.push_str(&columns.join(","));
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, fields: &[Field<'_>]) {
        for (k, f) in fields.iter().enumerate() {
            if k > 0 {
                self.text.push(',');
            }
            match f {
                Field::Str(s) => {
                    if s.contains([',', '"', '\n']) {
                        let _ = write!(self.text, "\"{}\"", s.replace('"', "\"\""));
                    } else {
                        self.text.push_str(s);
                    }
                }
                Field::F(v) => {
                    let _ = write!(self.text, "{v}");
                }
                Field::OptF(v) => {
                    if let Some(v) = v {
                        let _ = write!(self.text, "{v}");
                    }
                }
                Field::U(v) => {
                    let _ = write!(self.text, "{v}");
                }
            }
        }
        self.text.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub enum Field<'a> {
    Str(&'a str),
    F(f64),
    OptF(Option<f64>),
    U(u64),
}

/// Files of one command, written only after every computation succeeded.
#[derive(Default)]
pub struct OutputSet {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Numerical(format!("cannot serialize output: {e}")))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn add_csv(&mut self, name: impl Into<String>, table: CsvTable) {
        self.add(name, table.into_bytes());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    /// Writes every file through a temporary sibling and a rename.
    pub fn commit(self, dir: &Path) -> Result<Vec<PathBuf>> {
        let werr = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CliError::Write { path, source }
        };
        fs::create_dir_all(dir).map_err(werr(dir))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            let tmp = dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, &bytes).map_err(werr(&tmp))?;
            fs::rename(&tmp, &path).map_err(werr(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Reads the provenance block of a JSON file written by this tool.
pub fn read_provenance(value: &serde_json::Value, path: &Path) -> Result<Provenance> {
    let p = value
        .get("provenance")
        .ok_or_else(|| CliError::Config(format!("{}: no provenance block", path.display())))?;
    serde_json::from_value(p.clone()).map_err(|e| CliError::Config(format!("{}: bad provenance: {e}", path.display())))
}
