//! Pareto-front CSV/JSON documents and the on-disk run directory.
//!
//! A run directory holds `config.echo`, `log.txt`, `model/`,
//! `fronts/layer_<l>.csv`, `report.json` and a `manifest.json` naming every
//! artifact written.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, GenerationStats, ParetoFront};
use crate::model_io;
use crate::network::{mask_from_hex, mask_to_hex, Network};
use crate::pipeline::SweepRow;

pub const FRONT_HEADER: [&str; 4] = ["filter_pct", "error", "retained_count", "mask_hex"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontRow {
    pub filter_pct: f64,
    pub error: f64,
    pub retained_count: usize,
    pub mask_hex: String,
}

impl FrontRow {
    pub fn mask(&self, num_filters: usize) -> Result<Vec<bool>> {
        mask_from_hex(&self.mask_hex, num_filters)
    }
}

pub fn front_rows(front: &ParetoFront) -> Vec<FrontRow> {
    front
        .members
        .iter()
        .map(|m| FrontRow {
            filter_pct: m.objectives.filter_pct,
            error: m.objectives.error,
            retained_count: m.retained(),
            mask_hex: mask_to_hex(&m.genes),
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::CorruptData(format!("front CSV: {e}"))
}

pub fn front_to_csv(front: &ParetoFront) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in front_rows(front) {
        w.serialize(row).map_err(csv_error)?;
    }
    if front.members.is_empty() {
        w.write_record(FRONT_HEADER).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::CorruptData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// Parses a front CSV, checking the header and that each mask agrees with
/// its retained count.
pub fn parse_front_csv(text: &str, num_filters: usize) -> Result<Vec<FrontRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(FRONT_HEADER) {
        return Err(Error::CorruptData(format!("unexpected front CSV header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<FrontRow>() {
        let row = rec.map_err(csv_error)?;
        let retained = row.mask(num_filters)?.iter().filter(|b| **b).count();
        if retained != row.retained_count {
            return Err(Error::CorruptData(format!(
                "mask {} retains {retained} filters, row says {}",
                row.mask_hex, row.retained_count
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// `fraction,remained_params_pct,accuracy` rows of a retention sweep.
pub fn sweep_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fraction", "remained_params_pct", "accuracy"]).map_err(csv_error)?;
    for r in rows {
        w.serialize((r.fraction, r.remained_params_pct, r.accuracy)).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::CorruptData(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

/// JSON record of one layer's evolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionDocument {
    pub layer: usize,
    pub num_filters: usize,
    pub config: EvolutionConfig,
    pub history: Vec<GenerationStats>,
    pub front: Vec<FrontRow>,
    pub knee_index: usize,
}

/// Default root for run directories: `$SMOEA_OUT_DIR`, else `runs`.
pub const OUT_DIR_ENV: &str = "SMOEA_OUT_DIR";

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub artifacts: Vec<String>,
    pub config_echo: String,
}

pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<String>,
    log: File,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let log_path = root.join("log.txt");
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        Ok(Self {
            root,
            artifacts: vec!["log.txt".into()],
            log,
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}").map_err(|e| Error::io(self.root.join("log.txt"), e))
    }

    fn record(&mut self, rel: &str) {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.record(rel);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidData(e.to_string()))?;
        self.write_text(rel, &text)
    }

    pub fn write_front(&mut self, layer: usize, front: &ParetoFront) -> Result<PathBuf> {
        self.write_text(&format!("fronts/layer_{layer}.csv"), &front_to_csv(front)?)
    }

    pub fn save_model(&mut self, net: &Network) -> Result<PathBuf> {
        let dir = self.root.join("model");
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        model_io::save_model(net, &dir)?;
        self.record("model/");
        Ok(dir)
    }

    /// Writes `config.echo` and `manifest.json`.
    pub fn finish(mut self, command: &str, config_echo: &str) -> Result<PathBuf> {
        self.write_text("config.echo", config_echo)?;
        self.record("manifest.json");
        let manifest = Manifest {
            command: command.to_string(),
            artifacts: self.artifacts.clone(),
            config_echo: config_echo.to_string(),
        };
        self.write_json("manifest.json", &manifest)?;
        self.log.flush().map_err(|e| Error::io(self.root.join("log.txt"), e))?;
        Ok(self.root)
    }
}
