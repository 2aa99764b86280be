//! Config-driven experiment runs: per query, retrieve, classify, compose,
//! generate and score, then aggregate into result tables.
//!
//! A run directory holds `report.json`, `report.csv`, `report.md`, optional
//! `topk.csv` / `topk.md`, and `manifest.toml`. The manifest embeds the
//! effective configuration and input checksums and can be passed back as
//! `--config` to repeat the run.

mod config;
mod presets;
mod runner;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub use config::{
    apply_overrides, BackendSection, ConfigError, CorpusSection, CounterKind, EvalSection,
    ExperimentConfig, Issue, NoiseSection, PromptSection, RetrieverKind, RetrieverSection,
    SweepSection,
};
pub use presets::{Cell, Grid, Layout, Preset};
pub use runner::{
    execute, run_experiment, tool_version, Manifest, RunError, RunOutput, RunReport, Session,
    SkippedCell,
};

use crate::eval::{render_table, ReportFormat};

/// A configuration read from disk, with manifest checksums when the file
/// was a run manifest.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub checksums: Option<BTreeMap<String, String>>,
}

/// Reads a config or manifest file and applies `key=value` overrides.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let is_manifest = table.contains_key("tool") && table.contains_key("config");
    let checksums = if is_manifest {
        let manifest =
            Manifest::deserialize(table.clone()).map_err(|e| ConfigError::Parse(e.to_string()))?;
        table = match table.remove("config") {
            Some(toml::Value::Table(t)) => t,
            _ => unreachable!("manifest config is a table"),
        };
        Some(manifest.checksums)
    } else {
        None
    };
    apply_overrides(&mut table, overrides)?;
    Ok(LoadedConfig {
        config: ExperimentConfig::from_table(table)?,
        checksums,
    })
}

/// Every checksum recorded in a manifest must match the freshly read input.
pub fn verify_checksums(
    expected: &BTreeMap<String, String>,
    actual: &BTreeMap<String, String>,
) -> Result<(), ConfigError> {
    for (key, want) in expected {
        let got = actual
            .get(key)
            .cloned()
            .unwrap_or_else(|| "<not read>".into());
        if &got != want {
            return Err(ConfigError::Checksum {
                key: key.clone(),
                expected: want.clone(),
                actual: got,
            });
        }
    }
    Ok(())
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, RunError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| RunError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(path)
}

/// Writes the report files and manifest into `dir`, creating it if needed.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<Vec<PathBuf>, RunError> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut json = serde_json::to_string_pretty(&output.report).expect("report serializes");
    json.push('\n');
    let manifest = toml::to_string(&output.manifest).expect("manifest serializes");
    let mut written = vec![
        write(dir, "report.json", &json)?,
        write(
            dir,
            "report.csv",
            &render_table(&output.report.table, ReportFormat::Csv),
        )?,
        write(
            dir,
            "report.md",
            &render_table(&output.report.table, ReportFormat::Markdown),
        )?,
    ];
    if let Some(topk) = &output.report.topk {
        written.push(write(
            dir,
            "topk.csv",
            &render_table(topk, ReportFormat::Csv),
        )?);
        written.push(write(
            dir,
            "topk.md",
            &render_table(topk, ReportFormat::Markdown),
        )?);
    }
    written.push(write(dir, "manifest.toml", &manifest)?);
    Ok(written)
}

/// Reads `report.json` from a run directory.
pub fn read_run(dir: &Path) -> Result<RunReport, RunError> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| RunError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| RunError::Io {
        path,
        message: e.to_string(),
    })
}
