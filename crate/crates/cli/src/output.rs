//! Artifact files. Floats are written in shortest round-trip form, so equal
//! numbers give equal bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::commands::CliError;

/// Writes files into one directory and remembers their names in order.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

/// JSON document carrying the provenance of its numbers.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: String,
    config_hash: &'a str,
    seed: u64,
    data: &'a T,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            debug_assert_eq!(r.len(), header.len());
            w.write_record(r).map_err(io)?;
        }
        w.flush()
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `{schema, config_hash, seed, data}` with `schema = "translab.<kind>/1"`.
    pub fn json<T: Serialize>(
        &mut self,
        name: &str,
        kind: &str,
        config_hash: &str,
        seed: u64,
        data: &T,
    ) -> Result<(), CliError> {
        let doc = Envelope {
            schema: format!("translab.{kind}/1"),
            config_hash,
            seed,
            data,
        };
        self.write_json(name, &doc)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}
