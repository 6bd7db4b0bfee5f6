//! Delimited tables and JSON summaries. Floats carry 17 significant digits and
//! nothing time- or host-dependent is written, so equal configs give equal bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_header<W: Write>(w: &mut W, header: &[(String, String)]) -> Result<(), CliError> {
    for (k, v) in header {
        writeln!(w, "# {k} = {v}")?;
    }
    Ok(())
}

/// A comma-separated table after the `#` header lines.
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path, header: &[(String, String)]) -> Result<PathBuf, CliError> {
        let mut w = create(path)?;
        write_header(&mut w, header)?;
        writeln!(w, "{}", self.columns.join(","))?;
        for r in &self.rows {
            writeln!(w, "{}", r.join(","))?;
        }
        w.flush()?;
        Ok(path.to_path_buf())
    }
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    config: serde_json::Map<String, serde_json::Value>,
    #[serde(flatten)]
    body: &'a T,
}

/// Pretty JSON of `body` with the resolved config under `"config"`.
pub fn write_json<T: Serialize>(path: &Path, header: &[(String, String)], body: &T) -> Result<PathBuf, CliError> {
    let config = header.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &WithConfig { config, body })?;
    writeln!(w)?;
    w.flush()?;
    Ok(path.to_path_buf())
}
