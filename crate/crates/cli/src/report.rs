//! Report files. CSVs start with `#` comment lines carrying the schema
//! version and the experiment manifest as one line of JSON; JSON reports
//! hold both as fields.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::manifest::{ExperimentManifest, SCHEMA_VERSION};

pub fn write_csv<R: Serialize>(path: &Path, manifest: &ExperimentManifest, header: &[&str], rows: &[R]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "# manifest={}", serde_json::to_string(manifest)?)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    drop(w);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct JsonReport<'a, T: Serialize> {
    schema_version: u32,
    manifest: &'a ExperimentManifest,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, manifest: &ExperimentManifest, body: &T) -> Result<()> {
    let report = JsonReport {
        schema_version: SCHEMA_VERSION,
        manifest,
        body,
    };
    fs::write(path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))
}

/// Join layer indices as `1;3;4` so they fit in one CSV field.
pub fn layer_list(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}
