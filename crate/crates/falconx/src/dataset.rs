//! On-disk corpus: `manifest.json` plus one CSV per entity with header
//! `t,var_0,...`. Empty fields are missing values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use falconx_core::synth::{generate_entities, CorpusSpec};
use falconx_core::EntitySeries;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest directory.
    pub path: String,
    pub variates: usize,
    pub length: usize,
    #[serde(default)]
    pub frequency: String,
    #[serde(default)]
    pub generator: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entities: Vec<ManifestEntry>,
}

fn format_value(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:?}")
    }
}

fn write_entity(path: &Path, series: &EntitySeries) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..series.variates()).map(|v| format!("var_{v}")));
    w.write_record(&header).map_err(io)?;
    for t in 0..series.len() {
        let mut row = vec![t.to_string()];
        row.extend(series.values.iter().map(|v| format_value(v[t])));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `entities` with their generator metadata under `dir`.
pub fn write_dataset(dir: &Path, entities: &[(EntitySeries, BTreeMap<String, String>)]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        entities: Vec::with_capacity(entities.len()),
    };
    for (series, generator) in entities {
        let file = format!("{}.csv", series.id);
        write_entity(&dir.join(&file), series)?;
        manifest.entities.push(ManifestEntry {
            id: series.id.clone(),
            path: file,
            variates: series.variates(),
            length: series.len(),
            frequency: series.frequency.clone(),
            generator: generator.clone(),
        });
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::io(&path, e.into()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generates a synthetic corpus and writes it to `dir`.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64, dir: &Path) -> Result<Manifest> {
    let entities: Vec<_> = generate_entities(spec, seed)?
        .into_iter()
        .map(|e| (e.series, e.params.into_iter().collect()))
        .collect();
    write_dataset(dir, &entities)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        problems: vec![format!("malformed manifest: {e}")],
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Dataset {
            path,
            problems: vec![format!("unsupported version {} (expected {FORMAT_VERSION})", manifest.version)],
        });
    }
    Ok(manifest)
}

fn read_entity(dir: &Path, entry: &ManifestEntry, problems: &mut Vec<String>) -> Option<EntitySeries> {
    let path: PathBuf = dir.join(&entry.path);
    let before = problems.len();
    let mut reader = match csv::ReaderBuilder::new().flexible(true).from_path(&path) {
        Ok(r) => r,
        Err(e) => {
            problems.push(format!("{}: {e}", entry.path));
            return None;
        }
    };
    let columns = match reader.headers() {
        Ok(h) => h.len(),
        Err(e) => {
            problems.push(format!("{}: {e}", entry.path));
            return None;
        }
    };
    if columns != entry.variates + 1 {
        problems.push(format!(
            "{}: manifest declares {} variates, file has {} value columns",
            entry.path,
            entry.variates,
            columns.saturating_sub(1)
        ));
        return None;
    }
    let mut values = vec![Vec::with_capacity(entry.length); entry.variates];
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = match record {
            Ok(x) => x,
            Err(e) => {
                problems.push(format!("{} line {line}: {e}", entry.path));
                continue;
            }
        };
        if record.len() != columns {
            problems.push(format!("{} line {line}: {} fields, expected {columns}", entry.path, record.len()));
            continue;
        }
        for (v, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            let x = if field.is_empty() {
                f64::NAN
            } else {
                match field.parse::<f64>() {
                    Ok(x) => x,
                    Err(_) => {
                        problems.push(format!("{} line {line}: cannot parse {field:?}", entry.path));
                        f64::NAN
                    }
                }
            };
            values[v].push(x);
        }
    }
    let rows = values.first().map_or(0, Vec::len);
    if rows != entry.length {
        problems.push(format!(
            "{}: manifest declares length {}, file has {rows} rows",
            entry.path, entry.length
        ));
    }
    if problems.len() > before {
        return None;
    }
    EntitySeries::new(entry.id.clone(), values)
        .map(|s| s.with_frequency(entry.frequency.clone()))
        .map_err(|e| problems.push(format!("{}: {e}", entry.path)))
        .ok()
}

/// Loads every entity listed in the manifest. All problems are collected
/// before failing.
pub fn load_dataset(dir: &Path) -> Result<Vec<EntitySeries>> {
    let manifest = read_manifest(dir)?;
    let mut problems = Vec::new();
    let mut out = Vec::with_capacity(manifest.entities.len());
    for entry in &manifest.entities {
        if let Some(s) = read_entity(dir, entry, &mut problems) {
            out.push(s);
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Dataset {
            path: dir.to_path_buf(),
            problems,
        })
    }
}
