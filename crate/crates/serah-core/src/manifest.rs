//! Acquisition manifest: one CSV row per raster on disk.
//!
//! Header: `path,sensor,orbit,date,cloud_frac,highprob_frac`. Paths are
//! relative to the manifest's directory; the parent directory of a path
//! is the tile identifier. `orbit` is empty for S2 rows.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dates::DateCode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sensor {
    S2,
    S1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orbit {
    Asc,
    Dsc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub sensor: Sensor,
    pub orbit: Option<Orbit>,
    pub date: DateCode,
    pub cloud_frac: f64,
    pub highprob_frac: f64,
}

impl ManifestRow {
    fn validate(&self, line: u64) -> Result<()> {
        let bad = |message: String| Error::Manifest { line, message };
        if !(0.0..=1.0).contains(&self.cloud_frac) {
            return Err(bad(format!("cloud_frac {} outside [0, 1]", self.cloud_frac)));
        }
        if !(0.0..=1.0).contains(&self.highprob_frac) {
            return Err(bad(format!("highprob_frac {} outside [0, 1]", self.highprob_frac)));
        }
        if self.sensor == Sensor::S1 && self.orbit.is_none() {
            return Err(bad("S1 row without orbit direction".into()));
        }
        if self.sensor == Sensor::S2 && self.orbit.is_some() {
            return Err(bad("S2 row with an orbit direction".into()));
        }
        if self.path.is_empty() {
            return Err(bad("empty path".into()));
        }
        Ok(())
    }

    /// Tile identifier: name of the path's parent directory.
    pub fn tile_id(&self) -> String {
        Path::new(&self.path)
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Manifest { line: 0, message: e.to_string() })?;
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<ManifestRow>() {
        match rec {
            Ok(row) => {
                // csv positions are byte offsets; report 1-based data line.
                let line = rows.len() as u64 + 2;
                row.validate(line)?;
                rows.push(row);
            }
            Err(e) => {
                let line = e
                    .position()
                    .map(|p| p.line())
                    .unwrap_or(rows.len() as u64 + 2);
                return Err(Error::Manifest { line, message: e.to_string() });
            }
        }
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| Error::Manifest { line: 0, message: e.to_string() })?;
    for row in rows {
        wtr.serialize(row)
            .map_err(|e| Error::Manifest { line: 0, message: e.to_string() })?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Groups manifest rows by tile id, preserving row order within a tile.
pub fn group_by_tile(rows: &[ManifestRow]) -> BTreeMap<String, Vec<&ManifestRow>> {
    let mut map: BTreeMap<String, Vec<&ManifestRow>> = BTreeMap::new();
    for row in rows {
        map.entry(row.tile_id()).or_default().push(row);
    }
    map
}

/// Resolves a manifest-relative path against the manifest directory.
pub fn resolve_path(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}
