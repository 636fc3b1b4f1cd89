//! Reads a dataset directory (manifest + rasters + sidecars) into
//! training-ready samples.

use std::path::{Path, PathBuf};

use ndarray::Axis;
use rayon::prelude::*;

use crate::assembly::{
    assemble_triplets, build_sequence, filter_cloudy_image, finish_sample, mask_cloudy_pixels,
    CloudDecision, S2Acquisition, SequenceOutcome, TimeSeriesSample,
};
use crate::error::{Error, Result};
use crate::geotiff;
use crate::manifest::{self, ManifestRow, Orbit, Sensor};
use crate::raster::BandStack;
use crate::synth::{SplitSpec, TileMeta};

pub struct Dataset {
    pub manifest_path: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Dataset> {
        let rows = manifest::read_manifest(manifest_path)?;
        let split_path = manifest_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("split.json");
        let split: SplitSpec = serde_json::from_slice(
            &std::fs::read(&split_path).map_err(|e| Error::io(&split_path, e))?,
        )?;
        Ok(Dataset { manifest_path: manifest_path.to_path_buf(), rows, split })
    }

    pub fn rows_for_tile(&self, tile_id: &str) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.tile_id() == tile_id).collect()
    }

    /// Loads every tile of a split; rejected tiles (too few triplets)
    /// are skipped and counted.
    pub fn load_split(&self, tiles: &[String], t: usize, seed: u64) -> Result<(Vec<TimeSeriesSample>, usize)> {
        let results: Vec<Result<Option<TimeSeriesSample>>> = tiles
            .par_iter()
            .map(|tile_id| load_tile_sample(&self.manifest_path, &self.rows, tile_id, t, seed))
            .collect();
        let mut samples = Vec::new();
        let mut rejected = 0;
        for r in results {
            match r? {
                Some(s) => samples.push(s),
                None => rejected += 1,
            }
        }
        Ok((samples, rejected))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Splits a 12-page S2 file into the 10-band stack plus cloud rasters.
fn split_s2_pages(stack: BandStack) -> Result<(BandStack, ndarray::Array2<f64>, ndarray::Array2<bool>)> {
    let idx_of = |role: &str| {
        stack
            .band_roles
            .iter()
            .position(|r| r == role)
            .ok_or_else(|| Error::InvalidArgument(format!("S2 file missing page {role}")))
    };
    let mut bands = ndarray::Array3::zeros((10, stack.grid.height, stack.grid.width));
    let mut roles = Vec::with_capacity(10);
    for (i, role) in crate::synth::S2_ROLES.iter().enumerate() {
        let src = idx_of(role)?;
        bands
            .index_axis_mut(Axis(0), i)
            .assign(&stack.bands.index_axis(Axis(0), src));
        roles.push(role.to_string());
    }
    let cld = stack.bands.index_axis(Axis(0), idx_of("CLDPRB")?).to_owned();
    let qa = stack
        .bands
        .index_axis(Axis(0), idx_of("QA")?)
        .mapv(|v| v > 0.5);
    Ok((BandStack::new(stack.grid, bands, roles)?, cld, qa))
}

/// Builds the fixed-length sample for one tile, or None when the tile is
/// rejected for having fewer than the minimum number of triplets.
pub fn load_tile_sample(
    manifest_path: &Path,
    rows: &[ManifestRow],
    tile_id: &str,
    t: usize,
    seed: u64,
) -> Result<Option<TimeSeriesSample>> {
    let tile_rows: Vec<&ManifestRow> = rows.iter().filter(|r| r.tile_id() == tile_id).collect();
    if tile_rows.is_empty() {
        return Err(Error::InvalidArgument(format!("tile {tile_id} not in manifest")));
    }
    let tile_dir = manifest::resolve_path(manifest_path, &tile_rows[0].path)
        .parent()
        .map(Path::to_path_buf)
        .ok_or_else(|| Error::InvalidArgument("manifest path without parent".into()))?;

    let meta_path = tile_dir.join("tile_meta.json");
    let meta: TileMeta = serde_json::from_slice(
        &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )?;

    let mut s2_list: Vec<S2Acquisition> = Vec::new();
    let mut s1_asc: Vec<(BandStack, crate::dates::DateCode)> = Vec::new();
    let mut s1_dsc: Vec<(BandStack, crate::dates::DateCode)> = Vec::new();
    for row in &tile_rows {
        let path = manifest::resolve_path(manifest_path, &row.path);
        match row.sensor {
            Sensor::S2 => {
                if filter_cloudy_image(row.cloud_frac, row.highprob_frac) == CloudDecision::Discard {
                    continue;
                }
                let (stack, _) = geotiff::read_bandstack(&path)?;
                let (bands, cld, qa) = split_s2_pages(stack)?;
                let (bands, validity) = mask_cloudy_pixels(&bands, &cld, &qa)?;
                s2_list.push(S2Acquisition {
                    stack: bands,
                    date: row.date,
                    cloud_fraction: row.cloud_frac,
                    highprob_cloud_fraction: row.highprob_frac,
                    validity,
                });
            }
            Sensor::S1 => {
                let (stack, _) = geotiff::read_bandstack(&path)?;
                let list = match row.orbit {
                    Some(Orbit::Asc) => &mut s1_asc,
                    Some(Orbit::Dsc) => &mut s1_dsc,
                    None => return Err(Error::InvalidArgument("S1 row without orbit".into())),
                };
                list.push((stack, row.date));
            }
        }
    }
    s2_list.sort_by_key(|a| a.date.abs_days());
    s1_asc.sort_by_key(|a| a.1.abs_days());
    s1_dsc.sort_by_key(|a| a.1.abs_days());

    if s2_list.is_empty() {
        return Ok(None);
    }
    let triplets = assemble_triplets(s2_list, &s1_asc, &s1_dsc)?;
    let tile_seed = serah_nn::init::mix_seed(seed, fnv1a(tile_id));
    let mut rng = serah_nn::init::rng_from(tile_seed, 0xbead);
    let frames = match build_sequence(triplets, meta.als_date, t, &mut rng) {
        SequenceOutcome::Built(frames) => *frames,
        SequenceOutcome::Rejected { .. } => return Ok(None),
    };

    let reference = geotiff::read_heightmap(&tile_dir.join("scene_truth.tif"))?;
    let (_, vegetation_mask) = geotiff::read_mask(&tile_dir.join("vegetation_mask.tif"))?;
    finish_sample(frames, reference, vegetation_mask, tile_id.to_string(), tile_seed).map(Some)
}
