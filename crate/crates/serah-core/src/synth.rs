//! Procedural canopy scenes and the forward sensor model that renders
//! them into multi-date 10 m triplets.
//!
//! A scene is a max-composite of parabolic crown domes over flat ground
//! at 2.5 m resolution. An acquisition renders every band from the truth
//! heights, applies a seasonal modulation (optical only), translates by
//! a sub-pixel shift, area-averages 4x4 down to 10 m, and adds seeded
//! Gaussian noise. The sub-pixel shifts between revisits are what makes
//! the stack carry more spatial information than any single image.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::{mask_cloudy_pixels, AcquisitionTriplet};
use crate::dates::DateCode;
use crate::error::{Error, Result};
use crate::geotiff;
use crate::manifest::{self, ManifestRow, Orbit, Sensor};
use crate::raster::{BandStack, HeightMap, RasterGrid, DEFAULT_NODATA};

pub const S2_ROLES: [&str; 10] = ["B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneParams {
    /// Scene edge length in 2.5 m pixels (divisible by 4).
    pub extent: usize,
    pub trees_per_ha: f64,
    pub height_range: (f64, f64),
    /// Crown radius range in meters.
    pub crown_radius_range: (f64, f64),
    /// Relative seasonal amplitude per optical band.
    pub seasonal_amplitude: [f64; 10],
    /// Additive Gaussian noise std per band (14).
    pub noise_std: [f64; 14],
    pub seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            extent: 64,
            trees_per_ha: 140.0,
            height_range: (4.0, 28.0),
            crown_radius_range: (2.0, 7.0),
            seasonal_amplitude: [0.05, 0.06, 0.08, 0.10, 0.12, 0.12, 0.15, 0.15, 0.06, 0.05],
            noise_std: [
                0.004, 0.004, 0.004, 0.005, 0.005, 0.005, 0.006, 0.006, 0.005, 0.005, 0.25, 0.25,
                0.25, 0.25,
            ],
            seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.extent % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "scene extent {} must be a positive multiple of 4",
                self.extent
            )));
        }
        let (h0, h1) = self.height_range;
        if !(h0 >= 0.0 && h1 >= h0 && h1 <= 60.0) {
            return Err(Error::InvalidArgument(format!("height range ({h0}, {h1}) invalid (max 60 m)")));
        }
        let (r0, r1) = self.crown_radius_range;
        if !(r0 > 0.0 && r1 >= r0) {
            return Err(Error::InvalidArgument("crown radius range must be positive".into()));
        }
        if self.trees_per_ha < 0.0 {
            return Err(Error::InvalidArgument("tree density must be non-negative".into()));
        }
        Ok(())
    }
}

pub const SCENE_RESOLUTION: f64 = 2.5;
/// Vegetation-mask threshold on truth heights, meters.
pub const VEGETATION_THRESHOLD: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub truth: HeightMap,
    pub vegetation_mask: Array2<bool>,
    pub params: SceneParams,
}

/// Max-composited random parabolic crowns over a zero ground plane.
pub fn generate_canopy_scene(params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let e = params.extent;
    let area_ha = (e as f64 * SCENE_RESOLUTION).powi(2) / 1e4;
    let n_trees = (params.trees_per_ha * area_ha).round() as usize;
    let mut rng = serah_nn::init::rng_from(params.seed, 0x5ce9e);
    let mut truth = Array2::<f64>::zeros((e, e));
    for _ in 0..n_trees {
        // Crown apexes snap to pixel centers so a tree's height is
        // attained exactly by the rasterized truth.
        let cy = rng.random_range(0.0..e as f64).floor() + 0.5;
        let cx = rng.random_range(0.0..e as f64).floor() + 0.5;
        let h = rng.random_range(params.height_range.0..=params.height_range.1);
        let rad = rng.random_range(params.crown_radius_range.0..=params.crown_radius_range.1)
            / SCENE_RESOLUTION;
        let r0 = ((cy - rad).floor().max(0.0)) as usize;
        let r1 = ((cy + rad).ceil().min(e as f64)) as usize;
        let c0 = ((cx - rad).floor().max(0.0)) as usize;
        let c1 = ((cx + rad).ceil().min(e as f64)) as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let d2 = (dy * dy + dx * dx) / (rad * rad);
                if d2 < 1.0 {
                    let v = h * (1.0 - d2);
                    if v > truth[[r, c]] {
                        truth[[r, c]] = v;
                    }
                }
            }
        }
    }
    let vegetation_mask = truth.mapv(|v| v > VEGETATION_THRESHOLD);
    let grid = RasterGrid::new(0.0, e as f64 * SCENE_RESOLUTION, SCENE_RESOLUTION, e, e)?;
    Ok(SyntheticScene {
        truth: HeightMap::new(grid, truth, DEFAULT_NODATA)?,
        vegetation_mask,
        params: params.clone(),
    })
}

/// Per-band reflectance constants: bare-soil value, low/high canopy
/// values and the height scale of the saturating response.
struct BandBasis {
    soil: f64,
    veg_lo: f64,
    veg_hi: f64,
    h_scale: f64,
}

const S2_BASIS: [BandBasis; 10] = [
    BandBasis { soil: 0.11, veg_lo: 0.06, veg_hi: 0.030, h_scale: 12.0 }, // B2
    BandBasis { soil: 0.12, veg_lo: 0.08, veg_hi: 0.045, h_scale: 12.0 }, // B3
    BandBasis { soil: 0.13, veg_lo: 0.07, veg_hi: 0.030, h_scale: 12.0 }, // B4
    BandBasis { soil: 0.16, veg_lo: 0.12, veg_hi: 0.190, h_scale: 10.0 }, // B5
    BandBasis { soil: 0.19, veg_lo: 0.18, veg_hi: 0.320, h_scale: 10.0 }, // B6
    BandBasis { soil: 0.21, veg_lo: 0.21, veg_hi: 0.380, h_scale: 10.0 }, // B7
    BandBasis { soil: 0.23, veg_lo: 0.24, veg_hi: 0.430, h_scale: 9.0 },  // B8
    BandBasis { soil: 0.23, veg_lo: 0.25, veg_hi: 0.450, h_scale: 9.0 },  // B8A
    BandBasis { soil: 0.26, veg_lo: 0.18, veg_hi: 0.120, h_scale: 14.0 }, // B11
    BandBasis { soil: 0.22, veg_lo: 0.12, veg_hi: 0.060, h_scale: 14.0 }, // B12
];

/// (VV, VH) backscatter responses; the descending pass sees the canopy
/// from the opposite side and carries a small constant offset.
const S1_BASIS: [BandBasis; 2] = [
    BandBasis { soil: -14.0, veg_lo: -12.0, veg_hi: -7.0, h_scale: 9.0 },
    BandBasis { soil: -20.0, veg_lo: -17.0, veg_hi: -11.0, h_scale: 9.0 },
];
const S1_DSC_OFFSET: [f64; 2] = [-0.6, -0.4];

/// Canopy cover proxy used to mix soil and vegetation responses.
#[inline]
fn cover_fraction(h: f64) -> f64 {
    1.0 - (-h / 4.0).exp()
}

#[inline]
fn band_value(b: &BandBasis, h: f64) -> f64 {
    let kappa = cover_fraction(h);
    let veg = b.veg_lo + (b.veg_hi - b.veg_lo) * (1.0 - (-h / b.h_scale).exp());
    b.soil * (1.0 - kappa) + veg * kappa
}

/// Seasonal modulation for optical bands: relative sinusoid over the
/// year peaking in early summer.
#[inline]
fn seasonal_factor(amplitude: f64, doy: u32) -> f64 {
    1.0 + amplitude * (2.0 * std::f64::consts::PI * (doy as f64 - 80.0) / 365.25).sin()
}

/// Samples `img` at (r + dy, c + dx) with bilinear weights and edge clamp.
fn shifted_sample(img: &Array2<f64>, r: usize, c: usize, dy: f64, dx: f64) -> f64 {
    let (h, w) = img.dim();
    let y = (r as f64 + dy).clamp(0.0, (h - 1) as f64);
    let x = (c as f64 + dx).clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    img[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
        + img[[y0, x1]] * (1.0 - fy) * fx
        + img[[y1, x0]] * fy * (1.0 - fx)
        + img[[y1, x1]] * fy * fx
}

/// Shifts a 2.5 m band image by (dx, dy) and area-averages 4x4 blocks to
/// the 10 m grid.
fn shift_and_pool(band_hr: &Array2<f64>, shift: (f64, f64)) -> Array2<f64> {
    let (h, w) = band_hr.dim();
    let (oh, ow) = (h / 4, w / 4);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    acc += shifted_sample(band_hr, r * 4 + i, c * 4 + j, shift.1, shift.0);
                }
            }
            out[[r, c]] = acc / 16.0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CloudSpec {
    /// Disk center on the 10 m grid, pixels.
    pub center: (f64, f64),
    /// Disk radius, 10 m pixels.
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AcqSpec {
    pub s2_date: DateCode,
    pub s1_asc_date: DateCode,
    pub s1_dsc_date: DateCode,
    /// Sub-pixel shift (dx, dy) in [0, 1)^2, units of 2.5 m pixels.
    pub shift: (f64, f64),
    pub cloud: Option<CloudSpec>,
}

/// A rendered S2 acquisition plus its cloud rasters, and the two S1
/// stacks, all on the shared 10 m grid.
pub struct RenderedAcquisition {
    pub grid_10m: RasterGrid,
    pub s2: BandStack,
    pub cloud_prob: Array2<f64>,
    pub qa: Array2<bool>,
    pub cloud_fraction: f64,
    pub highprob_fraction: f64,
    pub s1_asc: BandStack,
    pub s1_dsc: BandStack,
    pub spec: AcqSpec,
}

const CLOUD_REFLECTANCE: f64 = 0.72;

pub fn render_acquisition(scene: &SyntheticScene, spec: &AcqSpec) -> Result<RenderedAcquisition> {
    let (dx, dy) = spec.shift;
    if !(0.0..1.0).contains(&dx) || !(0.0..1.0).contains(&dy) {
        return Err(Error::InvalidArgument(format!("shift ({dx}, {dy}) outside [0,1)^2")));
    }
    let e = scene.params.extent;
    let grid_10m = RasterGrid::new(
        scene.truth.grid.origin_x,
        scene.truth.grid.origin_y,
        SCENE_RESOLUTION * 4.0,
        e / 4,
        e / 4,
    )?;
    let (oh, ow) = (e / 4, e / 4);
    let truth = &scene.truth.values;

    let render_band = |basis: &BandBasis, season: f64, noise_tag: u64, extra: f64| -> Array2<f64> {
        let hr = truth.mapv(|h| band_value(basis, h) * season + extra);
        let mut lr = shift_and_pool(&hr, spec.shift);
        let std = scene.params.noise_std[(noise_tag % 14) as usize];
        if std > 0.0 {
            let mut rng = serah_nn::init::rng_from(
                scene.params.seed,
                0xace0 ^ (spec.s2_date.abs_days() as u64).wrapping_mul(31) ^ noise_tag,
            );
            let dist = Normal::new(0.0, std).expect("valid noise std");
            lr.mapv_inplace(|v| v + dist.sample(&mut rng));
        }
        lr
    };

    // Optical bands with seasonal modulation.
    let mut s2_bands = Array3::zeros((10, oh, ow));
    for (bi, basis) in S2_BASIS.iter().enumerate() {
        let season = seasonal_factor(scene.params.seasonal_amplitude[bi], spec.s2_date.doy);
        s2_bands
            .index_axis_mut(ndarray::Axis(0), bi)
            .assign(&render_band(basis, season, bi as u64, 0.0));
    }

    // Clouds overwrite optical reflectance and set the probability/QA rasters.
    let mut cloud_prob = Array2::<f64>::zeros((oh, ow));
    let mut qa = Array2::from_elem((oh, ow), false);
    if let Some(cloud) = &spec.cloud {
        for r in 0..oh {
            for c in 0..ow {
                let d = ((r as f64 + 0.5 - cloud.center.1).powi(2)
                    + (c as f64 + 0.5 - cloud.center.0).powi(2))
                .sqrt();
                if d <= cloud.radius {
                    cloud_prob[[r, c]] = 1.0;
                    qa[[r, c]] = true;
                    for b in 0..10 {
                        s2_bands[[b, r, c]] = CLOUD_REFLECTANCE;
                    }
                }
            }
        }
    }
    let n_px = (oh * ow) as f64;
    let cloud_fraction = cloud_prob.iter().filter(|p| **p > 0.40).count() as f64 / n_px;
    let highprob_fraction = cloud_prob.iter().filter(|p| **p > 0.65).count() as f64 / n_px;

    // Radar bands: structure-sensitive, season-insensitive.
    let mut asc = Array3::zeros((2, oh, ow));
    let mut dsc = Array3::zeros((2, oh, ow));
    for (bi, basis) in S1_BASIS.iter().enumerate() {
        asc.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&render_band(basis, 1.0, 10 + bi as u64, 0.0));
        dsc.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&render_band(basis, 1.0, 12 + bi as u64, S1_DSC_OFFSET[bi]));
    }

    Ok(RenderedAcquisition {
        grid_10m,
        s2: BandStack::new(grid_10m, s2_bands, S2_ROLES.iter().map(|s| s.to_string()).collect())?,
        cloud_prob,
        qa,
        cloud_fraction,
        highprob_fraction,
        s1_asc: BandStack::new(grid_10m, asc, vec!["VVasc".into(), "VHasc".into()])?,
        s1_dsc: BandStack::new(grid_10m, dsc, vec!["VVdsc".into(), "VHdsc".into()])?,
        spec: spec.clone(),
    })
}

/// Renders and masks in one step, yielding a ready triplet.
pub fn render_triplet(scene: &SyntheticScene, spec: &AcqSpec) -> Result<AcquisitionTriplet> {
    let r = render_acquisition(scene, spec)?;
    let (s2, validity) = mask_cloudy_pixels(&r.s2, &r.cloud_prob, &r.qa)?;
    AcquisitionTriplet::new(
        s2,
        r.s1_asc,
        r.s1_dsc,
        spec.s2_date,
        r.cloud_fraction,
        r.highprob_fraction,
        validity,
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TileDatePlan {
    pub als_date: DateCode,
    pub acqs: Vec<AcqSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatePlan {
    pub tiles: Vec<TileDatePlan>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatePlanConfig {
    /// Acquisition count drawn uniformly from this inclusive range
    /// (defaults average 13.5 per tile).
    pub min_acquisitions: usize,
    pub max_acquisitions: usize,
    /// Acquisitions fall within +/- this many days of the reference date.
    pub window_days: i64,
    /// Probability that an acquisition carries a cloud disk.
    pub cloud_probability: f64,
    pub base_date: DateCode,
}

impl Default for DatePlanConfig {
    fn default() -> Self {
        DatePlanConfig {
            min_acquisitions: 11,
            max_acquisitions: 16,
            window_days: 60,
            cloud_probability: 0.12,
            base_date: DateCode { year: 2021, doy: 166 },
        }
    }
}

impl DatePlan {
    pub fn generate(n_tiles: usize, cfg: &DatePlanConfig, extent_10m: usize, master_seed: u64) -> DatePlan {
        let mut tiles = Vec::with_capacity(n_tiles);
        for tile in 0..n_tiles {
            let mut rng = serah_nn::init::rng_from(master_seed, 0xda7e ^ (tile as u64) << 8);
            let n = rng.random_range(cfg.min_acquisitions..=cfg.max_acquisitions);
            let mut offsets: Vec<i64> = Vec::new();
            while offsets.len() < n {
                let o = rng.random_range(-cfg.window_days..=cfg.window_days);
                if !offsets.contains(&o) {
                    offsets.push(o);
                }
            }
            offsets.sort_unstable();
            let acqs = offsets
                .into_iter()
                .map(|o| {
                    let s2_date = cfg.base_date.offset_days(o);
                    let cloud = if rng.random_range(0.0..1.0) < cfg.cloud_probability {
                        Some(CloudSpec {
                            center: (
                                rng.random_range(0.0..extent_10m as f64),
                                rng.random_range(0.0..extent_10m as f64),
                            ),
                            radius: rng.random_range(2.0..extent_10m as f64 * 0.8),
                        })
                    } else {
                        None
                    };
                    AcqSpec {
                        s2_date,
                        s1_asc_date: s2_date.offset_days(rng.random_range(-3..=3)),
                        s1_dsc_date: s2_date.offset_days(rng.random_range(-3..=3)),
                        shift: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                        cloud,
                    }
                })
                .collect();
            tiles.push(TileDatePlan { als_date: cfg.base_date, acqs });
        }
        DatePlan { tiles }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Per-tile metadata sidecar consumed by the ingestion step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TileMeta {
    pub als_date: DateCode,
    pub seed: u64,
    pub shifts: Vec<(f64, f64)>,
}

/// Writes a full synthetic dataset: per-tile truth, vegetation mask,
/// acquisition rasters, metadata sidecars, one manifest, and the split
/// assignment. Returns the manifest path.
pub fn generate_dataset(
    root: &Path,
    base_params: &SceneParams,
    plan: &DatePlan,
    split: (usize, usize, usize),
    master_seed: u64,
) -> Result<std::path::PathBuf> {
    let n_tiles = plan.tiles.len();
    if split.0 + split.1 + split.2 != n_tiles {
        return Err(Error::InvalidArgument(format!(
            "split {:?} does not cover {n_tiles} tiles",
            split
        )));
    }
    std::fs::create_dir_all(root.join("tiles")).map_err(|e| Error::io(root, e))?;
    let mut rows: Vec<ManifestRow> = Vec::new();
    let mut split_spec = SplitSpec { train: vec![], val: vec![], test: vec![] };

    let tile_results: Vec<Result<(Vec<ManifestRow>, String)>> = {
        use rayon::prelude::*;
        (0..n_tiles)
            .into_par_iter()
            .map(|tile_idx| render_one_tile(root, base_params, plan, master_seed, tile_idx))
            .collect()
    };
    for (tile_idx, res) in tile_results.into_iter().enumerate() {
        let (tile_rows, tile_id) = res?;
        rows.extend(tile_rows);
        if tile_idx < split.0 {
            split_spec.train.push(tile_id);
        } else if tile_idx < split.0 + split.1 {
            split_spec.val.push(tile_id);
        } else {
            split_spec.test.push(tile_id);
        }
    }

    let manifest_path = root.join("manifest.csv");
    manifest::write_manifest(&manifest_path, &rows)?;
    let split_path = root.join("split.json");
    std::fs::write(&split_path, serde_json::to_vec_pretty(&split_spec)?)
        .map_err(|e| Error::io(&split_path, e))?;
    Ok(manifest_path)
}

fn render_one_tile(
    root: &Path,
    base_params: &SceneParams,
    plan: &DatePlan,
    master_seed: u64,
    tile_idx: usize,
) -> Result<(Vec<ManifestRow>, String)> {
    let tile_id = format!("t{tile_idx:04}");
    let tile_dir = root.join("tiles").join(&tile_id);
    std::fs::create_dir_all(&tile_dir).map_err(|e| Error::io(&tile_dir, e))?;
    let tile_plan = &plan.tiles[tile_idx];

    let mut params = base_params.clone();
    params.seed = serah_nn::init::mix_seed(master_seed, 0x7157 ^ tile_idx as u64);
    // Distinct map origin per tile.
    let mut scene = generate_canopy_scene(&params)?;
    let offset_x = tile_idx as f64 * (params.extent as f64 * SCENE_RESOLUTION + 100.0);
    scene.truth.grid.origin_x += offset_x;

    geotiff::write_heightmap(&tile_dir.join("scene_truth.tif"), &scene.truth)?;
    geotiff::write_mask(
        &tile_dir.join("vegetation_mask.tif"),
        &scene.truth.grid,
        &scene.vegetation_mask,
    )?;
    let meta = TileMeta {
        als_date: tile_plan.als_date,
        seed: params.seed,
        shifts: tile_plan.acqs.iter().map(|a| a.shift).collect(),
    };
    let meta_path = tile_dir.join("tile_meta.json");
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let mut rows = Vec::new();
    let rel = |name: &str| format!("tiles/{tile_id}/{name}");
    let mut written_s1: Vec<String> = Vec::new();
    for spec in &tile_plan.acqs {
        let r = render_acquisition(&scene, spec)?;
        // S2 file: 10 bands + cloud probability + QA flag pages.
        let s2_name = format!("s2_{}.tif", spec.s2_date);
        let mut pages: Vec<(String, Array2<f64>)> = Vec::new();
        for (i, role) in S2_ROLES.iter().enumerate() {
            pages.push((role.to_string(), r.s2.bands.index_axis(ndarray::Axis(0), i).to_owned()));
        }
        pages.push(("CLDPRB".into(), r.cloud_prob.clone()));
        pages.push(("QA".into(), r.qa.mapv(|b| if b { 1.0 } else { 0.0 })));
        let refs: Vec<(&str, &Array2<f64>)> = pages.iter().map(|(n, v)| (n.as_str(), v)).collect();
        geotiff::write_pages(&tile_dir.join(&s2_name), &r.grid_10m, None, &refs)?;
        rows.push(ManifestRow {
            path: rel(&s2_name),
            sensor: Sensor::S2,
            orbit: None,
            date: spec.s2_date,
            cloud_frac: r.cloud_fraction,
            highprob_frac: r.highprob_fraction,
        });
        // S1 files are deduplicated by date; pairing may reuse them.
        for (stack, date, orbit, prefix) in [
            (&r.s1_asc, spec.s1_asc_date, Orbit::Asc, "s1a"),
            (&r.s1_dsc, spec.s1_dsc_date, Orbit::Dsc, "s1d"),
        ] {
            let name = format!("{prefix}_{date}.tif");
            if written_s1.contains(&name) {
                continue;
            }
            geotiff::write_bandstack(&tile_dir.join(&name), stack, None)?;
            written_s1.push(name.clone());
            rows.push(ManifestRow {
                path: rel(&name),
                sensor: Sensor::S1,
                orbit: Some(orbit),
                date,
                cloud_frac: 0.0,
                highprob_frac: 0.0,
            });
        }
    }
    Ok((rows, tile_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> SceneParams {
        SceneParams { extent: 32, seed, ..Default::default() }
    }

    #[test]
    fn zero_density_gives_empty_scene() {
        let params = SceneParams { trees_per_ha: 0.0, ..tiny_params(1) };
        let scene = generate_canopy_scene(&params).unwrap();
        assert!(scene.truth.values.iter().all(|v| *v == 0.0));
        assert!(scene.vegetation_mask.iter().all(|m| !m));
    }

    #[test]
    fn single_tree_peaks_at_its_height() {
        // Density chosen to yield exactly one tree on a 32-pixel scene
        // (0.64 ha): 1 / 0.64 = 1.5625 trees/ha.
        let params = SceneParams {
            trees_per_ha: 1.5625,
            height_range: (20.0, 20.0),
            crown_radius_range: (5.0, 5.0),
            ..tiny_params(7)
        };
        let scene = generate_canopy_scene(&params).unwrap();
        let max = scene.truth.values.iter().cloned().fold(0.0, f64::max);
        assert!((max - 20.0).abs() < 1e-6, "peak {max} != 20");
    }

    #[test]
    fn same_seed_reproduces_scene_bitwise() {
        let a = generate_canopy_scene(&tiny_params(42)).unwrap();
        let b = generate_canopy_scene(&tiny_params(42)).unwrap();
        assert_eq!(a.truth.values, b.truth.values);
    }

    #[test]
    fn mask_follows_threshold_exactly() {
        let scene = generate_canopy_scene(&tiny_params(3)).unwrap();
        for (v, m) in scene.truth.values.iter().zip(scene.vegetation_mask.iter()) {
            assert_eq!(*m, *v > VEGETATION_THRESHOLD);
        }
    }

    fn noiseless(seed: u64) -> SceneParams {
        SceneParams { noise_std: [0.0; 14], ..tiny_params(seed) }
    }

    fn spec_at(shift: (f64, f64)) -> AcqSpec {
        let d = DateCode::from_iso("2021-06-15").unwrap();
        AcqSpec { s2_date: d, s1_asc_date: d, s1_dsc_date: d, shift, cloud: None }
    }

    #[test]
    fn flat_scene_renders_constant_bands() {
        let params = SceneParams { trees_per_ha: 0.0, ..noiseless(5) };
        let scene = generate_canopy_scene(&params).unwrap();
        let r = render_acquisition(&scene, &spec_at((0.0, 0.0))).unwrap();
        for b in 0..10 {
            let band = r.s2.bands.index_axis(ndarray::Axis(0), b);
            let first = band[[0, 0]];
            assert!(band.iter().all(|v| (*v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn area_average_conserves_mean_of_shifted_image() {
        let scene = generate_canopy_scene(&noiseless(11)).unwrap();
        let shift = (0.37, 0.61);
        let r = render_acquisition(&scene, &spec_at(shift)).unwrap();
        // Reconstruct the shifted 2.5 m band and compare means.
        for (bi, basis) in S2_BASIS.iter().enumerate().take(3) {
            let season = seasonal_factor(scene.params.seasonal_amplitude[bi], 166);
            let hr = scene.truth.values.mapv(|h| band_value(basis, h) * season);
            let (h, w) = hr.dim();
            let mut shifted = Array2::<f64>::zeros((h, w));
            for rr in 0..h {
                for cc in 0..w {
                    shifted[[rr, cc]] = shifted_sample(&hr, rr, cc, shift.1, shift.0);
                }
            }
            let lr = r.s2.bands.index_axis(ndarray::Axis(0), bi);
            let mean_hr = shifted.sum() / shifted.len() as f64;
            let mean_lr = lr.sum() / lr.len() as f64;
            assert!(
                (mean_hr - mean_lr).abs() < 1e-6,
                "band {bi}: {mean_hr} vs {mean_lr}"
            );
        }
    }

    #[test]
    fn shifts_change_images_near_edges_only() {
        let params = SceneParams { trees_per_ha: 25.0, ..noiseless(13) };
        let scene = generate_canopy_scene(&params).unwrap();
        let a = render_acquisition(&scene, &spec_at((0.0, 0.0))).unwrap();
        let b = render_acquisition(&scene, &spec_at((0.5, 0.0))).unwrap();
        let band_a = a.s2.bands.index_axis(ndarray::Axis(0), 6); // B8
        let band_b = b.s2.bands.index_axis(ndarray::Axis(0), 6);
        // Identify 10 m cells whose 4x4 truth block (plus one-pixel halo)
        // is constant: the shifted sample there is unchanged.
        let truth = &scene.truth.values;
        let mut max_flat = 0.0f64;
        let mut max_any = 0.0f64;
        for r in 0..8 {
            for c in 0..8 {
                let diff = (band_a[[r, c]] - band_b[[r, c]]).abs();
                max_any = max_any.max(diff);
                let r0 = (r * 4).saturating_sub(1);
                let c0 = (c * 4).saturating_sub(1);
                let r1 = (r * 4 + 5).min(truth.dim().0);
                let c1 = (c * 4 + 5).min(truth.dim().1);
                let block = truth.slice(ndarray::s![r0..r1, c0..c1]);
                let (lo, hi) = block.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
                if hi - lo < 1e-12 {
                    max_flat = max_flat.max(diff);
                }
            }
        }
        assert!(max_flat < 1e-12, "flat areas changed by {max_flat}");
        assert!(max_any > 1e-4, "no aliasing signature near edges");
    }

    #[test]
    fn cloud_disk_invalidates_exactly_its_pixels() {
        let scene = generate_canopy_scene(&noiseless(17)).unwrap();
        let mut spec = spec_at((0.0, 0.0));
        spec.cloud = Some(CloudSpec { center: (4.0, 4.0), radius: 2.0 });
        let triplet = render_triplet(&scene, &spec).unwrap();
        let r = render_acquisition(&scene, &spec).unwrap();
        let k = r.cloud_prob.iter().filter(|p| **p > 0.40).count();
        let invalid = triplet.pixel_validity.iter().filter(|v| !**v).count();
        assert!(k > 0);
        assert_eq!(k, invalid);
    }

    #[test]
    fn rendering_equivariant_to_integer_translations() {
        // Rendering a scene whose truth is translated by 4 fine pixels
        // (one 10 m pixel) equals translating the rendered image, away
        // from the boundary.
        let scene = generate_canopy_scene(&noiseless(19)).unwrap();
        let mut moved = scene.clone();
        let e = scene.params.extent;
        let mut shifted_truth = Array2::<f64>::zeros((e, e));
        for r in 0..e - 4 {
            for c in 0..e - 4 {
                shifted_truth[[r, c]] = scene.truth.values[[r + 4, c + 4]];
            }
        }
        moved.truth.values = shifted_truth;
        let a = render_acquisition(&scene, &spec_at((0.25, 0.25))).unwrap();
        let b = render_acquisition(&moved, &spec_at((0.25, 0.25))).unwrap();
        let ba = a.s2.bands.index_axis(ndarray::Axis(0), 6);
        let bb = b.s2.bands.index_axis(ndarray::Axis(0), 6);
        for r in 0..e / 4 - 2 {
            for c in 0..e / 4 - 2 {
                assert!(
                    (ba[[r + 1, c + 1]] - bb[[r, c]]).abs() < 1e-9,
                    "equivariance broken at ({r}, {c})"
                );
            }
        }
    }
}
