//! Georeferenced raster grids and the three resampling kernels the rest
//! of the pipeline is built on.
//!
//! Geometry convention: `origin_x`/`origin_y` are the map coordinates of
//! the top-left corner of the top-left pixel; rows grow downwards (map y
//! decreases), columns grow to the right. The center of pixel (r, c) is
//! thus (origin_x + (c+0.5)*pixel_size, origin_y - (r+0.5)*pixel_size).

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub origin_x: f64,
    pub origin_y: f64,
    /// Meters per pixel, positive.
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
}

impl RasterGrid {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size: f64, width: usize, height: usize) -> Result<Self> {
        if pixel_size <= 0.0 || !pixel_size.is_finite() {
            return Err(Error::InvalidArgument(format!("pixel_size {pixel_size} must be positive")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid must be at least 1x1".into()));
        }
        Ok(RasterGrid { origin_x, origin_y, pixel_size, width, height })
    }

    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.pixel_size,
            self.origin_y - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Map-coordinate extent as (x_min, y_min, x_max, y_max).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_y - self.height as f64 * self.pixel_size,
            self.origin_x + self.width as f64 * self.pixel_size,
            self.origin_y,
        )
    }

    /// Same extent, `factor` times finer pixels.
    pub fn refine(&self, factor: usize) -> RasterGrid {
        RasterGrid {
            pixel_size: self.pixel_size / factor as f64,
            width: self.width * factor,
            height: self.height * factor,
            ..*self
        }
    }

    /// Same origin, `factor` times coarser pixels; dimensions round up
    /// (the padded area is nodata in pooled outputs).
    pub fn coarsen(&self, factor: usize) -> RasterGrid {
        RasterGrid {
            pixel_size: self.pixel_size * factor as f64,
            width: self.width.div_ceil(factor),
            height: self.height.div_ceil(factor),
            ..*self
        }
    }

    /// True when pixel centers of `self` and `other` coincide where the
    /// grids overlap (same pixel size, offsets integral).
    pub fn aligned_with(&self, other: &RasterGrid) -> bool {
        let eps = 1e-6 * self.pixel_size;
        if (self.pixel_size - other.pixel_size).abs() > eps {
            return false;
        }
        let dx = (other.origin_x - self.origin_x) / self.pixel_size;
        let dy = (other.origin_y - self.origin_y) / self.pixel_size;
        (dx - dx.round()).abs() < 1e-6 && (dy - dy.round()).abs() < 1e-6
    }

    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.aligned_with(other)
            && (self.origin_x - other.origin_x).abs() < 1e-6 * self.pixel_size
            && (self.origin_y - other.origin_y).abs() < 1e-6 * self.pixel_size
    }
}

/// Single-band height raster in meters. Non-nodata values are finite and
/// non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct HeightMap {
    pub grid: RasterGrid,
    pub values: Array2<f64>,
    pub nodata: f64,
}

impl HeightMap {
    pub fn new(grid: RasterGrid, values: Array2<f64>, nodata: f64) -> Result<Self> {
        if values.dim() != (grid.height, grid.width) {
            return Err(Error::GridMismatch(format!(
                "values {:?} vs grid {}x{}",
                values.dim(),
                grid.height,
                grid.width
            )));
        }
        for v in values.iter() {
            if *v != nodata && (!v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "height {v} is negative or non-finite (nodata = {nodata})"
                )));
            }
        }
        Ok(HeightMap { grid, values, nodata })
    }

    /// Wraps model output; negative predictions are clamped to zero so
    /// the non-negativity invariant holds.
    pub fn from_prediction(grid: RasterGrid, values: Array2<f64>) -> Result<Self> {
        let clamped = values.mapv(|v| v.max(0.0));
        HeightMap::new(grid, clamped, DEFAULT_NODATA)
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    pub fn resolution(&self) -> f64 {
        self.grid.pixel_size
    }
}

/// Canonical band order of a full 14-channel acquisition triplet.
pub const TRIPLET_BAND_ROLES: [&str; 14] = [
    "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B11", "B12", "VVasc", "VHasc", "VVdsc",
    "VHdsc",
];

/// Multi-band raster stack (C, H, W) with ordered band labels.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStack {
    pub grid: RasterGrid,
    pub bands: Array3<f64>,
    pub band_roles: Vec<String>,
}

impl BandStack {
    pub fn new(grid: RasterGrid, bands: Array3<f64>, band_roles: Vec<String>) -> Result<Self> {
        let (c, h, w) = bands.dim();
        if (h, w) != (grid.height, grid.width) {
            return Err(Error::GridMismatch(format!("bands {h}x{w} vs grid {}x{}", grid.height, grid.width)));
        }
        if band_roles.len() != c {
            return Err(Error::InvalidArgument(format!("{} roles for {c} bands", band_roles.len())));
        }
        Ok(BandStack { grid, bands, band_roles })
    }
}

/// Block maximum over `factor` x `factor` windows. Nodata values are
/// excluded from the max; an all-nodata block stays nodata. Dimensions
/// not divisible by `factor` are padded with nodata.
pub fn maxpool_downsample(map: &HeightMap, factor: usize) -> Result<HeightMap> {
    if factor < 1 {
        return Err(Error::InvalidArgument("pooling factor must be >= 1".into()));
    }
    let (h, w) = map.values.dim();
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = Array2::from_elem((oh, ow), map.nodata);
    for orow in 0..oh {
        for ocol in 0..ow {
            let mut best = f64::NEG_INFINITY;
            let mut any = false;
            for r in orow * factor..((orow + 1) * factor).min(h) {
                for c in ocol * factor..((ocol + 1) * factor).min(w) {
                    let v = map.values[[r, c]];
                    if !map.is_nodata(v) {
                        best = best.max(v);
                        any = true;
                    }
                }
            }
            if any {
                out[[orow, ocol]] = best;
            }
        }
    }
    HeightMap::new(map.grid.coarsen(factor), out, map.nodata)
}

/// Pixel-center-aligned bilinear interpolation weights along one axis:
/// output index -> (low index, high index, fraction toward high).
#[inline]
fn center_coords(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / factor as f64 - 0.5;
    let clamped = src.clamp(0.0, (in_len - 1) as f64);
    let lo = clamped.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, clamped - lo as f64)
}

/// Bilinear upsampling with the pixel-center alignment convention: the
/// output grid shares the input's extent and each output pixel center is
/// sampled at its map position inside the input grid (edge-clamped).
/// Nodata propagates to any output pixel whose nonzero-weight stencil
/// touches a nodata input.
pub fn bilinear_upsample(map: &HeightMap, factor: usize) -> Result<HeightMap> {
    if factor < 1 {
        return Err(Error::InvalidArgument("upsampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(map.clone());
    }
    let (h, w) = map.values.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array2::from_elem((oh, ow), map.nodata);
    for orow in 0..oh {
        let (r0, r1, fy) = center_coords(orow, factor, h);
        for ocol in 0..ow {
            let (c0, c1, fx) = center_coords(ocol, factor, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let mut acc = 0.0;
            let mut bad = false;
            for (wgt, (r, c)) in [(w00, (r0, c0)), (w01, (r0, c1)), (w10, (r1, c0)), (w11, (r1, c1))] {
                if wgt <= 0.0 {
                    continue;
                }
                let v = map.values[[r, c]];
                if map.is_nodata(v) {
                    bad = true;
                    break;
                }
                acc += wgt * v;
            }
            if !bad {
                out[[orow, ocol]] = acc;
            }
        }
    }
    HeightMap::new(map.grid.refine(factor), out, map.nodata)
}

/// Bilinear upsampling of a plain array (no nodata handling); same
/// alignment convention. Used for band data inside the models.
pub fn bilinear_upsample_array(values: &ndarray::ArrayView2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Array2::zeros((oh, ow));
    for orow in 0..oh {
        let (r0, r1, fy) = center_coords(orow, factor, h);
        for ocol in 0..ow {
            let (c0, c1, fx) = center_coords(ocol, factor, w);
            out[[orow, ocol]] = (1.0 - fy) * (1.0 - fx) * values[[r0, c0]]
                + (1.0 - fy) * fx * values[[r0, c1]]
                + fy * (1.0 - fx) * values[[r1, c0]]
                + fy * fx * values[[r1, c1]];
        }
    }
    out
}

/// Nearest-neighbor resampling of a band stack onto `target`. Each
/// output pixel takes the value of the nearest source pixel center
/// (ties resolve toward the higher index; outside pixels clamp to the
/// edge). Errors when the extents do not overlap.
pub fn nearest_resample(stack: &BandStack, target: &RasterGrid) -> Result<BandStack> {
    let (sx0, sy0, sx1, sy1) = stack.grid.extent();
    let (tx0, ty0, tx1, ty1) = target.extent();
    if tx0 >= sx1 || tx1 <= sx0 || ty0 >= sy1 || ty1 <= sy0 {
        return Err(Error::EmptyOverlap);
    }
    if stack.grid.same_geometry(target) {
        return Ok(BandStack { grid: *target, ..stack.clone() });
    }
    let (c, _, _) = stack.bands.dim();
    let mut out = Array3::zeros((c, target.height, target.width));
    let src = &stack.grid;
    for row in 0..target.height {
        let (_, y) = target.center(row, 0);
        let srow = (((src.origin_y - y) / src.pixel_size).floor().max(0.0) as usize).min(src.height - 1);
        for col in 0..target.width {
            let (x, _) = target.center(0, col);
            let scol = (((x - src.origin_x) / src.pixel_size).floor().max(0.0) as usize).min(src.width - 1);
            for b in 0..c {
                out[[b, row, col]] = stack.bands[[b, srow, scol]];
            }
        }
    }
    BandStack::new(*target, out, stack.band_roles.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid(w: usize, h: usize, ps: f64) -> RasterGrid {
        RasterGrid::new(0.0, h as f64 * ps, ps, w, h).unwrap()
    }

    fn hm(values: Array2<f64>, ps: f64) -> HeightMap {
        let (h, w) = values.dim();
        HeightMap::new(grid(w, h, ps), values, DEFAULT_NODATA).unwrap()
    }

    /// Brute-force block max used as the oracle for pooled values.
    fn maxpool_oracle(values: &Array2<f64>, factor: usize) -> Array2<f64> {
        let (h, w) = values.dim();
        let mut out = Array2::zeros((h / factor, w / factor));
        for r in 0..h / factor {
            for c in 0..w / factor {
                let mut best = f64::NEG_INFINITY;
                for i in 0..factor {
                    for j in 0..factor {
                        best = best.max(values[[r * factor + i, c * factor + j]]);
                    }
                }
                out[[r, c]] = best;
            }
        }
        out
    }

    #[test]
    fn maxpool_2x2_block() {
        let m = hm(array![[1.0, 2.0], [3.0, 4.0]], 2.5);
        let p = maxpool_downsample(&m, 2).unwrap();
        assert_eq!(p.values, array![[4.0]]);
        assert_eq!(p.grid.pixel_size, 5.0);
    }

    #[test]
    fn maxpool_constant_is_fixed_point() {
        let m = hm(Array2::from_elem((6, 6), 7.0), 1.0);
        for factor in [1, 2, 3] {
            let p = maxpool_downsample(&m, factor).unwrap();
            assert!(p.values.iter().all(|v| *v == 7.0));
        }
    }

    #[test]
    fn maxpool_ramp_matches_bruteforce() {
        let vals = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let m = hm(vals.clone(), 1.0);
        let p = maxpool_downsample(&m, 2).unwrap();
        assert_eq!(p.values, maxpool_oracle(&vals, 2));
        assert_eq!(p.values, array![[5.0, 7.0], [13.0, 15.0]]);
    }

    #[test]
    fn maxpool_pads_with_nodata_and_ignores_it() {
        let mut vals = Array2::from_elem((3, 3), 2.0);
        vals[[0, 0]] = DEFAULT_NODATA;
        let m = hm(vals, 1.0);
        let p = maxpool_downsample(&m, 2).unwrap();
        assert_eq!(p.values.dim(), (2, 2));
        assert_eq!(p.values[[0, 0]], 2.0); // nodata excluded from max
        assert_eq!(p.values[[1, 1]], 2.0); // block is mostly padding
    }

    #[test]
    fn maxpool_all_nodata_block_stays_nodata() {
        let vals = Array2::from_elem((2, 2), DEFAULT_NODATA);
        let m = hm(vals, 1.0);
        let p = maxpool_downsample(&m, 2).unwrap();
        assert!(p.is_nodata(p.values[[0, 0]]));
    }

    #[test]
    fn maxpool_factor_zero_rejected() {
        let m = hm(Array2::zeros((2, 2)), 1.0);
        assert!(maxpool_downsample(&m, 0).is_err());
    }

    #[test]
    fn bilinear_factor_one_is_identity() {
        let m = hm(array![[0.0, 4.0]], 1.0);
        let u = bilinear_upsample(&m, 1).unwrap();
        assert_eq!(u, m);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let m = hm(Array2::from_elem((3, 3), 5.5), 2.0);
        let u = bilinear_upsample(&m, 4).unwrap();
        assert!(u.values.iter().all(|v| (*v - 5.5).abs() < 1e-12));
        assert_eq!(u.grid.pixel_size, 0.5);
    }

    #[test]
    fn bilinear_pair_quarter_positions() {
        // Hand-evaluated under the pixel-center convention: output
        // centers fall at source coordinates -0.25, 0.25, 0.75, 1.25,
        // giving values [0, 1, 3, 4] for the pair [0, 4].
        let m = hm(array![[0.0, 4.0]], 1.0);
        let u = bilinear_upsample(&m, 2).unwrap();
        assert_eq!(u.values, array![[0.0, 1.0, 3.0, 4.0], [0.0, 1.0, 3.0, 4.0]]);
    }

    #[test]
    fn bilinear_bounded_by_input_range() {
        let vals = Array2::from_shape_fn((5, 7), |(r, c)| ((r * 31 + c * 17) % 13) as f64);
        let m = hm(vals.clone(), 1.0);
        let u = bilinear_upsample(&m, 3).unwrap();
        let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        for v in u.values.iter() {
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn bilinear_propagates_nodata_to_touching_stencils() {
        let mut vals = Array2::from_elem((2, 2), 1.0);
        vals[[0, 1]] = DEFAULT_NODATA;
        let m = hm(vals, 1.0);
        let u = bilinear_upsample(&m, 2).unwrap();
        // Leftmost column samples only column 0 (clamped, weight 0 on
        // the nodata neighbor) and must stay valid.
        assert_eq!(u.values[[0, 0]], 1.0);
        // Pixels whose stencil spans both columns become nodata.
        assert!(u.is_nodata(u.values[[0, 2]]));
        assert!(u.is_nodata(u.values[[0, 3]]));
    }

    fn stack2x2() -> BandStack {
        let g = grid(2, 2, 10.0);
        let bands = Array3::from_shape_fn((2, 2, 2), |(b, r, c)| (b * 100 + r * 10 + c) as f64);
        BandStack::new(g, bands, vec!["B2".into(), "B3".into()]).unwrap()
    }

    #[test]
    fn nearest_identity_on_same_grid() {
        let s = stack2x2();
        let r = nearest_resample(&s, &s.grid).unwrap();
        assert_eq!(r.bands, s.bands);
    }

    #[test]
    fn nearest_never_blends() {
        let s = stack2x2();
        let coarse = s.grid.coarsen(2);
        let r = nearest_resample(&s, &coarse).unwrap();
        let allowed: Vec<f64> = s.bands.iter().cloned().collect();
        for v in r.bands.iter() {
            assert!(allowed.contains(v));
        }
    }

    #[test]
    fn nearest_half_pixel_replicates_blocks() {
        let s = stack2x2();
        let fine = s.grid.refine(2);
        let r = nearest_resample(&s, &fine).unwrap();
        for b in 0..2 {
            for row in 0..4 {
                for col in 0..4 {
                    assert_eq!(r.bands[[b, row, col]], s.bands[[b, row / 2, col / 2]]);
                }
            }
        }
    }

    #[test]
    fn nearest_disjoint_extents_error() {
        let s = stack2x2();
        let far = RasterGrid::new(1000.0, 1000.0, 10.0, 2, 2).unwrap();
        assert!(matches!(nearest_resample(&s, &far), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn constant_maps_fixed_points_of_all_kernels() {
        let m = hm(Array2::from_elem((4, 4), 3.0), 1.0);
        assert!(maxpool_downsample(&m, 2).unwrap().values.iter().all(|v| *v == 3.0));
        assert!(bilinear_upsample(&m, 2).unwrap().values.iter().all(|v| (*v - 3.0).abs() < 1e-12));
        let s = BandStack::new(m.grid, Array3::from_elem((1, 4, 4), 3.0), vec!["B2".into()]).unwrap();
        let r = nearest_resample(&s, &m.grid.refine(2)).unwrap();
        assert!(r.bands.iter().all(|v| *v == 3.0));
    }

    #[test]
    fn heightmap_rejects_negative_values() {
        let g = grid(1, 1, 1.0);
        assert!(HeightMap::new(g, array![[-1.0]], DEFAULT_NODATA).is_err());
        let p = HeightMap::from_prediction(g, array![[-1.0]]).unwrap();
        assert_eq!(p.values[[0, 0]], 0.0);
    }
}
