//! Turning per-date rasters into fixed-length training sequences:
//! cloud screening, S1/S2 pairing, padding/truncation, patch cropping
//! and band normalization.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dates::DateCode;
use crate::error::{Error, Result};
use crate::raster::{BandStack, HeightMap, RasterGrid};

/// One co-registered 14-band observation: a Sentinel-2 image with its
/// temporally closest S1 ascending and descending partners.
#[derive(Clone, Debug)]
pub struct AcquisitionTriplet {
    pub s2: BandStack,
    pub s1_asc: BandStack,
    pub s1_dsc: BandStack,
    /// Date of the S2 acquisition.
    pub date: DateCode,
    pub cloud_fraction: f64,
    pub highprob_cloud_fraction: f64,
    pub pixel_validity: Array2<bool>,
}

impl AcquisitionTriplet {
    pub fn new(
        s2: BandStack,
        s1_asc: BandStack,
        s1_dsc: BandStack,
        date: DateCode,
        cloud_fraction: f64,
        highprob_cloud_fraction: f64,
        pixel_validity: Array2<bool>,
    ) -> Result<Self> {
        if !s2.grid.same_geometry(&s1_asc.grid) || !s2.grid.same_geometry(&s1_dsc.grid) {
            return Err(Error::GridMismatch("triplet stacks must share one grid".into()));
        }
        if s2.bands.dim().0 != 10 || s1_asc.bands.dim().0 != 2 || s1_dsc.bands.dim().0 != 2 {
            return Err(Error::InvalidArgument(
                "triplet needs 10 S2 bands and 2 bands per S1 orbit".into(),
            ));
        }
        if pixel_validity.dim() != (s2.grid.height, s2.grid.width) {
            return Err(Error::GridMismatch("validity mask shape".into()));
        }
        Ok(AcquisitionTriplet {
            s2,
            s1_asc,
            s1_dsc,
            date,
            cloud_fraction,
            highprob_cloud_fraction,
            pixel_validity,
        })
    }

    /// Stacks the triplet into one (14, H, W) frame in canonical band
    /// order (10 optical, then VV/VH ascending, VV/VH descending).
    pub fn stacked_frame(&self) -> Array3<f64> {
        let (h, w) = (self.s2.grid.height, self.s2.grid.width);
        let mut frame = Array3::zeros((14, h, w));
        frame.slice_mut(ndarray::s![0..10, .., ..]).assign(&self.s2.bands);
        frame.slice_mut(ndarray::s![10..12, .., ..]).assign(&self.s1_asc.bands);
        frame.slice_mut(ndarray::s![12..14, .., ..]).assign(&self.s1_dsc.bands);
        frame
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub tile_id: String,
    /// Number of triplets before padding/truncation.
    pub original_count: usize,
    pub seed: u64,
}

/// Fixed-length time series with its 2.5 m reference and masks.
#[derive(Clone, Debug)]
pub struct TimeSeriesSample {
    /// (T, 14, H, W) input frames.
    pub sequence: Array4<f64>,
    pub dates: Vec<DateCode>,
    /// (T, H, W) per-frame pixel validity (false where clouded).
    pub validity: Array3<bool>,
    /// 2.5 m reference heights, exactly the x4 refinement of the input grid.
    pub reference: HeightMap,
    pub vegetation_mask: Array2<bool>,
    pub input_grid: RasterGrid,
    pub provenance: Provenance,
}

impl TimeSeriesSample {
    pub fn t(&self) -> usize {
        self.sequence.dim().0
    }

    pub fn input_size(&self) -> (usize, usize) {
        let (_, _, h, w) = self.sequence.dim();
        (h, w)
    }

    pub fn doys(&self) -> Vec<u32> {
        self.dates.iter().map(|d| d.doy).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudDecision {
    Keep,
    Discard,
}

/// Image-level cloud screening: discard when more than 40% of pixels are
/// cloudy or more than 20% carry high-probability cloud cover. Both
/// comparisons are strict, so the boundary values stay kept.
pub fn filter_cloudy_image(cloud_fraction: f64, highprob_fraction: f64) -> CloudDecision {
    if cloud_fraction > 0.40 || highprob_fraction > 0.20 {
        CloudDecision::Discard
    } else {
        CloudDecision::Keep
    }
}

/// Pixel-level cloud mask: a pixel is invalid when its cloud probability
/// exceeds 0.40 or its QA flag is set. Band values are left in place;
/// the fill to the band mean happens at normalization time, where
/// invalid pixels become 0 in standardized units.
pub fn mask_cloudy_pixels(
    s2: &BandStack,
    cloud_prob: &Array2<f64>,
    qa_flag: &Array2<bool>,
) -> Result<(BandStack, Array2<bool>)> {
    let shape = (s2.grid.height, s2.grid.width);
    if cloud_prob.dim() != shape || qa_flag.dim() != shape {
        return Err(Error::GridMismatch("cloud probability / QA shape".into()));
    }
    let validity = ndarray::Zip::from(cloud_prob)
        .and(qa_flag)
        .map_collect(|p, q| !(*p > 0.40 || *q));
    Ok((s2.clone(), validity))
}

/// Associates each S2 stack with the temporally closest acquisition from
/// `partners`; ties break toward the earlier date.
fn closest_partner<'a, T>(items: &'a [(T, DateCode)], date: DateCode) -> &'a (T, DateCode) {
    items
        .iter()
        .min_by_key(|(_, d)| (d.distance_days(date), d.abs_days()))
        .expect("non-empty partner list")
}

pub struct S2Acquisition {
    pub stack: BandStack,
    pub date: DateCode,
    pub cloud_fraction: f64,
    pub highprob_cloud_fraction: f64,
    pub validity: Array2<bool>,
}

/// Builds one triplet per S2 acquisition by attaching the closest S1
/// ascending and descending stacks. S1 acquisitions may be reused.
pub fn assemble_triplets(
    s2_list: Vec<S2Acquisition>,
    s1_asc: &[(BandStack, DateCode)],
    s1_dsc: &[(BandStack, DateCode)],
) -> Result<Vec<AcquisitionTriplet>> {
    if s1_asc.is_empty() {
        return Err(Error::EmptyOrbitList("ascending"));
    }
    if s1_dsc.is_empty() {
        return Err(Error::EmptyOrbitList("descending"));
    }
    let mut out = Vec::with_capacity(s2_list.len());
    for s2 in s2_list {
        let (asc, _) = closest_partner(s1_asc, s2.date);
        let (dsc, _) = closest_partner(s1_dsc, s2.date);
        out.push(AcquisitionTriplet::new(
            s2.stack,
            asc.clone(),
            dsc.clone(),
            s2.date,
            s2.cloud_fraction,
            s2.highprob_cloud_fraction,
            s2.validity,
        )?);
    }
    Ok(out)
}

pub enum SequenceOutcome {
    Built(Box<SequenceFrames>),
    /// Fewer than the minimum number of distinct triplets.
    Rejected { available: usize },
}

/// The ordered frame selection produced by `build_sequence`, before the
/// reference raster is attached.
pub struct SequenceFrames {
    pub frames: Vec<AcquisitionTriplet>,
    pub original_count: usize,
}

pub const MIN_TRIPLETS: usize = 4;

/// Fixed-length sequence selection: reject below 4 triplets, pad by
/// seeded uniform duplication below T, keep the T closest to the
/// reference acquisition date above T (ties toward the earlier date).
/// Output is chronological; duplicates keep their original dates.
pub fn build_sequence(
    mut triplets: Vec<AcquisitionTriplet>,
    als_date: DateCode,
    t: usize,
    rng: &mut impl Rng,
) -> SequenceOutcome {
    let available = triplets.len();
    if available < MIN_TRIPLETS {
        return SequenceOutcome::Rejected { available };
    }
    triplets.sort_by_key(|tr| tr.date.abs_days());
    let frames: Vec<AcquisitionTriplet> = match available.cmp(&t) {
        std::cmp::Ordering::Equal => triplets,
        std::cmp::Ordering::Less => {
            let mut frames = triplets.clone();
            while frames.len() < t {
                let pick = rng.random_range(0..available);
                frames.push(triplets[pick].clone());
            }
            frames.sort_by_key(|tr| tr.date.abs_days());
            frames
        }
        std::cmp::Ordering::Greater => {
            let mut idx: Vec<usize> = (0..available).collect();
            idx.sort_by_key(|i| (triplets[*i].date.distance_days(als_date), triplets[*i].date.abs_days(), *i));
            idx.truncate(t);
            idx.sort_by_key(|i| (triplets[*i].date.abs_days(), *i));
            idx.into_iter().map(|i| triplets[i].clone()).collect()
        }
    };
    SequenceOutcome::Built(Box::new(SequenceFrames { frames, original_count: available }))
}

/// Assembles the selected frames plus reference into a sample, checking
/// that the reference grid is exactly the x4 refinement of the input.
pub fn finish_sample(
    frames: SequenceFrames,
    reference: HeightMap,
    vegetation_mask: Array2<bool>,
    tile_id: String,
    seed: u64,
) -> Result<TimeSeriesSample> {
    let first = frames
        .frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sequence".into()))?;
    let input_grid = first.s2.grid;
    if !reference.grid.same_geometry(&input_grid.refine(4)) {
        return Err(Error::GridMismatch(
            "reference grid must be the x4 refinement of the input grid".into(),
        ));
    }
    if vegetation_mask.dim() != (reference.grid.height, reference.grid.width) {
        return Err(Error::GridMismatch("vegetation mask shape".into()));
    }
    let t = frames.frames.len();
    let (h, w) = (input_grid.height, input_grid.width);
    let mut sequence = Array4::zeros((t, 14, h, w));
    let mut validity = Array3::from_elem((t, h, w), true);
    let mut dates = Vec::with_capacity(t);
    for (i, tr) in frames.frames.iter().enumerate() {
        sequence.index_axis_mut(Axis(0), i).assign(&tr.stacked_frame());
        validity.index_axis_mut(Axis(0), i).assign(&tr.pixel_validity);
        dates.push(tr.date);
    }
    Ok(TimeSeriesSample {
        sequence,
        dates,
        validity,
        reference,
        vegetation_mask,
        input_grid,
        provenance: Provenance { tile_id, original_count: frames.original_count, seed },
    })
}

/// Crops a training patch: `input_size` pixels on the 10 m grid and the
/// x4-aligned window on the 2.5 m reference. Map-coordinate origins of
/// the cropped input and reference grids stay identical.
pub fn crop_training_patch(
    sample: &TimeSeriesSample,
    origin: (usize, usize),
    input_size: usize,
) -> Result<TimeSeriesSample> {
    let (row, col) = origin;
    let (t, c, h, w) = sample.sequence.dim();
    if row + input_size > h || col + input_size > w {
        return Err(Error::OutOfBounds(row, col, input_size, h, w));
    }
    let (r4, c4, s4) = (row * 4, col * 4, input_size * 4);
    let sequence = sample
        .sequence
        .slice(ndarray::s![.., .., row..row + input_size, col..col + input_size])
        .to_owned();
    let validity = sample
        .validity
        .slice(ndarray::s![.., row..row + input_size, col..col + input_size])
        .to_owned();
    let _ = (t, c);
    let input_grid = RasterGrid {
        origin_x: sample.input_grid.origin_x + col as f64 * sample.input_grid.pixel_size,
        origin_y: sample.input_grid.origin_y - row as f64 * sample.input_grid.pixel_size,
        pixel_size: sample.input_grid.pixel_size,
        width: input_size,
        height: input_size,
    };
    let ref_grid = input_grid.refine(4);
    let ref_values = sample
        .reference
        .values
        .slice(ndarray::s![r4..r4 + s4, c4..c4 + s4])
        .to_owned();
    let reference = HeightMap::new(ref_grid, ref_values, sample.reference.nodata)?;
    let vegetation_mask = sample
        .vegetation_mask
        .slice(ndarray::s![r4..r4 + s4, c4..c4 + s4])
        .to_owned();
    Ok(TimeSeriesSample {
        sequence,
        dates: sample.dates.clone(),
        validity,
        reference,
        vegetation_mask,
        input_grid,
        provenance: sample.provenance.clone(),
    })
}

/// Per-band standardization statistics over a training split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Bands whose observed std was zero and was replaced by 1.
    pub zero_std_bands: Vec<usize>,
}

impl BandStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let mut zero_std_bands = Vec::new();
        let std = std
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                if s == 0.0 {
                    zero_std_bands.push(i);
                    1.0
                } else {
                    s
                }
            })
            .collect();
        BandStats { mean, std, zero_std_bands }
    }

    pub fn n_bands(&self) -> usize {
        self.mean.len()
    }
}

/// Accumulates per-band mean/std over the valid pixels of samples'
/// sequences (S1 bands treat every pixel as valid).
pub fn compute_band_stats<'a>(samples: impl Iterator<Item = &'a TimeSeriesSample>) -> BandStats {
    let mut count = vec![0f64; 14];
    let mut sum = vec![0f64; 14];
    let mut sumsq = vec![0f64; 14];
    for sample in samples {
        let (t, c, h, w) = sample.sequence.dim();
        for ti in 0..t {
            for ci in 0..c {
                for r in 0..h {
                    for col in 0..w {
                        // S2 bands (0..10) honor the cloud validity mask.
                        if ci < 10 && !sample.validity[[ti, r, col]] {
                            continue;
                        }
                        let v = sample.sequence[[ti, ci, r, col]];
                        count[ci] += 1.0;
                        sum[ci] += v;
                        sumsq[ci] += v * v;
                    }
                }
            }
        }
    }
    let mean: Vec<f64> = (0..14).map(|c| if count[c] > 0.0 { sum[c] / count[c] } else { 0.0 }).collect();
    let std: Vec<f64> = (0..14)
        .map(|c| {
            if count[c] > 0.0 {
                let var = (sumsq[c] / count[c] - mean[c] * mean[c]).max(0.0);
                var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    BandStats::new(mean, std)
}

/// Standardizes each band as (x - mean) / std; invalid S2 pixels are set
/// to 0 afterwards (their band mean in standardized units).
pub fn normalize_bands(sample: &TimeSeriesSample, stats: &BandStats) -> Result<TimeSeriesSample> {
    if stats.n_bands() != 14 {
        return Err(Error::InvalidArgument(format!("{} band stats for 14 bands", stats.n_bands())));
    }
    let mut out = sample.clone();
    let (t, c, h, w) = out.sequence.dim();
    for ti in 0..t {
        for ci in 0..c {
            let (m, s) = (stats.mean[ci], stats.std[ci]);
            for r in 0..h {
                for col in 0..w {
                    let v = &mut out.sequence[[ti, ci, r, col]];
                    *v = (*v - m) / s;
                    if ci < 10 && !out.validity[[ti, r, col]] {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `normalize_bands` for round-trip checks (validity fill is
/// not invertible and is left as the fill value).
pub fn denormalize_bands(sample: &TimeSeriesSample, stats: &BandStats) -> TimeSeriesSample {
    let mut out = sample.clone();
    let (t, c, _, _) = out.sequence.dim();
    for ti in 0..t {
        for ci in 0..c {
            let (m, s) = (stats.mean[ci], stats.std[ci]);
            out.sequence
                .slice_mut(ndarray::s![ti, ci, .., ..])
                .mapv_inplace(|v| v * s + m);
        }
    }
    out
}
