//! GeoTIFF reading and writing on top of the `tiff` crate.
//!
//! Single-band rasters are one grayscale f32 page. Multi-band stacks are
//! written as one page per band in band order, each page carrying the
//! same georeferencing tags and a `PageName` tag holding the band role.
//! Georeferencing uses ModelPixelScale + ModelTiepoint (tiepoint at the
//! top-left corner) and nodata the GDAL_NODATA ASCII tag.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::tags::Tag;

use crate::error::{Error, Result};
use crate::raster::{BandStack, HeightMap, RasterGrid, DEFAULT_NODATA};

const PAGE_NAME: Tag = Tag::Unknown(285);

/// One named band plus shared grid/nodata, as read from disk.
pub struct GeoTiffContents {
    pub grid: RasterGrid,
    pub nodata: Option<f64>,
    pub pages: Vec<(String, Array2<f64>)>,
}

fn write_geo_tags<W, C, K>(
    image: &mut tiff::encoder::ImageEncoder<W, C, K>,
    grid: &RasterGrid,
    nodata: Option<f64>,
    page_name: &str,
) -> std::result::Result<(), tiff::TiffError>
where
    W: std::io::Write + std::io::Seek,
    C: colortype::ColorType,
    K: tiff::encoder::TiffKind,
{
    let enc = image.encoder();
    enc.write_tag(Tag::ModelPixelScaleTag, &[grid.pixel_size, grid.pixel_size, 0.0][..])?;
    enc.write_tag(
        Tag::ModelTiepointTag,
        &[0.0, 0.0, 0.0, grid.origin_x, grid.origin_y, 0.0][..],
    )?;
    if let Some(nd) = nodata {
        enc.write_tag(Tag::GdalNodata, format!("{nd}").as_str())?;
    }
    enc.write_tag(PAGE_NAME, page_name)?;
    Ok(())
}

/// Writes named f32 pages sharing one grid.
pub fn write_pages(
    path: &Path,
    grid: &RasterGrid,
    nodata: Option<f64>,
    pages: &[(&str, &Array2<f64>)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::tiff(path, e))?;
    for (name, values) in pages {
        if values.dim() != (grid.height, grid.width) {
            return Err(Error::GridMismatch(format!(
                "page {name}: {:?} vs grid {}x{}",
                values.dim(),
                grid.height,
                grid.width
            )));
        }
        let mut image = enc
            .new_image::<colortype::Gray32Float>(grid.width as u32, grid.height as u32)
            .map_err(|e| Error::tiff(path, e))?;
        write_geo_tags(&mut image, grid, nodata, name).map_err(|e| Error::tiff(path, e))?;
        let data: Vec<f32> = values.iter().map(|v| *v as f32).collect();
        image.write_data(&data).map_err(|e| Error::tiff(path, e))?;
    }
    Ok(())
}

pub fn read_pages(path: &Path) -> Result<GeoTiffContents> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| Error::tiff(path, e))?;
    let mut grid: Option<RasterGrid> = None;
    let mut nodata = None;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(|e| Error::tiff(path, e))?;
        let scale = dec
            .get_tag_f64_vec(Tag::ModelPixelScaleTag)
            .map_err(|e| Error::tiff(path, format!("missing pixel scale: {e}")))?;
        let tie = dec
            .get_tag_f64_vec(Tag::ModelTiepointTag)
            .map_err(|e| Error::tiff(path, format!("missing tiepoint: {e}")))?;
        if scale.len() < 2 || tie.len() < 6 {
            return Err(Error::tiff(path, "malformed georeferencing tags"));
        }
        let g = RasterGrid::new(tie[3], tie[4], scale[0], w as usize, h as usize)?;
        match &grid {
            None => grid = Some(g),
            Some(g0) if g0.same_geometry(&g) => {}
            Some(_) => return Err(Error::tiff(path, "pages disagree on grid geometry")),
        }
        if nodata.is_none() {
            if let Ok(s) = dec.get_tag_ascii_string(Tag::GdalNodata) {
                nodata = s.trim().trim_end_matches('\0').parse::<f64>().ok();
            }
        }
        let name = dec
            .get_tag_ascii_string(PAGE_NAME)
            .unwrap_or_else(|_| format!("band{}", pages.len() + 1))
            .trim_end_matches('\0')
            .to_string();
        let img = dec.read_image().map_err(|e| Error::tiff(path, e))?;
        let values = match img {
            DecodingResult::F32(v) => {
                Array2::from_shape_vec((h as usize, w as usize), v.iter().map(|x| *x as f64).collect())
            }
            DecodingResult::F64(v) => Array2::from_shape_vec((h as usize, w as usize), v),
            DecodingResult::U8(v) => {
                Array2::from_shape_vec((h as usize, w as usize), v.iter().map(|x| *x as f64).collect())
            }
            DecodingResult::U16(v) => {
                Array2::from_shape_vec((h as usize, w as usize), v.iter().map(|x| *x as f64).collect())
            }
            _ => return Err(Error::tiff(path, "unsupported sample format")),
        }
        .map_err(|e| Error::tiff(path, e))?;
        pages.push((name, values));
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| Error::tiff(path, e))?;
    }
    Ok(GeoTiffContents {
        grid: grid.expect("at least one page"),
        nodata,
        pages,
    })
}

pub fn write_heightmap(path: &Path, map: &HeightMap) -> Result<()> {
    write_pages(path, &map.grid, Some(map.nodata), &[("height", &map.values)])
}

pub fn read_heightmap(path: &Path) -> Result<HeightMap> {
    let c = read_pages(path)?;
    let nodata = c.nodata.unwrap_or(DEFAULT_NODATA);
    let (_, values) = c
        .pages
        .into_iter()
        .next()
        .ok_or_else(|| Error::tiff(path, "empty file"))?;
    HeightMap::new(c.grid, values, nodata)
}

pub fn write_bandstack(path: &Path, stack: &BandStack, nodata: Option<f64>) -> Result<()> {
    let owned: Vec<(String, Array2<f64>)> = stack
        .band_roles
        .iter()
        .enumerate()
        .map(|(i, role)| (role.clone(), stack.bands.index_axis(ndarray::Axis(0), i).to_owned()))
        .collect();
    let refs: Vec<(&str, &Array2<f64>)> = owned.iter().map(|(r, v)| (r.as_str(), v)).collect();
    write_pages(path, &stack.grid, nodata, &refs)
}

/// Writes a boolean mask as 0/1 f32 pages.
pub fn write_mask(path: &Path, grid: &RasterGrid, mask: &Array2<bool>) -> Result<()> {
    let vals = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    write_pages(path, grid, None, &[("mask", &vals)])
}

pub fn read_mask(path: &Path) -> Result<(RasterGrid, Array2<bool>)> {
    let c = read_pages(path)?;
    let (_, values) = c
        .pages
        .into_iter()
        .next()
        .ok_or_else(|| Error::tiff(path, "empty file"))?;
    Ok((c.grid, values.mapv(|v| v > 0.5)))
}

/// Writes a class raster as a u8 page with the fixed class palette in a
/// PageName-documented order; nodata is 255.
pub fn write_class_map(path: &Path, grid: &RasterGrid, classes: &Array2<u8>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::tiff(path, e))?;
    let mut image = enc
        .new_image::<colortype::Gray8>(grid.width as u32, grid.height as u32)
        .map_err(|e| Error::tiff(path, e))?;
    write_geo_tags(&mut image, grid, Some(255.0), "change_class").map_err(|e| Error::tiff(path, e))?;
    let data: Vec<u8> = classes.iter().cloned().collect();
    image.write_data(&data).map_err(|e| Error::tiff(path, e))?;
    Ok(())
}

pub fn read_class_map(path: &Path) -> Result<(RasterGrid, Array2<u8>)> {
    let c = read_pages(path)?;
    let (_, values) = c
        .pages
        .into_iter()
        .next()
        .ok_or_else(|| Error::tiff(path, "empty file"))?;
    Ok((c.grid, values.mapv(|v| v as u8)))
}

/// Reads a multi-page stack into (C, H, W) order using the stored page
/// names as band roles.
pub fn read_bandstack(path: &Path) -> Result<(BandStack, Option<f64>)> {
    let c = read_pages(path)?;
    let n = c.pages.len();
    let (h, w) = (c.grid.height, c.grid.width);
    let mut bands = Array3::zeros((n, h, w));
    let mut roles = Vec::with_capacity(n);
    for (i, (name, values)) in c.pages.into_iter().enumerate() {
        bands.index_axis_mut(ndarray::Axis(0), i).assign(&values);
        roles.push(name);
    }
    Ok((BandStack::new(c.grid, bands, roles)?, c.nodata))
}
