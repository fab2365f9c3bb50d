//! Input recipes for the three model variants, variant prediction at the
//! original resolution, per-pixel averaging and footprint extraction.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    extract_polygons, merge_intersecting, rasterize, rasterize_lines, BinaryMask, MapLayer, Polygon,
};
use crate::nn::Model;
use crate::parallel::Execution;
use crate::raster::{center, resize, MultiBandImage, ResizeMethod};
use crate::tiling::{reassemble, slice, TileSet};

/// Multispectral band order: Coastal, Blue, Green, Yellow, Red, RedEdge, NIR1, NIR2.
pub const MUL_BAND_NAMES: [&str; 8] = [
    "coastal", "blue", "green", "yellow", "red", "red_edge", "nir1", "nir2",
];
/// Bands of the multispectral product appended to RGB for v1.
pub const V1_MUL_BANDS: [usize; 5] = [0, 3, 4, 5, 6];
pub const ROAD_STROKE_PX: f64 = 3.0;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Single-band probability map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRaster {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl PredictionRaster {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} prediction",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("prediction value {v} outside [0, 1]")));
        }
        Ok(PredictionRaster { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_raster(&self, image_id: impl Into<String>) -> MultiBandImage {
        MultiBandImage::new(image_id, 1, self.height, self.width, self.values.clone())
            .expect("values are finite")
    }

    pub fn from_raster(raster: &MultiBandImage) -> Result<Self> {
        if raster.bands() != 1 {
            return Err(Error::shape(format!(
                "prediction raster {} has {} bands",
                raster.image_id,
                raster.bands()
            )));
        }
        PredictionRaster::new(raster.height(), raster.width(), raster.data().to_vec())
    }

    /// Bilinear resampling to `h x w`.
    pub fn resized(&self, h: usize, w: usize) -> Result<PredictionRaster> {
        let r = resize(&self.to_raster("p"), h, w, ResizeMethod::Bilinear)?;
        let values = r.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        PredictionRaster::new(h, w, values)
    }

    pub fn threshold(&self, t: f32) -> BinaryMask {
        BinaryMask::from_threshold(self.height, self.width, &self.values, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantId {
    V1,
    V2,
    V3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputGeometry {
    /// The whole scene resized to the network input size.
    Resized,
    /// Nine overlapping tiles.
    NineTile,
}

impl VariantId {
    pub const ALL: [VariantId; 3] = [VariantId::V1, VariantId::V2, VariantId::V3];

    pub fn in_channels(self) -> usize {
        match self {
            VariantId::V1 | VariantId::V2 => 8,
            VariantId::V3 => 10,
        }
    }

    pub fn geometry(self) -> InputGeometry {
        match self {
            VariantId::V1 => InputGeometry::Resized,
            _ => InputGeometry::NineTile,
        }
    }

    /// Ordered names of the input channels.
    pub fn channel_recipe(self) -> Vec<&'static str> {
        match self {
            VariantId::V1 => {
                let mut v = vec!["r", "g", "b"];
                v.extend(V1_MUL_BANDS.iter().map(|&i| MUL_BAND_NAMES[i]));
                v
            }
            VariantId::V2 => MUL_BAND_NAMES.to_vec(),
            VariantId::V3 => {
                let mut v = MUL_BAND_NAMES.to_vec();
                v.extend(["buildings", "roads"]);
                v
            }
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantId::V1 => "v1",
            VariantId::V2 => "v2",
            VariantId::V3 => "v3",
        })
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(VariantId::V1),
            "v2" => Ok(VariantId::V2),
            "v3" => Ok(VariantId::V3),
            other => Err(Error::invalid(format!("unknown variant {other:?} (expected v1, v2 or v3)"))),
        }
    }
}

/// Prepared network inputs for one scene.
#[derive(Debug, Clone)]
pub enum VariantInput {
    Whole(MultiBandImage),
    Tiles(TileSet),
}

impl VariantInput {
    pub fn images(&self) -> Vec<&MultiBandImage> {
        match self {
            VariantInput::Whole(img) => vec![img],
            VariantInput::Tiles(t) => t.tiles.iter().collect(),
        }
    }
}

fn check_bands(img: &MultiBandImage, bands: usize, what: &str) -> Result<()> {
    if img.bands() != bands {
        return Err(Error::shape(format!(
            "{what} image {} has {} bands, expected {bands}",
            img.image_id,
            img.bands()
        )));
    }
    Ok(())
}

fn maybe_center(img: MultiBandImage, mean: Option<&MultiBandImage>) -> Result<MultiBandImage> {
    match mean {
        Some(m) => center(&img, m),
        None => Ok(img),
    }
}

/// `[R, G, B, Coastal, Yellow, Red, RedEdge, NIR1]` at native resolution.
pub fn stack_v1(rgb: &MultiBandImage, mul: &MultiBandImage) -> Result<MultiBandImage> {
    check_bands(rgb, 3, "RGB")?;
    check_bands(mul, 8, "multispectral")?;
    let picked = mul.select_bands(&V1_MUL_BANDS)?;
    MultiBandImage::stack(mul.image_id.clone(), &[rgb, &picked])
}

/// v1 input: stacked bands resized (bilinear) to `size x size`, minus `mean`.
pub fn prepare_v1(
    rgb: &MultiBandImage,
    mul: &MultiBandImage,
    size: usize,
    mean: Option<&MultiBandImage>,
) -> Result<MultiBandImage> {
    let stacked = stack_v1(rgb, mul)?;
    maybe_center(resize(&stacked, size, size, ResizeMethod::Bilinear)?, mean)
}

fn center_tiles(tiles: TileSet, mean: Option<&MultiBandImage>) -> Result<TileSet> {
    let Some(m) = mean else { return Ok(tiles) };
    let centered = tiles
        .tiles
        .iter()
        .map(|t| center(t, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(tiles.with_tiles(centered))
}

/// v2 input: nine tiles of the 8-band image, each minus `mean`.
pub fn prepare_v2(mul: &MultiBandImage, mean: Option<&MultiBandImage>) -> Result<TileSet> {
    check_bands(mul, 8, "multispectral")?;
    center_tiles(slice(mul)?, mean)
}

/// Building (filled) and road (3 px stroke) masks on the pixel grid of `mul`.
pub fn overlay_masks(
    mul: &MultiBandImage,
    buildings: &MapLayer,
    roads: &MapLayer,
) -> Result<(BinaryMask, BinaryMask)> {
    let gt = mul.geotransform.ok_or_else(|| {
        Error::invalid(format!("image {} has no geotransform for map layers", mul.image_id))
    })?;
    let (h, w) = (mul.height(), mul.width());
    let b = buildings.to_pixel_space(&gt)?;
    let r = roads.to_pixel_space(&gt)?;
    let mut bmask = rasterize(&b.polygons, h, w);
    let stroked = rasterize_lines(&b.lines, ROAD_STROKE_PX, h, w);
    for (i, &on) in stroked.bits().iter().enumerate() {
        if on {
            bmask.set(i / w, i % w, true);
        }
    }
    let mut rmask = rasterize_lines(&r.lines, ROAD_STROKE_PX, h, w);
    let filled = rasterize(&r.polygons, h, w);
    for (i, &on) in filled.bits().iter().enumerate() {
        if on {
            rmask.set(i / w, i % w, true);
        }
    }
    Ok((bmask, rmask))
}

/// The 8 bands followed by the building and road overlay channels.
pub fn stack_v3(mul: &MultiBandImage, buildings: &MapLayer, roads: &MapLayer) -> Result<MultiBandImage> {
    check_bands(mul, 8, "multispectral")?;
    let (b, r) = overlay_masks(mul, buildings, roads)?;
    let (h, w) = (mul.height(), mul.width());
    let mut data = mul.data().to_vec();
    data.extend(b.to_f32());
    data.extend(r.to_f32());
    let mut out = MultiBandImage::new(mul.image_id.clone(), 10, h, w, data)?;
    out.geotransform = mul.geotransform;
    Ok(out)
}

/// v3 input: nine tiles of the 10-channel stack, each minus `mean`.
pub fn prepare_v3(
    mul: &MultiBandImage,
    buildings: &MapLayer,
    roads: &MapLayer,
    mean: Option<&MultiBandImage>,
) -> Result<TileSet> {
    center_tiles(slice(&stack_v3(mul, buildings, roads)?)?, mean)
}

/// Runs `model` on a prepared input and returns a prediction at `out_h x out_w`:
/// v1 predictions are resized bilinearly, tiled ones are reassembled.
pub fn predict_input(
    model: &Model,
    input: &VariantInput,
    out_h: usize,
    out_w: usize,
    exec: Execution,
) -> Result<PredictionRaster> {
    let preds = model.predict(&input.images(), exec)?;
    match input {
        VariantInput::Whole(_) => preds[0].resized(out_h, out_w),
        VariantInput::Tiles(t) => {
            if (t.parent_h, t.parent_w) != (out_h, out_w) {
                return Err(Error::shape(format!(
                    "tiles cover {}x{}, requested {out_h}x{out_w}",
                    t.parent_h, t.parent_w
                )));
            }
            let tiles = preds.iter().map(|p| p.to_raster("tile")).collect();
            PredictionRaster::from_raster(&reassemble(&t.with_tiles(tiles), "pred")?)
        }
    }
}

/// Per-pixel arithmetic mean of the supplied variant predictions.
pub fn combine(preds: &[&PredictionRaster]) -> Result<PredictionRaster> {
    let first = preds
        .first()
        .ok_or_else(|| Error::invalid("no predictions to combine"))?;
    if preds.len() == 1 {
        return Ok((*first).clone());
    }
    let mut acc = vec![0.0f64; first.values.len()];
    for p in preds {
        if (p.height, p.width) != (first.height, first.width) {
            return Err(Error::shape(format!(
                "cannot combine {}x{} with {}x{}",
                first.height, first.width, p.height, p.width
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&p.values) {
            *a += v as f64;
        }
    }
    let n = preds.len() as f64;
    let values = acc.into_iter().map(|s| (s / n) as f32).collect();
    PredictionRaster::new(first.height, first.width, values)
}

/// Thresholds (strictly above `threshold`), traces, merges touching shapes
/// and drops polygons smaller than `min_area` pixels.
pub fn footprints_from_prediction(pred: &PredictionRaster, threshold: f32, min_area: f64) -> Vec<Polygon> {
    let mask = pred.threshold(threshold);
    let traced = extract_polygons(&mask);
    merge_intersecting(&traced, pred.height, pred.width)
        .into_iter()
        .filter(|p| p.area() >= min_area)
        .collect()
}
