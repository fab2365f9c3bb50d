//! Training targets from footprints: binary mask, signed Euclidean distance,
//! and a bounded remap of the distance to `[0, 1]`.

use crate::error::{Error, Result};
use crate::geometry::{rasterize, BinaryMask, Polygon};
use crate::raster::MultiBandImage;

/// Default truncation radius of the label encoding, in pixels.
pub const DEFAULT_TAU: f64 = 3.0;

/// Stand-in for infinite squared distance in the 1-D transform.
const FAR: f64 = 1e20;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub tau: f64,
}

impl LabelImage {
    /// Pixels with value above 0.5, i.e. inside a footprint.
    pub fn to_mask(&self) -> BinaryMask {
        BinaryMask::from_threshold(self.height, self.width, &self.values, 0.5)
    }

    pub fn to_raster(&self, image_id: impl Into<String>) -> MultiBandImage {
        MultiBandImage::new(image_id, 1, self.height, self.width, self.values.clone())
            .expect("label values are finite")
    }

    pub fn from_raster(raster: &MultiBandImage, tau: f64) -> Result<Self> {
        if raster.bands() != 1 {
            return Err(Error::shape(format!(
                "label raster must have 1 band, found {}",
                raster.bands()
            )));
        }
        Ok(LabelImage {
            height: raster.height(),
            width: raster.width(),
            values: raster.data().to_vec(),
            tau,
        })
    }
}

/// One-dimensional squared distance transform by lower envelope of parabolas.
/// `f` holds 0 at sites and [`FAR`] elsewhere on the first pass; the output
/// is exact for integer inputs.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from each pixel to the nearest pixel where
/// `site` is true. Row pass, then column pass. `None` when there is no site.
pub fn squared_distance_to(height: usize, width: usize, site: impl Fn(usize) -> bool) -> Option<Vec<f64>> {
    let n = height * width;
    let mut grid: Vec<f64> = (0..n).map(|i| if site(i) { 0.0 } else { FAR }).collect();
    if grid.iter().all(|&v| v >= FAR) {
        return None;
    }
    let longest = height.max(width);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];

    for r in 0..height {
        let row = &mut grid[r * width..(r + 1) * width];
        f[..width].copy_from_slice(row);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        for (dst, &src) in row.iter_mut().zip(&out[..width]) {
            // rows without a site stay "far" so the column pass ignores them
            *dst = if src >= FAR { FAR } else { src };
        }
    }
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    Some(grid)
}

/// Positive distance to the nearest background pixel inside footprints,
/// negative distance to the nearest foreground pixel outside. A mask with no
/// background (or no foreground) is capped at `±(H + W)`.
pub fn signed_distance(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let cap = (h + w) as f64;
    let bits = mask.bits();
    let to_bg = squared_distance_to(h, w, |i| !bits[i]);
    let to_fg = squared_distance_to(h, w, |i| bits[i]);
    (0..h * w)
        .map(|i| {
            if bits[i] {
                to_bg.as_ref().map_or(cap, |d| d[i].sqrt())
            } else {
                to_fg.as_ref().map_or(-cap, |d| -d[i].sqrt())
            }
        })
        .collect()
}

/// `(clamp(d / tau, -1, 1) + 1) / 2` for every distance.
pub fn encode_label(distance: &[f64], height: usize, width: usize, tau: f64) -> Result<LabelImage> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if distance.len() != height * width {
        return Err(Error::shape(format!(
            "{} distances for a {height}x{width} label",
            distance.len()
        )));
    }
    let values = distance
        .iter()
        .map(|&d| (((d / tau).clamp(-1.0, 1.0) + 1.0) / 2.0) as f32)
        .collect();
    Ok(LabelImage {
        height,
        width,
        values,
        tau,
    })
}

/// Rasterize, signed distance transform, encode.
pub fn build_label(footprints: &[Polygon], height: usize, width: usize, tau: f64) -> Result<LabelImage> {
    let mask = rasterize(footprints, height, width);
    encode_label(&signed_distance(&mask), height, width, tau)
}
