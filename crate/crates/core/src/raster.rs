//! Multiband rasters and the preprocessing applied to them: pooled channel
//! statistics, percentile clipping, per-image min-max normalization, mean-image
//! centering and resampling.
//!
//! Samples are stored band-sequential, row-major (`[band][row][col]`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geotransform::GeoTransform;

/// Lower clip percentile, the normal-distribution position of -2 sigma.
pub const LOWER_PERCENTILE: f64 = 2.28;
/// Upper clip percentile, the normal-distribution position of +2 sigma.
pub const UPPER_PERCENTILE: f64 = 97.72;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandImage {
    pub image_id: String,
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub geotransform: Option<GeoTransform>,
}

impl MultiBandImage {
    pub fn new(
        image_id: impl Into<String>,
        bands: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {bands}x{height}x{width}"
            )));
        }
        if data.len() != bands * height * width {
            return Err(Error::shape(format!(
                "expected {} samples for {bands}x{height}x{width}, got {}",
                bands * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(MultiBandImage {
            image_id: image_id.into(),
            bands,
            height,
            width,
            data,
            geotransform: None,
        })
    }

    pub fn zeros(image_id: impl Into<String>, bands: usize, height: usize, width: usize) -> Self {
        assert!(bands > 0 && height > 0 && width > 0, "empty raster");
        MultiBandImage {
            image_id: image_id.into(),
            bands,
            height,
            width,
            data: vec![0.0; bands * height * width],
            geotransform: None,
        }
    }

    pub fn with_geotransform(mut self, gt: Option<GeoTransform>) -> Self {
        self.geotransform = gt;
        self
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f32) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &MultiBandImage) -> bool {
        self.bands == other.bands && self.height == other.height && self.width == other.width
    }

    fn check_channel(&self, channel: usize) -> Result<()> {
        if channel >= self.bands {
            return Err(Error::invalid(format!(
                "channel {channel} out of range for {}-band image",
                self.bands
            )));
        }
        Ok(())
    }

    /// Builds a new image from the listed bands of `self`, in order.
    pub fn select_bands(&self, indices: &[usize]) -> Result<MultiBandImage> {
        let mut data = Vec::with_capacity(indices.len() * self.plane_len());
        for &c in indices {
            self.check_channel(c)?;
            data.extend_from_slice(self.band(c));
        }
        let mut out = MultiBandImage::new(
            self.image_id.clone(),
            indices.len(),
            self.height,
            self.width,
            data,
        )?;
        out.geotransform = self.geotransform;
        Ok(out)
    }

    /// Concatenates the bands of several same-sized images.
    pub fn stack(image_id: impl Into<String>, parts: &[&MultiBandImage]) -> Result<MultiBandImage> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut bands = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::shape(format!(
                    "cannot stack {}x{} with {}x{}",
                    h, w, p.height, p.width
                )));
            }
            bands += p.bands;
            data.extend_from_slice(&p.data);
        }
        let mut out = MultiBandImage::new(image_id, bands, h, w, data)?;
        out.geotransform = first.geotransform;
        Ok(out)
    }
}

/// Per-channel statistics pooled over a set of images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Value at the 2.28th percentile.
    pub lo: f64,
    /// Value at the 97.72nd percentile.
    pub hi: f64,
}

/// Percentile by linear interpolation between closest ranks,
/// `rank = p/100 * (n - 1)` over the sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of empty sequence"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let n = sorted.len();
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    if frac == 0.0 {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Population statistics and clip bounds for one channel over all pixels of
/// all images.
pub fn channel_stats(images: &[&MultiBandImage], channel: usize) -> Result<BandStats> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("channel statistics of an empty image set"))?;
    for img in images {
        if img.bands != first.bands {
            return Err(Error::shape(format!(
                "image {} has {} bands, expected {}",
                img.image_id, img.bands, first.bands
            )));
        }
        img.check_channel(channel)?;
    }
    let mut values: Vec<f64> = images
        .iter()
        .flat_map(|img| img.band(channel).iter().map(|&v| v as f64))
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    values.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&values, LOWER_PERCENTILE)?;
    let hi = percentile_sorted(&values, UPPER_PERCENTILE)?;
    Ok(BandStats {
        mean,
        std: var.sqrt(),
        min: values[0],
        max: values[values.len() - 1],
        lo,
        hi,
    })
}

pub fn clip_channel(
    image: &MultiBandImage,
    channel: usize,
    lo: f64,
    hi: f64,
) -> Result<MultiBandImage> {
    image.check_channel(channel)?;
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::invalid(format!("clip bounds inverted: lo={lo} hi={hi}")));
    }
    let mut out = image.clone();
    for v in out.band_mut(channel) {
        *v = (*v as f64).clamp(lo, hi) as f32;
    }
    Ok(out)
}

/// `x' = (x - min) / (max - min)` over one channel of one image. A constant
/// channel maps to zeros.
pub fn minmax_normalize(image: &MultiBandImage, channel: usize) -> Result<MultiBandImage> {
    image.check_channel(channel)?;
    let mut out = image.clone();
    let band = out.band_mut(channel);
    let (min, max) = band
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v as f64), b.max(v as f64))
        });
    let span = max - min;
    if span <= 0.0 {
        band.fill(0.0);
    } else {
        for v in band.iter_mut() {
            *v = (((*v as f64) - min) / span).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Clips every channel to its pooled bounds, then min-max normalizes each channel.
pub fn normalize_image(image: &MultiBandImage, stats: &[BandStats]) -> Result<MultiBandImage> {
    if stats.len() != image.bands {
        return Err(Error::shape(format!(
            "{} band statistics for a {}-band image",
            stats.len(),
            image.bands
        )));
    }
    let mut out = image.clone();
    for (c, s) in stats.iter().enumerate() {
        out = clip_channel(&out, c, s.lo, s.hi)?;
        out = minmax_normalize(&out, c)?;
    }
    Ok(out)
}

/// Per-pixel, per-channel arithmetic mean.
pub fn mean_image(images: &[&MultiBandImage]) -> Result<MultiBandImage> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("mean of an empty image set"))?;
    let mut acc = vec![0.0f64; first.data.len()];
    for img in images {
        if !img.same_shape(first) {
            return Err(Error::shape(format!(
                "image {} is {}x{}x{}, expected {}x{}x{}",
                img.image_id, img.bands, img.height, img.width, first.bands, first.height,
                first.width
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&img.data) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    let data = acc.into_iter().map(|s| (s / n) as f32).collect();
    MultiBandImage::new("mean", first.bands, first.height, first.width, data)
}

/// Elementwise `image - mean`.
pub fn center(image: &MultiBandImage, mean: &MultiBandImage) -> Result<MultiBandImage> {
    if !image.same_shape(mean) {
        return Err(Error::shape(format!(
            "cannot center {}x{}x{} with mean {}x{}x{}",
            image.bands, image.height, image.width, mean.bands, mean.height, mean.width
        )));
    }
    let mut out = image.clone();
    for (v, &m) in out.data.iter_mut().zip(&mean.data) {
        *v -= m;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Nearest,
    Bilinear,
}

pub fn resize(
    image: &MultiBandImage,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> Result<MultiBandImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if out_h == image.height && out_w == image.width {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(image.bands * out_h * out_w);
    for c in 0..image.bands {
        data.extend(resize_plane(
            image.band(c),
            image.height,
            image.width,
            out_h,
            out_w,
            method,
        ));
    }
    let mut out = MultiBandImage::new(image.image_id.clone(), image.bands, out_h, out_w, data)?;
    out.geotransform = image.geotransform.map(|gt| {
        let sx = image.width as f64 / out_w as f64;
        let sy = image.height as f64 / out_h as f64;
        GeoTransform {
            pixel_w: gt.pixel_w * sx,
            row_rot: gt.row_rot * sy,
            col_rot: gt.col_rot * sx,
            pixel_h: gt.pixel_h * sy,
            ..gt
        }
    });
    Ok(out)
}

/// Resamples one row-major plane. Pixel centers are aligned and samples
/// outside the source are clamped to the edge.
pub fn resize_plane(
    src: &[f32],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    method: ResizeMethod,
) -> Vec<f32> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    match method {
        ResizeMethod::Nearest => {
            let cols: Vec<usize> = (0..out_w)
                .map(|x| (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1))
                .collect();
            for y in 0..out_h {
                let r = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                let row = &src[r * w..(r + 1) * w];
                out.extend(cols.iter().map(|&c| row[c]));
            }
        }
        ResizeMethod::Bilinear => {
            let taps = |n_out: usize, scale: f64, n_in: usize| -> Vec<(usize, usize, f64)> {
                (0..n_out)
                    .map(|i| {
                        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(n_in - 1);
                        (i0, i1, s - i0 as f64)
                    })
                    .collect()
            };
            let xt = taps(out_w, sx, w);
            let yt = taps(out_h, sy, h);
            for &(y0, y1, fy) in &yt {
                for &(x0, x1, fx) in &xt {
                    let a = src[y0 * w + x0] as f64;
                    let b = src[y0 * w + x1] as f64;
                    let c = src[y1 * w + x0] as f64;
                    let d = src[y1 * w + x1] as f64;
                    let top = a + (b - a) * fx;
                    let bot = c + (d - c) * fx;
                    out.push((top + (bot - top) * fy) as f32);
                }
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    image_id: String,
    bands: usize,
    height: usize,
    width: usize,
    dtype: String,
    geotransform: Option<[f64; 6]>,
}

const DTYPE: &str = "f32le";

/// Path of the binary payload that sits next to a raster header.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `header` (JSON) and its sibling `.bin` payload of little-endian f32
/// samples in band-sequential, row-major order.
pub fn write_raster(header: &Path, image: &MultiBandImage) -> Result<()> {
    let meta = RasterHeader {
        image_id: image.image_id.clone(),
        bands: image.bands,
        height: image.height,
        width: image.width,
        dtype: DTYPE.to_string(),
        geotransform: image.geotransform.map(|g| g.coefficients()),
    };
    if let Some(dir) = header.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(header, e))?;
    fs::write(header, text).map_err(|e| Error::io(header, e))?;
    let mut bytes = Vec::with_capacity(image.data.len() * 4);
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let payload = payload_path(header);
    fs::write(&payload, bytes).map_err(|e| Error::io(&payload, e))
}

fn read_header(header: &Path) -> Result<RasterHeader> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let meta: RasterHeader = serde_json::from_str(&text).map_err(|e| Error::json(header, e))?;
    if meta.dtype != DTYPE {
        return Err(Error::invalid(format!(
            "{}: unsupported dtype {:?}",
            header.display(),
            meta.dtype
        )));
    }
    Ok(meta)
}

/// `(bands, height, width)` from the header alone.
pub fn read_raster_shape(header: &Path) -> Result<(usize, usize, usize)> {
    let meta = read_header(header)?;
    Ok((meta.bands, meta.height, meta.width))
}

pub fn read_raster(header: &Path) -> Result<MultiBandImage> {
    let meta = read_header(header)?;
    let payload = payload_path(header);
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = meta.bands * meta.height * meta.width * 4;
    if bytes.len() != expected {
        return Err(Error::shape(format!(
            "{}: payload has {} bytes, header implies {expected}",
            payload.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let gt = meta.geotransform.map(GeoTransform::from);
    if let Some(g) = &gt {
        g.validate()?;
    }
    Ok(MultiBandImage::new(meta.image_id, meta.bands, meta.height, meta.width, data)?
        .with_geotransform(gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(vals: &[f32]) -> MultiBandImage {
        MultiBandImage::new("t", 1, 1, vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(MultiBandImage::new("a", 1, 2, 2, vec![0.0; 3]).is_err());
        assert!(MultiBandImage::new("a", 1, 1, 2, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn percentile_examples() {
        let v = [10.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 10.0);
        assert_eq!(percentile(&v, 25.0).unwrap(), 20.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 50.0);
        assert_eq!(percentile(&v, 10.0).unwrap(), 14.0);
        assert_eq!(percentile(&[7.0], 63.0).unwrap(), 7.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn stats_examples() {
        let a = single(&[5.0; 6]);
        let s = channel_stats(&[&a], 0).unwrap();
        assert_eq!((s.mean, s.std, s.lo, s.hi), (5.0, 0.0, 5.0, 5.0));

        let a = single(&[2.0]);
        let b = single(&[4.0]);
        let s = channel_stats(&[&a, &b], 0).unwrap();
        assert_eq!((s.mean, s.std), (3.0, 1.0));
        assert!(s.min <= s.lo && s.lo <= s.hi && s.hi <= s.max);

        assert!(channel_stats(&[], 0).is_err());
        assert!(channel_stats(&[&a], 1).is_err());
    }

    #[test]
    fn clip_examples() {
        let img = single(&[1.0, 5.0, 9.0]);
        assert_eq!(clip_channel(&img, 0, 2.0, 8.0).unwrap().data(), &[2.0, 5.0, 8.0]);
        assert_eq!(clip_channel(&img, 0, 0.0, 10.0).unwrap(), img);
        assert_eq!(clip_channel(&img, 0, 3.0, 3.0).unwrap().data(), &[3.0; 3]);
        assert!(clip_channel(&img, 0, 4.0, 3.0).is_err());
    }

    #[test]
    fn clip_leaves_other_channels() {
        let img = MultiBandImage::new("t", 2, 1, 2, vec![0.0, 10.0, 0.0, 10.0]).unwrap();
        let out = clip_channel(&img, 1, 2.0, 3.0).unwrap();
        assert_eq!(out.data(), &[0.0, 10.0, 2.0, 3.0]);
    }

    #[test]
    fn minmax_examples() {
        let img = single(&[2.0, 4.0, 6.0]);
        assert_eq!(minmax_normalize(&img, 0).unwrap().data(), &[0.0, 0.5, 1.0]);
        let img = single(&[3.0; 4]);
        assert_eq!(minmax_normalize(&img, 0).unwrap().data(), &[0.0; 4]);
        let img = single(&[0.0, 0.25, 1.0]);
        assert_eq!(minmax_normalize(&img, 0).unwrap(), img);
    }

    #[test]
    fn mean_and_center() {
        let a = single(&[1.0, 2.0]);
        let b = single(&[3.0, 6.0]);
        let m = mean_image(&[&a, &b]).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0]);
        assert_eq!(mean_image(&[&a]).unwrap().data(), a.data());
        assert_eq!(mean_image(&[&a, &a, &a]).unwrap().data(), a.data());
        assert!(mean_image(&[]).is_err());
        let c = single(&[1.0, 2.0, 3.0]);
        assert!(mean_image(&[&a, &c]).is_err());

        assert_eq!(center(&a, &a).unwrap().data(), &[0.0, 0.0]);
        let z = single(&[0.0, 0.0]);
        assert_eq!(center(&a, &z).unwrap(), a);
        assert!(center(&a, &c).is_err());
    }

    #[test]
    fn resize_examples() {
        let img = MultiBandImage::new("c", 1, 2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(resize(&img, 2, 2, ResizeMethod::Bilinear).unwrap(), img);
        let up = resize(&img, 4, 4, ResizeMethod::Nearest).unwrap();
        #[rustfmt::skip]
        let expected = [
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
            1.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
        ];
        assert_eq!(up.data(), &expected);

        let flat = MultiBandImage::new("k", 2, 3, 5, vec![0.7; 30]).unwrap();
        let r = resize(&flat, 11, 4, ResizeMethod::Bilinear).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(resize(&flat, 0, 4, ResizeMethod::Nearest).is_err());
    }

    #[test]
    fn bilinear_midpoints() {
        // 1x2 -> 1x4: sample centers at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        let img = MultiBandImage::new("m", 1, 1, 2, vec![0.0, 4.0]).unwrap();
        let r = resize(&img, 1, 4, ResizeMethod::Bilinear).unwrap();
        assert_eq!(r.data(), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/img.json");
        let img = MultiBandImage::new("img_7", 2, 2, 3, (0..12).map(|v| v as f32 * 0.5).collect())
            .unwrap()
            .with_geotransform(Some(GeoTransform::from([1.0, 0.5, 0.0, 2.0, 0.0, -0.5])));
        write_raster(&path, &img).unwrap();
        let bytes = std::fs::read(payload_path(&path)).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[4..8], &0.5f32.to_le_bytes());
        let back = read_raster(&path).unwrap();
        assert_eq!(back, img);
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["bands"], 2);
    }
}
