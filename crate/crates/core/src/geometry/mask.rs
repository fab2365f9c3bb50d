use super::{Point, Polygon};
use crate::error::{Error, Result};

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    /// Pixels whose value is strictly greater than `threshold`.
    pub fn from_threshold(height: usize, width: usize, values: &[f32], threshold: f32) -> Self {
        assert_eq!(values.len(), height * width, "value count does not match mask");
        BinaryMask {
            height,
            width,
            bits: values.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Sets every pixel listed by flat index.
    pub fn set_indices(&mut self, indices: &[u32]) {
        for &i in indices {
            self.bits[i as usize] = true;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Calls `emit(row, col_start, col_end)` for every half-open run of pixels
/// whose centers fall inside `polygon` under the even-odd rule, clipped to
/// the raster.
fn scan_polygon(polygon: &Polygon, height: usize, width: usize, mut emit: impl FnMut(usize, usize, usize)) {
    let (_, min_y, _, max_y) = polygon.bounds();
    if !(min_y.is_finite() && max_y.is_finite()) || height == 0 || width == 0 {
        return;
    }
    let r0 = ((min_y - 0.5).ceil().max(0.0)) as usize;
    let r1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(height);
    let mut xs: Vec<f64> = Vec::new();
    for r in r0..r1 {
        let y = r as f64 + 0.5;
        xs.clear();
        for ring in polygon.rings() {
            for e in ring.windows(2) {
                let ((x0, y0), (x1, y1)) = (e[0], e[1]);
                if (y0 > y) != (y1 > y) {
                    xs.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = (pair[0] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            let c1 = (pair[1] - 0.5).ceil().clamp(0.0, width as f64) as usize;
            if c1 > c0 {
                emit(r, c0, c1);
            }
        }
    }
}

/// Sorted flat indices of the pixels a polygon covers.
pub fn rasterize_pixels(polygon: &Polygon, height: usize, width: usize) -> Vec<u32> {
    let mut out = Vec::new();
    scan_polygon(polygon, height, width, |r, c0, c1| {
        out.extend((c0..c1).map(|c| (r * width + c) as u32));
    });
    out
}

/// Sets pixel `(r, c)` iff its center lies inside any of the polygons.
pub fn rasterize(polygons: &[Polygon], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    for p in polygons {
        scan_polygon(p, height, width, |r, c0, c1| {
            mask.bits[r * width + c0..r * width + c1].fill(true);
        });
    }
    mask
}

/// Strokes polylines: a pixel is set when its center lies within
/// `stroke_width / 2` of any segment.
pub fn rasterize_lines(lines: &[Vec<Point>], stroke_width: f64, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    let half = stroke_width / 2.0;
    for line in lines {
        let segments: Vec<(Point, Point)> = if line.len() == 1 {
            vec![(line[0], line[0])]
        } else {
            line.windows(2).map(|w| (w[0], w[1])).collect()
        };
        for ((ax, ay), (bx, by)) in segments {
            let c0 = ((ax.min(bx) - half - 0.5).floor().max(0.0)) as usize;
            let c1 = ((ax.max(bx) + half + 0.5).ceil().max(0.0) as usize).min(width);
            let r0 = ((ay.min(by) - half - 0.5).floor().max(0.0)) as usize;
            let r1 = ((ay.max(by) + half + 0.5).ceil().max(0.0) as usize).min(height);
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            for r in r0..r1 {
                for c in c0..c1 {
                    let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                    let t = if len2 > 0.0 {
                        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
                    if qx * qx + qy * qy <= half * half {
                        mask.set(r, c, true);
                    }
                }
            }
        }
    }
    mask
}

/// `|A ∩ B| / |A ∪ B|`, or 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "IoU of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasterize_examples() {
        assert!(rasterize(&[], 4, 4).is_empty());
        let m = rasterize(&[Polygon::rect(0.0, 0.0, 2.0, 2.0)], 4, 4);
        let set: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c))
            .collect();
        assert_eq!(set, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);

        let two = rasterize(
            &[Polygon::rect(0.0, 0.0, 1.0, 1.0), Polygon::rect(2.0, 2.0, 3.0, 3.0)],
            4,
            4,
        );
        assert_eq!(two.count(), 2);
    }

    #[test]
    fn holes_are_not_filled() {
        let p = Polygon::new(
            Polygon::rect(0.0, 0.0, 3.0, 3.0).exterior().to_vec(),
            vec![Polygon::rect(1.0, 1.0, 2.0, 2.0).exterior().to_vec()],
        )
        .unwrap();
        let m = rasterize(&[p], 3, 3);
        assert_eq!(m.count(), 8);
        assert!(!m.get(1, 1));
    }

    #[test]
    fn clipped_to_bounds() {
        let m = rasterize(&[Polygon::rect(-5.0, -5.0, 2.0, 100.0)], 4, 4);
        assert_eq!(m.count(), 8);
        assert_eq!(rasterize_pixels(&Polygon::rect(-5.0, -5.0, 2.0, 100.0), 4, 4).len(), 8);
    }

    #[test]
    fn triangle_pixel_centers() {
        // right triangle (0,0),(4,0),(0,4): centers with x + y < 4
        let tri = Polygon::new(vec![(0.0, 0.0), (4.0, 0.0), (0.0, 4.0), (0.0, 0.0)], vec![]).unwrap();
        let m = rasterize(&[tri], 4, 4);
        for r in 0..4 {
            for c in 0..4 {
                let inside = (c as f64 + 0.5) + (r as f64 + 0.5) < 4.0;
                assert_eq!(m.get(r, c), inside, "({r},{c})");
            }
        }
    }

    #[test]
    fn stroke_width_three() {
        let m = rasterize_lines(&[vec![(0.0, 5.5), (10.0, 5.5)]], 3.0, 10, 10);
        assert_eq!(m.count(), 30);
        assert!(m.get(4, 3) && m.get(5, 3) && m.get(6, 3) && !m.get(7, 3));
    }

    #[test]
    fn iou_examples() {
        let a = rasterize(&[Polygon::rect(0.0, 0.0, 2.0, 1.0)], 3, 3);
        let b = rasterize(&[Polygon::rect(1.0, 0.0, 3.0, 1.0)], 3, 3);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = rasterize(&[Polygon::rect(0.0, 2.0, 1.0, 3.0)], 3, 3);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::new(3, 3);
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::new(2, 3)).is_err());
    }
}
