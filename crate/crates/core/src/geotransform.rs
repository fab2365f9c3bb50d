//! Six-coefficient affine map between pixel `(col, row)` and geographic `(x, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine geotransform in the usual GDAL coefficient order:
/// `x = origin_x + col * pixel_w + row * row_rot`,
/// `y = origin_y + col * col_rot + row * pixel_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct GeoTransform {
    pub origin_x: f64,
    pub pixel_w: f64,
    pub row_rot: f64,
    pub origin_y: f64,
    pub col_rot: f64,
    pub pixel_h: f64,
}

impl From<[f64; 6]> for GeoTransform {
    fn from(c: [f64; 6]) -> Self {
        GeoTransform {
            origin_x: c[0],
            pixel_w: c[1],
            row_rot: c[2],
            origin_y: c[3],
            col_rot: c[4],
            pixel_h: c[5],
        }
    }
}

impl From<GeoTransform> for [f64; 6] {
    fn from(g: GeoTransform) -> Self {
        g.coefficients()
    }
}

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform {
        origin_x: 0.0,
        pixel_w: 1.0,
        row_rot: 0.0,
        origin_y: 0.0,
        col_rot: 0.0,
        pixel_h: 1.0,
    };

    pub fn coefficients(&self) -> [f64; 6] {
        [
            self.origin_x,
            self.pixel_w,
            self.row_rot,
            self.origin_y,
            self.col_rot,
            self.pixel_h,
        ]
    }

    /// Determinant of the 2x2 linear part.
    pub fn determinant(&self) -> f64 {
        self.pixel_w * self.pixel_h - self.row_rot * self.col_rot
    }

    pub fn validate(&self) -> Result<()> {
        let det = self.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(Error::invalid("geotransform is singular"));
        }
        if self.coefficients().iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("geotransform has non-finite coefficients"));
        }
        Ok(())
    }

    pub fn pixel_to_geo(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_w + row * self.row_rot,
            self.origin_y + col * self.col_rot + row * self.pixel_h,
        )
    }

    pub fn geo_to_pixel(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let det = self.determinant();
        if !det.is_finite() || det == 0.0 {
            return Err(Error::invalid("geotransform is singular"));
        }
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let col = (self.pixel_h * dx - self.row_rot * dy) / det;
        let row = (-self.col_rot * dx + self.pixel_w * dy) / det;
        Ok((col, row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_coordinates() {
        let gt = GeoTransform::IDENTITY;
        assert_eq!(gt.pixel_to_geo(3.5, 7.25), (3.5, 7.25));
        assert_eq!(gt.geo_to_pixel(3.5, 7.25).unwrap(), (3.5, 7.25));
    }

    #[test]
    fn north_up_example() {
        let gt = GeoTransform::from([100.0, 0.5, 0.0, 50.0, 0.0, -0.5]);
        assert_eq!(gt.pixel_to_geo(10.0, 4.0), (105.0, 48.0));
        assert_eq!(gt.geo_to_pixel(105.0, 48.0).unwrap(), (10.0, 4.0));
    }

    #[test]
    fn singular_rejected() {
        let gt = GeoTransform::from([0.0, 1.0, 2.0, 0.0, 0.5, 1.0]);
        assert!(gt.validate().is_err());
        assert!(gt.geo_to_pixel(1.0, 1.0).is_err());
    }

    #[test]
    fn round_trip_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let gt = GeoTransform::from([-3.2e5, 0.31, 0.02, 4.1e6, -0.015, -0.29]);
        // oracle: explicit 2x2 inverse applied to the forward map
        let m = [[gt.pixel_w, gt.row_rot], [gt.col_rot, gt.pixel_h]];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        // f64 spacing near 4e6 is ~1e-9 and the inverse scales it by ~1/0.29
        let tol = 1e-6;
        for _ in 0..1000 {
            let col: f64 = rng.gen_range(-50.0..700.0);
            let row: f64 = rng.gen_range(-50.0..700.0);
            let (x, y) = gt.pixel_to_geo(col, row);
            let (c2, r2) = gt.geo_to_pixel(x, y).unwrap();
            assert!((c2 - col).abs() < tol && (r2 - row).abs() < tol);
            let (dx, dy) = (x - gt.origin_x, y - gt.origin_y);
            let oc = (m[1][1] * dx - m[0][1] * dy) / det;
            let or = (-m[1][0] * dx + m[0][0] * dy) / det;
            assert!((oc - col).abs() < tol && (or - row).abs() < tol);
        }
    }
}
