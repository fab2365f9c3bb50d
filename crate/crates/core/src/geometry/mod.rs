//! Footprint polygons in pixel space and the raster operations built on them.
//!
//! Coordinates follow the pixel-edge convention: `x` is the column axis,
//! `y` the row axis, and pixel `(row, col)` covers `[col, col+1) x [row, row+1)`
//! with its center at `(col + 0.5, row + 0.5)`.

mod geojson;
mod mask;
mod merge;
mod trace;
mod wkt;

pub use geojson::{parse_geojson_layer, read_geojson_layer, write_geojson_layer, MapLayer};
pub use mask::{mask_iou, rasterize, rasterize_lines, rasterize_pixels, BinaryMask};
pub use merge::merge_intersecting;
pub use trace::extract_polygons;
pub use wkt::{parse_wkt, to_wkt, Wkt};

use crate::error::{Error, Result};

pub type Point = (f64, f64);

/// A closed ring polygon with optional holes. Rings repeat their first vertex
/// at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    exterior: Vec<Point>,
    holes: Vec<Vec<Point>>,
}

fn check_ring(ring: &[Point], what: &str) -> Result<()> {
    if ring.len() < 4 {
        return Err(Error::invalid(format!(
            "{what} ring has {} points, need at least 4",
            ring.len()
        )));
    }
    if ring.first() != ring.last() {
        return Err(Error::invalid(format!("{what} ring is not closed")));
    }
    if ring.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid(format!("{what} ring has non-finite coordinates")));
    }
    Ok(())
}

/// Signed shoelace area of a closed ring; positive for rings that run
/// clockwise on screen (y down).
pub fn ring_signed_area(ring: &[Point]) -> f64 {
    let twice: f64 = ring
        .windows(2)
        .map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1)
        .sum();
    twice / 2.0
}

impl Polygon {
    pub fn new(exterior: Vec<Point>, holes: Vec<Vec<Point>>) -> Result<Self> {
        check_ring(&exterior, "exterior")?;
        for h in &holes {
            check_ring(h, "hole")?;
        }
        Ok(Polygon { exterior, holes })
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Polygon {
            exterior: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)],
            holes: Vec::new(),
        }
    }

    pub fn exterior(&self) -> &[Point] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<Point>] {
        &self.holes
    }

    pub fn rings(&self) -> impl Iterator<Item = &[Point]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(|h| h.as_slice()))
    }

    /// `|shoelace(exterior)| - sum |shoelace(hole)|`, in px^2.
    pub fn area(&self) -> f64 {
        ring_signed_area(&self.exterior).abs()
            - self
                .holes
                .iter()
                .map(|h| ring_signed_area(h).abs())
                .sum::<f64>()
    }

    /// `(min_x, min_y, max_x, max_y)` of the exterior ring.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.exterior.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }

    /// Applies `f` to every vertex.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Polygon {
        Polygon {
            exterior: self.exterior.iter().map(|&p| f(p)).collect(),
            holes: self
                .holes
                .iter()
                .map(|h| h.iter().map(|&p| f(p)).collect())
                .collect(),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Polygon {
        self.map_points(|(x, y)| (x + dx, y + dy))
    }
}

/// Free-function form of [`Polygon::area`].
pub fn polygon_area(polygon: &Polygon) -> f64 {
    polygon.area()
}

/// A building footprint tied to the image it was labeled in.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintRecord {
    pub image_id: String,
    pub building_id: i64,
    pub polygon: Polygon,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn areas() {
        assert_eq!(Polygon::rect(0.0, 0.0, 1.0, 1.0).area(), 1.0);
        let tri = Polygon::new(vec![(0.0, 0.0), (4.0, 0.0), (0.0, 3.0), (0.0, 0.0)], vec![])
            .unwrap();
        assert_eq!(tri.area(), 6.0);
        let holed = Polygon::new(
            Polygon::rect(0.0, 0.0, 3.0, 3.0).exterior().to_vec(),
            vec![Polygon::rect(1.0, 1.0, 2.0, 2.0).exterior().to_vec()],
        )
        .unwrap();
        assert_eq!(polygon_area(&holed), 8.0);
    }

    #[test]
    fn orientation_does_not_change_area() {
        let mut ring = Polygon::rect(0.0, 0.0, 2.0, 5.0).exterior().to_vec();
        ring.reverse();
        assert_eq!(Polygon::new(ring, vec![]).unwrap().area(), 10.0);
    }

    #[test]
    fn ring_validation() {
        assert!(Polygon::new(vec![(0.0, 0.0), (1.0, 0.0)], vec![]).is_err());
        assert!(Polygon::new(vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)], vec![]).is_err());
    }
}
