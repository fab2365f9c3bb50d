//! Nine-tile slicing of a raster into overlapping 256x256 windows and
//! count-averaged reassembly.

use crate::error::{Error, Result};
use crate::raster::MultiBandImage;

pub const TILE: usize = 256;

/// Offsets `{0, (D - tile) / 2, D - tile}` along one axis.
pub fn tile_offsets(dim: usize, tile: usize) -> Result<[usize; 3]> {
    if dim < tile {
        return Err(Error::invalid(format!(
            "dimension {dim} is smaller than the {tile}px tile"
        )));
    }
    Ok([0, (dim - tile) / 2, dim - tile])
}

/// A 3x3 grid of tiles over a parent raster, in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub parent_h: usize,
    pub parent_w: usize,
    pub tile: usize,
    pub row_offsets: [usize; 3],
    pub col_offsets: [usize; 3],
    pub tiles: Vec<MultiBandImage>,
}

impl TileSet {
    /// `(row_offset, col_offset)` of tile `k`.
    pub fn origin(&self, k: usize) -> (usize, usize) {
        (self.row_offsets[k / 3], self.col_offsets[k % 3])
    }

    /// Replaces the tile payloads, keeping the grid.
    pub fn with_tiles(&self, tiles: Vec<MultiBandImage>) -> TileSet {
        TileSet {
            tiles,
            ..self.clone_grid()
        }
    }

    fn clone_grid(&self) -> TileSet {
        TileSet {
            parent_h: self.parent_h,
            parent_w: self.parent_w,
            tile: self.tile,
            row_offsets: self.row_offsets,
            col_offsets: self.col_offsets,
            tiles: Vec::new(),
        }
    }

    /// Grid for a parent of the given size, with no tile payloads.
    pub fn grid(parent_h: usize, parent_w: usize) -> Result<TileSet> {
        Ok(TileSet {
            parent_h,
            parent_w,
            tile: TILE,
            row_offsets: tile_offsets(parent_h, TILE)?,
            col_offsets: tile_offsets(parent_w, TILE)?,
            tiles: Vec::new(),
        })
    }

    fn validate(&self) -> Result<()> {
        for (offs, dim) in [(self.row_offsets, self.parent_h), (self.col_offsets, self.parent_w)] {
            let ordered = offs[0] <= offs[1] && offs[1] <= offs[2];
            if offs[0] != 0 || !ordered || offs[2] + self.tile != dim {
                return Err(Error::invalid(format!(
                    "tile offsets {offs:?} do not span {dim}px with {}px tiles",
                    self.tile
                )));
            }
            if offs[1] > self.tile || offs[2] - offs[1] > self.tile {
                return Err(Error::invalid(format!("tile offsets {offs:?} leave gaps")));
            }
        }
        if self.tiles.len() != 9 {
            return Err(Error::invalid(format!("expected 9 tiles, found {}", self.tiles.len())));
        }
        let bands = self.tiles[0].bands();
        for t in &self.tiles {
            if t.height() != self.tile || t.width() != self.tile || t.bands() != bands {
                return Err(Error::shape(format!(
                    "tile {} is {}x{}x{}, expected {bands}x{}x{}",
                    t.image_id,
                    t.bands(),
                    t.height(),
                    t.width(),
                    self.tile,
                    self.tile
                )));
            }
        }
        Ok(())
    }

    /// Number of tiles covering each parent pixel, row-major.
    pub fn coverage(&self) -> Vec<u8> {
        let mut count = vec![0u8; self.parent_h * self.parent_w];
        for k in 0..9 {
            let (r0, c0) = self.origin(k);
            for r in r0..r0 + self.tile {
                for c in &mut count[r * self.parent_w + c0..r * self.parent_w + c0 + self.tile] {
                    *c += 1;
                }
            }
        }
        count
    }
}

/// Copies the nine windows out of every band.
pub fn slice(image: &MultiBandImage) -> Result<TileSet> {
    let grid = TileSet::grid(image.height(), image.width())?;
    let t = grid.tile;
    let tiles = (0..9)
        .map(|k| {
            let (r0, c0) = grid.origin(k);
            let mut data = Vec::with_capacity(image.bands() * t * t);
            for b in 0..image.bands() {
                let band = image.band(b);
                for r in r0..r0 + t {
                    let start = r * image.width() + c0;
                    data.extend_from_slice(&band[start..start + t]);
                }
            }
            MultiBandImage::new(
                format!("{}_t{}{}", image.image_id, k / 3, k % 3),
                image.bands(),
                t,
                t,
                data,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grid.with_tiles(tiles))
}

/// Per-pixel mean of every tile value covering that pixel.
pub fn reassemble(tiles: &TileSet, image_id: impl Into<String>) -> Result<MultiBandImage> {
    tiles.validate()?;
    let (h, w, t) = (tiles.parent_h, tiles.parent_w, tiles.tile);
    let bands = tiles.tiles[0].bands();
    let mut sum = vec![0.0f64; bands * h * w];
    for (k, tile) in tiles.tiles.iter().enumerate() {
        let (r0, c0) = tiles.origin(k);
        for b in 0..bands {
            let src = tile.band(b);
            for r in 0..t {
                let dst = &mut sum[(b * h + r0 + r) * w + c0..(b * h + r0 + r) * w + c0 + t];
                for (d, &v) in dst.iter_mut().zip(&src[r * t..(r + 1) * t]) {
                    *d += v as f64;
                }
            }
        }
    }
    let count = tiles.coverage();
    let plane = h * w;
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % plane] as f64) as f32)
        .collect();
    MultiBandImage::new(image_id, bands, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(bands: usize, h: usize, w: usize) -> MultiBandImage {
        let data = (0..bands * h * w).map(|i| (i % 977) as f32 * 0.013).collect();
        MultiBandImage::new("p", bands, h, w, data).unwrap()
    }

    #[test]
    fn offsets() {
        assert_eq!(tile_offsets(650, 256).unwrap(), [0, 197, 394]);
        assert_eq!(tile_offsets(256, 256).unwrap(), [0, 0, 0]);
        assert!(tile_offsets(255, 256).is_err());
    }

    #[test]
    fn coverage_counts() {
        let g = TileSet::grid(650, 650).unwrap();
        let cov = g.coverage();
        assert_eq!(cov[200 * 650 + 200], 4);
        assert_eq!(cov[500 * 650 + 100], 1);
        let mut seen: Vec<u8> = cov.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen, vec![1, 2, 4]);
    }

    #[test]
    fn slice_copies_windows() {
        let img = ramp(2, 650, 650);
        let ts = slice(&img).unwrap();
        assert_eq!(ts.tiles.len(), 9);
        let t4 = &ts.tiles[4];
        assert_eq!(t4.get(1, 0, 0), img.get(1, 197, 197));
        assert_eq!(t4.get(0, 255, 255), img.get(0, 452, 452));
        assert_eq!(ts.tiles[0].get(0, 10, 20), img.get(0, 10, 20));
    }

    #[test]
    fn degenerate_parent() {
        let img = ramp(1, 256, 256);
        let ts = slice(&img).unwrap();
        assert!(ts.tiles.iter().all(|t| t.data() == img.data()));
        assert_eq!(reassemble(&ts, "p").unwrap().data(), img.data());
    }

    #[test]
    fn round_trip_and_averaging() {
        let img = ramp(3, 650, 650);
        let ts = slice(&img).unwrap();
        assert_eq!(reassemble(&ts, "p").unwrap().data(), img.data());

        let constant = MultiBandImage::new("c", 1, 256, 256, vec![0.6; 65536]).unwrap();
        let flat = TileSet::grid(650, 650).unwrap().with_tiles(vec![constant; 9]);
        assert!(reassemble(&flat, "c").unwrap().data().iter().all(|&v| v == 0.6));
    }

    #[test]
    fn four_way_mean() {
        // pixel (200, 200) is covered by tiles 0, 1, 3, 4
        let mut tiles = Vec::new();
        for k in 0..9 {
            let v = match k {
                0 => 0.2,
                1 => 0.4,
                3 => 0.6,
                4 => 0.8,
                _ => 0.0,
            };
            tiles.push(MultiBandImage::new("t", 1, 256, 256, vec![v; 65536]).unwrap());
        }
        let ts = TileSet::grid(650, 650).unwrap().with_tiles(tiles);
        let out = reassemble(&ts, "m").unwrap();
        assert!((out.get(0, 200, 200) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn rejects_inconsistent_offsets() {
        let mut ts = slice(&ramp(1, 650, 650)).unwrap();
        ts.row_offsets = [0, 100, 390];
        assert!(reassemble(&ts, "x").is_err());
        let mut ts = slice(&ramp(1, 650, 650)).unwrap();
        ts.tiles.pop();
        assert!(reassemble(&ts, "x").is_err());
    }
}
