//! Dataset manifests, seeded train/val/test splits, summaryData CSV I/O and
//! a synthetic scene generator.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    parse_wkt, to_wkt, write_geojson_layer, BinaryMask, FootprintRecord, MapLayer, Point, Polygon,
};
use crate::geotransform::GeoTransform;
use crate::raster::{write_raster, MultiBandImage};

pub const SUMMARY_HEADER: [&str; 3] = ["ImageId", "BuildingId", "PolygonWKT_Pix"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<PathBuf>,
    pub mul: PathBuf,
    pub footprints: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buildings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roads: Option<PathBuf>,
    #[serde(default)]
    pub geotransform: Option<GeoTransform>,
}

/// Images of one city. Relative paths are resolved against the manifest's
/// directory on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub city: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.image_id.as_str()).collect()
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == id)
    }

    pub fn validate_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate image id {}", e.image_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate_ids()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| -> Result<()> {
            *p = base.join(&*p);
            if !p.exists() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                ));
            }
            Ok(())
        };
        for e in &mut m.entries {
            resolve(&mut e.mul)?;
            resolve(&mut e.footprints)?;
            for p in [&mut e.rgb, &mut e.buildings, &mut e.roads].into_iter().flatten() {
                resolve(p)?;
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn load(path: &Path) -> Result<DatasetSplit> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `(test, val)` sizes: 20% of `n`, then 30% of the rest, rounded half up.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let test = (2 * n + 5) / 10;
    let val = (3 * (n - test) + 5) / 10;
    (test, val)
}

/// Seeded shuffle of `ids`, then test / val / train in that order.
pub fn split_ids(ids: &[&str], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 images to split, got {}",
            ids.len()
        )));
    }
    let mut order: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (nt, nv) = split_sizes(order.len());
    let train = order.split_off(nt + nv);
    let val = order.split_off(nt);
    Ok(DatasetSplit {
        seed,
        train,
        val,
        test: order,
    })
}

pub fn split(manifest: &Manifest, seed: u64) -> Result<DatasetSplit> {
    manifest.validate_ids()?;
    split_ids(&manifest.ids(), seed)
}

fn csv_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Footprints grouped by image id. Images listed only with `POLYGON EMPTY`
/// map to an empty list.
pub fn read_summary_csv(path: &Path) -> Result<BTreeMap<String, Vec<FootprintRecord>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_summary_csv(file, path)
}

pub fn parse_summary_csv(
    reader: impl std::io::Read,
    path: &Path,
) -> Result<BTreeMap<String, Vec<FootprintRecord>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| csv_err(path, 1, e.to_string()))?
        .clone();
    let mut col = [0usize; 3];
    for (k, name) in SUMMARY_HEADER.iter().enumerate() {
        col[k] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| csv_err(path, 1, format!("missing column {name}")))?;
    }
    let mut out: BTreeMap<String, Vec<FootprintRecord>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| {
            rec.get(col[k])
                .ok_or_else(|| csv_err(path, line, format!("missing {}", SUMMARY_HEADER[k])))
        };
        let image_id = field(0)?.to_string();
        let building_id: i64 = field(1)?
            .trim()
            .parse()
            .map_err(|_| csv_err(path, line, format!("bad BuildingId {:?}", field(1).unwrap_or(""))))?;
        let wkt = parse_wkt(field(2)?).map_err(|e| csv_err(path, line, e.to_string()))?;
        let list = out.entry(image_id.clone()).or_default();
        if let Some(polygon) = wkt.into_polygon() {
            list.push(FootprintRecord {
                image_id,
                building_id,
                polygon,
            });
        }
    }
    Ok(out)
}

/// Writes footprints per image, numbering buildings from 1. Images with no
/// footprints get a single `-1,POLYGON EMPTY` row.
pub fn write_predictions_csv(path: &Path, predictions: &[(String, Vec<Polygon>)]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let io = |e: csv::Error| csv_err(path, 0, e.to_string());
        w.write_record(SUMMARY_HEADER).map_err(io)?;
        for (id, polys) in predictions {
            if polys.is_empty() {
                w.write_record([id.as_str(), "-1", "POLYGON EMPTY"]).map_err(io)?;
            }
            for (k, p) in polys.iter().enumerate() {
                w.write_record([id.clone(), (k + 1).to_string(), to_wkt(p)]).map_err(io)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub size: usize,
    pub bands: usize,
    /// Target fraction of each scene covered by buildings.
    pub building_density: f64,
    /// Inclusive range of building side lengths in pixels.
    pub size_range: (usize, usize),
    pub city: String,
    /// Fraction of buildings that also appear in the buildings map layer.
    pub layer_fraction: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_images: 10,
            size: 650,
            bands: 8,
            building_density: 0.12,
            size_range: (8, 24),
            city: "synth".to_string(),
            layer_fraction: 0.7,
            noise: 0.04,
        }
    }
}

/// Clear space kept between buildings and around road strokes.
const GAP: usize = 3;
const ROAD_HALF_WIDTH: usize = 1;
const PLACEMENT_TRIES: usize = 2000;

/// One generated scene with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub image_id: String,
    pub rgb: MultiBandImage,
    pub mul: MultiBandImage,
    pub buildings: Vec<Polygon>,
    /// Road centerlines in pixel coordinates.
    pub roads: Vec<Vec<Point>>,
    /// Building pixels as painted by the generator.
    pub mask: BinaryMask,
}

struct Shape {
    polygon: Polygon,
    /// Pixel rectangles `(r0, c0, r1, c1)`, half-open.
    rects: Vec<(usize, usize, usize, usize)>,
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize, range: (usize, usize)) -> Shape {
    let (lo, hi) = range;
    let h = rng.gen_range(lo..=hi);
    let w = rng.gen_range(lo..=hi);
    let r0 = rng.gen_range(0..=size - h);
    let c0 = rng.gen_range(0..=size - w);
    let (r1, c1) = (r0 + h, c0 + w);
    let (x0, y0, x1, y1) = (c0 as f64, r0 as f64, c1 as f64, r1 as f64);
    if h >= 6 && w >= 6 && rng.gen_bool(0.4) {
        // L-shape: drop the bottom-right corner block
        let ch = rng.gen_range(h / 3..=h / 2);
        let cw = rng.gen_range(w / 3..=w / 2);
        let (xm, ym) = ((c1 - cw) as f64, (r1 - ch) as f64);
        let ring = vec![
            (x0, y0),
            (x1, y0),
            (x1, ym),
            (xm, ym),
            (xm, y1),
            (x0, y1),
            (x0, y0),
        ];
        Shape {
            polygon: Polygon::new(ring, vec![]).expect("closed ring"),
            rects: vec![(r0, c0, r1 - ch, c1), (r1 - ch, c0, r1, c1 - cw)],
        }
    } else {
        Shape {
            polygon: Polygon::rect(x0, y0, x1, y1),
            rects: vec![(r0, c0, r1, c1)],
        }
    }
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Generates scene `index` of the dataset described by `cfg`.
pub fn synth_scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    let size = cfg.size;
    let (lo, hi) = cfg.size_range;
    if lo == 0 || lo > hi || hi + 2 * GAP > size {
        return Err(Error::invalid(format!(
            "building sizes {lo}..={hi} do not fit a {size}px scene"
        )));
    }
    if cfg.bands < 5 {
        return Err(Error::invalid("synthetic scenes need at least 5 bands"));
    }
    if !(0.0..1.0).contains(&cfg.building_density) {
        return Err(Error::invalid("building density must be in [0, 1)"));
    }
    let mut rng = scene_rng(cfg.seed, index);
    let image_id = format!("{}_img{:04}", cfg.city, index + 1);

    // pixels reserved by roads and by buildings plus their gap
    let mut blocked = vec![false; size * size];
    let mut road_px = vec![false; size * size];
    let mut roads = Vec::new();
    for _ in 0..rng.gen_range(1..=2) {
        let at = rng.gen_range(GAP + 1..size - GAP - 1);
        let horizontal = rng.gen_bool(0.5);
        let line = if horizontal {
            vec![(0.0, at as f64 + 0.5), (size as f64, at as f64 + 0.5)]
        } else {
            vec![(at as f64 + 0.5, 0.0), (at as f64 + 0.5, size as f64)]
        };
        for d in -(ROAD_HALF_WIDTH as i64 + GAP as i64)..=(ROAD_HALF_WIDTH + GAP) as i64 {
            let k = at as i64 + d;
            if k < 0 || k >= size as i64 {
                continue;
            }
            for j in 0..size {
                let (r, c) = if horizontal { (k as usize, j) } else { (j, k as usize) };
                blocked[r * size + c] = true;
                if d.unsigned_abs() as usize <= ROAD_HALF_WIDTH {
                    road_px[r * size + c] = true;
                }
            }
        }
        roads.push(line);
    }

    let target = cfg.building_density * (size * size) as f64;
    let mut covered = 0usize;
    let mut mask = BinaryMask::new(size, size);
    let mut buildings = Vec::new();
    let mut material = Vec::new();
    while (covered as f64) < target {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let s = random_shape(&mut rng, size, (lo, hi));
            let free = s.rects.iter().all(|&(r0, c0, r1, c1)| {
                (r0..r1).all(|r| (c0..c1).all(|c| !blocked[r * size + c]))
            });
            if free {
                placed = Some(s);
                break;
            }
        }
        let s = placed.ok_or_else(|| {
            Error::invalid(format!(
                "could not place a building in {image_id} after {PLACEMENT_TRIES} tries; lower the density"
            ))
        })?;
        for &(r0, c0, r1, c1) in &s.rects {
            for r in r0..r1 {
                for c in c0..c1 {
                    mask.set(r, c, true);
                    covered += 1;
                }
            }
            let rr = r0.saturating_sub(GAP)..(r1 + GAP).min(size);
            for r in rr {
                for c in c0.saturating_sub(GAP)..(c1 + GAP).min(size) {
                    blocked[r * size + c] = true;
                }
            }
        }
        material.push(rng.gen_range(0..ROOFS.len()));
        buildings.push(s.polygon);
    }

    // per-pixel material: 0 ground, 1 road, 2.. roof types
    let mut kind = vec![0u8; size * size];
    for (i, &on) in road_px.iter().enumerate() {
        if on {
            kind[i] = 1;
        }
    }
    for (b, &m) in buildings.iter().zip(&material) {
        for px in crate::geometry::rasterize_pixels(b, size, size) {
            kind[px as usize] = 2 + m as u8;
        }
    }
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite noise");
    let brightness = rng.gen_range(0.85..1.15);
    let mut data = vec![0f32; cfg.bands * size * size];
    for b in 0..cfg.bands {
        let plane = &mut data[b * size * size..(b + 1) * size * size];
        for (v, &k) in plane.iter_mut().zip(&kind) {
            let base = match k {
                0 => GROUND[b % 8],
                1 => ROAD[b % 8],
                r => ROOFS[(r - 2) as usize][b % 8],
            };
            *v = (base * brightness + noise.sample(&mut rng)) as f32;
        }
    }
    let gt = GeoTransform {
        origin_x: (index * (size + 100)) as f64,
        pixel_w: 1.0,
        row_rot: 0.0,
        origin_y: 0.0,
        col_rot: 0.0,
        pixel_h: -1.0,
    };
    let mul = MultiBandImage::new(image_id.clone(), cfg.bands, size, size, data)?.with_geotransform(Some(gt));
    // red, green, blue of the multispectral order
    let mut rgb = mul.select_bands(&[4, 2, 1])?;
    for v in rgb.data_mut() {
        *v += (noise.sample(&mut rng) * 0.5) as f32;
    }
    Ok(SynthScene {
        image_id,
        rgb,
        mul,
        buildings,
        roads,
        mask,
    })
}

/// Band reflectances in multispectral order.
const GROUND: [f64; 8] = [0.20, 0.22, 0.30, 0.32, 0.28, 0.45, 0.55, 0.50];
const ROAD: [f64; 8] = [0.15, 0.16, 0.17, 0.18, 0.18, 0.19, 0.20, 0.20];
const ROOFS: [[f64; 8]; 3] = [
    [0.55, 0.58, 0.60, 0.62, 0.65, 0.50, 0.40, 0.38],
    [0.45, 0.40, 0.38, 0.45, 0.60, 0.35, 0.30, 0.28],
    [0.60, 0.65, 0.62, 0.58, 0.55, 0.45, 0.35, 0.33],
];

/// Writes rasters, `summaryData.csv`, `buildings.geojson`, `roads.geojson`
/// and `manifest.json` under `out`. Returns the manifest (relative paths).
pub fn synth_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    if cfg.n_images == 0 {
        return Err(Error::invalid("need at least one image"));
    }
    let raster_dir = out.join("rasters");
    fs::create_dir_all(&raster_dir).map_err(|e| Error::io(&raster_dir, e))?;
    let mut layer_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    layer_rng.set_stream(0);
    let mut footprints = Vec::new();
    let mut building_layer = MapLayer::default();
    let mut road_layer = MapLayer::default();
    let mut entries = Vec::new();
    for i in 0..cfg.n_images {
        let scene = synth_scene(cfg, i)?;
        let gt = scene.mul.geotransform.expect("synthetic scenes are georeferenced");
        let rgb_rel = PathBuf::from(format!("rasters/{}_rgb.json", scene.image_id));
        let mul_rel = PathBuf::from(format!("rasters/{}_mul.json", scene.image_id));
        write_raster(&out.join(&rgb_rel), &scene.rgb)?;
        write_raster(&out.join(&mul_rel), &scene.mul)?;
        let known: Vec<Polygon> = scene
            .buildings
            .iter()
            .filter(|_| layer_rng.gen_bool(cfg.layer_fraction.clamp(0.0, 1.0)))
            .cloned()
            .collect();
        let geo = MapLayer {
            polygons: known,
            lines: scene.roads.clone(),
        }
        .to_geo_space(&gt);
        building_layer.polygons.extend(geo.polygons);
        road_layer.lines.extend(geo.lines);
        entries.push(ManifestEntry {
            image_id: scene.image_id.clone(),
            rgb: Some(rgb_rel),
            mul: mul_rel,
            footprints: PathBuf::from("summaryData.csv"),
            buildings: Some(PathBuf::from("buildings.geojson")),
            roads: Some(PathBuf::from("roads.geojson")),
            geotransform: Some(gt),
        });
        footprints.push((scene.image_id, scene.buildings));
    }
    write_predictions_csv(&out.join("summaryData.csv"), &footprints)?;
    write_geojson_layer(&out.join("buildings.geojson"), &building_layer)?;
    write_geojson_layer(&out.join("roads.geojson"), &road_layer)?;
    let manifest = Manifest {
        city: cfg.city.clone(),
        entries,
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize;

    #[test]
    fn split_examples() {
        assert_eq!(split_sizes(100), (20, 24));
        assert_eq!(split_sizes(10), (2, 2));
        assert_eq!(split_sizes(3), (1, 1));
        let ids: Vec<String> = (0..100).map(|i| format!("i{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let a = split_ids(&refs, 5).unwrap();
        assert_eq!((a.test.len(), a.val.len(), a.train.len()), (20, 24, 56));
        assert_eq!(a, split_ids(&refs, 5).unwrap());
        assert_ne!(a, split_ids(&refs, 6).unwrap());
        let mut all: Vec<String> = [a.train, a.val, a.test].concat();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(split_ids(&refs[..2], 0).is_err());
    }

    #[test]
    fn csv_examples() {
        let text = "ImageId,BuildingId,PolygonWKT_Pix\n\
                    img_1,1,\"POLYGON ((0 0, 5 0, 5 5, 0 5, 0 0))\"\n\
                    img_2,-1,POLYGON EMPTY\n";
        let m = parse_summary_csv(text.as_bytes(), Path::new("t.csv")).unwrap();
        assert_eq!(m["img_1"].len(), 1);
        assert_eq!(m["img_1"][0].polygon.area(), 25.0);
        assert!(m["img_2"].is_empty());
        let empty = parse_summary_csv("ImageId,BuildingId,PolygonWKT_Pix\n".as_bytes(), Path::new("t")).unwrap();
        assert!(empty.is_empty());
        let bad = "ImageId,BuildingId,PolygonWKT_Pix\nimg,1,\"POLYGON ((0 0, 1 0))\"\n";
        match parse_summary_csv(bad.as_bytes(), Path::new("t.csv")) {
            Err(Error::Csv { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let missing = "ImageId,Poly\nimg,1\n";
        assert!(parse_summary_csv(missing.as_bytes(), Path::new("t")).is_err());
    }

    #[test]
    fn write_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let preds = vec![
            ("a".to_string(), vec![Polygon::rect(0.0, 0.0, 2.0, 2.0), Polygon::rect(5.0, 5.0, 6.0, 7.5)]),
            ("b".to_string(), vec![]),
        ];
        write_predictions_csv(&path, &preds).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ImageId,BuildingId,PolygonWKT_Pix\n"));
        assert!(text.contains("b,-1,POLYGON EMPTY"));
        let back = read_summary_csv(&path).unwrap();
        assert_eq!(back["a"].iter().map(|r| r.building_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(back["a"][1].polygon, preds[0].1[1]);
    }

    #[test]
    fn synthetic_truth_is_consistent() {
        let cfg = SynthConfig {
            seed: 3,
            size: 128,
            ..SynthConfig::default()
        };
        for i in 0..4 {
            let s = synth_scene(&cfg, i).unwrap();
            assert!(!s.buildings.is_empty());
            assert_eq!(rasterize(&s.buildings, 128, 128), s.mask);
            let again = synth_scene(&cfg, i).unwrap();
            assert_eq!(s.mul, again.mul);
        }
        let dense = SynthConfig {
            building_density: 0.9,
            ..cfg
        };
        assert!(synth_scene(&dense, 0).is_err());
    }
}
