//! Minimal GeoJSON (RFC 7946) reader/writer for map layers: polygons,
//! multipolygons and line strings, bare or wrapped in features.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use super::{Point, Polygon};
use crate::error::{Error, Result};
use crate::geotransform::GeoTransform;

/// Geometries of one map layer, in whatever coordinate system the file uses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapLayer {
    pub polygons: Vec<Polygon>,
    pub lines: Vec<Vec<Point>>,
}

impl MapLayer {
    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty() && self.lines.is_empty()
    }

    /// Maps every geographic vertex to pixel space.
    pub fn to_pixel_space(&self, gt: &GeoTransform) -> Result<MapLayer> {
        gt.validate()?;
        let f = |(x, y): Point| gt.geo_to_pixel(x, y).expect("validated transform");
        Ok(MapLayer {
            polygons: self.polygons.iter().map(|p| p.map_points(f)).collect(),
            lines: self
                .lines
                .iter()
                .map(|l| l.iter().map(|&p| f(p)).collect())
                .collect(),
        })
    }

    pub fn to_geo_space(&self, gt: &GeoTransform) -> MapLayer {
        let f = |(c, r): Point| gt.pixel_to_geo(c, r);
        MapLayer {
            polygons: self.polygons.iter().map(|p| p.map_points(f)).collect(),
            lines: self
                .lines
                .iter()
                .map(|l| l.iter().map(|&p| f(p)).collect())
                .collect(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::GeoJson(msg.into())
}

fn position(v: &Value) -> Result<Point> {
    let arr = v.as_array().ok_or_else(|| bad("position is not an array"))?;
    if arr.len() < 2 {
        return Err(bad("position needs at least two numbers"));
    }
    let x = arr[0].as_f64().ok_or_else(|| bad("non-numeric coordinate"))?;
    let y = arr[1].as_f64().ok_or_else(|| bad("non-numeric coordinate"))?;
    Ok((x, y))
}

fn positions(v: &Value) -> Result<Vec<Point>> {
    v.as_array()
        .ok_or_else(|| bad("expected an array of positions"))?
        .iter()
        .map(position)
        .collect()
}

fn polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| bad("polygon coordinates are not an array"))?
        .iter()
        .map(positions)
        .collect::<Result<Vec<_>>>()?;
    let mut it = rings.into_iter();
    let exterior = it.next().ok_or_else(|| bad("polygon without rings"))?;
    Polygon::new(exterior, it.collect()).map_err(|e| bad(e.to_string()))
}

fn collect_geometry(geom: &Value, layer: &mut MapLayer) -> Result<()> {
    if geom.is_null() {
        return Ok(());
    }
    let kind = geom["type"].as_str().ok_or_else(|| bad("geometry without type"))?;
    let coords = &geom["coordinates"];
    match kind {
        "Polygon" => layer.polygons.push(polygon(coords)?),
        "MultiPolygon" => {
            for p in coords.as_array().ok_or_else(|| bad("bad MultiPolygon"))? {
                layer.polygons.push(polygon(p)?);
            }
        }
        "LineString" => layer.lines.push(positions(coords)?),
        "MultiLineString" => {
            for l in coords.as_array().ok_or_else(|| bad("bad MultiLineString"))? {
                layer.lines.push(positions(l)?);
            }
        }
        "GeometryCollection" => {
            for g in geom["geometries"].as_array().ok_or_else(|| bad("bad GeometryCollection"))? {
                collect_geometry(g, layer)?;
            }
        }
        other => return Err(bad(format!("unsupported geometry type {other}"))),
    }
    Ok(())
}

pub fn parse_geojson_layer(text: &str) -> Result<MapLayer> {
    let root: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let mut layer = MapLayer::default();
    match root["type"].as_str() {
        Some("FeatureCollection") => {
            for f in root["features"].as_array().ok_or_else(|| bad("features is not an array"))? {
                collect_geometry(&f["geometry"], &mut layer)?;
            }
        }
        Some("Feature") => collect_geometry(&root["geometry"], &mut layer)?,
        Some(_) => collect_geometry(&root, &mut layer)?,
        None => return Err(bad("document without type")),
    }
    Ok(layer)
}

pub fn read_geojson_layer(path: &Path) -> Result<MapLayer> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geojson_layer(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
}

fn coords(points: &[Point]) -> Value {
    Value::Array(points.iter().map(|&(x, y)| json!([x, y])).collect())
}

/// Writes a FeatureCollection with one feature per polygon and per line.
pub fn write_geojson_layer(path: &Path, layer: &MapLayer) -> Result<()> {
    let mut features = Vec::new();
    for p in &layer.polygons {
        let rings: Vec<Value> = p.rings().map(coords).collect();
        features.push(json!({
            "type": "Feature",
            "properties": {},
            "geometry": {"type": "Polygon", "coordinates": rings},
        }));
    }
    for l in &layer.lines {
        features.push(json!({
            "type": "Feature",
            "properties": {},
            "geometry": {"type": "LineString", "coordinates": coords(l)},
        }));
    }
    let doc = json!({"type": "FeatureCollection", "features": features});
    let text = serde_json::to_string(&doc).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
