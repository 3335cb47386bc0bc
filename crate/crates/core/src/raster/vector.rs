//! Polygon layers read from GeoJSON or GeoPackage.

use std::path::Path;

use geo::{Coord, LineString, MultiPolygon, Polygon};
use geojson::GeoJson;

use crate::error::{Error, Result};

/// Polygon set tagged with its coordinate reference system.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLayer {
    pub crs_id: String,
    pub polygons: MultiPolygon<f64>,
}

impl VectorLayer {
    pub fn new(crs_id: impl Into<String>, polygons: MultiPolygon<f64>) -> Self {
        VectorLayer {
            crs_id: crs_id.into(),
            polygons,
        }
    }

    pub fn empty(crs_id: impl Into<String>) -> Self {
        VectorLayer::new(crs_id, MultiPolygon(Vec::new()))
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.0.is_empty()
    }

    /// Serializes as a GeoJSON FeatureCollection with a legacy named-CRS
    /// member, the form [`read_vector`] understands.
    pub fn to_geojson_string(&self) -> String {
        let features: Vec<serde_json::Value> = self
            .polygons
            .iter()
            .map(|p| {
                let geometry = geojson::Geometry::from(p);
                serde_json::json!({
                    "type": "Feature",
                    "properties": {},
                    "geometry": geometry,
                })
            })
            .collect();
        serde_json::json!({
            "type": "FeatureCollection",
            "crs": { "type": "name", "properties": { "name": self.crs_id } },
            "features": features,
        })
        .to_string()
    }
}

/// Reads every polygon of a GeoJSON (`.geojson`, `.json`) or GeoPackage
/// (`.gpkg`) file. For GeoJSON the CRS comes from the `crs` member; when it
/// is absent `default_crs` is used, and if that is also absent the read fails.
pub fn read_vector(path: &Path, default_crs: Option<&str>) -> Result<VectorLayer> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "geojson" | "json" => read_geojson(path, default_crs),
        "gpkg" => read_gpkg(path, default_crs),
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: expected .geojson or .gpkg",
            path.display()
        ))),
    }
}

fn read_geojson(path: &Path, default_crs: Option<&str>) -> Result<VectorLayer> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let declared = raw
        .pointer("/crs/properties/name")
        .and_then(|v| v.as_str())
        .map(normalize_crs);
    let crs_id = declared
        .or_else(|| default_crs.map(str::to_string))
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: no CRS declared", path.display())))?;

    let gj: GeoJson = text
        .parse()
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    let mut polygons = Vec::new();
    let mut push = |g: &geojson::Geometry| -> Result<()> {
        collect_geometry(g, &mut polygons).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))
    };
    match &gj {
        GeoJson::FeatureCollection(fc) => {
            for f in &fc.features {
                if let Some(g) = &f.geometry {
                    push(g)?;
                }
            }
        }
        GeoJson::Feature(f) => {
            if let Some(g) = &f.geometry {
                push(g)?;
            }
        }
        GeoJson::Geometry(g) => push(g)?,
    }
    Ok(VectorLayer::new(crs_id, MultiPolygon(polygons)))
}

fn collect_geometry(g: &geojson::Geometry, out: &mut Vec<Polygon<f64>>) -> Result<(), String> {
    let geom: geo::Geometry<f64> = g.try_into().map_err(|e: geojson::Error| e.to_string())?;
    push_geo(geom, out)
}

fn push_geo(geom: geo::Geometry<f64>, out: &mut Vec<Polygon<f64>>) -> Result<(), String> {
    match geom {
        geo::Geometry::Polygon(p) => out.push(p),
        geo::Geometry::MultiPolygon(mp) => out.extend(mp),
        geo::Geometry::GeometryCollection(gc) => {
            for g in gc {
                push_geo(g, out)?;
            }
        }
        other => return Err(format!("unsupported geometry {other:?}")),
    }
    Ok(())
}

/// `urn:ogc:def:crs:EPSG::2100` and `EPSG:2100` both normalize to `EPSG:2100`.
fn normalize_crs(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("urn:ogc:def:crs:") {
        let parts: Vec<&str> = rest.split(':').filter(|s| !s.is_empty()).collect();
        if let (Some(auth), Some(code)) = (parts.first(), parts.last()) {
            return format!("{auth}:{code}");
        }
    }
    name.to_string()
}

fn read_gpkg(path: &Path, default_crs: Option<&str>) -> Result<VectorLayer> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let gpkg_err = |e: rusqlite::Error| Error::UnsupportedFormat(format!("{}: {e}", path.display()));
    let conn =
        rusqlite::Connection::open_with_flags(path, rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(gpkg_err)?;
    let (table, column, srs_id): (String, String, i64) = conn
        .query_row(
            "SELECT table_name, column_name, srs_id FROM gpkg_geometry_columns LIMIT 1",
            [],
            |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
        )
        .map_err(gpkg_err)?;
    let crs_id = conn
        .query_row(
            "SELECT organization, organization_coordsys_id FROM gpkg_spatial_ref_sys WHERE srs_id = ?1",
            [srs_id],
            |r| {
                Ok(format!(
                    "{}:{}",
                    r.get::<_, String>(0)?.to_ascii_uppercase(),
                    r.get::<_, i64>(1)?
                ))
            },
        )
        .ok()
        .filter(|s| !s.starts_with("NONE:") && !s.starts_with("UNDEFINED:"))
        .or_else(|| default_crs.map(str::to_string))
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: no CRS declared", path.display())))?;

    let sql = format!("SELECT \"{column}\" FROM \"{table}\"");
    let mut stmt = conn.prepare(&sql).map_err(gpkg_err)?;
    let blobs = stmt
        .query_map([], |r| r.get::<_, Option<Vec<u8>>>(0))
        .map_err(gpkg_err)?;
    let mut polygons = Vec::new();
    for blob in blobs {
        let Some(blob) = blob.map_err(gpkg_err)? else {
            continue;
        };
        let wkb = strip_gpkg_header(&blob).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
        let mut reader = WkbReader { buf: wkb, pos: 0 };
        reader
            .read_geometry(&mut polygons)
            .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
    }
    Ok(VectorLayer::new(crs_id, MultiPolygon(polygons)))
}

/// Skips the GeoPackage binary header (magic, version, flags, srs id and
/// optional envelope) and returns the ISO WKB payload.
fn strip_gpkg_header(blob: &[u8]) -> Result<&[u8], String> {
    if blob.len() < 8 || &blob[0..2] != b"GP" {
        return Err("missing GeoPackage geometry header".into());
    }
    let flags = blob[3];
    let envelope_len = match (flags >> 1) & 0b111 {
        0 => 0,
        1 => 32,
        2 | 3 => 48,
        4 => 64,
        n => return Err(format!("invalid envelope indicator {n}")),
    };
    let start = 8 + envelope_len;
    blob.get(start..).ok_or_else(|| "truncated geometry".to_string())
}

struct WkbReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl WkbReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], String> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| "truncated WKB".to_string())?;
        self.pos += N;
        Ok(bytes.try_into().unwrap())
    }

    fn u32(&mut self, le: bool) -> Result<u32, String> {
        let b = self.take::<4>()?;
        Ok(if le {
            u32::from_le_bytes(b)
        } else {
            u32::from_be_bytes(b)
        })
    }

    fn f64(&mut self, le: bool) -> Result<f64, String> {
        let b = self.take::<8>()?;
        Ok(if le {
            f64::from_le_bytes(b)
        } else {
            f64::from_be_bytes(b)
        })
    }

    fn read_geometry(&mut self, out: &mut Vec<Polygon<f64>>) -> Result<(), String> {
        let le = self.take::<1>()?[0] == 1;
        let raw_type = self.u32(le)?;
        // ISO (z/m as thousands) and EWKB-style high-bit flags
        let iso = (raw_type & 0x0FFF_FFFF) / 1000;
        let has_z = iso == 1 || iso == 3 || raw_type & 0x8000_0000 != 0;
        let has_m = iso == 2 || iso == 3 || raw_type & 0x4000_0000 != 0;
        let base = (raw_type & 0x0FFF_FFFF) % 1000;
        let dims = 2 + has_z as usize + has_m as usize;
        match base {
            3 => {
                let p = self.read_polygon(le, dims)?;
                out.push(p);
            }
            6 | 7 => {
                let n = self.u32(le)?;
                for _ in 0..n {
                    self.read_geometry(out)?;
                }
            }
            other => return Err(format!("unsupported WKB geometry type {other}")),
        }
        Ok(())
    }

    fn read_polygon(&mut self, le: bool, dims: usize) -> Result<Polygon<f64>, String> {
        let rings = self.u32(le)?;
        let mut parsed = Vec::with_capacity(rings as usize);
        for _ in 0..rings {
            let n = self.u32(le)?;
            let mut coords = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let x = self.f64(le)?;
                let y = self.f64(le)?;
                for _ in 2..dims {
                    self.f64(le)?;
                }
                coords.push(Coord { x, y });
            }
            parsed.push(LineString::new(coords));
        }
        let mut it = parsed.into_iter();
        let exterior = it.next().unwrap_or_else(|| LineString::new(Vec::new()));
        Ok(Polygon::new(exterior, it.collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use geo::polygon;

    #[test]
    fn geojson_round_trip_keeps_crs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("aoi.geojson");
        let layer = VectorLayer::new(
            "EPSG:2100",
            MultiPolygon(vec![polygon![(x: 0.0, y: 0.0), (x: 4.0, y: 0.0), (x: 4.0, y: 3.0)]]),
        );
        std::fs::write(&p, layer.to_geojson_string()).unwrap();
        let back = read_vector(&p, None).unwrap();
        assert_eq!(back.crs_id, "EPSG:2100");
        assert_eq!(back.polygons.0.len(), 1);
        assert_eq!(back.polygons.0[0].exterior().0.len(), 4);
    }

    #[test]
    fn geojson_without_crs_needs_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.geojson");
        std::fs::write(&p, r#"{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,0]]]}"#).unwrap();
        assert_eq!(read_vector(&p, None).unwrap_err().category(), "UNSUPPORTED_FORMAT");
        assert_eq!(read_vector(&p, Some("EPSG:4326")).unwrap().crs_id, "EPSG:4326");
    }

    #[test]
    fn urn_crs_normalized() {
        assert_eq!(normalize_crs("urn:ogc:def:crs:EPSG::2100"), "EPSG:2100");
        assert_eq!(normalize_crs("EPSG:32630"), "EPSG:32630");
    }

    #[test]
    fn unsupported_extension() {
        let err = read_vector(Path::new("x.shp"), None).unwrap_err();
        assert_eq!(err.category(), "UNSUPPORTED_FORMAT");
    }

    fn wkb_polygon(coords: &[(f64, f64)]) -> Vec<u8> {
        let mut b = vec![1u8];
        b.extend(3u32.to_le_bytes());
        b.extend(1u32.to_le_bytes());
        b.extend((coords.len() as u32).to_le_bytes());
        for (x, y) in coords {
            b.extend(x.to_le_bytes());
            b.extend(y.to_le_bytes());
        }
        b
    }

    #[test]
    fn geopackage_polygons() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("burned.gpkg");
        let conn = rusqlite::Connection::open(&p).unwrap();
        conn.execute_batch(
            "CREATE TABLE gpkg_spatial_ref_sys (srs_name TEXT, srs_id INTEGER PRIMARY KEY, organization TEXT, organization_coordsys_id INTEGER, definition TEXT);
             INSERT INTO gpkg_spatial_ref_sys VALUES ('Greek Grid', 2100, 'EPSG', 2100, '');
             CREATE TABLE gpkg_geometry_columns (table_name TEXT, column_name TEXT, geometry_type_name TEXT, srs_id INTEGER, z INTEGER, m INTEGER);
             INSERT INTO gpkg_geometry_columns VALUES ('burned', 'geom', 'POLYGON', 2100, 0, 0);
             CREATE TABLE burned (fid INTEGER PRIMARY KEY, geom BLOB);",
        )
        .unwrap();
        let mut blob = b"GP".to_vec();
        blob.push(0);
        blob.push(0b0000_0011); // little endian, xy envelope
        blob.extend(2100i32.to_le_bytes());
        blob.extend([0.0f64, 2.0, 0.0, 2.0].iter().flat_map(|v| v.to_le_bytes()));
        blob.extend(wkb_polygon(&[(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 0.0)]));
        conn.execute("INSERT INTO burned (geom) VALUES (?1)", [&blob]).unwrap();
        drop(conn);

        let layer = read_vector(&p, None).unwrap();
        assert_eq!(layer.crs_id, "EPSG:2100");
        assert_eq!(layer.polygons.0.len(), 1);
        assert_eq!(layer.polygons.0[0].exterior().0[1], Coord { x: 2.0, y: 0.0 });
    }
}
