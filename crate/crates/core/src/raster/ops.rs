use geo::{Coord, MultiPolygon};

use super::{center_mask, GridGeometry, LandCoverScheme, RasterGrid, RasterKind, SampleType, VectorLayer, MASK_NODATA};
use crate::error::{Error, Result};

/// Snapping tolerance, in pixels, when turning map bounds into pixel windows.
const SNAP_EPS: f64 = 1e-6;

/// Crops `raster` to the pixel-aligned bounding box of its intersection with
/// `aoi` and sets pixels whose centers fall outside `aoi` to nodata.
pub fn clip_to_aoi(raster: &RasterGrid, aoi: &VectorLayer) -> Result<RasterGrid> {
    raster.transform().ensure_same_crs(&aoi.crs_id)?;
    let geometry = raster.geometry();
    let (min_x, min_y, max_x, max_y) = geometry.bounds();
    let (ix0, iy0, ix1, iy1) =
        intersection_bounds(&aoi.polygons, (min_x, min_y, max_x, max_y)).ok_or(Error::NoOverlap)?;

    let t = raster.transform();
    let to_col = |x: f64| (x - t.origin_x) / t.pixel_size_x;
    let to_row = |y: f64| (t.origin_y - y) / t.pixel_size_y;
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let col0 = clamp((to_col(ix0) + SNAP_EPS).floor(), raster.width());
    let col1 = clamp((to_col(ix1) - SNAP_EPS).ceil(), raster.width());
    let row0 = clamp((to_row(iy1) + SNAP_EPS).floor(), raster.height());
    let row1 = clamp((to_row(iy0) - SNAP_EPS).ceil(), raster.height());
    if col1 <= col0 || row1 <= row0 {
        return Err(Error::NoOverlap);
    }

    let nodata = raster.nodata_or_default();
    let window = raster.window(row0, col0, row1 - row0, col1 - col0, nodata)?;
    let inside = center_mask(&aoi.polygons, &window.geometry());
    if !inside.iter().any(|&b| b) {
        return Err(Error::NoOverlap);
    }
    if inside.iter().all(|&b| b) {
        return Ok(window);
    }

    let n = inside.len();
    let (w, h, bands) = (window.width(), window.height(), window.bands());
    let transform = window.transform().clone();
    let mut values = window.into_values();
    for b in 0..bands {
        for (v, &keep) in values[b * n..(b + 1) * n].iter_mut().zip(&inside) {
            if !keep {
                *v = nodata;
            }
        }
    }
    RasterGrid::from_parts(
        w,
        h,
        bands,
        values,
        transform,
        raster.kind(),
        raster.sample_type(),
        Some(nodata),
    )
}

/// Bounds of `polygons ∩ rect`, computed by clipping each exterior ring
/// against the rectangle. `None` when the intersection has zero area.
pub(crate) fn intersection_bounds(
    polygons: &MultiPolygon<f64>,
    rect: (f64, f64, f64, f64),
) -> Option<(f64, f64, f64, f64)> {
    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for polygon in polygons {
        let ring: Vec<Coord<f64>> = polygon.exterior().coords().copied().collect();
        let clipped = clip_ring(ring, rect);
        if clipped.len() < 3 || shoelace(&clipped).abs() == 0.0 {
            continue;
        }
        for c in clipped {
            bounds = Some(match bounds {
                None => (c.x, c.y, c.x, c.y),
                Some((a, b, d, e)) => (a.min(c.x), b.min(c.y), d.max(c.x), e.max(c.y)),
            });
        }
    }
    bounds
}

/// Sutherland-Hodgman clip of a ring against an axis-aligned rectangle.
fn clip_ring(mut ring: Vec<Coord<f64>>, (x0, y0, x1, y1): (f64, f64, f64, f64)) -> Vec<Coord<f64>> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    type Edge = (
        fn(Coord<f64>, f64) -> bool,
        fn(Coord<f64>, Coord<f64>, f64) -> Coord<f64>,
        f64,
    );
    fn at_x(a: Coord<f64>, b: Coord<f64>, x: f64) -> Coord<f64> {
        Coord {
            x,
            y: a.y + (x - a.x) * (b.y - a.y) / (b.x - a.x),
        }
    }
    fn at_y(a: Coord<f64>, b: Coord<f64>, y: f64) -> Coord<f64> {
        Coord {
            x: a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y),
            y,
        }
    }
    let edges: [Edge; 4] = [
        (|c, v| c.x >= v, at_x, x0),
        (|c, v| c.x <= v, at_x, x1),
        (|c, v| c.y >= v, at_y, y0),
        (|c, v| c.y <= v, at_y, y1),
    ];
    for (inside, cross, v) in edges {
        if ring.is_empty() {
            break;
        }
        let input = std::mem::take(&mut ring);
        let mut prev = *input.last().unwrap();
        for &cur in &input {
            match (inside(cur, v), inside(prev, v)) {
                (true, true) => ring.push(cur),
                (true, false) => {
                    ring.push(cross(prev, cur, v));
                    ring.push(cur);
                }
                (false, true) => ring.push(cross(prev, cur, v)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    ring
}

fn shoelace(ring: &[Coord<f64>]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum::<f64>()
        / 2.0
}

/// Burns polygons into a binary mask on the template's grid: a pixel is 1
/// iff its center lies inside any polygon.
pub fn binarize_delineation(polygons: &VectorLayer, template: &RasterGrid) -> Result<RasterGrid> {
    template.transform().ensure_same_crs(&polygons.crs_id)?;
    let geometry = template.geometry();
    let values = center_mask(&polygons.polygons, &geometry)
        .into_iter()
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    RasterGrid::new(
        geometry.width,
        geometry.height,
        1,
        values,
        geometry.transform,
        RasterKind::BinaryMask,
    )
}

/// `ba AND NOT cloud`. Nodata in `ba` is preserved; nodata in `cloud` counts
/// as clear sky.
pub fn subtract_cloud(ba_mask: &RasterGrid, cloud_mask: &RasterGrid) -> Result<RasterGrid> {
    ba_mask.same_grid(cloud_mask)?;
    let values = ba_mask
        .band(0)
        .iter()
        .zip(cloud_mask.band(0))
        .map(|(&ba, &cloud)| {
            if ba_mask.is_nodata(ba) {
                ba
            } else if cloud == 1.0 {
                0.0
            } else {
                ba
            }
        })
        .collect();
    RasterGrid::from_parts(
        ba_mask.width(),
        ba_mask.height(),
        1,
        values,
        ba_mask.transform().clone(),
        RasterKind::BinaryMask,
        ba_mask.sample_type(),
        ba_mask.nodata(),
    )
}

/// Index of the source cell whose center is nearest to fractional pixel
/// coordinate `u`; equidistant centers resolve to the smaller index.
fn nearest_index(u: f64, len: usize) -> Option<usize> {
    if !(0.0..=len as f64).contains(&u) {
        return None;
    }
    Some(((u.ceil() as i64 - 1).max(0) as usize).min(len - 1))
}

/// Nearest-neighbour resampling of a category map onto `target`.
///
/// Target pixels whose centers fall outside the source extent become nodata.
pub fn resample_nearest(source: &RasterGrid, target: &GridGeometry) -> Result<RasterGrid> {
    let st = source.transform();
    st.ensure_same_crs(&target.transform.crs_id)?;
    let tt = &target.transform;
    let cols: Vec<Option<usize>> = (0..target.width)
        .map(|c| {
            let x = tt.origin_x + (c as f64 + 0.5) * tt.pixel_size_x;
            nearest_index((x - st.origin_x) / st.pixel_size_x, source.width())
        })
        .collect();
    let rows: Vec<Option<usize>> = (0..target.height)
        .map(|r| {
            let y = tt.origin_y - (r as f64 + 0.5) * tt.pixel_size_y;
            nearest_index((st.origin_y - y) / st.pixel_size_y, source.height())
        })
        .collect();

    let nodata = source.nodata().unwrap_or(MASK_NODATA);
    let mut any_outside = false;
    let mut values = Vec::with_capacity(source.bands() * target.width * target.height);
    for b in 0..source.bands() {
        for row in &rows {
            for col in &cols {
                match (row, col) {
                    (Some(r), Some(c)) => values.push(source.get(b, *r, *c)),
                    _ => {
                        any_outside = true;
                        values.push(nodata);
                    }
                }
            }
        }
    }
    let nodata = if any_outside { Some(nodata) } else { source.nodata() };
    let sample_type = match (source.sample_type(), nodata) {
        (SampleType::U8, Some(nd)) if nd > 255.0 => SampleType::U16,
        (st, _) => st,
    };
    RasterGrid::from_parts(
        target.width,
        target.height,
        source.bands(),
        values,
        tt.clone(),
        RasterKind::CategoryMap,
        sample_type,
        nodata,
    )
}

/// Remaps land-cover codes to contiguous class indices and burns clouds in
/// as the extra class. Source nodata becomes 255.
pub fn apply_lc_scheme(lc: &RasterGrid, cloud: &RasterGrid, scheme: &LandCoverScheme) -> Result<RasterGrid> {
    lc.same_grid(cloud)?;
    let cloud_index = scheme.cloud_index() as f32;
    let mut any_nodata = false;
    let values = lc
        .band(0)
        .iter()
        .zip(cloud.band(0))
        .map(|(&code, &c)| {
            if c == 1.0 {
                Ok(cloud_index)
            } else if lc.is_nodata(code) {
                any_nodata = true;
                Ok(MASK_NODATA)
            } else {
                scheme
                    .index_of(code as u32)
                    .filter(|_| code.fract() == 0.0 && code >= 0.0)
                    .map(|i| i as f32)
                    .ok_or(Error::UnknownCode(code as u32))
            }
        })
        .collect::<Result<Vec<f32>>>()?;
    let nodata = (any_nodata || lc.nodata().is_some()).then_some(MASK_NODATA);
    RasterGrid::from_parts(
        lc.width(),
        lc.height(),
        1,
        values,
        lc.transform().clone(),
        RasterKind::CategoryMap,
        SampleType::U8,
        nodata,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use geo::{polygon, LineString, Polygon};

    fn tf(h: usize) -> GeoTransform {
        GeoTransform::new(100.0, 100.0 + h as f64, 1.0, 1.0, "EPSG:2100").unwrap()
    }

    fn mask(w: usize, h: usize, v: Vec<f32>) -> RasterGrid {
        RasterGrid::new(w, h, 1, v, tf(h), RasterKind::BinaryMask).unwrap()
    }

    fn layer(p: Polygon<f64>) -> VectorLayer {
        VectorLayer::new("EPSG:2100", MultiPolygon(vec![p]))
    }

    #[test]
    fn clip_full_extent_is_identity() {
        let r = RasterGrid::new(
            100,
            100,
            1,
            (0..10_000).map(|v| (v % 7) as f32).collect(),
            tf(100),
            RasterKind::Image,
        )
        .unwrap();
        let aoi =
            layer(polygon![(x: 100.0, y: 100.0), (x: 200.0, y: 100.0), (x: 200.0, y: 200.0), (x: 100.0, y: 200.0)]);
        let out = clip_to_aoi(&r, &aoi).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn clip_left_half() {
        let r = RasterGrid::new(100, 100, 1, vec![1.0; 10_000], tf(100), RasterKind::Image).unwrap();
        let aoi =
            layer(polygon![(x: 100.0, y: 100.0), (x: 150.0, y: 100.0), (x: 150.0, y: 200.0), (x: 100.0, y: 200.0)]);
        let out = clip_to_aoi(&r, &aoi).unwrap();
        assert_eq!((out.width(), out.height()), (50, 100));
        assert!(out.values().iter().all(|&v| v == 1.0));
        assert_eq!(out.transform(), r.transform());
    }

    #[test]
    fn clip_errors() {
        let r = mask(4, 4, vec![0.0; 16]);
        let far = layer(polygon![(x: 0.0, y: 0.0), (x: 1.0, y: 0.0), (x: 1.0, y: 1.0)]);
        assert_eq!(clip_to_aoi(&r, &far).unwrap_err().category(), "NO_OVERLAP");
        let wrong = VectorLayer::new("EPSG:4326", far.polygons.clone());
        assert_eq!(clip_to_aoi(&r, &wrong).unwrap_err().category(), "CRS_MISMATCH");
    }

    #[test]
    fn clip_aoi_larger_than_raster() {
        let r = mask(4, 4, vec![1.0; 16]);
        let big = layer(polygon![(x: 0.0, y: 0.0), (x: 500.0, y: 0.0), (x: 500.0, y: 500.0), (x: 0.0, y: 500.0)]);
        assert_eq!(clip_to_aoi(&r, &big).unwrap(), r);
    }

    #[test]
    fn binarize_trivial_cases() {
        let t = mask(8, 8, vec![0.0; 64]);
        let empty = binarize_delineation(&VectorLayer::empty("EPSG:2100"), &t).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));
        let full =
            layer(polygon![(x: 100.0, y: 100.0), (x: 108.0, y: 100.0), (x: 108.0, y: 108.0), (x: 100.0, y: 108.0)]);
        let all = binarize_delineation(&full, &t).unwrap();
        assert!(all.values().iter().all(|&v| v == 1.0));
        let wrong = VectorLayer::new("EPSG:1", full.polygons);
        assert_eq!(binarize_delineation(&wrong, &t).unwrap_err().category(), "CRS_MISMATCH");
    }

    #[test]
    fn subtract_cloud_truth_table() {
        let ba = mask(4, 1, vec![1.0, 1.0, 0.0, 0.0]);
        let cloud = mask(4, 1, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(subtract_cloud(&ba, &cloud).unwrap().values(), &[0.0, 1.0, 0.0, 0.0]);
        let none = mask(4, 1, vec![0.0; 4]);
        assert_eq!(subtract_cloud(&ba, &none).unwrap(), ba);
        let all = mask(4, 1, vec![1.0; 4]);
        assert!(subtract_cloud(&ba, &all).unwrap().values().iter().all(|&v| v == 0.0));
        let other = mask(2, 2, vec![0.0; 4]);
        assert_eq!(subtract_cloud(&ba, &other).unwrap_err().category(), "GRID_MISMATCH");
    }

    #[test]
    fn resample_block_replication() {
        let src = RasterGrid::new(
            2,
            2,
            1,
            vec![10.0, 20.0, 30.0, 40.0],
            GeoTransform::new(0.0, 4.0, 2.0, 2.0, "EPSG:2100").unwrap(),
            RasterKind::CategoryMap,
        )
        .unwrap();
        let target = GridGeometry {
            transform: GeoTransform::new(0.0, 4.0, 1.0, 1.0, "EPSG:2100").unwrap(),
            width: 4,
            height: 4,
        };
        let out = resample_nearest(&src, &target).unwrap();
        assert_eq!(
            out.values(),
            &[10.0, 10.0, 20.0, 20.0, 10.0, 10.0, 20.0, 20.0, 30.0, 30.0, 40.0, 40.0, 30.0, 30.0, 40.0, 40.0,]
        );
        assert_eq!(resample_nearest(&src, &src.geometry()).unwrap(), src);
    }

    #[test]
    fn resample_tie_goes_to_smaller_index() {
        // target centers land exactly on source pixel boundaries
        let src = RasterGrid::new(
            4,
            1,
            1,
            vec![1.0, 2.0, 3.0, 4.0],
            GeoTransform::new(0.0, 1.0, 1.0, 1.0, "EPSG:2100").unwrap(),
            RasterKind::CategoryMap,
        )
        .unwrap();
        let target = GridGeometry {
            transform: GeoTransform::new(-1.0, 1.0, 2.0, 1.0, "EPSG:2100").unwrap(),
            width: 3,
            height: 1,
        };
        let out = resample_nearest(&src, &target).unwrap();
        // centers at x = 0, 2, 4
        assert_eq!(out.values(), &[1.0, 2.0, 4.0]);
    }

    #[test]
    fn resample_outside_is_nodata() {
        let src = RasterGrid::new(
            2,
            2,
            1,
            vec![10.0; 4],
            GeoTransform::new(0.0, 2.0, 1.0, 1.0, "EPSG:2100").unwrap(),
            RasterKind::CategoryMap,
        )
        .unwrap();
        let target = GridGeometry {
            transform: GeoTransform::new(0.0, 2.0, 1.0, 1.0, "EPSG:2100").unwrap(),
            width: 3,
            height: 2,
        };
        let out = resample_nearest(&src, &target).unwrap();
        assert_eq!(out.values(), &[10.0, 10.0, 255.0, 10.0, 10.0, 255.0]);
        assert_eq!(out.nodata(), Some(255.0));
    }

    #[test]
    fn lc_scheme_mapping() {
        let s = LandCoverScheme::worldcover();
        let lc = RasterGrid::new(3, 1, 1, vec![10.0, 95.0, 100.0], tf(1), RasterKind::CategoryMap).unwrap();
        let clear = mask(3, 1, vec![0.0; 3]);
        assert_eq!(apply_lc_scheme(&lc, &clear, &s).unwrap().values(), &[0.0, 9.0, 10.0]);
        let cloudy = mask(3, 1, vec![0.0, 1.0, 0.0]);
        assert_eq!(apply_lc_scheme(&lc, &cloudy, &s).unwrap().values(), &[0.0, 11.0, 10.0]);
        let bad = RasterGrid::new(3, 1, 1, vec![10.0, 15.0, 100.0], tf(1), RasterKind::CategoryMap).unwrap();
        assert_eq!(
            apply_lc_scheme(&bad, &clear, &s).unwrap_err().category(),
            "UNKNOWN_CODE"
        );
    }

    #[test]
    fn ring_clip_area() {
        let ring: Vec<Coord<f64>> =
            LineString::from(vec![(-1.0, -1.0), (2.0, -1.0), (2.0, 2.0), (-1.0, 2.0), (-1.0, -1.0)]).0;
        let c = clip_ring(ring, (0.0, 0.0, 1.0, 1.0));
        assert!((shoelace(&c).abs() - 1.0).abs() < 1e-12);
    }
}
