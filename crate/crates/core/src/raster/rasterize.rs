use geo::{LineString, MultiPolygon};

use super::GridGeometry;

/// Row-major mask of the pixels whose centers fall inside `polygons`.
///
/// Scanline fill with the even-odd rule per polygon (holes included) and a
/// union across polygons. Edge crossings use half-open intervals in `y`,
/// and a center at exactly the left crossing counts as inside.
pub fn center_mask(polygons: &MultiPolygon<f64>, geometry: &GridGeometry) -> Vec<bool> {
    let (w, h) = (geometry.width, geometry.height);
    let t = &geometry.transform;
    let mut mask = vec![false; w * h];
    let mut crossings: Vec<f64> = Vec::new();

    for polygon in polygons {
        let rings: Vec<&LineString<f64>> = std::iter::once(polygon.exterior()).chain(polygon.interiors()).collect();
        let (min_y, max_y) = rings
            .iter()
            .flat_map(|r| r.coords())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.y), hi.max(c.y))
            });
        if !min_y.is_finite() {
            continue;
        }
        // rows whose centers can lie inside [min_y, max_y]
        let first = ((t.origin_y - max_y) / t.pixel_size_y - 0.5).floor().max(0.0);
        let last = ((t.origin_y - min_y) / t.pixel_size_y - 0.5).ceil();
        if last < 0.0 || first >= h as f64 {
            continue;
        }
        let (first, last) = (first as usize, (last as usize).min(h - 1));

        for row in first..=last {
            let yc = t.origin_y - (row as f64 + 0.5) * t.pixel_size_y;
            crossings.clear();
            for ring in &rings {
                for seg in ring.lines() {
                    let (a, b) = (seg.start, seg.end);
                    if (a.y > yc) != (b.y > yc) {
                        crossings.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
                    }
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                let c0 = ((pair[0] - t.origin_x) / t.pixel_size_x - 0.5).ceil().max(0.0);
                let c1 = ((pair[1] - t.origin_x) / t.pixel_size_x - 0.5).ceil().max(0.0);
                let (c0, c1) = ((c0 as usize).min(w), (c1 as usize).min(w));
                for cell in &mut mask[row * w + c0..row * w + c1.max(c0)] {
                    *cell = true;
                }
            }
        }
    }
    mask
}
