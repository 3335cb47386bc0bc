use std::collections::{BTreeMap, BTreeSet};

use geo::{LineString, MultiPolygon, Polygon};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scarseg_core::blocksplit::{assign_patches, assign_splits, build_block_grid, Split, SplitFractions};
use scarseg_core::patching::{coverage_counts, mosaic, patchify, PatchSpec};
use scarseg_core::raster::{clip_to_aoi, read_raster, resample_nearest, write_raster, VectorLayer};
use scarseg_core::{GeoTransform, GridGeometry, RasterGrid, RasterKind, SampleType};

const CRS: &str = "EPSG:2100";

fn transform(x: f64, y: f64, px: f64) -> GeoTransform {
    GeoTransform::new(x, y, px, px, CRS).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, bands: usize) -> RasterGrid {
    let values = (0..w * h * bands).map(|_| rng.random::<f32>()).collect();
    RasterGrid::new(w, h, bands, values, transform(500.0, 900.0, 0.5), RasterKind::Image).unwrap()
}

fn layer(rings: Vec<Vec<(f64, f64)>>) -> VectorLayer {
    let polys = rings
        .into_iter()
        .map(|r| Polygon::new(LineString::from(r), vec![]))
        .collect();
    VectorLayer::new(CRS, MultiPolygon(polys))
}

/// Even-odd ray casting.
fn inside_ring(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = ring.len();
    for i in 0..n {
        let (x1, y1) = ring[i];
        let (x2, y2) = ring[(i + 1) % n];
        if (y1 > y) != (y2 > y) && x < x1 + (y - y1) * (x2 - x1) / (y2 - y1) {
            inside = !inside;
        }
    }
    inside
}

#[test]
fn mosaic_inverts_patchify_on_random_rasters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for overlap in [0.0, 0.2] {
        for _ in 0..10 {
            let (w, h) = (rng.random_range(20..90), rng.random_range(20..90));
            let r = random_image(&mut rng, w, h, 3);
            let set = patchify(&r, &PatchSpec::new(32, overlap, 0.0).unwrap()).unwrap();
            assert!(coverage_counts(&set).iter().all(|&c| c > 0));
            assert_eq!(mosaic(&set).unwrap(), r);
        }
    }
}

#[test]
fn overlap_fraction_sets_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = random_image(&mut rng, 128, 64, 1);
    let set = patchify(&r, &PatchSpec::new(32, 0.2, 0.0).unwrap()).unwrap();
    let cols: BTreeSet<usize> = set.placements.iter().map(|p| p.col).collect();
    // stride floor(32 · 0.8) = 25, last window pulled back to the edge
    assert_eq!(cols.into_iter().collect::<Vec<_>>(), vec![0, 25, 50, 75, 96]);
}

#[test]
fn clip_masks_pixels_outside_pentagon() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_image(&mut rng, 80, 80, 2);
    // raster spans x 500..540, y 860..900
    let ring = vec![
        (510.0, 865.0),
        (535.0, 870.0),
        (532.0, 892.0),
        (515.5, 897.0),
        (503.0, 880.0),
    ];
    let aoi = layer(vec![ring.clone()]);
    let clipped = clip_to_aoi(&r, &aoi).unwrap();
    let t = clipped.transform();
    let nodata = clipped.nodata().unwrap();
    let mut kept = 0;
    for row in 0..clipped.height() {
        for col in 0..clipped.width() {
            let (x, y) = t.pixel_center(row, col);
            let src_col = ((x - 500.0) / 0.5).floor() as usize;
            let src_row = ((900.0 - y) / 0.5).floor() as usize;
            for b in 0..2 {
                let v = clipped.get(b, row, col);
                if inside_ring(&ring, x, y) {
                    assert_eq!(v, r.get(b, src_row, src_col));
                    kept += 1;
                } else {
                    assert_eq!(v, nodata);
                }
            }
        }
    }
    assert!(kept > 0);
    // the crop is the pixel-aligned bounding box of the pentagon
    let (x0, y0, x1, y1) = clipped.geometry().bounds();
    assert_eq!((x0, y0, x1, y1), (503.0, 865.0, 535.0, 897.0));
}

#[test]
fn clip_without_overlap_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = random_image(&mut rng, 10, 10, 1);
    let far = layer(vec![vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]]);
    assert_eq!(clip_to_aoi(&r, &far).unwrap_err().category(), "NO_OVERLAP");
}

#[test]
fn resample_matches_center_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // 10 m land cover onto a 0.7 m grid offset so no center hits a cell edge
    let (sw, sh) = (12, 9);
    let codes: Vec<f32> = (0..sw * sh).map(|_| (rng.random_range(1..12) * 10) as f32).collect();
    let source = RasterGrid::new(
        sw,
        sh,
        1,
        codes,
        transform(1000.0, 2000.0, 10.0),
        RasterKind::CategoryMap,
    )
    .unwrap();
    let target = GridGeometry {
        transform: transform(1003.13, 1996.07, 0.7),
        width: 180,
        height: 140,
    };
    let out = resample_nearest(&source, &target).unwrap();
    let mut outside = 0;
    for r in 0..target.height {
        for c in 0..target.width {
            let (x, y) = target.transform.pixel_center(r, c);
            let u = (x - 1000.0) / 10.0;
            let v = (2000.0 - y) / 10.0;
            let got = out.get(0, r, c);
            if u < 0.0 || v < 0.0 || u >= sw as f64 || v >= sh as f64 {
                assert_eq!(got, out.nodata().unwrap());
                outside += 1;
            } else {
                assert_eq!(got, source.get(0, v.floor() as usize, u.floor() as usize));
            }
        }
    }
    assert!(outside > 0, "target grid should overhang the source");
}

fn l_shape() -> VectorLayer {
    // 10×10 km square minus its upper-right 5×5 km quadrant
    layer(vec![vec![
        (0.0, 0.0),
        (10_000.0, 0.0),
        (10_000.0, 5_000.0),
        (5_000.0, 5_000.0),
        (5_000.0, 10_000.0),
        (0.0, 10_000.0),
    ]])
}

#[test]
fn l_shaped_aoi_drops_empty_blocks() {
    let grid = build_block_grid(&l_shape(), "ev", 1000.0).unwrap();
    assert_eq!((grid.cols, grid.rows), (10, 10));
    assert_eq!(grid.blocks.len(), 75);
    assert!(grid.locate(7500.0, 7500.0).is_none());
    assert!(grid.locate(2500.0, 7500.0).is_some());
}

#[test]
fn hundred_blocks_split_exactly_and_reproducibly() {
    let square = layer(vec![vec![
        (0.0, 0.0),
        (10_000.0, 0.0),
        (10_000.0, 10_000.0),
        (0.0, 10_000.0),
    ]]);
    let grid = build_block_grid(&square, "ev", 1000.0).unwrap();
    assert_eq!(grid.blocks.len(), 100);
    let f = SplitFractions::new(0.7, 0.2, 0.1).unwrap();
    let a = assign_splits(&grid, f, 42).unwrap();
    let mut counts = BTreeMap::new();
    for s in a.block_to_split.values() {
        *counts.entry(*s).or_insert(0) += 1;
    }
    assert_eq!(counts[&Split::Train], 70);
    assert_eq!(counts[&Split::Val], 20);
    assert_eq!(counts[&Split::Test], 10);
    assert_eq!(assign_splits(&grid, f, 42).unwrap(), a);
    assert_ne!(assign_splits(&grid, f, 43).unwrap().block_to_split, a.block_to_split);
}

#[test]
fn patches_inherit_their_block_split() {
    // 100×100 px at 100 m: one block is 10×10 px, patches are 8 px
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let values = (0..100 * 100).map(|_| rng.random::<f32>()).collect();
    let raster = RasterGrid::new(100, 100, 1, values, transform(0.0, 10_000.0, 100.0), RasterKind::Image).unwrap();
    let grid = build_block_grid(&l_shape(), "ev", 1000.0).unwrap();
    let blocks = assign_splits(&grid, SplitFractions::default(), 9).unwrap();
    let set = patchify(&raster, &PatchSpec::new(8, 0.2, 0.0).unwrap()).unwrap();
    let a = assign_patches(&set, &grid, &blocks);
    assert_eq!(a.patch_to_split.len() + a.excluded_patches.len(), set.len());
    assert!(
        !a.excluded_patches.is_empty(),
        "the missing quadrant holds patch centers"
    );
    let mut block_splits: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    for (&i, &split) in &a.patch_to_split {
        let (x, y) = set.patch_center(i);
        // independent block lookup from the center coordinates
        let (col, row) = ((x / 1000.0).floor() as usize, (y / 1000.0).floor() as usize);
        let id = format!("ev/r{row:03}c{col:03}");
        assert_eq!(blocks.block_to_split[&id], split);
        block_splits.entry(id).or_default().insert(split);
    }
    assert!(block_splits.values().all(|s| s.len() == 1));
    for &i in &a.excluded_patches {
        let (x, y) = set.patch_center(i);
        assert!(x >= 5000.0 && y >= 5000.0);
    }
}

#[test]
fn geotiff_round_trip_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = transform(321_000.5, 4_200_000.25, 0.5);
    let (w, h) = (13, 7);
    let cases = [
        (RasterKind::Image, SampleType::U16, 4, None),
        (RasterKind::BinaryMask, SampleType::U8, 1, Some(255.0)),
        (RasterKind::CategoryMap, SampleType::U8, 1, Some(255.0)),
        (RasterKind::ProbabilityMap, SampleType::F32, 1, None),
    ];
    for (kind, st, bands, nodata) in cases {
        let values: Vec<f32> = (0..w * h * bands)
            .map(|i| match kind {
                RasterKind::Image => rng.random_range(0..4000) as f32,
                RasterKind::BinaryMask => [0.0, 1.0, 255.0][i % 3],
                RasterKind::CategoryMap => [0.0, 3.0, 11.0, 255.0][i % 4],
                RasterKind::ProbabilityMap => rng.random::<f32>(),
            })
            .collect();
        let r = RasterGrid::from_parts(w, h, bands, values, t.clone(), kind, st, nodata).unwrap();
        let path = dir.path().join(format!("{}.tif", kind.as_str()));
        write_raster(&r, &path).unwrap();
        assert_eq!(read_raster(&path).unwrap(), r, "{kind:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn patch_grid_covers_and_mosaics_exactly(
        w in 1usize..70,
        h in 1usize..70,
        size in 4usize..33,
        overlap in prop::sample::select(vec![0.0, 0.2, 0.5]),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_image(&mut rng, w, h, 1);
        let set = patchify(&r, &PatchSpec::new(size, overlap, 0.0).unwrap()).unwrap();
        prop_assert!(set.check_consistent().is_ok());
        prop_assert!(coverage_counts(&set).iter().all(|&c| c > 0));
        prop_assert_eq!(mosaic(&set).unwrap(), r);
    }

    #[test]
    fn apportion_is_exact_and_close(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (train, val) = (a, (1.0 - a) * b);
        let f = SplitFractions::new(train, val, 1.0 - train - val).unwrap();
        let counts = f.apportion(n);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (c, q) in counts.iter().zip([f.train, f.val, f.test]) {
            prop_assert!((*c as f64 - q * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn ray_cast_agrees_with_rasterizer(cx in 2.0f64..8.0, cy in 2.0f64..8.0, rad in 0.5f64..3.0) {
        let ring: Vec<(f64, f64)> = (0..7)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 7.0;
                (cx + rad * a.cos(), cy + rad * (1.3 + a.sin()) * 0.8)
            })
            .collect();
        let geometry = GridGeometry { transform: transform(0.0, 10.0, 0.25), width: 40, height: 40 };
        let mask = scarseg_core::raster::center_mask(&layer(vec![ring.clone()]).polygons, &geometry);
        for r in 0..40 {
            for c in 0..40 {
                let (x, y) = geometry.transform.pixel_center(r, c);
                prop_assert_eq!(mask[r * 40 + c], inside_ring(&ring, x, y));
            }
        }
    }
}
