use proptest::prelude::*;
use scarseg_core::metrics::{confusion, dice, iou, ConfusionCounts};
use scarseg_core::{GeoTransform, RasterGrid, RasterKind, SampleType};

fn mask(values: Vec<f32>) -> RasterGrid {
    let t = GeoTransform::new(0.0, 8.0, 1.0, 1.0, "EPSG:2100").unwrap();
    RasterGrid::from_parts(8, 8, 1, values, t, RasterKind::BinaryMask, SampleType::U8, Some(255.0)).unwrap()
}

fn cell() -> impl Strategy<Value = f32> {
    prop_oneof![4 => Just(0.0f32), 4 => Just(1.0f32), 1 => Just(255.0f32)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_match_set_oracle(pred in prop::collection::vec(cell(), 64), truth in prop::collection::vec(cell(), 64)) {
        let c = confusion(&mask(pred.clone()), &mask(truth.clone()), None).unwrap();
        let valid: Vec<usize> = (0..64).filter(|&i| pred[i] != 255.0 && truth[i] != 255.0).collect();
        let p: Vec<usize> = valid.iter().copied().filter(|&i| pred[i] == 1.0).collect();
        let g: Vec<usize> = valid.iter().copied().filter(|&i| truth[i] == 1.0).collect();
        let inter = p.iter().filter(|i| g.contains(i)).count();
        let union = p.len() + g.len() - inter;
        prop_assert_eq!(c.total() as usize, valid.len());
        let (want_dice, want_iou) = if union == 0 {
            (1.0, 1.0)
        } else {
            (2.0 * inter as f64 / (p.len() + g.len()) as f64, inter as f64 / union as f64)
        };
        prop_assert!((dice(&c) - want_dice).abs() < 1e-12);
        prop_assert!((iou(&c) - want_iou).abs() < 1e-12);
        let j = iou(&c);
        prop_assert!((dice(&c) - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!(dice(&c) >= iou(&c));
    }

    #[test]
    fn merge_is_additive(a in (0u64..50, 0u64..50, 0u64..50, 0u64..50), b in (0u64..50, 0u64..50, 0u64..50, 0u64..50)) {
        let ca = ConfusionCounts { tp: a.0, fp: a.1, fn_: a.2, tn: a.3 };
        let cb = ConfusionCounts { tp: b.0, fp: b.1, fn_: b.2, tn: b.3 };
        let mut m = ca;
        m.merge(&cb);
        prop_assert_eq!(m.total(), ca.total() + cb.total());
        prop_assert_eq!(m.tp, a.0 + b.0);
    }
}
