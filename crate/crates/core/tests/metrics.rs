use argmamba::metrics::{confusion, f1_per_class, iou_per_class, oa, ConfusionMatrix, MetricsReport};
use proptest::prelude::*;

fn matrix(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
    prop::collection::vec(prop::collection::vec(0u64..50, k), k).prop_map(|rows| ConfusionMatrix::from_counts(&rows).unwrap())
}

fn pixels(k: u8, n: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || a == b
}

#[test]
fn hand_case_is_exact() {
    let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    assert!((oa(&cm).unwrap() - 0.75).abs() < 1e-12);
    assert!((iou_per_class(&cm).1 - 7.0 / 12.0).abs() < 1e-12);
    // F1: class 0 = 2/(2+1) = 2/3, class 1 = 4/(4+1) = 4/5
    assert!((f1_per_class(&cm).1 - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn f1_is_a_function_of_iou(cm in (2usize..8).prop_flat_map(matrix)) {
        let (iou, _) = iou_per_class(&cm);
        let (f1, _) = f1_per_class(&cm);
        for (i, f) in iou.iter().zip(&f1) {
            if i.is_nan() {
                prop_assert!(f.is_nan());
                continue;
            }
            prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert!(*f >= *i && (0.0..=1.0).contains(i) && (0.0..=1.0).contains(f));
        }
        if cm.total() > 0 {
            prop_assert!((0.0..=1.0).contains(&oa(&cm).unwrap()));
        }
    }

    #[test]
    fn tiles_add_up((p1, g1) in pixels(6, 40), (p2, g2) in pixels(6, 25)) {
        let a = confusion(&p1, &g1, 6).unwrap();
        let b = confusion(&p2, &g2, 6).unwrap();
        let joint = confusion(&[p1, p2].concat(), &[g1, g2].concat(), 6).unwrap();
        let sum = a + b;
        prop_assert_eq!(&sum, &joint);
        prop_assert_eq!(oa(&sum).unwrap(), oa(&joint).unwrap());
        prop_assert!(same(iou_per_class(&sum).1, iou_per_class(&joint).1));
        prop_assert!(same(f1_per_class(&sum).1, f1_per_class(&joint).1));
    }

    #[test]
    fn class_permutation_equivariance((pred, gt) in pixels(5, 60), perm in Just((0u8..5).collect::<Vec<_>>()).prop_shuffle()) {
        let cm = confusion(&pred, &gt, 5).unwrap();
        let relabel = |v: &[u8]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<u8>>();
        let cmp = confusion(&relabel(&pred), &relabel(&gt), 5).unwrap();
        prop_assert_eq!(oa(&cm).unwrap(), oa(&cmp).unwrap());
        let (iou, miou) = iou_per_class(&cm);
        let (iou_p, miou_p) = iou_per_class(&cmp);
        for c in 0..5 {
            prop_assert!(same(iou[c], iou_p[perm[c] as usize]));
        }
        prop_assert!((miou - miou_p).abs() < 1e-12);
        prop_assert!((f1_per_class(&cm).1 - f1_per_class(&cmp).1).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_count((pred, mut gt) in pixels(4, 30), mask in prop::collection::vec(any::<bool>(), 30)) {
        let kept: Vec<usize> = (0..30).filter(|&i| !mask[i]).collect();
        for i in 0..30 {
            if mask[i] {
                gt[i] = 255;
            }
        }
        let cm = confusion(&pred, &gt, 4).unwrap();
        let sub = confusion(
            &kept.iter().map(|&i| pred[i]).collect::<Vec<_>>(),
            &kept.iter().map(|&i| gt[i]).collect::<Vec<_>>(),
            4,
        ).unwrap();
        prop_assert_eq!(cm.rows(), sub.rows());
        prop_assert_eq!(cm.ignored() as usize, 30 - kept.len());
    }
}

#[test]
fn report_serializes_absent_classes_as_null() {
    let cm = confusion(&[0, 0, 1], &[0, 1, 1], 4).unwrap();
    let report = MetricsReport::new(&cm, &["a", "b", "c", "d"]);
    let v: serde_json::Value = serde_json::to_value(&report).unwrap();
    assert!(v["per_class"][2]["iou"].is_null());
    assert_eq!(v["per_class"][1]["name"], "b");
    assert_eq!(v["pixels"], 3);
    let miou = v["miou"].as_f64().unwrap();
    assert!((miou - (0.5 + 0.5) / 2.0).abs() < 1e-12);
}
