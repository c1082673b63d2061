use std::collections::BTreeMap;

use proptest::prelude::*;

use iaqd_core::eval::{
    coco_thresholds, compute_ap, mask_overlap, match_churn, DetectionRecord, EvalSplit, MatchRecord,
};
use iaqd_core::types::{Annotation, AnnotationSet, BoundingBox, CategorySet};

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.05f64..0.4, 0.05f64..0.4, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(w, h, u, v)| {
        BoundingBox::new(w / 2.0 + u * (1.0 - w), h / 2.0 + v * (1.0 - h), w, h).unwrap()
    })
}

fn scene() -> impl Strategy<Value = (Vec<BoundingBox>, Vec<(BoundingBox, f64)>)> {
    (
        prop::collection::vec(bbox(), 1..4),
        prop::collection::vec((bbox(), 0.01f64..1.0), 0..6),
    )
}

fn split() -> EvalSplit {
    EvalSplit {
        old: CategorySet::new(),
        new: [0].into_iter().collect(),
    }
}

fn ap(gt: &[BoundingBox], dets: &[(BoundingBox, f64)]) -> f64 {
    let gts: BTreeMap<usize, AnnotationSet> =
        [(0, gt.iter().map(|b| Annotation::ground_truth(0, *b)).collect())].into_iter().collect();
    let records: Vec<DetectionRecord> = dets
        .iter()
        .map(|(b, c)| DetectionRecord {
            scene_id: 0,
            category_id: 0,
            bbox: *b,
            confidence: *c,
        })
        .collect();
    compute_ap(&records, &gts, &split(), &coco_thresholds()).unwrap().ap
}

proptest! {
    #[test]
    fn duplicated_detections_never_raise_ap((gt, dets) in scene()) {
        let mut doubled = dets.clone();
        doubled.extend(dets.iter().map(|(b, c)| (*b, c * 0.999)));
        prop_assert!(ap(&gt, &doubled) <= ap(&gt, &dets) + 1e-12);
    }

    #[test]
    fn dropping_a_false_positive_never_lowers_ap((gt, mut dets) in scene(), conf in 0.01f64..1.0) {
        // a box in the corner overlapping no ground truth
        let fp = BoundingBox::new(0.01, 0.01, 0.0001, 0.0001).unwrap();
        prop_assume!(gt.iter().all(|g| g.iou(&fp) == 0.0));
        let without = ap(&gt, &dets);
        dets.push((fp, conf));
        prop_assert!(ap(&gt, &dets) <= without + 1e-12);
    }

    #[test]
    fn raster_iou_stays_within_the_boundary_band(a in prop::collection::vec(bbox(), 1..4), b in prop::collection::vec(bbox(), 1..4)) {
        let (exact_i, exact_u) = exact_overlap(&a, &b);
        let exact = exact_i / exact_u;
        for r in [64usize, 256, 512] {
            let (i, u) = mask_overlap(&a, &b, r);
            let rf = r as f64;
            // each box's raster differs from the box by at most its one-pixel boundary band
            let band: f64 = a.iter().chain(&b).map(|x| 2.0 * (x.w + x.h) * rf + 4.0).sum();
            let got = i as f64 / u as f64;
            prop_assert!((got - exact).abs() <= 2.0 * band / u as f64, "r={} got {} exact {}", r, got, exact);
        }
    }
}

/// Exact intersection and union areas of two box unions, by coordinate
/// compression.
fn exact_overlap(a: &[BoundingBox], b: &[BoundingBox]) -> (f64, f64) {
    let mut xs: Vec<f64> = a.iter().chain(b).flat_map(|x| [x.corners()[0], x.corners()[2]]).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).flat_map(|x| [x.corners()[1], x.corners()[3]]).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let inside = |set: &[BoundingBox], x: f64, y: f64| {
        set.iter().any(|q| {
            let [x0, y0, x1, y1] = q.corners();
            x0 <= x && x < x1 && y0 <= y && y < y1
        })
    };
    let (mut inter, mut union) = (0.0, 0.0);
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (mx, my) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            let area = (xw[1] - xw[0]) * (yw[1] - yw[0]);
            let (ia, ib) = (inside(a, mx, my), inside(b, mx, my));
            if ia && ib {
                inter += area;
            }
            if ia || ib {
                union += area;
            }
        }
    }
    (inter, union)
}

#[test]
fn identity_matching_has_unit_churn_and_unmatched_queries_zero() {
    let log: Vec<MatchRecord> = (0..50)
        .flat_map(|step| {
            (0..3).map(move |q| MatchRecord {
                step,
                image_id: step,
                student: q,
                teacher: q,
            })
        })
        .collect();
    assert_eq!(match_churn(&log, 5), vec![1, 1, 1, 0, 0]);
}
