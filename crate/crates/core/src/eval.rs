//! COCO-style AP and the forgetting diagnostics (match churn, related
//! queries, overall IoU).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::FrozenDetector;
use crate::error::{Error, Result};
use crate::losses::cap_targets;
use crate::matcher::{build_cost_matrix, hungarian_assign, CostWeights};
use crate::par;
use crate::types::{AnnotationSet, BoundingBox, CategorySet, DetectorOutput, Image};

/// IoU thresholds 0.50:0.05:0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Area cutoffs of 32² and 96² pixels on a 640-pixel reference side,
/// expressed as fractions of the unit image.
pub const SMALL_AREA: f64 = (32.0 / 640.0) * (32.0 / 640.0);
pub const MEDIUM_AREA: f64 = (96.0 / 640.0) * (96.0 / 640.0);

pub const DEFAULT_RASTER_RESOLUTION: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: usize,
    pub category_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// AP of one category. `None` when the category has no ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ap_old: Option<f64>,
    pub ap_new: Option<f64>,
    pub ap_all: f64,
    #[serde(deserialize_with = "index_keys::deserialize")]
    pub per_category: BTreeMap<usize, CategoryAp>,
}

impl APReport {
    /// Mean AP over those categories of `slice` that have ground truth.
    pub fn slice_mean(&self, slice: &CategorySet) -> Option<f64> {
        let vals: Vec<f64> = slice
            .iter()
            .filter_map(|c| self.per_category.get(c).map(|a| a.ap))
            .collect();
        mean(&vals)
    }
}

/// Category split an evaluation reports on. `old` may be empty (first phase).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSplit {
    pub old: CategorySet,
    pub new: CategorySet,
}

impl EvalSplit {
    pub fn all(&self) -> CategorySet {
        self.old.union(&self.new).copied().collect()
    }
}

/// Reads `usize`-keyed maps whose keys arrive as JSON strings, which is how
/// they come through `#[serde(flatten)]` buffering.
pub(crate) mod index_keys {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer};

    pub fn deserialize<'de, D, V>(d: D) -> Result<BTreeMap<usize, V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        BTreeMap::<String, V>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(serde::de::Error::custom))
            .collect()
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

struct GtEntry {
    bbox: BoundingBox,
    ignore: bool,
}

/// 101-point interpolated AP for one category and IoU threshold, with COCO
/// ignore semantics for out-of-range ground truth and detections.
fn category_ap(
    dets: &[(usize, BoundingBox, f64)],
    gts: &BTreeMap<usize, Vec<GtEntry>>,
    threshold: f64,
    area_range: Option<(f64, f64)>,
) -> Option<f64> {
    let npos = gts.values().flatten().filter(|g| !g.ignore).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].2.total_cmp(&dets[a].2).then(a.cmp(&b)));
    let mut used: BTreeMap<usize, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut flags: Vec<bool> = Vec::with_capacity(dets.len());
    for i in order {
        let (scene, bbox, _) = &dets[i];
        let empty = Vec::new();
        let scene_gts = gts.get(scene).unwrap_or(&empty);
        let scene_used = used.entry(*scene).or_default();
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, gt) in scene_gts.iter().enumerate() {
                if gt.ignore != pass_ignored || scene_used[g] {
                    continue;
                }
                let iou = gt.bbox.iou(bbox);
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if best.is_some() {
                break;
            }
        }
        match best {
            Some((g, _)) => {
                scene_used[g] = true;
                if !scene_gts[g].ignore {
                    flags.push(true);
                }
            }
            None => {
                let outside = area_range.map_or(false, |(lo, hi)| {
                    let a = bbox.area();
                    a < lo || a >= hi
                });
                if !outside {
                    flags.push(false);
                }
            }
        }
    }
    Some(interpolated_ap(&flags, npos))
}

/// `flags` are TP/FP marks in descending confidence order.
pub fn interpolated_ap(flags: &[bool], npos: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP over `split.all()` categories. Ground truth of other categories is
/// dropped; a detection of a category outside the split is an error.
pub fn compute_ap(
    detections: &[DetectionRecord],
    gts: &BTreeMap<usize, AnnotationSet>,
    split: &EvalSplit,
    iou_thresholds: &[f64],
) -> Result<APReport> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invariant("iou_thresholds", "thresholds must lie in (0,1)"));
    }
    let cats = split.all();
    for d in detections {
        if !cats.contains(&d.category_id) {
            return Err(Error::UnknownCategory(d.category_id));
        }
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::invariant("confidence", "outside [0,1]"));
        }
    }
    let idx50 = iou_thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9);
    let idx75 = iou_thresholds.iter().position(|t| (t - 0.75).abs() < 1e-9);

    let per_cat: Vec<(usize, Option<(f64, f64, f64)>, [Option<f64>; 3])> = par::map(
        &cats.iter().copied().collect::<Vec<_>>(),
        |&c| {
            let dets: Vec<(usize, BoundingBox, f64)> = detections
                .iter()
                .filter(|d| d.category_id == c)
                .map(|d| (d.scene_id, d.bbox, d.confidence))
                .collect();
            let gts_for = |range: Option<(f64, f64)>| -> BTreeMap<usize, Vec<GtEntry>> {
                gts.iter()
                    .map(|(s, set)| {
                        let v = set
                            .iter()
                            .filter(|a| a.category_id == c)
                            .map(|a| GtEntry {
                                bbox: a.bbox,
                                ignore: range.map_or(false, |(lo, hi)| a.bbox.area() < lo || a.bbox.area() >= hi),
                            })
                            .collect();
                        (*s, v)
                    })
                    .collect()
            };
            let all_gts = gts_for(None);
            let aps: Option<Vec<f64>> = iou_thresholds
                .iter()
                .map(|&t| category_ap(&dets, &all_gts, t, None))
                .collect();
            let main = aps.map(|v| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (m, idx50.map_or(f64::NAN, |i| v[i]), idx75.map_or(f64::NAN, |i| v[i]))
            });
            let ranges = [(0.0, SMALL_AREA), (SMALL_AREA, MEDIUM_AREA), (MEDIUM_AREA, f64::INFINITY)];
            let scaled = ranges.map(|r| {
                let g = gts_for(Some(r));
                let v: Option<Vec<f64>> = iou_thresholds
                    .iter()
                    .map(|&t| category_ap(&dets, &g, t, Some(r)))
                    .collect();
                v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            });
            (c, main, scaled)
        },
    );

    let mut per_category = BTreeMap::new();
    let mut scaled: [Vec<f64>; 3] = Default::default();
    for (c, main, sc) in per_cat {
        if let Some((ap, ap50, ap75)) = main {
            per_category.insert(c, CategoryAp { ap, ap50, ap75 });
        }
        for (k, v) in sc.into_iter().enumerate() {
            if let Some(v) = v {
                scaled[k].push(v);
            }
        }
    }
    let col = |f: fn(&CategoryAp) -> f64| mean(&per_category.values().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
    let ap = col(|a| a.ap);
    let mut report = APReport {
        ap,
        ap50: col(|a| a.ap50),
        ap75: col(|a| a.ap75),
        ap_s: mean(&scaled[0]),
        ap_m: mean(&scaled[1]),
        ap_l: mean(&scaled[2]),
        ap_old: None,
        ap_new: None,
        ap_all: ap,
        per_category,
    };
    report.ap_old = report.slice_mean(&split.old);
    report.ap_new = report.slice_mean(&split.new);
    Ok(report)
}

/// One detection per query: argmax over `categories`, confidence its probability.
pub fn detections_from_output(scene_id: usize, output: &DetectorOutput, categories: &CategorySet) -> Vec<DetectionRecord> {
    output
        .queries
        .iter()
        .filter_map(|q| {
            q.best_in(categories).map(|(c, p)| DetectionRecord {
                scene_id,
                category_id: c,
                bbox: q.bbox,
                confidence: p,
            })
        })
        .collect()
}

/// A scene reference for evaluation: image plus its full ground truth.
#[derive(Clone, Copy, Debug)]
pub struct EvalScene<'a> {
    pub scene_id: usize,
    pub image: &'a Image,
    pub annotations: &'a AnnotationSet,
}

pub fn model_outputs(model: &FrozenDetector, scenes: &[EvalScene<'_>]) -> Result<Vec<DetectorOutput>> {
    model_outputs_with(par::Mode::default(), model, scenes)
}

pub fn model_outputs_with(mode: par::Mode, model: &FrozenDetector, scenes: &[EvalScene<'_>]) -> Result<Vec<DetectorOutput>> {
    par::map_with(mode, scenes, |s| model.forward(s.image)).into_iter().collect()
}

/// Runs the model on every scene and evaluates over `split.all()`.
pub fn evaluate(model: &FrozenDetector, scenes: &[EvalScene<'_>], split: &EvalSplit) -> Result<APReport> {
    let outputs = model_outputs(model, scenes)?;
    evaluate_outputs(&outputs, scenes, split)
}

pub fn evaluate_outputs(outputs: &[DetectorOutput], scenes: &[EvalScene<'_>], split: &EvalSplit) -> Result<APReport> {
    let cats = split.all();
    let detections: Vec<DetectionRecord> = scenes
        .iter()
        .zip(outputs)
        .flat_map(|(s, o)| detections_from_output(s.scene_id, o, &cats))
        .collect();
    let gts: BTreeMap<usize, AnnotationSet> = scenes.iter().map(|s| (s.scene_id, s.annotations.clone())).collect();
    compute_ap(&detections, &gts, split, &coco_thresholds())
}

/// One distillation pairing observed during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub step: usize,
    pub image_id: usize,
    pub student: usize,
    pub teacher: usize,
}

/// Distinct teacher indices per student query index, for `0..num_queries`.
pub fn match_churn(log: &[MatchRecord], num_queries: usize) -> Vec<usize> {
    let mut seen: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); num_queries];
    for r in log {
        if r.student < num_queries {
            seen[r.student].insert(r.teacher);
        }
    }
    seen.iter().map(BTreeSet::len).collect()
}

/// How often student query `query` was paired with each teacher index.
pub fn churn_histogram(log: &[MatchRecord], query: usize) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for r in log.iter().filter(|r| r.student == query) {
        *h.entry(r.teacher).or_insert(0) += 1;
    }
    h
}

/// Per-scene Hungarian pairs `(category, query)` against the full ground truth.
fn matched_pairs(output: &DetectorOutput, gts: &AnnotationSet) -> Result<Vec<(usize, usize, BoundingBox)>> {
    let gts = cap_targets(gts, output.len());
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let cost = build_cost_matrix(&gts, output, CostWeights::default())?;
    let assignment = hungarian_assign(&cost)?;
    Ok(assignment
        .sorted()
        .into_iter()
        .map(|(g, q)| (gts.annotations[g].category_id, q, gts.annotations[g].bbox))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelatedQueries {
    /// Distinct query indices ever matched to each old category.
    #[serde(deserialize_with = "index_keys::deserialize")]
    pub per_category: BTreeMap<usize, usize>,
    pub total: usize,
}

pub fn related_query_count(
    model: &FrozenDetector,
    scenes: &[EvalScene<'_>],
    old_categories: &CategorySet,
) -> Result<RelatedQueries> {
    let outputs = model_outputs(model, scenes)?;
    related_from_outputs(&outputs, scenes, old_categories)
}

pub fn related_from_outputs(
    outputs: &[DetectorOutput],
    scenes: &[EvalScene<'_>],
    old_categories: &CategorySet,
) -> Result<RelatedQueries> {
    let mut sets: BTreeMap<usize, BTreeSet<usize>> = old_categories.iter().map(|&c| (c, BTreeSet::new())).collect();
    for (o, s) in outputs.iter().zip(scenes) {
        for (c, q, _) in matched_pairs(o, s.annotations)? {
            if let Some(set) = sets.get_mut(&c) {
                set.insert(q);
            }
        }
    }
    let per_category: BTreeMap<usize, usize> = sets.iter().map(|(c, s)| (*c, s.len())).collect();
    let total = per_category.values().sum();
    Ok(RelatedQueries { per_category, total })
}

/// Pixel-center rasterization of a box union; returns a row-major mask.
pub fn rasterize(boxes: &[BoundingBox], resolution: usize) -> Vec<bool> {
    let mut mask = vec![false; resolution * resolution];
    let r = resolution as f64;
    for b in boxes {
        let [x0, y0, x1, y1] = b.clamped_corners();
        // pixel i is covered when x0 <= (i + 0.5) / r < x1
        let lo = |v: f64| ((v * r - 0.5).ceil().max(0.0)) as usize;
        let hi = |v: f64| ((v * r - 0.5).ceil().max(0.0) as usize).min(resolution);
        for y in lo(y0)..hi(y1) {
            for x in lo(x0)..hi(x1) {
                mask[y * resolution + x] = true;
            }
        }
    }
    mask
}

/// `(intersection, union)` pixel counts of two box unions.
pub fn mask_overlap(pred: &[BoundingBox], gt: &[BoundingBox], resolution: usize) -> (usize, usize) {
    let a = rasterize(pred, resolution);
    let b = rasterize(gt, resolution);
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    (inter, union)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverallIou {
    #[serde(deserialize_with = "index_keys::deserialize")]
    pub per_category: BTreeMap<usize, f64>,
    pub mean: Option<f64>,
}

pub fn overall_iou(
    model: &FrozenDetector,
    scenes: &[EvalScene<'_>],
    old_categories: &CategorySet,
    raster_resolution: usize,
) -> Result<OverallIou> {
    let outputs = model_outputs(model, scenes)?;
    overall_iou_from_outputs(&outputs, scenes, old_categories, raster_resolution)
}

/// Per scene and category, the union of boxes predicted by queries matched to
/// that category's ground truth against the union of those ground-truth
/// boxes. Pixel counts are pooled over scenes before dividing.
pub fn overall_iou_from_outputs(
    outputs: &[DetectorOutput],
    scenes: &[EvalScene<'_>],
    old_categories: &CategorySet,
    raster_resolution: usize,
) -> Result<OverallIou> {
    if raster_resolution < 64 {
        return Err(Error::invariant("raster_resolution", "must be at least 64"));
    }
    let items: Vec<(&DetectorOutput, &EvalScene<'_>)> = outputs.iter().zip(scenes).collect();
    let per_scene: Vec<Result<BTreeMap<usize, (usize, usize)>>> = par::map(&items, |(o, s)| {
        let pairs = matched_pairs(o, s.annotations)?;
        let mut out = BTreeMap::new();
        for &c in old_categories {
            let pred: Vec<BoundingBox> = pairs.iter().filter(|p| p.0 == c).map(|p| o.queries[p.1].bbox).collect();
            let gt: Vec<BoundingBox> = s.annotations.iter().filter(|a| a.category_id == c).map(|a| a.bbox).collect();
            if pred.is_empty() && gt.is_empty() {
                continue;
            }
            out.insert(c, mask_overlap(&pred, &gt, raster_resolution));
        }
        Ok(out)
    });
    let mut pooled: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in per_scene {
        for (c, (i, u)) in r? {
            let e = pooled.entry(c).or_insert((0, 0));
            e.0 += i;
            e.1 += u;
        }
    }
    let per_category: BTreeMap<usize, f64> = pooled
        .into_iter()
        .filter(|(_, (_, u))| *u > 0)
        .map(|(c, (i, u))| (c, i as f64 / u as f64))
        .collect();
    let mean = mean(&per_category.values().copied().collect::<Vec<_>>());
    Ok(OverallIou { per_category, mean })
}
