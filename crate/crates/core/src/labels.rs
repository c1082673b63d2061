//! Pseudo labels, label merging and replay label realignment.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::detector::FrozenDetector;
use crate::error::{Error, Result};
use crate::types::{Annotation, AnnotationSet, BoundingBox, CategorySet, DetectorOutput, Image, LabelSource};

/// Per-category suppression threshold for pseudo labels.
pub const PSEUDO_NMS_IOU: f64 = 0.7;

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::invariant("threshold", format!("{threshold} outside (0,1)")))
    }
}

/// Greedy NMS within each category. Input order breaks confidence ties.
pub fn suppress_duplicates(candidates: Vec<Annotation>, iou_threshold: f64) -> Vec<Annotation> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].confidence.total_cmp(&candidates[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let c = &candidates[i];
        let clash = kept.iter().any(|&k| {
            let o = &candidates[k];
            o.category_id == c.category_id && o.bbox.iou(&c.bbox) > iou_threshold
        });
        if !clash {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Pseudo labels from an already computed model output.
pub fn pseudo_labels_from_output(
    output: &DetectorOutput,
    categories: &CategorySet,
    threshold: f64,
) -> Result<AnnotationSet> {
    check_threshold(threshold)?;
    if categories.is_empty() {
        return Err(Error::invariant("categories", "empty category set"));
    }
    let mut candidates = Vec::new();
    for q in &output.queries {
        if let Some((c, p)) = q.best_in(categories) {
            if p >= threshold {
                candidates.push(Annotation::pseudo(c, q.bbox, p)?);
            }
        }
    }
    Ok(AnnotationSet::new(suppress_duplicates(candidates, PSEUDO_NMS_IOU)))
}

pub fn generate_pseudo_labels(
    model: &FrozenDetector,
    image: &Image,
    categories: &CategorySet,
    threshold: f64,
) -> Result<AnnotationSet> {
    pseudo_labels_from_output(&model.forward(image)?, categories, threshold)
}

/// Ground truth first, then pseudo labels. Category sets must not overlap.
pub fn merge_labels(pseudo: &AnnotationSet, gt: &AnnotationSet) -> Result<AnnotationSet> {
    let gt_cats = gt.categories();
    if let Some(&c) = pseudo.categories().intersection(&gt_cats).next() {
        return Err(Error::CategoryOverlap(c));
    }
    Ok(gt.iter().chain(pseudo.iter()).cloned().collect())
}

/// Keeps `gt` verbatim and fills in categories it was never annotated for.
pub fn realign_from_output(
    output: &DetectorOutput,
    gt: &AnnotationSet,
    annotated_categories: &CategorySet,
    all_categories: &CategorySet,
    threshold: f64,
) -> Result<AnnotationSet> {
    if !annotated_categories.is_subset(all_categories) {
        return Err(Error::invariant("annotated_categories", "not a subset of all_categories"));
    }
    let missing: CategorySet = all_categories.difference(annotated_categories).copied().collect();
    if missing.is_empty() {
        return Ok(gt.clone());
    }
    let pseudo = pseudo_labels_from_output(output, &missing, threshold)?;
    merge_labels(&pseudo, gt)
}

pub fn realign_labels(
    model: &FrozenDetector,
    image: &Image,
    gt: &AnnotationSet,
    annotated_categories: &CategorySet,
    all_categories: &CategorySet,
    threshold: f64,
) -> Result<AnnotationSet> {
    if all_categories.difference(annotated_categories).next().is_none() {
        return realign_from_output(
            &DetectorOutput { queries: Vec::new() },
            gt,
            annotated_categories,
            all_categories,
            threshold,
        );
    }
    realign_from_output(&model.forward(image)?, gt, annotated_categories, all_categories, threshold)
}

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: usize,
    pub category_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub source: LabelSource,
    pub confidence: f64,
}

impl AnnotationRecord {
    pub fn from_annotation(sample_id: usize, a: &Annotation) -> Self {
        Self {
            sample_id,
            category_id: a.category_id,
            cx: a.bbox.cx,
            cy: a.bbox.cy,
            w: a.bbox.w,
            h: a.bbox.h,
            source: a.source,
            confidence: a.confidence,
        }
    }

    pub fn to_annotation(&self) -> Result<Annotation> {
        let bbox = BoundingBox::new(self.cx, self.cy, self.w, self.h)?;
        match self.source {
            LabelSource::GroundTruth => Ok(Annotation::ground_truth(self.category_id, bbox)),
            LabelSource::Pseudo => Annotation::pseudo(self.category_id, bbox, self.confidence),
        }
    }
}

pub fn write_annotation_records<W: Write>(records: &[AnnotationRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_annotation_records<R: Read>(input: R) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
