//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is plain data: constructors validate invariants and
//! return [`Error::Invariant`] naming the offending field. Nothing is mutated
//! after construction, so all types are `Send + Sync` and cheap to share.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Set of global category ids.
pub type CategorySet = BTreeSet<usize>;

/// Normalized `(cx, cy, w, h)` box. Corner form only appears inside IoU math.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        for (field, v) in [("cx", cx), ("cy", cy), ("w", w), ("h", h)] {
            if !v.is_finite() {
                return Err(Error::invariant(field, format!("{v} is not finite")));
            }
        }
        if !(0.0..=1.0).contains(&cx) {
            return Err(Error::invariant("cx", format!("{cx} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&cy) {
            return Err(Error::invariant("cy", format!("{cy} outside [0,1]")));
        }
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::invariant("w", format!("{w} outside (0,1]")));
        }
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::invariant("h", format!("{h} outside (0,1]")));
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Mirror image about the vertical centre line.
    pub fn flipped_horizontal(&self) -> Self {
        Self {
            cx: 1.0 - self.cx,
            ..*self
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)`, unclamped.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Corners clipped to the unit square.
    pub fn clamped_corners(&self) -> [f64; 4] {
        self.corners().map(|v| v.clamp(0.0, 1.0))
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let (inter, union) = inter_union(&self.corners(), &other.corners());
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &BoundingBox) -> f64 {
        let a = self.corners();
        let b = other.corners();
        let (inter, union) = inter_union(&a, &b);
        let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        if hull <= 0.0 {
            iou
        } else {
            iou - (hull - union) / hull
        }
    }

    pub fn l1(&self, other: &BoundingBox) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn inter_union(a: &[f64; 4], b: &[f64; 4]) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    (inter, area_a + area_b - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category_id: usize,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: LabelSource,
    pub confidence: f64,
}

impl Annotation {
    pub fn ground_truth(category_id: usize, bbox: BoundingBox) -> Self {
        Self {
            category_id,
            bbox,
            source: LabelSource::GroundTruth,
            confidence: 1.0,
        }
    }

    pub fn pseudo(category_id: usize, bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invariant(
                "confidence",
                format!("{confidence} outside [0,1]"),
            ));
        }
        Ok(Self {
            category_id,
            bbox,
            source: LabelSource::Pseudo,
            confidence,
        })
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if self.category_id >= num_categories {
            return Err(Error::InvalidCategory {
                category: self.category_id,
                num_categories,
            });
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::invariant("confidence", "outside [0,1]"));
        }
        Ok(())
    }
}

/// Ordered annotations for one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    pub annotations: Vec<Annotation>,
}

impl AnnotationSet {
    pub fn new(annotations: Vec<Annotation>) -> Self {
        Self { annotations }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Annotation> {
        self.annotations.iter()
    }

    pub fn categories(&self) -> CategorySet {
        self.annotations.iter().map(|a| a.category_id).collect()
    }

    pub fn flipped_horizontal(&self) -> AnnotationSet {
        self.annotations
            .iter()
            .map(|a| Annotation {
                bbox: a.bbox.flipped_horizontal(),
                ..*a
            })
            .collect()
    }

    /// Keeps only annotations whose category is in `keep`.
    pub fn restricted_to(&self, keep: &CategorySet) -> AnnotationSet {
        AnnotationSet::new(
            self.annotations
                .iter()
                .filter(|a| keep.contains(&a.category_id))
                .copied()
                .collect(),
        )
    }
}

impl FromIterator<Annotation> for AnnotationSet {
    fn from_iter<I: IntoIterator<Item = Annotation>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Ordered disjoint category subsets `C_1..C_T` covering `0..C`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPartition {
    subsets: Vec<CategorySet>,
}

impl CategoryPartition {
    pub fn new(subsets: Vec<CategorySet>) -> Result<Self> {
        if subsets.is_empty() {
            return Err(Error::invariant("subsets", "partition needs at least one phase"));
        }
        let mut seen = CategorySet::new();
        for s in &subsets {
            if s.is_empty() {
                return Err(Error::invariant("subsets", "empty phase subset"));
            }
            for &c in s {
                if !seen.insert(c) {
                    return Err(Error::invariant(
                        "subsets",
                        format!("category {c} appears in two phases"),
                    ));
                }
            }
        }
        let total = seen.len();
        if seen.iter().copied().ne(0..total) {
            return Err(Error::invariant(
                "subsets",
                format!("union is not 0..{total}"),
            ));
        }
        Ok(Self { subsets })
    }

    /// Consecutive ids split by phase sizes, e.g. `[6, 2]` gives `{0..5}, {6,7}`.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut next = 0;
        let subsets = sizes
            .iter()
            .map(|&n| {
                let s: CategorySet = (next..next + n).collect();
                next += n;
                s
            })
            .collect();
        Self::new(subsets)
    }

    /// Phase sizes applied to a permuted category order.
    pub fn from_order(order: &[usize], sizes: &[usize]) -> Result<Self> {
        if sizes.iter().sum::<usize>() != order.len() {
            return Err(Error::invariant("subsets", "sizes do not sum to category count"));
        }
        let mut it = order.iter().copied();
        let subsets = sizes
            .iter()
            .map(|&n| it.by_ref().take(n).collect())
            .collect();
        Self::new(subsets)
    }

    pub fn num_phases(&self) -> usize {
        self.subsets.len()
    }

    pub fn num_categories(&self) -> usize {
        self.subsets.iter().map(|s| s.len()).sum()
    }

    pub fn subsets(&self) -> &[CategorySet] {
        &self.subsets
    }

    /// `C_t` for 1-based phase `t`.
    pub fn phase(&self, t: usize) -> &CategorySet {
        &self.subsets[t - 1]
    }

    /// `C_{1:t}` for 1-based phase `t`.
    pub fn seen_through(&self, t: usize) -> CategorySet {
        self.subsets[..t].iter().flatten().copied().collect()
    }

    /// `C_{1:t-1}`.
    pub fn old_before(&self, t: usize) -> CategorySet {
        self.seen_through(t - 1)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One query's prediction. `logits` has `C + 1` entries; index `C` is no-object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl QueryPrediction {
    pub fn new(logits: Vec<f64>, bbox: BoundingBox) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::invariant("logits", "need at least one category plus no-object"));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::invariant("logits", "non-finite logit"));
        }
        let probabilities = softmax(&logits);
        Ok(Self {
            logits,
            probabilities,
            bbox,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.logits.len() - 1
    }

    pub fn no_object_probability(&self) -> f64 {
        self.probabilities[self.num_categories()]
    }

    /// Highest probability among `categories`, with the category achieving it.
    /// Ties resolve to the smallest id.
    pub fn best_in(&self, categories: &CategorySet) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for &c in categories {
            let p = self.probabilities[c];
            if best.map_or(true, |(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        best
    }

    pub fn max_foreground(&self) -> f64 {
        self.probabilities[..self.num_categories()]
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// The `N` ordered query outputs of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub queries: Vec<QueryPrediction>,
}

impl DetectorOutput {
    pub fn new(queries: Vec<QueryPrediction>) -> Result<Self> {
        if let Some(first) = queries.first() {
            let c = first.logits.len();
            if queries.iter().any(|q| q.logits.len() != c) {
                return Err(Error::invariant("queries", "inconsistent logit lengths"));
            }
        }
        Ok(Self { queries })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn num_categories(&self) -> usize {
        self.queries.first().map_or(0, |q| q.num_categories())
    }
}

/// Injective `(gt_index, query_index)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    /// Validates injectivity and bounds against `rows` GTs and `cols` queries.
    pub fn new(pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Result<Self> {
        let mut gts = BTreeSet::new();
        let mut qs = BTreeSet::new();
        for &(g, q) in &pairs {
            if g >= rows {
                return Err(Error::InvalidAssignment(format!("gt index {g} >= {rows}")));
            }
            if q >= cols {
                return Err(Error::InvalidAssignment(format!("query index {q} >= {cols}")));
            }
            if !gts.insert(g) {
                return Err(Error::InvalidAssignment(format!("gt index {g} used twice")));
            }
            if !qs.insert(q) {
                return Err(Error::InvalidAssignment(format!("query index {q} used twice")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs sorted by gt index.
    pub fn sorted(&self) -> Vec<(usize, usize)> {
        let mut p = self.pairs.clone();
        p.sort_unstable();
        p
    }

    pub fn total_cost(&self, cost: &crate::matcher::CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    pub(crate) fn validate_against(&self, rows: usize, cols: usize) -> Result<()> {
        Self::new(self.pairs.clone(), rows, cols).map(|_| ())
    }
}

/// Query indices selected for distillation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyQuerySet {
    indices: BTreeSet<usize>,
}

impl ProxyQuerySet {
    pub fn new(indices: BTreeSet<usize>, num_queries: usize) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_queries) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: num_queries,
            });
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &BTreeSet<usize> {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }
}

/// Per-step loss components. `iaqd_*` also carries the Hungarian KD terms
/// when that strategy is active.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub detr_cls: f64,
    pub detr_loc: f64,
    pub iaqd_cls: f64,
    pub iaqd_box: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn distill(&self) -> f64 {
        self.lambda1 * self.iaqd_cls + (1.0 - self.lambda1) * self.iaqd_box
    }

    /// Checks `total = detr_cls + detr_loc + λ2·(λ1·cls + (1−λ1)·box)`.
    pub fn check_recombination(&self, tol: f64) -> Result<()> {
        let expect = self.detr_cls + self.detr_loc + self.lambda2 * self.distill();
        if (expect - self.total).abs() > tol {
            return Err(Error::invariant(
                "total",
                format!("{} != recombined {}", self.total, expect),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PseudoOnly,
    HungarianKd,
    Iaqd,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::PseudoOnly, Strategy::HungarianKd, Strategy::Iaqd];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::PseudoOnly => "pseudo_only",
            Strategy::HungarianKd => "hungarian_kd",
            Strategy::Iaqd => "iaqd",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_only" => Ok(Strategy::PseudoOnly),
            "hungarian_kd" => Ok(Strategy::HungarianKd),
            "iaqd" => Ok(Strategy::Iaqd),
            other => Err(Error::invariant("strategy", format!("unknown strategy {other}"))),
        }
    }
}

/// Training hyperparameters. Serialized flat into the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pseudo_threshold_incremental: f64,
    pub pseudo_threshold_er: f64,
    pub exemplar_fraction: f64,
    pub epochs_phase_one: usize,
    pub epochs_incremental: usize,
    pub epochs_er: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Random horizontal flips during training.
    pub hflip: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Whether the no-object probability joins the distilled sub-vector.
    pub distill_include_no_object: bool,
    /// Skip the exemplar-replay stage entirely.
    pub skip_er: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda1: 0.5,
            lambda2: 1.0,
            pseudo_threshold_incremental: 0.4,
            pseudo_threshold_er: 0.6,
            exemplar_fraction: 0.10,
            epochs_phase_one: 30,
            epochs_incremental: 30,
            epochs_er: 10,
            seed: 0,
            strategy: Strategy::Iaqd,
            learning_rate: 6e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            hflip: true,
            max_grad_norm: 0.1,
            distill_include_no_object: false,
            skip_er: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("tau", self.tau),
            ("pseudo_threshold_incremental", self.pseudo_threshold_incremental),
            ("pseudo_threshold_er", self.pseudo_threshold_er),
            ("exemplar_fraction", self.exemplar_fraction),
            ("lambda1", self.lambda1),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invariant(field, format!("{v} outside [0,1]")));
            }
        }
        if !(self.lambda2.is_finite() && self.lambda2 >= 0.0) {
            return Err(Error::invariant("lambda2", "must be finite and nonnegative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invariant("learning_rate", "must be positive"));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return Err(Error::invariant("max_grad_norm", "must be finite and nonnegative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invariant("weight_decay", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invariant("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Square RGB image, row-major `(y, x, channel)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * Self::CHANNELS {
            return Err(Error::Shape {
                expected: format!("{size}x{size}x3"),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invariant("image", "non-finite pixel"));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let data = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.size + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.size + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn flipped_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.size {
            for x in 0..self.size {
                out.set_pixel(self.size - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_rejects_bad_fields() {
        assert!(matches!(
            BoundingBox::new(0.5, 0.5, 0.0, 0.1),
            Err(Error::Invariant { field: "w", .. })
        ));
        assert!(matches!(
            BoundingBox::new(f64::NAN, 0.5, 0.1, 0.1),
            Err(Error::Invariant { field: "cx", .. })
        ));
        assert!(matches!(
            BoundingBox::new(0.5, 1.2, 0.1, 0.1),
            Err(Error::Invariant { field: "cy", .. })
        ));
    }

    #[test]
    fn giou_of_disjoint_boxes_is_negative() {
        let a = BoundingBox::from_corners(0.0, 0.0, 0.2, 0.2).unwrap();
        let b = BoundingBox::from_corners(0.4, 0.0, 0.6, 0.2).unwrap();
        // hull 0.6 x 0.2 = 0.12, union 0.08
        assert!((a.giou(&b) - (0.0 - 0.04 / 0.12)).abs() < 1e-12);
        assert_eq!(a.iou(&b), 0.0);
        assert!((a.giou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partition_checks_disjoint_cover() {
        let p = CategoryPartition::contiguous(&[6, 2]).unwrap();
        assert_eq!(p.old_before(2), (0..6).collect());
        assert_eq!(p.phase(2), &[6, 7].into_iter().collect());
        let overlap = CategoryPartition::new(vec![[0, 1].into(), [1, 2].into()]);
        assert!(matches!(overlap, Err(Error::Invariant { field: "subsets", .. })));
        let gap = CategoryPartition::new(vec![[0, 1].into(), [3].into()]);
        assert!(gap.is_err());
    }

    #[test]
    fn assignment_rejects_duplicate_query() {
        assert!(MatchAssignment::new(vec![(0, 1), (1, 1)], 2, 3).is_err());
        assert!(MatchAssignment::new(vec![(0, 3)], 1, 3).is_err());
        assert!(MatchAssignment::new(vec![(0, 2), (1, 0)], 2, 3).is_ok());
    }

    #[test]
    fn recombination_identity() {
        let lb = LossBreakdown {
            detr_cls: 1.0,
            detr_loc: 0.5,
            iaqd_cls: 0.2,
            iaqd_box: 0.4,
            total: 1.0 + 0.5 + 2.0 * (0.5 * 0.2 + 0.5 * 0.4),
            lambda1: 0.5,
            lambda2: 2.0,
        };
        lb.check_recombination(1e-12).unwrap();
    }

    #[test]
    fn default_config_carries_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.tau, c.lambda1, c.lambda2), (0.1, 0.5, 1.0));
        assert_eq!(
            (c.pseudo_threshold_incremental, c.pseudo_threshold_er),
            (0.4, 0.6)
        );
        assert_eq!(c.exemplar_fraction, 0.10);
        c.validate().unwrap();
    }

    proptest! {
        #[test]
        fn softmax_is_normalized(logits in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}
