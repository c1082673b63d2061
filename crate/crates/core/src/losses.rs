//! Training objectives and their gradients with respect to detector outputs.
//!
//! Every loss returns its value together with [`OutputGradients`], i.e.
//! `dL/dlogits` and `dL/dboxes` for each query. Teacher outputs enter as
//! plain values, so nothing here can push gradient into a teacher.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::OutputGradients;
use crate::error::{Error, Result};
use crate::matcher::{hungarian_assign, CostMatrix};
use crate::types::{
    AnnotationSet, CategorySet, DetectorOutput, LossBreakdown, MatchAssignment, ProxyQuerySet,
    QueryPrediction,
};

/// Weights of the set-prediction loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetrWeights {
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the no-object class in the classification term.
    pub no_object: f64,
}

impl Default for DetrWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// Teacher predictions whose best foreground probability is below this are
/// left out of Hungarian distillation.
pub const HUNGARIAN_KD_FOREGROUND_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct DetrLoss {
    pub cls: f64,
    pub loc: f64,
    pub grads: OutputGradients,
}

/// Distillation value split into its classification and box parts.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLoss {
    pub cls: f64,
    pub box_mse: f64,
    pub total: f64,
    /// `(teacher_index, student_index)` pairs that were distilled.
    pub pairs: Vec<(usize, usize)>,
    pub grads: OutputGradients,
}

impl DistillLoss {
    fn zero(n: usize, c: usize) -> Self {
        Self {
            cls: 0.0,
            box_mse: 0.0,
            total: 0.0,
            pairs: Vec::new(),
            grads: OutputGradients::zeros(n, c),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// GIoU of `pred` against `target` (both `cx, cy, w, h`) and its gradient
/// with respect to `pred`.
pub fn giou_and_grad(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [cx, cy, w, h] = pred;
    let (x0, x1, y0, y1) = (cx - w / 2.0, cx + w / 2.0, cy - h / 2.0, cy + h / 2.0);
    let (tx0, tx1) = (target[0] - target[2] / 2.0, target[0] + target[2] / 2.0);
    let (ty0, ty1) = (target[1] - target[3] / 2.0, target[1] + target[3] / 2.0);

    let iw_raw = x1.min(tx1) - x0.max(tx0);
    let ih_raw = y1.min(ty1) - y0.max(ty0);
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_p = (x1 - x0) * (y1 - y0);
    let area_t = (tx1 - tx0) * (ty1 - ty0);
    let union = area_p + area_t - inter;
    let hw = x1.max(tx1) - x0.min(tx0);
    let hh = y1.max(ty1) - y0.min(ty0);
    let hull = hw * hh;
    let giou = inter / union - (hull - union) / hull;

    // Partial derivatives with respect to corners (x0, x1, y0, y1).
    let iw_on = iw_raw > 0.0;
    let ih_on = ih_raw > 0.0;
    let d_inter = [
        if iw_on && x0 > tx0 { -ih } else { 0.0 },
        if iw_on && x1 < tx1 { ih } else { 0.0 },
        if ih_on && y0 > ty0 { -iw } else { 0.0 },
        if ih_on && y1 < ty1 { iw } else { 0.0 },
    ];
    let d_area = [-(y1 - y0), y1 - y0, -(x1 - x0), x1 - x0];
    let d_hull = [
        if x0 < tx0 { -hh } else { 0.0 },
        if x1 > tx1 { hh } else { 0.0 },
        if y0 < ty0 { -hw } else { 0.0 },
        if y1 > ty1 { hw } else { 0.0 },
    ];
    let mut dc = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        dc[k] = d_inter[k] / union - inter / (union * union) * d_union + d_union / hull
            - union / (hull * hull) * d_hull[k];
    }
    let grad = [
        dc[0] + dc[1],
        dc[2] + dc[3],
        (dc[1] - dc[0]) / 2.0,
        (dc[3] - dc[2]) / 2.0,
    ];
    (giou, grad)
}

/// Set-prediction loss: weighted cross-entropy over all queries (matched
/// queries target their GT class, the rest target no-object) plus
/// `Σ (w_l1·L1 + w_giou·(1 − GIoU)) / M` over matched pairs.
pub fn detr_loss(
    output: &DetectorOutput,
    targets: &AnnotationSet,
    assignment: &MatchAssignment,
    weights: DetrWeights,
) -> Result<DetrLoss> {
    let n = output.len();
    let c = output.num_categories();
    let m = targets.len();
    assignment.validate_against(m, n)?;
    if assignment.len() != m {
        return Err(Error::InvalidAssignment(format!(
            "{} of {m} targets assigned",
            assignment.len()
        )));
    }
    for t in targets.iter() {
        if t.category_id >= c {
            return Err(Error::InvalidCategory {
                category: t.category_id,
                num_categories: c,
            });
        }
    }

    let mut target_class = vec![c; n];
    let mut class_weight = vec![weights.no_object; n];
    for &(g, q) in assignment.pairs() {
        target_class[q] = targets.annotations[g].category_id;
        class_weight[q] = 1.0;
    }
    let weight_sum: f64 = class_weight.iter().sum();

    let mut grads = OutputGradients::zeros(n, c);
    let mut cls = 0.0;
    for (j, q) in output.queries.iter().enumerate() {
        let logp = log_softmax(&q.logits);
        let t = target_class[j];
        let wj = class_weight[j] / weight_sum;
        cls += -wj * logp[t];
        let mut row = grads.logits.row_mut(j);
        for k in 0..=c {
            row[k] = wj * (q.probabilities[k] - if k == t { 1.0 } else { 0.0 });
        }
    }

    let mut loc = 0.0;
    if m > 0 {
        let inv_m = 1.0 / m as f64;
        for &(g, q) in assignment.pairs() {
            let target = targets.annotations[g].bbox.as_array();
            let pred = output.queries[q].bbox.as_array();
            let (giou, dgiou) = giou_and_grad(pred, target);
            let l1: f64 = (0..4).map(|k| (pred[k] - target[k]).abs()).sum();
            loc += inv_m * (weights.l1 * l1 + weights.giou * (1.0 - giou));
            let mut row = grads.boxes.row_mut(q);
            for k in 0..4 {
                let sign = (pred[k] - target[k]).signum() * f64::from(pred[k] != target[k]);
                row[k] += inv_m * (weights.l1 * sign - weights.giou * dgiou[k]);
            }
        }
    }
    Ok(DetrLoss { cls, loc, grads })
}

/// `−Σ_{k∈S} p_k · log q_k` and its gradient w.r.t. the student's logits.
fn restricted_cross_entropy(
    teacher: &QueryPrediction,
    student: &QueryPrediction,
    subset: Option<&[usize]>,
) -> (f64, Vec<f64>) {
    let logq = log_softmax(&student.logits);
    let all: Vec<usize>;
    let ks = match subset {
        Some(s) => s,
        None => {
            all = (0..teacher.probabilities.len()).collect();
            &all
        }
    };
    let mut value = 0.0;
    let mut mass = 0.0;
    let mut grad = vec![0.0; logq.len()];
    for &k in ks {
        let p = teacher.probabilities[k];
        value -= p * logq[k];
        mass += p;
        grad[k] -= p;
    }
    for (g, q) in grad.iter_mut().zip(&student.probabilities) {
        *g += mass * q;
    }
    (value, grad)
}

fn check_sizes(teacher: &DetectorOutput, student: &DetectorOutput) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::SizeMismatch(format!(
            "teacher has {} queries, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.num_categories() != student.num_categories() {
        return Err(Error::SizeMismatch(format!(
            "teacher has {} categories, student {}",
            teacher.num_categories(),
            student.num_categories()
        )));
    }
    Ok(())
}

/// Distills every query pair in `pairs` with
/// `λ1·mean CE + (1−λ1)·mean MSE`, where MSE averages the four coordinates.
fn distill_pairs(
    teacher: &DetectorOutput,
    student: &DetectorOutput,
    pairs: Vec<(usize, usize)>,
    subset: Option<&[usize]>,
    lambda1: f64,
) -> DistillLoss {
    let n = student.len();
    let c = student.num_categories();
    if pairs.is_empty() {
        return DistillLoss::zero(n, c);
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut grads = OutputGradients::zeros(n, c);
    let mut cls = 0.0;
    let mut box_mse = 0.0;
    for &(ti, si) in &pairs {
        let (t, s) = (&teacher.queries[ti], &student.queries[si]);
        let (ce, dce) = restricted_cross_entropy(t, s, subset);
        cls += inv * ce;
        let mut lrow = grads.logits.row_mut(si);
        for (g, d) in lrow.iter_mut().zip(dce) {
            *g += lambda1 * inv * d;
        }
        let tb = t.bbox.as_array();
        let sb = s.bbox.as_array();
        let mut brow = grads.boxes.row_mut(si);
        for k in 0..4 {
            let diff = sb[k] - tb[k];
            box_mse += inv * diff * diff / 4.0;
            brow[k] += (1.0 - lambda1) * inv * diff / 2.0;
        }
    }
    DistillLoss {
        cls,
        box_mse,
        total: lambda1 * cls + (1.0 - lambda1) * box_mse,
        pairs,
        grads,
    }
}

/// Baseline knowledge distillation: teacher predictions are Hungarian-matched
/// to student predictions on a `CE + L1` cost, then each matched pair is
/// distilled with cross-entropy on the full probability vector and box MSE.
pub fn distill_hungarian(
    teacher: &DetectorOutput,
    student: &DetectorOutput,
    lambda1: f64,
) -> Result<DistillLoss> {
    check_sizes(teacher, student)?;
    let rows: Vec<usize> = teacher
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| q.max_foreground() >= HUNGARIAN_KD_FOREGROUND_FLOOR)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Ok(DistillLoss::zero(student.len(), student.num_categories()));
    }
    let student_logp: Vec<Vec<f64>> =
        student.queries.iter().map(|q| log_softmax(&q.logits)).collect();
    let mut values = Vec::with_capacity(rows.len() * student.len());
    for &ti in &rows {
        let t = &teacher.queries[ti];
        for (s, logq) in student.queries.iter().zip(&student_logp) {
            let ce: f64 = -t
                .probabilities
                .iter()
                .zip(logq)
                .map(|(p, lq)| p * lq)
                .sum::<f64>();
            values.push(ce + t.bbox.l1(&s.bbox));
        }
    }
    let cost = CostMatrix::new(rows.len(), student.len(), values)?;
    let assignment = hungarian_assign(&cost)?;
    let pairs = assignment
        .sorted()
        .into_iter()
        .map(|(r, s)| (rows[r], s))
        .collect();
    Ok(distill_pairs(teacher, student, pairs, None, lambda1))
}

/// Proxy queries: `{ n : max_{c ∈ old} p_teacher^(n)(c) ≥ τ }`.
pub fn select_proxy_queries(
    teacher: &DetectorOutput,
    old_categories: &CategorySet,
    tau: f64,
) -> Result<ProxyQuerySet> {
    if old_categories.is_empty() {
        return Err(Error::EmptyOldCategories);
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invariant("tau", format!("{tau} outside [0,1]")));
    }
    let c = teacher.num_categories();
    if let Some(&bad) = old_categories.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidCategory {
            category: bad,
            num_categories: c,
        });
    }
    let indices = teacher
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| q.best_in(old_categories).map_or(false, |(_, p)| p >= tau))
        .map(|(i, _)| i)
        .collect();
    ProxyQuerySet::new(indices, teacher.len())
}

/// Index-aligned query distillation over the proxy set.
///
/// Query `i` of the student is paired with query `i` of the teacher. The
/// class term is `−Σ_{c∈old} p_T(c)·log p_S(c)` on the raw (not renormalized)
/// old-category entries; the box term is the MSE over all four coordinates.
pub fn iaqd_loss(
    teacher: &DetectorOutput,
    student: &DetectorOutput,
    proxy: &ProxyQuerySet,
    old_categories: &CategorySet,
    lambda1: f64,
    include_no_object: bool,
) -> Result<DistillLoss> {
    check_sizes(teacher, student)?;
    if let Some(&bad) = proxy.indices().iter().find(|&&i| i >= student.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: student.len(),
        });
    }
    let c = student.num_categories();
    let mut subset: Vec<usize> = old_categories.iter().copied().collect();
    if let Some(&bad) = subset.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidCategory {
            category: bad,
            num_categories: c,
        });
    }
    if include_no_object {
        subset.push(c);
    }
    let pairs = proxy.indices().iter().map(|&i| (i, i)).collect();
    Ok(distill_pairs(teacher, student, pairs, Some(&subset), lambda1))
}

/// `total = L_DETR + λ2 · (λ1·cls + (1−λ1)·box)`.
pub fn total_loss(
    detr_cls: f64,
    detr_loc: f64,
    distill_cls: f64,
    distill_box: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("detr_cls", detr_cls),
        ("detr_loc", detr_loc),
        ("distill_cls", distill_cls),
        ("distill_box", distill_box),
        ("lambda1", lambda1),
        ("lambda2", lambda2),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let distill = lambda1 * distill_cls + (1.0 - lambda1) * distill_box;
    Ok(LossBreakdown {
        detr_cls,
        detr_loc,
        iaqd_cls: distill_cls,
        iaqd_box: distill_box,
        total: detr_cls + detr_loc + lambda2 * distill,
        lambda1,
        lambda2,
    })
}

/// Keeps at most `max` targets, dropping the lowest-confidence ones first.
/// Ground truth (confidence 1) is retained before any pseudo label.
pub fn cap_targets(targets: &AnnotationSet, max: usize) -> AnnotationSet {
    if targets.len() <= max {
        return targets.clone();
    }
    log::warn!(
        "{} targets exceed {} queries; dropping lowest-confidence entries",
        targets.len(),
        max
    );
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        targets.annotations[b]
            .confidence
            .total_cmp(&targets.annotations[a].confidence)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(max).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| targets.annotations[i]).collect()
}

/// Stacks per-query box rows into an `N x 4` array.
pub fn boxes_of(output: &DetectorOutput) -> Array2<f64> {
    Array2::from_shape_fn((output.len(), 4), |(i, k)| output.queries[i].bbox.as_array()[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{build_cost_matrix, identity_assign, CostWeights};
    use crate::types::{Annotation, BoundingBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(logits: &[f64], b: [f64; 4]) -> QueryPrediction {
        QueryPrediction::new(logits.to_vec(), BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap())
            .unwrap()
    }

    fn bx(b: [f64; 4]) -> BoundingBox {
        BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap()
    }

    fn random_output(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> DetectorOutput {
        DetectorOutput::new(
            (0..n)
                .map(|_| {
                    let logits: Vec<f64> = (0..=c).map(|_| rng.gen_range(-scale..scale)).collect();
                    q(
                        &logits,
                        [
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.2..0.8),
                            rng.gen_range(0.05..0.4),
                            rng.gen_range(0.05..0.4),
                        ],
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-7;
        for _ in 0..200 {
            let p = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let t = [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            ];
            let (g, grad) = giou_and_grad(p, t);
            assert!((g - bx(p).giou(&bx(t))).abs() < 1e-12);
            for k in 0..4 {
                let mut up = p;
                up[k] += eps;
                let mut dn = p;
                dn[k] -= eps;
                let num = (giou_and_grad(up, t).0 - giou_and_grad(dn, t).0) / (2.0 * eps);
                assert!((num - grad[k]).abs() < 1e-6, "k={k} num={num} ana={}", grad[k]);
            }
        }
    }

    #[test]
    fn empty_targets_give_no_object_cross_entropy() {
        let out = DetectorOutput::new(vec![
            q(&[0.2, -0.1, 0.4], [0.5, 0.5, 0.2, 0.2]),
            q(&[1.0, 0.0, -1.0], [0.3, 0.3, 0.1, 0.1]),
        ])
        .unwrap();
        let l = detr_loss(
            &out,
            &AnnotationSet::default(),
            &MatchAssignment::default(),
            DetrWeights::default(),
        )
        .unwrap();
        assert_eq!(l.loc, 0.0);
        let expect: f64 = out
            .queries
            .iter()
            .map(|qq| -qq.probabilities[2].ln())
            .sum::<f64>()
            / 2.0;
        assert!((l.cls - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_match_has_zero_terms() {
        let b = [0.4, 0.6, 0.2, 0.3];
        let out = DetectorOutput::new(vec![q(&[800.0, 0.0, 0.0], b), q(&[0.0, 0.0, 800.0], b)])
            .unwrap();
        let gts = AnnotationSet::new(vec![Annotation::ground_truth(0, bx(b))]);
        let l = detr_loss(&out, &gts, &identity_assign(1), DetrWeights::default()).unwrap();
        assert_eq!(l.loc, 0.0);
        assert_eq!(l.cls, 0.0);
    }

    #[test]
    fn shifted_box_l1_and_giou_terms() {
        let target = [0.5, 0.5, 0.2, 0.2];
        let pred = [0.6, 0.5, 0.2, 0.2];
        let out = DetectorOutput::new(vec![q(&[0.0, 0.0], pred)]).unwrap();
        let gts = AnnotationSet::new(vec![Annotation::ground_truth(0, bx(target))]);
        let w = DetrWeights::default();
        let l = detr_loss(&out, &gts, &identity_assign(1), w).unwrap();
        // Corners: target [0.4,0.6]^2, pred [0.5,0.7]x[0.4,0.6].
        // inter 0.1*0.2=0.02, union 0.06, hull 0.3*0.2=0.06 -> GIoU 1/3.
        let giou = 0.02 / 0.06 - (0.06 - 0.06) / 0.06;
        let expect = w.l1 * 0.1 + w.giou * (1.0 - giou);
        assert!((l.loc - expect).abs() < 1e-12, "{} vs {expect}", l.loc);
    }

    #[test]
    fn invalid_assignment_rejected() {
        let out = DetectorOutput::new(vec![q(&[0.0, 0.0], [0.5, 0.5, 0.2, 0.2])]).unwrap();
        let gts = AnnotationSet::new(vec![Annotation::ground_truth(0, bx([0.5, 0.5, 0.2, 0.2]))]);
        let bad = MatchAssignment::default();
        assert!(matches!(
            detr_loss(&out, &gts, &bad, DetrWeights::default()),
            Err(Error::InvalidAssignment(_))
        ));
    }

    #[test]
    fn hungarian_kd_self_distillation_is_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_output(&mut rng, 6, 3, 2.0);
        let l = distill_hungarian(&t, &t, 0.5).unwrap();
        assert_eq!(l.box_mse, 0.0);
        let entropy: f64 = l
            .pairs
            .iter()
            .map(|&(i, _)| -t.queries[i].probabilities.iter().map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / l.pairs.len() as f64;
        assert!((l.cls - entropy).abs() < 1e-12);
        assert!(l.pairs.iter().all(|&(a, b)| a == b));
    }

    #[test]
    fn hungarian_kd_two_class_value() {
        // p = [0.7, 0.3]: logits ln 0.7, ln 0.3.
        let t = DetectorOutput::new(vec![q(&[0.7f64.ln(), 0.3f64.ln()], [0.5, 0.5, 0.2, 0.2])])
            .unwrap();
        let l = distill_hungarian(&t, &t, 0.5).unwrap();
        let expect = 0.7 * (1.0f64 / 0.7).ln() + 0.3 * (1.0f64 / 0.3).ln();
        assert!((l.cls - expect).abs() < 1e-12);
        assert!((l.cls - 0.6109).abs() < 1e-4);
        assert!((l.total - 0.5 * expect).abs() < 1e-12);
    }

    #[test]
    fn hungarian_kd_is_invariant_to_student_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_output(&mut rng, 6, 3, 3.0);
        let s = random_output(&mut rng, 6, 3, 3.0);
        let base = distill_hungarian(&t, &s, 0.5).unwrap();
        let mut perm = s.clone();
        perm.queries.reverse();
        perm.queries.swap(0, 2);
        let other = distill_hungarian(&t, &perm, 0.5).unwrap();
        assert!((base.total - other.total).abs() < 1e-12);
        assert!(matches!(
            distill_hungarian(&t, &random_output(&mut rng, 5, 3, 1.0), 0.5),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn proxy_selection_threshold() {
        // Old categories {0, 1}; query 0 has p(old) max 0.5, query 1 max 0.05.
        let mk = |p: [f64; 4]| q(&p.map(f64::ln), [0.5, 0.5, 0.1, 0.1]);
        let t = DetectorOutput::new(vec![
            mk([0.5, 0.1, 0.1, 0.3]),
            mk([0.05, 0.02, 0.5, 0.43]),
        ])
        .unwrap();
        let old: CategorySet = [0, 1].into();
        let sel = select_proxy_queries(&t, &old, 0.1).unwrap();
        assert_eq!(sel.indices().iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(select_proxy_queries(&t, &old, 0.0).unwrap().len(), 2);
        assert!(matches!(
            select_proxy_queries(&t, &CategorySet::new(), 0.1),
            Err(Error::EmptyOldCategories)
        ));
    }

    #[test]
    fn proxy_selection_at_one_keeps_one_hot_queries() {
        let t = DetectorOutput::new(vec![
            q(&[900.0, 0.0, 0.0], [0.5, 0.5, 0.1, 0.1]),
            q(&[5.0, 0.0, 0.0], [0.5, 0.5, 0.1, 0.1]),
        ])
        .unwrap();
        let sel = select_proxy_queries(&t, &[0].into(), 1.0).unwrap();
        assert_eq!(sel.indices().iter().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn iaqd_empty_proxy_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_output(&mut rng, 5, 3, 2.0);
        let s = random_output(&mut rng, 5, 3, 2.0);
        let l = iaqd_loss(&t, &s, &ProxyQuerySet::default(), &[0].into(), 0.5, false).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(l.grads.logits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn iaqd_self_term_is_restricted_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_output(&mut rng, 5, 4, 2.0);
        let old: CategorySet = [0, 2].into();
        let proxy = ProxyQuerySet::new([1, 3].into(), 5).unwrap();
        let l = iaqd_loss(&t, &t, &proxy, &old, 0.5, false).unwrap();
        assert_eq!(l.box_mse, 0.0);
        let expect: f64 = [1usize, 3]
            .iter()
            .map(|&i| {
                old.iter()
                    .map(|&c| {
                        let p = t.queries[i].probabilities[c];
                        -p * p.ln()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / 2.0;
        assert!((l.cls - expect).abs() < 1e-12);
        assert_eq!(l.pairs, vec![(1, 1), (3, 3)]);
    }

    #[test]
    fn iaqd_box_mse_value() {
        let t = DetectorOutput::new(vec![q(&[0.0, 0.0, 0.0], [0.5, 0.5, 0.2, 0.2])]).unwrap();
        let s = DetectorOutput::new(vec![q(&[0.0, 0.0, 0.0], [0.5, 0.5, 0.2, 0.3])]).unwrap();
        let proxy = ProxyQuerySet::new([0].into(), 1).unwrap();
        let l = iaqd_loss(&t, &s, &proxy, &[0].into(), 0.5, false).unwrap();
        assert!((l.box_mse - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn iaqd_leaves_non_proxy_queries_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_output(&mut rng, 6, 3, 2.0);
        let s = random_output(&mut rng, 6, 3, 2.0);
        let proxy = ProxyQuerySet::new([0, 4].into(), 6).unwrap();
        let l = iaqd_loss(&t, &s, &proxy, &[0, 1].into(), 0.5, false).unwrap();
        for i in [1, 2, 3, 5] {
            assert!(l.grads.logits.row(i).iter().all(|&g| g == 0.0));
            assert!(l.grads.boxes.row(i).iter().all(|&g| g == 0.0));
        }
        let bad = ProxyQuerySet::new([0, 7].into(), 8).unwrap();
        assert!(matches!(
            iaqd_loss(&t, &s, &bad, &[0].into(), 0.5, false),
            Err(Error::IndexOutOfRange { index: 7, .. })
        ));
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        // Loss-level check: perturb logits/boxes directly.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_output(&mut rng, 4, 3, 2.0);
        let s = random_output(&mut rng, 4, 3, 2.0);
        let proxy = ProxyQuerySet::new([0, 2, 3].into(), 4).unwrap();
        let old: CategorySet = [0, 1].into();
        let gts = AnnotationSet::new(vec![
            Annotation::ground_truth(2, bx([0.4, 0.5, 0.2, 0.3])),
            Annotation::ground_truth(0, bx([0.7, 0.3, 0.1, 0.2])),
        ]);
        let assign = hungarian_assign(&build_cost_matrix(&gts, &s, CostWeights::default()).unwrap())
            .unwrap();
        let eval = |o: &DetectorOutput| -> (f64, OutputGradients) {
            let d = detr_loss(o, &gts, &assign, DetrWeights::default()).unwrap();
            let i = iaqd_loss(&t, o, &proxy, &old, 0.5, true).unwrap();
            let h = distill_hungarian(&t, o, 0.3).unwrap();
            let mut g = d.grads.clone();
            g.add_scaled(1.0, &i.grads);
            g.add_scaled(1.0, &h.grads);
            (d.cls + d.loc + i.total + h.total, g)
        };
        let (_, g) = eval(&s);
        let eps = 1e-6;
        for j in 0..4 {
            for k in 0..4 {
                let mut up = s.clone();
                let mut l = up.queries[j].logits.clone();
                l[k] += eps;
                up.queries[j] = q(&l, up.queries[j].bbox.as_array());
                let mut dn = s.clone();
                let mut l = dn.queries[j].logits.clone();
                l[k] -= eps;
                dn.queries[j] = q(&l, dn.queries[j].bbox.as_array());
                let num = (eval(&up).0 - eval(&dn).0) / (2.0 * eps);
                assert!((num - g.logits[[j, k]]).abs() < 1e-6);

                let mut up = s.clone();
                let mut b = up.queries[j].bbox.as_array();
                b[k] += eps;
                up.queries[j].bbox = bx(b);
                let mut dn = s.clone();
                let mut b = dn.queries[j].bbox.as_array();
                b[k] -= eps;
                dn.queries[j].bbox = bx(b);
                let num = (eval(&up).0 - eval(&dn).0) / (2.0 * eps);
                assert!((num - g.boxes[[j, k]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn total_loss_combination() {
        let t = total_loss(1.5, 0.5, 0.3, 0.7, 0.5, 1.0).unwrap();
        assert!((t.total - 2.5).abs() < 1e-12);
        t.check_recombination(1e-12).unwrap();
        let z = total_loss(1.5, 0.5, 0.3, 0.7, 0.5, 0.0).unwrap();
        assert_eq!(z.total, 2.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 0.0, 0.5, 1.0),
            Err(Error::NonFinite("detr_cls"))
        ));
    }

    #[test]
    fn cap_targets_drops_lowest_confidence() {
        let b = bx([0.5, 0.5, 0.1, 0.1]);
        let set = AnnotationSet::new(vec![
            Annotation::ground_truth(0, b),
            Annotation::pseudo(1, b, 0.5).unwrap(),
            Annotation::pseudo(2, b, 0.9).unwrap(),
        ]);
        let capped = cap_targets(&set, 2);
        assert_eq!(capped.categories(), [0, 2].into());
    }
}
