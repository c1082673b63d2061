//! Multi-phase incremental training: phase-one training, the incremental
//! stage under a distillation strategy, and exemplar-replay fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_dataset_with, sample_exemplars, sample_fraction, split, ExemplarBuffer, GeneratorConfig, PhaseDataset,
    PhaseSample, Protocol, SyntheticScene,
};
use crate::detector::{snapshot, Detector, DetectorSpec, FrozenDetector, Gradients, ModelSnapshot, ParamStore};
use crate::error::{Error, Result};
use crate::eval::{
    churn_histogram, evaluate, match_churn, model_outputs, overall_iou_from_outputs, related_from_outputs, APReport,
    EvalScene, EvalSplit, MatchRecord, OverallIou, RelatedQueries, DEFAULT_RASTER_RESOLUTION,
};
use crate::labels::{merge_labels, pseudo_labels_from_output, realign_from_output};
use crate::losses::{cap_targets, detr_loss, distill_hungarian, iaqd_loss, select_proxy_queries, total_loss, DetrWeights};
use crate::matcher::{build_cost_matrix, hungarian_assign, CostWeights};
use crate::par;
use crate::types::{AnnotationSet, CategoryPartition, CategorySet, DetectorOutput, Image, LossBreakdown, MatchAssignment, Strategy, TrainConfig};

/// Decoupled weight decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in 0..params.len() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for (k, p) in params.data_mut(id).iter_mut().enumerate() {
                *p *= 1.0 - self.lr * self.weight_decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *p -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` to global L2 norm at most `max_norm`; returns the norm before.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.data.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PhaseOne,
    Incremental,
    Er,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::PhaseOne => 0,
            Stage::Incremental => 1,
            Stage::Er => 2,
        }
    }
}

/// One optimizer step's batch-mean losses. Distillation fields are present
/// only in the incremental stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub detr_cls: f64,
    pub detr_loc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_cls: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_box: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLog {
    pub losses: Vec<LossRecord>,
    pub matches: Vec<MatchRecord>,
}

/// Targets and (incremental stage only) the cached teacher output for one
/// view of an image.
struct View {
    targets: AnnotationSet,
    teacher: Option<DetectorOutput>,
}

/// A training item. `views[1]`, when present, belongs to the horizontally
/// mirrored image.
struct Item {
    scene: Arc<SyntheticScene>,
    views: Vec<View>,
}

fn view_image(scene: &SyntheticScene, view: usize) -> std::borrow::Cow<'_, crate::types::Image> {
    if view == 0 {
        std::borrow::Cow::Borrowed(&scene.image)
    } else {
        std::borrow::Cow::Owned(scene.image.flipped_horizontal())
    }
}

fn num_views(cfg: &TrainConfig) -> usize {
    if cfg.hflip {
        2
    } else {
        1
    }
}

/// Ground truth for `view` of an image.
fn view_targets(gt: &AnnotationSet, view: usize) -> AnnotationSet {
    if view == 0 {
        gt.clone()
    } else {
        gt.flipped_horizontal()
    }
}

struct StepOutcome {
    breakdown: LossBreakdown,
    grads: Gradients,
    pairs: Vec<(usize, usize)>,
}

struct StageContext<'a> {
    cfg: &'a TrainConfig,
    stage: Stage,
    old: &'a CategorySet,
}

fn image_step(model: &Detector, item: &Item, view: usize, ctx: &StageContext<'_>) -> Result<StepOutcome> {
    let cfg = ctx.cfg;
    let v = &item.views[view];
    let (raw, cache) = model.forward_train(&view_image(&item.scene, view))?;
    let out = raw.to_detector_output()?;
    let targets = cap_targets(&v.targets, out.len());
    let assignment = if targets.is_empty() {
        MatchAssignment::default()
    } else {
        hungarian_assign(&build_cost_matrix(&targets, &out, CostWeights::default())?)?
    };
    let detr = detr_loss(&out, &targets, &assignment, DetrWeights::default())?;
    let mut g = detr.grads;
    let distill = match (ctx.stage, cfg.strategy, &v.teacher) {
        (Stage::Incremental, Strategy::Iaqd, Some(t)) => {
            let proxy = select_proxy_queries(t, ctx.old, cfg.tau)?;
            Some(iaqd_loss(t, &out, &proxy, ctx.old, cfg.lambda1, cfg.distill_include_no_object)?)
        }
        (Stage::Incremental, Strategy::HungarianKd, Some(t)) => Some(distill_hungarian(t, &out, cfg.lambda1)?),
        _ => None,
    };
    let (dc, db, pairs) = match distill {
        Some(d) => {
            g.add_scaled(cfg.lambda2, &d.grads);
            (d.cls, d.box_mse, d.pairs)
        }
        None => (0.0, 0.0, Vec::new()),
    };
    let breakdown = total_loss(detr.cls, detr.loc, dc, db, cfg.lambda1, cfg.lambda2)?;
    let grads = model.backward(&cache, &g.logits, &g.boxes);
    Ok(StepOutcome { breakdown, grads, pairs })
}

/// Batch-mean set-prediction loss and parameter gradient over `batch`.
pub fn detr_batch_gradient(
    mode: par::Mode,
    model: &Detector,
    batch: &[(&Image, &AnnotationSet)],
) -> Result<(f64, Gradients)> {
    let per_image = par::map_with(mode, batch, |(image, targets)| -> Result<(f64, Gradients)> {
        let (raw, cache) = model.forward_train(image)?;
        let out = raw.to_detector_output()?;
        let targets = cap_targets(targets, out.len());
        let assignment = if targets.is_empty() {
            MatchAssignment::default()
        } else {
            hungarian_assign(&build_cost_matrix(&targets, &out, CostWeights::default())?)?
        };
        let loss = detr_loss(&out, &targets, &assignment, DetrWeights::default())?;
        Ok((loss.cls + loss.loc, model.backward(&cache, &loss.grads.logits, &loss.grads.boxes)))
    });
    let mut total = 0.0;
    let mut grads = model.params().zeros_like();
    for r in per_image {
        let (l, g) = r?;
        total += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Runs `epochs` epochs of minibatch AdamW over `items`. Per-image work fans
/// out through [`par::map`]; reduction follows batch order.
fn run_stage(
    model: &mut Detector,
    items: &[Item],
    epochs: usize,
    ctx: &StageContext<'_>,
    log: &mut StageLog,
) -> Result<()> {
    let cfg = ctx.cfg;
    if items.is_empty() || epochs == 0 {
        return Ok(());
    }
    let mut opt = AdamW::new(model.params(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a41_4e00);
    rng.set_stream(model.phase() as u64 * 4 + ctx.stage.stream());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0usize;
    for epoch in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let views: Vec<usize> = order.iter().map(|&i| rng.gen_range(0..items[i].views.len())).collect();
        let work: Vec<(usize, usize)> = order.iter().copied().zip(views).collect();
        for chunk in work.chunks(cfg.batch_size) {
            let batch: Vec<usize> = chunk.iter().map(|w| w.0).collect();
            let snapshot: &Detector = model;
            let outcomes = par::map(chunk, |&(i, v)| image_step(snapshot, &items[i], v, ctx));
            let inv = 1.0 / batch.len() as f64;
            let mut grads = model.params().zeros_like();
            let mut rec = LossRecord {
                stage: ctx.stage,
                step,
                epoch,
                detr_cls: 0.0,
                detr_loc: 0.0,
                distill_cls: (ctx.stage == Stage::Incremental).then_some(0.0),
                distill_box: (ctx.stage == Stage::Incremental).then_some(0.0),
                total: 0.0,
            };
            for (&i, outcome) in batch.iter().zip(outcomes) {
                let o = outcome.map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence { step, loss: f64::NAN },
                    other => other,
                })?;
                grads.add_assign(&o.grads);
                rec.detr_cls += inv * o.breakdown.detr_cls;
                rec.detr_loc += inv * o.breakdown.detr_loc;
                rec.total += inv * o.breakdown.total;
                if let (Some(c), Some(b)) = (rec.distill_cls.as_mut(), rec.distill_box.as_mut()) {
                    *c += inv * o.breakdown.iaqd_cls;
                    *b += inv * o.breakdown.iaqd_box;
                }
                for (teacher, student) in o.pairs {
                    log.matches.push(MatchRecord {
                        step,
                        image_id: items[i].scene.scene_id,
                        student,
                        teacher,
                    });
                }
            }
            if !rec.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss: rec.total });
            }
            grads.scale(inv);
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            opt.step(model.params_mut(), &grads);
            log.losses.push(rec);
            step += 1;
        }
        if let Some(last) = log.losses.last() {
            log::debug!("{:?} epoch {epoch}: total {:.4}", ctx.stage, last.total);
        }
    }
    Ok(())
}

/// Standard set-prediction training on the first phase's annotations.
pub fn train_phase_one(cfg: &TrainConfig, spec: &DetectorSpec, data: &PhaseDataset) -> Result<(ModelSnapshot, StageLog)> {
    cfg.validate()?;
    if data.phase != 1 {
        return Err(Error::invariant("phase", "phase-one training needs phase-1 data"));
    }
    let mut model = Detector::new(spec.clone(), cfg.seed)?;
    let items: Vec<Item> = data
        .samples
        .iter()
        .map(|s| Item {
            scene: Arc::clone(&s.scene),
            views: (0..num_views(cfg))
                .map(|v| View {
                    targets: view_targets(&s.visible, v),
                    teacher: None,
                })
                .collect(),
        })
        .collect();
    let old = CategorySet::new();
    let ctx = StageContext {
        cfg,
        stage: Stage::PhaseOne,
        old: &old,
    };
    let mut log = StageLog::default();
    run_stage(&mut model, &items, cfg.epochs_phase_one, &ctx, &mut log)?;
    Ok((model.into_snapshot(), log))
}

/// Teacher outputs are computed once (the teacher is frozen), turned into
/// old-category pseudo labels, merged with the phase's ground truth, and
/// reused as distillation targets for every step.
pub fn train_incremental(
    cfg: &TrainConfig,
    teacher: &ModelSnapshot,
    data: &PhaseDataset,
    old_categories: &CategorySet,
) -> Result<(ModelSnapshot, StageLog)> {
    cfg.validate()?;
    if old_categories.is_empty() {
        return Err(Error::EmptyOldCategories);
    }
    let frozen = FrozenDetector::from_snapshot(teacher.clone())?;
    let before = frozen.checksum();
    let work: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| (0..num_views(cfg)).map(move |v| (i, v)))
        .collect();
    let views: Vec<Result<View>> = par::map(&work, |&(i, v)| {
        let s = &data.samples[i];
        let out = frozen.forward(&view_image(&s.scene, v))?;
        let pseudo = pseudo_labels_from_output(&out, old_categories, cfg.pseudo_threshold_incremental)?;
        Ok(View {
            targets: merge_labels(&pseudo, &view_targets(&s.visible, v))?,
            teacher: Some(out),
        })
    });
    let items = group_views(data.samples.iter().map(|s| Arc::clone(&s.scene)).collect(), views, num_views(cfg))?;
    let mut student = Detector::init_from(teacher, &teacher.spec)?;
    let ctx = StageContext {
        cfg,
        stage: Stage::Incremental,
        old: old_categories,
    };
    let mut log = StageLog::default();
    run_stage(&mut student, &items, cfg.epochs_incremental, &ctx, &mut log)?;
    if frozen.checksum() != before {
        return Err(Error::invariant("teacher", "teacher parameters changed during distillation"));
    }
    Ok((student.into_snapshot(), log))
}

fn group_views(scenes: Vec<Arc<SyntheticScene>>, views: Vec<Result<View>>, per_item: usize) -> Result<Vec<Item>> {
    let mut views = views.into_iter();
    scenes
        .into_iter()
        .map(|scene| {
            let v = views.by_ref().take(per_item).collect::<Result<Vec<_>>>()?;
            Ok(Item { scene, views: v })
        })
        .collect()
}

/// Fine-tunes with the set-prediction loss alone on realigned exemplars plus
/// a realigned slice of the current phase's data.
pub fn train_er_finetune(
    cfg: &TrainConfig,
    model: &ModelSnapshot,
    buffer: &ExemplarBuffer,
    new_data_sample: &[PhaseSample],
    new_categories: &CategorySet,
    seen_categories: &CategorySet,
) -> Result<(ModelSnapshot, StageLog)> {
    cfg.validate()?;
    let frozen = FrozenDetector::from_snapshot(model.clone())?;
    let mut work: Vec<(Arc<SyntheticScene>, AnnotationSet, CategorySet)> = buffer
        .entries()
        .iter()
        .map(|e| (Arc::clone(&e.scene), e.annotations.clone(), e.annotated_categories.clone()))
        .collect();
    work.extend(
        new_data_sample
            .iter()
            .map(|s| (Arc::clone(&s.scene), s.visible.clone(), new_categories.clone())),
    );
    let jobs: Vec<(usize, usize)> = (0..work.len())
        .flat_map(|i| (0..num_views(cfg)).map(move |v| (i, v)))
        .collect();
    let views: Vec<Result<View>> = par::map(&jobs, |&(i, v)| {
        let (scene, gt, annotated) = &work[i];
        let out = frozen.forward(&view_image(scene, v))?;
        Ok(View {
            targets: realign_from_output(&out, &view_targets(gt, v), annotated, seen_categories, cfg.pseudo_threshold_er)?,
            teacher: None,
        })
    });
    let items = group_views(work.iter().map(|w| Arc::clone(&w.0)).collect(), views, num_views(cfg))?;
    let mut student = Detector::from_snapshot(model.clone())?;
    let old = CategorySet::new();
    let ctx = StageContext {
        cfg,
        stage: Stage::Er,
        old: &old,
    };
    let mut log = StageLog::default();
    run_stage(&mut student, &items, cfg.epochs_er, &ctx, &mut log)?;
    Ok((student.into_snapshot(), log))
}

/// Flat run configuration: training hyperparameters, model shape and the
/// benchmark definition. Echoed into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub data_seed: u64,
    pub num_scenes: usize,
    pub num_test_scenes: usize,
    pub num_categories: usize,
    /// `|C_1|, |C_2|, ...`; categories are assigned contiguously.
    pub phase_sizes: Vec<usize>,
    pub protocol: Protocol,
    pub image_size: usize,
    pub num_queries: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub raster_resolution: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

pub const SCHEMA_VERSION: u32 = 1;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let spec = DetectorSpec::default();
        Self {
            schema_version: SCHEMA_VERSION,
            data_seed: 0,
            num_scenes: 500,
            num_test_scenes: 200,
            num_categories: 8,
            phase_sizes: vec![6, 2],
            protocol: Protocol::A,
            image_size: spec.image_size,
            num_queries: spec.num_queries,
            embed_dim: spec.embed_dim,
            decoder_layers: spec.decoder_layers,
            heads: spec.heads,
            ffn_dim: spec.ffn_dim,
            raster_resolution: DEFAULT_RASTER_RESOLUTION,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn detector_spec(&self) -> DetectorSpec {
        DetectorSpec {
            num_queries: self.num_queries,
            embed_dim: self.embed_dim,
            decoder_layers: self.decoder_layers,
            num_categories: self.num_categories,
            image_size: self.image_size,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            ..GeneratorConfig::default()
        }
    }

    pub fn partition(&self) -> Result<CategoryPartition> {
        if self.phase_sizes.iter().sum::<usize>() != self.num_categories {
            return Err(Error::invariant("phase_sizes", "must sum to num_categories"));
        }
        CategoryPartition::contiguous(&self.phase_sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.phase_sizes.len() < 2 {
            return Err(Error::invariant("phase_sizes", "need at least two phases"));
        }
        if self.num_test_scenes == 0 {
            return Err(Error::invariant("num_test_scenes", "must be positive"));
        }
        self.partition()?;
        self.detector_spec().validate()?;
        self.train.validate()
    }
}

/// Train and test scenes. Test scenes continue the id sequence.
pub fn build_scenes(cfg: &ExperimentConfig) -> Result<(Vec<Arc<SyntheticScene>>, Vec<Arc<SyntheticScene>>)> {
    let all = generate_dataset_with(
        cfg.data_seed,
        cfg.num_scenes + cfg.num_test_scenes,
        cfg.num_categories,
        &cfg.generator(),
    )?;
    let mut all: Vec<Arc<SyntheticScene>> = all.into_iter().map(Arc::new).collect();
    let test = all.split_off(cfg.num_scenes);
    Ok((all, test))
}

fn eval_scenes(scenes: &[Arc<SyntheticScene>]) -> Vec<EvalScene<'_>> {
    scenes
        .iter()
        .map(|s| EvalScene {
            scene_id: s.scene_id,
            image: &s.image,
            annotations: &s.annotations,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Distinct teacher indices per student query.
    pub churn: Vec<usize>,
    pub churn_max: usize,
    pub churn_histogram_query: usize,
    #[serde(deserialize_with = "crate::eval::index_keys::deserialize")]
    pub churn_histogram: BTreeMap<usize, usize>,
    pub related: RelatedQueries,
    pub related_totals: usize,
    pub overall_iou: OverallIou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase: usize,
    pub strategy: Strategy,
    #[serde(flatten)]
    pub report: APReport,
    /// Metrics of the incremental-stage model before replay, when replay ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_er: Option<APReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub phases: Vec<PhaseMetrics>,
    pub phase_one: ModelSnapshot,
    pub final_model: ModelSnapshot,
}

/// Shared inputs that several runs may reuse.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// A phase-one model already trained under the same config and seed.
    /// Phase-one training does not depend on the strategy.
    pub phase_one: Option<ModelSnapshot>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Forgetting diagnostics of `student` on old-phase training scenes.
pub fn diagnose_student(
    student: &ModelSnapshot,
    old_scenes: &[Arc<SyntheticScene>],
    old_categories: &CategorySet,
    matches: &[MatchRecord],
    raster_resolution: usize,
) -> Result<Diagnostics> {
    let model = FrozenDetector::from_snapshot(student.clone())?;
    let scenes = eval_scenes(old_scenes);
    let outputs = model_outputs(&model, &scenes)?;
    let related = related_from_outputs(&outputs, &scenes, old_categories)?;
    let overall = overall_iou_from_outputs(&outputs, &scenes, old_categories, raster_resolution)?;
    let churn = match_churn(matches, student.spec.num_queries);
    let churn_max = churn.iter().copied().max().unwrap_or(0);
    let query = churn.iter().position(|&c| c == churn_max).unwrap_or(0);
    Ok(Diagnostics {
        churn_histogram: churn_histogram(matches, query),
        churn_histogram_query: query,
        churn,
        churn_max,
        related_totals: related.total,
        related,
        overall_iou: overall,
    })
}

/// Phase 1, then for every later phase: incremental stage, replay stage,
/// exemplar sampling. Evaluates on the full test set after each phase and
/// writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let partition = cfg.partition()?;
    let spec = cfg.detector_spec();
    let train_cfg = &cfg.train;
    for dir in ["snapshots", "metrics", "matchlog", "losses"] {
        fs::create_dir_all(out.join(dir))?;
    }
    write_json(&out.join("config.json"), cfg)?;

    let (train, test) = build_scenes(cfg)?;
    let test_scenes = eval_scenes(&test);
    let phase_data: Vec<PhaseDataset> = (1..=partition.num_phases())
        .map(|t| split(&train, &partition, t, cfg.protocol, cfg.data_seed))
        .collect::<Result<_>>()?;

    let (phase_one, log) = match &opts.phase_one {
        Some(s) => {
            if s.spec != spec || s.phase != 1 {
                return Err(Error::SpecMismatch("reused phase-one model does not fit this config".into()));
            }
            (s.clone(), StageLog::default())
        }
        None => train_phase_one(train_cfg, &spec, &phase_data[0])?,
    };
    let mut phases = Vec::new();
    let split1 = EvalSplit {
        old: CategorySet::new(),
        new: partition.phase(1).clone(),
    };
    let report = evaluate(&FrozenDetector::from_snapshot(phase_one.clone())?, &test_scenes, &split1)?;
    let m1 = PhaseMetrics {
        phase: 1,
        strategy: train_cfg.strategy,
        report,
        pre_er: None,
        diagnostics: None,
    };
    snapshot::save(&phase_one, out.join("snapshots/phase_1.bin"))?;
    write_json(&out.join("metrics/phase_1.json"), &m1)?;
    write_jsonl(&out.join("losses/phase_1.jsonl"), &log.losses)?;
    write_jsonl::<MatchRecord>(&out.join("matchlog/phase_1.jsonl"), &[])?;
    phases.push(m1);

    let mut buffer = ExemplarBuffer::new(train_cfg.exemplar_fraction, train.len())?;
    buffer = sample_exemplars(&phase_data[0], buffer, train_cfg.exemplar_fraction, train_cfg.seed)?;
    let mut current = phase_one.clone();

    for t in 2..=partition.num_phases() {
        let data = &phase_data[t - 1];
        let old = partition.old_before(t);
        let seen = partition.seen_through(t);
        let (student, mut log) = train_incremental(train_cfg, &current, data, &old)?;

        let old_ids: std::collections::BTreeSet<usize> =
            phase_data[..t - 1].iter().flat_map(|d| d.scene_ids()).collect();
        let old_scenes: Vec<Arc<SyntheticScene>> = train.iter().filter(|s| old_ids.contains(&s.scene_id)).cloned().collect();
        let diagnostics = diagnose_student(&student, &old_scenes, &old, &log.matches, cfg.raster_resolution)?;

        let split_t = EvalSplit {
            old: old.clone(),
            new: partition.phase(t).clone(),
        };
        let pre_report = evaluate(&FrozenDetector::from_snapshot(student.clone())?, &test_scenes, &split_t)?;
        snapshot::save(&student, out.join(format!("snapshots/phase_{t}_incremental.bin")))?;

        let (final_model, pre_er) = if train_cfg.skip_er {
            (student, None)
        } else {
            let slice = sample_fraction(data, train_cfg.exemplar_fraction, train_cfg.seed);
            let (tuned, er_log) =
                train_er_finetune(train_cfg, &student, &buffer, &slice, partition.phase(t), &seen)?;
            log.losses.extend(er_log.losses);
            (tuned, Some(pre_report.clone()))
        };
        let report = match &pre_er {
            Some(_) => evaluate(&FrozenDetector::from_snapshot(final_model.clone())?, &test_scenes, &split_t)?,
            None => pre_report,
        };
        let metrics = PhaseMetrics {
            phase: t,
            strategy: train_cfg.strategy,
            report,
            pre_er,
            diagnostics: Some(diagnostics),
        };
        snapshot::save(&final_model, out.join(format!("snapshots/phase_{t}.bin")))?;
        write_json(&out.join(format!("metrics/phase_{t}.json")), &metrics)?;
        write_jsonl(&out.join(format!("losses/phase_{t}.jsonl")), &log.losses)?;
        write_jsonl(&out.join(format!("matchlog/phase_{t}.jsonl")), &log.matches)?;
        phases.push(metrics);

        buffer = sample_exemplars(data, buffer, train_cfg.exemplar_fraction, train_cfg.seed)?;
        current = final_model;
    }
    Ok(RunSummary {
        phases,
        phase_one,
        final_model: current,
    })
}

/// Re-evaluates a saved phase snapshot of a run directory on its test set.
pub fn evaluate_run_phase(run: &Path, phase: usize) -> Result<(ExperimentConfig, APReport)> {
    let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(run.join("config.json"))?)?;
    cfg.validate()?;
    let partition = cfg.partition()?;
    if phase == 0 || phase > partition.num_phases() {
        return Err(Error::invariant("phase", format!("phase {phase} outside 1..={}", partition.num_phases())));
    }
    let model = FrozenDetector::from_snapshot(snapshot::load(run.join(format!("snapshots/phase_{phase}.bin")))?)?;
    let (_, test) = build_scenes(&cfg)?;
    let split_t = EvalSplit {
        old: partition.old_before(phase),
        new: partition.phase(phase).clone(),
    };
    let report = evaluate(&model, &eval_scenes(&test), &split_t)?;
    Ok((cfg, report))
}

/// Recomputes forgetting diagnostics for every incremental phase of a run
/// directory from its incremental-stage snapshots and match logs.
pub fn diagnose_run(run: &Path) -> Result<Vec<(usize, Diagnostics)>> {
    let cfg: ExperimentConfig = serde_json::from_slice(&fs::read(run.join("config.json"))?)?;
    cfg.validate()?;
    let partition = cfg.partition()?;
    let (train, _) = build_scenes(&cfg)?;
    let mut out = Vec::new();
    for t in 2..=partition.num_phases() {
        let student = snapshot::load(run.join(format!("snapshots/phase_{t}_incremental.bin")))?;
        let text = fs::read_to_string(run.join(format!("matchlog/phase_{t}.jsonl")))?;
        let matches: Vec<MatchRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let mut old_ids = std::collections::BTreeSet::new();
        for k in 1..t {
            old_ids.extend(split(&train, &partition, k, cfg.protocol, cfg.data_seed)?.scene_ids());
        }
        let old_scenes: Vec<Arc<SyntheticScene>> = train.iter().filter(|s| old_ids.contains(&s.scene_id)).cloned().collect();
        let d = diagnose_student(&student, &old_scenes, &partition.old_before(t), &matches, cfg.raster_resolution)?;
        out.push((t, d));
    }
    Ok(out)
}
