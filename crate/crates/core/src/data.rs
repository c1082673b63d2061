//! Synthetic glyph scenes, phase splits and the exemplar buffer.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{read_annotation_records, write_annotation_records, AnnotationRecord};
use crate::par;
use crate::types::{Annotation, AnnotationSet, BoundingBox, CategoryPartition, CategorySet, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene_id: usize,
    pub image: Image,
    pub annotations: AnnotationSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths are drawn from this range, as a fraction of the image.
    pub min_extent: f64,
    pub max_extent: f64,
    pub max_pairwise_iou: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 6,
            min_extent: 0.14,
            max_extent: 0.36,
            max_pairwise_iou: 0.3,
        }
    }
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Triangle,
    Ring,
}

const SHAPES: [Shape; 4] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Ring];

/// Color and shape for category `c`; distinct for every `c`.
fn glyph(c: usize) -> ([f64; 3], Shape) {
    let color = PALETTE[c % PALETTE.len()].map(|v| f64::from(v) / 255.0);
    let shape = SHAPES[(c + c / PALETTE.len()) % SHAPES.len()];
    (color, shape)
}

fn covers(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in [-1, 1]^2 relative to the glyph box.
    match shape {
        Shape::Square => true,
        Shape::Disk => u * u + v * v <= 1.0,
        Shape::Triangle => {
            let t = (v + 1.0) / 2.0;
            u.abs() <= t
        }
        Shape::Ring => {
            let r = u * u + v * v;
            (0.3..=1.0).contains(&r)
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_scene(seed: u64, scene_id: usize, num_categories: usize, cfg: &GeneratorConfig) -> Result<SyntheticScene> {
    const OBJECT_ATTEMPTS: usize = 200;
    const SCENE_ATTEMPTS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id as u64);
    let size = cfg.image_size;
    let px = |v: f64| (v * size as f64).round() as usize;

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<Annotation> = Vec::new();
    'scene: for _ in 0..SCENE_ATTEMPTS {
        placed.clear();
        for _ in 0..count {
            let category = rng.gen_range(0..num_categories);
            let mut ok = None;
            for _ in 0..OBJECT_ATTEMPTS {
                let w = px(rng.gen_range(cfg.min_extent..cfg.max_extent)).max(2);
                let h = px(rng.gen_range(cfg.min_extent..cfg.max_extent)).max(2);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                let s = size as f64;
                let bbox = BoundingBox::from_corners(
                    x0 as f64 / s,
                    y0 as f64 / s,
                    (x0 + w) as f64 / s,
                    (y0 + h) as f64 / s,
                )?;
                if placed.iter().all(|a| a.bbox.iou(&bbox) <= cfg.max_pairwise_iou) {
                    ok = Some(bbox);
                    break;
                }
            }
            match ok {
                Some(bbox) => placed.push(Annotation::ground_truth(category, bbox)),
                None => continue 'scene,
            }
        }
        break;
    }
    if placed.len() != count {
        return Err(Error::PlacementFailure {
            objects: count,
            attempts: SCENE_ATTEMPTS,
        });
    }

    let base: f64 = rng.gen_range(0.08..0.3);
    let mut image = Image::filled(size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let rgb = [0, 1, 2].map(|_| quantize(base + rng.gen_range(-0.04..0.04)));
            image.set_pixel(x, y, rgb);
        }
    }
    for a in &placed {
        let (color, shape) = glyph(a.category_id);
        let [x0, y0, x1, y1] = a.bbox.corners().map(|v| (v * size as f64).round() as usize);
        for y in y0..y1 {
            for x in x0..x1 {
                let u = ((x as f64 + 0.5) - (x0 + x1) as f64 / 2.0) / ((x1 - x0) as f64 / 2.0);
                let v = ((y as f64 + 0.5) - (y0 + y1) as f64 / 2.0) / ((y1 - y0) as f64 / 2.0);
                if covers(shape, u, v) {
                    image.set_pixel(x, y, color.map(quantize));
                }
            }
        }
    }
    Ok(SyntheticScene {
        scene_id,
        image,
        annotations: AnnotationSet::new(placed),
    })
}

/// Deterministic glyph scenes with default generator settings.
pub fn generate_dataset(seed: u64, num_scenes: usize, num_categories: usize) -> Result<Vec<SyntheticScene>> {
    generate_dataset_with(seed, num_scenes, num_categories, &GeneratorConfig::default())
}

/// Scene `i` draws from its own ChaCha stream, so scenes generate independently.
pub fn generate_dataset_with(
    seed: u64,
    num_scenes: usize,
    num_categories: usize,
    cfg: &GeneratorConfig,
) -> Result<Vec<SyntheticScene>> {
    if num_categories < 4 {
        return Err(Error::invariant("num_categories", "need at least 4 categories"));
    }
    if num_scenes < 50 {
        return Err(Error::invariant("num_scenes", "need at least 50 scenes"));
    }
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::invariant("max_objects", "need 1 <= min_objects <= max_objects"));
    }
    let ids: Vec<usize> = (0..num_scenes).collect();
    par::map(&ids, |&i| generate_scene(seed, i, num_categories, cfg))
        .into_iter()
        .collect()
}

/// One training sample: a scene and the annotations visible in this phase.
#[derive(Clone, Debug)]
pub struct PhaseSample {
    pub scene: Arc<SyntheticScene>,
    pub visible: AnnotationSet,
}

#[derive(Clone, Debug)]
pub struct PhaseDataset {
    pub phase: usize,
    pub visible_categories: CategorySet,
    pub samples: Vec<PhaseSample>,
}

impl PhaseDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scene_ids(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.scene.scene_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    A,
    B,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Protocol::A),
            "b" => Ok(Protocol::B),
            other => Err(Error::invariant("protocol", format!("unknown protocol {other}"))),
        }
    }
}

fn check_phase(partition: &CategoryPartition, t: usize) -> Result<()> {
    if t == 0 || t > partition.num_phases() {
        return Err(Error::invariant("phase", format!("phase {t} outside 1..={}", partition.num_phases())));
    }
    Ok(())
}

/// Every scene with at least one object of `C_t`; annotations restricted to `C_t`.
pub fn split_protocol_a(scenes: &[Arc<SyntheticScene>], partition: &CategoryPartition, t: usize) -> Result<PhaseDataset> {
    check_phase(partition, t)?;
    let visible_categories = partition.phase(t).clone();
    let samples = scenes
        .iter()
        .filter_map(|s| {
            let visible = s.annotations.restricted_to(&visible_categories);
            (!visible.is_empty()).then(|| PhaseSample {
                scene: Arc::clone(s),
                visible,
            })
        })
        .collect();
    Ok(PhaseDataset {
        phase: t,
        visible_categories,
        samples,
    })
}

/// Chunk sizes proportional to `weights` summing to `total` (largest remainder).
pub fn proportional_sizes(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / wsum as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut short = total - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if short == 0 {
            break;
        }
        sizes[i] += 1;
        short -= 1;
    }
    sizes
}

/// Seeded disjoint split of all scenes into `T` chunks sized by `|C_t|`.
pub fn split_protocol_b(
    scenes: &[Arc<SyntheticScene>],
    partition: &CategoryPartition,
    t: usize,
    seed: u64,
) -> Result<PhaseDataset> {
    check_phase(partition, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let weights: Vec<usize> = partition.subsets().iter().map(|s| s.len()).collect();
    let sizes = proportional_sizes(scenes.len(), &weights);
    let start: usize = sizes[..t - 1].iter().sum();
    let mut chunk: Vec<usize> = order[start..start + sizes[t - 1]].to_vec();
    chunk.sort_unstable();
    let visible_categories = partition.phase(t).clone();
    let samples = chunk
        .into_iter()
        .map(|i| PhaseSample {
            scene: Arc::clone(&scenes[i]),
            visible: scenes[i].annotations.restricted_to(&visible_categories),
        })
        .collect();
    Ok(PhaseDataset {
        phase: t,
        visible_categories,
        samples,
    })
}

pub fn split(
    scenes: &[Arc<SyntheticScene>],
    partition: &CategoryPartition,
    t: usize,
    protocol: Protocol,
    seed: u64,
) -> Result<PhaseDataset> {
    match protocol {
        Protocol::A => split_protocol_a(scenes, partition, t),
        Protocol::B => split_protocol_b(scenes, partition, t, seed),
    }
}

#[derive(Clone, Debug)]
pub struct Exemplar {
    pub scene: Arc<SyntheticScene>,
    pub annotations: AnnotationSet,
    pub phase: usize,
    /// Categories whose annotations this exemplar carries (its phase's `C_t`).
    pub annotated_categories: CategorySet,
}

/// Bounded replay memory.
#[derive(Clone, Debug)]
pub struct ExemplarBuffer {
    budget: usize,
    entries: Vec<Exemplar>,
}

impl ExemplarBuffer {
    /// Budget `⌊fraction · dataset_size⌋`.
    pub fn new(fraction: f64, dataset_size: usize) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invariant("exemplar_fraction", format!("{fraction} outside (0,1]")));
        }
        Ok(Self {
            budget: (fraction * dataset_size as f64).floor() as usize,
            entries: Vec::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn entries(&self) -> &[Exemplar] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Appends a seeded uniform sample of `⌈fraction · |phase|⌉` entries (at most
/// the budget), then evicts uniformly from older phases while over budget.
pub fn sample_exemplars(
    phase_data: &PhaseDataset,
    mut buffer: ExemplarBuffer,
    fraction: f64,
    seed: u64,
) -> Result<ExemplarBuffer> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invariant("exemplar_fraction", format!("{fraction} outside (0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase_data.phase as u64);
    let want = ((fraction * phase_data.len() as f64).ceil() as usize)
        .min(buffer.budget)
        .min(phase_data.len());
    let mut picked: Vec<usize> = sample(&mut rng, phase_data.len(), want).into_vec();
    picked.sort_unstable();
    for i in picked {
        let s = &phase_data.samples[i];
        buffer.entries.push(Exemplar {
            scene: Arc::clone(&s.scene),
            annotations: s.visible.clone(),
            phase: phase_data.phase,
            annotated_categories: phase_data.visible_categories.clone(),
        });
    }
    while buffer.entries.len() > buffer.budget {
        let older: Vec<usize> = (0..buffer.entries.len())
            .filter(|&i| buffer.entries[i].phase < phase_data.phase)
            .collect();
        let victim = if older.is_empty() {
            rng.gen_range(0..buffer.entries.len())
        } else {
            older[rng.gen_range(0..older.len())]
        };
        buffer.entries.remove(victim);
    }
    Ok(buffer)
}

/// Seeded uniform subset of `fraction` of the phase data (at least one sample).
pub fn sample_fraction(phase_data: &PhaseDataset, fraction: f64, seed: u64) -> Vec<PhaseSample> {
    if phase_data.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e12);
    rng.set_stream(phase_data.phase as u64);
    let want = ((fraction * phase_data.len() as f64).round() as usize).clamp(1, phase_data.len());
    let mut picked = sample(&mut rng, phase_data.len(), want).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| phase_data.samples[i].clone()).collect()
}

/// Seeded permutation of `0..C`, the category order used to build partitions.
pub fn category_order(num_categories: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c47_e60e);
    let mut order: Vec<usize> = (0..num_categories).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub num_scenes: usize,
    pub num_categories: usize,
    pub generator: GeneratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Protocol>,
    /// SHA-256 over every image file followed by the annotation file.
    pub checksum: String,
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let size = image.size() as u32;
    let bytes: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(size, size, bytes).expect("buffer sized from image");
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        buf.as_raw(),
        size,
        size,
        image::ColorType::Rgb8,
    )?;
    Ok(out)
}

use image::ImageEncoder;

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let size = img.width() as usize;
    Image::new(size, img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Writes `images/scene_XXXXX.png`, `annotations.jsonl` and `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    scenes: &[SyntheticScene],
    seed: u64,
    num_categories: usize,
    generator: &GeneratorConfig,
    partition: Option<&CategoryPartition>,
    protocol: Option<Protocol>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("images"))?;
    let mut hasher = Sha256::new();
    for s in scenes {
        let png = encode_png(&s.image)?;
        hasher.update(&png);
        fs::write(dir.join("images").join(format!("scene_{:05}.png", s.scene_id)), png)?;
    }
    let records: Vec<AnnotationRecord> = scenes
        .iter()
        .flat_map(|s| s.annotations.iter().map(|a| AnnotationRecord::from_annotation(s.scene_id, a)))
        .collect();
    let mut ann = Vec::new();
    write_annotation_records(&records, &mut ann)?;
    hasher.update(&ann);
    fs::write(dir.join("annotations.jsonl"), &ann)?;
    let manifest = DatasetManifest {
        schema_version: 1,
        seed,
        num_scenes: scenes.len(),
        num_categories,
        generator: generator.clone(),
        partition: partition.map(|p| p.subsets().iter().map(|s| s.iter().copied().collect()).collect()),
        protocol,
        checksum: hex::encode(hasher.finalize()),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SyntheticScene>)> {
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let records = read_annotation_records(fs::File::open(dir.join("annotations.jsonl"))?)?;
    let mut per_scene: Vec<Vec<Annotation>> = vec![Vec::new(); manifest.num_scenes];
    for r in records {
        if r.sample_id >= manifest.num_scenes {
            return Err(Error::invariant("sample_id", format!("{} beyond manifest", r.sample_id)));
        }
        per_scene[r.sample_id].push(r.to_annotation()?);
    }
    let scenes = per_scene
        .into_iter()
        .enumerate()
        .map(|(i, anns)| {
            let image = decode_png(&fs::read(dir.join("images").join(format!("scene_{i:05}.png")))?)?;
            Ok(SyntheticScene {
                scene_id: i,
                image,
                annotations: AnnotationSet::new(anns),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}
