//! A small set-prediction detector.
//!
//! Three strided 3x3 convolutions turn the image into a grid of feature
//! tokens (plus fixed sinusoidal positions). `N` learned query embeddings go
//! through a stack of post-norm decoder blocks (self-attention,
//! cross-attention over the tokens, feed-forward) and shared heads produce
//! `C + 1` class logits and a sigmoid-squashed `(cx, cy, w, h)` box per query.
//!
//! Forward and backward passes are written out by hand in `f64`; the
//! backward pass consumes gradients with respect to logits and boxes, which
//! is exactly what the loss functions produce.

mod ops;
mod params;
pub mod snapshot;

use std::ops::AddAssign;
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, DetectorOutput, Image, QueryPrediction};

pub use params::{Gradients, Param, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSpec {
    pub num_queries: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub num_categories: usize,
    pub image_size: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            num_queries: 25,
            embed_dim: 64,
            decoder_layers: 2,
            num_categories: 8,
            image_size: 64,
            heads: 4,
            ffn_dim: 128,
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("embed_dim", self.embed_dim),
            ("decoder_layers", self.decoder_layers),
            ("num_categories", self.num_categories),
            ("image_size", self.image_size),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invariant(field, "must be positive"));
            }
        }
        if self.image_size % 8 != 0 {
            return Err(Error::invariant("image_size", "must be a multiple of 8"));
        }
        if self.embed_dim % 4 != 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invariant(
                "embed_dim",
                "must be divisible by 4 and by the head count",
            ));
        }
        Ok(())
    }

    fn conv_channels(&self) -> [usize; 4] {
        let d = self.embed_dim;
        [Image::CHANNELS, (d / 4).max(1), (d / 2).max(1), d]
    }

    pub fn grid(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    self_attn: Attn,
    norm1: Norm,
    cross_attn: Attn,
    norm2: Norm,
    ff1: Dense,
    ff2: Dense,
    norm3: Norm,
}

/// Parameter ids, derived deterministically from a [`DetectorSpec`].
#[derive(Clone, Debug)]
struct Layout {
    convs: [Dense; 3],
    queries: usize,
    blocks: Vec<Block>,
    class: Dense,
    box_mlp: [Dense; 3],
    reference: usize,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.push(name, shape, data)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> usize {
        let n = shape.iter().product();
        self.store.push(name, shape, vec![v; n])
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, bound: f64) -> Dense {
        Dense {
            w: self.uniform(format!("{name}.weight"), vec![fan_in, fan_out], bound),
            b: self.constant(format!("{name}.bias"), vec![fan_out], 0.0),
        }
    }

    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.dense(name, fan_in, fan_out, bound)
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(format!("{name}.gain"), vec![d], 1.0),
            bias: self.constant(format!("{name}.bias"), vec![d], 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.xavier(&format!("{name}.q"), d, d),
            k: self.xavier(&format!("{name}.k"), d, d),
            v: self.xavier(&format!("{name}.v"), d, d),
            o: self.xavier(&format!("{name}.o"), d, d),
        }
    }
}

fn build(spec: &DetectorSpec, rng: &mut ChaCha8Rng) -> (Layout, ParamStore) {
    let mut b = Builder {
        store: ParamStore::default(),
        rng,
    };
    let ch = spec.conv_channels();
    let convs = [0, 1, 2].map(|i| {
        let fan_in = 9 * ch[i];
        b.dense(&format!("backbone.{i}"), fan_in, ch[i + 1], (6.0 / fan_in as f64).sqrt())
    });
    let d = spec.embed_dim;
    let queries = b.uniform("queries".into(), vec![spec.num_queries, d], 3f64.sqrt());
    let blocks = (0..spec.decoder_layers)
        .map(|l| Block {
            self_attn: b.attn(&format!("decoder.{l}.self_attn"), d),
            norm1: b.norm(&format!("decoder.{l}.norm1"), d),
            cross_attn: b.attn(&format!("decoder.{l}.cross_attn"), d),
            norm2: b.norm(&format!("decoder.{l}.norm2"), d),
            ff1: b.xavier(&format!("decoder.{l}.ff1"), d, spec.ffn_dim),
            ff2: b.xavier(&format!("decoder.{l}.ff2"), spec.ffn_dim, d),
            norm3: b.norm(&format!("decoder.{l}.norm3"), d),
        })
        .collect();
    let class = b.xavier("head.class", d, spec.num_categories + 1);
    let box_mlp = [
        b.xavier("head.box.0", d, d),
        b.xavier("head.box.1", d, d),
        b.xavier("head.box.2", d, 4),
    ];
    // Per-query box-centre offsets in logit space, starting at the anchors.
    let refs: Vec<f64> = anchors(spec.num_queries)
        .into_iter()
        .flatten()
        .map(|u| (u / (1.0 - u)).ln())
        .collect();
    let reference = b.store.push("head.reference", vec![spec.num_queries, 2], refs);
    (
        Layout {
            convs,
            queries,
            blocks,
            class,
            box_mlp,
            reference,
        },
        b.store,
    )
}

/// All learnable parameters plus the spec and the phase that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub spec: DetectorSpec,
    pub phase: usize,
    pub params: ParamStore,
}

impl ModelSnapshot {
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Raw head outputs: `N x (C+1)` logits and `N x 4` sigmoid boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutput {
    pub logits: Array2<f64>,
    pub boxes: Array2<f64>,
}

impl RawOutput {
    pub fn to_detector_output(&self) -> Result<DetectorOutput> {
        let queries = self
            .logits
            .rows()
            .into_iter()
            .zip(self.boxes.rows())
            .map(|(l, b)| {
                // Sigmoid outputs are strictly inside (0,1) except under extreme saturation.
                let bbox = BoundingBox::new(
                    b[0].clamp(0.0, 1.0),
                    b[1].clamp(0.0, 1.0),
                    b[2].clamp(1e-12, 1.0),
                    b[3].clamp(1e-12, 1.0),
                )?;
                QueryPrediction::new(l.to_vec(), bbox)
            })
            .collect::<Result<Vec<_>>>()?;
        DetectorOutput::new(queries)
    }
}

struct ConvCache {
    cols: Array2<f64>,
    out: Array2<f64>,
}

struct BlockCache {
    self_attn: ops::AttentionCache,
    norm1: ops::NormCache,
    cross_attn: ops::AttentionCache,
    norm2: ops::NormCache,
    ff_in: Array2<f64>,
    ff_hidden: Array2<f64>,
    norm3: ops::NormCache,
}

/// Activations retained by [`Detector::forward_train`] for the backward pass.
pub struct ForwardCache {
    convs: Vec<ConvCache>,
    blocks: Vec<BlockCache>,
    decoded: Array2<f64>,
    box_hidden: [Array2<f64>; 2],
    boxes: Array2<f64>,
}

/// A trainable detector.
#[derive(Clone, Debug)]
pub struct Detector {
    snapshot: ModelSnapshot,
    layout: Layout,
    pos: Array2<f64>,
    query_pos: Array2<f64>,
}

/// Fixed anchor points, one per query, on a near-square grid.
fn anchors(n: usize) -> Vec<[f64; 2]> {
    let g = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|k| [((k % g) as f64 + 0.5) / g as f64, ((k / g) as f64 + 0.5) / g as f64])
        .collect()
}

impl Detector {
    /// Freshly initialized detector for phase 1.
    pub fn new(spec: DetectorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, params) = build(&spec, &mut rng);
        let pos = ops::positional_encoding(spec.grid(), spec.embed_dim);
        let query_pos = ops::point_encoding(&anchors(spec.num_queries), spec.embed_dim);
        Ok(Self {
            snapshot: ModelSnapshot {
                spec,
                phase: 1,
                params,
            },
            layout,
            pos,
            query_pos,
        })
    }

    pub fn from_snapshot(snapshot: ModelSnapshot) -> Result<Self> {
        snapshot.spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (layout, reference) = build(&snapshot.spec, &mut rng);
        if reference.len() != snapshot.params.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} parameter arrays, snapshot has {}",
                reference.len(),
                snapshot.params.len()
            )));
        }
        for (want, got) in reference.params().iter().zip(snapshot.params.params()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::SpecMismatch(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        let pos = ops::positional_encoding(snapshot.spec.grid(), snapshot.spec.embed_dim);
        let query_pos = ops::point_encoding(&anchors(snapshot.spec.num_queries), snapshot.spec.embed_dim);
        Ok(Self {
            snapshot,
            layout,
            pos,
            query_pos,
        })
    }

    /// Current-phase detector initialized as a copy of the last-phase model.
    pub fn init_from(last_phase: &ModelSnapshot, spec: &DetectorSpec) -> Result<Self> {
        if &last_phase.spec != spec {
            return Err(Error::SpecMismatch(format!(
                "teacher spec {:?} differs from requested {:?}",
                last_phase.spec, spec
            )));
        }
        let mut snapshot = last_phase.clone();
        snapshot.phase = last_phase.phase + 1;
        Self::from_snapshot(snapshot)
    }

    pub fn spec(&self) -> &DetectorSpec {
        &self.snapshot.spec
    }

    pub fn phase(&self) -> usize {
        self.snapshot.phase
    }

    pub fn set_phase(&mut self, phase: usize) {
        self.snapshot.phase = phase;
    }

    pub fn params(&self) -> &ParamStore {
        &self.snapshot.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.snapshot.params
    }

    pub fn snapshot(&self) -> &ModelSnapshot {
        &self.snapshot
    }

    pub fn into_snapshot(self) -> ModelSnapshot {
        self.snapshot
    }

    pub fn checksum(&self) -> String {
        self.snapshot.checksum()
    }

    /// Frozen, inference-only handle on a copy of the current parameters.
    pub fn freeze(&self) -> FrozenDetector {
        FrozenDetector {
            inner: Arc::new(self.clone()),
        }
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let size = self.spec().image_size;
        if image.size() != size {
            return Err(Error::Shape {
                expected: format!("{size}x{size}x3 image"),
                got: format!("{0}x{0}x3", image.size()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, image: &Image) -> Result<DetectorOutput> {
        self.forward_raw(image)?.to_detector_output()
    }

    pub fn forward_raw(&self, image: &Image) -> Result<RawOutput> {
        Ok(self.forward_train(image)?.0)
    }

    /// Forward pass keeping the activations needed by [`Detector::backward`].
    pub fn forward_train(&self, image: &Image) -> Result<(RawOutput, ForwardCache)> {
        self.check_image(image)?;
        let p = &self.snapshot.params;
        let spec = &self.snapshot.spec;
        let ch = spec.conv_channels();

        let mut x = Array2::from_shape_vec((image.size() * image.size(), 3), image.data().to_vec())
            .expect("image shape checked");
        let mut size = image.size();
        let mut convs = Vec::with_capacity(3);
        for (i, conv) in self.layout.convs.iter().enumerate() {
            let cols = ops::im2col(&x, size, ch[i]);
            let mut out = ops::linear(&cols, p.matrix(conv.w), p.vector(conv.b));
            ops::relu(&mut out);
            x = out.clone();
            convs.push(ConvCache { cols, out });
            size /= 2;
        }
        let memory = &x + &self.pos;

        let mut tgt = p.matrix(self.layout.queries).to_owned();
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            // Anchor encodings join every attention input on the query side.
            let tq = &tgt + &self.query_pos;
            let (sa, sa_cache) = ops::attention(&tq, &tq, &attn_weights(p, &blk.self_attn), spec.heads);
            let (x1, norm1) =
                ops::layer_norm(&(&tgt + &sa), p.vector(blk.norm1.gain), p.vector(blk.norm1.bias));
            let (ca, ca_cache) =
                ops::attention(&(&x1 + &self.query_pos), &memory, &attn_weights(p, &blk.cross_attn), spec.heads);
            let (x2, norm2) =
                ops::layer_norm(&(&x1 + &ca), p.vector(blk.norm2.gain), p.vector(blk.norm2.bias));
            let mut hidden = ops::linear(&x2, p.matrix(blk.ff1.w), p.vector(blk.ff1.b));
            ops::relu(&mut hidden);
            let ff = ops::linear(&hidden, p.matrix(blk.ff2.w), p.vector(blk.ff2.b));
            let (x3, norm3) =
                ops::layer_norm(&(&x2 + &ff), p.vector(blk.norm3.gain), p.vector(blk.norm3.bias));
            blocks.push(BlockCache {
                self_attn: sa_cache,
                norm1,
                cross_attn: ca_cache,
                norm2,
                ff_in: x2,
                ff_hidden: hidden,
                norm3,
            });
            tgt = x3;
        }

        let logits = ops::linear(&tgt, p.matrix(self.layout.class.w), p.vector(self.layout.class.b));
        let [b0, b1, b2] = self.layout.box_mlp;
        let mut h0 = ops::linear(&tgt, p.matrix(b0.w), p.vector(b0.b));
        ops::relu(&mut h0);
        let mut h1 = ops::linear(&h0, p.matrix(b1.w), p.vector(b1.b));
        ops::relu(&mut h1);
        let mut pre = ops::linear(&h1, p.matrix(b2.w), p.vector(b2.b));
        pre.slice_mut(s![.., 0..2]).add_assign(&p.matrix(self.layout.reference));
        let boxes = pre.mapv(ops::sigmoid);

        let raw = RawOutput {
            logits,
            boxes: boxes.clone(),
        };
        let cache = ForwardCache {
            convs,
            blocks,
            decoded: tgt,
            box_hidden: [h0, h1],
            boxes,
        };
        Ok((raw, cache))
    }

    /// Parameter gradients given `dL/dlogits` (`N x (C+1)`) and `dL/dboxes` (`N x 4`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        dboxes: &Array2<f64>,
    ) -> Gradients {
        let p = &self.snapshot.params;
        let spec = &self.snapshot.spec;
        let mut g = p.zeros_like();

        let (mut dx, gw, gb) = ops::linear_backward(&cache.decoded, p.matrix(self.layout.class.w), dlogits);
        g.accumulate(self.layout.class.w, gw.iter());
        g.accumulate(self.layout.class.b, gb.iter());

        let [b0, b1, b2] = self.layout.box_mlp;
        let dpre = dboxes * &cache.boxes.mapv(|s| s * (1.0 - s));
        g.accumulate(self.layout.reference, dpre.slice(s![.., 0..2]).iter());
        let (mut dh1, gw, gb) = ops::linear_backward(&cache.box_hidden[1], p.matrix(b2.w), &dpre);
        g.accumulate(b2.w, gw.iter());
        g.accumulate(b2.b, gb.iter());
        ops::relu_backward(&cache.box_hidden[1], &mut dh1);
        let (mut dh0, gw, gb) = ops::linear_backward(&cache.box_hidden[0], p.matrix(b1.w), &dh1);
        g.accumulate(b1.w, gw.iter());
        g.accumulate(b1.b, gb.iter());
        ops::relu_backward(&cache.box_hidden[0], &mut dh0);
        let (dxb, gw, gb) = ops::linear_backward(&cache.decoded, p.matrix(b0.w), &dh0);
        g.accumulate(b0.w, gw.iter());
        g.accumulate(b0.b, gb.iter());
        dx += &dxb;

        let grid = spec.grid();
        let mut dmemory = Array2::<f64>::zeros((grid * grid, spec.embed_dim));
        for (blk, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
            let (dr3, gg, gbias) = ops::layer_norm_backward(&bc.norm3, p.vector(blk.norm3.gain), &dx);
            g.accumulate(blk.norm3.gain, gg.iter());
            g.accumulate(blk.norm3.bias, gbias.iter());
            let (mut dhidden, gw, gb) = ops::linear_backward(&bc.ff_hidden, p.matrix(blk.ff2.w), &dr3);
            g.accumulate(blk.ff2.w, gw.iter());
            g.accumulate(blk.ff2.b, gb.iter());
            ops::relu_backward(&bc.ff_hidden, &mut dhidden);
            let (dx2_ff, gw, gb) = ops::linear_backward(&bc.ff_in, p.matrix(blk.ff1.w), &dhidden);
            g.accumulate(blk.ff1.w, gw.iter());
            g.accumulate(blk.ff1.b, gb.iter());
            let dx2 = dr3 + dx2_ff;

            let (dr2, gg, gbias) = ops::layer_norm_backward(&bc.norm2, p.vector(blk.norm2.gain), &dx2);
            g.accumulate(blk.norm2.gain, gg.iter());
            g.accumulate(blk.norm2.bias, gbias.iter());
            let (dx1_q, dmem, ag) =
                ops::attention_backward(&bc.cross_attn, &attn_weights(p, &blk.cross_attn), &dr2);
            accumulate_attn(&mut g, &blk.cross_attn, &ag);
            dmemory += &dmem;
            let dx1 = dr2 + dx1_q;

            let (dr1, gg, gbias) = ops::layer_norm_backward(&bc.norm1, p.vector(blk.norm1.gain), &dx1);
            g.accumulate(blk.norm1.gain, gg.iter());
            g.accumulate(blk.norm1.bias, gbias.iter());
            let (dq, dkv, ag) =
                ops::attention_backward(&bc.self_attn, &attn_weights(p, &blk.self_attn), &dr1);
            accumulate_attn(&mut g, &blk.self_attn, &ag);
            dx = dr1 + dq + dkv;
        }
        g.accumulate(self.layout.queries, dx.iter());

        let ch = spec.conv_channels();
        let mut dout = dmemory;
        let mut size = spec.image_size >> 2;
        for (i, (conv, cc)) in self.layout.convs.iter().zip(&cache.convs).enumerate().rev() {
            ops::relu_backward(&cc.out, &mut dout);
            let (dcols, gw, gb) = ops::linear_backward(&cc.cols, p.matrix(conv.w), &dout);
            g.accumulate(conv.w, gw.iter());
            g.accumulate(conv.b, gb.iter());
            if i > 0 {
                dout = ops::col2im(&dcols, size, ch[i]);
                size *= 2;
            }
        }
        g
    }
}

fn attn_weights<'a>(p: &'a ParamStore, a: &Attn) -> ops::AttentionWeights<'a> {
    ops::AttentionWeights {
        wq: p.matrix(a.q.w),
        bq: p.vector(a.q.b),
        wk: p.matrix(a.k.w),
        bk: p.vector(a.k.b),
        wv: p.matrix(a.v.w),
        bv: p.vector(a.v.b),
        wo: p.matrix(a.o.w),
        bo: p.vector(a.o.b),
    }
}

fn accumulate_attn(g: &mut Gradients, a: &Attn, ag: &ops::AttentionGrads) {
    for (dense, (w, b)) in [a.q, a.k, a.v, a.o]
        .iter()
        .zip(ag.weights.iter().zip(ag.biases.iter()))
    {
        g.accumulate(dense.w, w.iter());
        g.accumulate(dense.b, b.iter());
    }
}

/// Inference-only view of a detector. Cloning shares the parameters.
#[derive(Clone, Debug)]
pub struct FrozenDetector {
    inner: Arc<Detector>,
}

impl FrozenDetector {
    pub fn from_snapshot(snapshot: ModelSnapshot) -> Result<Self> {
        Ok(Detector::from_snapshot(snapshot)?.freeze())
    }

    pub fn forward(&self, image: &Image) -> Result<DetectorOutput> {
        self.inner.forward(image)
    }

    pub fn spec(&self) -> &DetectorSpec {
        self.inner.spec()
    }

    pub fn snapshot(&self) -> &ModelSnapshot {
        self.inner.snapshot()
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Always rejected: frozen parameters never change.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        Err(Error::FrozenModel)
    }

    /// Always rejected.
    pub fn apply_gradients(&mut self, _grads: &Gradients) -> Result<()> {
        Err(Error::FrozenModel)
    }
}

/// Logit and box gradients for one image, as produced by the loss functions.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGradients {
    pub logits: Array2<f64>,
    pub boxes: Array2<f64>,
}

impl OutputGradients {
    pub fn zeros(num_queries: usize, num_categories: usize) -> Self {
        Self {
            logits: Array2::zeros((num_queries, num_categories + 1)),
            boxes: Array2::zeros((num_queries, 4)),
        }
    }

    pub fn add_scaled(&mut self, k: f64, other: &OutputGradients) {
        self.logits.scaled_add(k, &other.logits);
        self.boxes.scaled_add(k, &other.boxes);
    }
}
