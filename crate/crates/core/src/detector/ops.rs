//! Forward/backward kernels for the detector's layers.
//!
//! Activations are row-major `tokens x features`; weights are `in x out` so a
//! dense layer is `y = x·W + b`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

pub fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    (dy.dot(&w.t()), x.t().dot(dy), dy.sum_axis(Axis(0)))
}

pub fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `dy` where the forward activation was clipped.
pub fn relu_backward(activated: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy).and(activated).for_each(|d, &a| {
        if a <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 3x3, stride 2, padding 1 patch extraction. Input is `(size*size) x cin`.
pub fn im2col(input: &Array2<f64>, size: usize, cin: usize) -> Array2<f64> {
    let out = size / 2;
    let mut cols = Array2::<f64>::zeros((out * out, 9 * cin));
    for oy in 0..out {
        for ox in 0..out {
            let mut row = cols.row_mut(oy * out + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= size as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= size as isize {
                        continue;
                    }
                    let src = input.row(iy as usize * size + ix as usize);
                    let base = (ky * 3 + kx) * cin;
                    row.slice_mut(s![base..base + cin]).assign(&src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(dcols: &Array2<f64>, size: usize, cin: usize) -> Array2<f64> {
    let out = size / 2;
    let mut dx = Array2::<f64>::zeros((size * size, cin));
    for oy in 0..out {
        for ox in 0..out {
            let row = dcols.row(oy * out + ox);
            for ky in 0..3 {
                let iy = (2 * oy + ky) as isize - 1;
                if iy < 0 || iy >= size as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (2 * ox + kx) as isize - 1;
                    if ix < 0 || ix >= size as isize {
                        continue;
                    }
                    let base = (ky * 3 + kx) * cin;
                    let mut dst = dx.row_mut(iy as usize * size + ix as usize);
                    dst += &row.slice(s![base..base + cin]);
                }
            }
        }
    }
    dx
}

const LN_EPS: f64 = 1e-5;

pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::<f64>::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &NormCache,
    gain: ArrayView1<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * &gain;
    let mut dx = Array2::<f64>::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        let scale = cache.inv_std[r] / d;
        let mut out = dx.row_mut(r);
        for k in 0..dh.len() {
            out[k] = scale * (d * dh[k] - sum_dh - xh[k] * sum_dh_xh);
        }
    }
    (dx, dgain, dbias)
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub struct AttentionWeights<'a> {
    pub wq: ArrayView2<'a, f64>,
    pub bq: ArrayView1<'a, f64>,
    pub wk: ArrayView2<'a, f64>,
    pub bk: ArrayView1<'a, f64>,
    pub wv: ArrayView2<'a, f64>,
    pub bv: ArrayView1<'a, f64>,
    pub wo: ArrayView2<'a, f64>,
    pub bo: ArrayView1<'a, f64>,
}

/// Parameter gradients of one attention block, in `q, k, v, o` order.
pub struct AttentionGrads {
    pub weights: [Array2<f64>; 4],
    pub biases: [Array1<f64>; 4],
}

pub struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Multi-head scaled dot-product attention of `xq` over `xkv`.
pub fn attention(
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    w: &AttentionWeights<'_>,
    heads: usize,
) -> (Array2<f64>, AttentionCache) {
    let q = linear(xq, w.wq, w.bq);
    let k = linear(xkv, w.wk, w.bk);
    let v = linear(xkv, w.wv, w.bv);
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Array2::<f64>::zeros((xq.nrows(), d));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut a = qh.dot(&kh.t());
        a *= scale;
        softmax_rows(&mut a);
        concat.slice_mut(cols).assign(&a.dot(&vh));
        attn.push(a);
    }
    let out = linear(&concat, w.wo, w.bo);
    (
        out,
        AttentionCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            attn,
            concat,
        },
    )
}

/// Returns `(d xq, d xkv, parameter grads)`.
pub fn attention_backward(
    cache: &AttentionCache,
    w: &AttentionWeights<'_>,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, AttentionGrads) {
    let heads = cache.attn.len();
    let d = cache.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (dconcat, gwo, gbo) = linear_backward(&cache.concat, w.wo, dout);
    let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
    for (h, a) in cache.attn.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = dconcat.slice(cols);
        let vh = cache.v.slice(cols);
        let da = doh.dot(&vh.t());
        dv.slice_mut(cols).assign(&a.t().dot(&doh));
        // Softmax Jacobian per row: dS = A ⊙ (dA − Σ_j dA·A).
        let mut ds = &da * a;
        let row_dot = ds.sum_axis(Axis(1));
        for (mut row, (&rd, arow)) in ds.rows_mut().into_iter().zip(row_dot.iter().zip(a.rows())) {
            row.scaled_add(-rd, &arow);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let (dxq, gwq, gbq) = linear_backward(&cache.xq, w.wq, &dq);
    let (mut dxkv, gwk, gbk) = linear_backward(&cache.xkv, w.wk, &dk);
    let (dxv, gwv, gbv) = linear_backward(&cache.xkv, w.wv, &dv);
    dxkv += &dxv;
    let grads = AttentionGrads {
        weights: [gwq, gwk, gwv, gwo],
        biases: [gbq, gbk, gbv, gbo],
    };
    (dxq, dxkv, grads)
}

/// Fixed 2-D sinusoidal encodings for a `grid x grid` token map.
pub fn positional_encoding(grid: usize, dim: usize) -> Array2<f64> {
    let centers: Vec<[f64; 2]> = (0..grid * grid)
        .map(|k| [((k % grid) as f64 + 0.5) / grid as f64, ((k / grid) as f64 + 0.5) / grid as f64])
        .collect();
    point_encoding(&centers, dim)
}

/// Sinusoidal encoding of `(x, y)` points in the unit square: sin/cos of x,
/// then sin/cos of y, `dim / 4` frequencies each.
pub fn point_encoding(points: &[[f64; 2]], dim: usize) -> Array2<f64> {
    let quarter = dim / 4;
    let mut pe = Array2::<f64>::zeros((points.len(), dim));
    let t = 2.0 * std::f64::consts::PI;
    for (k, &[px, py]) in points.iter().enumerate() {
        let mut row = pe.row_mut(k);
        for i in 0..quarter {
            let freq = 1.0 / 100f64.powf(i as f64 / quarter.max(1) as f64);
            row[i] = (t * px * freq).sin();
            row[quarter + i] = (t * px * freq).cos();
            row[2 * quarter + i] = (t * py * freq).sin();
            row[3 * quarter + i] = (t * py * freq).cos();
        }
    }
    pe
}
