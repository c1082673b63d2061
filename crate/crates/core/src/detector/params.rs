use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A named, flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered parameter collection. Order is fixed by the architecture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.params.len() - 1
    }

    pub fn from_params(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn data(&self, id: usize) -> &[f64] {
        &self.params[id].data
    }

    pub fn data_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.params[id].data
    }

    pub fn matrix(&self, id: usize) -> ArrayView2<'_, f64> {
        let p = &self.params[id];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.data).expect("2-d parameter")
    }

    pub fn vector(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[id].data[..])
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            data: self.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in &p.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Flat scalar access, in storage order. Used by finite-difference checks.
    pub fn scalar(&self, flat: usize) -> f64 {
        let (id, off) = self.locate(flat);
        self.params[id].data[off]
    }

    pub fn set_scalar(&mut self, flat: usize, v: f64) {
        let (id, off) = self.locate(flat);
        self.params[id].data[off] = v;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (id, p) in self.params.iter().enumerate() {
            if flat < p.data.len() {
                return (id, flat);
            }
            flat -= p.data.len();
        }
        panic!("flat parameter index out of range");
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> &[f64] {
        &self.data[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.data[id]
    }

    /// Adds `values` elementwise into parameter `id`'s gradient.
    pub fn accumulate<'a>(&mut self, id: usize, values: impl IntoIterator<Item = &'a f64>) {
        for (acc, v) in self.data[id].iter_mut().zip(values) {
            *acc += v;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.data.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}
