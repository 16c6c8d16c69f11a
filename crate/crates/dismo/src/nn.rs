//! Parameter management, layers, and the Adam optimizer.
//!
//! A [`ParamSet`] owns named persistent arrays. Every training step binds
//! them into a fresh [`Graph`] as gradient-tracked leaves, and the
//! optimizer consumes the gradients fetched back through the binding.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DismoError, Result};
use crate::graph::{Gradients, Graph, Tensor};

/// Serializable dense array: shape plus row-major data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl From<&ArrayD<f32>> for TensorData {
    fn from(a: &ArrayD<f32>) -> Self {
        TensorData {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }
}

impl TensorData {
    pub fn into_array(self) -> Result<ArrayD<f32>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data)
            .map_err(|e| DismoError::Shape(format!("stored tensor: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named persistent parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    data: Vec<ArrayD<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, data: ArrayD<f32>) -> ParamId {
        self.names.push(name.into());
        self.data.push(data);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f32> {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f32> {
        &mut self.data[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.data.iter())
    }

    /// Register every parameter as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let tensors = self
            .data
            .iter()
            .map(|d| g.leaf(d.clone(), true))
            .collect();
        Binding { tensors }
    }

    /// Bind every parameter as a gradient-free constant (frozen network).
    pub fn bind_const(&self, g: &mut Graph) -> Binding {
        let tensors = self.data.iter().map(|d| g.constant(d.clone())).collect();
        Binding { tensors }
    }

    pub fn to_stored(&self) -> Vec<(String, TensorData)> {
        self.names
            .iter()
            .cloned()
            .zip(self.data.iter().map(TensorData::from))
            .collect()
    }

    pub fn from_stored(stored: Vec<(String, TensorData)>) -> Result<Self> {
        let mut set = ParamSet::new();
        for (name, td) in stored {
            set.add(name, td.into_array()?);
        }
        Ok(set)
    }
}

/// Per-graph leaf handles for a [`ParamSet`].
pub struct Binding {
    tensors: Vec<Tensor>,
}

impl Binding {
    pub fn tensor(&self, id: ParamId) -> Tensor {
        self.tensors[id.0]
    }
}

/// Kaiming-style normal initialization for leaky-rectifier layers.
pub fn init_he(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| sample_standard_normal(rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("init shape")
}

pub fn init_gaussian(rng: &mut ChaCha20Rng, shape: &[usize], std: f32) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| sample_standard_normal(rng) * std).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("init shape")
}

pub fn zeros(shape: &[usize]) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(shape))
}

/// Box-Muller draw; kept local so sampling is identical across platforms.
pub fn sample_standard_normal(rng: &mut ChaCha20Rng) -> f32 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let r = (-2.0 * u1.ln()).sqrt();
        return (r * (2.0 * std::f64::consts::PI * u2).cos()) as f32;
    }
}

/// Fully connected layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = params.add(format!("{name}.w"), init_he(rng, &[d_in, d_out], d_in));
        let b = params.add(format!("{name}.b"), zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Result<Tensor> {
        let y = g.matmul(x, bind.tensor(self.w))?;
        g.add_row(y, bind.tensor(self.b))
    }
}

/// 3x3 convolution with same padding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let fan_in = c_in * 9;
        let w = params.add(
            format!("{name}.w"),
            init_he(rng, &[c_out, c_in, 3, 3], fan_in),
        );
        let b = params.add(format!("{name}.b"), zeros(&[c_out]));
        Conv2d { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Tensor) -> Result<Tensor> {
        g.conv2d(x, bind.tensor(self.w), bind.tensor(self.b), self.stride)
    }
}

/// Adam over a whole [`ParamSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<TensorData>,
    v: Vec<TensorData>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f32) -> Self {
        let m = params
            .iter()
            .map(|(_, d)| TensorData::from(&ArrayD::<f32>::zeros(d.raw_dim())))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update using gradients fetched through `bind`.
    pub fn step(&mut self, params: &mut ParamSet, bind: &Binding, grads: &mut Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let id = ParamId(i);
            let Some(grad) = grads.take(bind.tensor(id)) else {
                continue;
            };
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let p = params.get_mut(id).as_slice_mut().expect("contiguous param");
            let grad = grad.as_standard_layout();
            let gslice = grad.as_slice().expect("contiguous grad");
            for j in 0..p.len() {
                let g = gslice[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Row-sparse Adam for embedding tables: rows never looked up are untouched
/// bit-for-bit, with per-row step counts for bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowAdam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    row_steps: Vec<u64>,
    m: TensorData,
    v: TensorData,
}

impl RowAdam {
    pub fn new(rows: usize, cols: usize, lr: f32) -> Self {
        let zero = TensorData {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        };
        RowAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            row_steps: vec![0; rows],
            m: zero.clone(),
            v: zero,
        }
    }

    /// Update only `rows` of `table` from a full-table gradient.
    pub fn step_rows(&mut self, table: &mut Array2<f32>, grad: &Array2<f32>, rows: &[usize]) {
        let cols = table.ncols();
        let mut seen = rows.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for &r in &seen {
            self.row_steps[r] += 1;
            let t = self.row_steps[r];
            let bc1 = 1.0 - self.beta1.powi(t as i32);
            let bc2 = 1.0 - self.beta2.powi(t as i32);
            for c in 0..cols {
                let idx = r * cols + c;
                let g = grad[[r, c]];
                let m = &mut self.m.data[idx];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v.data[idx];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                table[[r, c]] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mean of |a - b| element-wise; handy outside any graph.
pub fn mean_abs_diff(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
    let n = a.len() as f32;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f32>()
        / n
}

pub fn mean_sq_diff(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
    let n = a.len() as f32;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f32>()
        / n
}

#[allow(unused)]
pub fn array1(v: &[f32]) -> Array1<f32> {
    Array1::from_vec(v.to_vec())
}
