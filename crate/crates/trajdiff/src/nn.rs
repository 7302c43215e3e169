//! Minimal feedforward building blocks with hand-written backpropagation.
//!
//! Everything is `f64` and single-threaded; given a seeded RNG the parameter
//! initialization, forward passes, and updates are fully deterministic.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Fully connected layer `y = x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Gradient of a [`Dense`] layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl Dense {
    /// Xavier-uniform initialization; biases start at zero.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        Self { w, b: Array1::zeros(out_dim) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Batched forward: `x` is `batch x in`, result `batch x out`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Given the layer input and the gradient w.r.t. the output, returns the
    /// parameter gradient and the gradient w.r.t. the input.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (DenseGrad, Array2<f64>) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(ndarray::Axis(0));
        let dx = dy.dot(&self.w);
        (DenseGrad { dw, db }, dx)
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad { dw: Array2::zeros(self.w.dim()), db: Array1::zeros(self.b.len()) }
    }
}

/// Feedforward net with tanh between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs captured during a cached forward pass.
pub struct MlpCache {
    /// `inputs[i]` is the input to layer `i`; for `i > 0` it is also the tanh
    /// output of layer `i - 1`.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(dims: &[usize], rng: &mut ChaCha12Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|p| Dense::new(p[0], p[1], rng)).collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.layers.len();
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..n] {
            h.mapv_inplace(f64::tanh);
            h = layer.forward(&h);
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = layer.forward(&h);
            if i + 1 < self.layers.len() {
                h.mapv_inplace(f64::tanh);
            }
        }
        (h, MlpCache { inputs })
    }

    /// Backpropagates `dy` (gradient w.r.t. the final linear output) through
    /// the cached pass; returns per-layer gradients and the input gradient.
    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>) -> (Vec<DenseGrad>, Array2<f64>) {
        let n = self.layers.len();
        let mut grads: Vec<Option<DenseGrad>> = (0..n).map(|_| None).collect();
        let mut dcur = dy.clone();
        for i in (0..n).rev() {
            let (g, mut dx) = self.layers[i].backward(&cache.inputs[i], &dcur);
            grads[i] = Some(g);
            if i > 0 {
                // cache.inputs[i] is tanh(z_{i-1}); d tanh = 1 - tanh^2.
                dx.zip_mut_with(&cache.inputs[i], |d, &a| *d *= 1.0 - a * a);
            }
            dcur = dx;
        }
        (grads.into_iter().map(Option::unwrap).collect(), dcur)
    }

    pub fn zero_grads(&self) -> Vec<DenseGrad> {
        self.layers.iter().map(Dense::zero_grad).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }
}

/// Learned lookup table; row 0 is conventionally the null token.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Array2<f64>,
}

impl Embedding {
    pub fn new(rows: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let table = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-bound..bound));
        Self { table }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn rows(&self) -> usize {
        self.table.nrows()
    }
}

/// Sinusoidal position features of a normalized position `u` (typically
/// `t / T`): interleaved `sin`/`cos` at octave-spaced frequencies.
pub fn sinusoidal_features(u: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "feature dimension must be even");
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = std::f64::consts::TAU * (1u64 << k) as f64;
        out.push((omega * u).sin());
        out.push((omega * u).cos());
    }
    out
}

/// Gradient-descent flavor used by the training loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Adaptive moment estimation (the default).
    Adam,
    /// Plain stochastic gradient descent.
    Sgd,
}

/// Optimizer over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update. `params` and `grads` must be aligned slices of the
    /// same tensors in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                }
                self.step += 1;
                let bc1 = 1.0 - self.beta1.powi(self.step as i32);
                let bc2 = 1.0 - self.beta2.powi(self.step as i32);
                for ((p, g), (m, v)) in
                    params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..g.len() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
