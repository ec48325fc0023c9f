//! Minimal dense layers with hand-derived gradients. Weights are stored as
//! f32 (the exchange format); all arithmetic runs in f64.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation value.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + Float::exp(-x))
    } else {
        let e = Float::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        Float::exp(x)
    } else {
        Float::ln_1p(Float::exp(x))
    }
}

/// Dense layer `y = W x + b`, weights row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Vec<f32>,
    pub b: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
}

impl Linear {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Linear { w: vec![0.0; rows * cols], b: vec![0.0; rows], rows, cols }
    }

    /// Seeded He-uniform initialization, biases zero.
    pub fn he_uniform(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Self {
        let limit = (6.0 / cols as f64).sqrt();
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            w.push(rng.random_range(-limit..limit) as f32);
        }
        Linear { w, b: vec![0.0; rows], rows, cols }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `out = W x + b`.
    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r] as f64;
            for (w, v) in row.iter().zip(x.iter()) {
                acc += *w as f64 * *v;
            }
            *o = acc;
        }
    }

    /// Partial product over a column range: `out += W[:, c0..c0+len] x_part`,
    /// optionally seeding `out` with the bias.
    pub fn forward_cols(&self, x_part: &[f64], c0: usize, out: &mut [f64], with_bias: bool) {
        debug_assert!(c0 + x_part.len() <= self.cols);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * self.cols + c0..r * self.cols + c0 + x_part.len()];
            let mut acc = if with_bias { self.b[r] as f64 } else { 0.0 };
            for (w, v) in row.iter().zip(x_part.iter()) {
                acc += *w as f64 * *v;
            }
            *o += acc;
        }
    }

    /// `dx_part += W[:, c0..]^T dy` over a column range.
    pub fn backward_input_cols(&self, dy: &[f64], c0: usize, dx_part: &mut [f64]) {
        for (r, g) in dy.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &self.w[r * self.cols + c0..r * self.cols + c0 + dx_part.len()];
            for (w, d) in row.iter().zip(dx_part.iter_mut()) {
                *d += *w as f64 * *g;
            }
        }
    }

    /// Accumulates parameter gradients over a column range of the input.
    pub fn backward_params_cols(&self, dy: &[f64], x_part: &[f64], c0: usize, grad: &mut LinearGrad, with_bias: bool) {
        for (r, g) in dy.iter().enumerate() {
            if with_bias {
                grad.b[r] += *g;
            }
            if *g == 0.0 {
                continue;
            }
            let gw = &mut grad.w[r * self.cols + c0..r * self.cols + c0 + x_part.len()];
            for (gd, v) in gw.iter_mut().zip(x_part.iter()) {
                *gd += *g * *v;
            }
        }
    }
}

/// f64 gradient accumulator congruent with a `Linear`.
#[derive(Clone, Debug)]
pub struct LinearGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearGrad {
    pub fn zeros_like(layer: &Linear) -> Self {
        LinearGrad { w: vec![0.0; layer.w.len()], b: vec![0.0; layer.b.len()] }
    }

    pub fn clear(&mut self) {
        self.w.iter_mut().for_each(|v| *v = 0.0);
        self.b.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.w.iter_mut().for_each(|v| *v *= s);
        self.b.iter_mut().for_each(|v| *v *= s);
    }
}

/// Multi-layer perceptron: LeakyReLU between layers, `out_act` at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub out_act: Activation,
}

/// Forward cache of one MLP application.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// Layer inputs, inputs[0] being the network input.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs per layer.
    pub pre: Vec<Vec<f64>>,
    /// Activated final output.
    pub out: Vec<f64>,
}

impl Mlp {
    pub fn new(dims: &[usize], out_act: Activation, rng: &mut ChaCha12Rng) -> Self {
        let mut layers = Vec::new();
        for win in dims.windows(2) {
            layers.push(Linear::he_uniform(win[1], win[0], rng));
        }
        Mlp { layers, out_act }
    }

    pub fn zeros(dims: &[usize], out_act: Activation) -> Self {
        let mut layers = Vec::new();
        for win in dims.windows(2) {
            layers.push(Linear::zeros(win[1], win[0]));
        }
        Mlp { layers, out_act }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn forward(&self, x: &[f64], cache: &mut MlpCache) {
        let n = self.layers.len();
        cache.inputs.resize(n, Vec::new());
        cache.pre.resize(n, Vec::new());
        cache.inputs[0].clear();
        cache.inputs[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (head, tail) = cache.inputs.split_at_mut(i + 1);
            cache.pre[i].resize(layer.rows, 0.0);
            layer.forward(&head[i], &mut cache.pre[i]);
            if i + 1 < n {
                let next = &mut tail[0];
                next.resize(layer.rows, 0.0);
                for (o, p) in next.iter_mut().zip(cache.pre[i].iter()) {
                    *o = Activation::LeakyRelu.apply(*p);
                }
            }
        }
        cache.out.resize(self.out_dim(), 0.0);
        for (o, p) in cache.out.iter_mut().zip(cache.pre[n - 1].iter()) {
            *o = self.out_act.apply(*p);
        }
    }

    /// Backpropagates `dl_dout` (gradient w.r.t. the activated output).
    /// Parameter gradients accumulate into `grads` when provided; the
    /// gradient w.r.t. the network input accumulates into `dl_dx`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dl_dout: &[f64],
        mut grads: Option<&mut MlpGrad>,
        mut dl_dx: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        let n = self.layers.len();
        // delta at the last pre-activation
        scratch.clear();
        scratch.extend(
            dl_dout
                .iter()
                .zip(cache.pre[n - 1].iter())
                .map(|(g, p)| g * self.out_act.derivative(*p)),
        );
        let mut delta = core::mem::take(scratch);
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if let Some(g) = grads.as_deref_mut() {
                layer.backward_params_cols(&delta, &cache.inputs[i], 0, &mut g.layers[i], true);
            }
            if i > 0 {
                let mut dx = vec![0.0; layer.cols];
                layer.backward_input_cols(&delta, 0, &mut dx);
                for (d, p) in dx.iter_mut().zip(cache.pre[i - 1].iter()) {
                    *d *= Activation::LeakyRelu.derivative(*p);
                }
                delta = dx;
            } else if let Some(dst) = dl_dx.take() {
                let mut dx = vec![0.0; layer.cols];
                layer.backward_input_cols(&delta, 0, &mut dx);
                for (d, s) in dst.iter_mut().zip(dx.iter()) {
                    *d += *s;
                }
            }
        }
        *scratch = delta;
    }
}

/// Gradient accumulator congruent with an `Mlp`.
#[derive(Clone, Debug)]
pub struct MlpGrad {
    pub layers: Vec<LinearGrad>,
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrad { layers: mlp.layers.iter().map(LinearGrad::zeros_like).collect() }
    }

    pub fn clear(&mut self) {
        self.layers.iter_mut().for_each(LinearGrad::clear);
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
    }
}
