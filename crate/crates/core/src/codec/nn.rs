//! Minimal dense-network toolkit with explicit backpropagation.
//!
//! Rows are samples. Every layer keeps what it needs for the backward pass in
//! an [`MlpCache`]; gradients come back in the same shape as the parameters.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

const LEAK: f64 = 0.2;

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::LeakyRelu => x.mapv_inplace(|v| if v > 0.0 { v } else { LEAK * v }),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Sigmoid => x.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` in place by the derivative, given pre- and post-activation values.
    fn backprop(self, grad: &mut Array2<f64>, pre: &Array2<f64>, post: &Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::LeakyRelu => ndarray::Zip::from(grad).and(pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g *= LEAK
                }
            }),
            Activation::Tanh => ndarray::Zip::from(grad).and(post).for_each(|g, &y| *g *= 1.0 - y * y),
            Activation::Sigmoid => ndarray::Zip::from(grad).and(post).for_each(|g, &y| *g *= y * (1.0 - y)),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `(inputs, outputs)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-limit..limit));
        Self {
            w,
            b: Array1::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Stack of dense layers. With `cond_dim > 0` the conditioning block is
/// concatenated to the input of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
    pub cond_dim: usize,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("mlp has at least one layer")
    }
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes (excluding conditioning).
    pub fn new(widths: &[usize], hidden: Activation, output: Activation, cond_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut activations = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Dense::glorot(pair[0] + cond_dim, pair[1], rng));
            activations.push(if i + 2 == widths.len() { output } else { hidden });
        }
        Self {
            layers,
            activations,
            cond_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs() - self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    fn with_cond(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Array2<f64> {
        match cond {
            Some(c) if self.cond_dim > 0 => concatenate(Axis(1), &[x, c]).expect("row counts agree"),
            _ => x.to_owned(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> MlpCache {
        debug_assert_eq!(self.cond_dim > 0, cond.is_some());
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
        };
        let mut current = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let input = self.with_cond(current.view(), cond);
            let pre = input.dot(&layer.w) + &layer.b;
            let mut post = pre.clone();
            act.apply(&mut post);
            cache.inputs.push(input);
            cache.pre.push(pre);
            current = post.clone();
            cache.post.push(post);
        }
        cache
    }

    pub fn predict(&self, x: ArrayView2<f64>, cond: Option<ArrayView2<f64>>) -> Array2<f64> {
        let mut current = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let input = self.with_cond(current.view(), cond);
            let mut out = input.dot(&layer.w) + &layer.b;
            act.apply(&mut out);
            current = out;
        }
        current
    }

    /// Backward pass from `grad_out` (gradient w.r.t. the post-activation
    /// output). Returns parameter gradients and the gradient w.r.t. `x`.
    pub fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>, want_input_grad: bool) -> (Vec<Dense>, Option<Array2<f64>>) {
        let n = self.layers.len();
        let mut grads: Vec<Dense> = Vec::with_capacity(n);
        let mut grad = grad_out;
        let mut input_grad = None;
        for i in (0..n).rev() {
            self.activations[i].backprop(&mut grad, &cache.pre[i], &cache.post[i]);
            let dw = cache.inputs[i].t().dot(&grad);
            let db = grad.sum_axis(Axis(0));
            grads.push(Dense { w: dw, b: db });
            if i > 0 || want_input_grad {
                let full = grad.dot(&self.layers[i].w.t());
                let plain = self.layers[i].inputs() - self.cond_dim;
                grad = full.slice(s![.., ..plain]).to_owned();
                if i == 0 {
                    input_grad = Some(grad.clone());
                }
            }
        }
        grads.reverse();
        (grads, input_grad)
    }

    /// Parameter tensors in serialization order: per layer, weights (row-major) then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.w.as_slice().expect("weights are contiguous"),
                l.b.as_slice().expect("bias is contiguous"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.w.as_slice_mut().expect("weights are contiguous"),
                l.b.as_slice_mut().expect("bias is contiguous"),
            ]
        })
    }
}

/// Flattens gradients the same way [`Mlp::tensors`] flattens parameters.
pub fn flatten(grads: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend(g.w.iter());
        out.extend(g.b.iter());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moments mirroring one network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Dense>,
    pub v: Vec<Dense>,
    pub t: u64,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self {
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &[Dense], p: &AdamParams) {
        self.t += 1;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        let step_size = p.lr * bc2.sqrt() / bc1;
        let eps = p.eps * bc2.sqrt();
        for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            update(&mut layer.w, &g.w, &mut m.w, &mut v.w, p, step_size, eps);
            update(&mut layer.b, &g.b, &mut m.b, &mut v.b, p, step_size, eps);
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.m.iter().chain(&self.v).flat_map(|l| {
            [
                l.w.as_slice().expect("contiguous"),
                l.b.as_slice().expect("contiguous"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.m.iter_mut().chain(self.v.iter_mut()).flat_map(|l| {
            [
                l.w.as_slice_mut().expect("contiguous"),
                l.b.as_slice_mut().expect("contiguous"),
            ]
        })
    }
}

fn update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    p: &AdamParams,
    step_size: f64,
    eps: f64,
) {
    ndarray::Zip::from(param).and(grad).and(m).and(v).for_each(|w, &g, m, v| {
        *m = p.beta1 * *m + (1.0 - p.beta1) * g;
        *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
        *w -= step_size * *m / (v.sqrt() + eps);
    });
}
