//! Minimal dense networks with exact manual backpropagation.
//!
//! Fixed-depth (at most four layers) fully-connected nets in 64-bit floats,
//! a bias-corrected adaptive-moment optimizer, and a central-difference
//! gradient checker. Networks are value-like: clone freely, mutate only
//! through an optimizer.

use crate::math;
use crate::rng::Stream;
use alloc::vec;
use alloc::vec::Vec;

/// Hard cap on depth; keeps backprop hand-verifiable.
pub const MAX_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    ReLU,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => math::tanh(z),
        }
    }

    /// Derivative as a function of the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = math::tanh(z);
                1.0 - t * t
            }
        }
    }
}

/// One affine layer with an elementwise activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_out][fan_in]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A fully-connected network.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Seeded init: weights and biases uniform on `±1/sqrt(fan_in)`,
    /// drawn layer by layer (weights first, then bias).
    pub fn new(layer_sizes: &[usize], activations: &[Activation], stream: &mut Stream) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        assert_eq!(activations.len(), layer_sizes.len() - 1);
        assert!(layer_sizes.len() - 1 <= MAX_LAYERS, "at most {MAX_LAYERS} layers");
        assert!(layer_sizes[1..].iter().all(|&n| n > 0), "hidden/output sizes must be positive");
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for l in 0..layer_sizes.len() - 1 {
            let fan_in = layer_sizes[l];
            let fan_out = layer_sizes[l + 1];
            // A zero-width input (valid for optional feature blocks) still
            // needs a usable bias scale.
            let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
            let weights = (0..fan_in * fan_out).map(|_| stream.uniform_in(-bound, bound)).collect();
            let bias = (0..fan_out).map(|_| stream.uniform_in(-bound, bound)).collect();
            layers.push(Layer { fan_in, fan_out, weights, bias, activation: activations[l] });
        }
        DenseNet { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Total parameter count: `sum (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| (l.fan_in + 1) * l.fan_out).sum()
    }

    /// Visits every parameter slice in a fixed order (per layer: weights,
    /// then bias). Optimizers and checkpointing rely on this order.
    pub fn visit_params(&self, f: &mut impl FnMut(&[f64])) {
        for layer in &self.layers {
            f(&layer.weights);
            f(&layer.bias);
        }
    }

    /// Mutable counterpart of [`Self::visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            f(&mut layer.weights);
            f(&mut layer.bias);
        }
    }

    /// Single-input forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_size(), "input dimension mismatch");
        let mut current = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.fan_out];
            for (o, out) in next.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut z = layer.bias[o];
                for (w, xi) in row.iter().zip(&current) {
                    z += w * xi;
                }
                *out = layer.activation.apply(z);
            }
            current = next;
        }
        current
    }

    /// Batched forward pass; `xs` is `[batch * input_size]` row-major.
    /// The cache keeps the activations and pre-activations needed by
    /// [`Self::backward_batch`].
    pub fn forward_batch(&self, xs: &[f64], batch: usize, cache: &mut BatchCache) {
        assert_eq!(xs.len(), batch * self.input_size());
        cache.batch = batch;
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.pre.resize(self.layers.len(), Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(xs);
        for (l, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(l + 1);
            let input = &done[l];
            let pre = &mut cache.pre[l];
            pre.clear();
            pre.resize(batch * layer.fan_out, 0.0);
            let out_act = &mut rest[0];
            out_act.clear();
            out_act.resize(batch * layer.fan_out, 0.0);
            for b in 0..batch {
                let x = &input[b * layer.fan_in..(b + 1) * layer.fan_in];
                let z_row = &mut pre[b * layer.fan_out..(b + 1) * layer.fan_out];
                for o in 0..layer.fan_out {
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut z = layer.bias[o];
                    for i in 0..layer.fan_in {
                        z += row[i] * x[i];
                    }
                    z_row[o] = z;
                }
                let a_row = &mut out_act[b * layer.fan_out..(b + 1) * layer.fan_out];
                for o in 0..layer.fan_out {
                    a_row[o] = layer.activation.apply(z_row[o]);
                }
            }
        }
    }

    /// Batched reverse pass. `upstream` is `dLoss/d output`, shaped
    /// `[batch * output_size]`. Parameter gradients are *summed* over the
    /// batch into `grads`; per-input gradients are written to
    /// `input_grads` when provided (`[batch * input_size]`).
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: &[f64],
        grads: &mut Grads,
        mut input_grads: Option<&mut [f64]>,
    ) {
        let batch = cache.batch;
        assert_eq!(upstream.len(), batch * self.output_size());
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &cache.pre[l];
            let input = &cache.acts[l];
            let g = &mut grads.layers[l];
            // delta <- upstream ⊙ act'(z)
            for (d, &z) in delta.iter_mut().zip(pre.iter()) {
                *d *= layer.activation.derivative(z);
            }
            for b in 0..batch {
                let d_row = &delta[b * layer.fan_out..(b + 1) * layer.fan_out];
                let x = &input[b * layer.fan_in..(b + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = d_row[o];
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let w_row = &mut g.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for i in 0..layer.fan_in {
                        w_row[i] += d * x[i];
                    }
                }
            }
            let need_input = l > 0 || input_grads.is_some();
            if !need_input {
                break;
            }
            let mut next_delta = vec![0.0; batch * layer.fan_in];
            for b in 0..batch {
                let d_row = &delta[b * layer.fan_out..(b + 1) * layer.fan_out];
                let x_grad = &mut next_delta[b * layer.fan_in..(b + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = d_row[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for i in 0..layer.fan_in {
                        x_grad[i] += d * row[i];
                    }
                }
            }
            if l == 0 {
                if let Some(ig) = input_grads.as_mut() {
                    ig.copy_from_slice(&next_delta);
                }
            }
            delta = next_delta;
        }
    }

    /// Convenience single-input forward + backward; returns the gradient
    /// with respect to the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut cache = BatchCache::default();
        self.forward_batch(x, 1, &mut cache);
        let mut input_grad = vec![0.0; self.input_size()];
        self.backward_batch(&cache, upstream, grads, Some(&mut input_grad));
        input_grad
    }
}

/// Activation cache filled by [`DenseNet::forward_batch`].
#[derive(Clone, Debug, Default)]
pub struct BatchCache {
    pub acts: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub batch: usize,
}

impl BatchCache {
    /// Output activations of the last layer.
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Per-layer gradient accumulators matching a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g = 0.0);
            l.bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|g| *g *= c);
            l.bias.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    /// Visits gradient slices in the same fixed order as
    /// [`DenseNet::visit_params`].
    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for l in &self.layers {
            f(&l.weights);
            f(&l.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|g| g.is_finite()))
    }
}

/// Bias-corrected adaptive-moment optimizer state over a flat parameter
/// vector of known length.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    /// Defaults: beta1 = 0.9, beta2 = 0.999, epsilon = 1e-5.
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    /// One update over a flat parameter slice.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - math::powf(self.beta1, t as f64);
        let c2 = 1.0 - math::powf(self.beta2, t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            let m = &mut self.first_moment[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            let v = &mut self.second_moment[i];
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[i] -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.epsilon);
        }
    }

    /// One update over a whole network, pairing parameter and gradient
    /// slices in visit order.
    pub fn apply_net(&mut self, net: &mut DenseNet, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - math::powf(self.beta1, t as f64);
        let c2 = 1.0 - math::powf(self.beta2, t as f64);
        let mut offset = 0;
        for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
            for (slice, gslice) in [(&mut layer.weights, &g.weights), (&mut layer.bias, &g.bias)] {
                for (j, p) in slice.iter_mut().enumerate() {
                    let g = gslice[j];
                    let m = &mut self.first_moment[offset + j];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    let v = &mut self.second_moment[offset + j];
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.learning_rate * m_hat / (math::sqrt(v_hat) + self.epsilon);
                }
                offset += slice.len();
            }
        }
        assert_eq!(offset, self.first_moment.len());
    }
}

/// Central-difference check of the analytic parameter gradients for an
/// arbitrary scalar loss of the network outputs.
///
/// `loss` maps outputs to the scalar; `dloss` returns its gradient with
/// respect to the outputs. Inputs are drawn uniformly on [-1, 1]; when
/// `kink_exclusion > 0` inputs are resampled until every pre-activation is
/// at least that far from a ReLU kink. Returns the worst relative error
/// over all parameters and trials.
pub fn grad_check<L, D>(
    net: &DenseNet,
    stream: &mut Stream,
    loss: L,
    dloss: D,
    trials: usize,
    kink_exclusion: f64,
) -> f64
where
    L: Fn(&[f64]) -> f64,
    D: Fn(&[f64]) -> Vec<f64>,
{
    assert!(trials >= 1);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut net = net.clone();
    for _ in 0..trials {
        let x = sample_input(&net, stream, kink_exclusion);
        let mut grads = Grads::zeros_like(&net);
        let mut cache = BatchCache::default();
        net.forward_batch(&x, 1, &mut cache);
        let upstream = dloss(cache.output());
        net.backward_batch(&cache, &upstream, &mut grads, None);
        // Flatten analytic gradients in visit order.
        let mut analytic = Vec::with_capacity(net.param_count());
        grads.visit(&mut |slice| analytic.extend_from_slice(slice));
        // Central differences, one parameter at a time.
        let mut idx = 0;
        for l in 0..net.layers.len() {
            for which in 0..2 {
                let len = if which == 0 {
                    net.layers[l].weights.len()
                } else {
                    net.layers[l].bias.len()
                };
                for j in 0..len {
                    fn slot(net: &mut DenseNet, l: usize, which: usize, j: usize) -> &mut f64 {
                        if which == 0 {
                            &mut net.layers[l].weights[j]
                        } else {
                            &mut net.layers[l].bias[j]
                        }
                    }
                    let original = *slot(&mut net, l, which, j);
                    *slot(&mut net, l, which, j) = original + step;
                    let plus = loss(&net.forward(&x));
                    *slot(&mut net, l, which, j) = original - step;
                    let minus = loss(&net.forward(&x));
                    *slot(&mut net, l, which, j) = original;
                    let numeric = (plus - minus) / (2.0 * step);
                    let a = analytic[idx];
                    let denom = math::abs(a).max(math::abs(numeric)).max(1e-6);
                    worst = worst.max(math::abs(a - numeric) / denom);
                    idx += 1;
                }
            }
        }
    }
    worst
}

fn sample_input(net: &DenseNet, stream: &mut Stream, kink_exclusion: f64) -> Vec<f64> {
    let dim = net.input_size();
    'resample: for _ in 0..1000 {
        let x: Vec<f64> = (0..dim).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        if kink_exclusion > 0.0 {
            let mut cache = BatchCache::default();
            net.forward_batch(&x, 1, &mut cache);
            for (l, pre) in cache.pre.iter().enumerate() {
                if net.layers[l].activation == Activation::ReLU
                    && pre.iter().any(|&z| math::abs(z) < kink_exclusion)
                {
                    continue 'resample;
                }
            }
        }
        return x;
    }
    // Pathological nets keep hitting kinks; fall back to the last draw.
    (0..dim).map(|_| stream.uniform_in(-1.0, 1.0)).collect()
}
