//! Dense feedforward networks, their reverse pass, and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer `act(W x + b)`; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Mat<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub layers: Vec<DenseLayer<T>>,
    /// Set when the final layer was created with all-zero weights and bias.
    pub zero_final: bool,
}

impl<T> NetworkParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NetworkParams<U> {
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l.weight.map(&mut f),
                    bias: l.bias.iter().map(&mut f).collect(),
                    activation: l.activation,
                })
                .collect(),
            zero_final: self.zero_final,
        }
    }

    /// Visits weights (row-major) then biases, layer by layer.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&T)) {
        for l in &self.layers {
            l.weight.data().iter().for_each(&mut *f);
            l.bias.iter().for_each(&mut *f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for l in &mut self.layers {
            let (r, c) = (l.weight.rows(), l.weight.cols());
            let mut data = std::mem::replace(&mut l.weight, Mat::from_vec(0, 0, Vec::new())).into_data();
            data.iter_mut().for_each(&mut *f);
            l.weight = Mat::from_vec(r, c, data);
            l.bias.iter_mut().for_each(&mut *f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.rows() * l.weight.cols() + l.bias.len()).sum()
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }
}

impl NetworkParams<f64> {
    /// A multilayer perceptron with `hidden` activations between layers and an
    /// identity output layer. Weights are uniform in `±√(3/fan_in)`.
    pub fn mlp(widths: &[usize], hidden: Activation, zero_final: bool, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "a network needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (widths[k], widths[k + 1]);
                let last = k + 1 == n;
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                let weight = if last && zero_final {
                    Mat::zeros(fan_out, fan_in)
                } else {
                    Mat::from_vec(fan_out, fan_in, (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect())
                };
                DenseLayer {
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if last { Activation::Identity } else { hidden },
                }
            })
            .collect();
        NetworkParams { layers, zero_final }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| out.push(*p));
        out
    }

    fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.for_each_param(&mut |p| {
            h ^= p.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        });
        h
    }
}

fn check_input<T>(net: &NetworkParams<T>, input_len: usize, rows: usize) -> Result<()> {
    let w = net.input_width();
    if input_len != w * rows {
        return Err(Error::Shape(format!("network input has {input_len} values, expected {rows} rows of width {w}")));
    }
    Ok(())
}

pub struct NetworkRun<T> {
    pub output: Vec<T>,
}

/// Evaluates `rows` stacked input rows with generic scalars.
pub fn evaluate<T: Scalar>(net: &NetworkParams<T>, input: &[T], rows: usize) -> Result<NetworkRun<T>> {
    check_input(net, input.len(), rows)?;
    let mut x = input.to_vec();
    for l in &net.layers {
        let (out_w, in_w) = (l.weight.rows(), l.weight.cols());
        let mut y = Vec::with_capacity(rows * out_w);
        for r in 0..rows {
            let xr = &x[r * in_w..(r + 1) * in_w];
            for o in 0..out_w {
                y.push(l.activation.apply(T::dot(l.weight.row(o), xr) + l.bias[o]));
            }
        }
        x = y;
    }
    Ok(NetworkRun { output: x })
}

/// Primal values recorded by [`net_forward`].
pub struct NetTape {
    rows: usize,
    /// `activations[k]` is the input to layer k; the last entry is the output.
    activations: Vec<Vec<f64>>,
    fingerprint: u64,
}

impl NetTape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map_or(&[], |v| v.as_slice())
    }
}

pub fn net_forward(net: &NetworkParams<f64>, input: &[f64], rows: usize) -> Result<(Vec<f64>, NetTape)> {
    check_input(net, input.len(), rows)?;
    let mut activations = Vec::with_capacity(net.layers.len() + 1);
    activations.push(input.to_vec());
    for l in &net.layers {
        let x = activations.last().unwrap();
        let (out_w, in_w) = (l.weight.rows(), l.weight.cols());
        let w = l.weight.data();
        let mut y = Vec::with_capacity(rows * out_w);
        for r in 0..rows {
            let xr = &x[r * in_w..(r + 1) * in_w];
            for o in 0..out_w {
                let wr = &w[o * in_w..(o + 1) * in_w];
                let s: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() + l.bias[o];
                y.push(l.activation.apply(s));
            }
        }
        activations.push(y);
    }
    let out = activations.last().unwrap().clone();
    Ok((out, NetTape { rows, activations, fingerprint: net.fingerprint() }))
}

pub struct NetGradients {
    /// In [`NetworkParams::for_each_param`] order.
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn net_backward(tape: &NetTape, net: &NetworkParams<f64>, out_adj: &[f64]) -> Result<NetGradients> {
    if tape.fingerprint != net.fingerprint() || tape.activations.len() != net.layers.len() + 1 {
        return Err(Error::StaleTape);
    }
    let rows = tape.rows;
    if out_adj.len() != rows * net.output_width() {
        return Err(Error::Shape(format!("output cotangent has {} values, expected {}", out_adj.len(), rows * net.output_width())));
    }
    let mut per_layer: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(net.layers.len());
    let mut g = out_adj.to_vec();
    for (k, l) in net.layers.iter().enumerate().rev() {
        let (out_w, in_w) = (l.weight.rows(), l.weight.cols());
        let x = &tape.activations[k];
        let y = &tape.activations[k + 1];
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi *= l.activation.slope_from_output(yi);
        }
        let mut gw = vec![0.0; out_w * in_w];
        let mut gb = vec![0.0; out_w];
        let mut gx = vec![0.0; rows * in_w];
        let w = l.weight.data();
        for r in 0..rows {
            let xr = &x[r * in_w..(r + 1) * in_w];
            let gxr = &mut gx[r * in_w..(r + 1) * in_w];
            for o in 0..out_w {
                let d = g[r * out_w + o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let gwr = &mut gw[o * in_w..(o + 1) * in_w];
                let wr = &w[o * in_w..(o + 1) * in_w];
                for i in 0..in_w {
                    gwr[i] += d * xr[i];
                    gxr[i] += d * wr[i];
                }
            }
        }
        per_layer.push((gw, gb));
        g = gx;
    }
    let mut params = Vec::with_capacity(net.param_count());
    for (gw, gb) in per_layer.into_iter().rev() {
        params.extend(gw);
        params.extend(gb);
    }
    Ok(NetGradients { params, input: g })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        AdamState { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(widths: &[usize], seed: u64) -> NetworkParams<f64> {
        NetworkParams::mlp(widths, Activation::Tanh, false, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let n = NetworkParams::mlp(&[3, 5, 2], Activation::Tanh, true, &mut ChaCha8Rng::seed_from_u64(1));
        let (out, _) = net_forward(&n, &[1.0, -4.0, 2.5, 0.1, 0.2, 0.3], 2).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let n = NetworkParams {
            layers: vec![DenseLayer { weight: Mat::identity(3), bias: vec![0.0; 3], activation: Activation::Identity }],
            zero_final: false,
        };
        assert_eq!(net_forward(&n, &[1.0, 2.0, 3.0], 1).unwrap().0, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn hand_evaluated_two_layer() {
        let n = NetworkParams {
            layers: vec![
                DenseLayer {
                    weight: Mat::from_vec(2, 2, vec![1.0, 2.0, -1.0, 0.5]),
                    bias: vec![0.1, -0.2],
                    activation: Activation::Tanh,
                },
                DenseLayer { weight: Mat::from_vec(1, 2, vec![3.0, -1.0]), bias: vec![0.5], activation: Activation::Identity },
            ],
            zero_final: false,
        };
        let h0 = (1.0f64 - 2.0 + 0.1).tanh();
        let h1 = (-1.0f64 - 0.5 - 0.2).tanh();
        let expect = 3.0 * h0 - h1 + 0.5;
        assert_eq!(net_forward(&n, &[1.0, -1.0], 1).unwrap().0, vec![expect]);
    }

    #[test]
    fn stale_tape_detected() {
        let mut n = net(&[2, 3, 1], 4);
        let (_, tape) = net_forward(&n, &[0.5, 0.5], 1).unwrap();
        n.layers[0].bias[0] += 1.0;
        assert!(matches!(net_backward(&tape, &n, &[1.0]), Err(Error::StaleTape)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let n = net(&[2, 3, 2], 5);
        let (_, tape) = net_forward(&n, &[0.5, -0.5], 1).unwrap();
        let g = net_backward(&tape, &n, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_is_input() {
        let n = NetworkParams {
            layers: vec![DenseLayer { weight: Mat::from_vec(1, 3, vec![0.3, 0.2, 0.1]), bias: vec![0.0], activation: Activation::Identity }],
            zero_final: false,
        };
        let x = [1.5, -2.0, 4.0];
        let (_, tape) = net_forward(&n, &x, 1).unwrap();
        let g = net_backward(&tape, &n, &[1.0]).unwrap();
        assert_eq!(&g.params[..3], &x);
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let mut p = [1.0, -1.0];
        st.update(&mut p, &[0.5, -2.0]).unwrap();
        assert!((p[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-1.0 + 1e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(AdamConfig::default(), 1);
        st.m[0] = 0.2;
        let mut p = [3.0];
        st.update(&mut p, &[0.0]).unwrap();
        assert!((st.m[0] - 0.18).abs() < 1e-15);
        let mut st2 = AdamState::new(AdamConfig::default(), 1);
        let mut q = [3.0];
        st2.update(&mut q, &[0.0]).unwrap();
        assert_eq!(q[0], 3.0);
        assert!(st2.update(&mut q, &[f64::NAN]).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = [300.0, 400.0];
        assert_eq!(clip_global_norm(&mut g, 100.0), 500.0);
        assert!((g[0] - 60.0).abs() < 1e-12 && (g[1] - 80.0).abs() < 1e-12);
    }
}
