//! Small dense networks with exact reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>` per network. Batched passes keep
//! row-major `(batch, width)` activations in a [`Tape`] so the backward
//! pass can reuse them. Matrix products go through `matrixmultiply`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("non-finite gradient at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Linear,
    CategoricalLogits,
    /// First half of the outputs are means, second half log-stds clamped to
    /// `[LOG_STD_MIN, LOG_STD_MAX]`.
    GaussianHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output: OutputKind,
}

impl NetSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation, kind: OutputKind) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(output);
        Self {
            layer_widths,
            activation,
            output: kind,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layer_widths.len() < 3 {
            return Err(NetError::Spec("at least one hidden layer is required".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NetError::Spec("layer widths must be positive".into()));
        }
        if self.output == OutputKind::GaussianHead && self.output_dim() % 2 != 0 {
            return Err(NetError::Spec("gaussian head needs an even output width".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlot {
    input: usize,
    output: usize,
    /// Weights, `output x input` row-major.
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    layers: Vec<LayerSlot>,
    pub params: Vec<f64>,
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    rows: usize,
    /// `acts[0]` is the input; `acts[i]` the post-activation output of layer `i - 1`.
    /// The last entry is the raw linear output before any head clamp.
    acts: Vec<Vec<f64>>,
    /// Final output after the head transform.
    out: Vec<f64>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rs: isize, cs: isize, r: usize, cc: usize| (r.saturating_sub(1)) as isize * rs + (cc.saturating_sub(1)) as isize * cs;
    assert!(k == 0 || (reach(rsa, csa, m, k) as usize) < a.len());
    assert!(k == 0 || (reach(rsb, csb, k, n) as usize) < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn zeros(spec: NetSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut at = 0;
        for w in spec.layer_widths.windows(2) {
            let (input, output) = (w[0], w[1]);
            layers.push(LayerSlot {
                input,
                output,
                w: at,
                b: at + input * output,
            });
            at += input * output + output;
        }
        Ok(Self {
            params: vec![0.0; at],
            layers,
            spec,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization; the last layer is scaled down
    /// so fresh heads start close to zero.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(spec)?;
        let last = net.layers.len() - 1;
        for (li, l) in net.layers.clone().iter().enumerate() {
            let bound = 1.0 / (l.input as f64).sqrt() * if li == last { 0.1 } else { 1.0 };
            for p in &mut net.params[l.w..l.w + l.input * l.output] {
                *p = rng.random_range(-bound..bound);
            }
            for p in &mut net.params[l.b..l.b + l.output] {
                *p = rng.random_range(-bound..bound) * 0.1;
            }
        }
        Ok(net)
    }

    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self, NetError> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(NetError::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Sets the bias of the output layer; handy for hand-built policies.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = *self.layers.last().expect("validated spec");
        &mut self.params[l.b..l.b + l.output]
    }

    /// Zeroes every weight of the output layer so the output equals its bias.
    pub fn zero_output_weights(&mut self) {
        let l = *self.layers.last().expect("validated spec");
        self.params[l.w..l.w + l.input * l.output].fill(0.0);
    }

    fn activate(&self, z: &mut [f64]) {
        match self.spec.activation {
            Activation::Tanh => z.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Relu => z.iter_mut().for_each(|v| *v = v.max(0.0)),
        }
    }

    /// Batched forward pass over `rows` inputs laid out row-major.
    pub fn forward_batch(&self, input: &[f64], rows: usize, tape: &mut Tape) -> Result<(), NetError> {
        let d = self.input_dim();
        if input.len() != rows * d {
            return Err(NetError::Shape {
                expected: rows * d,
                got: input.len(),
            });
        }
        tape.rows = rows;
        tape.acts.resize(self.layers.len() + 1, Vec::new());
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let (prev, rest) = tape.acts.split_at_mut(li + 1);
            let x = &prev[li];
            let z = &mut rest[0];
            z.clear();
            z.reserve(rows * l.output);
            for _ in 0..rows {
                z.extend_from_slice(&self.params[l.b..l.b + l.output]);
            }
            // z += x (rows x in) * W^T (in x out)
            gemm(
                rows,
                l.input,
                l.output,
                x,
                l.input as isize,
                1,
                &self.params[l.w..],
                1,
                l.input as isize,
                1.0,
                z,
            );
            if li != last {
                self.activate(z);
            }
        }
        tape.out.clear();
        tape.out.extend_from_slice(&tape.acts[self.layers.len()]);
        if self.spec.output == OutputKind::GaussianHead {
            let out_dim = self.output_dim();
            let half = out_dim / 2;
            for r in 0..rows {
                for v in &mut tape.out[r * out_dim + half..(r + 1) * out_dim] {
                    *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
                }
            }
        }
        Ok(())
    }

    /// Accumulates `d(sum_rows out . upstream)/d(params)` into `grad` and, if
    /// requested, writes the input gradient (`rows x input_dim`).
    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut Vec<f64>>,
    ) -> Result<(), NetError> {
        let rows = tape.rows;
        let out_dim = self.output_dim();
        if upstream.len() != rows * out_dim {
            return Err(NetError::Shape {
                expected: rows * out_dim,
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(NetError::Shape {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut delta = upstream.to_vec();
        if self.spec.output == OutputKind::GaussianHead {
            let raw = &tape.acts[self.layers.len()];
            let half = out_dim / 2;
            for r in 0..rows {
                for j in half..out_dim {
                    let v = raw[r * out_dim + j];
                    if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v) {
                        delta[r * out_dim + j] = 0.0;
                    }
                }
            }
        }
        let mut prev_delta = Vec::new();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let x = &tape.acts[li];
            // dW (out x in) += delta^T (out x rows) * x (rows x in)
            gemm(
                l.output,
                rows,
                l.input,
                &delta,
                1,
                l.output as isize,
                x,
                l.input as isize,
                1,
                1.0,
                &mut grad[l.w..l.w + l.input * l.output],
            );
            let gb = &mut grad[l.b..l.b + l.output];
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&delta[r * l.output..(r + 1) * l.output]) {
                    *g += d;
                }
            }
            if li == 0 && input_grad.is_none() {
                break;
            }
            // d x (rows x in) = delta (rows x out) * W (out x in)
            prev_delta.clear();
            prev_delta.resize(rows * l.input, 0.0);
            gemm(
                rows,
                l.output,
                l.input,
                &delta,
                l.output as isize,
                1,
                &self.params[l.w..],
                l.input as isize,
                1,
                0.0,
                &mut prev_delta,
            );
            if li > 0 {
                match self.spec.activation {
                    Activation::Tanh => {
                        for (d, a) in prev_delta.iter_mut().zip(x) {
                            *d *= 1.0 - a * a;
                        }
                    }
                    Activation::Relu => {
                        for (d, a) in prev_delta.iter_mut().zip(x) {
                            if *a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            std::mem::swap(&mut delta, &mut prev_delta);
        }
        if let Some(ig) = input_grad {
            ig.clear();
            ig.extend_from_slice(&delta);
        }
        Ok(())
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut tape = Tape::default();
        self.forward_batch(input, 1, &mut tape)?;
        Ok(tape.out)
    }

    /// Gradient of `forward(input) . upstream` with respect to the parameters and the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients, NetError> {
        let mut tape = Tape::default();
        self.forward_batch(input, 1, &mut tape)?;
        let mut params = vec![0.0; self.params.len()];
        let mut inp = Vec::new();
        self.backward_batch(&tape, upstream, &mut params, Some(&mut inp))?;
        Ok(Gradients { params, input: inp })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 3e-3;

    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected update. Non-finite gradients leave `params` untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), NetError> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(NetError::Shape {
                expected: params.len(),
                got: grad.len(),
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFinite(i));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Largest per-coordinate relative error with a small absolute floor.
    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::zeros(NetSpec::new(3, &[4, 4], 2, Activation::Tanh, OutputKind::Linear)).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_computed_forward() {
        // 1 input -> 1 tanh unit -> 1 output
        let spec = NetSpec::new(1, &[1], 1, Activation::Tanh, OutputKind::Linear);
        let net = Mlp::from_params(spec, vec![0.5, -0.25, 2.0, 0.1]).unwrap();
        let x: f64 = 0.8;
        let expected = 2.0 * (0.5 * x - 0.25).tanh() + 0.1;
        let got = net.forward(&[x]).unwrap()[0];
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::zeros(NetSpec::new(3, &[4], 1, Activation::Tanh, OutputKind::Linear)).unwrap();
        assert_eq!(net.forward(&[1.0]), Err(NetError::Shape { expected: 3, got: 1 }));
    }

    #[test]
    fn spec_needs_hidden_layer() {
        let spec = NetSpec {
            layer_widths: vec![3, 1],
            activation: Activation::Tanh,
            output: OutputKind::Linear,
        };
        assert!(Mlp::zeros(spec).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::init(NetSpec::new(3, &[5, 5], 2, Activation::Tanh, OutputKind::Linear), &mut rng(1)).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn last_layer_gradient_is_outer_product() {
        let spec = NetSpec::new(2, &[3], 2, Activation::Tanh, OutputKind::Linear);
        let net = Mlp::init(spec, &mut rng(2)).unwrap();
        let x = [0.3, -0.7];
        let up = [1.5, -0.5];
        let g = net.backward(&x, &up).unwrap();
        // hidden activations
        let l0 = net.layers[0];
        let h: Vec<f64> = (0..3)
            .map(|o| {
                let z = net.params[l0.b + o] + (0..2).map(|i| net.params[l0.w + o * 2 + i] * x[i]).sum::<f64>();
                z.tanh()
            })
            .collect();
        let l1 = net.layers[1];
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.params[l1.w + o * 3 + i] - up[o] * h[i]).abs() < 1e-14);
            }
            assert_eq!(g.params[l1.b + o], up[o]);
        }
    }

    fn finite_difference(net: &Mlp, x: &[f64], up: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = 1e-5;
        let f = |n: &Mlp, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum() };
        let mut n = net.clone();
        let mut gp = Vec::new();
        for i in 0..net.params.len() {
            let orig = n.params[i];
            n.params[i] = orig + h;
            let fp = f(&n, x);
            n.params[i] = orig - h;
            let fm = f(&n, x);
            n.params[i] = orig;
            gp.push((fp - fm) / (2.0 * h));
        }
        let mut gx = Vec::new();
        let mut xv = x.to_vec();
        for i in 0..x.len() {
            let orig = xv[i];
            xv[i] = orig + h;
            let fp = f(net, &xv);
            xv[i] = orig - h;
            let fm = f(net, &xv);
            xv[i] = orig;
            gx.push((fp - fm) / (2.0 * h));
        }
        (gp, gx)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(3);
        for trial in 0..20 {
            let (act, kind) = match trial % 3 {
                0 => (Activation::Tanh, OutputKind::Linear),
                1 => (Activation::Tanh, OutputKind::GaussianHead),
                _ => (Activation::Tanh, OutputKind::CategoricalLogits),
            };
            let spec = NetSpec::new(4, &[6, 5], 4, act, kind);
            let net = Mlp::init(spec, &mut r).unwrap();
            let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let up: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let g = net.backward(&x, &up).unwrap();
            let (gp, gx) = finite_difference(&net, &x, &up);
            assert!(max_rel_err(&g.params, &gp) < 1e-4, "trial {trial}: params");
            assert!(max_rel_err(&g.input, &gx) < 1e-4, "trial {trial}: input");
        }
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let mut r = rng(4);
        let net = Mlp::init(NetSpec::new(3, &[8, 8], 2, Activation::Relu, OutputKind::Linear), &mut r).unwrap();
        let x = [0.4, -0.2, 0.9];
        let up = [0.7, -1.1];
        let g = net.backward(&x, &up).unwrap();
        let (gp, _) = finite_difference(&net, &x, &up);
        assert!(max_rel_err(&g.params, &gp) < 1e-4);
    }

    #[test]
    fn batched_backward_sums_rows() {
        let mut r = rng(5);
        let net = Mlp::init(NetSpec::new(3, &[4], 2, Activation::Tanh, OutputKind::Linear), &mut r).unwrap();
        let xs = [0.1, 0.2, 0.3, -0.5, 0.4, 0.0];
        let ups = [1.0, -1.0, 0.5, 2.0];
        let mut tape = Tape::default();
        net.forward_batch(&xs, 2, &mut tape).unwrap();
        let mut g = vec![0.0; net.param_count()];
        net.backward_batch(&tape, &ups, &mut g, None).unwrap();
        let a = net.backward(&xs[..3], &ups[..2]).unwrap().params;
        let b = net.backward(&xs[3..], &ups[2..]).unwrap().params;
        for i in 0..g.len() {
            assert!((g[i] - a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_head_clamps_log_std() {
        let spec = NetSpec::new(1, &[2], 2, Activation::Tanh, OutputKind::GaussianHead);
        let mut net = Mlp::zeros(spec).unwrap();
        net.output_bias_mut().copy_from_slice(&[0.3, 9.0]);
        assert_eq!(net.forward(&[0.0]).unwrap(), vec![0.3, LOG_STD_MAX]);
        net.output_bias_mut()[1] = -9.0;
        assert_eq!(net.forward(&[0.0]).unwrap()[1], LOG_STD_MIN);
        let g = net.backward(&[0.0], &[0.0, 1.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0), "clamped log-std has no gradient");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_single_step_on_square() {
        // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4, step = lr * 2 / (2 + eps)
        let mut w = vec![1.0];
        let mut opt = Adam::new(1, 0.1);
        opt.step(&mut w, &[2.0]).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15);
        assert!(w[0].abs() < 1.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut opt = Adam::new(1, 0.1);
        assert_eq!(opt.step(&mut p, &[f64::INFINITY]), Err(NetError::NonFinite(0)));
        assert_eq!(p, vec![1.0]);
        assert_eq!(Adam::DEFAULT_LR, 3e-3);
    }

    #[test]
    fn first_order_taylor_consistency() {
        let mut r = rng(6);
        let net = Mlp::init(NetSpec::new(3, &[7, 7], 1, Activation::Tanh, OutputKind::Linear), &mut r).unwrap();
        let x = [0.2, 0.5, -0.3];
        let g = net.backward(&x, &[1.0]).unwrap();
        let dir: Vec<f64> = (0..net.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        let eps = 1e-6;
        let mut moved = net.clone();
        for (p, d) in moved.params.iter_mut().zip(&dir) {
            *p += eps * d;
        }
        let lhs = moved.forward(&x).unwrap()[0] - net.forward(&x).unwrap()[0];
        let rhs: f64 = g.params.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() * eps;
        assert!((lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
    }
}
