//! Small fully connected networks with explicit forward and reverse passes.
//!
//! Parameters live in one flat vector. Layer `l` stores a row-major
//! `rows x cols` weight block followed by `rows` biases (when enabled), so
//! a layer maps `cols` inputs to `rows` outputs. The optimizers work on the
//! flat vector directly.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::rng::{self, standard_normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

/// Numerically stable `log(1 + e^x)`.
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

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    /// Output width.
    pub rows: usize,
    /// Input width.
    pub cols: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl LayerShape {
    pub fn num_params(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }
}

/// Shapes of an MLP with biased layers: `hidden_activation` on every hidden
/// layer and `output_activation` on the last one.
pub fn mlp_shapes(
    input: usize,
    hidden: &[usize],
    output: usize,
    hidden_activation: Activation,
    output_activation: Activation,
) -> Vec<LayerShape> {
    let mut shapes = Vec::with_capacity(hidden.len() + 1);
    let mut cols = input;
    for &rows in hidden {
        shapes.push(LayerShape {
            rows,
            cols,
            has_bias: true,
            activation: hidden_activation,
        });
        cols = rows;
    }
    shapes.push(LayerShape {
        rows: output,
        cols,
        has_bias: true,
        activation: output_activation,
    });
    shapes
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

/// Intermediate values of one forward pass, consumed by [`NetParams::backward_trace`].
#[derive(Clone, Debug)]
pub struct Trace {
    /// `outputs[0]` is the input; `outputs[l + 1]` is the activation of layer `l`.
    outputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.outputs[0]
    }
}

/// Fan-in scaled Gaussian weights (variance `1 / cols`) and zero biases.
pub fn init_params(shapes: &[LayerShape], seed: u64) -> NetParams {
    let mut rng = rng::seeded(seed);
    init_params_with(shapes, &mut rng)
}

pub fn init_params_with<R: Rng + ?Sized>(shapes: &[LayerShape], rng: &mut R) -> NetParams {
    let total = shapes.iter().map(LayerShape::num_params).sum();
    let mut values = Vec::with_capacity(total);
    for shape in shapes {
        let scale = 1.0 / (shape.cols as f64).sqrt();
        for _ in 0..shape.rows * shape.cols {
            values.push(standard_normal(rng) * scale);
        }
        if shape.has_bias {
            values.extend(std::iter::repeat_n(0.0, shape.rows));
        }
    }
    NetParams {
        values,
        shapes: shapes.to_vec(),
    }
}

impl NetParams {
    pub fn from_parts(shapes: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::format("network", "no layers"));
        }
        for pair in shapes.windows(2) {
            check_len("layer chaining", pair[0].rows, pair[1].cols)?;
        }
        let total: usize = shapes.iter().map(LayerShape::num_params).sum();
        check_len("network parameters", total, values.len())?;
        check_finite("network parameters", &values)?;
        Ok(NetParams { values, shapes })
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].rows
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_dim(), input.len())?;
        let mut current = input.to_vec();
        let mut offset = 0;
        for shape in &self.shapes {
            let mut next = vec![0.0; shape.rows];
            self.affine(shape, offset, &current, &mut next);
            for v in &mut next {
                *v = shape.activation.apply(*v);
            }
            offset += shape.num_params();
            current = next;
        }
        Ok(current)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        check_len("network input", self.input_dim(), input.len())?;
        let mut outputs = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(self.shapes.len());
        outputs.push(input.to_vec());
        let mut offset = 0;
        for shape in &self.shapes {
            let mut z = vec![0.0; shape.rows];
            self.affine(shape, offset, outputs.last().unwrap(), &mut z);
            let y: Vec<f64> = z.iter().map(|&v| shape.activation.apply(v)).collect();
            offset += shape.num_params();
            pre.push(z);
            outputs.push(y);
        }
        Ok(Trace { outputs, pre })
    }

    #[inline]
    fn affine(&self, shape: &LayerShape, offset: usize, input: &[f64], out: &mut [f64]) {
        let weights = &self.values[offset..offset + shape.rows * shape.cols];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &weights[r * shape.cols..(r + 1) * shape.cols];
            *o = row.iter().zip(input).map(|(w, x)| w * x).sum();
        }
        if shape.has_bias {
            let b0 = offset + shape.rows * shape.cols;
            for (o, b) in out.iter_mut().zip(&self.values[b0..b0 + shape.rows]) {
                *o += b;
            }
        }
    }

    /// Reverse pass over a recorded trace. Parameter gradients are *added*
    /// into `param_grad`; the gradient with respect to the input is returned.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        upstream: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        check_len("parameter gradient", self.num_params(), param_grad.len())?;
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for shape in &self.shapes {
            offsets.push(offset);
            offset += shape.num_params();
        }
        let mut delta: Vec<f64> = upstream.to_vec();
        for (l, shape) in self.shapes.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let y = &trace.outputs[l + 1];
            for i in 0..shape.rows {
                delta[i] *= shape.activation.derivative(z[i], y[i]);
            }
            let input = &trace.outputs[l];
            let off = offsets[l];
            let (wgrad, rest) = param_grad[off..].split_at_mut(shape.rows * shape.cols);
            for r in 0..shape.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &mut wgrad[r * shape.cols..(r + 1) * shape.cols];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if shape.has_bias {
                for (g, d) in rest[..shape.rows].iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            let weights = &self.values[off..off + shape.rows * shape.cols];
            let mut next = vec![0.0; shape.cols];
            for r in 0..shape.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &weights[r * shape.cols..(r + 1) * shape.cols];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Gradients of `upstream · f(input)` with respect to parameters and input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grad = vec![0.0; self.num_params()];
        let input_grad = self.backward_trace(&trace, upstream, &mut grad)?;
        Ok((grad, input_grad))
    }

    /// Offset of the last layer's weight block and bias block.
    pub(crate) fn last_layer_offsets(&self) -> (usize, usize) {
        let last = self.shapes.last().unwrap();
        let start = self.values.len() - last.num_params();
        (start, start + last.rows * last.cols)
    }

    /// FNV-1a hash of the parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.values)
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "imel-net 1")?;
        writeln!(w, "layers {}", self.shapes.len())?;
        for s in &self.shapes {
            writeln!(
                w,
                "{} {} {} {}",
                s.rows,
                s.cols,
                u8::from(s.has_bias),
                s.activation.name()
            )?;
        }
        writeln!(w, "values {}", self.values.len())?;
        for v in &self.values {
            writeln!(w, "{v:?}")?;
        }
        writeln!(w, "end")
    }

    pub fn read_snapshot<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = SnapshotLines { inner: r };
        let header = lines.next_line()?;
        if header != "imel-net 1" {
            return Err(Error::format(
                "network snapshot",
                format!("bad header `{header}`"),
            ));
        }
        let n_layers: usize = lines.keyed("layers")?;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = lines.next_line()?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(Error::format(
                    "network snapshot",
                    format!("bad layer `{line}`"),
                ));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::format("network snapshot", e.to_string()))
            };
            let activation = Activation::from_name(parts[3]).ok_or_else(|| {
                Error::format(
                    "network snapshot",
                    format!("unknown activation `{}`", parts[3]),
                )
            })?;
            shapes.push(LayerShape {
                rows: parse(parts[0])?,
                cols: parse(parts[1])?,
                has_bias: parse(parts[2])? == 1,
                activation,
            });
        }
        let n_values: usize = lines.keyed("values")?;
        let mut values = Vec::with_capacity(n_values);
        for _ in 0..n_values {
            let line = lines.next_line()?;
            values.push(
                line.parse::<f64>()
                    .map_err(|e| Error::format("network snapshot", e.to_string()))?,
            );
        }
        let end = lines.next_line()?;
        if end != "end" {
            return Err(Error::format("network snapshot", "missing `end`"));
        }
        NetParams::from_parts(shapes, values)
    }
}

pub(crate) struct SnapshotLines<'a, R: BufRead> {
    pub(crate) inner: &'a mut R,
}

impl<R: BufRead> SnapshotLines<'_, R> {
    pub(crate) fn next_line(&mut self) -> Result<String> {
        let mut line = String::new();
        let n = self
            .inner
            .read_line(&mut line)
            .map_err(|e| Error::format("snapshot", e.to_string()))?;
        if n == 0 {
            return Err(Error::format("snapshot", "unexpected end of input"));
        }
        Ok(line.trim_end().to_string())
    }

    pub(crate) fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::format("snapshot", format!("expected `{key} <n>`, got `{line}`")))
    }
}

pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `w <- w - lr * g`.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        Optimizer {
            kind,
            learning_rate,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn adam(learning_rate: f64, num_params: usize) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, num_params)
    }

    pub fn sgd(learning_rate: f64, num_params: usize) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, num_params)
    }

    /// Applies one descent step. A non-finite gradient leaves everything
    /// untouched and reports training divergence.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len(
            "optimizer parameters",
            self.first_moment.len(),
            params.len(),
        )?;
        check_len("optimizer gradient", params.len(), grad.len())?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::TrainingDiverged("non-finite gradient".into()));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::TrainingDiverged("non-finite parameters".into()));
        }
        Ok(())
    }
}

/// Something with a flat trainable parameter vector.
pub trait Trainable {
    fn num_params(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, values: &[f64]) -> Result<()>;

    fn fingerprint(&self) -> u64 {
        fingerprint(&self.flat_params())
    }

    /// One optimizer step on the flat parameter vector.
    fn apply_step(&mut self, optimizer: &mut Optimizer, grad: &[f64]) -> Result<()> {
        let mut flat = self.flat_params();
        optimizer.step(&mut flat, grad)?;
        self.set_flat_params(&flat)
    }
}

impl Trainable for NetParams {
    fn num_params(&self) -> usize {
        self.values.len()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.values.clone()
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        check_len("network parameters", self.values.len(), values.len())?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    fn apply_step(&mut self, optimizer: &mut Optimizer, grad: &[f64]) -> Result<()> {
        optimizer.step(&mut self.values, grad)
    }
}

/// Concatenates several networks' parameters in order.
pub(crate) fn concat_params(nets: &[&NetParams]) -> Vec<f64> {
    let mut out = Vec::with_capacity(nets.iter().map(|n| n.values.len()).sum());
    for n in nets {
        out.extend_from_slice(&n.values);
    }
    out
}

pub(crate) fn split_params(nets: &mut [&mut NetParams], values: &[f64]) -> Result<()> {
    let total: usize = nets.iter().map(|n| n.values.len()).sum();
    check_len("parameters", total, values.len())?;
    let mut offset = 0;
    for n in nets.iter_mut() {
        let len = n.values.len();
        n.values.copy_from_slice(&values[offset..offset + len]);
        offset += len;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer(seed: u64) -> NetParams {
        let shapes = mlp_shapes(3, &[5], 2, Activation::Tanh, Activation::Identity);
        let mut p = init_params(&shapes, seed);
        // non-zero biases so their gradients are exercised
        let mut rng = rng::seeded(seed + 100);
        for v in p.values.iter_mut() {
            *v += 0.1 * standard_normal(&mut rng);
        }
        p
    }

    #[test]
    fn param_count_matches_layout() {
        let shapes = mlp_shapes(4, &[64, 64], 3, Activation::Tanh, Activation::Identity);
        let p = init_params(&shapes, 1);
        assert_eq!(p.num_params(), 4 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
    }

    #[test]
    fn zero_weights_give_activation_of_zero() {
        let shapes = mlp_shapes(3, &[4], 2, Activation::Tanh, Activation::Softplus);
        let n = shapes.iter().map(LayerShape::num_params).sum();
        let p = NetParams::from_parts(shapes, vec![0.0; n]).unwrap();
        let out = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        for v in out {
            assert_eq!(v, 2f64.ln());
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let shapes = vec![LayerShape {
            rows: 3,
            cols: 3,
            has_bias: false,
            activation: Activation::Identity,
        }];
        let values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let p = NetParams::from_parts(shapes, values).unwrap();
        assert_eq!(p.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_hand_unrolled_products() {
        let p = two_layer(3);
        let x = [0.3, -0.7, 1.1];
        let v = &p.values;
        // layer 0: 5x3 weights then 5 biases
        let mut h = [0.0; 5];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut s = v[15 + r];
            for c in 0..3 {
                s += v[r * 3 + c] * x[c];
            }
            *hr = s.tanh();
        }
        let base = 20;
        let mut expected = [0.0; 2];
        for (r, e) in expected.iter_mut().enumerate() {
            let mut s = v[base + 10 + r];
            for c in 0..5 {
                s += v[base + r * 5 + c] * h[c];
            }
            *e = s;
        }
        let out = p.forward(&x).unwrap();
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = two_layer(4);
        let (g, gi) = p.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(gi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_neuron_gradient_is_input() {
        let shapes = vec![LayerShape {
            rows: 1,
            cols: 3,
            has_bias: false,
            activation: Activation::Identity,
        }];
        let p = NetParams::from_parts(shapes, vec![0.2, -0.4, 0.9]).unwrap();
        let x = [1.5, -2.0, 0.25];
        let (g, gi) = p.backward(&x, &[1.0]).unwrap();
        assert_eq!(g, x.to_vec());
        assert_eq!(gi, vec![0.2, -0.4, 0.9]);
    }

    #[test]
    fn backward_matches_central_differences() {
        for seed in 0..10 {
            let mut p = two_layer(seed);
            for (i, s) in p.shapes.iter_mut().enumerate() {
                if i == 1 {
                    s.activation = Activation::Softplus;
                }
            }
            let x = [0.4, -0.2, 0.9];
            let up = [0.7, -1.3];
            let objective = |q: &NetParams, x: &[f64]| -> f64 {
                q.forward(x)
                    .unwrap()
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (g, gi) = p.backward(&x, &up).unwrap();
            let h = 1e-6;
            let mut fd = vec![0.0; p.num_params()];
            for i in 0..p.num_params() {
                let mut plus = p.clone();
                plus.values[i] += h;
                let mut minus = p.clone();
                minus.values[i] -= h;
                fd[i] = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
            }
            assert!(
                rel_err(&g, &fd) < 1e-6,
                "param grad rel err {}",
                rel_err(&g, &fd)
            );
            let mut fdi = vec![0.0; 3];
            for i in 0..3 {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                fdi[i] = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
            }
            assert!(rel_err(&gi, &fdi) < 1e-6);
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = two_layer(0);
        assert!(matches!(
            p.forward(&[1.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(p.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn init_is_seeded_with_fan_in_variance_and_zero_bias() {
        let shapes = mlp_shapes(64, &[], 160, Activation::Tanh, Activation::Identity);
        let a = init_params(&shapes, 11);
        let b = init_params(&shapes, 11);
        assert_eq!(a, b);
        let weights = &a.values[..64 * 160];
        let var = weights.iter().map(|w| w * w).sum::<f64>() / weights.len() as f64;
        assert!((var * 64.0 - 1.0).abs() < 0.2, "variance {var}");
        assert!(a.values[64 * 160..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn sgd_first_step_is_exact() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grad = [0.5, 0.25, -1.0];
        let mut opt = Optimizer::sgd(0.1, 3);
        opt.step(&mut params, &grad).unwrap();
        assert_eq!(params, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25, 0.5 + 0.1]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut params = vec![1.0, 2.0];
        let mut opt = Optimizer::adam(0.01, 2);
        opt.step(&mut params, &[1.0, -1.0]).unwrap();
        let after_first = params.clone();
        let m = opt.first_moment.clone();
        let v = opt.second_moment.clone();
        // Adam keeps moving on stale momentum; plain zero-gradient checks use SGD.
        let mut sgd = Optimizer::sgd(0.01, 2);
        let mut p2 = after_first.clone();
        sgd.step(&mut p2, &[0.0, 0.0]).unwrap();
        assert_eq!(p2, after_first);
        opt.step(&mut params, &[0.0, 0.0]).unwrap();
        for i in 0..2 {
            assert_eq!(opt.first_moment[i], ADAM_BETA1 * m[i]);
            assert_eq!(opt.second_moment[i], ADAM_BETA2 * v[i]);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut params = vec![1.0, 2.0];
        let mut opt = Optimizer::adam(0.01, 2);
        let err = opt.step(&mut params, &[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged(_)));
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn snapshot_round_trips_bit_exactly() {
        let p = two_layer(9);
        let mut buf = Vec::new();
        p.write_snapshot(&mut buf).unwrap();
        let q = NetParams::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }
}
