//! Fixed-topology feed-forward networks with exact backpropagation and Adam.
//!
//! Hidden layers use ReLU (subgradient 0 at the kink). The output layer is
//! either the identity (critics, ensemble members) or a tanh squashed into a
//! box (actor). Everything is `f64`.
//!
//! Weights are stored `fan_in × fan_out` so a batch `X` (rows = samples) maps
//! through a layer as `X·W + b`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// How the last layer's pre-activation is turned into the network output.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    Identity,
    /// `mid + half_range ⊙ tanh(z)`, i.e. squashed into `[low, high]`.
    TanhScaled {
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl OutputHead {
    pub fn tanh_bounds(low: &[f64], high: &[f64]) -> Self {
        OutputHead::TanhScaled {
            low: low.to_vec(),
            high: high.to_vec(),
        }
    }

    fn check(&self, out_dim: usize) -> Result<()> {
        if let OutputHead::TanhScaled { low, high } = self {
            if low.len() != out_dim {
                return Err(Error::shape("output head bounds", out_dim, low.len()));
            }
            if high.len() != out_dim {
                return Err(Error::shape("output head bounds", out_dim, high.len()));
            }
        }
        Ok(())
    }
}

/// Parameters of an MLP: `layer_sizes = [input, hidden.., output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    layers: Vec<Dense>,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Parameter and input gradient of a scalar-output network at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub by_parameter: MlpGrads,
    pub by_input: Vec<f64>,
}

/// Activations retained from a batched forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl MlpParams {
    /// Uniform fan-in initialization: every weight and bias of a layer is
    /// drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(layer_sizes, &mut rng)
    }

    pub fn init_with_rng<R: rand::Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..=bound));
                let bias = Array1::from_shape_simple_fn(fan_out, || rng.gen_range(-bound..=bound));
                Dense { weight, bias }
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
        })
    }

    /// Build from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].weight.nrows()];
        for layer in &layers {
            let fan_in = *sizes.last().unwrap();
            if layer.weight.nrows() != fan_in {
                return Err(Error::shape("layer chaining", fan_in, layer.weight.nrows()));
            }
            if layer.bias.len() != layer.weight.ncols() {
                return Err(Error::shape("bias length", layer.weight.ncols(), layer.bias.len()));
            }
            if !layer.is_finite() {
                return Err(Error::NonFinite("network parameters"));
            }
            sizes.push(layer.weight.ncols());
        }
        validate_sizes(&sizes)?;
        Ok(Self {
            layer_sizes: sizes,
            layers,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// Largest absolute parameter difference; shapes must match.
    pub fn max_abs_diff(&self, other: &MlpParams) -> f64 {
        assert_eq!(self.layer_sizes, other.layer_sizes);
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                a.weight
                    .iter()
                    .zip(b.weight.iter())
                    .chain(a.bias.iter().zip(b.bias.iter()))
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Euclidean distance over all parameters.
    pub fn l2_distance(&self, other: &MlpParams) -> f64 {
        assert_eq!(self.layer_sizes, other.layer_sizes);
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                a.weight
                    .iter()
                    .zip(b.weight.iter())
                    .chain(a.bias.iter().zip(b.bias.iter()))
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `self ← τ·source + (1−τ)·self`.
    pub fn soft_update_from(&mut self, source: &MlpParams, tau: f64) {
        assert_eq!(self.layer_sizes, source.layer_sizes);
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weight)
                .and(&s.weight)
                .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
            Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
        }
    }

    /// Forward pass for a single input vector.
    pub fn forward(&self, input: &[f64], head: &OutputHead) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::shape("network input", self.input_dim(), input.len()))?;
        let out = self.forward_batch(x, head)?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch (rows are samples).
    pub fn forward_batch(&self, x: ArrayView2<f64>, head: &OutputHead) -> Result<Array2<f64>> {
        self.check_input(x)?;
        head.check(self.output_dim())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(relu);
            }
            h = z;
        }
        apply_head(&mut h, head);
        Ok(h)
    }

    /// Forward pass that keeps what [`MlpParams::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<f64>, head: &OutputHead) -> Result<ForwardCache> {
        self.check_input(x)?;
        head.check(self.output_dim())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight);
            z += &layer.bias;
            inputs.push(h);
            h = if i < last { z.mapv(relu) } else { z.clone() };
            pre.push(z);
        }
        apply_head(&mut h, head);
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Backpropagate `upstream = ∂L/∂output` (batch × output) through a cached
    /// pass. Returns parameter gradients summed over the batch and the input
    /// gradient per sample.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
        head: &OutputHead,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::shape("upstream gradient", cache.output.len(), upstream.len()));
        }
        if !upstream.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("upstream gradient"));
        }
        let last = self.layers.len() - 1;
        let mut delta = upstream.to_owned();
        if let OutputHead::TanhScaled { low, high } = head {
            // d/dz [mid + half·tanh z] = half·(1 − tanh² z)
            let z = &cache.pre[last];
            for (mut row, zrow) in delta.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))) {
                for (j, d) in row.iter_mut().enumerate() {
                    let t = zrow[j].tanh();
                    *d *= 0.5 * (high[j] - low[j]) * (1.0 - t * t);
                }
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if i < last {
                Zip::from(&mut delta)
                    .and(&cache.pre[i])
                    .for_each(|d, &z| *d *= relu_grad(z));
            }
            let weight = cache.inputs[i].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            delta = delta.dot(&self.layers[i].weight.t());
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Gradients of a scalar-output network, scaled by `upstream`.
    pub fn grad_params(&self, input: &[f64], upstream: f64, head: &OutputHead) -> Result<GradientBundle> {
        if self.output_dim() != 1 {
            return Err(Error::shape("scalar network output", 1, self.output_dim()));
        }
        if !upstream.is_finite() {
            return Err(Error::NonFinite("upstream gradient"));
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::shape("network input", self.input_dim(), input.len()))?;
        let cache = self.forward_cached(x, head)?;
        let up = Array2::from_elem((1, 1), upstream);
        let (by_parameter, dx) = self.backward(&cache, up.view(), head)?;
        Ok(GradientBundle {
            by_parameter,
            by_input: dx.into_raw_vec_and_offset().0,
        })
    }

    /// ∂(scalar output)/∂(input).
    pub fn grad_input(&self, input: &[f64], head: &OutputHead) -> Result<Vec<f64>> {
        Ok(self.grad_params(input, 1.0, head)?.by_input)
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.ncols()));
        }
        Ok(())
    }

    /// Text snapshot. Layout, one record per line:
    ///
    /// ```text
    /// mlp-v1
    /// sizes <n0> <n1> ... <nk>
    /// w <fan_in*fan_out values, row-major over (fan_in, fan_out)>
    /// b <fan_out values>
    /// ...            (one w/b pair per layer, input side first)
    /// ```
    ///
    /// Values use Rust's shortest round-trip float formatting, so parsing the
    /// snapshot reproduces the parameters bit for bit.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("mlp-v1\nsizes");
        for s in &self.layer_sizes {
            write!(out, " {s}").unwrap();
        }
        out.push('\n');
        for layer in &self.layers {
            out.push('w');
            for v in layer.weight.iter() {
                write!(out, " {v:?}").unwrap();
            }
            out.push_str("\nb");
            for v in layer.bias.iter() {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |tag: &str| -> Result<(usize, Vec<&str>)> {
            let (n, line) = lines.next().ok_or_else(|| Error::Snapshot {
                line: 0,
                msg: format!("unexpected end of snapshot, wanted '{tag}'"),
            })?;
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some(t) if t == tag => Ok((n + 1, fields.collect())),
                other => Err(Error::Snapshot {
                    line: n + 1,
                    msg: format!("expected '{tag}', found {other:?}"),
                }),
            }
        };
        next("mlp-v1")?;
        let (line, sizes) = next("sizes")?;
        let sizes: Vec<usize> = sizes
            .iter()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Snapshot {
                line,
                msg: format!("bad layer size: {e}"),
            })?;
        validate_sizes(&sizes)?;
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            let (line, wv) = next("w")?;
            let weight = parse_floats(&wv, w[0] * w[1], line)?;
            let (line, bv) = next("b")?;
            let bias = parse_floats(&bv, w[1], line)?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((w[0], w[1]), weight).expect("length checked"),
                bias: Array1::from(bias),
            });
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_snapshot()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_snapshot(&text)
    }
}

fn parse_floats(fields: &[&str], expected: usize, line: usize) -> Result<Vec<f64>> {
    if fields.len() != expected {
        return Err(Error::Snapshot {
            line,
            msg: format!("expected {expected} values, found {}", fields.len()),
        });
    }
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|e| Error::Snapshot {
                line,
                msg: format!("bad value '{s}': {e}"),
            })
        })
        .collect()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "layer_sizes needs at least input and output, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

#[inline]
fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

#[inline]
fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn apply_head(out: &mut Array2<f64>, head: &OutputHead) {
    if let OutputHead::TanhScaled { low, high } = head {
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                let mid = 0.5 * (high[j] + low[j]);
                let half = 0.5 * (high[j] - low[j]);
                *v = mid + half * v.tanh();
            }
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
    first_moment: Vec<Dense>,
    second_moment: Vec<Dense>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(params: &MlpParams, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_stability: 1e-8,
            first_moment: params.layers.iter().map(Dense::zeros_like).collect(),
            second_moment: params.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    /// One bias-corrected Adam step (descent on `grads`). Non-finite gradients
    /// leave both the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if grads.layers.len() != params.layers.len() {
            return Err(Error::shape("gradient layers", params.layers.len(), grads.layers.len()));
        }
        for (p, g) in params.layers.iter().zip(&grads.layers) {
            if p.weight.dim() != g.weight.dim() || p.bias.len() != g.bias.len() {
                return Err(Error::shape("gradient layer size", p.weight.len(), g.weight.len()));
            }
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps_stability);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            Zip::from(&mut p.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut p.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

/// Concatenate a state batch and an action batch column-wise (`s ‖ a`).
pub fn concat_columns(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts must agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Naive triple-loop forward pass, independent of ndarray's matmul.
    #[allow(clippy::needless_range_loop)]
    fn naive_forward(p: &MlpParams, x: &[f64], head: &OutputHead) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = p.layers().len();
        for (i, layer) in p.layers().iter().enumerate() {
            let (fi, fo) = layer.weight.dim();
            let mut z = vec![0.0; fo];
            for j in 0..fo {
                let mut acc = layer.bias[j];
                for k in 0..fi {
                    acc += h[k] * layer.weight[[k, j]];
                }
                z[j] = if i + 1 < n { acc.max(0.0) } else { acc };
            }
            h = z;
        }
        if let OutputHead::TanhScaled { low, high } = head {
            for (j, v) in h.iter_mut().enumerate() {
                *v = 0.5 * (high[j] + low[j]) + 0.5 * (high[j] - low[j]) * v.tanh();
            }
        }
        h
    }

    fn scalar(p: &MlpParams, x: &[f64], head: &OutputHead) -> f64 {
        p.forward(x, head).unwrap()[0]
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central-difference check of every parameter and input coordinate.
    fn check_gradients(sizes: &[usize], head: &OutputHead, seed: u64) {
        const H: f64 = 1e-5;
        let p = MlpParams::init(sizes, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bundle = p.grad_params(&x, 1.0, head).unwrap();

        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += H;
            xm[i] -= H;
            let fd = (scalar(&p, &xp, head) - scalar(&p, &xm, head)) / (2.0 * H);
            assert!(
                rel_err(fd, bundle.by_input[i]) <= 1e-4,
                "input {i}: fd {fd} vs {}",
                bundle.by_input[i]
            );
        }
        for (l, layer) in p.layers().iter().enumerate() {
            for idx in 0..layer.weight.len() {
                let (r, c) = (idx / layer.weight.ncols(), idx % layer.weight.ncols());
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.layers_mut()[l].weight[[r, c]] += H;
                pm.layers_mut()[l].weight[[r, c]] -= H;
                let fd = (scalar(&pp, &x, head) - scalar(&pm, &x, head)) / (2.0 * H);
                let an = bundle.by_parameter.layers[l].weight[[r, c]];
                assert!(rel_err(fd, an) <= 1e-4, "w[{l}][{r},{c}]: fd {fd} vs {an}");
            }
            for j in 0..layer.bias.len() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.layers_mut()[l].bias[j] += H;
                pm.layers_mut()[l].bias[j] -= H;
                let fd = (scalar(&pp, &x, head) - scalar(&pm, &x, head)) / (2.0 * H);
                let an = bundle.by_parameter.layers[l].bias[j];
                assert!(rel_err(fd, an) <= 1e-4, "b[{l}][{j}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn init_bounds_and_shapes() {
        let p = MlpParams::init(&[1, 1], 0).unwrap();
        assert!(p.layers()[0].weight[[0, 0]].abs() <= 1.0);
        let p = MlpParams::init(&[4, 256, 256, 1], 3).unwrap();
        let shapes: Vec<_> = p.layers().iter().map(|l| l.weight.dim()).collect();
        assert_eq!(shapes, vec![(4, 256), (256, 256), (256, 1)]);
        let bound = 1.0 / 256f64.sqrt();
        assert!(p.layers()[1].weight.iter().all(|w| w.abs() <= bound));
        assert_eq!(p, MlpParams::init(&[4, 256, 256, 1], 3).unwrap());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(MlpParams::init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(MlpParams::init(&[3, 0, 1], 0), Err(Error::Config(_))));
    }

    #[test]
    fn forward_trivial_cases() {
        let z = MlpParams::zeros(&[3, 5, 5, 1]).unwrap();
        assert_eq!(z.forward(&[1.0, -2.0, 3.0], &OutputHead::Identity).unwrap(), vec![0.0]);

        let affine = MlpParams::from_layers(vec![Dense {
            weight: array![[2.0]],
            bias: array![1.0],
        }])
        .unwrap();
        assert_eq!(affine.forward(&[3.0], &OutputHead::Identity).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let p = MlpParams::init(&[3, 4, 1], 0).unwrap();
        assert!(matches!(
            p.forward(&[1.0, 2.0], &OutputHead::Identity),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let heads = [
            OutputHead::Identity,
            OutputHead::tanh_bounds(&[-1.0, -2.0], &[1.0, 0.5]),
        ];
        for seed in 0..20 {
            for head in &heads {
                let p = MlpParams::init(&[5, 32, 32, 2], seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let got = p.forward(&x, head).unwrap();
                let want = naive_forward(&p, &x, head);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn batched_forward_equals_rowwise() {
        let p = MlpParams::init(&[3, 16, 16, 1], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((7, 3), || rng.gen_range(-1.0..1.0));
        let batch = p.forward_batch(x.view(), &OutputHead::Identity).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let single = p.forward(row.as_slice().unwrap(), &OutputHead::Identity).unwrap();
            assert!((single[0] - batch[[i, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_net_input_gradient_is_weight() {
        let p = MlpParams::from_layers(vec![Dense {
            weight: array![[0.5], [-1.5], [2.0]],
            bias: array![0.3],
        }])
        .unwrap();
        let g = p.grad_input(&[0.1, 0.2, 0.3], &OutputHead::Identity).unwrap();
        assert_eq!(g, vec![0.5, -1.5, 2.0]);

        let p = MlpParams::from_layers(vec![Dense {
            weight: array![[3.0]],
            bias: array![0.0],
        }])
        .unwrap();
        assert_eq!(p.grad_input(&[-4.0], &OutputHead::Identity).unwrap(), vec![3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let p = MlpParams::init(&[4, 8, 8, 1], 2).unwrap();
        let b = p
            .grad_params(&[0.1, 0.2, 0.3, 0.4], 0.0, &OutputHead::Identity)
            .unwrap();
        assert_eq!(b.by_parameter.max_abs(), 0.0);
        assert!(b.by_input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_upstream_is_rejected() {
        let p = MlpParams::init(&[2, 4, 1], 2).unwrap();
        assert!(matches!(
            p.grad_params(&[0.1, 0.2], f64::NAN, &OutputHead::Identity),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // critic-like, ensemble-like and actor-like shapes
        for seed in 0..4 {
            check_gradients(&[5, 12, 12, 1], &OutputHead::Identity, seed);
            check_gradients(&[3, 10, 10, 1], &OutputHead::tanh_bounds(&[-2.0], &[2.0]), seed);
        }
    }

    #[test]
    fn relu_input_gradient_is_locally_constant() {
        let p = MlpParams::init(&[3, 16, 16, 1], 11).unwrap();
        let x = [0.2, -0.4, 0.7];
        // distance to the nearest kink in any layer
        let cache = p
            .forward_cached(ArrayView2::from_shape((1, 3), &x).unwrap(), &OutputHead::Identity)
            .unwrap();
        let min_pre = cache.pre[..2]
            .iter()
            .flat_map(|z| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min);
        assert!(min_pre > 0.0);
        let g0 = p.grad_input(&x, &OutputHead::Identity).unwrap();
        // perturbation small enough that no pre-activation can change sign
        let lipschitz: f64 = p
            .layers()
            .iter()
            .map(|l| l.weight.iter().map(|w| w.abs()).sum::<f64>())
            .product();
        let step = 0.5 * min_pre / lipschitz.max(1.0);
        let x2 = [x[0] + step, x[1] - step, x[2] + step];
        let g1 = p.grad_input(&x2, &OutputHead::Identity).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = MlpParams::from_layers(vec![Dense {
            weight: array![[1.0]],
            bias: array![0.0],
        }])
        .unwrap();
        let mut adam = AdamState::new(&p, 3e-4);
        let mut g = p.zero_grads();
        g.layers[0].weight[[0, 0]] = 1.0;
        adam.step(&mut p, &g).unwrap();
        // t=1: m̂ = g, v̂ = g², step = lr·1/(1+1e-8)
        let expected = 1.0 - 3e-4 / (1.0 + 1e-8);
        assert!((p.layers()[0].weight[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_zero_gradients_are_identity() {
        let mut p = MlpParams::init(&[3, 8, 1], 4).unwrap();
        let orig = p.clone();
        let mut adam = AdamState::new(&p, 3e-4);
        let g = p.zero_grads();
        for _ in 0..50 {
            adam.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(adam.step_count, 50);
    }

    #[test]
    fn adam_rejects_non_finite_and_leaves_state() {
        let mut p = MlpParams::init(&[2, 3, 1], 4).unwrap();
        let orig = p.clone();
        let mut adam = AdamState::new(&p, 3e-4);
        let before = adam.clone();
        let mut g = p.zero_grads();
        g.layers[1].bias[0] = f64::INFINITY;
        assert!(matches!(adam.step(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(p, orig);
        assert_eq!(adam, before);
    }

    #[test]
    fn adam_runs_are_deterministic() {
        let run = || {
            let mut p = MlpParams::init(&[2, 8, 1], 21).unwrap();
            let mut adam = AdamState::new(&p, 1e-2);
            for i in 0..20 {
                let x = [i as f64 * 0.1, 1.0 - i as f64 * 0.05];
                let b = p.grad_params(&x, 1.0, &OutputHead::Identity).unwrap();
                adam.step(&mut p, &b.by_parameter).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn soft_update_interpolates() {
        let src = MlpParams::from_layers(vec![Dense {
            weight: array![[2.0]],
            bias: array![2.0],
        }])
        .unwrap();
        let mut tgt = MlpParams::zeros(&[1, 1]).unwrap();
        tgt.soft_update_from(&src, 0.5);
        assert_eq!(tgt.layers()[0].weight[[0, 0]], 1.0);
        tgt.soft_update_from(&src, 0.0);
        assert_eq!(tgt.layers()[0].weight[[0, 0]], 1.0);
        tgt.soft_update_from(&src, 1.0);
        assert_eq!(tgt, src);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        assert!(MlpParams::from_snapshot("nope").is_err());
        assert!(MlpParams::from_snapshot("mlp-v1\nsizes 2 1\nw 1.0\nb 0.0\n").is_err());
    }

    proptest! {
        #[test]
        fn snapshot_round_trips_bit_exact(seed in any::<u64>(), hidden in 1usize..12, out in 1usize..3) {
            let p = MlpParams::init(&[3, hidden, out], seed).unwrap();
            let q = MlpParams::from_snapshot(&p.to_snapshot()).unwrap();
            prop_assert_eq!(p, q);
        }

        #[test]
        fn tanh_head_stays_in_bounds(seed in any::<u64>(), x in prop::collection::vec(-100.0f64..100.0, 2)) {
            let p = MlpParams::init(&[2, 8, 8, 2], seed).unwrap();
            let head = OutputHead::tanh_bounds(&[-1.0, 0.0], &[1.0, 3.0]);
            let y = p.forward(&x, &head).unwrap();
            prop_assert!((-1.0..=1.0).contains(&y[0]));
            prop_assert!((0.0..=3.0).contains(&y[1]));
        }
    }
}
