//! Dense feedforward networks with exact reverse-mode gradients.
//!
//! A [`DenseNet`] is a chain of affine layers. Every layer except the last is
//! followed by the network's hidden activation; the output layer is linear.
//! A forward pass returns a [`ForwardCache`] holding per-layer pre- and
//! post-activations, which both backward passes reuse:
//!
//! - [`DenseNet::backward_params`] gives dL/dW and dL/db for every layer,
//! - [`DenseNet::backward_input`] gives dL/dx, used to optimize inputs
//!   (latent vectors) and to extract Jacobians.
//!
//! Weights are stored row-major with shape `(outputs, inputs)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y = f(x)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::shape("layer weights", inputs * outputs, weights.len()));
        }
        if biases.len() != outputs {
            return Err(Error::shape("layer biases", outputs, biases.len()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            biases,
        })
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [f64] {
        &mut self.biases
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    #[inline]
    pub fn set_weight(&mut self, row: usize, col: usize, value: f64) {
        self.weights[row * self.inputs + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.inputs..(row + 1) * self.inputs]
    }

    fn affine_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| dot(row, x) + b),
        );
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Feedforward network; hidden layers use `activation`, the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Per-layer activations recorded during a forward pass.
///
/// `activations[0]` is the input; `activations[k + 1]` is the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn activations(&self) -> &[Vec<f64>] {
        &self.activations
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre_activations
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least 2 layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("layer size at position {pos} is zero")));
    }
    Ok(())
}

impl DenseNet {
    /// Random network: weights uniform in `±1/√fan_in`, zero biases.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        Self::with_activation(layer_sizes, Activation::Tanh, seed)
    }

    pub fn with_activation(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let scale = 1.0 / (inputs as f64).sqrt();
                let mut layer = Layer::zeros(inputs, outputs);
                for v in &mut layer.weights {
                    *v = rng.gen_range(-scale..scale);
                }
                layer
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layers: layer_sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            activation: Activation::Tanh,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].inputs != pair[0].outputs {
                return Err(Error::shape("layer chain", pair[0].outputs, pair[1].inputs));
            }
        }
        if let Some(l) = layers.iter().find(|l| l.inputs == 0 || l.outputs == 0) {
            return Err(Error::Config(format!(
                "zero-width layer ({}x{})",
                l.outputs, l.inputs
            )));
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(layer.outputs);
            layer.affine_into(&activations[k], &mut pre);
            let post = if k == last {
                pre.clone()
            } else {
                pre.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre_activations.push(pre);
            activations.push(post);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_width() {
            return Err(Error::shape("network input", self.input_width(), x.len()));
        }
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            layer.affine_into(&cur, &mut next);
            if k != last {
                next.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    fn check_cache(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<()> {
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::shape(
                "forward cache depth",
                self.layers.len() + 1,
                cache.activations.len(),
            ));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if cache.activations[k].len() != layer.inputs {
                return Err(Error::shape("forward cache layer", layer.inputs, cache.activations[k].len()));
            }
        }
        if dl_dy.len() != self.output_width() {
            return Err(Error::shape("output gradient", self.output_width(), dl_dy.len()));
        }
        Ok(())
    }

    /// Reverse pass that adds `scale`-free parameter gradients into `grads`
    /// and optionally returns dL/dx.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        dl_dy: &[f64],
        grads: Option<&mut Gradients>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        self.check_cache(cache, dl_dy)?;
        let mut grads = grads;
        if let Some(g) = grads.as_deref() {
            g.check_matches(self)?;
        }
        let last = self.layers.len() - 1;
        let mut delta = dl_dy.to_vec();
        let mut dx = None;
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k != last {
                let post = &cache.activations[k + 1];
                for (d, &y) in delta.iter_mut().zip(post) {
                    *d *= self.activation.derivative_from_output(y);
                }
            }
            let x = &cache.activations[k];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[k];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gl.biases[o] += d;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, &xi) in row.iter_mut().zip(x) {
                        *w += d * xi;
                    }
                }
            }
            if k == 0 && !want_input {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(layer.row(o)) {
                    *p += d * w;
                }
            }
            if k == 0 {
                dx = Some(prev);
                break;
            }
            delta = prev;
        }
        Ok(dx)
    }

    pub fn backward_params(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_accumulate(cache, dl_dy, Some(&mut grads), false)?;
        Ok(grads)
    }

    pub fn backward_input(&self, cache: &ForwardCache, dl_dy: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .backward_accumulate(cache, dl_dy, None, true)?
            .expect("input gradient requested"))
    }

    /// Jacobian `∂y/∂x` at `x`, one row per output.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cache = self.forward(x)?;
        let mut seed = vec![0.0; self.output_width()];
        (0..self.output_width())
            .map(|o| {
                seed.iter_mut().for_each(|v| *v = 0.0);
                seed[o] = 1.0;
                self.backward_input(&cache, &seed)
            })
            .collect()
    }

    /// Portable text form: a header line, then each layer's weight rows and
    /// bias row as 17-significant-digit decimals.
    pub fn to_text(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes().iter().map(|s| s.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "densenet version={} activation={} layer_sizes={}",
            FORMAT_VERSION,
            self.activation.name(),
            sizes.join(",")
        );
        for (k, layer) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "layer {} {} {}", k, layer.outputs, layer.inputs);
            for row in layer.weights.chunks_exact(layer.inputs) {
                write_row(&mut out, row);
            }
            out.push_str("bias");
            for b in &layer.biases {
                let _ = write!(out, " {b:.16e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text form from `lines`, advancing the iterator past the
    /// network. `line_offset` is used only for error messages.
    pub fn parse_lines<'a, I>(lines: &mut I, line_offset: usize) -> Result<Self>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::parse(line_offset, "missing densenet header"))?;
        let fields = parse_header_fields(header, "densenet").map_err(|m| Error::parse(ln, m))?;
        let version: u32 = field(&fields, "version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(ln, "bad or missing version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(ln, format!("unsupported densenet version {version}")));
        }
        let activation = field(&fields, "activation")
            .and_then(Activation::from_name)
            .ok_or_else(|| Error::parse(ln, "bad or missing activation"))?;
        let sizes: Vec<usize> = field(&fields, "layer_sizes")
            .ok_or_else(|| Error::parse(ln, "missing layer_sizes"))?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(ln, format!("layer_sizes: {e}")))?;
        validate_sizes(&sizes).map_err(|e| Error::parse(ln, e.to_string()))?;

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (k, w) in sizes.windows(2).enumerate() {
            let (inputs, outputs) = (w[0], w[1]);
            let (ln, head) = lines
                .next()
                .ok_or_else(|| Error::parse(ln, format!("missing layer {k}")))?;
            let expect = format!("layer {k} {outputs} {inputs}");
            if head.trim() != expect {
                return Err(Error::parse(ln, format!("expected `{expect}`, found `{}`", head.trim())));
            }
            let mut weights = Vec::with_capacity(inputs * outputs);
            for _ in 0..outputs {
                let (ln, row) = lines
                    .next()
                    .ok_or_else(|| Error::parse(ln, "truncated weight rows"))?;
                let vals = parse_numbers(row).map_err(|m| Error::parse(ln, m))?;
                if vals.len() != inputs {
                    return Err(Error::parse(ln, format!("expected {inputs} weights, found {}", vals.len())));
                }
                weights.extend(vals);
            }
            let (ln, bias) = lines
                .next()
                .ok_or_else(|| Error::parse(ln, "missing bias row"))?;
            let rest = bias
                .trim()
                .strip_prefix("bias")
                .ok_or_else(|| Error::parse(ln, "expected bias row"))?;
            let biases = parse_numbers(rest).map_err(|m| Error::parse(ln, m))?;
            layers.push(Layer::from_parts(inputs, outputs, weights, biases).map_err(|e| Error::parse(ln, e.to_string()))?);
        }
        Self::from_layers(layers, activation)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        Self::parse_lines(&mut lines, 1)
    }
}

pub(crate) fn write_row(out: &mut String, row: &[f64]) {
    let mut first = true;
    for v in row {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

pub(crate) fn parse_numbers(line: &str) -> std::result::Result<Vec<f64>, String> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

pub(crate) fn parse_header_fields<'a>(
    line: &'a str,
    tag: &str,
) -> std::result::Result<Vec<(&'a str, &'a str)>, String> {
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some(t) if t == tag => {}
        other => return Err(format!("expected `{tag}` header, found {other:?}")),
    }
    parts
        .map(|p| p.split_once('=').ok_or_else(|| format!("malformed field `{p}`")))
        .collect()
}

pub(crate) fn field<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

/// Parameter gradients with the same shapes as a network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_matches(&self, net: &DenseNet) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(Error::shape("gradient depth", net.layers.len(), self.layers.len()));
        }
        for (g, l) in self.layers.iter().zip(&net.layers) {
            if g.inputs != l.inputs || g.outputs != l.outputs {
                return Err(Error::shape("gradient layer", l.param_count(), g.param_count()));
            }
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.biases.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += factor * b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    PlainDescent,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer accumulators for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Gradients,
    second_moment: Gradients,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
        }
    }

    pub fn adam(net: &DenseNet, learning_rate: f64) -> Self {
        Self::new(net, OptimizerKind::adam(), learning_rate)
    }

    pub fn plain(net: &DenseNet, learning_rate: f64) -> Self {
        Self::new(net, OptimizerKind::PlainDescent, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }
}

/// Applies one optimizer step to `net` in place.
pub fn apply_update(net: &mut DenseNet, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    grads.check_matches(net)?;
    state.first_moment.check_matches(net)?;
    state.step += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::PlainDescent => {
            for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
                for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                    *p -= lr * d;
                }
                for (p, d) in layer.biases.iter_mut().zip(&g.biases) {
                    *p -= lr * d;
                }
            }
        }
        OptimizerKind::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let t = state.step as f64;
            let c1 = 1.0 - beta1.powf(t);
            let c2 = 1.0 - beta2.powf(t);
            let params = net
                .layers
                .iter_mut()
                .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()));
            let m = state.first_moment.values_mut();
            let v = state.second_moment.values_mut();
            for (((p, g), m), v) in params.zip(grads.values()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
    Ok(())
}
