//! Dense feed-forward networks with reverse-mode gradients.
//!
//! Everything is `f64`. A network is a stack of affine layers; every hidden
//! layer shares one activation and the last layer has its own. Weights are
//! stored row-major with shape `(fan_out, fan_in)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the activation value `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn default_init_scale() -> f64 {
    1.0
}

/// Architecture plus initialization recipe. Two equal specs always produce
/// bitwise-identical networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Input width first, output width last.
    pub layer_widths: Vec<usize>,
    /// Activation of every hidden layer.
    pub activation: Activation,
    pub output_activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, output_activation: Activation) -> Self {
        Self {
            layer_widths,
            activation,
            output_activation,
            init_seed: 0,
            init_scale: 1.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.init_scale = scale;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layer_widths.len().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "layer_widths needs at least an input and an output width, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(i) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer_widths[{i}] is zero")));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config(format!(
                "init_scale must be finite and non-negative, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Parameters of one affine layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `(fan_out, fan_in)`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LayerParams {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            w: vec![0.0; fan_in * fan_out],
            b: vec![0.0; fan_out],
        }
    }
}

/// A parameter-shaped collection of numbers: gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in == b.fan_in && a.fan_out == b.fan_out)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }
}

/// A dense network. Serializes as `{spec, weights, biases}` with weights as
/// nested row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<LayerParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRepr {
    spec: MlpSpec,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpRepr {
    fn from(net: Mlp) -> Self {
        let weights = net
            .layers
            .iter()
            .map(|l| l.w.chunks(l.fan_in).map(|r| r.to_vec()).collect())
            .collect();
        let biases = net.layers.iter().map(|l| l.b.clone()).collect();
        MlpRepr {
            spec: net.spec,
            weights,
            biases,
        }
    }
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(repr: MlpRepr) -> Result<Self> {
        repr.spec.validate()?;
        let widths = &repr.spec.layer_widths;
        if repr.weights.len() != widths.len() - 1 || repr.biases.len() != widths.len() - 1 {
            return Err(Error::Shape(format!(
                "expected {} layers, got {} weight and {} bias entries",
                widths.len() - 1,
                repr.weights.len(),
                repr.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, (rows, b)) in repr.weights.into_iter().zip(repr.biases).enumerate() {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            if rows.len() != fan_out || rows.iter().any(|r| r.len() != fan_in) || b.len() != fan_out {
                return Err(Error::Shape(format!(
                    "layer {l}: expected weights {fan_out}x{fan_in} and {fan_out} biases"
                )));
            }
            layers.push(LayerParams {
                fan_in,
                fan_out,
                w: rows.into_iter().flatten().collect(),
                b,
            });
        }
        Ok(Mlp {
            spec: repr.spec,
            layers,
        })
    }
}

/// Draws every parameter from `uniform(-s, s)` with `s = init_scale / sqrt(fan_in)`.
pub fn init_mlp(spec: &MlpSpec) -> Result<Mlp> {
    spec.validate()?;
    let mut rng = seed::rng(spec.init_seed);
    let layers = spec
        .layer_widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = spec.init_scale / (fan_in as f64).sqrt();
            let mut draw = || (2.0 * rng.gen::<f64>() - 1.0) * s;
            let weights = (0..fan_in * fan_out).map(|_| draw()).collect();
            let biases = (0..fan_out).map(|_| draw()).collect();
            LayerParams {
                fan_in,
                fan_out,
                w: weights,
                b: biases,
            }
        })
        .collect();
    Ok(Mlp {
        spec: spec.clone(),
        layers,
    })
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`; each is
    /// row-major `(batch, width)`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    /// Network output, row-major `(batch, out_dim)`.
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Pre-activation of the output layer (logits for a sigmoid critic).
    pub fn output_logits(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

/// Where the upstream gradient handed to [`Mlp::backward`] is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradAt {
    /// With respect to the network output.
    Output,
    /// With respect to the output layer's pre-activation.
    Logits,
}

impl Mlp {
    /// Builds a network from explicit parameters; `weights[l]` is a list of rows.
    pub fn from_parts(spec: MlpSpec, weights: Vec<Vec<Vec<f64>>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        MlpRepr {
            spec,
            weights,
            biases,
        }
        .try_into()
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn params(&self) -> Params {
        Params {
            layers: self.layers.clone(),
        }
    }

    pub fn param_values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    pub fn all_finite(&self) -> bool {
        self.param_values().all(|v| v.is_finite())
    }

    fn act_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.spec.output_activation
        } else {
            self.spec.activation
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.apply(x))
    }

    /// Forward pass without the dimension check.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.act_for(l);
            cur = (0..layer.fan_out)
                .map(|o| {
                    let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    // Same accumulation order as `forward_flat`, so both paths agree bitwise.
                    let mut z = layer.b[o];
                    for (w, v) in row.iter().zip(&cur) {
                        z += w * v;
                    }
                    act.apply(z)
                })
                .collect();
        }
        cur
    }

    /// Forward pass over a row-major `(batch, in_dim)` buffer, recording a tape.
    pub fn forward_flat(&self, input: Vec<f64>, batch: usize) -> Tape {
        debug_assert_eq!(input.len(), batch * self.input_dim());
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        acts.push(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.act_for(l);
            let x = &acts[l];
            let mut z = vec![0.0; batch * layer.fan_out];
            let mut a = vec![0.0; batch * layer.fan_out];
            for n in 0..batch {
                let xn = &x[n * layer.fan_in..(n + 1) * layer.fan_in];
                for o in 0..layer.fan_out {
                    let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    let mut s = layer.b[o];
                    for (w, v) in row.iter().zip(xn) {
                        s += w * v;
                    }
                    z[n * layer.fan_out + o] = s;
                    a[n * layer.fan_out + o] = act.apply(s);
                }
            }
            pre.push(z);
            acts.push(a);
        }
        Tape { batch, acts, pre }
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Tape {
        let flat = xs.iter().flat_map(|x| x.iter().copied()).collect();
        self.forward_flat(flat, xs.len())
    }

    /// Maps every row of a sample set.
    pub fn map_all(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }

    /// Reverse pass. `upstream` is row-major `(batch, out_dim)`. Returns the
    /// parameter gradients and, when asked, the gradient with respect to the
    /// input rows.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], at: GradAt, want_input: bool) -> (Params, Option<Vec<f64>>) {
        let batch = tape.batch;
        let mut grads = Params::zeros_like(self);
        let last = self.layers.len() - 1;
        let mut delta = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if !(l == last && at == GradAt::Logits) {
                let act = self.act_for(l);
                if act != Activation::Identity {
                    for ((d, &z), &a) in delta.iter_mut().zip(&tape.pre[l]).zip(&tape.acts[l + 1]) {
                        *d *= act.derivative(z, a);
                    }
                }
            }
            let x = &tape.acts[l];
            let g = &mut grads.layers[l];
            for n in 0..batch {
                let dn = &delta[n * layer.fan_out..(n + 1) * layer.fan_out];
                let xn = &x[n * layer.fan_in..(n + 1) * layer.fan_in];
                for (o, &d) in dn.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.b[o] += d;
                    let grow = &mut g.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (gw, &v) in grow.iter_mut().zip(xn) {
                        *gw += d * v;
                    }
                }
            }
            if l > 0 || want_input {
                let mut prev = vec![0.0; batch * layer.fan_in];
                for n in 0..batch {
                    let dn = &delta[n * layer.fan_out..(n + 1) * layer.fan_out];
                    let pn = &mut prev[n * layer.fan_in..(n + 1) * layer.fan_in];
                    for (o, &d) in dn.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (p, &w) in pn.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
        }
        let input_grad = if want_input { Some(delta) } else { None };
        (grads, input_grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Sum of absolute coordinate differences.
    L1,
    /// Sum of squared coordinate differences.
    L2,
}

impl Loss {
    #[inline]
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Loss::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Loss::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        }
    }

    /// d loss / d a, scaled by `weight`, accumulated into `out`.
    #[inline]
    pub fn grad_into(self, a: &[f64], b: &[f64], weight: f64, out: &mut [f64]) {
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            let d = x - y;
            *o += weight
                * match self {
                    Loss::L1 => sign(d),
                    Loss::L2 => 2.0 * d,
                };
        }
    }
}

/// `sign(0) = 0`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted supervised loss `sum_i w_i * loss(net(x_i), t_i)` and its exact
/// gradient. Without weights every sample gets `1/n`.
pub fn loss_grad(
    net: &Mlp,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    loss: Loss,
    weights: Option<&[f64]>,
) -> Result<(f64, Params)> {
    if inputs.is_empty() {
        return Err(Error::Usage("loss_grad on an empty batch".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != inputs.len() {
            return Err(Error::Shape(format!("{} weights for {} samples", w.len(), inputs.len())));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Numeric("sample weights must be finite and non-negative".into()));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!("sample weights sum to {total}, expected 1")));
        }
    }
    for (i, (x, t)) in inputs.iter().zip(targets).enumerate() {
        if x.len() != net.input_dim() || t.len() != net.output_dim() {
            return Err(Error::Shape(format!("sample {i} has the wrong dimension")));
        }
        if x.iter().chain(t).any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN in sample {i}")));
        }
    }
    let n = inputs.len();
    let uniform = 1.0 / n as f64;
    let tape = net.forward_batch(inputs);
    let out = tape.output();
    let od = net.output_dim();
    let mut upstream = vec![0.0; out.len()];
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let w = weights.map_or(uniform, |w| w[i]);
        let o = &out[i * od..(i + 1) * od];
        total += w * loss.eval(o, t);
        loss.grad_into(o, t, w, &mut upstream[i * od..(i + 1) * od]);
    }
    let (grads, _) = net.backward(&tape, &upstream, GradAt::Output, false);
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// Optimizer state for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub kind: OptKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub step_count: u64,
    first: Params,
    second: Params,
}

impl OptState {
    pub fn sgd(net: &Mlp, learning_rate: f64) -> Self {
        Self::new(OptKind::Sgd, net, learning_rate)
    }

    pub fn adam(net: &Mlp, learning_rate: f64) -> Self {
        Self::new(OptKind::Adam, net, learning_rate)
    }

    pub fn new(kind: OptKind, net: &Mlp, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            step_count: 0,
            first: Params::zeros_like(net),
            second: Params::zeros_like(net),
        }
    }

    pub fn first_moment(&self) -> &Params {
        &self.first
    }

    pub fn second_moment(&self) -> &Params {
        &self.second
    }

    /// Applies one update. Non-finite gradients are rejected before anything
    /// is touched.
    pub fn step(&mut self, net: &mut Mlp, grads: &Params) -> Result<()> {
        if !self.first.same_shape(grads) {
            return Err(Error::Shape("gradient shape does not match the optimizer state".into()));
        }
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptKind::Sgd => {
                for (p, g) in net.param_values_mut().zip(grads.values()) {
                    *p -= lr * g;
                }
            }
            OptKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps_adam);
                let t = self.step_count as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in net
                    .param_values_mut()
                    .zip(grads.values())
                    .zip(self.first.values_mut())
                    .zip(self.second.values_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        if !net.all_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Largest relative disagreement between the analytic gradient of the
/// unweighted batch loss and central differences with step `h`:
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(net: &Mlp, inputs: &[Vec<f64>], targets: &[Vec<f64>], loss: Loss, h: f64) -> Result<f64> {
    let (_, analytic) = loss_grad(net, inputs, targets, loss, None)?;
    let eval = |n: &Mlp| -> Result<f64> { Ok(loss_grad(n, inputs, targets, loss, None)?.0) };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.values().enumerate() {
        let orig = *probe.param_values().nth(k).unwrap();
        *probe.param_values_mut().nth(k).unwrap() = orig + h;
        let plus = eval(&probe)?;
        *probe.param_values_mut().nth(k).unwrap() = orig - h;
        let minus = eval(&probe)?;
        *probe.param_values_mut().nth(k).unwrap() = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
