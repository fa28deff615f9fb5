//! Feed-forward classifier with exact reverse-mode gradients.
//!
//! The network is a chain of dense layers. The last layer is linear and its
//! output (the logits) is turned into class probabilities with a softmax.
//! The post-activation of the last hidden layer is the latent feature that
//! the GMM regularizer and the manifold smoothness term operate on, so the
//! backward pass accepts an extra upstream gradient injected at that layer.

use std::cell::Cell;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

pub const CHECKPOINT_MAGIC: &str = "MATNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre- and post-activation values. ReLU uses 0 at 0.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidSpec(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

/// Builds the layer chain `dims[0] -> dims[1] -> ... -> dims[n]` with the
/// given hidden activation and a linear output layer.
pub fn mlp_specs(dims: &[usize], hidden: Activation) -> Vec<LayerSpec> {
    let last = dims.len().saturating_sub(2);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last {
                Activation::Identity
            } else {
                hidden
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weights.cols(), self.weights.rows(), self.activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    latent_index: usize,
}

thread_local! {
    static FORWARD_PASSES: Cell<u64> = const { Cell::new(0) };
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// `(forward, backward)` passes run on this thread since the last reset.
pub fn pass_counts() -> (u64, u64) {
    (
        FORWARD_PASSES.with(Cell::get),
        BACKWARD_PASSES.with(Cell::get),
    )
}

pub fn reset_pass_counts() {
    FORWARD_PASSES.with(|c| c.set(0));
    BACKWARD_PASSES.with(|c| c.set(0));
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::InvalidSpec(
            "need at least one hidden layer and an output layer".into(),
        ));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {i} has a zero dimension"
            )));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::InvalidSpec(format!(
                "layer {i} expects {} inputs but layer {} produces {}",
                s.in_dim,
                i - 1,
                specs[i - 1].out_dim
            )));
        }
    }
    if specs.last().map(|s| s.activation) != Some(Activation::Identity) {
        return Err(Error::InvalidSpec("output layer must be linear".into()));
    }
    Ok(())
}

impl NetworkParams {
    /// Glorot-uniform weights from a seeded generator, zero biases. The latent
    /// layer is the last hidden layer.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|s| {
                let bound = (6.0 / (s.in_dim + s.out_dim) as f64).sqrt();
                let data = (0..s.in_dim * s.out_dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weights: Matrix::new(s.out_dim, s.in_dim, data).expect("finite init"),
                    bias: vec![0.0; s.out_dim],
                    activation: s.activation,
                }
            })
            .collect::<Vec<_>>();
        let latent_index = layers.len() - 2;
        Ok(Self {
            layers,
            latent_index,
        })
    }

    pub fn from_layers(layers: Vec<Layer>, latent_index: usize) -> Result<Self> {
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        validate_specs(&specs)?;
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.rows() {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} bias length mismatch"
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("bias"));
            }
        }
        if latent_index + 1 >= layers.len() {
            return Err(Error::InvalidSpec(format!(
                "latent layer {latent_index} is not a hidden layer"
            )));
        }
        Ok(Self {
            layers,
            latent_index,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn latent_index(&self) -> usize {
        self.latent_index
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.latent_index].weights.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Weights (row-major) then bias, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for l in &mut out.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for a network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        FORWARD_PASSES.with(|c| c.set(c.get() + 1));
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { x } else { &post[k - 1] };
            let z = affine(layer, input);
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(a);
        }
        let logits = post.last().expect("non-empty");
        let log_probs = log_softmax(logits);
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
            log_probs,
            probs,
            latent_index: self.latent_index,
        })
    }

    /// Gradients of a scalar loss given its gradient at the logits.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>)> {
        let mut grads = ParamGrads::zeros_like(self);
        let input = self.backprop(
            trace,
            Upstream {
                logits: grad_logits,
                latent: None,
            },
            Some(&mut grads),
            true,
        )?;
        Ok((grads, input.expect("requested")))
    }

    /// General backward pass.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the input
    /// gradient is returned when `want_input` is set.
    pub fn backprop(
        &self,
        trace: &ForwardTrace,
        upstream: Upstream<'_>,
        mut grads: Option<&mut ParamGrads>,
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        let n_layers = self.layers.len();
        if trace.pre.len() != n_layers || trace.input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch("trace does not match network".into()));
        }
        if upstream.logits.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient of length {} for {} outputs",
                upstream.logits.len(),
                self.output_dim()
            )));
        }
        if let Some(g) = upstream.latent {
            if g.len() != self.latent_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "latent gradient of length {} for latent dimension {}",
                    g.len(),
                    self.latent_dim()
                )));
            }
        }
        if let Some(g) = grads.as_deref() {
            if g.weights.len() != n_layers {
                return Err(Error::ShapeMismatch(
                    "gradient buffer does not match network".into(),
                ));
            }
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));

        let mut g_post = upstream.logits.to_vec();
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            if k == self.latent_index {
                if let Some(g) = upstream.latent {
                    axpy(1.0, g, &mut g_post);
                }
            }
            let g_pre: Vec<f64> = g_post
                .iter()
                .zip(&trace.pre[k])
                .zip(&trace.post[k])
                .map(|((g, &z), &a)| g * layer.activation.derivative(z, a))
                .collect();
            let input = if k == 0 {
                &trace.input
            } else {
                &trace.post[k - 1]
            };
            if let Some(grads) = grads.as_deref_mut() {
                let gw = &mut grads.weights[k];
                let cols = layer.weights.cols();
                for (o, &g) in g_pre.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, input, &mut gw[o * cols..(o + 1) * cols]);
                    }
                }
                axpy(1.0, &g_pre, &mut grads.biases[k]);
            }
            if k == 0 && !want_input {
                return Ok(None);
            }
            let mut g_in = vec![0.0; layer.weights.cols()];
            for (o, &g) in g_pre.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, layer.weights.row(o), &mut g_in);
                }
            }
            g_post = g_in;
        }
        Ok(Some(g_post))
    }

    /// `θ ← θ + s·g`.
    pub fn add_scaled(&mut self, s: f64, g: &ParamGrads) -> Result<()> {
        if g.weights.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(
                "gradient buffer does not match network".into(),
            ));
        }
        if s == 0.0 {
            return Ok(());
        }
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&g.weights).zip(&g.biases) {
            axpy(s, gw, layer.weights.as_mut_slice());
            axpy(s, gb, &mut layer.bias);
        }
        if self.layers.iter().any(|l| {
            l.weights
                .as_slice()
                .iter()
                .chain(&l.bias)
                .any(|v| !v.is_finite())
        }) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.predicted())
    }

    /// Serializes to the text checkpoint format.
    ///
    /// ```text
    /// MATNET1
    /// layers <count> latent <index>
    /// layer <in> <out> <activation>      (one line per layer)
    /// w <k>                              (then <out> lines of <in> values)
    /// b <k>                              (then one line of <out> values)
    /// end
    /// ```
    /// Values use Rust's shortest round-trip exponent notation, so a
    /// save/load cycle is bit-exact.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CHECKPOINT_MAGIC}");
        let _ = writeln!(
            s,
            "layers {} latent {}",
            self.layers.len(),
            self.latent_index
        );
        for l in &self.layers {
            let spec = l.spec();
            let _ = writeln!(
                s,
                "layer {} {} {}",
                spec.in_dim,
                spec.out_dim,
                spec.activation.name()
            );
        }
        for (k, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "w {k}");
            for r in 0..l.weights.rows() {
                push_values(&mut s, l.weights.row(r));
            }
            let _ = writeln!(s, "b {k}");
            push_values(&mut s, &l.bias);
        }
        s.push_str("end\n");
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CHECKPOINT_MAGIC) {
            return Err(bad("missing MATNET1 magic"));
        }
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing header"))?
            .split_whitespace()
            .collect();
        let (n_layers, latent) = match header.as_slice() {
            ["layers", n, "latent", l] => (
                n.parse::<usize>().map_err(|_| bad("bad layer count"))?,
                l.parse::<usize>().map_err(|_| bad("bad latent index"))?,
            ),
            _ => return Err(bad("malformed header")),
        };
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let parts: Vec<&str> = lines
                .next()
                .ok_or_else(|| bad("missing layer line"))?
                .split_whitespace()
                .collect();
            match parts.as_slice() {
                ["layer", i, o, a] => specs.push(LayerSpec::new(
                    i.parse().map_err(|_| bad("bad layer input dim"))?,
                    o.parse().map_err(|_| bad("bad layer output dim"))?,
                    a.parse()?,
                )),
                _ => return Err(bad("malformed layer line")),
            }
        }
        validate_specs(&specs)?;
        let mut layers = Vec::with_capacity(n_layers);
        for (k, spec) in specs.iter().enumerate() {
            expect_tag(lines.next(), "w", k)?;
            let mut w = Vec::with_capacity(spec.in_dim * spec.out_dim);
            for _ in 0..spec.out_dim {
                let row = parse_values(lines.next().ok_or_else(|| bad("truncated weights"))?)?;
                if row.len() != spec.in_dim {
                    return Err(bad("weight row has the wrong length"));
                }
                w.extend(row);
            }
            expect_tag(lines.next(), "b", k)?;
            let bias = parse_values(lines.next().ok_or_else(|| bad("truncated bias"))?)?;
            if bias.len() != spec.out_dim {
                return Err(bad("bias has the wrong length"));
            }
            layers.push(Layer {
                weights: Matrix::new(spec.out_dim, spec.in_dim, w)?,
                bias,
                activation: spec.activation,
            });
        }
        if lines.next().map(str::trim) != Some("end") {
            return Err(bad("missing end marker"));
        }
        Self::from_layers(layers, latent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

fn push_values(s: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:e}");
    }
    s.push('\n');
}

fn parse_values(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Checkpoint(format!("bad value {t:?}")))
        })
        .collect()
}

fn expect_tag(line: Option<&str>, tag: &str, k: usize) -> Result<()> {
    let expected = format!("{tag} {k}");
    match line {
        Some(l) if l.trim() == expected => Ok(()),
        _ => Err(Error::Checkpoint(format!("expected {expected:?}"))),
    }
}

fn affine(layer: &Layer, input: &[f64]) -> Vec<f64> {
    let w = &layer.weights;
    // Raw image inputs are mostly zeros; gather the non-zeros once.
    let nnz = input.iter().filter(|v| **v != 0.0).count();
    if input.len() >= 64 && nnz * 2 < input.len() {
        let idx: Vec<usize> = (0..input.len()).filter(|&i| input[i] != 0.0).collect();
        let vals: Vec<f64> = idx.iter().map(|&i| input[i]).collect();
        (0..w.rows())
            .map(|o| {
                let row = w.row(o);
                let s: f64 = idx.iter().zip(&vals).map(|(&i, v)| row[i] * v).sum();
                s + layer.bias[o]
            })
            .collect()
    } else {
        (0..w.rows())
            .map(|o| dot(w.row(o), input) + layer.bias[o])
            .collect()
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    latent_index: usize,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.post.last().expect("non-empty")
    }

    /// The latent feature `f(x, θ)`.
    pub fn latent(&self) -> &[f64] {
        &self.post[self.latent_index]
    }

    /// Argmax of the output distribution; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.log_probs.iter().enumerate() {
            if p > self.log_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Upstream gradients entering a backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub logits: &'a [f64],
    pub latent: Option<&'a [f64]>,
}

/// Negative log-likelihood of `label`, via log-sum-exp.
pub fn nll_loss(trace: &ForwardTrace, label: usize) -> f64 {
    -trace.log_probs[label]
}

/// Gradient of [`nll_loss`] at the logits: `p - onehot(label)`.
pub fn nll_grad_logits(trace: &ForwardTrace, label: usize) -> Vec<f64> {
    let mut g = trace.probs.clone();
    g[label] -= 1.0;
    g
}

/// Parameter gradients with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.as_slice().len()])
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            axpy(s, b, a);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            axpy(s, b, a);
        }
    }

    /// Same ordering as [`NetworkParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Central-difference gradient estimate `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
///
/// For parameter gradients, pass [`NetworkParams::flatten`] as the point and
/// rebuild the network inside `f` with [`NetworkParams::with_flat`].
pub fn finite_diff_gradient(point: &[f64], f: impl Fn(&[f64]) -> f64, h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}
