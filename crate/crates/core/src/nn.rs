//! Dense-network engine: stacks of fully connected layers, column-major batches
//! (one sample per column), explicit forward traces and hand-written backprop.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Pointwise (or column-wise, for softmax) non-linearity applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softmax,
}

impl Activation {
    pub fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|z| z.max(0.0)),
            Activation::Tanh => pre.mapv(f64::tanh),
            Activation::Softmax => softmax_columns(pre.view()),
        }
    }

    /// Gradient w.r.t. the pre-activation given the gradient w.r.t. the output.
    fn backprop(self, pre: &Array2<f64>, post: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                Zip::from(pre)
                    .and(grad)
                    .map_collect(|&z, &g| if z > 0.0 { g } else { 0.0 })
            }
            Activation::Tanh => Zip::from(post).and(grad).map_collect(|&a, &g| g * (1.0 - a * a)),
            Activation::Softmax => softmax_backprop(post, grad),
        }
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    out
}

/// Vector-Jacobian product of softmax: `s ⊙ (g − ⟨s, g⟩)` per column.
pub fn softmax_backprop(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, s), g) in out
        .columns_mut()
        .into_iter()
        .zip(probs.columns())
        .zip(grad.columns())
    {
        let dot = s.dot(&g);
        Zip::from(&mut o)
            .and(&s)
            .and(&g)
            .for_each(|o, &s, &g| *o = s * (g - dot));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(
                "dense layer bias",
                weights.nrows(),
                bias.len(),
            ));
        }
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient("dense layer initial value".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_size: usize, out_size: usize) -> Self {
        Self {
            weights: Array2::zeros((out_size, in_size)),
            bias: Array1::zeros(out_size),
        }
    }

    /// Uniform in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_size: usize, out_size: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_size + out_size) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = Array2::from_shape_simple_fn((out_size, in_size), || dist.sample(rng));
        Self {
            weights,
            bias: Array1::zeros(out_size),
        }
    }

    pub fn in_size(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn pre_activation(&self, input: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.weights.dot(&input);
        z += &self.bias.view().insert_axis(Axis(1));
        z
    }
}

/// Train mode carries the generator used for dropout masks.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    pub fn reborrow(&mut self) -> Pass<'_> {
        match self {
            Pass::Eval => Pass::Eval,
            Pass::Train(rng) => Pass::Train(&mut **rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    /// Activation output before dropout.
    pub post: Array2<f64>,
    /// Inverted-dropout mask (entries `0` or `1/keep`), train mode only.
    pub mask: Option<Array2<f64>>,
}

impl LayerTrace {
    pub fn output(&self) -> Array2<f64> {
        match &self.mask {
            Some(mask) => &self.post * mask,
            None => self.post.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub steps: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    pub fn output(&self) -> Array2<f64> {
        self.steps.last().map(LayerTrace::output).unwrap_or_default()
    }

    /// Recomputes the forward pass using the recorded dropout masks.
    pub fn replay(&self, layers: &[DenseLayer], activations: &[Activation]) -> Array2<f64> {
        let mut x = match self.steps.first() {
            Some(step) => step.input.clone(),
            None => return Array2::zeros((0, 0)),
        };
        for ((layer, act), step) in layers.iter().zip(activations).zip(&self.steps) {
            let post = act.apply(&layer.pre_activation(x.view()));
            x = match &step.mask {
                Some(mask) => &post * mask,
                None => post,
            };
        }
        x
    }
}

/// Runs `input` (`in × batch`) through the stack. `dropout[i]` is the drop rate
/// applied to layer `i`'s output in train mode.
pub fn forward(
    layers: &[DenseLayer],
    activations: &[Activation],
    dropout: &[f64],
    input: ArrayView2<f64>,
    mut pass: Pass<'_>,
) -> Result<(Array2<f64>, ForwardTrace)> {
    if activations.len() != layers.len() || dropout.len() != layers.len() {
        return Err(Error::shape(
            "network definition (activations, dropout)",
            layers.len(),
            format!("{}, {}", activations.len(), dropout.len()),
        ));
    }
    if input.ncols() == 0 {
        return Err(Error::shape("network input batch", ">= 1 column", 0));
    }
    let mut steps = Vec::with_capacity(layers.len());
    let mut x = input.to_owned();
    for (i, ((layer, &act), &rate)) in layers.iter().zip(activations).zip(dropout).enumerate() {
        if x.nrows() != layer.in_size() {
            return Err(Error::shape(
                format!("layer {i} input"),
                layer.in_size(),
                x.nrows(),
            ));
        }
        let pre = layer.pre_activation(x.view());
        let post = act.apply(&pre);
        let mask = match &mut pass {
            Pass::Train(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                Some(Array2::from_shape_simple_fn(post.raw_dim(), || {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                }))
            }
            _ => None,
        };
        let step = LayerTrace {
            input: x,
            pre,
            post,
            mask,
        };
        x = step.output();
        steps.push(step);
    }
    Ok((x, ForwardTrace { steps }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGradient {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub input: Array2<f64>,
}

/// Backpropagates `output_gradient` through a recorded pass.
///
/// `taps` injects extra gradient w.r.t. an intermediate layer's activation
/// output (before dropout), as `(layer_index, gradient)`.
pub fn backward(
    layers: &[DenseLayer],
    activations: &[Activation],
    trace: &ForwardTrace,
    output_gradient: ArrayView2<f64>,
    taps: &[(usize, ArrayView2<f64>)],
) -> Result<Gradients> {
    if trace.depth() != layers.len() || activations.len() != layers.len() {
        return Err(Error::shape("trace depth", layers.len(), trace.depth()));
    }
    let last = trace
        .steps
        .last()
        .ok_or_else(|| Error::shape("trace depth", ">= 1", 0))?;
    if output_gradient.raw_dim() != last.post.raw_dim() {
        return Err(Error::shape(
            "output gradient",
            format!("{:?}", last.post.dim()),
            format!("{:?}", output_gradient.dim()),
        ));
    }
    for (idx, tap) in taps {
        let step = trace
            .steps
            .get(*idx)
            .ok_or_else(|| Error::shape("tap layer index", format!("< {}", layers.len()), idx))?;
        if tap.raw_dim() != step.post.raw_dim() {
            return Err(Error::shape(
                format!("tap gradient for layer {idx}"),
                format!("{:?}", step.post.dim()),
                format!("{:?}", tap.dim()),
            ));
        }
    }

    let mut grads = Vec::with_capacity(layers.len());
    let mut g = output_gradient.to_owned();
    for (i, ((layer, act), step)) in layers
        .iter()
        .zip(activations)
        .zip(&trace.steps)
        .enumerate()
        .rev()
    {
        if let Some(mask) = &step.mask {
            g *= mask;
        }
        for (_, tap) in taps.iter().filter(|(idx, _)| *idx == i) {
            g += tap;
        }
        let gz = act.backprop(&step.pre, &step.post, &g);
        grads.push(LayerGradient {
            weights: gz.dot(&step.input.t()),
            bias: gz.sum_axis(Axis(1)),
        });
        g = layer.weights.t().dot(&gz);
    }
    grads.reverse();
    Ok(Gradients {
        layers: grads,
        input: g,
    })
}

/// `p ← p − lr · g` for every layer. Nothing is updated if any gradient is
/// non-finite; the error names the offending tensor using `name`.
pub fn sgd_step(
    layers: &mut [DenseLayer],
    gradients: &[LayerGradient],
    learning_rate: f64,
    name: &str,
) -> Result<()> {
    if layers.len() != gradients.len() {
        return Err(Error::shape(
            format!("{name} gradient count"),
            layers.len(),
            gradients.len(),
        ));
    }
    for (i, (layer, grad)) in layers.iter().zip(gradients).enumerate() {
        if layer.weights.raw_dim() != grad.weights.raw_dim() || layer.bias.len() != grad.bias.len()
        {
            return Err(Error::shape(
                format!("{name} layer {i} gradient"),
                format!("{:?}", layer.weights.dim()),
                format!("{:?}", grad.weights.dim()),
            ));
        }
        if !grad.weights.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}.layer{i}.weights")));
        }
        if !grad.bias.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}.layer{i}.bias")));
        }
    }
    for (layer, grad) in layers.iter_mut().zip(gradients) {
        layer.weights.scaled_add(-learning_rate, &grad.weights);
        layer.bias.scaled_add(-learning_rate, &grad.bias);
    }
    Ok(())
}

/// Optimizer settings shared by the trainers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 32,
            max_epochs: 200,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("epoch budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// A stack of dense layers with a fixed activation per layer and dropout
/// between consecutive layers (never after the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activations: Vec<Activation>,
    pub dropout: Vec<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, activations: Vec<Activation>, dropout_rate: f64) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::shape(
                "mlp activations",
                layers.len(),
                activations.len(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_size() != pair[1].in_size() {
                return Err(Error::shape(
                    format!("layer {} input", i + 1),
                    pair[0].out_size(),
                    pair[1].in_size(),
                ));
            }
        }
        let mut dropout = vec![dropout_rate; layers.len()];
        *dropout.last_mut().unwrap() = 0.0;
        Ok(Self {
            layers,
            activations,
            dropout,
        })
    }

    /// Glorot-initialised stack with the given layer widths (`sizes[0]` is the input).
    pub fn glorot<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: Vec<Activation>,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::glorot(w[0], w[1], rng))
            .collect();
        Self::new(layers, activations, dropout_rate)
    }

    pub fn in_size(&self) -> usize {
        self.layers[0].in_size()
    }

    pub fn out_size(&self) -> usize {
        self.layers.last().unwrap().out_size()
    }

    pub fn forward(&self, input: ArrayView2<f64>, pass: Pass<'_>) -> Result<(Array2<f64>, ForwardTrace)> {
        forward(&self.layers, &self.activations, &self.dropout, input, pass)
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace,
        output_gradient: ArrayView2<f64>,
        taps: &[(usize, ArrayView2<f64>)],
    ) -> Result<Gradients> {
        backward(&self.layers, &self.activations, trace, output_gradient, taps)
    }

    pub fn sgd_step(&mut self, gradients: &[LayerGradient], learning_rate: f64, name: &str) -> Result<()> {
        sgd_step(&mut self.layers, gradients, learning_rate, name)
    }
}
