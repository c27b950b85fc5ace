//! Feed-forward network with ReLU hidden layers and a linear output layer.
//!
//! Parameters are plain values: forward/backward borrow them, the optimizer
//! mutates them in place, and nothing is shared between clients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weights: Array2<f64>,
    /// `[out]`
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }
}

/// Layer-structured parameter set exchanged between server and clients.
///
/// All layers except the last form the feature extractor; the last layer is
/// the per-class predictor head (one output per class).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::Shape(format!(
                    "layer {k}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
            if k > 0 && layers[k - 1].fan_out() != layer.fan_in() {
                return Err(Error::Shape(format!(
                    "layer {k}: input width {} != previous output width {}",
                    layer.fan_in(),
                    layers[k - 1].fan_out()
                )));
            }
        }
        let params = Self { layers };
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(params)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape(format!(
                "architecture {widths:?} needs an input and an output width"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self::new(layers)
    }

    /// He-uniform weights for ReLU layers, Xavier-uniform for the output
    /// layer, zero biases.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut params = Self::zeros(widths)?;
        let depth = params.layers.len();
        for (k, layer) in params.layers.iter_mut().enumerate() {
            let fan_in = layer.fan_in() as f64;
            let fan_out = layer.fan_out() as f64;
            let limit = if k + 1 == depth {
                (6.0 / (fan_in + fan_out)).sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(params)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Layer widths `[input, hidden..., output]`.
    pub fn architecture(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].fan_in())
            .chain(self.layers.iter().map(Layer::fan_out))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn ensure_same_architecture(&self, other: &Self) -> Result<()> {
        let (a, b) = (self.architecture(), other.architecture());
        if a != b {
            return Err(Error::Architecture {
                expected: a,
                found: b,
            });
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn scaled_add(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.ensure_same_architecture(other)?;
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut dst.weights)
                .and(&src.weights)
                .for_each(|d, &s| *d += alpha * s);
            Zip::from(&mut dst.bias)
                .and(&src.bias)
                .for_each(|d, &s| *d += alpha * s);
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.scaled_add(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.scaled_add(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for layer in &mut out.layers {
            layer.weights.mapv_inplace(|v| v * factor);
            layer.bias.mapv_inplace(|v| v * factor);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        self.scale(0.0)
    }

    /// All parameters in layer order: each layer's weights row-major, then
    /// its bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    /// Builds parameters of the given architecture from [`to_flat`] order.
    ///
    /// [`to_flat`]: Self::to_flat
    pub fn from_flat(widths: &[usize], values: &[f64]) -> Result<Self> {
        let mut params = Self::zeros(widths)?;
        if params.num_params() != values.len() {
            return Err(Error::Shape(format!(
                "architecture {widths:?} has {} parameters, got {}",
                params.num_params(),
                values.len()
            )));
        }
        for (dst, &src) in params.iter_mut().zip(values) {
            *dst = src;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(params)
    }

    /// Squared L2 distance to `other`.
    pub fn sq_distance(&self, other: &Self) -> Result<f64> {
        self.ensure_same_architecture(other)?;
        Ok(self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `inputs[k]` is the input to layer `k` (`inputs[0]` is the batch).
    pub inputs: Vec<Array2<f64>>,
    /// `pre_activations[k]` is layer `k`'s affine output; the last entry is
    /// the logits.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    /// `[B × C]` raw scores, one per class per sample.
    pub fn logits(&self) -> &Array2<f64> {
        self.pre_activations.last().expect("trace has at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.pre_activations.len()
    }
}

pub fn forward(params: &ModelParams, batch: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    if batch.ncols() != params.input_width() {
        return Err(Error::Shape(format!(
            "batch width {} != network input width {}",
            batch.ncols(),
            params.input_width()
        )));
    }
    let depth = params.layers.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre_activations = Vec::with_capacity(depth);
    let mut current = batch.to_owned();
    for (k, layer) in params.layers.iter().enumerate() {
        let z = current.dot(&layer.weights.t()) + &layer.bias;
        inputs.push(current);
        current = if k + 1 < depth {
            z.mapv(|v| v.max(0.0))
        } else {
            Array2::zeros((0, 0))
        };
        pre_activations.push(z);
    }
    Ok(ForwardTrace {
        inputs,
        pre_activations,
    })
}

/// Gradient of a loss with respect to `params`, given the loss gradient with
/// respect to the logits. Sums over the batch; any batch normalization must
/// already be folded into `logit_grads`.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    logit_grads: ArrayView2<'_, f64>,
) -> Result<ModelParams> {
    if trace.depth() != params.layers.len() {
        return Err(Error::Shape(format!(
            "trace depth {} != network depth {}",
            trace.depth(),
            params.layers.len()
        )));
    }
    if logit_grads.dim() != trace.logits().dim() {
        return Err(Error::Shape(format!(
            "logit gradient shape {:?} != logits shape {:?}",
            logit_grads.dim(),
            trace.logits().dim()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut delta = logit_grads.to_owned();
    for k in (0..params.layers.len()).rev() {
        let weights = delta.t().dot(&trace.inputs[k]);
        let bias = delta.sum_axis(Axis(0));
        if k > 0 {
            let mut upstream = delta.dot(&params.layers[k].weights);
            Zip::from(&mut upstream)
                .and(&trace.pre_activations[k - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = upstream;
        }
        grads.push(Layer { weights, bias });
    }
    grads.reverse();
    Ok(ModelParams { layers: grads })
}

/// SGD with momentum and L2 weight decay:
/// `v ← momentum·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    pub fn velocity(&self) -> Option<&ModelParams> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        params.ensure_same_architecture(grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradients"));
        }
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        velocity.ensure_same_architecture(params)?;
        let (momentum, wd, lr) = (self.momentum, self.weight_decay, self.lr);
        for ((p, g), v) in params.iter_mut().zip(grads.iter()).zip(velocity.iter_mut()) {
            *v = momentum * *v + (g + wd * *p);
            *p -= lr * *v;
        }
        Ok(())
    }
}
