//! The layer set used by the modulator and receiver networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, RunningStatUpdate, Var};
use crate::ops::BnRunning;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
}

/// Depthwise convolution followed by a 1x1 pointwise convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparableConv2dLayer {
    pub name: String,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Two (batch-norm, relu, separable conv) stages with an additive skip. The
/// skip is a 1x1 convolution when the channel count changes. `linear` drops
/// both relus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub name: String,
    pub bn1: BatchNormLayer,
    pub conv1: SeparableConv2dLayer,
    pub bn2: BatchNormLayer,
    pub conv2: SeparableConv2dLayer,
    pub projection: Option<Conv2dLayer>,
    pub linear: bool,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2dLayer),
    SeparableConv2d(SeparableConv2dLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    Residual(ResidualBlock),
}

fn lecun_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    let limit = (3.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

impl Conv2dLayer {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        bias: bool,
    ) -> Self {
        let fan_in = kernel.0 * kernel.1 * c_in;
        let shape = [kernel.0, kernel.1, c_in, c_out];
        let weight = store.add(format!("{name}.weight"), shape, lecun_uniform(rng, fan_in, fan_in * c_out), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), [1, 1, 1, c_out], vec![T::zero(); c_out], true));
        Conv2dLayer { name: name.to_string(), weight, bias, kernel, dilation, c_in, c_out }
    }
}

impl SeparableConv2dLayer {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        bias: bool,
    ) -> Self {
        let taps = kernel.0 * kernel.1;
        let depthwise =
            store.add(format!("{name}.depthwise"), [kernel.0, kernel.1, 1, c_in], lecun_uniform(rng, taps, taps * c_in), true);
        let pointwise =
            store.add(format!("{name}.pointwise"), [1, 1, c_in, c_out], lecun_uniform(rng, c_in, c_in * c_out), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), [1, 1, 1, c_out], vec![T::zero(); c_out], true));
        SeparableConv2dLayer { name: name.to_string(), depthwise, pointwise, bias, kernel, dilation, c_in, c_out }
    }
}

impl BatchNormLayer {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [1, 1, 1, channels];
        BatchNormLayer {
            name: name.to_string(),
            gamma: store.add(format!("{name}.gamma"), shape, vec![T::one(); channels], true),
            beta: store.add(format!("{name}.beta"), shape, vec![T::zero(); channels], true),
            running_mean: store.add(format!("{name}.running_mean"), shape, vec![T::zero(); channels], false),
            running_var: store.add(format!("{name}.running_var"), shape, vec![T::one(); channels], false),
            channels,
        }
    }
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        linear: bool,
    ) -> Self {
        let bn1 = BatchNormLayer::build(store, &format!("{name}.bn1"), c_in);
        // No bias: the following batch-norm would cancel it.
        let conv1 = SeparableConv2dLayer::build(store, rng, &format!("{name}.conv1"), c_in, c_out, kernel, dilation, false);
        let bn2 = BatchNormLayer::build(store, &format!("{name}.bn2"), c_out);
        let conv2 = SeparableConv2dLayer::build(store, rng, &format!("{name}.conv2"), c_out, c_out, kernel, dilation, true);
        let projection = (c_in != c_out)
            .then(|| Conv2dLayer::build(store, rng, &format!("{name}.skip"), c_in, c_out, (1, 1), (1, 1), true));
        ResidualBlock { name: name.to_string(), bn1, conv1, bn2, conv2, projection, linear, c_in, c_out }
    }
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d(l) => &l.name,
            Layer::SeparableConv2d(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Relu => "relu",
            Layer::Residual(l) => &l.name,
        }
    }

    /// Expected input channels, `None` for channel-agnostic layers.
    pub fn c_in(&self) -> Option<usize> {
        match self {
            Layer::Conv2d(l) => Some(l.c_in),
            Layer::SeparableConv2d(l) => Some(l.c_in),
            Layer::BatchNorm(l) => Some(l.channels),
            Layer::Relu => None,
            Layer::Residual(l) => Some(l.c_in),
        }
    }

    pub fn c_out(&self) -> Option<usize> {
        match self {
            Layer::Conv2d(l) => Some(l.c_out),
            Layer::SeparableConv2d(l) => Some(l.c_out),
            Layer::BatchNorm(l) => Some(l.channels),
            Layer::Relu => None,
            Layer::Residual(l) => Some(l.c_out),
        }
    }
}

fn conv<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: &Conv2dLayer) -> Result<Var> {
    let w = g.param(store, l.weight);
    let b = l.bias.map(|b| g.param(store, b));
    g.conv2d(x, w, b, l.dilation)
}

fn separable<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: &SeparableConv2dLayer) -> Result<Var> {
    let dw = g.param(store, l.depthwise);
    let h = g.depthwise_conv2d(x, dw, l.dilation)?;
    let pw = g.param(store, l.pointwise);
    let b = l.bias.map(|b| g.param(store, b));
    g.conv2d(h, pw, b, (1, 1))
}

fn batch_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: &BatchNormLayer) -> Result<Var> {
    let gamma = g.param(store, l.gamma);
    let beta = g.param(store, l.beta);
    let running = BnRunning {
        mean: &store.get(l.running_mean).value,
        var: &store.get(l.running_var).value,
        mean_id: l.running_mean,
        var_id: l.running_var,
    };
    g.batch_norm(x, gamma, beta, running)
}

fn residual<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, l: &ResidualBlock) -> Result<Var> {
    let mut h = batch_norm(g, store, x, &l.bn1)?;
    if !l.linear {
        h = g.relu(h);
    }
    h = separable(g, store, h, &l.conv1)?;
    h = batch_norm(g, store, h, &l.bn2)?;
    if !l.linear {
        h = g.relu(h);
    }
    h = separable(g, store, h, &l.conv2)?;
    let skip = match &l.projection {
        Some(p) => conv(g, store, x, p)?,
        None => x,
    };
    g.add(h, skip)
}

fn forward_unchecked<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, layer: &Layer) -> Result<Var> {
    if let Some(c) = layer.c_in() {
        let got = g.shape(x)[3];
        if got != c {
            return Err(TensorError::Config {
                layer: layer.name().to_string(),
                reason: format!("expects {c} input channels, got {got}"),
            });
        }
    }
    let out = match layer {
        Layer::Conv2d(l) => conv(g, store, x, l),
        Layer::SeparableConv2d(l) => separable(g, store, x, l),
        Layer::BatchNorm(l) => batch_norm(g, store, x, l),
        Layer::Relu => Ok(g.relu(x)),
        Layer::Residual(l) => residual(g, store, x, l),
    };
    out.map_err(|e| match e {
        TensorError::Shape { op, detail } => {
            TensorError::Config { layer: layer.name().to_string(), reason: format!("{op}: {detail}") }
        }
        other => other,
    })
}

/// Applies one layer, recording it in `g`.
pub fn forward_layer<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, layer: &Layer) -> Result<Var> {
    if g.value(x).iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite(format!("input to layer `{}`", layer.name())));
    }
    forward_unchecked(g, store, x, layer)
}

/// A chain of layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.value(x).iter().any(|v| !v.is_finite()) {
            let name = self.layers.first().map_or("input", |l| l.name());
            return Err(TensorError::NonFinite(format!("input to layer `{name}`")));
        }
        let mut h = x;
        for layer in &self.layers {
            h = forward_unchecked(g, store, h, layer)?;
        }
        Ok(h)
    }
}

/// Folds train-mode batch statistics into the running statistics:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[RunningStatUpdate<T>], momentum: T) {
    let keep = T::one() - momentum;
    for u in updates {
        for (r, &b) in store.get_mut(u.mean_id).value.iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in store.get_mut(u.var_id).value.iter_mut().zip(&u.batch_var) {
            *r = keep * *r + momentum * b;
        }
    }
}
