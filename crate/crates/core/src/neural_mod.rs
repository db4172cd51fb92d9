//! The convolutional neural modulator, the differentiable constellation
//! front-end, grid power normalization, superimposed pilots, and the
//! centroid collapse to a fixed constellation.

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{Conv2dLayer, CustomOp, Graph, Layer, Mode, ParamId, ParamStore, ResidualBlock, Scalar, Sequential, Shape, Var};

use crate::error::{Error, Result};
use crate::ofdm_grid::{normalize_constellation, Constellation, Grid, PilotPattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationMode {
    /// Fixed square QAM.
    Qam,
    /// Learned constellation, one symbol per RE.
    Gs,
    #[serde(rename = "deepofdm")]
    DeepOfdm,
    /// DeepOFDM with every ReLU removed.
    #[serde(rename = "deepofdm-linear")]
    DeepOfdmLinear,
    /// Fixed constellation made of the centroids of a trained modulator.
    #[serde(rename = "deepofdm-gs")]
    DeepOfdmGs,
    /// Superimposed pilots over fixed QAM.
    Sip,
}

impl ModulationMode {
    pub fn name(self) -> &'static str {
        match self {
            ModulationMode::Qam => "qam",
            ModulationMode::Gs => "gs",
            ModulationMode::DeepOfdm => "deepofdm",
            ModulationMode::DeepOfdmLinear => "deepofdm-linear",
            ModulationMode::DeepOfdmGs => "deepofdm-gs",
            ModulationMode::Sip => "sip",
        }
    }

    pub fn has_modulator(self) -> bool {
        matches!(self, ModulationMode::DeepOfdm | ModulationMode::DeepOfdmLinear)
    }

    pub fn trainable_constellation(self) -> bool {
        matches!(self, ModulationMode::Gs | ModulationMode::DeepOfdm | ModulationMode::DeepOfdmLinear)
    }
}

impl std::str::FromStr for ModulationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qam" => Ok(ModulationMode::Qam),
            "gs" => Ok(ModulationMode::Gs),
            "deepofdm" => Ok(ModulationMode::DeepOfdm),
            "deepofdm-linear" => Ok(ModulationMode::DeepOfdmLinear),
            "deepofdm-gs" => Ok(ModulationMode::DeepOfdmGs),
            "sip" => Ok(ModulationMode::Sip),
            _ => Err(Error::Config(format!("unknown modulation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulatorConfig {
    /// Width of the residual stages; the input convolution has half as many
    /// channels.
    pub hidden: usize,
    pub linear: bool,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        ModulatorConfig { hidden: 48, linear: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulatorNet {
    pub config: ModulatorConfig,
    pub layers: Sequential,
}

impl ModulatorNet {
    /// Input conv 3x3 (hidden/2) -> residual 5x5 (hidden) -> projection 1x1
    /// -> residual 5x5 -> output conv 1x1 to 2 channels.
    pub fn build<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: ModulatorConfig) -> Result<Self> {
        let h = config.hidden;
        if h < 2 {
            return Err(Error::Config(format!("modulator width {h} is too small")));
        }
        let layers = vec![
            Layer::Conv2d(Conv2dLayer::build(store, rng, "mod.input", 2, h / 2, (3, 3), (1, 1), true)),
            Layer::Residual(ResidualBlock::build(store, rng, "mod.res1", h / 2, h, (5, 5), (1, 1), config.linear)),
            Layer::Conv2d(Conv2dLayer::build(store, rng, "mod.projection", h, h, (1, 1), (1, 1), true)),
            Layer::Residual(ResidualBlock::build(store, rng, "mod.res2", h, h, (5, 5), (1, 1), config.linear)),
            Layer::Conv2d(Conv2dLayer::build(store, rng, "mod.output", h, 2, (1, 1), (1, 1), true)),
        ];
        Ok(ModulatorNet { config, layers: Sequential::new(layers) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.layers.forward(g, store, x)?)
    }
}

/// Stacks grids into an NHWC tensor with channels (Re, Im).
pub fn grids_to_tensor<T: Scalar>(grids: &[&Grid]) -> Result<(Vec<T>, Shape)> {
    let first = grids.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (n_s, n_t) = (first.n_s, first.n_t);
    let mut out = Vec::with_capacity(grids.len() * n_s * n_t * 2);
    for g in grids {
        if g.n_s != n_s || g.n_t != n_t {
            return Err(Error::Framing("batch grids differ in size".into()));
        }
        for v in &g.data {
            out.push(T::of(v.re));
            out.push(T::of(v.im));
        }
    }
    Ok((out, [grids.len(), n_s, n_t, 2]))
}

pub fn tensor_to_grids<T: Scalar>(values: &[T], shape: Shape) -> Result<Vec<Grid>> {
    let [b, n_s, n_t, c] = shape;
    if c != 2 || values.len() != b * n_s * n_t * 2 {
        return Err(Error::Framing(format!("tensor {shape:?} is not a batch of complex grids")));
    }
    values
        .chunks_exact(n_s * n_t * 2)
        .map(|chunk| {
            let data = chunk.chunks_exact(2).map(|p| C64::new(p[0].as_f64(), p[1].as_f64())).collect();
            Grid::from_vec(n_s, n_t, data)
        })
        .collect()
}

/// Differentiable `(x - mean) / rms` over a `[K, 1, 1, 2]` point table.
pub struct ConstellationNormalize {
    centred: Vec<f64>,
    rms: f64,
}

impl ConstellationNormalize {
    pub fn apply<T: Scalar>(g: &mut Graph<T>, table: Var) -> Result<Var> {
        let shape = g.shape(table);
        let k = shape[0];
        let x = g.value(table);
        let mut mean = [0.0; 2];
        for p in x.chunks_exact(2) {
            mean[0] += p[0].as_f64() / k as f64;
            mean[1] += p[1].as_f64() / k as f64;
        }
        let centred: Vec<f64> = x.iter().enumerate().map(|(i, v)| v.as_f64() - mean[i % 2]).collect();
        let rms = (centred.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
        if !(rms > 1e-12) {
            return Err(Error::DegenerateConstellation("all constellation points coincide".into()));
        }
        let out = centred.iter().map(|v| T::of(v / rms)).collect();
        Ok(g.custom(&[table], out, shape, Box::new(ConstellationNormalize { centred, rms }))?)
    }
}

impl<T: Scalar> CustomOp<T> for ConstellationNormalize {
    fn name(&self) -> &str {
        "constellation_normalize"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], grads: &mut [Vec<T>]) {
        let k = (self.centred.len() / 2) as f64;
        let r = self.rms;
        let dot: f64 = grad_out.iter().zip(&self.centred).map(|(g, c)| g.as_f64() * c).sum();
        let dc: Vec<f64> =
            grad_out.iter().zip(&self.centred).map(|(g, c)| g.as_f64() / r - c * dot / (r * r * r * k)).collect();
        let mut mean = [0.0; 2];
        for (i, v) in dc.iter().enumerate() {
            mean[i % 2] += v / k;
        }
        for (i, (o, v)) in grads[0].iter_mut().zip(&dc).enumerate() {
            *o += T::of(v - mean[i % 2]);
        }
    }
}

/// Per-RE mask and pilot values over a batch tensor, precomputed once.
#[derive(Clone, Debug)]
pub struct PilotStamp {
    pub n_s: usize,
    pub n_t: usize,
    mask: Vec<bool>,
    values: Vec<f64>,
}

impl PilotStamp {
    pub fn new(pattern: &PilotPattern) -> Self {
        let values = pattern.values.data.iter().flat_map(|v| [v.re, v.im]).collect();
        PilotStamp { n_s: pattern.n_s, n_t: pattern.n_t, mask: pattern.mask.clone(), values }
    }

    pub fn n_data(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }

    /// Dense `[B, n_s, n_t, 2]` pilot tensor (zeros on data REs).
    pub fn dense<T: Scalar>(&self, batch: usize) -> Vec<T> {
        let one: Vec<T> = self.values.iter().map(|&v| T::of(v)).collect();
        (0..batch).flat_map(|_| one.iter().copied()).collect()
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape[1] != self.n_s || shape[2] != self.n_t || shape[3] != 2 {
            return Err(Error::Framing(format!("tensor {shape:?} does not match a {}x{} pilot pattern", self.n_s, self.n_t)));
        }
        Ok(())
    }

    /// Overwrites pilot REs with their values; gradients stop there.
    pub fn stamp<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        self.check(shape)?;
        let re = self.n_s * self.n_t;
        let mut out = g.value(x).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let r = (i / 2) % re;
            if self.mask[r] {
                *v = T::of(self.values[r * 2 + i % 2]);
            }
        }
        Ok(g.custom(&[x], out, shape, Box::new(StampOp { mask: self.mask.clone() }))?)
    }

    /// Scales the data REs of each grid to unit mean power and stamps the
    /// pilots. With unit-modulus pilots the whole grid then has unit mean
    /// power while the pilots stay exact.
    pub fn normalize<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        self.check(shape)?;
        let re = self.n_s * self.n_t;
        let n_data = self.n_data();
        let xv = g.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let mut scales = Vec::with_capacity(shape[0]);
        for b in 0..shape[0] {
            let base = b * re * 2;
            let mut e = 0.0;
            for r in 0..re {
                if !self.mask[r] {
                    let (a, c) = (xv[base + 2 * r].as_f64(), xv[base + 2 * r + 1].as_f64());
                    e += a * a + c * c;
                }
            }
            let s = if n_data == 0 { 1.0 } else { (e / n_data as f64).sqrt() };
            if n_data > 0 && !(s > 1e-12) {
                return Err(Error::Numeric("modulator produced an all-zero grid".into()));
            }
            for r in 0..re {
                for j in 0..2 {
                    let i = base + 2 * r + j;
                    out[i] = if self.mask[r] { T::of(self.values[2 * r + j]) } else { T::of(xv[i].as_f64() / s) };
                }
            }
            scales.push(s);
        }
        Ok(g.custom(&[x], out, shape, Box::new(DataNormOp { mask: self.mask.clone(), scales, n_data }))?)
    }
}

struct StampOp {
    mask: Vec<bool>,
}

impl<T: Scalar> CustomOp<T> for StampOp {
    fn name(&self) -> &str {
        "stamp_pilots"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], grads: &mut [Vec<T>]) {
        let re = self.mask.len();
        for (i, (o, &gv)) in grads[0].iter_mut().zip(grad_out).enumerate() {
            if !self.mask[(i / 2) % re] {
                *o += gv;
            }
        }
    }
}

struct DataNormOp {
    mask: Vec<bool>,
    scales: Vec<f64>,
    n_data: usize,
}

impl<T: Scalar> CustomOp<T> for DataNormOp {
    fn name(&self) -> &str {
        "data_power_normalize"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T], grads: &mut [Vec<T>]) {
        let x = inputs[0];
        let re = self.mask.len();
        let nd = self.n_data as f64;
        for (b, &s) in self.scales.iter().enumerate() {
            let base = b * re * 2;
            let mut dot = 0.0;
            for r in 0..re {
                if !self.mask[r] {
                    for j in 0..2 {
                        dot += grad_out[base + 2 * r + j].as_f64() * x[base + 2 * r + j].as_f64();
                    }
                }
            }
            for r in 0..re {
                if self.mask[r] {
                    continue;
                }
                for j in 0..2 {
                    let i = base + 2 * r + j;
                    let v = grad_out[i].as_f64() / s - x[i].as_f64() * dot / (s * s * s * nd);
                    grads[0][i] += T::of(v);
                }
            }
        }
    }
}

/// Runs the modulator on one pilot-bearing grid in inference mode: the net
/// output has its pilot REs re-stamped and its data REs scaled to unit
/// mean power.
pub fn neural_modulate<T: Scalar>(x: &Grid, store: &ParamStore<T>, net: &ModulatorNet, pattern: &PilotPattern) -> Result<Grid> {
    Ok(neural_modulate_batch(&[x], store, net, pattern)?.remove(0))
}

pub fn neural_modulate_batch<T: Scalar>(
    xs: &[&Grid],
    store: &ParamStore<T>,
    net: &ModulatorNet,
    pattern: &PilotPattern,
) -> Result<Vec<Grid>> {
    let stamp = PilotStamp::new(pattern);
    let (v, shape) = grids_to_tensor::<T>(xs)?;
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(v, shape);
    let x = stamp.stamp(&mut g, x)?;
    let y = net.forward(&mut g, store, x)?;
    let y = stamp.normalize(&mut g, y)?;
    tensor_to_grids(g.value(y), g.shape(y))
}

/// Superimposed pilots: `X = sqrt(1 - A) X~ + sqrt(A) P` per RE.
pub fn sip_modulate(x: &Grid, pilots: &Grid, fraction: &[f64]) -> Result<Grid> {
    if pilots.n_s != x.n_s || pilots.n_t != x.n_t || fraction.len() != x.data.len() {
        return Err(Error::Framing("superimposed pilot inputs differ in size".into()));
    }
    if let Some(a) = fraction.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("pilot power fraction {a} outside [0, 1]")));
    }
    let data = x
        .data
        .iter()
        .zip(&pilots.data)
        .zip(fraction)
        .map(|((d, p), a)| d * (1.0 - a).sqrt() + p * a.sqrt())
        .collect();
    Grid::from_vec(x.n_s, x.n_t, data)
}

/// Dense pilot grid with a pilot on every RE.
pub fn dense_pilots(n_s: usize, n_t: usize) -> Grid {
    let mut g = Grid::zeros(n_s, n_t);
    for k in 0..n_s {
        for t in 0..n_t {
            g.set(k, t, crate::ofdm_grid::pilot_symbol(k, t));
        }
    }
    g
}

/// Centroid of a modulator's outputs for each input point, gathered over
/// `grids` random label grids, then normalized.
pub fn collapse_to_gs_with<R: Rng + ?Sized>(
    c: &Constellation,
    pattern: &PilotPattern,
    grids: usize,
    rng: &mut R,
    mut modulate: impl FnMut(&Grid) -> Result<Grid>,
) -> Result<Constellation> {
    let data = pattern.data_indices();
    let mut sums = vec![C64::new(0.0, 0.0); c.size()];
    let mut counts = vec![0usize; c.size()];
    for _ in 0..grids {
        let labels: Vec<u32> = data.iter().map(|_| rng.random_range(0..c.size() as u32)).collect();
        let x = crate::ofdm_grid::map_labels_to_grid(&labels, c, pattern)?;
        let y = modulate(&x)?;
        for (&i, &l) in data.iter().zip(&labels) {
            sums[l as usize] += y.data[i];
            counts[l as usize] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::Config("too few samples to visit every constellation point".into()));
    }
    let centroids: Vec<C64> = sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    Ok(Constellation { m: c.m, points: normalize_constellation(&centroids)?, trainable: false })
}

pub fn collapse_to_gs<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    net: &ModulatorNet,
    c: &Constellation,
    pattern: &PilotPattern,
    grids: usize,
    rng: &mut R,
) -> Result<Constellation> {
    collapse_to_gs_with(c, pattern, grids, rng, |x| neural_modulate(x, store, net, pattern))
}

/// Analytic size and cost of a network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    /// Trainable parameters.
    pub params: usize,
    /// Batch-norm running statistics.
    pub buffers: usize,
    /// Multiply-accumulates for one `n_s x n_t` grid.
    pub macs: u64,
}

impl Complexity {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

fn layer_complexity(layer: &Layer, positions: u64) -> Complexity {
    match layer {
        Layer::Conv2d(l) => {
            let w = l.kernel.0 * l.kernel.1 * l.c_in * l.c_out;
            Complexity {
                params: w + if l.bias.is_some() { l.c_out } else { 0 },
                buffers: 0,
                macs: w as u64 * positions,
            }
        }
        Layer::SeparableConv2d(l) => {
            let dw = l.kernel.0 * l.kernel.1 * l.c_in;
            let pw = l.c_in * l.c_out;
            Complexity {
                params: dw + pw + if l.bias.is_some() { l.c_out } else { 0 },
                buffers: 0,
                macs: (dw + pw) as u64 * positions,
            }
        }
        Layer::BatchNorm(l) => Complexity { params: 2 * l.channels, buffers: 2 * l.channels, macs: l.channels as u64 * positions },
        Layer::Relu => Complexity::default(),
        Layer::Residual(b) => {
            let mut parts = vec![
                Layer::BatchNorm(b.bn1.clone()),
                Layer::SeparableConv2d(b.conv1.clone()),
                Layer::BatchNorm(b.bn2.clone()),
                Layer::SeparableConv2d(b.conv2.clone()),
            ];
            if let Some(p) = &b.projection {
                parts.push(Layer::Conv2d(p.clone()));
            }
            parts.iter().map(|l| layer_complexity(l, positions)).fold(Complexity::default(), add_complexity)
        }
    }
}

fn add_complexity(a: Complexity, b: Complexity) -> Complexity {
    Complexity { params: a.params + b.params, buffers: a.buffers + b.buffers, macs: a.macs + b.macs }
}

/// Parameter and multiply-accumulate counts of a layer stack for one grid.
pub fn count_complexity(layers: &Sequential, n_s: usize, n_t: usize) -> Complexity {
    let positions = (n_s * n_t) as u64;
    layers.layers.iter().map(|l| layer_complexity(l, positions)).fold(Complexity::default(), add_complexity)
}

/// Constellation table parameter `[2^m, 1, 1, 2]` initialized from `c`.
pub fn add_constellation_param<T: Scalar>(store: &mut ParamStore<T>, c: &Constellation, trainable: bool) -> ParamId {
    let v = c.points.iter().flat_map(|p| [T::of(p.re), T::of(p.im)]).collect();
    store.add("constellation", [c.size(), 1, 1, 2], v, trainable)
}

pub fn constellation_from_param<T: Scalar>(store: &ParamStore<T>, id: ParamId, trainable: bool) -> Result<Constellation> {
    let v = &store.get(id).value;
    let pts: Vec<C64> = v.chunks_exact(2).map(|p| C64::new(p[0].as_f64(), p[1].as_f64())).collect();
    Constellation::from_points(&pts, trainable)
}
