//! Convolutional neural receiver: received grid plus pilot side information
//! in, one LLR per bit per resource element out.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{Conv2dLayer, Graph, Layer, Mode, ParamStore, ResidualBlock, Scalar, Sequential, Var};

use crate::error::{Error, Result};
use crate::ofdm_grid::{Grid, PilotPattern};

/// Side information stacked with the received grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RxInput {
    /// Re/Im of `Y` and of the dense pilot grid (zero on data REs).
    #[serde(rename = "pilots")]
    Pilots,
    /// As `Pilots`, plus Re/Im of the true channel.
    #[serde(rename = "pilots+csi")]
    PilotsCsi,
    /// Re/Im of `Y` only.
    #[serde(rename = "none")]
    None,
}

impl RxInput {
    pub fn channels(self) -> usize {
        match self {
            RxInput::Pilots => 4,
            RxInput::PilotsCsi => 6,
            RxInput::None => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RxInput::Pilots => "pilots",
            RxInput::PilotsCsi => "pilots+csi",
            RxInput::None => "none",
        }
    }
}

impl std::str::FromStr for RxInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pilots" => Ok(RxInput::Pilots),
            "pilots+csi" => Ok(RxInput::PilotsCsi),
            "none" => Ok(RxInput::None),
            _ => Err(Error::Config(format!("unknown receiver input `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverConfig {
    /// Width of the residual stages; the input convolution has half as many.
    pub hidden: usize,
    pub m: usize,
    pub input: RxInput,
}

impl ReceiverConfig {
    pub fn new(m: usize, input: RxInput) -> Self {
        ReceiverConfig { hidden: 128, m, input }
    }
}

/// `(kernel, dilation)` of the residual stages, as (frequency, time).
pub const RECEIVER_STAGES: [((usize, usize), (usize, usize)); 5] =
    [((7, 5), (7, 2)), ((7, 5), (7, 1)), ((5, 3), (1, 2)), ((5, 3), (1, 2)), ((3, 3), (1, 1))];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceiverNet {
    pub config: ReceiverConfig,
    pub layers: Sequential,
}

impl ReceiverNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, config: ReceiverConfig) -> Result<Self> {
        let h = config.hidden;
        if h < 2 || config.m == 0 {
            return Err(Error::Config(format!("receiver width {h} / order {} is invalid", config.m)));
        }
        let mut layers = vec![Layer::Conv2d(Conv2dLayer::build(
            store,
            rng,
            "rx.input",
            config.input.channels(),
            h / 2,
            (3, 3),
            (1, 1),
            true,
        ))];
        let mut c_in = h / 2;
        for (i, (kernel, dilation)) in RECEIVER_STAGES.iter().enumerate() {
            let name = format!("rx.res{}", i + 1);
            layers.push(Layer::Residual(ResidualBlock::build(store, rng, &name, c_in, h, *kernel, *dilation, false)));
            c_in = h;
        }
        layers.push(Layer::Conv2d(Conv2dLayer::build(store, rng, "rx.output", h, config.m, (1, 1), (1, 1), true)));
        Ok(ReceiverNet { config, layers: Sequential::new(layers) })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.layers.forward(g, store, x)?)
    }
}

/// Builds the `[B, n_s, n_t, C]` receiver input from received grids, the
/// known pilot grid (zero where nothing is known) and, in CSI mode, the true
/// channels.
pub fn receiver_input<T: Scalar>(ys: &[&Grid], pilots: &Grid, csi: Option<&[&Grid]>, input: RxInput) -> Result<Vec<T>> {
    let c = input.channels();
    let re = pilots.n_s * pilots.n_t;
    if input == RxInput::PilotsCsi && csi.is_none_or(|h| h.len() != ys.len()) {
        return Err(Error::Config("CSI input mode needs one channel grid per frame".into()));
    }
    let mut out = vec![T::zero(); ys.len() * re * c];
    for (b, y) in ys.iter().enumerate() {
        if y.n_s != pilots.n_s || y.n_t != pilots.n_t {
            return Err(Error::Config(format!(
                "received grid {}x{} does not match the {}x{} pilot grid",
                y.n_s, y.n_t, pilots.n_s, pilots.n_t
            )));
        }
        for r in 0..re {
            let o = &mut out[(b * re + r) * c..(b * re + r + 1) * c];
            o[0] = T::of(y.data[r].re);
            o[1] = T::of(y.data[r].im);
            if c >= 4 {
                o[2] = T::of(pilots.data[r].re);
                o[3] = T::of(pilots.data[r].im);
            }
            if let (6, Some(h)) = (c, csi) {
                o[4] = T::of(h[b].data[r].re);
                o[5] = T::of(h[b].data[r].im);
            }
        }
    }
    Ok(out)
}

/// LLRs for every RE, laid out `[frame][re][bit]` with `re = k * n_t + t`.
pub fn neural_receive_batch<T: Scalar>(
    ys: &[&Grid],
    pilots: &Grid,
    csi: Option<&[&Grid]>,
    store: &ParamStore<T>,
    net: &ReceiverNet,
) -> Result<Vec<Vec<f64>>> {
    if ys.is_empty() {
        return Ok(Vec::new());
    }
    let x = receiver_input::<T>(ys, pilots, csi, net.config.input)?;
    let mut g = Graph::inference(Mode::Eval);
    let x = g.constant(x, [ys.len(), pilots.n_s, pilots.n_t, net.config.input.channels()]);
    let out = net.forward(&mut g, store, x)?;
    let per = pilots.n_s * pilots.n_t * net.config.m;
    Ok(g.value(out).chunks_exact(per).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
}

pub fn neural_receive<T: Scalar>(
    y: &Grid,
    pattern: &PilotPattern,
    csi: Option<&Grid>,
    store: &ParamStore<T>,
    net: &ReceiverNet,
) -> Result<Vec<f64>> {
    let h = csi.map(|h| [h]);
    Ok(neural_receive_batch(&[y], &pattern.values, h.as_ref().map(|h| &h[..]), store, net)?.remove(0))
}

/// Picks the data-RE LLRs in mapper order out of an all-RE LLR grid.
pub fn data_llrs(all: &[f64], pattern: &PilotPattern, m: usize) -> Vec<f64> {
    pattern.data_indices().iter().flat_map(|&r| all[r * m..(r + 1) * m].iter().copied()).collect()
}
