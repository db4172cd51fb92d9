//! End-to-end training of constellation, modulator and receiver through a
//! differentiable OFDM link: grid -> OFDM -> time-varying multipath + noise
//! -> OFDM demodulation -> neural receiver -> bitwise cross-entropy.

use std::sync::Arc;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{apply_stat_updates, Adam, CustomOp, Graph, Mode, ParamId, ParamStore, Scalar, Var, SCALAR};

use crate::channel::{complex_gaussian, convolve, convolve_adjoint, freq_csi, generate_tdl, ChannelRealization, SampledProfile};
use crate::error::{Error, Result};
use crate::link::{ChannelConfig, GridConfig, ModulationSettings, ReceiverSettings};
use crate::neural_mod::{
    add_constellation_param, constellation_from_param, count_complexity, dense_pilots, grids_to_tensor, tensor_to_grids,
    Complexity, ConstellationNormalize, ModulationMode, ModulatorConfig, ModulatorNet, PilotStamp,
};
use crate::neural_rx::{ReceiverConfig, ReceiverNet, RxInput};
use crate::ofdm_grid::{Constellation, Grid, PilotConfig, PilotPattern};
use crate::rng::{frame_rng, splitmix64};
use crate::waveform::{papr_db, OfdmModem};

/// LLRs are clipped to this magnitude inside the loss.
pub const LLR_CLIP: f64 = 30.0;
pub const PAPR_TEMPERATURE: f64 = 10.0;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

/// Optimization settings: the `train` section of an experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Uniform speed range in m/s.
    pub speed_range: (f64, f64),
    /// Uniform Es/N0 range in dB.
    pub snr_db_range: (f64, f64),
    pub lambda_papr_max: f64,
    /// Fraction of the steps run with `lambda = 0` before the linear ramp.
    pub papr_ramp_start: f64,
    /// Weight of the newest batch in the batch-norm running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 128,
            learning_rate: 1e-3,
            steps: 20_000,
            speed_range: (0.0, 100.0),
            snr_db_range: (0.0, 16.0),
            lambda_papr_max: 0.0,
            papr_ramp_start: 0.6,
            bn_momentum: 0.01,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// `lambda_PAPR` at `step`: zero up to `papr_ramp_start` of the run, then
    /// a linear ramp reaching `lambda_papr_max` at the final step.
    pub fn lambda_at(&self, step: usize) -> f64 {
        let last = self.steps.saturating_sub(1) as f64;
        let start = self.papr_ramp_start * last;
        let s = step as f64;
        if s <= start {
            return 0.0;
        }
        self.lambda_papr_max * ((s - start) / (last - start)).min(1.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub grid: GridConfig,
    pub channel: ChannelConfig,
    pub modulation: ModulationSettings,
    pub receiver: ReceiverSettings,
    pub train: TrainSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let (lo, hi) = t.speed_range;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::Config(format!("speed range ({lo}, {hi}) is invalid")));
        }
        let (lo, hi) = t.snr_db_range;
        if !(lo <= hi) {
            return Err(Error::Config(format!("SNR range ({lo}, {hi}) is invalid")));
        }
        if !(t.lambda_papr_max >= 0.0) || !(0.0..=1.0).contains(&t.papr_ramp_start) {
            return Err(Error::Config("PAPR schedule is invalid".into()));
        }
        if !(t.learning_rate > 0.0) || !(0.0..=1.0).contains(&t.bn_momentum) {
            return Err(Error::Config("learning rate or batch-norm momentum is invalid".into()));
        }
        let mode = self.modulation.mode;
        if mode == ModulationMode::DeepOfdmGs {
            return Err(Error::Config("deepofdm-gs is derived from a trained deepofdm model, not trained directly".into()));
        }
        if mode == ModulationMode::Sip && self.grid.pilots != PilotConfig::ZeroP {
            return Err(Error::Config("superimposed pilots need the 0P pattern".into()));
        }
        if !(0.0..=1.0).contains(&self.modulation.sip_fraction) {
            return Err(Error::Config(format!("pilot power fraction {} outside [0, 1]", self.modulation.sip_fraction)));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        self.train.lambda_at(step)
    }
}

/// Constellation, modulator and receiver sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Transceiver<T: Scalar> {
    pub mode: ModulationMode,
    pub m: usize,
    pub store: ParamStore<T>,
    pub constellation: ParamId,
    pub modulator: Option<ModulatorNet>,
    pub receiver: ReceiverNet,
    pub sip_fraction: f64,
}

impl<T: Scalar> Transceiver<T> {
    pub fn build<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let mode = cfg.modulation.mode;
        let c = Constellation::qam(cfg.grid.m)?;
        let constellation = add_constellation_param(&mut store, &c, mode.trainable_constellation());
        let modulator = if mode.has_modulator() {
            let mc = ModulatorConfig { hidden: cfg.modulation.modulator_hidden, linear: mode == ModulationMode::DeepOfdmLinear };
            Some(ModulatorNet::build(&mut store, rng, mc)?)
        } else {
            None
        };
        let rc = ReceiverConfig { hidden: cfg.receiver.hidden, m: cfg.grid.m, input: cfg.receiver.input };
        let receiver = ReceiverNet::build(&mut store, rng, rc)?;
        Ok(Transceiver { mode, m: cfg.grid.m, store, constellation, modulator, receiver, sip_fraction: cfg.modulation.sip_fraction })
    }

    pub fn cast<U: Scalar>(&self) -> Transceiver<U> {
        Transceiver {
            mode: self.mode,
            m: self.m,
            store: self.store.cast(),
            constellation: self.constellation,
            modulator: self.modulator.clone(),
            receiver: self.receiver.clone(),
            sip_fraction: self.sip_fraction,
        }
    }

    pub fn constellation(&self) -> Result<Constellation> {
        let trainable = self.store.get(self.constellation).trainable;
        constellation_from_param(&self.store, self.constellation, trainable)
    }

    /// Re-centres the constellation table and rescales it to unit power.
    pub fn renormalize_constellation(&mut self) -> Result<()> {
        let c = self.constellation()?;
        let v = c.points.iter().flat_map(|p| [T::of(p.re), T::of(p.im)]).collect();
        self.store.get_mut(self.constellation).value = v;
        Ok(())
    }

    pub fn modulator_complexity(&self, n_s: usize, n_t: usize) -> Option<Complexity> {
        self.modulator.as_ref().map(|m| count_complexity(&m.layers, n_s, n_t))
    }

    pub fn receiver_complexity(&self, n_s: usize, n_t: usize) -> Complexity {
        count_complexity(&self.receiver.layers, n_s, n_t)
    }

    /// Pilot grid the receiver is told about.
    pub fn pilot_side(&self, pattern: &PilotPattern) -> Grid {
        if self.mode == ModulationMode::Sip {
            let mut p = dense_pilots(pattern.n_s, pattern.n_t);
            p.data.iter_mut().for_each(|v| *v *= self.sip_fraction.sqrt());
            p
        } else {
            pattern.values.clone()
        }
    }

    /// Records the transmit grids `[B, n_s, n_t, 2]` for per-RE labels
    /// (`B * n_s * n_t`, pilot REs ignored).
    pub fn transmit_graph(&self, g: &mut Graph<T>, labels: &[u32], pattern: &PilotPattern) -> Result<Var> {
        let re = pattern.n_s * pattern.n_t;
        if labels.is_empty() || labels.len() % re != 0 {
            return Err(Error::Framing(format!("{} labels for grids of {re} REs", labels.len())));
        }
        let shape = [labels.len() / re, pattern.n_s, pattern.n_t, 2];
        let table = g.param(&self.store, self.constellation);
        let table = ConstellationNormalize::apply(g, table)?;
        let x = g.gather(table, labels, shape)?;
        let stamp = PilotStamp::new(pattern);
        match (&self.modulator, self.mode) {
            (Some(net), _) => {
                let x = stamp.stamp(g, x)?;
                let y = net.forward(g, &self.store, x)?;
                stamp.normalize(g, y)
            }
            (None, ModulationMode::Sip) => {
                let a = self.sip_fraction;
                let x = g.scale(x, T::of((1.0 - a).sqrt()));
                let p = dense_pilots(pattern.n_s, pattern.n_t);
                let (pv, _) = grids_to_tensor::<T>(&vec![&p; shape[0]])?;
                let p = g.constant(pv.iter().map(|&v| v * T::of(a.sqrt())).collect(), shape);
                Ok(g.add(x, p)?)
            }
            (None, _) => stamp.stamp(g, x),
        }
    }

    /// Transmit grids for per-RE labels, in inference mode.
    pub fn transmit(&self, labels: &[u32], pattern: &PilotPattern) -> Result<Vec<Grid>> {
        let mut g = Graph::inference(Mode::Eval);
        let x = self.transmit_graph(&mut g, labels, pattern)?;
        tensor_to_grids(g.value(x), g.shape(x))
    }

    /// All-RE LLRs per frame, `[re][bit]` layout.
    pub fn receive(&self, ys: &[&Grid], pattern: &PilotPattern, csi: Option<&[&Grid]>) -> Result<Vec<Vec<f64>>> {
        crate::neural_rx::neural_receive_batch(ys, &self.pilot_side(pattern), csi, &self.store, &self.receiver)
    }
}

/// Fixed geometry and channel model for a training or evaluation run.
#[derive(Clone, Debug)]
pub struct LinkSetup {
    pub grid: GridConfig,
    pub carrier: f64,
    pub pattern: PilotPattern,
    pub modem: OfdmModem,
    pub profile: SampledProfile,
}

impl LinkSetup {
    pub fn new(grid: &GridConfig, channel: &ChannelConfig) -> Result<Self> {
        grid.validate()?;
        Ok(LinkSetup {
            grid: grid.clone(),
            carrier: channel.carrier,
            pattern: grid.pattern()?,
            modem: grid.modem()?,
            profile: channel.sampled(grid)?,
        })
    }

    pub fn draw_channel<R: Rng + ?Sized>(&self, speed: f64, rng: &mut R) -> ChannelRealization {
        let n = self.grid.frame_samples() + self.profile.max_delay() + 1;
        generate_tdl(&self.profile, speed, self.carrier, self.grid.sample_period(), n, rng)
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, n0: f64, rng: &mut R) -> Vec<C64> {
        (0..self.grid.frame_samples()).map(|_| complex_gaussian(rng, n0)).collect()
    }

    /// Received grid for one transmit grid.
    pub fn propagate(&self, x: &Grid, ch: &ChannelRealization, noise: &[C64]) -> Result<Grid> {
        let frame = self.modem.modulate(x)?;
        let mut y = convolve(&frame.samples, ch);
        for (v, w) in y.iter_mut().zip(noise) {
            *v += w;
        }
        self.modem.demodulate(&crate::waveform::Frame { samples: y, ..frame })
    }

    pub fn csi(&self, ch: &ChannelRealization) -> Grid {
        freq_csi(ch, self.grid.n_s, self.grid.n_t, self.grid.n_cp)
    }
}

/// One batch of random payload and channel draws.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Per-RE labels, `B * n_s * n_t`; pilot REs hold 0.
    pub labels: Vec<u32>,
    /// Bit targets and loss weights for every output LLR, `[B][re][bit]`.
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
    pub channels: Arc<Vec<ChannelRealization>>,
    pub noise: Arc<Vec<Vec<C64>>>,
    pub speeds: Vec<f64>,
    pub snr_db: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(
        link: &LinkSetup,
        m: usize,
        batch: usize,
        speed_range: (f64, f64),
        snr_db_range: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let re = link.grid.n_s * link.grid.n_t;
        let mut labels = vec![0u32; batch * re];
        let mut targets = vec![0.0; batch * re * m];
        let mut weights = vec![0.0; batch * re * m];
        let (mut channels, mut noise, mut speeds, mut snr_db) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for b in 0..batch {
            for r in 0..re {
                if link.pattern.mask[r] {
                    continue;
                }
                let l = rng.random_range(0..1u32 << m);
                labels[b * re + r] = l;
                for i in 0..m {
                    let o = (b * re + r) * m + i;
                    targets[o] = ((l >> (m - 1 - i)) & 1) as f64;
                    weights[o] = 1.0;
                }
            }
            let speed = uniform(rng, speed_range);
            let snr = uniform(rng, snr_db_range);
            channels.push(link.draw_channel(speed, rng));
            noise.push(link.draw_noise(10f64.powf(-snr / 10.0), rng));
            speeds.push(speed);
            snr_db.push(snr);
        }
        Batch { labels, targets, weights, channels: Arc::new(channels), noise: Arc::new(noise), speeds, snr_db }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn tensor_grid<T: Scalar>(v: &[T], n_s: usize, n_t: usize) -> Grid {
    let data = v.chunks_exact(2).map(|p| C64::new(p[0].as_f64(), p[1].as_f64())).collect();
    Grid { n_s, n_t, data }
}

fn write_grid<T: Scalar>(g: &Grid, out: &mut [T]) {
    for (o, v) in out.chunks_exact_mut(2).zip(&g.data) {
        o[0] += T::of(v.re);
        o[1] += T::of(v.im);
    }
}

/// The link as a graph op: linear in the transmit grid, plus fixed noise.
pub struct ChannelApply {
    modem: OfdmModem,
    n_t: usize,
    channels: Arc<Vec<ChannelRealization>>,
}

impl ChannelApply {
    pub fn apply<T: Scalar>(g: &mut Graph<T>, link: &LinkSetup, batch: &Batch, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let [b, n_s, n_t, _] = shape;
        if b != batch.len() {
            return Err(Error::Framing(format!("{b} grids for a batch of {}", batch.len())));
        }
        let per = n_s * n_t * 2;
        let xv = g.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..b {
            let grid = tensor_grid(&xv[i * per..(i + 1) * per], n_s, n_t);
            let y = link.propagate(&grid, &batch.channels[i], &batch.noise[i])?;
            write_grid(&y, &mut out[i * per..(i + 1) * per]);
        }
        let op = ChannelApply { modem: link.modem.clone(), n_t, channels: batch.channels.clone() };
        Ok(g.custom(&[x], out, shape, Box::new(op))?)
    }
}

impl<T: Scalar> CustomOp<T> for ChannelApply {
    fn name(&self) -> &str {
        "channel_apply"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], grads: &mut [Vec<T>]) {
        let n_s = self.modem.n_s;
        let per = n_s * self.n_t * 2;
        for (i, ch) in self.channels.iter().enumerate() {
            let gy = tensor_grid(&grad_out[i * per..(i + 1) * per], n_s, self.n_t);
            let gs = self.modem.demodulate_adjoint(&gy).expect("grid matches modem");
            let gs = convolve_adjoint(&gs, ch);
            let gx = self.modem.modulate_adjoint(&gs, self.n_t).expect("frame matches modem");
            write_grid(&gx, &mut grads[0][i * per..(i + 1) * per]);
        }
    }
}

/// Batch mean of the smooth PAPR of each grid's OFDM frame.
pub struct PaprPenalty {
    modem: OfdmModem,
    n_t: usize,
    /// d(smooth PAPR)/d(sample) per frame.
    sample_grads: Vec<Vec<C64>>,
}

impl PaprPenalty {
    pub fn apply<T: Scalar>(g: &mut Graph<T>, modem: &OfdmModem, x: Var, temperature: f64) -> Result<Var> {
        let [b, n_s, n_t, _] = g.shape(x);
        let per = n_s * n_t * 2;
        let xv = g.value(x);
        let mut total = 0.0;
        let mut sample_grads = Vec::with_capacity(b);
        for i in 0..b {
            let frame = modem.modulate(&tensor_grid(&xv[i * per..(i + 1) * per], n_s, n_t))?;
            let (v, gs) = smooth_papr_with_grad(&frame.samples, temperature)?;
            total += v / b as f64;
            sample_grads.push(gs.into_iter().map(|v| v / b as f64).collect());
        }
        let op = PaprPenalty { modem: modem.clone(), n_t, sample_grads };
        Ok(g.custom(&[x], vec![T::of(total)], SCALAR, Box::new(op))?)
    }
}

impl<T: Scalar> CustomOp<T> for PaprPenalty {
    fn name(&self) -> &str {
        "papr_penalty"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T], grads: &mut [Vec<T>]) {
        let scale = grad_out[0].as_f64();
        let per = self.modem.n_s * self.n_t * 2;
        for (i, gs) in self.sample_grads.iter().enumerate() {
            let scaled: Vec<C64> = gs.iter().map(|v| v * scale).collect();
            let gx = self.modem.modulate_adjoint(&scaled, self.n_t).expect("frame matches modem");
            write_grid(&gx, &mut grads[0][i * per..(i + 1) * per]);
        }
    }
}

/// Smooth PAPR and its gradient with respect to each sample, as
/// `dF/dRe + j dF/dIm`.
pub fn smooth_papr_with_grad(samples: &[C64], temperature: f64) -> Result<(f64, Vec<C64>)> {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(Error::Numeric("PAPR of a zero-energy frame".into()));
    }
    let p: Vec<f64> = samples.iter().map(|v| v.norm_sqr() / mean).collect();
    let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = p.iter().map(|&v| (temperature * (v - mx)).exp()).collect();
    let s: f64 = e.iter().sum();
    let value = mx + s.ln() / temperature;
    let w: Vec<f64> = e.iter().map(|v| v / s).collect();
    let wp: f64 = w.iter().zip(&p).map(|(a, b)| a * b).sum();
    let grads = samples.iter().zip(&w).map(|(x, &wj)| x * (2.0 * (wj - wp / n) / mean)).collect();
    Ok((value, grads))
}

/// Rate loss `BCE / ln 2 - 1` from LLRs (`> 0` favours bit 1) and bits.
pub fn rate_loss(llrs: &[f64], bits: &[u8]) -> f64 {
    let n = llrs.len().max(1) as f64;
    let bce: f64 = llrs
        .iter()
        .zip(bits)
        .map(|(&l, &b)| {
            let l = l.clamp(-LLR_CLIP, LLR_CLIP);
            l.max(0.0) - l * b as f64 + (-l.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / n;
    bce / std::f64::consts::LN_2 - 1.0
}

/// Graph outputs of one forward pass.
pub struct ForwardOutput {
    pub total: Var,
    pub rate: Var,
    pub papr: Option<Var>,
    pub transmit: Var,
}

/// Records the full link for `batch` and returns the loss
/// `L_rate + lambda * PAPR`; the PAPR term is left out when `lambda = 0`.
pub fn forward_loss<T: Scalar>(
    g: &mut Graph<T>,
    tx: &Transceiver<T>,
    link: &LinkSetup,
    batch: &Batch,
    lambda: f64,
) -> Result<ForwardOutput> {
    let pattern = &link.pattern;
    let x = tx.transmit_graph(g, &batch.labels, pattern)?;
    let y = ChannelApply::apply(g, link, batch, x)?;
    let shape = g.shape(y);
    let b = shape[0];
    let mut parts = vec![y];
    let input = tx.receiver.config.input;
    if input != RxInput::None {
        let side = tx.pilot_side(pattern);
        let (pv, _) = grids_to_tensor::<T>(&vec![&side; b])?;
        parts.push(g.constant(pv, shape));
    }
    if input == RxInput::PilotsCsi {
        let csi: Vec<Grid> = batch.channels.iter().map(|c| link.csi(c)).collect();
        let refs: Vec<&Grid> = csi.iter().collect();
        let (hv, _) = grids_to_tensor::<T>(&refs)?;
        parts.push(g.constant(hv, shape));
    }
    let rx_in = if parts.len() == 1 { y } else { g.concat(&parts)? };
    let llrs = tx.receiver.forward(g, &tx.store, rx_in)?;
    let targets: Vec<T> = batch.targets.iter().map(|&v| T::of(v)).collect();
    let weights: Vec<T> = batch.weights.iter().map(|&v| T::of(v)).collect();
    let bce = g.bce_with_logits(llrs, &targets, &weights, T::of(LLR_CLIP))?;
    let scaled = g.scale(bce, T::of(1.0 / std::f64::consts::LN_2));
    let minus_one = g.constant(vec![-T::one()], SCALAR);
    let rate = g.add(scaled, minus_one)?;
    if lambda > 0.0 {
        let papr = PaprPenalty::apply(g, &link.modem, x, PAPR_TEMPERATURE)?;
        let weighted = g.scale(papr, T::of(lambda));
        let total = g.add(rate, weighted)?;
        Ok(ForwardOutput { total, rate, papr: Some(papr), transmit: x })
    } else {
        Ok(ForwardOutput { total: rate, rate, papr: None, transmit: x })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub rate_loss: f64,
    /// Mean exact PAPR of the batch's frames, dB.
    pub papr_db: f64,
    pub lambda: f64,
    pub mean_speed: f64,
    pub mean_snr_db: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    /// Mean rate loss over records `[from, to)`.
    pub fn mean_rate_loss(&self, from: usize, to: usize) -> f64 {
        let r = &self.records[from.min(self.records.len())..to.min(self.records.len())];
        r.iter().map(|r| r.rate_loss).sum::<f64>() / r.len().max(1) as f64
    }
}

/// Stateful training loop; the history survives a failed step.
pub struct Trainer {
    pub config: TrainConfig,
    pub link: LinkSetup,
    pub tx: Transceiver<f32>,
    pub history: TrainHistory,
    optimizer: Adam<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let link = LinkSetup::new(&config.grid, &config.channel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.train.seed));
        let tx = Transceiver::build(&config, &mut rng)?;
        let optimizer = Adam::new(config.train.learning_rate as f32);
        Ok(Trainer { config, link, tx, history: TrainHistory::default(), optimizer, step: 0 })
    }

    /// Continues from an existing transceiver, e.g. for fine-tuning.
    pub fn resume(config: TrainConfig, tx: Transceiver<f32>) -> Result<Self> {
        config.validate()?;
        let link = LinkSetup::new(&config.grid, &config.channel)?;
        let optimizer = Adam::new(config.train.learning_rate as f32);
        Ok(Trainer { config, link, tx, history: TrainHistory::default(), optimizer, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn draw_batch(&self, step: usize) -> Batch {
        let t = &self.config.train;
        let mut rng = frame_rng(t.seed, TRAIN_STREAM, step as u64);
        Batch::draw(&self.link, self.tx.m, t.batch_size, t.speed_range, t.snr_db_range, &mut rng)
    }

    pub fn step(&mut self) -> Result<TrainRecord> {
        let step = self.step;
        let batch = self.draw_batch(step);
        let lambda = self.config.lambda_at(step);
        let mut g = Graph::new(Mode::Train);
        let out = forward_loss(&mut g, &self.tx, &self.link, &batch, lambda)?;
        let rate = g.value(out.rate)[0].as_f64();
        let total = g.value(out.total)[0].as_f64();
        if !rate.is_finite() || !total.is_finite() {
            return Err(Error::Divergence { step, reason: format!("loss is {total}") });
        }
        let xs = tensor_to_grids(g.value(out.transmit), g.shape(out.transmit))?;
        let modem = &self.link.modem;
        let papr = xs.iter().map(|x| papr_db(&modem.modulate(x)?.samples)).collect::<Result<Vec<f64>>>()?;
        let grads = g.backward(out.total)?;
        if grads.params.values().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, reason: "non-finite gradient".into() });
        }
        let updates = g.take_stat_updates();
        self.optimizer.step(&mut self.tx.store, &grads);
        apply_stat_updates(&mut self.tx.store, &updates, self.config.train.bn_momentum as f32);
        if self.tx.store.get(self.tx.constellation).trainable {
            self.tx.renormalize_constellation()?;
        }
        let n = batch.len() as f64;
        let record = TrainRecord {
            step,
            rate_loss: rate,
            papr_db: papr.iter().sum::<f64>() / n,
            lambda,
            mean_speed: batch.speeds.iter().sum::<f64>() / n,
            mean_snr_db: batch.snr_db.iter().sum::<f64>() / n,
        };
        self.history.records.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    pub fn run(&mut self) -> Result<()> {
        let steps = self.config.train.steps;
        while self.step < steps {
            let r = self.step()?;
            if r.step % 100 == 0 || r.step + 1 == steps {
                log::info!("step {} rate loss {:.4} papr {:.2} dB lambda {:.4}", r.step, r.rate_loss, r.papr_db, r.lambda);
            }
        }
        Ok(())
    }
}

pub fn train_end_to_end(config: TrainConfig) -> Result<(Transceiver<f32>, TrainHistory)> {
    let mut t = Trainer::new(config)?;
    t.run()?;
    Ok((t.tx, t.history))
}
