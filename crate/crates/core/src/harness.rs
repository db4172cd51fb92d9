//! Experiment driver: configuration files, BLER/BER/goodput sweeps,
//! ablations, constellation symmetry analysis and weight persistence.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64 as C64;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tensorkit::{ParamStore, Scalar};

use crate::channel::{doppler, ici_fraction};
use crate::classical_rx::{
    iedd_receive, ls_estimate, mmse_equalize_demap, ChannelEstimate, CovarianceModel, IeddConfig, LmmseEstimator,
    ReceiverKind,
};
use crate::error::{Error, Result};
use crate::fec::{decode_blocks, encode_frame, segment_payload, BlockLayout, CodeRate, LdpcCode, DEFAULT_DECODER_ITERATIONS};
use crate::link::{ChannelConfig, GridConfig, ModulationSettings, ReceiverSettings};
use crate::neural_mod::{collapse_to_gs, dense_pilots, sip_modulate, ModulationMode, ModulatorNet};
use crate::neural_rx::{data_llrs, ReceiverNet};
use crate::ofdm_grid::{bits_to_labels, labels_to_bits, map_labels_to_grid, Constellation, Grid, PilotConfig, PilotPattern};
use crate::rng::{frame_rng, substream};
use crate::trainer::{LinkSetup, TrainConfig, TrainSchedule, Transceiver};

pub const CSV_HEADER: &str = "receiver,pilot,speed_mps,snr_db,frames,block_errors,bler,ber,rho,goodput";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeConfig {
    pub blocklength: usize,
    pub rate: CodeRate,
}

impl Default for CodeConfig {
    fn default() -> Self {
        CodeConfig { blocklength: 648, rate: CodeRate::R12 }
    }
}

impl CodeConfig {
    pub fn code(&self) -> Result<LdpcCode> {
        LdpcCode::new(self.blocklength, self.rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub speeds: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub max_frames: usize,
    pub max_block_errors: usize,
    /// Frames simulated even after the block-error target is reached.
    pub min_frames: usize,
    /// Frames pushed through the neural networks together.
    pub batch: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            speeds: vec![0.0, 40.0, 100.0],
            snr_db: (0..=10).map(|i| 2.0 * i as f64).collect(),
            max_frames: 10_000,
            max_block_errors: 100,
            min_frames: 0,
            batch: 16,
            seed: 1,
        }
    }
}

/// A complete experiment file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub channel: ChannelConfig,
    pub code: CodeConfig,
    pub modulation: ModulationSettings,
    pub receiver: ReceiverSettings,
    pub train: TrainSchedule,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            grid: self.grid.clone(),
            channel: self.channel.clone(),
            modulation: self.modulation.clone(),
            receiver: self.receiver.clone(),
            train: self.train.clone(),
        }
    }
}

/// `R * rho * (1 - BLER)` with `R` in information bits per channel use.
pub fn goodput(rate: f64, rho: f64, bler: f64) -> f64 {
    rate * rho * (1.0 - bler)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub receiver: String,
    pub pilot: String,
    pub speed_mps: f64,
    pub snr_db: f64,
    pub frames: usize,
    pub block_errors: usize,
    pub bler: f64,
    pub ber: f64,
    pub rho: f64,
    pub goodput: f64,
}

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.1},{},{},{:.6},{:.6e},{:.6},{:.6}",
            self.receiver,
            self.pilot,
            self.speed_mps,
            self.snr_db,
            self.frames,
            self.block_errors,
            self.bler,
            self.ber,
            self.rho,
            self.goodput
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// `(snr_db, bler)` of the rows at `speed`, in sweep order.
    pub fn curve(&self, speed: f64) -> Vec<(f64, f64)> {
        self.rows.iter().filter(|r| r.speed_mps == speed).map(|r| (r.snr_db, r.bler)).collect()
    }
}

/// SNR at which a BLER curve first falls to `target`, interpolating
/// `log10(BLER)` linearly between the bracketing points. `None` when the
/// curve never crosses the target or starts below it.
pub fn required_snr(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.first()?.1 <= target {
        return None;
    }
    let floor = 1e-12;
    for w in pts.windows(2) {
        let ((s0, b0), (s1, b1)) = (w[0], w[1]);
        if b0 > target && b1 <= target {
            let (l0, l1, lt) = (b0.max(floor).log10(), b1.max(floor).log10(), target.log10());
            return Some(s0 + (s1 - s0) * (l0 - lt) / (l0 - l1));
        }
    }
    None
}

/// How data symbols are drawn for each frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    /// Random LDPC codewords.
    Coded,
    /// The all-zero codeword: every data RE carries the same symbol.
    SingleSymbol,
    /// Uncoded labels drawn from a random subset of `k` points per frame;
    /// a block error is any hard-decision error in a block-length chunk.
    Restricted(usize),
}

enum TxPath<'a> {
    Fixed(Constellation),
    Neural(&'a Transceiver<f32>),
    Sip { c: Constellation, fraction: f64 },
}

/// Per-point receiver state.
struct PointState {
    speed: f64,
    n0: f64,
    gamma: f64,
    cov: Option<CovarianceModel>,
    lmmse: Option<LmmseEstimator>,
}

struct FrameOutcome {
    blocks: usize,
    block_errors: usize,
    bits: usize,
    bit_errors: usize,
}

/// Runs frames through one transmitter/receiver pairing.
pub struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    link: LinkSetup,
    code: LdpcCode,
    layout: BlockLayout,
    tx: TxPath<'a>,
    rx: Option<&'a Transceiver<f32>>,
    constellation: Constellation,
    frame_mode: FrameMode,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &'a ExperimentConfig, bundle: Option<&'a Transceiver<f32>>, frame_mode: FrameMode) -> Result<Self> {
        let link = LinkSetup::new(&cfg.grid, &cfg.channel)?;
        let code = cfg.code.code()?;
        let m = cfg.grid.m;
        let layout = segment_payload(m * link.pattern.n_data(), &code)?;
        let mode = cfg.modulation.mode;
        let need_bundle = || {
            bundle.ok_or_else(|| Error::Config(format!("modulation `{}` needs trained weights", mode.name())))
        };
        if let Some(b) = bundle {
            if b.m != m {
                return Err(Error::Config(format!("weights carry {} bits per symbol, the grid {m}", b.m)));
            }
        }
        let tx = match mode {
            ModulationMode::Qam => TxPath::Fixed(Constellation::qam(m)?),
            ModulationMode::Gs => TxPath::Fixed(need_bundle()?.constellation()?),
            ModulationMode::DeepOfdm | ModulationMode::DeepOfdmLinear => {
                let b = need_bundle()?;
                if b.modulator.is_none() {
                    return Err(Error::Config("weights have no modulator".into()));
                }
                TxPath::Neural(b)
            }
            ModulationMode::DeepOfdmGs => {
                let b = need_bundle()?;
                let net = b.modulator.as_ref().ok_or_else(|| Error::Config("weights have no modulator".into()))?;
                let mut rng = substream(cfg.sweep.seed, 0x6773);
                TxPath::Fixed(collapse_to_gs(&b.store, net, &b.constellation()?, &link.pattern, 64, &mut rng)?)
            }
            ModulationMode::Sip => {
                if cfg.grid.pilots != PilotConfig::ZeroP {
                    return Err(Error::Config("superimposed pilots need the 0P pattern".into()));
                }
                let c = match bundle {
                    Some(b) => b.constellation()?,
                    None => Constellation::qam(m)?,
                };
                TxPath::Sip { c, fraction: cfg.modulation.sip_fraction }
            }
        };
        let constellation = match &tx {
            TxPath::Fixed(c) | TxPath::Sip { c, .. } => c.clone(),
            TxPath::Neural(b) => b.constellation()?,
        };
        let kind = cfg.receiver.kind;
        let rx = if kind == ReceiverKind::Neural {
            let b = need_bundle()?;
            if b.receiver.config.input != cfg.receiver.input {
                return Err(Error::Config(format!(
                    "weights expect receiver input `{}`, the experiment `{}`",
                    b.receiver.config.input.name(),
                    cfg.receiver.input.name()
                )));
            }
            Some(b)
        } else {
            if matches!(tx, TxPath::Neural(_)) {
                return Err(Error::Config(format!("receiver `{}` needs a fixed constellation", kind.name())));
            }
            if matches!(tx, TxPath::Sip { .. }) && kind != ReceiverKind::PerfectCsi {
                return Err(Error::EstimatorInapplicable("superimposed pilots are decoded by the neural receiver".into()));
            }
            None
        };
        Ok(Evaluator { cfg, link, code, layout, tx, rx, constellation, frame_mode })
    }

    pub fn layout(&self) -> BlockLayout {
        self.layout
    }

    pub fn pattern(&self) -> &PilotPattern {
        &self.link.pattern
    }

    /// Information bits per channel use: code rate times bits per symbol.
    pub fn spectral_rate(&self) -> f64 {
        self.cfg.code.rate.value() * self.cfg.grid.m as f64
    }

    fn point_state(&self, speed: f64, snr_db: f64) -> Result<PointState> {
        let grid = &self.cfg.grid;
        let n0 = 10f64.powf(-snr_db / 10.0);
        let gamma = ici_fraction(speed, self.cfg.channel.carrier, grid.subcarrier_spacing);
        let (cov, lmmse) = match self.cfg.receiver.kind {
            ReceiverKind::Lmmse | ReceiverKind::Iedd => {
                let f_d = doppler(speed, self.cfg.channel.carrier);
                let cov = CovarianceModel::from_profile(&self.link.profile, grid.n_s, grid.n_t, f_d, grid.symbol_duration())?;
                let est = LmmseEstimator::new(&self.link.pattern, &cov, n0 + gamma)?;
                (Some(cov), Some(est))
            }
            _ => (None, None),
        };
        Ok(PointState { speed, n0, gamma, cov, lmmse })
    }

    /// Simulates one (speed, SNR) point.
    pub fn run_point(&self, point: u64, speed: f64, snr_db: f64) -> Result<SweepRow> {
        let st = self.point_state(speed, snr_db)?;
        let sw = &self.cfg.sweep;
        let (mut frames, mut blocks, mut block_errors, mut bits, mut bit_errors) = (0, 0, 0, 0, 0);
        let done = |frames: usize, errors: usize| {
            frames >= sw.max_frames || (errors >= sw.max_block_errors && frames >= sw.min_frames)
        };
        'outer: while !done(frames, block_errors) {
            let chunk = sw.batch.max(1).min(sw.max_frames - frames);
            for o in self.run_frames(point, frames, chunk, &st)? {
                frames += 1;
                blocks += o.blocks;
                block_errors += o.block_errors;
                bits += o.bits;
                bit_errors += o.bit_errors;
                if done(frames, block_errors) {
                    break 'outer;
                }
            }
        }
        let bler = block_errors as f64 / blocks.max(1) as f64;
        let rho = self.link.pattern.data_fraction();
        Ok(SweepRow {
            receiver: self.cfg.receiver.kind.name().to_string(),
            pilot: self.cfg.grid.pilots.name().to_string(),
            speed_mps: speed,
            snr_db,
            frames,
            block_errors,
            bler,
            ber: bit_errors as f64 / bits.max(1) as f64,
            rho,
            goodput: goodput(self.spectral_rate(), rho, bler),
        })
    }

    /// Frames `first .. first + count` of sweep point `point`.
    fn run_frames(&self, point: u64, first: usize, count: usize, st: &PointState) -> Result<Vec<FrameOutcome>> {
        let m = self.cfg.grid.m;
        let pattern = &self.link.pattern;
        let data = pattern.data_indices();
        let mut payloads = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut channels = Vec::with_capacity(count);
        let mut noises = Vec::with_capacity(count);
        for f in first..first + count {
            let mut rng = frame_rng(self.cfg.sweep.seed, point, f as u64);
            let (info, coded) = self.draw_payload(&mut rng)?;
            labels.push(bits_to_labels(&coded, m)?);
            payloads.push((info, coded));
            channels.push(self.link.draw_channel(st.speed, &mut rng));
            noises.push(self.link.draw_noise(st.n0, &mut rng));
        }
        let xs: Vec<Grid> = match &self.tx {
            TxPath::Fixed(c) => labels.iter().map(|l| map_labels_to_grid(l, c, pattern)).collect::<Result<_>>()?,
            TxPath::Sip { c, fraction } => {
                let p = dense_pilots(pattern.n_s, pattern.n_t);
                let a = vec![*fraction; pattern.n_s * pattern.n_t];
                labels.iter().map(|l| sip_modulate(&map_labels_to_grid(l, c, pattern)?, &p, &a)).collect::<Result<_>>()?
            }
            TxPath::Neural(t) => {
                let re = pattern.n_s * pattern.n_t;
                let mut all = vec![0u32; count * re];
                for (f, l) in labels.iter().enumerate() {
                    for (&i, &v) in data.iter().zip(l) {
                        all[f * re + i] = v;
                    }
                }
                t.transmit(&all, pattern)?
            }
        };
        let ys: Vec<Grid> = xs
            .iter()
            .zip(&channels)
            .zip(&noises)
            .map(|((x, ch), w)| self.link.propagate(x, ch, w))
            .collect::<Result<_>>()?;
        let csi: Vec<Grid> = channels.iter().map(|c| self.link.csi(c)).collect();
        let llrs: Vec<Vec<f64>> = match self.rx {
            Some(t) => {
                let yr: Vec<&Grid> = ys.iter().collect();
                let hr: Vec<&Grid> = csi.iter().collect();
                t.receive(&yr, pattern, Some(&hr))?.iter().map(|a| data_llrs(a, pattern, m)).collect()
            }
            None => Vec::new(),
        };
        let mut out = Vec::with_capacity(count);
        for f in 0..count {
            let (info, coded) = &payloads[f];
            let o = match (self.rx, self.cfg.receiver.kind) {
                (Some(_), _) => self.score(&llrs[f], info, coded)?,
                (None, ReceiverKind::Iedd) => {
                    let cfg = IeddConfig {
                        outer_iterations: self.cfg.receiver.iedd_iterations,
                        decoder_iterations: DEFAULT_DECODER_ITERATIONS,
                    };
                    let (cov, est) = (st.cov.as_ref().expect("set for iedd"), st.lmmse.as_ref().expect("set for iedd"));
                    let n0_eff = st.n0 + st.gamma;
                    if self.frame_mode != FrameMode::Coded && !matches!(self.frame_mode, FrameMode::Restricted(k) if k >= 1 << m)
                    {
                        let l = mmse_equalize_demap(&ys[f], &est.estimate(&ys[f])?, st.n0, st.gamma, &self.constellation, pattern)?;
                        self.score(&l.llrs, info, coded)?
                    } else {
                        let r = iedd_receive(&ys[f], pattern, cov, est, n0_eff, &self.constellation, &self.code, &self.layout, &cfg)?;
                        self.score_bits(&r.info_bits, info)
                    }
                }
                (None, kind) => {
                    let est = match kind {
                        ReceiverKind::PerfectCsi => ChannelEstimate::perfect(csi[f].clone()),
                        ReceiverKind::Ls => ls_estimate(&ys[f], pattern, st.n0 + st.gamma)?,
                        ReceiverKind::Lmmse => st.lmmse.as_ref().expect("set for lmmse").estimate(&ys[f])?,
                        _ => unreachable!("neural and iedd handled above"),
                    };
                    let l = mmse_equalize_demap(&ys[f], &est, st.n0, st.gamma, &self.constellation, pattern)?;
                    self.score(&l.llrs, info, coded)?
                }
            };
            out.push(o);
        }
        Ok(out)
    }

    fn coded(&self) -> bool {
        match self.frame_mode {
            FrameMode::Coded | FrameMode::SingleSymbol => true,
            FrameMode::Restricted(k) => k >= 1 << self.cfg.grid.m,
        }
    }

    /// Information bits and the full coded bit sequence of one frame.
    fn draw_payload<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<u8>, Vec<u8>)> {
        let m = self.cfg.grid.m;
        match self.frame_mode {
            FrameMode::SingleSymbol => {
                let info = vec![0u8; self.layout.info_bits(&self.code)];
                let coded = encode_frame(&info, &self.code, &self.layout)?;
                Ok((info, coded))
            }
            FrameMode::Restricted(k) if k < 1 << m => {
                let subset: Vec<u32> = sample(rng, 1 << m, k.max(1)).into_iter().map(|v| v as u32).collect();
                let n = self.layout.coded_bits() / m;
                let labels: Vec<u32> = (0..n).map(|_| subset[rng.random_range(0..subset.len())]).collect();
                let bits = labels_to_bits(&labels, m);
                Ok((bits.clone(), bits))
            }
            _ => {
                let info: Vec<u8> = (0..self.layout.info_bits(&self.code)).map(|_| rng.random_range(0..2u8)).collect();
                let coded = encode_frame(&info, &self.code, &self.layout)?;
                Ok((info, coded))
            }
        }
    }

    fn score(&self, llrs: &[f64], info: &[u8], coded: &[u8]) -> Result<FrameOutcome> {
        if self.coded() {
            let decoded = decode_blocks(llrs, &self.code, &self.layout, DEFAULT_DECODER_ITERATIONS)?;
            let bits: Vec<u8> = decoded.iter().flat_map(|d| d.bits.iter().copied()).collect();
            Ok(self.score_bits(&bits, info))
        } else {
            let n = self.code.n;
            let used = self.layout.blocks * n;
            let hard: Vec<u8> = llrs[..used].iter().map(|&l| u8::from(l > 0.0)).collect();
            let mut o = FrameOutcome { blocks: self.layout.blocks, block_errors: 0, bits: used, bit_errors: 0 };
            for (h, c) in hard.chunks(n).zip(coded[..used].chunks(n)) {
                let e = h.iter().zip(c).filter(|(a, b)| a != b).count();
                o.bit_errors += e;
                o.block_errors += usize::from(e > 0);
            }
            Ok(o)
        }
    }

    fn score_bits(&self, decoded: &[u8], info: &[u8]) -> FrameOutcome {
        let k = self.code.k;
        let mut o = FrameOutcome { blocks: self.layout.blocks, block_errors: 0, bits: info.len(), bit_errors: 0 };
        for (d, i) in decoded.chunks(k).zip(info.chunks(k)) {
            let e = d.iter().zip(i).filter(|(a, b)| a != b).count();
            o.bit_errors += e;
            o.block_errors += usize::from(e > 0);
        }
        o
    }
}

pub fn run_sweep(cfg: &ExperimentConfig, bundle: Option<&Transceiver<f32>>) -> Result<SweepResult> {
    run_sweep_with(cfg, bundle, FrameMode::Coded)
}

pub fn run_sweep_with(cfg: &ExperimentConfig, bundle: Option<&Transceiver<f32>>, mode: FrameMode) -> Result<SweepResult> {
    let ev = Evaluator::new(cfg, bundle, mode)?;
    let mut rows = Vec::new();
    let mut point = 0u64;
    for &speed in &cfg.sweep.speeds {
        for &snr in &cfg.sweep.snr_db {
            let row = ev.run_point(point, speed, snr)?;
            log::info!("{}", row.csv());
            rows.push(row);
            point += 1;
        }
    }
    Ok(SweepResult { seed: cfg.sweep.seed, rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    SingleSymbol,
    Restricted8,
    GsCollapse,
    Linear,
    WidthSplit,
    Sip,
    CsiOracle,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::SingleSymbol => "single-symbol",
            AblationMode::Restricted8 => "restricted-8",
            AblationMode::GsCollapse => "gs-collapse",
            AblationMode::Linear => "linear",
            AblationMode::WidthSplit => "width-split",
            AblationMode::Sip => "sip",
            AblationMode::CsiOracle => "csi-oracle",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationMode::SingleSymbol,
            AblationMode::Restricted8,
            AblationMode::GsCollapse,
            AblationMode::Linear,
            AblationMode::WidthSplit,
            AblationMode::Sip,
            AblationMode::CsiOracle,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// Applies an ablation to `cfg` and runs the sweep.
pub fn run_ablation(mode: AblationMode, cfg: &ExperimentConfig, bundle: Option<&Transceiver<f32>>) -> Result<SweepResult> {
    let mut cfg = cfg.clone();
    match mode {
        AblationMode::SingleSymbol => run_sweep_with(&cfg, bundle, FrameMode::SingleSymbol),
        AblationMode::Restricted8 => run_sweep_with(&cfg, bundle, FrameMode::Restricted(8)),
        AblationMode::GsCollapse => {
            cfg.modulation.mode = ModulationMode::DeepOfdmGs;
            run_sweep(&cfg, bundle)
        }
        AblationMode::Linear => {
            if bundle.is_some_and(|b| b.mode != ModulationMode::DeepOfdmLinear) {
                return Err(Error::Config("the linear ablation needs weights trained in deepofdm-linear mode".into()));
            }
            cfg.modulation.mode = ModulationMode::DeepOfdmLinear;
            run_sweep(&cfg, bundle)
        }
        AblationMode::WidthSplit => {
            let b = bundle.ok_or_else(|| Error::Config("the width-split ablation needs trained weights".into()))?;
            let (n_s, n_t) = (cfg.grid.n_s, cfg.grid.n_t);
            let rx = b.receiver_complexity(n_s, n_t);
            match b.modulator_complexity(n_s, n_t) {
                Some(tx) => log::info!("tx {} params {} MACs, rx {} params {} MACs", tx.params, tx.macs, rx.params, rx.macs),
                None => log::info!("rx {} params {} MACs", rx.params, rx.macs),
            }
            run_sweep(&cfg, bundle)
        }
        AblationMode::Sip => {
            cfg.modulation.mode = ModulationMode::Sip;
            cfg.grid.pilots = PilotConfig::ZeroP;
            run_sweep(&cfg, bundle)
        }
        AblationMode::CsiOracle => {
            if bundle.is_none() {
                cfg.receiver.kind = ReceiverKind::PerfectCsi;
            }
            run_sweep(&cfg, bundle)
        }
    }
}

/// Symmetric Chamfer distance between `points` and their rotation by
/// `theta`: the mean nearest-neighbour distance taken in both directions.
pub fn symmetry_metric(points: &[C64], theta: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let rot = C64::from_polar(1.0, theta);
    let rotated: Vec<C64> = points.iter().map(|p| p * rot).collect();
    (chamfer(points, &rotated) + chamfer(&rotated, points)) / 2.0
}

fn chamfer(a: &[C64], b: &[C64]) -> f64 {
    a.iter().map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / a.len() as f64
}

/// Monte-Carlo noise floor of [`symmetry_metric`] for a cloud of this size:
/// the mean metric over `trials` copies of the cloud in which every point is
/// rotated by an independent random multiple of `theta`, which makes the
/// underlying distribution exactly invariant.
pub fn symmetry_noise_floor<R: Rng + ?Sized>(points: &[C64], theta: f64, trials: usize, rng: &mut R) -> f64 {
    let k = ((2.0 * std::f64::consts::PI / theta).round() as usize).max(1);
    let mut total = 0.0;
    for _ in 0..trials.max(1) {
        let sym: Vec<C64> =
            points.iter().map(|p| p * C64::from_polar(1.0, theta * rng.random_range(0..k) as f64)).collect();
        total += symmetry_metric(&sym, theta);
    }
    total / trials.max(1) as f64
}

/// Modulator outputs on the data REs of `grids` random frames.
pub fn output_cloud<R: Rng + ?Sized>(
    tx: &Transceiver<f32>,
    pattern: &PilotPattern,
    grids: usize,
    rng: &mut R,
) -> Result<Vec<C64>> {
    let re = pattern.n_s * pattern.n_t;
    let data = pattern.data_indices();
    let mut labels = vec![0u32; grids * re];
    for f in 0..grids {
        for &i in &data {
            labels[f * re + i] = rng.random_range(0..1u32 << tx.m);
        }
    }
    let xs = tx.transmit(&labels, pattern)?;
    Ok(xs.iter().flat_map(|x| data.iter().map(|&i| x.data[i])).collect())
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 4],
    pub trainable: bool,
    pub values: Vec<f32>,
}

/// Everything needed to rebuild a trained transceiver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsBundle {
    pub version: u32,
    pub mode: ModulationMode,
    pub m: usize,
    pub sip_fraction: f64,
    pub modulator: Option<ModulatorNet>,
    pub receiver: ReceiverNet,
    /// Normalized constellation as `[re, im]` pairs.
    pub constellation: Vec<[f64; 2]>,
    pub params: Vec<NamedArray>,
    pub config: TrainConfig,
    pub steps: usize,
}

impl WeightsBundle {
    pub fn from_transceiver(tx: &Transceiver<f32>, config: &TrainConfig, steps: usize) -> Result<Self> {
        let c = tx.constellation()?;
        Ok(WeightsBundle {
            version: WEIGHTS_VERSION,
            mode: tx.mode,
            m: tx.m,
            sip_fraction: tx.sip_fraction,
            modulator: tx.modulator.clone(),
            receiver: tx.receiver.clone(),
            constellation: c.points.iter().map(|p| [p.re, p.im]).collect(),
            params: tx
                .store
                .iter()
                .map(|(_, p)| NamedArray { name: p.name.clone(), shape: p.shape, trainable: p.trainable, values: p.value.clone() })
                .collect(),
            config: config.clone(),
            steps,
        })
    }

    pub fn transceiver(&self) -> Result<Transceiver<f32>> {
        let mut store = ParamStore::new();
        for a in &self.params {
            if a.values.len() != a.shape.iter().product::<usize>() {
                return Err(Error::Corrupt(format!("array `{}` does not match its shape {:?}", a.name, a.shape)));
            }
            store.add(a.name.clone(), a.shape, a.values.clone(), a.trainable);
        }
        let constellation =
            store.find("constellation").ok_or_else(|| Error::Corrupt("no constellation array".into()))?;
        let tx = Transceiver {
            mode: self.mode,
            m: self.m,
            store,
            constellation,
            modulator: self.modulator.clone(),
            receiver: self.receiver.clone(),
            sip_fraction: self.sip_fraction,
        };
        let layers = tx.modulator.iter().map(|n| &n.layers).chain([&tx.receiver.layers]);
        for l in layers.flat_map(|s| s.layers.iter()) {
            check_layer_ids(&tx.store, l)?;
        }
        Ok(tx)
    }
}

fn check_layer_ids<T: Scalar>(store: &ParamStore<T>, layer: &tensorkit::Layer) -> Result<()> {
    use tensorkit::Layer;
    let ids = match layer {
        Layer::Conv2d(l) => vec![Some(l.weight), l.bias],
        Layer::SeparableConv2d(l) => vec![Some(l.depthwise), Some(l.pointwise), l.bias],
        Layer::BatchNorm(l) => vec![Some(l.gamma), Some(l.beta), Some(l.running_mean), Some(l.running_var)],
        Layer::Relu => vec![],
        Layer::Residual(b) => {
            let mut inner = vec![
                Layer::BatchNorm(b.bn1.clone()),
                Layer::SeparableConv2d(b.conv1.clone()),
                Layer::BatchNorm(b.bn2.clone()),
                Layer::SeparableConv2d(b.conv2.clone()),
            ];
            inner.extend(b.projection.clone().map(Layer::Conv2d));
            for l in &inner {
                check_layer_ids(store, l)?;
            }
            vec![]
        }
    };
    if let Some(id) = ids.into_iter().flatten().find(|id| id.0 >= store.len()) {
        return Err(Error::Corrupt(format!("layer `{}` refers to missing array {}", layer.name(), id.0)));
    }
    Ok(())
}

pub fn save_weights(bundle: &WeightsBundle, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, bundle)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<WeightsBundle> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Corrupt(e.to_string()))?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corrupt("missing version field".into()))?;
    if found != WEIGHTS_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: WEIGHTS_VERSION });
    }
    serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))
}
