//! Tapped-delay-line fading with sum-of-sinusoids Doppler, AWGN, and the
//! inter-carrier-interference noise model.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ofdm_grid::Grid;
use crate::waveform::Frame;

/// Propagation speed used for Doppler arithmetic (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Sinusoids per tap in the fading synthesizer.
pub const SOS_SINUSOIDS: usize = 32;

/// TDL-A normalized delays and powers (dB) from 3GPP TR 38.901.
const TDL_A: [(f64, f64); 23] = [
    (0.0000, -13.4),
    (0.3819, 0.0),
    (0.4025, -2.2),
    (0.5868, -4.0),
    (0.4610, -6.0),
    (0.5375, -8.2),
    (0.6708, -9.9),
    (0.5750, -10.5),
    (0.7618, -7.5),
    (1.5375, -15.9),
    (1.8978, -6.6),
    (2.2242, -16.7),
    (2.1718, -12.4),
    (2.4942, -15.2),
    (2.5119, -10.8),
    (3.0582, -11.3),
    (4.0810, -12.7),
    (4.4579, -16.2),
    (4.5695, -18.3),
    (4.7966, -18.9),
    (5.0066, -16.6),
    (5.3043, -19.9),
    (9.6586, -29.7),
];

/// Power-delay profile with powers summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdlProfile {
    pub name: String,
    /// Sorted, nonnegative delays in seconds.
    pub delays: Vec<f64>,
    pub powers: Vec<f64>,
}

impl TdlProfile {
    pub fn tdl_a(delay_spread: f64) -> Self {
        let mut taps: Vec<(f64, f64)> = TDL_A.iter().map(|&(d, p)| (d * delay_spread, 10f64.powf(p / 10.0))).collect();
        taps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = taps.iter().map(|t| t.1).sum();
        TdlProfile {
            name: "TDL-A".into(),
            delays: taps.iter().map(|t| t.0).collect(),
            powers: taps.iter().map(|t| t.1 / total).collect(),
        }
    }

    /// Profile from delays in nanoseconds and powers in dB.
    pub fn from_db(name: &str, delays_ns: &[f64], powers_db: &[f64]) -> Result<Self> {
        if delays_ns.len() != powers_db.len() || delays_ns.is_empty() {
            return Err(Error::Config(format!("profile `{name}` needs matching, nonempty delay and power lists")));
        }
        if delays_ns.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) || powers_db.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config(format!("profile `{name}` has invalid delays or powers")));
        }
        let mut taps: Vec<(f64, f64)> =
            delays_ns.iter().zip(powers_db).map(|(&d, &p)| (d * 1e-9, 10f64.powf(p / 10.0))).collect();
        taps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = taps.iter().map(|t| t.1).sum();
        Ok(TdlProfile {
            name: name.to_string(),
            delays: taps.iter().map(|t| t.0).collect(),
            powers: taps.iter().map(|t| t.1 / total).collect(),
        })
    }

    pub fn rms_delay_spread(&self) -> f64 {
        let mean: f64 = self.delays.iter().zip(&self.powers).map(|(d, p)| d * p).sum();
        let m2: f64 = self.delays.iter().zip(&self.powers).map(|(d, p)| d * d * p).sum();
        (m2 - mean * mean).max(0.0).sqrt()
    }

    /// Rounds delays to the nearest sample and merges taps landing on the
    /// same sample by adding their powers.
    pub fn quantize(&self, sample_period: f64) -> SampledProfile {
        let mut taps: Vec<(usize, f64)> = Vec::new();
        for (&d, &p) in self.delays.iter().zip(&self.powers) {
            let l = (d / sample_period).round() as usize;
            match taps.iter_mut().find(|t| t.0 == l) {
                Some(t) => t.1 += p,
                None => taps.push((l, p)),
            }
        }
        taps.sort_by_key(|t| t.0);
        SampledProfile { delays: taps.iter().map(|t| t.0).collect(), powers: taps.iter().map(|t| t.1).collect() }
    }
}

/// Power-delay profile on the sample grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledProfile {
    pub delays: Vec<usize>,
    pub powers: Vec<f64>,
}

impl SampledProfile {
    pub fn max_delay(&self) -> usize {
        self.delays.last().copied().unwrap_or(0)
    }

    pub fn single_tap() -> Self {
        SampledProfile { delays: vec![0], powers: vec![1.0] }
    }

    /// Frequency correlation `R_F[k, k'] = sum_l p_l exp(-j 2 pi (k - k') l / n_s)`.
    pub fn frequency_correlation(&self, n_s: usize, k: isize) -> C64 {
        self.delays
            .iter()
            .zip(&self.powers)
            .map(|(&l, &p)| C64::from_polar(p, -2.0 * std::f64::consts::PI * (k as f64) * l as f64 / n_s as f64))
            .sum()
    }
}

/// Maximum Doppler shift `u f_c / c`.
pub fn doppler(speed: f64, carrier: f64) -> f64 {
    speed * carrier / SPEED_OF_LIGHT
}

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 12.0 {
        // Power series; terms alternate and shrink quickly in this range.
        let q = -0.25 * ax * ax;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..80 {
            term *= q / (k as f64 * k as f64);
            sum += term;
            if term.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        sum
    } else {
        // Hankel asymptotic expansion, summed until the terms stop shrinking.
        let mut term = 1.0;
        let mut p = 1.0;
        let mut q = 0.0;
        for k in 1..60 {
            let odd = (2 * k - 1) as f64;
            let next = term * -(odd * odd) / (k as f64 * 8.0 * ax);
            if next.abs() >= term.abs() {
                break;
            }
            term = next;
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if k % 2 == 0 {
                p += sign * term;
            } else {
                q += sign * term;
            }
        }
        let chi = ax - std::f64::consts::FRAC_PI_4;
        (2.0 / (std::f64::consts::PI * ax)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

/// Clarke time correlation `J0(2 pi f_d tau)`.
pub fn time_correlation(f_d: f64, tau: f64) -> f64 {
    bessel_j0(2.0 * std::f64::consts::PI * f_d * tau)
}

/// Fraction of signal power leaked into inter-carrier interference,
/// `1 - sinc^2(u f_c / (c df))`.
pub fn ici_fraction(speed: f64, carrier: f64, subcarrier_spacing: f64) -> f64 {
    let nu = doppler(speed, carrier) / subcarrier_spacing;
    if nu == 0.0 {
        return 0.0;
    }
    let x = std::f64::consts::PI * nu;
    let s = x.sin() / x;
    1.0 - s * s
}

/// Per-tap complex gain trajectories sampled once per sample period.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub delays: Vec<usize>,
    /// `gains[i][b]` is tap `i` at sample `b`.
    pub gains: Vec<Vec<C64>>,
    pub speed: f64,
    pub doppler: f64,
    pub sample_period: f64,
}

impl ChannelRealization {
    pub fn len(&self) -> usize {
        self.gains.first().map_or(0, |g| g.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }

    /// Time-invariant channel with the given taps.
    pub fn fixed(delays: &[usize], taps: &[C64], n_samples: usize, sample_period: f64) -> Self {
        ChannelRealization {
            delays: delays.to_vec(),
            gains: taps.iter().map(|&h| vec![h; n_samples]).collect(),
            speed: 0.0,
            doppler: 0.0,
            sample_period,
        }
    }
}

/// Draws a realization: each tap is an independent sum of
/// [`SOS_SINUSOIDS`] unit phasors with uniform arrival angles and phases,
/// scaled to power `p_l`, so its autocorrelation is `p_l J0(2 pi f_d tau)`.
pub fn generate_tdl<R: Rng + ?Sized>(
    profile: &SampledProfile,
    speed: f64,
    carrier: f64,
    sample_period: f64,
    n_samples: usize,
    rng: &mut R,
) -> ChannelRealization {
    let f_d = doppler(speed, carrier);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut gains = Vec::with_capacity(profile.delays.len());
    for &p in &profile.powers {
        let amp = (p / SOS_SINUSOIDS as f64).sqrt();
        let mut phasors = Vec::with_capacity(SOS_SINUSOIDS);
        let mut steps = Vec::with_capacity(SOS_SINUSOIDS);
        for _ in 0..SOS_SINUSOIDS {
            let angle: f64 = rng.random_range(0.0..two_pi);
            let phase: f64 = rng.random_range(0.0..two_pi);
            phasors.push(C64::from_polar(amp, phase));
            steps.push(C64::from_polar(1.0, two_pi * f_d * angle.cos() * sample_period));
        }
        let mut traj = Vec::with_capacity(n_samples);
        for b in 0..n_samples {
            // Re-anchor periodically so the recurrence does not drift.
            if b > 0 && b % 1024 == 0 {
                for v in phasors.iter_mut() {
                    *v = C64::from_polar(amp, v.arg());
                }
            }
            traj.push(phasors.iter().sum());
            for (v, s) in phasors.iter_mut().zip(&steps) {
                *v *= s;
            }
        }
        gains.push(traj);
    }
    ChannelRealization { delays: profile.delays.clone(), gains, speed, doppler: f_d, sample_period }
}

pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

/// `y[b] = sum_l h_l[b] x[b - l] + w[b]`, with `x` zero before the frame.
pub fn apply_channel<R: Rng + ?Sized>(frame: &Frame, ch: &ChannelRealization, n0: f64, rng: &mut R) -> Result<Frame> {
    let n = frame.samples.len();
    if ch.len() < n + ch.max_delay() {
        return Err(Error::Config(format!(
            "channel realization of {} samples is shorter than the frame ({n}) plus the largest delay ({})",
            ch.len(),
            ch.max_delay()
        )));
    }
    let mut out = convolve(&frame.samples, ch);
    if n0 > 0.0 {
        for v in out.iter_mut() {
            *v += complex_gaussian(rng, n0);
        }
    }
    Ok(Frame { samples: out, ..frame.clone() })
}

/// Noise-free part of [`apply_channel`]. `ch` must cover `x.len()` samples.
pub fn convolve(x: &[C64], ch: &ChannelRealization) -> Vec<C64> {
    let n = x.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (&l, g) in ch.delays.iter().zip(&ch.gains) {
        for b in l..n {
            out[b] += g[b] * x[b - l];
        }
    }
    out
}

/// Adjoint of [`convolve`]: `x[b - l] += conj(h_l[b]) y[b]`.
pub fn convolve_adjoint(y: &[C64], ch: &ChannelRealization) -> Vec<C64> {
    let n = y.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for (&l, g) in ch.delays.iter().zip(&ch.gains) {
        for b in l..n {
            out[b - l] += g[b].conj() * y[b];
        }
    }
    out
}

/// Sample index at the temporal midpoint of the useful part of symbol `t`.
pub fn symbol_midpoint(t: usize, n_s: usize, n_cp: usize) -> usize {
    t * (n_s + n_cp) + n_cp + n_s / 2
}

/// Frequency response with taps frozen at each symbol's midpoint:
/// `H[k, t] = sum_l h_l(mid_t) exp(-j 2 pi k l / n_s)`.
pub fn freq_csi(ch: &ChannelRealization, n_s: usize, n_t: usize, n_cp: usize) -> Grid {
    let mut h = Grid::zeros(n_s, n_t);
    let two_pi = 2.0 * std::f64::consts::PI;
    for t in 0..n_t {
        let mid = symbol_midpoint(t, n_s, n_cp).min(ch.len().saturating_sub(1));
        for k in 0..n_s {
            let v: C64 = ch
                .delays
                .iter()
                .zip(&ch.gains)
                .map(|(&l, g)| g[mid] * C64::from_polar(1.0, -two_pi * (k * l % n_s) as f64 / n_s as f64))
                .sum();
            h.set(k, t, v);
        }
    }
    h
}
