//! OFDM modulation with a unitary FFT pair and cyclic prefix, plus PAPR.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::ofdm_grid::Grid;

/// Time-domain samples of one frame: `n_t` symbols of `n_s + n_cp` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub samples: Vec<C64>,
    pub n_s: usize,
    pub n_t: usize,
    pub n_cp: usize,
    pub subcarrier_spacing: f64,
}

impl Frame {
    pub fn symbol_len(&self) -> usize {
        self.n_s + self.n_cp
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / (self.n_s as f64 * self.subcarrier_spacing)
    }
}

/// FFT plans for one (n_s, n_cp) geometry.
#[derive(Clone)]
pub struct OfdmModem {
    pub n_s: usize,
    pub n_cp: usize,
    pub subcarrier_spacing: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for OfdmModem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OfdmModem").field("n_s", &self.n_s).field("n_cp", &self.n_cp).finish()
    }
}

impl OfdmModem {
    pub fn new(n_s: usize, n_cp: usize, subcarrier_spacing: f64) -> Result<Self> {
        if n_s == 0 {
            return Err(Error::Config("zero subcarriers".into()));
        }
        if n_cp >= n_s {
            return Err(Error::Config(format!("cyclic prefix {n_cp} must be shorter than {n_s} subcarriers")));
        }
        let mut planner = FftPlanner::new();
        Ok(OfdmModem {
            n_s,
            n_cp,
            subcarrier_spacing,
            fwd: planner.plan_fft_forward(n_s),
            inv: planner.plan_fft_inverse(n_s),
            scale: 1.0 / (n_s as f64).sqrt(),
        })
    }

    pub fn symbol_len(&self) -> usize {
        self.n_s + self.n_cp
    }

    /// Unitary inverse DFT of one subcarrier column, in place.
    pub fn idft(&self, buf: &mut [C64]) {
        self.inv.process(buf);
        buf.iter_mut().for_each(|v| *v *= self.scale);
    }

    /// Unitary forward DFT, in place.
    pub fn dft(&self, buf: &mut [C64]) {
        self.fwd.process(buf);
        buf.iter_mut().for_each(|v| *v *= self.scale);
    }

    pub fn modulate(&self, grid: &Grid) -> Result<Frame> {
        if grid.n_s != self.n_s {
            return Err(Error::Framing(format!("grid has {} subcarriers, modem {}", grid.n_s, self.n_s)));
        }
        let sl = self.symbol_len();
        let mut samples = vec![C64::new(0.0, 0.0); grid.n_t * sl];
        let mut col = vec![C64::new(0.0, 0.0); self.n_s];
        for t in 0..grid.n_t {
            for (k, c) in col.iter_mut().enumerate() {
                *c = grid.get(k, t);
            }
            self.idft(&mut col);
            let sym = &mut samples[t * sl..(t + 1) * sl];
            sym[..self.n_cp].copy_from_slice(&col[self.n_s - self.n_cp..]);
            sym[self.n_cp..].copy_from_slice(&col);
        }
        Ok(Frame { samples, n_s: self.n_s, n_t: grid.n_t, n_cp: self.n_cp, subcarrier_spacing: self.subcarrier_spacing })
    }

    pub fn demodulate(&self, frame: &Frame) -> Result<Grid> {
        let sl = self.symbol_len();
        if frame.n_s != self.n_s || frame.n_cp != self.n_cp || frame.samples.len() != frame.n_t * sl {
            return Err(Error::Framing(format!(
                "frame of {} samples does not hold {} symbols of {sl}",
                frame.samples.len(),
                frame.n_t
            )));
        }
        let mut grid = Grid::zeros(self.n_s, frame.n_t);
        let mut col = vec![C64::new(0.0, 0.0); self.n_s];
        for t in 0..frame.n_t {
            col.copy_from_slice(&frame.samples[t * sl + self.n_cp..(t + 1) * sl]);
            self.dft(&mut col);
            grid.set_column(t, &col);
        }
        Ok(grid)
    }
}

impl OfdmModem {
    /// Adjoint of [`OfdmModem::modulate`]: maps a gradient over frame samples
    /// back to the grid.
    pub fn modulate_adjoint(&self, g: &[C64], n_t: usize) -> Result<Grid> {
        let sl = self.symbol_len();
        if g.len() != n_t * sl {
            return Err(Error::Framing(format!("{} samples for {n_t} symbols of {sl}", g.len())));
        }
        let mut grid = Grid::zeros(self.n_s, n_t);
        let mut col = vec![C64::new(0.0, 0.0); self.n_s];
        for t in 0..n_t {
            let sym = &g[t * sl..(t + 1) * sl];
            col.copy_from_slice(&sym[self.n_cp..]);
            for (c, v) in col[self.n_s - self.n_cp..].iter_mut().zip(&sym[..self.n_cp]) {
                *c += v;
            }
            self.dft(&mut col);
            grid.set_column(t, &col);
        }
        Ok(grid)
    }

    /// Adjoint of [`OfdmModem::demodulate`]: cyclic-prefix samples get zero.
    pub fn demodulate_adjoint(&self, g: &Grid) -> Result<Vec<C64>> {
        if g.n_s != self.n_s {
            return Err(Error::Framing(format!("grid has {} subcarriers, modem {}", g.n_s, self.n_s)));
        }
        let sl = self.symbol_len();
        let mut out = vec![C64::new(0.0, 0.0); g.n_t * sl];
        for t in 0..g.n_t {
            let mut col = g.column(t);
            self.idft(&mut col);
            out[t * sl + self.n_cp..(t + 1) * sl].copy_from_slice(&col);
        }
        Ok(out)
    }
}

pub fn ofdm_modulate(grid: &Grid, n_cp: usize, subcarrier_spacing: f64) -> Result<Frame> {
    OfdmModem::new(grid.n_s, n_cp, subcarrier_spacing)?.modulate(grid)
}

pub fn ofdm_demodulate(frame: &Frame) -> Result<Grid> {
    OfdmModem::new(frame.n_s, frame.n_cp, frame.subcarrier_spacing)?.demodulate(frame)
}

/// Peak over mean instantaneous power of all samples, cyclic prefix included.
pub fn papr(samples: &[C64]) -> Result<f64> {
    let mean = samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / samples.len().max(1) as f64;
    if !(mean > 0.0) {
        return Err(Error::Numeric("PAPR of a zero-energy frame".into()));
    }
    let peak = samples.iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    Ok(peak / mean)
}

pub fn papr_db(samples: &[C64]) -> Result<f64> {
    Ok(10.0 * papr(samples)?.log10())
}

/// Smooth PAPR surrogate: `T^-1 log sum exp(T p_i) / mean(p)` where
/// `p_i = |x_i|^2 / mean(p)` is the normalized power. Upper-bounds the exact
/// PAPR and approaches it as the temperature grows.
pub fn smooth_papr(samples: &[C64], temperature: f64) -> Result<f64> {
    let mean = samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / samples.len().max(1) as f64;
    if !(mean > 0.0) {
        return Err(Error::Numeric("PAPR of a zero-energy frame".into()));
    }
    let p: Vec<f64> = samples.iter().map(|v| v.norm_sqr() / mean).collect();
    let mx = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = p.iter().map(|&v| (temperature * (v - mx)).exp()).sum();
    Ok(mx + s.ln() / temperature)
}

/// Level (in dB) exceeded with probability `prob` among the given PAPR
/// values, i.e. the complementary-CDF quantile.
pub fn ccdf_level_db(papr_db_values: &[f64], prob: f64) -> f64 {
    let mut v = papr_db_values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = ((1.0 - prob) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Writes samples as interleaved little-endian `f32` (Re, Im) pairs.
pub fn write_iq<W: Write>(samples: &[C64], mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        buf.extend_from_slice(&(s.re as f32).to_le_bytes());
        buf.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_iq(bytes: &[u8]) -> Result<Vec<C64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Framing(format!("{} bytes is not a whole number of IQ pairs", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            C64::new(re as f64, im as f64)
        })
        .collect())
}
