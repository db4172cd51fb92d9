//! Constellations, pilot patterns and the n_S x n_T resource grid.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::splitmix64;

/// Complex grid stored subcarrier-major: element `(k, t)` lives at
/// `k * n_t + t`, matching the (height, width) layout of network tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub n_s: usize,
    pub n_t: usize,
    pub data: Vec<C64>,
}

impl Grid {
    pub fn zeros(n_s: usize, n_t: usize) -> Self {
        Grid { n_s, n_t, data: vec![C64::new(0.0, 0.0); n_s * n_t] }
    }

    pub fn from_vec(n_s: usize, n_t: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != n_s * n_t {
            return Err(Error::Framing(format!("{} values for a {n_s}x{n_t} grid", data.len())));
        }
        Ok(Grid { n_s, n_t, data })
    }

    #[inline]
    pub fn idx(&self, k: usize, t: usize) -> usize {
        k * self.n_t + t
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize) -> C64 {
        self.data[k * self.n_t + t]
    }

    #[inline]
    pub fn set(&mut self, k: usize, t: usize, v: C64) {
        self.data[k * self.n_t + t] = v;
    }

    pub fn column(&self, t: usize) -> Vec<C64> {
        (0..self.n_s).map(|k| self.get(k, t)).collect()
    }

    pub fn set_column(&mut self, t: usize, col: &[C64]) {
        for (k, &v) in col.iter().enumerate() {
            self.set(k, t, v);
        }
    }

    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }

    /// Interleaved (Re, Im) values, one pair per RE, in storage order.
    pub fn to_interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|v| [v.re, v.im]).collect()
    }

    pub fn from_interleaved(n_s: usize, n_t: usize, vals: &[f64]) -> Result<Self> {
        if vals.len() != 2 * n_s * n_t {
            return Err(Error::Framing(format!("{} reals for a {n_s}x{n_t} complex grid", vals.len())));
        }
        Ok(Grid { n_s, n_t, data: vals.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect() })
    }
}

/// Points indexed by their bit label: `points[l]` carries the m-bit word
/// `l`, most significant bit first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constellation {
    pub m: usize,
    pub points: Vec<C64>,
    pub trainable: bool,
}

/// Subtracts the mean and divides by the RMS of the centred points.
pub fn normalize_constellation(points: &[C64]) -> Result<Vec<C64>> {
    if points.len() < 2 {
        return Err(Error::DegenerateConstellation("need at least two points".into()));
    }
    let mean = points.iter().sum::<C64>() / points.len() as f64;
    let centred: Vec<C64> = points.iter().map(|p| p - mean).collect();
    let rms = (centred.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64).sqrt();
    if !(rms > 1e-12) {
        return Err(Error::DegenerateConstellation("all points coincide".into()));
    }
    Ok(centred.into_iter().map(|p| p / rms).collect())
}

fn gray_to_binary(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

impl Constellation {
    /// Normalized constellation from arbitrary points; `points.len()` must be
    /// a power of two.
    pub fn from_points(points: &[C64], trainable: bool) -> Result<Self> {
        let n = points.len();
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Config(format!("constellation size {n} is not a power of two >= 2")));
        }
        Ok(Constellation { m: n.trailing_zeros() as usize, points: normalize_constellation(points)?, trainable })
    }

    /// Square QAM with binary-reflected Gray labeling on each axis. The first
    /// m/2 label bits select the in-phase level, the rest the quadrature
    /// level; an all-zero axis word maps to the most positive level.
    pub fn qam(m: usize) -> Result<Self> {
        if m == 0 || m % 2 != 0 || m > 16 {
            return Err(Error::Config(format!("square QAM needs an even order, got m = {m}")));
        }
        let k = m / 2;
        let levels = 1usize << k;
        let level = |word: usize| ((levels - 1) as f64) - 2.0 * gray_to_binary(word) as f64;
        let points: Vec<C64> = (0..1usize << m)
            .map(|label| C64::new(level(label >> k), level(label & (levels - 1))))
            .collect();
        Ok(Constellation { m, points: normalize_constellation(&points)?, trainable: false })
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    /// Bit `i` (0 = most significant) of label `label`.
    #[inline]
    pub fn bit(&self, label: usize, i: usize) -> u8 {
        ((label >> (self.m - 1 - i)) & 1) as u8
    }

    /// Label of the nearest point.
    pub fn nearest(&self, y: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (l, p) in self.points.iter().enumerate() {
            let d = (y - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = l;
            }
        }
        best
    }

    pub fn renormalize(&mut self) -> Result<()> {
        self.points = normalize_constellation(&self.points)?;
        Ok(())
    }
}

pub fn bits_to_labels(bits: &[u8], m: usize) -> Result<Vec<u32>> {
    if m == 0 || bits.len() % m != 0 {
        return Err(Error::Framing(format!("{} bits is not a multiple of m = {m}", bits.len())));
    }
    Ok(bits
        .chunks_exact(m)
        .map(|w| w.iter().fold(0u32, |acc, &b| (acc << 1) | (b & 1) as u32))
        .collect())
}

pub fn labels_to_bits(labels: &[u32], m: usize) -> Vec<u8> {
    labels.iter().flat_map(|&l| (0..m).map(move |i| ((l >> (m - 1 - i)) & 1) as u8)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PilotConfig {
    #[serde(rename = "2P")]
    TwoP,
    #[serde(rename = "1P")]
    OneP,
    #[serde(rename = "0P")]
    ZeroP,
}

impl PilotConfig {
    /// 0-indexed OFDM symbols carrying pilots: the third and twelfth symbols
    /// for 2P, the third for 1P.
    pub fn default_symbols(self) -> &'static [usize] {
        match self {
            PilotConfig::TwoP => &[2, 11],
            PilotConfig::OneP => &[2],
            PilotConfig::ZeroP => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PilotConfig::TwoP => "2P",
            PilotConfig::OneP => "1P",
            PilotConfig::ZeroP => "0P",
        }
    }
}

impl std::str::FromStr for PilotConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2P" | "2p" => Ok(PilotConfig::TwoP),
            "1P" | "1p" => Ok(PilotConfig::OneP),
            "0P" | "0p" => Ok(PilotConfig::ZeroP),
            _ => Err(Error::Config(format!("unknown pilot configuration `{s}`"))),
        }
    }
}

const PILOT_SEED: u64 = 0x7069_6c6f_7473_0001;

/// Unit-magnitude QPSK pilot for RE `(k, t)`. Depends only on the position,
/// so grids of different sizes agree on their common REs.
pub fn pilot_symbol(k: usize, t: usize) -> C64 {
    let r = splitmix64(PILOT_SEED ^ ((k as u64) << 32) ^ t as u64);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(if r & 1 == 0 { s } else { -s }, if r & 2 == 0 { s } else { -s })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PilotPattern {
    pub config: Option<PilotConfig>,
    pub n_s: usize,
    pub n_t: usize,
    pub mask: Vec<bool>,
    /// Pilot values, zero on data REs.
    pub values: Grid,
    pub symbols: Vec<usize>,
}

impl PilotPattern {
    pub fn new(config: PilotConfig, n_s: usize, n_t: usize) -> Result<Self> {
        let mut p = Self::with_symbols(config.default_symbols(), n_s, n_t)?;
        p.config = Some(config);
        Ok(p)
    }

    /// Pilots on every subcarrier of the given OFDM symbols.
    pub fn with_symbols(symbols: &[usize], n_s: usize, n_t: usize) -> Result<Self> {
        if n_s == 0 || n_t == 0 {
            return Err(Error::Config("empty grid".into()));
        }
        if let Some(&bad) = symbols.iter().find(|&&t| t >= n_t) {
            return Err(Error::Config(format!("pilot symbol index {bad} outside a grid of {n_t} symbols")));
        }
        let mut mask = vec![false; n_s * n_t];
        let mut values = Grid::zeros(n_s, n_t);
        for &t in symbols {
            for k in 0..n_s {
                mask[k * n_t + t] = true;
                values.set(k, t, pilot_symbol(k, t));
            }
        }
        let mut symbols = symbols.to_vec();
        symbols.sort_unstable();
        symbols.dedup();
        Ok(PilotPattern { config: None, n_s, n_t, mask, values, symbols })
    }

    pub fn n_pilots(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn n_data(&self) -> usize {
        self.n_s * self.n_t - self.n_pilots()
    }

    #[inline]
    pub fn is_pilot(&self, k: usize, t: usize) -> bool {
        self.mask[k * self.n_t + t]
    }

    /// Storage indices of pilot REs, frequency-first within each symbol.
    pub fn pilot_indices(&self) -> Vec<usize> {
        self.ordered(true)
    }

    /// Storage indices of data REs in fill order: frequency-first within each
    /// OFDM symbol, then time.
    pub fn data_indices(&self) -> Vec<usize> {
        self.ordered(false)
    }

    fn ordered(&self, pilots: bool) -> Vec<usize> {
        let mut out = Vec::new();
        for t in 0..self.n_t {
            for k in 0..self.n_s {
                let i = k * self.n_t + t;
                if self.mask[i] == pilots {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Data fraction rho = 1 - n_P / (n_S n_T).
    pub fn data_fraction(&self) -> f64 {
        1.0 - self.n_pilots() as f64 / (self.n_s * self.n_t) as f64
    }
}

pub fn make_pilot_pattern(config: PilotConfig, n_s: usize, n_t: usize) -> Result<PilotPattern> {
    PilotPattern::new(config, n_s, n_t)
}

/// Places labels on the data REs (fill order of [`PilotPattern::data_indices`])
/// and pilots on the pilot REs.
pub fn map_labels_to_grid(labels: &[u32], c: &Constellation, pattern: &PilotPattern) -> Result<Grid> {
    let data = pattern.data_indices();
    if labels.len() != data.len() {
        return Err(Error::Framing(format!("{} symbols for {} data REs", labels.len(), data.len())));
    }
    let mut g = pattern.values.clone();
    for (&i, &l) in data.iter().zip(labels) {
        let p = c
            .points
            .get(l as usize)
            .ok_or_else(|| Error::Framing(format!("label {l} outside a {}-point constellation", c.size())))?;
        g.data[i] = *p;
    }
    Ok(g)
}

pub fn map_bits_to_grid(bits: &[u8], c: &Constellation, pattern: &PilotPattern) -> Result<Grid> {
    let need = c.m * pattern.n_data();
    if bits.len() != need {
        return Err(Error::Framing(format!("{} bits supplied, the grid carries {need}", bits.len())));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::Framing("bits must be 0 or 1".into()));
    }
    map_labels_to_grid(&bits_to_labels(bits, c.m)?, c, pattern)
}

/// Nearest-point hard decision on every data RE.
pub fn hard_demap_grid(g: &Grid, c: &Constellation, pattern: &PilotPattern) -> Vec<u8> {
    let labels: Vec<u32> = pattern.data_indices().iter().map(|&i| c.nearest(g.data[i]) as u32).collect();
    labels_to_bits(&labels, c.m)
}
