//! Quasi-cyclic LDPC codes, systematic encoding, normalized min-sum decoding
//! and segmentation of code blocks onto a resource grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// IEEE 802.11n prototype matrices; "-" is an all-zero block, an integer s a
// circulant shifted by s.
const N648_R12: &str = "
0 - - - 0 0 - - 0 - - 0 1 0 - - - - - - - - - -
22 0 - - 17 - 0 0 12 - - - - 0 0 - - - - - - - - -
6 - 0 - 10 - - - 24 - 0 - - - 0 0 - - - - - - - -
2 - - 0 20 - - - 25 0 - - - - - 0 0 - - - - - - -
23 - - - 3 - - - 0 - 9 11 - - - - 0 0 - - - - - -
24 - 23 1 17 - 3 - 10 - - - - - - - - 0 0 - - - - -
25 - - - 8 - - - 7 18 - - 0 - - - - - 0 0 - - - -
13 24 - - 0 - 8 - 6 - - - - - - - - - - 0 0 - - -
7 20 - 16 22 10 - - 23 - - - - - - - - - - - 0 0 - -
11 - - - 19 - - - 13 - 3 17 - - - - - - - - - 0 0 -
25 - 8 - 23 18 - 14 9 - - - - - - - - - - - - - 0 0
3 - - - 16 - - 2 25 5 - - 1 - - - - - - - - - - 0";

const N1296_R12: &str = "
40 - - - 22 - 49 23 43 - - - 1 0 - - - - - - - - - -
50 1 - - 48 35 - - 13 - 30 - - 0 0 - - - - - - - - -
39 50 - - 4 - 2 - - - - 49 - - 0 0 - - - - - - - -
33 - - 38 37 - - 4 1 - - - - - - 0 0 - - - - - - -
45 - - - 0 22 - - 20 42 - - - - - - 0 0 - - - - - -
51 - - 48 35 - - - 44 - 18 - - - - - - 0 0 - - - - -
47 11 - - - 17 - - 51 - - - 0 - - - - - 0 0 - - - -
5 - 25 - 6 - 45 - 13 40 - - - - - - - - - 0 0 - - -
33 - - 34 24 - - - 23 - - 46 - - - - - - - - 0 0 - -
1 - 27 - 1 - - - 38 - 44 - - - - - - - - - - 0 0 -
- 18 - - 23 - - 8 0 35 - - - - - - - - - - - - 0 0
49 - 17 - 30 - - - 34 - - 19 1 - - - - - - - - - - 0";

const N1944_R12: &str = "
57 - - - 50 - 11 - 50 - 79 - 1 0 - - - - - - - - - -
3 - 28 - 0 - - - 55 7 - - - 0 0 - - - - - - - - -
30 - - - 24 37 - - 56 14 - - - - 0 0 - - - - - - - -
62 53 - - 53 - - 3 35 - - - - - - 0 0 - - - - - - -
40 - - 20 66 - - 22 28 - - - - - - - 0 0 - - - - - -
0 - - - 8 - 42 - 50 - - 8 - - - - - 0 0 - - - - -
69 79 79 - - - 56 - 52 - - - 0 - - - - - 0 0 - - - -
65 - - - 38 57 - - 72 - 27 - - - - - - - - 0 0 - - -
64 - - - 14 52 - - 30 - - 32 - - - - - - - - 0 0 - -
- 45 - 70 0 - - - 77 9 - - - - - - - - - - - 0 0 -
2 56 - 57 35 - - - - - 12 - - - - - - - - - - - 0 0
24 - 61 - 60 - - 27 51 - - 16 1 - - - - - - - - - - 0";

const N648_R23: &str = "
25 26 14 - 20 - 2 - 4 - - 8 - 16 - 18 1 0 - - - - - -
10 9 15 11 - 0 - 1 - - 18 - 8 - 10 - - 0 0 - - - - -
16 2 20 26 21 - 6 - 1 26 - 7 - - - - - - 0 0 - - - -
10 13 5 0 - 3 - 7 - - 26 - - 13 - 16 - - - 0 0 - - -
23 14 24 - 12 - 19 - 17 - - - 20 - 21 - 0 - - - 0 0 - -
6 22 9 20 - 25 - 17 - 8 - 14 - 18 - - - - - - - 0 0 -
14 23 21 11 20 - 24 - 18 - 19 - - - - 22 - - - - - - 0 0
17 11 11 20 - 21 - 26 - 3 - - 18 - 26 - 1 - - - - - - 0";

const N1296_R23: &str = "
39 31 22 43 - 40 4 - 11 - - 50 - - - 6 1 0 - - - - - -
25 52 41 2 6 - 14 - 34 - - - 24 - 37 - - 0 0 - - - - -
43 31 29 0 21 - 28 - - 2 - - 7 - 17 - - - 0 0 - - - -
20 33 48 - 4 13 - 26 - - 22 - - 46 42 - - - - 0 0 - - -
45 7 18 51 12 25 - - - 50 - - 5 - - - 0 - - - 0 0 - -
35 40 32 16 5 - - 18 - - 43 51 - 32 - - - - - - - 0 0 -
9 24 13 22 28 - - 37 - - 25 - - 52 - 13 - - - - - - 0 0
32 22 4 21 16 - - - 27 28 - 38 - - - 8 1 - - - - - - 0";

const N1944_R23: &str = "
61 75 4 63 56 - - - - - - 8 - 2 17 25 1 0 - - - - - -
56 74 77 20 - - - 64 24 4 67 - 7 - - - - 0 0 - - - - -
28 21 68 10 7 14 65 - - - 23 - - - 75 - - - 0 0 - - - -
48 38 43 78 76 - - - - 5 36 - 15 72 - - - - - 0 0 - - -
40 2 53 25 - 52 62 - 20 - - 44 - - - - 0 - - - 0 0 - -
69 23 64 10 22 - 21 - - - - - 68 23 29 - - - - - - 0 0 -
12 0 68 20 55 61 - 40 - - - 52 - - - 44 - - - - - - 0 0
58 8 34 64 78 - - 11 78 24 - - - - - 58 1 - - - - - - 0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CodeRate {
    #[serde(rename = "1/3")]
    R13,
    #[serde(rename = "1/2")]
    R12,
    #[serde(rename = "2/3")]
    R23,
}

impl CodeRate {
    pub fn value(self) -> f64 {
        match self {
            CodeRate::R13 => 1.0 / 3.0,
            CodeRate::R12 => 0.5,
            CodeRate::R23 => 2.0 / 3.0,
        }
    }
}

impl std::str::FromStr for CodeRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1/3" => Ok(CodeRate::R13),
            "1/2" => Ok(CodeRate::R12),
            "2/3" => Ok(CodeRate::R23),
            _ => Err(Error::Config(format!("unsupported code rate `{s}`"))),
        }
    }
}

fn parse_base(text: &str) -> Vec<Vec<i32>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|t| if t == "-" { -1 } else { t.parse().unwrap() }).collect::<Vec<i32>>())
        .inspect(|row| debug_assert_eq!(row.len(), 24, "base matrix rows have 24 block columns"))
        .collect()
}

/// Whether two edges of the base matrix, together with the other two corners
/// of their rectangle, close a length-4 cycle in the lifted graph.
fn closes_four_cycle(base: &[Vec<i32>], z: i32) -> bool {
    let rows = base.len();
    let cols = base[0].len();
    for a in 0..rows {
        for b in a + 1..rows {
            for c in 0..cols {
                if base[a][c] < 0 || base[b][c] < 0 {
                    continue;
                }
                for d in c + 1..cols {
                    if base[a][d] < 0 || base[b][d] < 0 {
                        continue;
                    }
                    if (base[a][c] - base[b][c] + base[b][d] - base[a][d]).rem_euclid(z) == 0 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Rate-1/3 prototype with 8 information and 16 dual-diagonal parity block
/// columns. Information edges follow a fixed placement; shifts are drawn from
/// a fixed-seed generator, rejecting any that would create a 4-cycle.
fn rate_third_base(z: usize) -> Vec<Vec<i32>> {
    const ROWS: usize = 16;
    const INFO: usize = 8;
    let mut base = vec![vec![-1i32; INFO + ROWS]; ROWS];
    // First parity column: shifts (1, 0, 1) at the top, middle and bottom rows,
    // then the dual diagonal.
    base[0][INFO] = 1;
    base[ROWS / 2][INFO] = 0;
    base[ROWS - 1][INFO] = 1;
    for r in 0..ROWS - 1 {
        base[r][INFO + 1 + r] = 0;
        base[r + 1][INFO + 1 + r] = 0;
    }
    let mut placement: Vec<(usize, usize)> = Vec::new();
    for r in (0..ROWS).step_by(2) {
        placement.push((r, 0));
    }
    for c in 1..INFO {
        for r in [c - 1, (c + 6) % ROWS, (3 * c + 9) % ROWS] {
            placement.push((r, c));
        }
    }
    placement.push((1, 0));
    placement.push((15, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(0x0001_3a7e ^ z as u64);
    for (r, c) in placement {
        if base[r][c] >= 0 {
            continue;
        }
        let mut tries = 0;
        loop {
            base[r][c] = rng.random_range(0..z as i32);
            tries += 1;
            if !closes_four_cycle(&base, z as i32) || tries > 1000 {
                break;
            }
        }
    }
    base
}

/// Binary LDPC code built by lifting a base matrix with circulants of size
/// `z`. The last `rows` block columns are parity in dual-diagonal form.
#[derive(Clone, Debug)]
pub struct LdpcCode {
    pub n: usize,
    pub k: usize,
    pub z: usize,
    pub rate: CodeRate,
    base: Vec<Vec<i32>>,
    /// For every check, the variable indices it touches.
    check_vars: Vec<Vec<u32>>,
    /// Edge offsets into a flat message array, per check.
    check_offsets: Vec<usize>,
    /// For every variable, the flat edge indices it participates in.
    var_edges: Vec<Vec<u32>>,
}

impl LdpcCode {
    pub fn new(n: usize, rate: CodeRate) -> Result<Self> {
        let z = match n {
            648 => 27,
            1296 => 54,
            1944 => 81,
            _ => return Err(Error::Config(format!("unsupported block length {n}; use 648, 1296 or 1944"))),
        };
        let base = match (n, rate) {
            (648, CodeRate::R12) => parse_base(N648_R12),
            (1296, CodeRate::R12) => parse_base(N1296_R12),
            (1944, CodeRate::R12) => parse_base(N1944_R12),
            (648, CodeRate::R23) => parse_base(N648_R23),
            (1296, CodeRate::R23) => parse_base(N1296_R23),
            (1944, CodeRate::R23) => parse_base(N1944_R23),
            (_, CodeRate::R13) => rate_third_base(z),
            _ => unreachable!(),
        };
        Ok(Self::from_base(base, z, rate))
    }

    fn from_base(base: Vec<Vec<i32>>, z: usize, rate: CodeRate) -> Self {
        let rows = base.len();
        let cols = base[0].len();
        let n = cols * z;
        let k = (cols - rows) * z;
        let mut check_vars = vec![Vec::new(); rows * z];
        for (r, row) in base.iter().enumerate() {
            for (c, &s) in row.iter().enumerate() {
                if s < 0 {
                    continue;
                }
                for i in 0..z {
                    check_vars[r * z + i].push((c * z + (i + s as usize) % z) as u32);
                }
            }
        }
        let mut check_offsets = Vec::with_capacity(check_vars.len() + 1);
        let mut var_edges = vec![Vec::new(); n];
        let mut e = 0;
        for vars in &check_vars {
            check_offsets.push(e);
            for &v in vars {
                var_edges[v as usize].push(e as u32);
                e += 1;
            }
        }
        check_offsets.push(e);
        LdpcCode { n, k, z, rate, base, check_vars, check_offsets, var_edges }
    }

    pub fn base_matrix(&self) -> &[Vec<i32>] {
        &self.base
    }

    pub fn n_checks(&self) -> usize {
        self.n - self.k
    }

    pub fn has_four_cycles(&self) -> bool {
        closes_four_cycle(&self.base, self.z as i32)
    }

    /// `H c^T` (mod 2) for every check.
    pub fn syndrome(&self, codeword: &[u8]) -> Vec<u8> {
        self.check_vars
            .iter()
            .map(|vars| vars.iter().fold(0u8, |acc, &v| acc ^ (codeword[v as usize] & 1)))
            .collect()
    }

    pub fn is_codeword(&self, codeword: &[u8]) -> bool {
        codeword.len() == self.n && self.syndrome(codeword).iter().all(|&s| s == 0)
    }

    /// Systematic encoding: the codeword starts with the `k` message bits.
    pub fn encode(&self, bits: &[u8]) -> Result<Vec<u8>> {
        if bits.len() != self.k {
            return Err(Error::Framing(format!("encoder expects {} bits, got {}", self.k, bits.len())));
        }
        let z = self.z;
        let rows = self.base.len();
        let kb = self.base[0].len() - rows;
        let shift = |v: &[u8], s: i32| -> Vec<u8> { (0..z).map(|i| v[(i + s as usize) % z]).collect() };
        // lambda_r = sum over information blocks of P^s u_c
        let mut lambda = vec![vec![0u8; z]; rows];
        for (r, row) in self.base.iter().enumerate() {
            for c in 0..kb {
                if row[c] >= 0 {
                    let sh = shift(&bits[c * z..(c + 1) * z], row[c]);
                    for (a, b) in lambda[r].iter_mut().zip(sh) {
                        *a ^= b & 1;
                    }
                }
            }
        }
        // Summing all rows cancels the dual diagonal; the circulants of the
        // first parity column must also collapse to a single shift s, giving
        // P^s p0 = sum_r lambda_r.
        let p0_col = kb;
        let mut counts = std::collections::BTreeMap::new();
        for row in &self.base {
            if row[p0_col] >= 0 {
                *counts.entry(row[p0_col]).or_insert(0usize) += 1;
            }
        }
        let odd: Vec<i32> = counts.into_iter().filter(|(_, n)| n % 2 == 1).map(|(s, _)| s).collect();
        let [s0] = odd[..] else {
            return Err(Error::Config("parity structure does not admit direct encoding".into()));
        };
        let mut sigma = vec![0u8; z];
        for l in &lambda {
            for (a, b) in sigma.iter_mut().zip(l) {
                *a ^= b;
            }
        }
        let mut parity = vec![vec![0u8; z]; rows];
        for j in 0..z {
            parity[0][j] = sigma[(j + z - s0 as usize) % z];
        }
        for r in 0..rows - 1 {
            // Row r involves p_r (r >= 1), p_{r+1} and possibly p0.
            let mut acc = lambda[r].clone();
            for c in kb..kb + rows {
                let s = self.base[r][c];
                let j = c - kb;
                if s < 0 || j == r + 1 {
                    continue;
                }
                let sh = shift(&parity[j], s);
                for (a, b) in acc.iter_mut().zip(sh) {
                    *a ^= b;
                }
            }
            parity[r + 1] = acc;
        }
        let mut cw = bits.to_vec();
        for p in parity {
            cw.extend(p);
        }
        debug_assert!(self.is_codeword(&cw));
        Ok(cw)
    }

    /// Normalized min-sum decoding with flooding schedule.
    ///
    /// LLRs follow the convention `LLR > 0` means bit 1 is more likely.
    /// Decoding stops as soon as the hard decisions satisfy every check and no
    /// posterior is exactly zero.
    pub fn decode(&self, llrs: &[f64], max_iters: usize, scale: f64) -> Result<DecodeResult> {
        if llrs.len() != self.n {
            return Err(Error::Framing(format!("decoder expects {} LLRs, got {}", self.n, llrs.len())));
        }
        // Internally L = log P(0)/P(1).
        let channel: Vec<f64> = llrs.iter().map(|&l| -l).collect();
        let n_edges = *self.check_offsets.last().unwrap();
        let mut c2v = vec![0.0f64; n_edges];
        let mut v2c = vec![0.0f64; n_edges];
        let mut posterior = channel.clone();
        let mut hard = vec![0u8; self.n];
        let mut iterations = 0;
        let mut converged = false;
        for it in 1..=max_iters.max(1) {
            iterations = it;
            for (v, edges) in self.var_edges.iter().enumerate() {
                for &e in edges {
                    v2c[e as usize] = posterior[v] - c2v[e as usize];
                }
            }
            for ci in 0..self.check_vars.len() {
                let (lo, hi) = (self.check_offsets[ci], self.check_offsets[ci + 1]);
                let mut min1 = f64::INFINITY;
                let mut min2 = f64::INFINITY;
                let mut argmin = lo;
                let mut sign = 1.0;
                for e in lo..hi {
                    let m = v2c[e];
                    if m < 0.0 {
                        sign = -sign;
                    }
                    let a = m.abs();
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        argmin = e;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for e in lo..hi {
                    let m = v2c[e];
                    let mag = if e == argmin { min2 } else { min1 };
                    let s = if m < 0.0 { -sign } else { sign };
                    c2v[e] = scale * s * mag;
                }
            }
            let mut any_zero = false;
            for (v, edges) in self.var_edges.iter().enumerate() {
                let mut p = channel[v];
                for &e in edges {
                    p += c2v[e as usize];
                }
                posterior[v] = p;
                hard[v] = (p < 0.0) as u8;
                any_zero |= p == 0.0;
            }
            if !any_zero && self.is_codeword(&hard) {
                converged = true;
                break;
            }
        }
        Ok(DecodeResult {
            bits: hard[..self.k].to_vec(),
            codeword: hard,
            posterior: posterior.iter().map(|&p| -p).collect(),
            iterations,
            converged,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Hard decisions on the systematic bits.
    pub bits: Vec<u8>,
    pub codeword: Vec<u8>,
    /// Posterior LLRs, `> 0` meaning bit 1.
    pub posterior: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_MIN_SUM_SCALE: f64 = 0.8;
pub const DEFAULT_DECODER_ITERATIONS: usize = 20;

pub fn ldpc_encode(bits: &[u8], code: &LdpcCode) -> Result<Vec<u8>> {
    code.encode(bits)
}

pub fn ldpc_decode(llrs: &[f64], code: &LdpcCode, max_iters: usize) -> Result<(Vec<u8>, bool)> {
    let r = code.decode(llrs, max_iters, DEFAULT_MIN_SUM_SCALE)?;
    Ok((r.bits, r.converged))
}

/// How code blocks fill a grid: `blocks` codewords back to back, followed by
/// `pad_bits` bits that map to the all-zero label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub blocks: usize,
    pub block_len: usize,
    pub pad_bits: usize,
}

pub fn segment_payload(capacity_bits: usize, code: &LdpcCode) -> Result<BlockLayout> {
    if capacity_bits < code.n {
        return Err(Error::Config(format!(
            "grid carries {capacity_bits} bits, fewer than one codeword of {}",
            code.n
        )));
    }
    let blocks = capacity_bits / code.n;
    Ok(BlockLayout { blocks, block_len: code.n, pad_bits: capacity_bits - blocks * code.n })
}

impl BlockLayout {
    pub fn info_bits(&self, code: &LdpcCode) -> usize {
        self.blocks * code.k
    }

    pub fn coded_bits(&self) -> usize {
        self.blocks * self.block_len + self.pad_bits
    }
}

/// Encodes `blocks` messages back to back and appends the zero padding.
pub fn encode_frame(info: &[u8], code: &LdpcCode, layout: &BlockLayout) -> Result<Vec<u8>> {
    if info.len() != layout.info_bits(code) {
        return Err(Error::Framing(format!("frame expects {} info bits, got {}", layout.info_bits(code), info.len())));
    }
    let mut out = Vec::with_capacity(layout.coded_bits());
    for msg in info.chunks_exact(code.k) {
        out.extend(code.encode(msg)?);
    }
    out.resize(layout.coded_bits(), 0);
    Ok(out)
}

/// Decodes each code block from the leading LLRs of a frame; padding LLRs
/// are ignored.
pub fn decode_blocks(llrs: &[f64], code: &LdpcCode, layout: &BlockLayout, max_iters: usize) -> Result<Vec<DecodeResult>> {
    if llrs.len() < layout.blocks * code.n {
        return Err(Error::Framing(format!("{} LLRs cannot hold {} blocks of {}", llrs.len(), layout.blocks, code.n)));
    }
    llrs.chunks_exact(code.n).take(layout.blocks).map(|b| code.decode(b, max_iters, DEFAULT_MIN_SUM_SCALE)).collect()
}
