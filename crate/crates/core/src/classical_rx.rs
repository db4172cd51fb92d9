//! Pilot-based receivers: LS and LMMSE channel estimation, iterative
//! data-aided estimation with decoder feedback (IEDD), one-tap MMSE
//! equalization and exact LLR demapping.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::channel::{time_correlation, SampledProfile};
use crate::error::{Error, Result};
use crate::fec::{decode_blocks, BlockLayout, LdpcCode};
use crate::ofdm_grid::{Constellation, Grid, PilotPattern};

/// Diagonal loading applied when an LMMSE system is numerically singular.
pub const DIAGONAL_LOADING: f64 = 1e-9;

/// Prior LLR magnitude used for bits that are known to be zero (padding).
const KNOWN_BIT_LLR: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReceiverKind {
    Ls,
    Lmmse,
    Iedd,
    PerfectCsi,
    Neural,
}

impl ReceiverKind {
    pub fn name(self) -> &'static str {
        match self {
            ReceiverKind::Ls => "ls",
            ReceiverKind::Lmmse => "lmmse",
            ReceiverKind::Iedd => "iedd",
            ReceiverKind::PerfectCsi => "perfect-csi",
            ReceiverKind::Neural => "neural",
        }
    }
}

impl std::str::FromStr for ReceiverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ls" => Ok(ReceiverKind::Ls),
            "lmmse" => Ok(ReceiverKind::Lmmse),
            "iedd" => Ok(ReceiverKind::Iedd),
            "perfect-csi" => Ok(ReceiverKind::PerfectCsi),
            "neural" => Ok(ReceiverKind::Neural),
            _ => Err(Error::Config(format!("unknown receiver `{s}`"))),
        }
    }
}

/// Channel estimate on the full grid with its per-RE error variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEstimate {
    pub h: Grid,
    /// Error variance per RE, in grid storage order.
    pub err_var: Vec<f64>,
}

impl ChannelEstimate {
    /// Genie estimate: exact CSI with zero error.
    pub fn perfect(h: Grid) -> Self {
        let n = h.data.len();
        ChannelEstimate { h, err_var: vec![0.0; n] }
    }

    pub fn mse(&self, truth: &Grid) -> f64 {
        self.h.data.iter().zip(&truth.data).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / truth.data.len() as f64
    }

    /// Mean predicted error variance, i.e. `trace(R~) / n`.
    pub fn mean_err_var(&self) -> f64 {
        self.err_var.iter().sum::<f64>() / self.err_var.len() as f64
    }
}

/// Separable channel covariance `R = R_F (x) R_T` over the grid, stored as
/// its two factors together with low-rank square roots of each.
#[derive(Clone, Debug)]
pub struct CovarianceModel {
    pub n_s: usize,
    pub n_t: usize,
    pub r_f: DMatrix<C64>,
    pub r_t: DMatrix<f64>,
    a_f: DMatrix<C64>,
    a_t: DMatrix<f64>,
}

fn check_psd_unit_diag<T: nalgebra::ComplexField<RealField = f64>>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Config(format!("{what} is not square")));
    }
    for i in 0..m.nrows() {
        if (m[(i, i)].clone().real() - 1.0).abs() > 1e-9 || m[(i, i)].clone().imaginary().abs() > 1e-9 {
            return Err(Error::Config(format!("{what} must have a unit diagonal")));
        }
        for j in 0..i {
            if (m[(i, j)].clone() - m[(j, i)].clone().conjugate()).modulus() > 1e-9 {
                return Err(Error::Config(format!("{what} is not Hermitian")));
            }
        }
    }
    Ok(())
}

/// Square-root factor `A` with `M = A A^H`, keeping eigenvalues above a
/// relative threshold.
fn psd_factor<T: nalgebra::ComplexField<RealField = f64>>(m: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    let eig = SymmetricEigen::new(m.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if eig.eigenvalues.iter().any(|&e| e < -1e-9 * top.max(1.0)) {
        return Err(Error::Config(format!("{what} is not positive semidefinite")));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i] > 1e-12 * top).collect();
    let mut a = DMatrix::<T>::zeros(m.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        for r in 0..m.nrows() {
            a[(r, c)] = eig.eigenvectors[(r, i)].clone() * T::from_real(s);
        }
    }
    Ok(a)
}

impl CovarianceModel {
    pub fn from_parts(r_f: DMatrix<C64>, r_t: DMatrix<f64>) -> Result<Self> {
        check_psd_unit_diag(&r_f, "frequency correlation")?;
        check_psd_unit_diag(&r_t, "time correlation")?;
        let a_f = psd_factor(&r_f, "frequency correlation")?;
        let a_t = psd_factor(&r_t, "time correlation")?;
        Ok(CovarianceModel { n_s: r_f.nrows(), n_t: r_t.nrows(), r_f, r_t, a_f, a_t })
    }

    /// `R_F` from the sampled power-delay profile and
    /// `R_T[t, t'] = J0(2 pi f_d (t - t') T_sym)`.
    pub fn from_profile(
        profile: &SampledProfile,
        n_s: usize,
        n_t: usize,
        doppler: f64,
        symbol_duration: f64,
    ) -> Result<Self> {
        let r_f = DMatrix::from_fn(n_s, n_s, |k, kp| profile.frequency_correlation(n_s, k as isize - kp as isize));
        let r_t = DMatrix::from_fn(n_t, n_t, |t, tp| {
            time_correlation(doppler, (t as f64 - tp as f64).abs() * symbol_duration)
        });
        Self::from_parts(r_f, r_t)
    }

    /// Uncorrelated unit-variance channel, `R = I`.
    pub fn white(n_s: usize, n_t: usize) -> Self {
        Self::from_parts(DMatrix::identity(n_s, n_s), DMatrix::identity(n_t, n_t)).expect("identity is a valid covariance")
    }

    pub fn n(&self) -> usize {
        self.n_s * self.n_t
    }

    /// `R[i, j]` for grid storage indices `i = k n_t + t`.
    #[inline]
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        let (k, t) = (i / self.n_t, i % self.n_t);
        let (kp, tp) = (j / self.n_t, j % self.n_t);
        self.r_f[(k, kp)] * self.r_t[(t, tp)]
    }

    pub fn rank(&self) -> usize {
        self.a_f.ncols() * self.a_t.ncols()
    }

    /// `A = A_F (x) A_T` with `R = A A^H`, one row per RE.
    pub fn low_rank_factor(&self) -> DMatrix<C64> {
        let (rf, rt) = (self.a_f.ncols(), self.a_t.ncols());
        DMatrix::from_fn(self.n(), rf * rt, |i, c| {
            let (k, t) = (i / self.n_t, i % self.n_t);
            self.a_f[(k, c / rt)] * self.a_t[(t, c % rt)]
        })
    }

    fn check_geometry(&self, n_s: usize, n_t: usize) -> Result<()> {
        if self.n_s != n_s || self.n_t != n_t {
            return Err(Error::Config(format!(
                "covariance model is {}x{}, grid is {n_s}x{n_t}",
                self.n_s, self.n_t
            )));
        }
        Ok(())
    }
}

fn require_pilots(pattern: &PilotPattern) -> Result<()> {
    if pattern.n_pilots() == 0 {
        return Err(Error::EstimatorInapplicable("pilot-based estimation needs at least one pilot".into()));
    }
    Ok(())
}

/// Least-squares estimate: `Y / P` on pilots, then per subcarrier linear
/// interpolation in time between pilot symbols and constant extension
/// beyond the outermost ones. Error variance is `N0` on pilots and grows by
/// `N0` per symbol of distance to the nearest pilot symbol.
pub fn ls_estimate(y: &Grid, pattern: &PilotPattern, n0: f64) -> Result<ChannelEstimate> {
    require_pilots(pattern)?;
    check_dims(y, pattern)?;
    let (n_s, n_t) = (y.n_s, y.n_t);
    let mut h = Grid::zeros(n_s, n_t);
    let mut err_var = vec![0.0; n_s * n_t];
    for k in 0..n_s {
        let pilot_t: Vec<usize> = (0..n_t).filter(|&t| pattern.is_pilot(k, t)).collect();
        if pilot_t.is_empty() {
            return Err(Error::EstimatorInapplicable(format!("subcarrier {k} carries no pilot")));
        }
        let at = |t: usize| y.get(k, t) / pattern.values.get(k, t);
        for t in 0..n_t {
            let right = pilot_t.iter().position(|&p| p >= t);
            let (v, dist) = match right {
                Some(0) => (at(pilot_t[0]), pilot_t[0] - t),
                Some(j) => {
                    let (a, b) = (pilot_t[j - 1], pilot_t[j]);
                    let w = (t - a) as f64 / (b - a) as f64;
                    (at(a) * (1.0 - w) + at(b) * w, (t - a).min(b - t))
                }
                None => {
                    let last = *pilot_t.last().unwrap();
                    (at(last), t - last)
                }
            };
            h.set(k, t, v);
            err_var[h.idx(k, t)] = n0 * (1.0 + dist as f64);
        }
    }
    Ok(ChannelEstimate { h, err_var })
}

fn check_dims(y: &Grid, pattern: &PilotPattern) -> Result<()> {
    if y.n_s != pattern.n_s || y.n_t != pattern.n_t {
        return Err(Error::Framing(format!(
            "received grid {}x{} does not match pilot pattern {}x{}",
            y.n_s, y.n_t, pattern.n_s, pattern.n_t
        )));
    }
    Ok(())
}

/// Hermitian positive-definite solve with a diagonal-loading fallback.
fn hpd_cholesky(mut m: DMatrix<C64>) -> Result<Cholesky<C64, nalgebra::Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    log::warn!("LMMSE system is singular; applying diagonal loading {DIAGONAL_LOADING:e}");
    for i in 0..m.nrows() {
        m[(i, i)] += C64::new(DIAGONAL_LOADING, 0.0);
    }
    Cholesky::new(m).ok_or_else(|| Error::Numeric("LMMSE system is not positive definite after loading".into()))
}

/// Pilot-only LMMSE estimator for a fixed pattern, covariance and noise
/// level. Construction solves the pilot-indexed system once; each estimate
/// is then one matrix-vector product.
#[derive(Clone, Debug)]
pub struct LmmseEstimator {
    n_s: usize,
    n_t: usize,
    pilots: Vec<usize>,
    /// `W = R_{:,P} D^H (D R_PP D^H + s2 I)^-1`, applied to `y_P`.
    w: DMatrix<C64>,
    err_var: Vec<f64>,
}

impl LmmseEstimator {
    pub fn new(pattern: &PilotPattern, cov: &CovarianceModel, sigma2: f64) -> Result<Self> {
        require_pilots(pattern)?;
        cov.check_geometry(pattern.n_s, pattern.n_t)?;
        if !(sigma2 >= 0.0) {
            return Err(Error::Config(format!("noise variance {sigma2} must be nonnegative")));
        }
        let pilots = pattern.pilot_indices();
        let n = cov.n();
        let np = pilots.len();
        let p: Vec<C64> = pilots.iter().map(|&i| pattern.values.data[i]).collect();
        let m = DMatrix::from_fn(np, np, |a, b| {
            let v = p[a] * cov.entry(pilots[a], pilots[b]) * p[b].conj();
            if a == b {
                v + sigma2
            } else {
                v
            }
        });
        // Q = D R_{P,:}; solving M X = Q gives W = X^H since M is Hermitian.
        let q = DMatrix::from_fn(np, n, |a, j| p[a] * cov.entry(pilots[a], j));
        let x = hpd_cholesky(m)?.solve(&q);
        let err_var = (0..n)
            .map(|j| {
                let explained: C64 = (0..np).map(|a| x[(a, j)].conj() * q[(a, j)]).sum();
                (cov.entry(j, j).re - explained.re).max(0.0)
            })
            .collect();
        Ok(LmmseEstimator { n_s: pattern.n_s, n_t: pattern.n_t, pilots, w: x.adjoint(), err_var })
    }

    pub fn estimate(&self, y: &Grid) -> Result<ChannelEstimate> {
        if y.n_s != self.n_s || y.n_t != self.n_t {
            return Err(Error::Framing(format!("grid {}x{} does not match estimator {}x{}", y.n_s, y.n_t, self.n_s, self.n_t)));
        }
        let yp = DVector::from_iterator(self.pilots.len(), self.pilots.iter().map(|&i| y.data[i]));
        let h = &self.w * yp;
        Ok(ChannelEstimate { h: Grid::from_vec(self.n_s, self.n_t, h.iter().copied().collect())?, err_var: self.err_var.clone() })
    }

    pub fn err_var(&self) -> &[f64] {
        &self.err_var
    }
}

pub fn lmmse_estimate(y: &Grid, pattern: &PilotPattern, cov: &CovarianceModel, sigma2: f64) -> Result<ChannelEstimate> {
    LmmseEstimator::new(pattern, cov, sigma2)?.estimate(y)
}

/// Data-aided LMMSE estimate from symbol means `x_bar` and variances `var`
/// on every RE (pilots: the pilot value with zero variance):
/// `h' = R D^H (D R D^H + diag(s2 + var))^-1 y` with `D = diag(x_bar)`,
/// evaluated through the low-rank factor `R = A A^H` and the Woodbury
/// identity, which gives `h' = A (I + G)^-1 B^H S^-1 y` and
/// `R~' = A (I + G)^-1 A^H` for `B = D A`, `G = B^H S^-1 B`.
pub fn data_aided_estimate(
    y: &Grid,
    x_bar: &[C64],
    var: &[f64],
    cov: &CovarianceModel,
    sigma2: f64,
) -> Result<ChannelEstimate> {
    cov.check_geometry(y.n_s, y.n_t)?;
    let n = cov.n();
    if x_bar.len() != n || var.len() != n {
        return Err(Error::Framing(format!("symbol statistics must cover all {n} REs")));
    }
    let a = cov.low_rank_factor();
    let r = a.ncols();
    let inv_s: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = sigma2 + v.max(0.0);
            if s > 0.0 {
                1.0 / s
            } else {
                1.0 / DIAGONAL_LOADING
            }
        })
        .collect();
    // I + G and u = B^H S^-1 y, accumulated row by row of B.
    let mut g = DMatrix::<C64>::identity(r, r);
    let mut u = DVector::<C64>::zeros(r);
    for i in 0..n {
        let xb = x_bar[i];
        if xb.norm_sqr() == 0.0 {
            continue;
        }
        let w = xb.norm_sqr() * inv_s[i];
        let row = a.row(i);
        let yi = xb.conj() * y.data[i] * inv_s[i];
        for c in 0..r {
            let ac = row[c].conj();
            u[c] += ac * yi;
            for d in 0..r {
                g[(c, d)] += ac * row[d] * w;
            }
        }
    }
    let chol = hpd_cholesky(g)?;
    let z = chol.solve(&u);
    let h = &a * &z;
    let a_h = a.adjoint();
    let sol = chol.solve(&a_h);
    let err_var = (0..n)
        .map(|i| {
            let v: C64 = (0..r).map(|c| a[(i, c)] * sol[(c, i)]).sum();
            v.re.max(0.0)
        })
        .collect();
    Ok(ChannelEstimate { h: Grid::from_vec(y.n_s, y.n_t, h.iter().copied().collect())?, err_var })
}

/// Soft output of the one-tap equalizer and demapper on the data REs, in
/// mapper fill order.
#[derive(Clone, Debug, PartialEq)]
pub struct Demapped {
    /// `m` LLRs per data RE, `> 0` meaning bit 1.
    pub llrs: Vec<f64>,
    /// MMSE symbol estimates.
    pub x_hat: Vec<C64>,
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + vals.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Exact bit LLRs of one RE. `prior` holds a-priori bit LLRs; the output for
/// bit `i` excludes its own prior (extrinsic demapping).
fn demap_re(y: C64, h: C64, s2: f64, c: &Constellation, prior: Option<&[f64]>, out: &mut [f64]) {
    if !(s2 > 0.0) {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let metric: Vec<f64> = c.points.iter().map(|&p| -(y - h * p).norm_sqr() / s2).collect();
    let prior_term: Vec<f64> = match prior {
        Some(pr) => (0..c.size()).map(|l| (0..c.m).map(|b| c.bit(l, b) as f64 * pr[b]).sum()).collect(),
        None => vec![0.0; c.size()],
    };
    for (i, o) in out.iter_mut().enumerate() {
        let own = |l: usize| prior.map_or(0.0, |pr| c.bit(l, i) as f64 * pr[i]);
        let term = |l: usize| metric[l] + prior_term[l] - own(l);
        let num = log_sum_exp((0..c.size()).filter(|&l| c.bit(l, i) == 1).map(term));
        let den = log_sum_exp((0..c.size()).filter(|&l| c.bit(l, i) == 0).map(term));
        *o = num - den;
    }
}

fn demap_all(
    y: &Grid,
    est: &ChannelEstimate,
    n0_eff: f64,
    c: &Constellation,
    pattern: &PilotPattern,
    priors: Option<&[f64]>,
) -> Result<Demapped> {
    check_dims(y, pattern)?;
    if est.h.n_s != y.n_s || est.h.n_t != y.n_t {
        return Err(Error::Framing("channel estimate does not cover the grid".into()));
    }
    let data = pattern.data_indices();
    let m = c.m;
    let mut llrs = vec![0.0; data.len() * m];
    let mut x_hat = Vec::with_capacity(data.len());
    for (j, &i) in data.iter().enumerate() {
        let h = est.h.data[i];
        let yv = y.data[i];
        let den = h.norm_sqr() + n0_eff;
        x_hat.push(if den > 0.0 { h.conj() * yv / den } else { C64::new(0.0, 0.0) });
        let s2 = est.err_var[i] + n0_eff;
        demap_re(yv, h, s2, c, priors.map(|p| &p[j * m..(j + 1) * m]), &mut llrs[j * m..(j + 1) * m]);
    }
    Ok(Demapped { llrs, x_hat })
}

/// One-tap MMSE equalization and exact LLR demapping with effective noise
/// `R~_kk + N0 + gamma_ici`.
pub fn mmse_equalize_demap(
    y: &Grid,
    est: &ChannelEstimate,
    n0: f64,
    gamma_ici: f64,
    c: &Constellation,
    pattern: &PilotPattern,
) -> Result<Demapped> {
    demap_all(y, est, n0 + gamma_ici, c, pattern, None)
}

/// Demapping with a-priori bit LLRs (`m` per data RE); returns extrinsic LLRs.
pub fn demap_with_priors(
    y: &Grid,
    est: &ChannelEstimate,
    n0_eff: f64,
    c: &Constellation,
    pattern: &PilotPattern,
    priors: &[f64],
) -> Result<Demapped> {
    if priors.len() != pattern.n_data() * c.m {
        return Err(Error::Framing(format!("{} prior LLRs for {} data bits", priors.len(), pattern.n_data() * c.m)));
    }
    demap_all(y, est, n0_eff, c, pattern, Some(priors))
}

/// Symbol mean and variance under `P(c) ~ exp(sum_l b_l(c) L_l)`.
pub fn symbol_statistics(c: &Constellation, bit_llrs: &[f64]) -> (C64, f64) {
    let logits: Vec<f64> = (0..c.size()).map(|l| (0..c.m).map(|b| c.bit(l, b) as f64 * bit_llrs[b]).sum()).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mean: C64 = c.points.iter().zip(&w).map(|(p, wi)| p * (wi / z)).sum();
    let e2: f64 = c.points.iter().zip(&w).map(|(p, wi)| p.norm_sqr() * wi / z).sum();
    (mean, (e2 - mean.norm_sqr()).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IeddConfig {
    pub outer_iterations: usize,
    pub decoder_iterations: usize,
}

impl Default for IeddConfig {
    fn default() -> Self {
        IeddConfig { outer_iterations: 3, decoder_iterations: crate::fec::DEFAULT_DECODER_ITERATIONS }
    }
}

#[derive(Clone, Debug)]
pub struct IeddOutput {
    /// Demapper LLRs fed to the decoder in the last iteration.
    pub llrs: Vec<f64>,
    /// Decoded information bits, block after block.
    pub info_bits: Vec<u8>,
    pub converged: Vec<bool>,
    pub iterations: usize,
    pub estimate: ChannelEstimate,
}

/// Iterative estimation, demapping and decoding. The first pass is the
/// pilot-only LMMSE receiver; later passes turn the decoder's extrinsic
/// LLRs (posterior minus demapper input) into symbol priors, re-estimate the
/// channel with every RE as a soft pilot, and demap extrinsically against
/// the same priors. Stops when all blocks decode or after the configured
/// number of passes.
#[allow(clippy::too_many_arguments)]
pub fn iedd_receive(
    y: &Grid,
    pattern: &PilotPattern,
    cov: &CovarianceModel,
    pilot_lmmse: &LmmseEstimator,
    n0_eff: f64,
    c: &Constellation,
    code: &LdpcCode,
    layout: &BlockLayout,
    cfg: &IeddConfig,
) -> Result<IeddOutput> {
    let n_bits = pattern.n_data() * c.m;
    if layout.coded_bits() != n_bits {
        return Err(Error::Framing(format!("block layout covers {} bits, the grid {n_bits}", layout.coded_bits())));
    }
    let data = pattern.data_indices();
    let mut estimate = pilot_lmmse.estimate(y)?;
    let mut llrs = mmse_equalize_demap(y, &estimate, n0_eff, 0.0, c, pattern)?.llrs;
    let mut iterations = 1;
    loop {
        let decoded = decode_blocks(&llrs, code, layout, cfg.decoder_iterations)?;
        let converged: Vec<bool> = decoded.iter().map(|d| d.converged).collect();
        if iterations >= cfg.outer_iterations.max(1) || converged.iter().all(|&v| v) {
            return Ok(IeddOutput {
                llrs,
                info_bits: decoded.iter().flat_map(|d| d.bits.iter().copied()).collect(),
                converged,
                iterations,
                estimate,
            });
        }
        let mut prior = vec![-KNOWN_BIT_LLR; n_bits];
        for (b, d) in decoded.iter().enumerate() {
            for j in 0..code.n {
                let idx = b * code.n + j;
                prior[idx] = d.posterior[j] - llrs[idx];
            }
        }
        let mut x_bar = pattern.values.data.clone();
        let mut var = vec![0.0; x_bar.len()];
        for (j, &i) in data.iter().enumerate() {
            let (mean, v) = symbol_statistics(c, &prior[j * c.m..(j + 1) * c.m]);
            x_bar[i] = mean;
            var[i] = v;
        }
        estimate = data_aided_estimate(y, &x_bar, &var, cov, n0_eff)?;
        llrs = demap_with_priors(y, &estimate, n0_eff, c, pattern, &prior)?.llrs;
        iterations += 1;
    }
}
