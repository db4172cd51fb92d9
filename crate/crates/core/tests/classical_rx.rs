use deepofdm::channel::{complex_gaussian, doppler, TdlProfile};
use deepofdm::classical_rx::*;
use deepofdm::fec::{encode_frame, segment_payload, decode_blocks, CodeRate, LdpcCode};
use deepofdm::ofdm_grid::*;
use deepofdm::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DF: f64 = 15e3;

fn covariance(n_s: usize, n_t: usize, speed: f64) -> CovarianceModel {
    let ts = 1.0 / (n_s as f64 * DF);
    let q = TdlProfile::tdl_a(100e-9).quantize(ts);
    CovarianceModel::from_profile(&q, n_s, n_t, doppler(speed, 2e9), (n_s + 6) as f64 * ts).unwrap()
}

/// Gaussian channel with covariance `A A^H`.
fn draw_channel(cov: &CovarianceModel, rng: &mut ChaCha8Rng) -> Grid {
    let a = cov.low_rank_factor();
    let z: Vec<C64> = (0..a.ncols()).map(|_| complex_gaussian(rng, 1.0)).collect();
    let data = (0..cov.n()).map(|i| (0..a.ncols()).map(|c| a[(i, c)] * z[c]).sum()).collect();
    Grid::from_vec(cov.n_s, cov.n_t, data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..1u32 << m)).collect()
}

fn receive(h: &Grid, x: &Grid, n0: f64, rng: &mut ChaCha8Rng) -> Grid {
    let data = h.data.iter().zip(&x.data).map(|(a, b)| a * b + complex_gaussian(rng, n0)).collect();
    Grid::from_vec(h.n_s, h.n_t, data).unwrap()
}

#[test]
fn ls_recovers_a_flat_noiseless_channel() {
    let p = make_pilot_pattern(PilotConfig::TwoP, 16, 14).unwrap();
    let h0 = C64::new(0.3, -0.8);
    let y = Grid::from_vec(16, 14, p.values.data.iter().map(|v| v * h0).collect()).unwrap();
    let est = ls_estimate(&y, &p, 0.0).unwrap();
    assert!(est.h.data.iter().all(|v| (v - h0).norm() < 1e-12));
    let p1 = make_pilot_pattern(PilotConfig::OneP, 16, 14).unwrap();
    let y = Grid::from_vec(16, 14, p1.values.data.iter().map(|v| v * h0).collect()).unwrap();
    assert!(ls_estimate(&y, &p1, 0.0).unwrap().h.data.iter().all(|v| (v - h0).norm() < 1e-12));
}

#[test]
fn ls_interpolates_a_linear_channel_exactly() {
    let p = make_pilot_pattern(PilotConfig::TwoP, 8, 14).unwrap();
    let h = |k: usize, t: usize| C64::new(0.1 * k as f64 + 0.05 * t as f64, 1.0 - 0.07 * t as f64);
    let mut y = Grid::zeros(8, 14);
    for k in 0..8 {
        for t in 0..14 {
            y.set(k, t, h(k, t) * p.values.get(k, t));
        }
    }
    let est = ls_estimate(&y, &p, 0.1).unwrap();
    for k in 0..8 {
        for t in 2..=11 {
            assert!((est.h.get(k, t) - h(k, t)).norm() < 1e-12);
        }
        // Constant extension outside the pilot span.
        assert!((est.h.get(k, 0) - h(k, 2)).norm() < 1e-12);
        assert!((est.h.get(k, 13) - h(k, 11)).norm() < 1e-12);
    }
    assert!((est.err_var[est.h.idx(0, 2)] - 0.1).abs() < 1e-12);
    assert!((est.err_var[est.h.idx(0, 0)] - 0.3).abs() < 1e-12);
    assert!((est.err_var[est.h.idx(0, 6)] - 0.5).abs() < 1e-12);
}

#[test]
fn ls_pilot_error_matches_noise_level() {
    let p = make_pilot_pattern(PilotConfig::OneP, 4, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n0 = 0.2;
    let h = Grid::from_vec(4, 14, vec![C64::new(1.0, 0.0); 56]).unwrap();
    let mut acc = 0.0;
    let trials = 10_000;
    for _ in 0..trials {
        let y = receive(&h, &p.values, n0, &mut rng);
        let est = ls_estimate(&y, &p, n0).unwrap();
        acc += (0..4).map(|k| (est.h.get(k, 2) - C64::new(1.0, 0.0)).norm_sqr()).sum::<f64>() / 4.0;
    }
    assert!((acc / trials as f64 / n0 - 1.0).abs() < 0.05);
}

#[test]
fn estimators_reject_pilotless_frames() {
    let p = make_pilot_pattern(PilotConfig::ZeroP, 8, 14).unwrap();
    let y = Grid::zeros(8, 14);
    assert!(matches!(ls_estimate(&y, &p, 0.1), Err(deepofdm::Error::EstimatorInapplicable(_))));
    let cov = CovarianceModel::white(8, 14);
    assert!(matches!(lmmse_estimate(&y, &p, &cov, 0.1), Err(deepofdm::Error::EstimatorInapplicable(_))));
}

#[test]
fn white_channel_lmmse_is_scaled_ls() {
    let p = make_pilot_pattern(PilotConfig::TwoP, 6, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = Grid::from_vec(6, 14, (0..84).map(|_| complex_gaussian(&mut rng, 1.0)).collect()).unwrap();
    let s2 = 0.25;
    let est = lmmse_estimate(&y, &p, &CovarianceModel::white(6, 14), s2).unwrap();
    for k in 0..6 {
        for t in 0..14 {
            let expect = if p.is_pilot(k, t) { y.get(k, t) / p.values.get(k, t) / (1.0 + s2) } else { C64::new(0.0, 0.0) };
            assert!((est.h.get(k, t) - expect).norm() < 1e-12);
            let v = if p.is_pilot(k, t) { s2 / (1.0 + s2) } else { 1.0 };
            assert!((est.err_var[est.h.idx(k, t)] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn lmmse_approaches_ls_with_pilots_everywhere() {
    let all: Vec<usize> = (0..14).collect();
    let p = PilotPattern::with_symbols(&all, 6, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = Grid::from_vec(6, 14, (0..84).map(|_| complex_gaussian(&mut rng, 1.0)).collect()).unwrap();
    let ls = ls_estimate(&y, &p, 0.0).unwrap();
    let est = lmmse_estimate(&y, &p, &CovarianceModel::white(6, 14), 1e-10).unwrap();
    for (a, b) in est.h.data.iter().zip(&ls.h.data) {
        assert!((a - b).norm() < 1e-8);
    }
}

#[test]
fn covariance_factor_reproduces_the_model() {
    let cov = covariance(32, 14, 40.0);
    let a = cov.low_rank_factor();
    assert!(cov.rank() < 32 * 14);
    for &(i, j) in &[(0, 0), (5, 77), (100, 3), (447, 200), (13, 13)] {
        let v: C64 = (0..a.ncols()).map(|c| a[(i, c)] * a[(j, c)].conj()).sum();
        assert!((v - cov.entry(i, j)).norm() < 1e-9, "({i},{j})");
    }
    for i in 0..cov.n() {
        assert!((cov.entry(i, i).re - 1.0).abs() < 1e-12);
    }
}

#[test]
fn lmmse_error_matches_predicted_trace_and_beats_ls() {
    let (n_s, n_t) = (32, 14);
    let p = make_pilot_pattern(PilotConfig::TwoP, n_s, n_t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(speed, snr_db) in &[(10.0, 0.0), (100.0, 20.0)] {
        let cov = covariance(n_s, n_t, speed);
        let n0 = 10f64.powf(-snr_db / 10.0);
        let est = LmmseEstimator::new(&p, &cov, n0).unwrap();
        let (mut lm, mut ls) = (0.0, 0.0);
        let trials = 2000;
        for _ in 0..trials {
            let h = draw_channel(&cov, &mut rng);
            let y = receive(&h, &p.values, n0, &mut rng);
            lm += est.estimate(&y).unwrap().mse(&h);
            ls += ls_estimate(&y, &p, n0).unwrap().mse(&h);
        }
        let predicted = est.err_var().iter().sum::<f64>() / (n_s * n_t) as f64;
        lm /= trials as f64;
        ls /= trials as f64;
        assert!(lm <= ls, "speed {speed} snr {snr_db}: {lm} > {ls}");
        assert!((lm / predicted - 1.0).abs() < 0.05, "speed {speed} snr {snr_db}: {lm} vs {predicted}");
    }
}

#[test]
fn data_aided_estimate_without_priors_equals_pilot_lmmse() {
    let (n_s, n_t) = (32, 14);
    let cov = covariance(n_s, n_t, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for cfg in [PilotConfig::TwoP, PilotConfig::OneP] {
        let p = make_pilot_pattern(cfg, n_s, n_t).unwrap();
        let h = draw_channel(&cov, &mut rng);
        let c = Constellation::qam(4).unwrap();
        let x = map_labels_to_grid(&random_labels(&mut rng, p.n_data(), 4), &c, &p).unwrap();
        let y = receive(&h, &x, 0.05, &mut rng);
        let dense = lmmse_estimate(&y, &p, &cov, 0.05).unwrap();
        let var: Vec<f64> = p.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        let low = data_aided_estimate(&y, &p.values.data, &var, &cov, 0.05).unwrap();
        for i in 0..n_s * n_t {
            assert!((dense.h.data[i] - low.h.data[i]).norm() < 1e-8);
            assert!((dense.err_var[i] - low.err_var[i]).abs() < 1e-8);
        }
    }
}

#[test]
fn genie_priors_do_not_hurt_the_estimate() {
    let (n_s, n_t) = (32, 14);
    let cov = covariance(n_s, n_t, 100.0);
    let p = make_pilot_pattern(PilotConfig::OneP, n_s, n_t).unwrap();
    let c = Constellation::qam(4).unwrap();
    let n0 = 0.1;
    let lmmse = LmmseEstimator::new(&p, &cov, n0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut pilot_only, mut genie) = (0.0, 0.0);
    for _ in 0..1000 {
        let h = draw_channel(&cov, &mut rng);
        let x = map_labels_to_grid(&random_labels(&mut rng, p.n_data(), 4), &c, &p).unwrap();
        let y = receive(&h, &x, n0, &mut rng);
        pilot_only += lmmse.estimate(&y).unwrap().mse(&h);
        genie += data_aided_estimate(&y, &x.data, &vec![0.0; n_s * n_t], &cov, n0).unwrap().mse(&h);
    }
    assert!(genie <= pilot_only, "{genie} vs {pilot_only}");
}

#[test]
fn uniform_priors_give_zero_mean_symbols() {
    let c = Constellation::qam(6).unwrap();
    let (mean, var) = symbol_statistics(&c, &[0.0; 6]);
    assert!(mean.norm() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
    let (mean, var) = symbol_statistics(&c, &[-50.0; 6]);
    assert!((mean - c.points[0]).norm() < 1e-12);
    assert!(var < 1e-12);
}

#[test]
fn two_point_llr_example() {
    let c = Constellation::from_points(&[C64::new(-1.0, 0.0), C64::new(1.0, 0.0)], false).unwrap();
    let p = make_pilot_pattern(PilotConfig::ZeroP, 1, 1).unwrap();
    let y = Grid::from_vec(1, 1, vec![C64::new(1.0, 0.0)]).unwrap();
    let est = ChannelEstimate::perfect(Grid::from_vec(1, 1, vec![C64::new(1.0, 0.0)]).unwrap());
    let out = mmse_equalize_demap(&y, &est, 1.0, 0.0, &c, &p).unwrap();
    assert!((out.llrs[0] - 4.0).abs() < 1e-12);
    let out = mmse_equalize_demap(&y, &est, 1e-12, 0.0, &c, &p).unwrap();
    assert!((out.x_hat[0] - C64::new(1.0, 0.0)).norm() < 1e-9);
    let zero = ChannelEstimate::perfect(Grid::zeros(1, 1));
    assert_eq!(mmse_equalize_demap(&y, &zero, 0.0, 0.0, &c, &p).unwrap().llrs[0], 0.0);
}

#[test]
fn llr_signs_agree_with_nearest_point_detection() {
    let c = Constellation::qam(6).unwrap();
    let p = make_pilot_pattern(PilotConfig::ZeroP, 64, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Bitwise decision thresholds of exact LLRs sit within exp(-19) of the
    // nearest-point boundaries at this noise level.
    let n0 = 0.01;
    let x = map_labels_to_grid(&random_labels(&mut rng, p.n_data(), 6), &c, &p).unwrap();
    let ones = Grid::from_vec(64, 14, vec![C64::new(1.0, 0.0); 64 * 14]).unwrap();
    let y = receive(&ones, &x, n0, &mut rng);
    let out = mmse_equalize_demap(&y, &ChannelEstimate::perfect(ones), n0, 0.0, &c, &p).unwrap();
    let hard: Vec<u8> = out.llrs.iter().map(|&l| (l > 0.0) as u8).collect();
    assert_eq!(hard, hard_demap_grid(&y, &c, &p));
}

#[test]
fn noiseless_demapped_codeword_decodes() {
    let c = Constellation::qam(4).unwrap();
    let p = make_pilot_pattern(PilotConfig::TwoP, 64, 14).unwrap();
    let code = LdpcCode::new(648, CodeRate::R12).unwrap();
    let layout = segment_payload(p.n_data() * 4, &code).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let info: Vec<u8> = (0..layout.info_bits(&code)).map(|_| rng.random_range(0..2u8)).collect();
    let bits = encode_frame(&info, &code, &layout).unwrap();
    let x = map_bits_to_grid(&bits, &c, &p).unwrap();
    let ones = Grid::from_vec(64, 14, vec![C64::new(1.0, 0.0); 64 * 14]).unwrap();
    let out = mmse_equalize_demap(&x, &ChannelEstimate::perfect(ones), 0.01, 0.0, &c, &p).unwrap();
    let dec = decode_blocks(&out.llrs, &code, &layout, 20).unwrap();
    assert!(dec.iter().all(|d| d.converged));
    assert_eq!(dec.iter().flat_map(|d| d.bits.clone()).collect::<Vec<_>>(), info);
}

#[test]
fn single_pass_iedd_is_lmmse_plus_decoding() {
    let (n_s, n_t) = (32, 14);
    let cov = covariance(n_s, n_t, 40.0);
    let p = make_pilot_pattern(PilotConfig::OneP, n_s, n_t).unwrap();
    let c = Constellation::qam(4).unwrap();
    let code = LdpcCode::new(648, CodeRate::R12).unwrap();
    let layout = segment_payload(p.n_data() * 4, &code).unwrap();
    let n0 = 0.3;
    let lmmse = LmmseEstimator::new(&p, &cov, n0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let info: Vec<u8> = (0..layout.info_bits(&code)).map(|_| rng.random_range(0..2u8)).collect();
    let x = map_bits_to_grid(&encode_frame(&info, &code, &layout).unwrap(), &c, &p).unwrap();
    let h = draw_channel(&cov, &mut rng);
    let y = receive(&h, &x, n0, &mut rng);
    let cfg = IeddConfig { outer_iterations: 1, decoder_iterations: 20 };
    let out = iedd_receive(&y, &p, &cov, &lmmse, n0, &c, &code, &layout, &cfg).unwrap();
    let reference = mmse_equalize_demap(&y, &lmmse.estimate(&y).unwrap(), n0, 0.0, &c, &p).unwrap();
    assert_eq!(out.llrs, reference.llrs);
    let dec = decode_blocks(&reference.llrs, &code, &layout, 20).unwrap();
    assert_eq!(out.info_bits, dec.iter().flat_map(|d| d.bits.clone()).collect::<Vec<_>>());
    assert_eq!(out.iterations, 1);
}

#[test]
fn iedd_does_not_lose_blocks_against_lmmse() {
    let (n_s, n_t) = (32, 14);
    let cov = covariance(n_s, n_t, 40.0);
    let p = make_pilot_pattern(PilotConfig::OneP, n_s, n_t).unwrap();
    let c = Constellation::qam(4).unwrap();
    let code = LdpcCode::new(648, CodeRate::R12).unwrap();
    let layout = segment_payload(p.n_data() * 4, &code).unwrap();
    let n0 = 10f64.powf(-0.7);
    let lmmse = LmmseEstimator::new(&p, &cov, n0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut e1, mut e3) = (0, 0);
    for _ in 0..60 {
        let info: Vec<u8> = (0..layout.info_bits(&code)).map(|_| rng.random_range(0..2u8)).collect();
        let x = map_bits_to_grid(&encode_frame(&info, &code, &layout).unwrap(), &c, &p).unwrap();
        let h = draw_channel(&cov, &mut rng);
        let y = receive(&h, &x, n0, &mut rng);
        for (iters, errs) in [(1, &mut e1), (3, &mut e3)] {
            let cfg = IeddConfig { outer_iterations: iters, decoder_iterations: 20 };
            let out = iedd_receive(&y, &p, &cov, &lmmse, n0, &c, &code, &layout, &cfg).unwrap();
            *errs += out.info_bits.chunks(code.k).zip(info.chunks(code.k)).filter(|(a, b)| a != b).count();
        }
    }
    assert!(e3 <= e1, "iterative {e3} vs single pass {e1}");
}
