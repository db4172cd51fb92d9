use deepofdm::channel::*;
use deepofdm::ofdm_grid::Grid;
use deepofdm::waveform::{ofdm_demodulate, ofdm_modulate, Frame};
use deepofdm::C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FC: f64 = 2e9;
const DF: f64 = 15e3;

/// J0 by trapezoidal quadrature of (1/pi) int_0^pi cos(x sin th) dth.
fn j0_quadrature(x: f64) -> f64 {
    let n = 4000;
    let h = std::f64::consts::PI / n as f64;
    let f = |th: f64| (x * th.sin()).cos();
    let mut s = 0.5 * (f(0.0) + f(std::f64::consts::PI));
    for i in 1..n {
        s += f(i as f64 * h);
    }
    s * h / std::f64::consts::PI
}

/// sin(pi x)/(pi x) by its Taylor series.
fn sinc_series(x: f64) -> f64 {
    let y = std::f64::consts::PI * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for n in 1..30 {
        term *= -y * y / ((2 * n) as f64 * (2 * n + 1) as f64);
        sum += term;
    }
    sum
}

#[test]
fn doppler_arithmetic() {
    assert!((doppler(100.0, FC) - 666.666_666_666_7).abs() < 1e-6);
}

#[test]
fn bessel_matches_quadrature() {
    for i in 0..400 {
        let x = i as f64 * 0.1;
        assert!((bessel_j0(x) - j0_quadrature(x)).abs() < 1e-9, "x = {x}");
    }
    assert!((bessel_j0(2.404_825_557_695_773)).abs() < 1e-12);
}

#[test]
fn ici_fraction_values() {
    assert_eq!(ici_fraction(0.0, FC, DF), 0.0);
    let nu = 100.0 * FC / (3e8 * DF);
    let expect = 1.0 - sinc_series(nu).powi(2);
    assert!((ici_fraction(100.0, FC, DF) - expect).abs() < 1e-9);
    assert!((expect - 6.48e-3).abs() < 1e-5);
    assert!((ici_fraction(40.0, FC, DF) - 1.04e-3).abs() < 1e-5);
    let mut last = 0.0;
    for u in 1..200 {
        let g = ici_fraction(u as f64, FC, DF);
        assert!(g > last);
        last = g;
    }
}

#[test]
fn tdl_a_profile_is_normalized_and_fits_the_prefix() {
    let p = TdlProfile::tdl_a(100e-9);
    assert!((p.powers.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(p.delays.windows(2).all(|w| w[0] <= w[1]));
    let ts = 1.0 / (128.0 * DF);
    let q = p.quantize(ts);
    assert!((q.powers.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(q.max_delay() < 6);
    assert!(q.delays.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn profile_from_config_values() {
    let p = TdlProfile::from_db("two", &[0.0, 500.0], &[0.0, -3.0]).unwrap();
    assert!((p.powers[0] / p.powers[1] - 10f64.powf(0.3)).abs() < 1e-12);
    assert!((p.delays[1] - 500e-9).abs() < 1e-18);
    assert!(TdlProfile::from_db("bad", &[0.0], &[0.0, 1.0]).is_err());
}

#[test]
fn static_channel_is_constant() {
    let q = TdlProfile::tdl_a(100e-9).quantize(1.0 / (128.0 * DF));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ch = generate_tdl(&q, 0.0, FC, 1.0 / (128.0 * DF), 500, &mut rng);
    for g in &ch.gains {
        assert!(g.iter().all(|v| (v - g[0]).norm() < 1e-12));
    }
    let h = freq_csi(&ch, 128, 3, 6);
    for k in 0..128 {
        assert!((h.get(k, 0) - h.get(k, 2)).norm() < 1e-12);
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let q = TdlProfile::tdl_a(100e-9).quantize(1.0 / (128.0 * DF));
    let a = generate_tdl(&q, 30.0, FC, 1e-6, 100, &mut ChaCha8Rng::seed_from_u64(9));
    let b = generate_tdl(&q, 30.0, FC, 1e-6, 100, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn per_tap_power_converges() {
    let q = TdlProfile::tdl_a(100e-9).quantize(1.0 / (128.0 * DF));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 10_000;
    let mut acc = vec![0.0; q.delays.len()];
    for _ in 0..n {
        let ch = generate_tdl(&q, 100.0, FC, 1.0 / (128.0 * DF), 1, &mut rng);
        for (a, g) in acc.iter_mut().zip(&ch.gains) {
            *a += g[0].norm_sqr();
        }
    }
    for (a, p) in acc.iter().zip(&q.powers) {
        assert!((a / n as f64 / p - 1.0).abs() < 0.03, "{} vs {p}", a / n as f64);
    }
}

#[test]
fn tap_autocorrelation_follows_clarke() {
    let ts = 1.0 / (128.0 * DF);
    let f_d = doppler(100.0, FC);
    let max_lag = (1.0 / (f_d * ts)).ceil() as usize;
    let q = SampledProfile::single_tap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lags: Vec<usize> = (0..=20).map(|i| i * max_lag / 20).collect();
    let mut acc = vec![C64::new(0.0, 0.0); lags.len()];
    let n = 1000;
    for _ in 0..n {
        let ch = generate_tdl(&q, 100.0, FC, ts, max_lag + 1, &mut rng);
        let g = &ch.gains[0];
        for (a, &l) in acc.iter_mut().zip(&lags) {
            *a += g[l] * g[0].conj();
        }
    }
    for (a, &l) in acc.iter().zip(&lags) {
        let r = a.re / n as f64;
        let expect = j0_quadrature(2.0 * std::f64::consts::PI * f_d * l as f64 * ts);
        assert!((r - expect).abs() < 0.1, "lag {l}: {r} vs {expect}");
    }
}

#[test]
fn identity_channel_passes_the_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples: Vec<C64> = (0..100).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
    let f = Frame { samples: samples.clone(), n_s: 16, n_t: 5, n_cp: 4, subcarrier_spacing: DF };
    let ch = ChannelRealization::fixed(&[0], &[C64::new(1.0, 0.0)], 100, 1e-6);
    assert_eq!(apply_channel(&f, &ch, 0.0, &mut rng).unwrap().samples, samples);
}

#[test]
fn short_realization_is_rejected() {
    let f = Frame { samples: vec![C64::new(1.0, 0.0); 100], n_s: 16, n_t: 5, n_cp: 4, subcarrier_spacing: DF };
    let ch = ChannelRealization::fixed(&[0, 3], &[C64::new(1.0, 0.0); 2], 101, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(apply_channel(&f, &ch, 0.0, &mut rng), Err(deepofdm::Error::Config(_))));
}

#[test]
fn two_static_taps_match_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<C64> = (0..60).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
    let h = [C64::new(0.8, 0.1), C64::new(-0.3, 0.4)];
    let f = Frame { samples: x.clone(), n_s: 8, n_t: 6, n_cp: 2, subcarrier_spacing: DF };
    let ch = ChannelRealization::fixed(&[0, 2], &h, 62, 1e-6);
    let y = apply_channel(&f, &ch, 0.0, &mut rng).unwrap();
    for b in 0..60 {
        let mut expect = h[0] * x[b];
        if b >= 2 {
            expect += h[1] * x[b - 2];
        }
        assert!((y.samples[b] - expect).norm() < 1e-12);
    }
}

#[test]
fn pure_noise_has_unit_variance() {
    let f = Frame { samples: vec![C64::new(0.0, 0.0); 10_000], n_s: 100, n_t: 100, n_cp: 0, subcarrier_spacing: DF };
    let ch = ChannelRealization::fixed(&[0], &[C64::new(1.0, 0.0)], 10_000, 1e-6);
    let y = apply_channel(&f, &ch, 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let var = y.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / 10_000.0;
    assert!((var - 1.0).abs() < 0.05);
}

#[test]
fn csi_matches_dft_of_taps() {
    let h = [C64::new(0.6, -0.2), C64::new(0.1, 0.5)];
    let ch = ChannelRealization::fixed(&[0, 3], &h, 200, 1e-6);
    let csi = freq_csi(&ch, 16, 4, 2);
    for k in 0..16 {
        let mut taps = [C64::new(0.0, 0.0); 16];
        taps[0] = h[0];
        taps[3] = h[1];
        let dft: C64 = (0..16)
            .map(|l| taps[l] * C64::from_polar(1.0, -2.0 * std::f64::consts::PI * (k * l) as f64 / 16.0))
            .sum();
        for t in 0..4 {
            assert!((csi.get(k, t) - dft).norm() < 1e-12);
        }
    }
    let flat = ChannelRealization::fixed(&[0], &[C64::new(0.3, 0.7)], 200, 1e-6);
    assert!(freq_csi(&flat, 16, 4, 2).data.iter().all(|v| (v - C64::new(0.3, 0.7)).norm() < 1e-12));
}

#[test]
fn static_channel_within_prefix_is_elementwise_in_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n_s, n_t, n_cp) = (64, 6, 6);
    let data = (0..n_s * n_t).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
    let x = Grid::from_vec(n_s, n_t, data).unwrap();
    let q = TdlProfile::tdl_a(100e-9).quantize(1.0 / (n_s as f64 * DF));
    let len = n_t * (n_s + n_cp) + q.max_delay();
    let ch = generate_tdl(&q, 0.0, FC, 1.0 / (n_s as f64 * DF), len, &mut rng);
    let f = ofdm_modulate(&x, n_cp, DF).unwrap();
    let h = freq_csi(&ch, n_s, n_t, n_cp);
    // Symbol 0 sees zeros before the frame instead of a previous symbol,
    // which the prefix also covers.
    let y = ofdm_demodulate(&apply_channel(&f, &ch, 0.0, &mut rng).unwrap()).unwrap();
    for i in 0..n_s * n_t {
        assert!((y.data[i] - h.data[i] * x.data[i]).norm() < 1e-9);
    }
    let n0 = 0.1;
    let yn = ofdm_demodulate(&apply_channel(&f, &ch, n0, &mut rng).unwrap()).unwrap();
    let var = (0..n_s * n_t).map(|i| (yn.data[i] - y.data[i]).norm_sqr()).sum::<f64>() / (n_s * n_t) as f64;
    assert!((var / n0 - 1.0).abs() < 0.1);
}
