use deepofdm::ofdm_grid::*;
use deepofdm::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: C64, b: C64, tol: f64) -> bool {
    (a - b).norm() < tol
}

#[test]
fn pilot_pattern_counts() {
    let p = make_pilot_pattern(PilotConfig::TwoP, 128, 14).unwrap();
    assert_eq!(p.n_pilots(), 256);
    let p = make_pilot_pattern(PilotConfig::ZeroP, 128, 14).unwrap();
    assert_eq!(p.n_pilots(), 0);
    assert!(p.mask.iter().all(|&b| !b));
    let p = make_pilot_pattern(PilotConfig::OneP, 128, 14).unwrap();
    for k in 0..128 {
        for t in 0..14 {
            assert_eq!(p.is_pilot(k, t), t == 2);
        }
    }
}

#[test]
fn pilot_outside_grid_is_rejected() {
    assert!(matches!(make_pilot_pattern(PilotConfig::TwoP, 64, 10), Err(deepofdm::Error::Config(_))));
    assert!(PilotPattern::with_symbols(&[0, 9], 64, 10).is_ok());
}

#[test]
fn pilot_values_are_unit_on_mask_and_zero_elsewhere() {
    for cfg in [PilotConfig::TwoP, PilotConfig::OneP, PilotConfig::ZeroP] {
        let p = make_pilot_pattern(cfg, 72, 14).unwrap();
        assert_eq!(p.n_data() + p.n_pilots(), 72 * 14);
        for (i, &m) in p.mask.iter().enumerate() {
            let v = p.values.data[i];
            if m {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(v, C64::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn pilot_config_parses_names() {
    for cfg in [PilotConfig::TwoP, PilotConfig::OneP, PilotConfig::ZeroP] {
        assert_eq!(cfg.name().parse::<PilotConfig>().unwrap(), cfg);
    }
    assert!("3P".parse::<PilotConfig>().is_err());
}

#[test]
fn normalization_examples() {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let qpsk = [C64::new(s, s), C64::new(s, -s), C64::new(-s, s), C64::new(-s, -s)];
    let out = normalize_constellation(&qpsk).unwrap();
    for (a, b) in out.iter().zip(&qpsk) {
        assert!(close(*a, *b, 1e-12));
    }
    let out = normalize_constellation(&[C64::new(0.0, 0.0), C64::new(2.0, 0.0)]).unwrap();
    assert!(close(out[0], C64::new(-1.0, 0.0), 1e-12));
    assert!(close(out[1], C64::new(1.0, 0.0), 1e-12));
    let same = [C64::new(1.0, 1.0); 4];
    assert!(matches!(normalize_constellation(&same), Err(deepofdm::Error::DegenerateConstellation(_))));
}

#[test]
fn qam_constellations_are_normalized() {
    for m in [2, 4, 6, 8] {
        let c = Constellation::qam(m).unwrap();
        let mean = c.points.iter().sum::<C64>() / c.size() as f64;
        let energy = c.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / c.size() as f64;
        assert!(mean.norm() < 1e-6);
        assert!((energy - 1.0).abs() < 1e-6);
    }
}

#[test]
fn qam_labels_are_gray_coded() {
    for m in [2, 4, 6] {
        let c = Constellation::qam(m).unwrap();
        let dmin = (c.points[0] - c.points[1]).norm().min((c.points[0] - c.points[c.size() / 2]).norm());
        for a in 0..c.size() {
            for b in 0..c.size() {
                if a != b && ((c.points[a] - c.points[b]).norm() - dmin).abs() < 1e-9 {
                    assert_eq!((a ^ b).count_ones(), 1, "m={m} neighbours {a} {b}");
                }
            }
        }
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!(close(Constellation::qam(2).unwrap().points[0], C64::new(s, s), 1e-12));
}

#[test]
fn square_qam_is_invariant_under_quarter_turn() {
    for m in [2, 4, 6] {
        let c = Constellation::qam(m).unwrap();
        for p in &c.points {
            let r = p * C64::new(0.0, 1.0);
            assert!(c.points.iter().any(|q| close(*q, r, 1e-9)));
        }
    }
}

#[test]
fn first_data_re_of_zero_bits_is_the_positive_qpsk_point() {
    let c = Constellation::qam(2).unwrap();
    let p = make_pilot_pattern(PilotConfig::TwoP, 16, 14).unwrap();
    let g = map_bits_to_grid(&vec![0; 2 * p.n_data()], &c, &p).unwrap();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    assert!(close(g.get(0, 0), C64::new(s, s), 1e-12));
}

#[test]
fn zero_pilot_grid_consumes_10752_bits_at_m6() {
    let c = Constellation::qam(6).unwrap();
    let p = make_pilot_pattern(PilotConfig::ZeroP, 128, 14).unwrap();
    assert!(map_bits_to_grid(&vec![1; 10752], &c, &p).is_ok());
    assert!(matches!(map_bits_to_grid(&vec![1; 10746], &c, &p), Err(deepofdm::Error::Framing(_))));
}

#[test]
fn data_fill_is_frequency_first() {
    let c = Constellation::qam(2).unwrap();
    let p = make_pilot_pattern(PilotConfig::OneP, 4, 4).unwrap();
    let labels: Vec<u32> = (0..p.n_data() as u32).map(|i| i % 4).collect();
    let g = map_labels_to_grid(&labels, &c, &p).unwrap();
    // Second data RE is subcarrier 1 of symbol 0.
    assert!(close(g.get(1, 0), c.points[1], 1e-12));
    // Fifth data RE is subcarrier 0 of symbol 1.
    assert!(close(g.get(0, 1), c.points[0], 1e-12));
    // Symbol 2 carries pilots, symbol 3 resumes with the ninth data symbol.
    assert!(close(g.get(0, 3), c.points[8 % 4], 1e-12));
    assert!(close(g.get(0, 2), pilot_symbol(0, 2), 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn map_demap_roundtrip(seed in any::<u64>(), mi in 0usize..3, pi in 0usize..3) {
        let m = [2, 4, 6][mi];
        let cfg = [PilotConfig::TwoP, PilotConfig::OneP, PilotConfig::ZeroP][pi];
        let c = Constellation::qam(m).unwrap();
        let p = make_pilot_pattern(cfg, 24, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<u8> = (0..m * p.n_data()).map(|_| rng.random_range(0..2u8)).collect();
        let g = map_bits_to_grid(&bits, &c, &p).unwrap();
        prop_assert_eq!(hard_demap_grid(&g, &c, &p), bits);
    }

    #[test]
    fn normalized_points_have_zero_mean_and_unit_energy(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 8)
    ) {
        let pts: Vec<C64> = pts.into_iter().map(|(a, b)| C64::new(a, b)).collect();
        prop_assume!(pts.iter().any(|p| (p - pts[0]).norm() > 1e-3));
        let out = normalize_constellation(&pts).unwrap();
        let mean = out.iter().sum::<C64>() / 8.0;
        let e = out.iter().map(|p| p.norm_sqr()).sum::<f64>() / 8.0;
        prop_assert!(mean.norm() < 1e-6);
        prop_assert!((e - 1.0).abs() < 1e-6);
    }
}

#[test]
fn average_grid_power_over_random_bits_is_unity() {
    let c = Constellation::qam(6).unwrap();
    let p = make_pilot_pattern(PilotConfig::TwoP, 128, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut total = 0.0;
    let n = 10_000;
    for _ in 0..n {
        let labels: Vec<u32> = (0..p.n_data()).map(|_| rng.random_range(0..64u32)).collect();
        total += map_labels_to_grid(&labels, &c, &p).unwrap().mean_power();
    }
    assert!((total / n as f64 - 1.0).abs() < 0.02);
}

#[test]
fn grid_interleaving_roundtrips() {
    let mut g = Grid::zeros(3, 2);
    g.set(2, 1, C64::new(1.5, -0.5));
    let v = g.to_interleaved();
    assert_eq!(v.len(), 12);
    assert_eq!(Grid::from_interleaved(3, 2, &v).unwrap(), g);
}
