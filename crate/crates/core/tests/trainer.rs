use deepofdm::link::{GridConfig, ModulationSettings, ReceiverSettings};
use deepofdm::neural_mod::ModulationMode;
use deepofdm::neural_rx::RxInput;
use deepofdm::ofdm_grid::PilotConfig;
use deepofdm::trainer::*;
use deepofdm::waveform::smooth_papr;
use deepofdm::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::{grad_check, GradCheckConfig, Graph, Mode};

fn tiny(mode: ModulationMode, pilots: PilotConfig) -> TrainConfig {
    let mut cfg = TrainConfig {
        grid: GridConfig { n_s: 16, n_t: 4, n_cp: 2, m: 2, pilots, ..Default::default() },
        modulation: ModulationSettings { mode, modulator_hidden: 4, ..Default::default() },
        receiver: ReceiverSettings { hidden: 4, ..Default::default() },
        ..Default::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.steps = 4;
    cfg.train.speed_range = (0.0, 40.0);
    cfg
}

/// Bit-wise binary cross-entropy in bits minus one, written out directly.
fn rate_oracle(llrs: &[f64], bits: &[u8]) -> f64 {
    let n = llrs.len() as f64;
    llrs.iter()
        .zip(bits)
        .map(|(&l, &b)| {
            let p1 = 1.0 / (1.0 + (-l).exp());
            -(if b == 1 { p1 } else { 1.0 - p1 }).log2()
        })
        .sum::<f64>()
        / n
        - 1.0
}

#[test]
fn zero_llrs_give_zero_rate_loss() {
    assert!(rate_loss(&[0.0; 16], &[0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 0]).abs() < 1e-12);
}

#[test]
fn saturated_correct_llrs_approach_minus_one() {
    let bits = [0u8, 1, 1, 0, 1];
    let llrs: Vec<f64> = bits.iter().map(|&b| if b == 1 { 40.0 } else { -40.0 }).collect();
    assert!((rate_loss(&llrs, &bits) + 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rate_loss_matches_direct_formula(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
        let llrs: Vec<f64> = (0..64).map(|_| if rng.random::<bool>() { 4.0 } else { -4.0 }).collect();
        let got = rate_loss(&llrs, &bits);
        prop_assert!((got - rate_oracle(&llrs, &bits)).abs() < 1e-12);
        prop_assert!(got > -1.0);
    }

    #[test]
    fn smooth_papr_gradient_matches_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<C64> = (0..24).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let (v, g) = smooth_papr_with_grad(&x, 10.0).unwrap();
        prop_assert!((v - smooth_papr(&x, 10.0).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for j in [0usize, 7, 23] {
            for (dir, want) in [(C64::new(1.0, 0.0), g[j].re), (C64::new(0.0, 1.0), g[j].im)] {
                let mut p = x.clone();
                let mut m = x.clone();
                p[j] += dir * h;
                m[j] -= dir * h;
                let fd = (smooth_papr(&p, 10.0).unwrap() - smooth_papr(&m, 10.0).unwrap()) / (2.0 * h);
                prop_assert!((fd - want).abs() < 1e-6 * (1.0 + fd.abs()), "{} vs {}", fd, want);
            }
        }
        prop_assert!(g.iter().any(|v| v.norm() > 1e-6));
    }
}

#[test]
fn papr_schedule_endpoints() {
    let mut s = TrainSchedule { steps: 1000, lambda_papr_max: 0.01, ..Default::default() };
    assert_eq!(s.lambda_at(0), 0.0);
    assert_eq!(s.lambda_at(599), 0.0);
    assert!(s.lambda_at(700) > 0.0 && s.lambda_at(700) < 0.01);
    assert!((s.lambda_at(999) - 0.01).abs() < 1e-15);
    s.lambda_papr_max = 0.0;
    assert_eq!(s.lambda_at(999), 0.0);
}

#[test]
fn zero_lambda_total_is_rate() {
    let cfg = tiny(ModulationMode::DeepOfdm, PilotConfig::OneP);
    let t = Trainer::new(cfg).unwrap();
    let batch = t.draw_batch(0);
    let mut g = Graph::new(Mode::Train);
    let out = forward_loss(&mut g, &t.tx, &t.link, &batch, 0.0).unwrap();
    assert_eq!(g.value(out.total), g.value(out.rate));
    assert!(out.papr.is_none());
    let mut g = Graph::new(Mode::Train);
    let out = forward_loss(&mut g, &t.tx, &t.link, &batch, 0.5).unwrap();
    let (total, rate, papr) = (g.value(out.total)[0], g.value(out.rate)[0], g.value(out.papr.unwrap())[0]);
    assert!((total - rate - 0.5 * papr).abs() < 1e-5);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (mode, pilots, input) in [
        (ModulationMode::DeepOfdm, PilotConfig::OneP, RxInput::Pilots),
        (ModulationMode::Gs, PilotConfig::ZeroP, RxInput::None),
        (ModulationMode::Sip, PilotConfig::ZeroP, RxInput::PilotsCsi),
    ] {
        let mut cfg = tiny(mode, pilots);
        cfg.receiver.input = input;
        let t = Trainer::new(cfg).unwrap();
        let batch = t.draw_batch(0);
        let tx = t.tx.cast::<f64>();
        let gc = GradCheckConfig { samples: 120, epsilon: 1e-6, mode: Mode::Train, seed: 5 };
        let r = grad_check(&tx.store, gc, |g, s| {
            let mut local = tx.clone();
            local.store = s.clone();
            forward_loss(g, &local, &t.link, &batch, 0.3).map(|o| o.total).map_err(|e| match e {
                deepofdm::Error::Tensor(e) => e,
                e => tensorkit::TensorError::Usage(e.to_string()),
            })
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{mode:?}: {r:?}");
        assert!(r.checked >= 100, "{mode:?}: {r:?}");
    }
}

#[test]
fn modulator_gradients_are_nonzero() {
    let t = Trainer::new(tiny(ModulationMode::DeepOfdm, PilotConfig::ZeroP)).unwrap();
    let batch = t.draw_batch(0);
    let mut g = Graph::new(Mode::Train);
    let out = forward_loss(&mut g, &t.tx, &t.link, &batch, 0.0).unwrap();
    let grads = g.backward(out.total).unwrap();
    let net = t.tx.modulator.as_ref().unwrap();
    for l in &net.layers.layers {
        let name = l.name();
        let (_, p) = t.tx.store.iter().find(|(_, p)| p.name.starts_with(name) && p.trainable).unwrap();
        let id = t.tx.store.find(&p.name).unwrap();
        let gr = grads.param(id).unwrap();
        assert!(gr.iter().any(|v| v.abs() > 0.0), "{}", p.name);
    }
    let c = grads.param(t.tx.constellation).unwrap();
    assert!(c.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn qam_constellation_stays_frozen() {
    let mut t = Trainer::new(tiny(ModulationMode::Qam, PilotConfig::OneP)).unwrap();
    let before = t.tx.store.get(t.tx.constellation).value.clone();
    let rx_before = t.tx.store.get(t.tx.store.find("rx.output.weight").unwrap()).value.clone();
    t.run().unwrap();
    assert_eq!(t.tx.store.get(t.tx.constellation).value, before);
    assert_ne!(t.tx.store.get(t.tx.store.find("rx.output.weight").unwrap()).value, rx_before);
}

#[test]
fn learned_constellation_stays_normalized() {
    let mut cfg = tiny(ModulationMode::Gs, PilotConfig::OneP);
    cfg.train.learning_rate = 0.05;
    let (tx, _) = train_end_to_end(cfg).unwrap();
    let c = tx.constellation().unwrap();
    let mean = c.points.iter().sum::<C64>() / c.size() as f64;
    let power = c.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / c.size() as f64;
    assert!(mean.norm() < 1e-5);
    assert!((power - 1.0).abs() < 1e-5);
    assert_ne!(c, deepofdm::ofdm_grid::Constellation::qam(2).unwrap());
}

#[test]
fn same_seed_same_history() {
    let cfg = tiny(ModulationMode::DeepOfdm, PilotConfig::ZeroP);
    let (a_tx, a) = train_end_to_end(cfg.clone()).unwrap();
    let (b_tx, b) = train_end_to_end(cfg.clone()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a_tx.store.get(a_tx.constellation).value, b_tx.store.get(b_tx.constellation).value);
    let mut other = cfg;
    other.train.seed = 1;
    let (_, c) = train_end_to_end(other).unwrap();
    assert_ne!(a, c);
}

#[test]
fn rejects_invalid_configs() {
    let mut cfg = tiny(ModulationMode::DeepOfdmGs, PilotConfig::OneP);
    assert!(Trainer::new(cfg.clone()).is_err());
    cfg.modulation.mode = ModulationMode::Sip;
    assert!(Trainer::new(cfg.clone()).is_err());
    cfg.grid.pilots = PilotConfig::ZeroP;
    cfg.modulation.sip_fraction = 1.5;
    assert!(Trainer::new(cfg.clone()).is_err());
    let mut cfg = tiny(ModulationMode::DeepOfdm, PilotConfig::OneP);
    cfg.train.speed_range = (50.0, 10.0);
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn toy_training_lowers_rate_loss() {
    let mut cfg = TrainConfig {
        grid: GridConfig { n_s: 64, n_t: 14, m: 2, pilots: PilotConfig::OneP, ..Default::default() },
        modulation: ModulationSettings { mode: ModulationMode::DeepOfdm, modulator_hidden: 16, ..Default::default() },
        receiver: ReceiverSettings { hidden: 32, ..Default::default() },
        ..Default::default()
    };
    cfg.train = TrainSchedule {
        batch_size: 16,
        learning_rate: 3e-3,
        steps: 200,
        speed_range: (0.0, 40.0),
        snr_db_range: (5.0, 16.0),
        bn_momentum: 0.05,
        ..Default::default()
    };
    let (_, h) = train_end_to_end(cfg).unwrap();
    // Cross-entropy in bits, smoothed over 20 steps.
    let first = h.mean_rate_loss(0, 20) + 1.0;
    let last = h.mean_rate_loss(180, 200) + 1.0;
    assert!(last <= 0.7 * first, "cross-entropy {first:.3} -> {last:.3}");
}
