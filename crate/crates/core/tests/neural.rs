use deepofdm::neural_mod::*;
use deepofdm::neural_rx::*;
use deepofdm::ofdm_grid::*;
use deepofdm::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorkit::{Conv2dLayer, Graph, Layer, Mode, ParamStore, Sequential};

fn modulator(hidden: usize, linear: bool, seed: u64) -> (ParamStore<f64>, ModulatorNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ModulatorNet::build(&mut store, &mut rng, ModulatorConfig { hidden, linear }).unwrap();
    (store, net)
}

fn receiver(hidden: usize, m: usize, input: RxInput, seed: u64) -> (ParamStore<f64>, ReceiverNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ReceiverNet::build(&mut store, &mut rng, ReceiverConfig { hidden, m, input }).unwrap();
    (store, net)
}

fn random_symbols(pattern: &PilotPattern, c: &Constellation, rng: &mut ChaCha8Rng) -> Grid {
    let labels: Vec<u32> = (0..pattern.n_data()).map(|_| rng.random_range(0..c.size() as u32)).collect();
    map_labels_to_grid(&labels, c, pattern).unwrap()
}

fn trainable_numel(store: &ParamStore<f64>) -> usize {
    store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
}

fn raw_forward(store: &ParamStore<f64>, net: &ModulatorNet, x: &Grid) -> Vec<f64> {
    let (v, shape) = grids_to_tensor::<f64>(&[x]).unwrap();
    let mut g = Graph::inference(Mode::Eval);
    let xv = g.constant(v, shape);
    let y = net.forward(&mut g, store, xv).unwrap();
    g.value(y).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn modulator_keeps_grid_shape(n_s in 4usize..20, n_t in 2usize..9, seed in 0u64..100) {
        let (store, net) = modulator(8, false, seed);
        let pattern = PilotPattern::with_symbols(&[0], n_s, n_t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_symbols(&pattern, &Constellation::qam(2).unwrap(), &mut rng);
        let y = neural_modulate(&x, &store, &net, &pattern).unwrap();
        prop_assert_eq!((y.n_s, y.n_t), (n_s, n_t));
    }

    #[test]
    fn modulator_output_has_unit_power_and_exact_pilots(seed in 0u64..1000, pilots in 0usize..3) {
        let config = [PilotConfig::ZeroP, PilotConfig::OneP, PilotConfig::TwoP][pilots];
        let pattern = PilotPattern::new(config, 32, 14).unwrap();
        let (store, net) = modulator(8, false, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_symbols(&pattern, &Constellation::qam(4).unwrap(), &mut rng);
        let y = neural_modulate(&x, &store, &net, &pattern).unwrap();
        prop_assert!((y.mean_power() - 1.0).abs() < 1e-6);
        for i in pattern.pilot_indices() {
            prop_assert_eq!(y.data[i], pattern.values.data[i]);
        }
    }

    #[test]
    fn sip_output_mixes_data_and_pilots(a in 0.0f64..=1.0, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pattern = PilotPattern::new(PilotConfig::ZeroP, 8, 4).unwrap();
        let x = random_symbols(&pattern, &Constellation::qam(4).unwrap(), &mut rng);
        let p = dense_pilots(8, 4);
        let y = sip_modulate(&x, &p, &vec![a; 32]).unwrap();
        for i in 0..32 {
            let want = x.data[i] * (1.0 - a).sqrt() + p.data[i] * a.sqrt();
            prop_assert!((y.data[i] - want).norm() < 1e-12);
        }
    }
}

#[test]
fn linear_modulator_is_affine() {
    let (store, net) = modulator(8, true, 4);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 16, 6).unwrap();
    let c = Constellation::qam(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_symbols(&pattern, &c, &mut rng);
    let b = random_symbols(&pattern, &c, &mut rng);
    let sum = Grid::from_vec(16, 6, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()).unwrap();
    let zero = Grid::zeros(16, 6);
    let (fa, fb, fs, f0) =
        (raw_forward(&store, &net, &a), raw_forward(&store, &net, &b), raw_forward(&store, &net, &sum), raw_forward(&store, &net, &zero));
    for i in 0..fa.len() {
        assert!((fa[i] + fb[i] - f0[i] - fs[i]).abs() < 1e-6, "element {i}");
    }
}

#[test]
fn relu_modulator_is_not_affine() {
    let (store, net) = modulator(8, false, 4);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 16, 6).unwrap();
    let c = Constellation::qam(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_symbols(&pattern, &c, &mut rng);
    let b = random_symbols(&pattern, &c, &mut rng);
    let sum = Grid::from_vec(16, 6, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect()).unwrap();
    let (fa, fb, fs, f0) = (
        raw_forward(&store, &net, &a),
        raw_forward(&store, &net, &b),
        raw_forward(&store, &net, &sum),
        raw_forward(&store, &net, &Grid::zeros(16, 6)),
    );
    let worst = (0..fa.len()).map(|i| (fa[i] + fb[i] - f0[i] - fs[i]).abs()).fold(0.0, f64::max);
    assert!(worst > 1e-3);
}

#[test]
fn modulator_output_depends_on_context() {
    // The same input symbol lands on different outputs depending on its
    // neighbours.
    let (store, net) = modulator(8, false, 2);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 16, 6).unwrap();
    let c = Constellation::qam(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut outs = Vec::new();
    for _ in 0..4 {
        let mut x = random_symbols(&pattern, &c, &mut rng);
        x.set(8, 3, c.points[0]);
        outs.push(neural_modulate(&x, &store, &net, &pattern).unwrap().get(8, 3));
    }
    let mean = outs.iter().sum::<C64>() / 4.0;
    let spread = outs.iter().map(|o| (o - mean).norm_sqr()).sum::<f64>() / 4.0;
    assert!(spread > 1e-6);
}

#[test]
fn sip_edge_fractions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 8, 4).unwrap();
    let x = random_symbols(&pattern, &Constellation::qam(4).unwrap(), &mut rng);
    let p = dense_pilots(8, 4);
    assert_eq!(sip_modulate(&x, &p, &[0.0; 32]).unwrap(), x);
    assert_eq!(sip_modulate(&x, &p, &[1.0; 32]).unwrap(), p);
    assert!(sip_modulate(&x, &p, &[1.5; 32]).is_err());
    assert!(sip_modulate(&x, &p, &[-0.1; 32]).is_err());
}

#[test]
fn sip_mean_power_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 64, 14).unwrap();
    let c = Constellation::qam(4).unwrap();
    let p = dense_pilots(64, 14);
    let a = vec![0.2; 64 * 14];
    let mut total = 0.0;
    for _ in 0..50 {
        total += sip_modulate(&random_symbols(&pattern, &c, &mut rng), &p, &a).unwrap().mean_power();
    }
    assert!((total / 50.0 - 1.0).abs() < 0.01, "{}", total / 50.0);
}

#[test]
fn identity_modulator_collapses_to_its_constellation() {
    let c = Constellation::qam(4).unwrap();
    let pattern = PilotPattern::new(PilotConfig::OneP, 16, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gs = collapse_to_gs_with(&c, &pattern, 8, &mut rng, |x| Ok(x.clone())).unwrap();
    for (a, b) in gs.points.iter().zip(&c.points) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn collapsed_constellation_is_normalized() {
    let (store, net) = modulator(8, false, 9);
    let c = Constellation::qam(2).unwrap();
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 16, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gs = collapse_to_gs(&store, &net, &c, &pattern, 4, &mut rng).unwrap();
    let mean = gs.points.iter().sum::<C64>() / gs.size() as f64;
    let power = gs.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / gs.size() as f64;
    assert!(mean.norm() < 1e-12);
    assert!((power - 1.0).abs() < 1e-12);
}

#[test]
fn pointwise_conv_parameter_count() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let conv = Conv2dLayer::build(&mut store, &mut rng, "c", 2, 24, (1, 1), (1, 1), true);
    let c = count_complexity(&Sequential::new(vec![Layer::Conv2d(conv)]), 128, 14);
    assert_eq!(c.params, 72);
    assert_eq!(c.macs, 48 * 128 * 14);
    assert_eq!(c.flops(), 2 * c.macs);
}

#[test]
fn parameter_counts_match_stores() {
    for (hidden, linear) in [(48, false), (16, true), (40, false)] {
        let (store, net) = modulator(hidden, linear, 0);
        let c = count_complexity(&net.layers, 128, 14);
        assert_eq!(c.params, trainable_numel(&store), "modulator {hidden}");
        assert_eq!(c.buffers, store.iter().filter(|(_, p)| !p.trainable).map(|(_, p)| p.value.len()).sum::<usize>());
    }
    for (hidden, input) in [(128, RxInput::Pilots), (32, RxInput::PilotsCsi), (40, RxInput::None)] {
        let (store, net) = receiver(hidden, 6, input, 0);
        assert_eq!(count_complexity(&net.layers, 128, 14).params, trainable_numel(&store), "receiver {hidden}");
    }
}

#[test]
fn linear_flag_keeps_parameter_count() {
    let (_, relu) = modulator(48, false, 0);
    let (_, linear) = modulator(48, true, 0);
    assert_eq!(count_complexity(&relu.layers, 128, 14), count_complexity(&linear.layers, 128, 14));
}

#[test]
fn receiver_output_shape_for_any_grid() {
    let (store, net) = receiver(16, 4, RxInput::Pilots, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (n_s, n_t) in [(64, 14), (80, 14), (24, 7)] {
        let pattern = PilotPattern::new(PilotConfig::OneP, n_s, n_t).unwrap();
        let y = random_symbols(&pattern, &Constellation::qam(4).unwrap(), &mut rng);
        let llrs = neural_receive(&y, &pattern, None, &store, &net).unwrap();
        assert_eq!(llrs.len(), n_s * n_t * 4);
        assert!(llrs.iter().all(|v| v.is_finite()));
        assert_eq!(data_llrs(&llrs, &pattern, 4).len(), pattern.n_data() * 4);
    }
}

#[test]
fn pilotless_receiver_gives_finite_llrs() {
    let (store, net) = receiver(16, 2, RxInput::Pilots, 3);
    let pattern = PilotPattern::new(PilotConfig::ZeroP, 32, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_symbols(&pattern, &Constellation::qam(2).unwrap(), &mut rng);
    let input = receiver_input::<f64>(&[&y], &pattern.values, None, RxInput::Pilots).unwrap();
    assert!(input.chunks(4).all(|c| c[2] == 0.0 && c[3] == 0.0));
    let llrs = neural_receive(&y, &pattern, None, &store, &net).unwrap();
    assert!(llrs.iter().all(|v| v.is_finite()));
}

#[test]
fn receiver_is_deterministic_in_eval() {
    let (store, net) = receiver(16, 2, RxInput::Pilots, 5);
    let pattern = PilotPattern::new(PilotConfig::OneP, 16, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let y = random_symbols(&pattern, &Constellation::qam(2).unwrap(), &mut rng);
    let a = neural_receive(&y, &pattern, None, &store, &net).unwrap();
    let b = neural_receive(&y, &pattern, None, &store, &net).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csi_input_requires_channels() {
    let pattern = PilotPattern::new(PilotConfig::OneP, 8, 4).unwrap();
    let y = Grid::zeros(8, 4);
    assert!(receiver_input::<f64>(&[&y], &pattern.values, None, RxInput::PilotsCsi).is_err());
    let mut h = Grid::zeros(8, 4);
    h.set(2, 1, C64::new(0.5, -0.25));
    let v = receiver_input::<f64>(&[&y], &pattern.values, Some(&[&h]), RxInput::PilotsCsi).unwrap();
    let r = h.idx(2, 1);
    assert_eq!(&v[r * 6 + 4..r * 6 + 6], &[0.5, -0.25]);
    assert_eq!(v.len(), 8 * 4 * 6);
}

#[test]
fn data_llrs_follow_mapper_order() {
    let pattern = PilotPattern::new(PilotConfig::OneP, 4, 3).unwrap();
    let all: Vec<f64> = (0..12 * 2).map(|v| v as f64).collect();
    let picked = data_llrs(&all, &pattern, 2);
    let want: Vec<f64> = pattern.data_indices().iter().flat_map(|&r| [2.0 * r as f64, 2.0 * r as f64 + 1.0]).collect();
    assert_eq!(picked, want);
}

#[test]
fn mode_names_roundtrip() {
    for m in [
        ModulationMode::Qam,
        ModulationMode::Gs,
        ModulationMode::DeepOfdm,
        ModulationMode::DeepOfdmLinear,
        ModulationMode::DeepOfdmGs,
        ModulationMode::Sip,
    ] {
        assert_eq!(m.name().parse::<ModulationMode>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    for i in [RxInput::Pilots, RxInput::PilotsCsi, RxInput::None] {
        assert_eq!(i.name().parse::<RxInput>().unwrap(), i);
    }
}
