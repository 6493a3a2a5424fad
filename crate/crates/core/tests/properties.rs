//! Property suites against independent oracles.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinyasc::audit::{brute_force_count, count_macs, count_params, CountingConvention};
use tinyasc::dataset::{parse_manifest_str, synth_dataset_total, DatasetManifest, ManifestEntry, Split, Vocabulary, TAU_SCENES};
use tinyasc::frontend::{frame_signal, log_mel, power_spectrum, FrontendConfig, Waveform};
use tinyasc::metrics::{accuracy, log_loss};
use tinyasc::model::{Arch, ArchConfig, ModelGraph};
use tinyasc::quant::{dequantize, quantize_tensor, QuantParams, Scheme};
use tinyasc::train::{early_stop_check, gather_batch, lr_schedule_update, train_mode_loss, train_step, AdamConfig, AdamState, TrainingConfig};
use tinyasc::Tensor;

fn naive_power(frame: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_spectrum_matches_naive_dft(frame in prop::collection::vec(-1.0f64..1.0, 1..=64)) {
        let got = power_spectrum(std::slice::from_ref(&frame), 64).unwrap();
        let want = naive_power(&frame, 64);
        let scale = want.iter().copied().fold(1.0, f64::max);
        for (g, w) in got[0].iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn parseval_on_one_sided_power(frame in prop::collection::vec(-1.0f64..1.0, 1..=128)) {
        let n = 128;
        let p = &power_spectrum(std::slice::from_ref(&frame), n).unwrap()[0];
        let spectral = p[0] + 2.0 * p[1..n / 2].iter().sum::<f64>() + p[n / 2];
        let temporal = n as f64 * frame.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((spectral - temporal).abs() <= 1e-9 * temporal.max(1.0));
    }

    #[test]
    fn frame_count_follows_hop(len in 1usize..5000) {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.1; len], 44_100).unwrap();
        let frames = frame_signal(&w, &cfg).unwrap();
        prop_assert_eq!(frames.len(), 1 + len / 882);
        prop_assert!(frames.iter().all(|f| f.len() == 1764));
    }

    #[test]
    fn quantize_roundtrip_within_half_step(
        data in prop::collection::vec(-50.0f32..50.0, 1..200),
        affine in any::<bool>(),
    ) {
        let scheme = if affine { Scheme::AffineActivation } else { Scheme::SymmetricWeight };
        let t = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let (q, p) = quantize_tensor(&t, scheme).unwrap();
        prop_assert!(p.scale > 0.0);
        if !affine {
            prop_assert_eq!(p.zero_point, 0);
        }
        for (x, y) in data.iter().zip(dequantize(&q, &p)) {
            // f32 slack for the products themselves
            prop_assert!(f64::from((x - y).abs()) <= f64::from(p.scale) / 2.0 * (1.0 + 1e-4) + 1e-6);
        }
    }

    #[test]
    fn affine_zero_point_is_exact(lo in -100.0f32..100.0, width in 0.0f32..100.0) {
        let p = QuantParams::affine(lo, lo + width);
        prop_assert!(p.scale > 0.0);
        prop_assert!((-128..=127).contains(&p.zero_point));
        prop_assert_eq!(p.dequantize(p.quantize(0.0)), 0.0);
    }

    #[test]
    fn metrics_match_naive_definitions(rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 4), 0usize..4), 1..40)) {
        let preds: Vec<Vec<f64>> = rows
            .iter()
            .map(|(r, _)| {
                let s: f64 = r.iter().sum::<f64>() + 1e-3;
                r.iter().map(|v| (v + 2.5e-4) / s).collect()
            })
            .collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let mut hits = 0.0;
        let mut loss = 0.0;
        for (p, &l) in preds.iter().zip(&labels) {
            let mut best = 0;
            for c in 1..p.len() {
                if p[c] > p[best] {
                    best = c;
                }
            }
            hits += f64::from(u8::from(best == l));
            loss -= p[l].max(1e-15).ln();
        }
        let n = labels.len() as f64;
        prop_assert!((accuracy(&preds, &labels).unwrap() - hits / n).abs() < 1e-12);
        prop_assert!((log_loss(&preds, &labels).unwrap() - loss / n).abs() < 1e-9);
    }

    #[test]
    fn manifest_round_trip(
        rows in prop::collection::vec((0usize..10, prop::option::of("[a-c]")), 1..30),
        with_device in any::<bool>(),
    ) {
        let vocabulary = Vocabulary::new(TAU_SCENES.iter().map(|s| s.to_string()).collect()).unwrap();
        let entries: Vec<ManifestEntry> = rows
            .iter()
            .enumerate()
            .map(|(i, (label, dev))| ManifestEntry {
                path: format!("audio/clip-{i}.wav"),
                label: *label,
                device: if with_device { Some(dev.clone().unwrap_or_else(|| "a".into())) } else { None },
            })
            .collect();
        let m = DatasetManifest { entries, split: Split::Train, vocabulary: vocabulary.clone() };
        let back = parse_manifest_str(&m.serialize(), Split::Train, &vocabulary).unwrap();
        prop_assert_eq!(back, m);
    }

    /// Plateau and stop decisions against their direct definition: with `s`
    /// epochs since the best-so-far last strictly improved, the rate halves
    /// whenever `s` is a positive multiple of the plateau patience and
    /// training stops once `s` reaches the stop patience.
    #[test]
    fn schedule_matches_definition(history in prop::collection::vec(prop::sample::select(vec![0.1, 0.2, 0.3, 0.5, 0.7, 0.9]), 1..120)) {
        let cfg = TrainingConfig::default();
        let mut lr = 1e-3;
        let mut best = f64::NEG_INFINITY;
        let mut since = 0usize;
        for i in 0..history.len() {
            if history[i] > best {
                best = history[i];
                since = 0;
            } else {
                since += 1;
            }
            let halve = since > 0 && since % cfg.lr_plateau_patience == 0;
            let next = lr_schedule_update(&history[..=i], lr, &cfg);
            prop_assert_eq!(next, if halve { lr * 0.5 } else { lr });
            prop_assert_eq!(early_stop_check(&history[..=i], &cfg), since >= cfg.early_stop_patience);
            lr = next;
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> ModelGraph {
    let arch = if rng.random_bool(0.5) { Arch::ConvSep } else { Arch::ConvMixer };
    let patch = rng.random_range(1..3);
    // the two time pools need at least 8 frames after patching
    let shape = [rng.random_range(2 * patch..10), rng.random_range(8 * patch..24), 1];
    let mut cfg = ArchConfig::new(
        arch,
        rng.random_range(1..9),
        rng.random_range(1..9),
        [1, 3, 5][rng.random_range(0..3)],
        patch,
    )
    .with_input_shape(shape);
    cfg.use_bias = rng.random_bool(0.5);
    if arch == Arch::ConvMixer {
        cfg.filters.1 = cfg.filters.0;
        cfg.patch_bn = rng.random_bool(0.5);
    }
    ModelGraph::build(cfg).unwrap()
}

#[test]
fn counters_equal_brute_force_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..20 {
        let m = random_graph(&mut rng);
        for conv in [
            CountingConvention::default(),
            CountingConvention { bn_params_per_channel: 2, bn_macs: true, bias_macs: true },
        ] {
            let (_, params) = count_params(&m, &conv).unwrap();
            let (_, macs) = count_macs(&m, &m.config.input_shape, &conv).unwrap();
            assert_eq!((params, macs), brute_force_count(&m, &conv).unwrap(), "graph {i}: {:?}", m.config);
        }
    }
}

#[test]
fn counts_grow_with_filters() {
    let conv = CountingConvention::default();
    for arch in [Arch::ConvSep, Arch::ConvMixer] {
        let mut last = (0, 0);
        for f in [8, 16, 24, 32, 48] {
            let m: ModelGraph = ModelGraph::build(ArchConfig::new(arch, f, f, 3, 1)).unwrap();
            let p = count_params(&m, &conv).unwrap().1;
            let c = count_macs(&m, &m.config.input_shape, &conv).unwrap().1;
            assert!(p > last.0 && c > last.1, "{arch} f={f}");
            last = (p, c);
        }
    }
}

#[test]
fn macs_are_affine_in_frames() {
    // widths divisible by both pools keep every layer's width proportional
    let conv = CountingConvention::default();
    for arch in [Arch::ConvSep, Arch::ConvMixer] {
        let macs = |w: usize| {
            let m: ModelGraph = ModelGraph::build(ArchConfig::new(arch, 8, 8, 3, 1).with_input_shape([16, w, 1])).unwrap();
            count_macs(&m, &m.config.input_shape, &conv).unwrap().1
        };
        let (a, b, c) = (macs(8), macs(16), macs(24));
        assert_eq!(c - b, b - a, "{arch}");
    }
}

fn tiny_model(seed: u64) -> ModelGraph {
    let mut m: ModelGraph = ModelGraph::build(ArchConfig::conv_sep(4, 4, 3)).unwrap();
    m.init_weights(seed);
    m
}

#[test]
fn small_step_lowers_the_batch_loss() {
    let data = synth_dataset_total(16, 3);
    let idx: Vec<usize> = (0..16).collect();
    let mut decreased = 0;
    for seed in 0..10 {
        let mut m = tiny_model(seed);
        let (x, labels) = gather_batch(&m, &data, &idx).unwrap();
        // a fixed dropout mask and the same batch statistics on both sides
        let mut probe = m.clone();
        let before = train_mode_loss(&mut probe, &x, &labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut state = AdamState::default();
        train_step(&mut m, &x, &labels, &mut state, &AdamConfig::default(), 1e-4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let after = train_mode_loss(&mut m, &x, &labels, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        decreased += usize::from(after < before);
    }
    assert_eq!(decreased, 10);
}

#[test]
fn zero_learning_rate_keeps_trainable_weights() {
    let data = synth_dataset_total(8, 1);
    let mut m = tiny_model(5);
    let before = m.clone();
    let (x, labels) = gather_batch(&m, &data, &(0..8).collect::<Vec<_>>()).unwrap();
    let mut state = AdamState::default();
    train_step(&mut m, &x, &labels, &mut state, &AdamConfig::default(), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in m.layers().iter().zip(before.layers()) {
        assert_eq!(a.params(), b.params(), "{}", a.name);
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset_total(20, 4);
    let cfg = TrainingConfig { max_epochs: 3, batch_size: 8, seed: 11, ..Default::default() };
    let run = || tinyasc::train::train(tiny_model(2), &data, &cfg).unwrap();
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(tinyasc::model::write_model(&m1), tinyasc::model::write_model(&m2));
}

#[test]
fn one_second_is_64_by_51() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = Waveform::new((0..44_100).map(|_| rng.random_range(-1.0..1.0)).collect(), 44_100).unwrap();
    let s = log_mel(&w, &FrontendConfig::default()).unwrap();
    assert_eq!((s.n_mels, s.n_frames), (64, 51));
}
