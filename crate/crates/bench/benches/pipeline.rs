use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tinyasc::audit::{audit, Budget, CountingConvention};
use tinyasc::dataset::synth_dataset_total;
use tinyasc::frontend::{log_mel, FrontendConfig, Spectrogram, Waveform};
use tinyasc::model::{build_conv_mixer, build_conv_sep, ModelGraph};
use tinyasc::quant::{quantize_model, quantized_forward};

fn one_second() -> Waveform {
    let samples = (0..44_100).map(|i| 0.3 * (i as f32 * 0.031).sin() + 0.05 * (i as f32 * 0.7).cos()).collect();
    Waveform::new(samples, 44_100).unwrap()
}

fn model(mixer: bool) -> ModelGraph {
    let mut m = if mixer { build_conv_mixer(48, 48, 3, 1) } else { build_conv_sep(48, 48, 3) }.unwrap();
    m.init_weights(1);
    m
}

fn frontend(c: &mut Criterion) {
    let w = one_second();
    let cfg = FrontendConfig::default();
    c.bench_function("log_mel_1s", |b| b.iter(|| log_mel(black_box(&w), &cfg).unwrap()));
}

fn forward(c: &mut Criterion) {
    let data = synth_dataset_total(8, 1);
    let inputs: Vec<&Spectrogram> = data.iter().map(|e| &e.spectrogram).collect();
    for (name, mixer) in [("conv_sep_48", false), ("conv_mixer_48", true)] {
        let m = model(mixer);
        c.bench_function(&format!("forward_{name}_x8"), |b| b.iter(|| m.predict_batch(black_box(&inputs)).unwrap()));
        let qm = quantize_model(&m, &inputs).unwrap();
        c.bench_function(&format!("quantized_forward_{name}"), |b| {
            b.iter(|| quantized_forward(&qm, black_box(inputs[0])).unwrap())
        });
    }
}

fn counting(c: &mut Criterion) {
    let m = model(false);
    let conv = CountingConvention::default();
    c.bench_function("audit_conv_sep_48", |b| b.iter(|| audit(black_box(&m), &conv, &Budget::default()).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = frontend, forward, counting
}
criterion_main!(benches);
