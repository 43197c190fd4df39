use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fdtr_bench::{enhanced_detector, plain_detector};
use fdtr_core::matching::{set_loss, LossWeights};
use fdtr_core::Tape;

fn forward(c: &mut Criterion) {
    let (_, plain, img) = plain_detector();
    c.bench_function("predict_plain", |b| b.iter(|| black_box(plain.predict(&img.image, None).unwrap())));
    let (_, enhanced, img) = enhanced_detector();
    c.bench_function("predict_enhanced_uncached", |b| {
        b.iter(|| black_box(enhanced.predict(&img.image, None).unwrap()))
    });
    let cached = enhanced.foundation_outputs(&img.image).unwrap();
    c.bench_function("predict_enhanced_cached", |b| {
        b.iter(|| black_box(enhanced.predict(&img.image, Some(&cached)).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let (_, det, img) = enhanced_detector();
    let cached = det.foundation_outputs(&img.image).unwrap();
    c.bench_function("forward_loss_backward_enhanced", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let out = det.forward(&mut tape, &img.image, Some(&cached), false).unwrap();
            let layers: Vec<_> = out.layers.iter().map(|l| (l.logits, l.boxes)).collect();
            let (loss, _) = set_loss(&mut tape, &layers, &img.gt, &LossWeights::default()).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
