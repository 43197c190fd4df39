use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, Criterion};
use fdtr_bench::{cost_matrix, random};
use fdtr_core::kernels::{gemm_nn, LevelLayout};
use fdtr_core::matching::hungarian_match;
use fdtr_core::{Tape, Tensor};

fn gemm(c: &mut Criterion) {
    let a = random(&[128, 128], 1);
    let b = random(&[128, 128], 2);
    let mut out = vec![0.0; 128 * 128];
    c.bench_function("gemm_128", |bch| {
        bch.iter(|| {
            out.iter_mut().for_each(|v| *v = 0.0);
            gemm_nn(a.data(), b.data(), &mut out, 128, 128, 128);
            black_box(&out);
        })
    });
}

fn deformable(c: &mut Criterion) {
    let layout = Rc::new(LevelLayout::new(vec![(16, 16), (8, 8), (4, 4)]));
    let tokens = 16 * 16 + 8 * 8 + 4 * 4;
    let (q, heads, levels, points, dim) = (30, 4, 3, 4, 64);
    let value = random(&[tokens, dim], 3);
    let locs = Tensor::uniform(&[q, heads, levels, points, 2], 0.0, 1.0, &mut fdtr_bench::rng(4));
    let weights = Tensor::full(&[q, heads, levels, points], 1.0 / (levels * points) as f64);
    c.bench_function("ms_deform_attn_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let v = tape.leaf(value.clone(), true);
            let l = tape.leaf(locs.clone(), true);
            let w = tape.leaf(weights.clone(), true);
            let out = tape.ms_deform_attn(v, layout.clone(), l, w, heads, points).unwrap();
            let s = tape.sum(out);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn hungarian(c: &mut Criterion) {
    let cost = cost_matrix(100, 20, 5);
    c.bench_function("hungarian_100x20", |b| b.iter(|| black_box(hungarian_match(&cost).unwrap())));
}

criterion_group!(benches, gemm, deformable, hungarian);
criterion_main!(benches);
