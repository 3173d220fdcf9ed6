use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mnat::data::MASK;
use mnat::decoding::mask_predict;
use mnat::model::Mode;
use mnat_bench::{desk_model, random_tensor, sentences};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_tensor(vec![n, n], 1);
        let b = random_tensor(vec![n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let x = random_tensor(vec![256, 1024], 3);
    c.bench_function("softmax 256x1024", |b| b.iter(|| x.softmax(1).unwrap()));
}

fn decode_step(c: &mut Criterion) {
    let model = desk_model(1000);
    let sources = sentences(16, 20, 1000, 4);
    let refs: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let enc = model.encode(&refs, &mut Mode::Eval).unwrap();
    let masked = vec![vec![MASK; 20]; 16];
    let inputs: Vec<&[u32]> = masked.iter().map(Vec::as_slice).collect();
    c.bench_function("decoder pass 16x20", |b| {
        b.iter(|| model.decode(&inputs, &enc, None, &mut Mode::Eval).unwrap())
    });
    c.bench_function("mask-predict T=4 B=3 16 sentences", |b| {
        b.iter(|| mask_predict(&model, &refs, 4, 3).unwrap())
    });
}

criterion_group!(benches, matmul, softmax, decode_step);
criterion_main!(benches);
