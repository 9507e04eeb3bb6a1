use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use m2t::{decode_grid, CodecOptions, Mode};
use m2t_bench::{desk_model, grid, stream};

fn decode(c: &mut Criterion) {
    let model = desk_model();
    let g = grid(16, 16);
    let mut group = c.benchmark_group("decode_16x16");
    group.sample_size(10);
    for steps in [1, 4, 8, 12] {
        for path in [Mode::Mt, Mode::M2t] {
            let s = stream(&model, &g, path, steps);
            group.bench_with_input(BenchmarkId::new(path.to_string(), steps), &s, |b, s| {
                b.iter(|| decode_grid(s, &model, CodecOptions::new(path)).unwrap())
            });
        }
    }
    group.finish();
}

fn encode(c: &mut Criterion) {
    let model = desk_model();
    let g = grid(16, 16);
    let mut group = c.benchmark_group("encode_16x16");
    group.sample_size(10);
    for path in [Mode::Mt, Mode::M2t] {
        group.bench_function(path.to_string(), |b| b.iter(|| stream(&model, &g, path, 12)));
    }
    group.finish();
}

criterion_group!(benches, decode, encode);
criterion_main!(benches);
