use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stylebook_bench::random_frames;
use stylebook_core::attention::{mha_forward, MultiHeadAttention};
use stylebook_core::ParamStore;

fn mha(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let layer = MultiHeadAttention::new(&mut store, "bench", [256, 256, 256], 256, 2, 64, &mut rng);
    let queries = random_frames(128, 256, 1);
    let mut group = c.benchmark_group("mha_forward");
    for t in [100, 500, 2500] {
        let kv = random_frames(t, 256, 2);
        group.bench_with_input(BenchmarkId::from_parameter(t), &kv, |b, kv| {
            b.iter(|| mha_forward(&store, &layer, black_box(&queries), black_box(kv), black_box(kv)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mha);
criterion_main!(benches);
