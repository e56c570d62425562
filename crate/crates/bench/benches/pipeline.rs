use criterion::{black_box, criterion_group, criterion_main, Criterion};

use massweights::fixtures::{planted_model, toy_config, Plant};
use massweights::model::forward;
use massweights::probe::find_massive_weights;
use massweights::train::{macdrop_step, rng_stream, streams, MacDropState};

fn bench_pipeline(c: &mut Criterion) {
    let config = toy_config(257, 64, 172, 4, 4);
    let mut params = planted_model::<f32>(&config, 0, &Plant::new(2, vec![3, 17, 40, 99, 150])).unwrap();
    let ids: Vec<u32> = (0..64u32).map(|i| (i * 37 + 11) % 256).collect();

    c.bench_function("forward_64_tokens", |b| {
        b.iter(|| forward(&config, &params, black_box(&ids)).unwrap())
    });
    c.bench_function("detect_k5", |b| {
        b.iter(|| find_massive_weights(&config, &params, 5).unwrap())
    });

    let report = find_massive_weights(&config, &params, 5).unwrap();
    let mut state = MacDropState::new(&config, &params, &report, 5).unwrap();
    let mut rng = rng_stream(0, streams::MASK);
    c.bench_function("macdrop_mask_and_rollback", |b| {
        b.iter(|| macdrop_step(&mut params, &mut state, 0.5, &mut rng, |_| Ok(0.0)).unwrap())
    });
}

criterion_group!(benches, bench_pipeline);
criterion_main!(benches);
