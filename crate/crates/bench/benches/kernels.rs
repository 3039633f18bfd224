use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixttt_bench::{desk_data, desk_network};
use mixttt_core::aux_tasks::{rotation_expand, AuxCrossEntropy};
use mixttt_core::engine::{ttt_episode, EpisodeConfig, EpisodeResources};
use mixttt_core::mixup::build_mixed_batch;
use mixttt_core::{AuxTaskSpec, Mode, ParamSubset, TrainPartnerPool};

fn forward_backward(c: &mut Criterion) {
    let state = desk_network(0);
    let (_, test) = desk_data(0);
    let batch = test.images.select_rows(&(0..32).collect::<Vec<_>>());
    c.bench_function("forward_32", |b| {
        b.iter(|| state.forward(&batch, Mode::Eval).unwrap())
    });
    let rot = rotation_expand(&batch.select_rows(&(0..8).collect::<Vec<_>>())).unwrap();
    let sel = state.selector(ParamSubset::EncoderFull).unwrap();
    c.bench_function("rotation_grad_32", |b| {
        b.iter(|| {
            state
                .grad_params(
                    &AuxCrossEntropy {
                        labels: &rot.labels,
                    },
                    &rot.images,
                    Mode::Eval,
                    &sel,
                )
                .unwrap()
        })
    });
}

fn mixed_batch(c: &mut Criterion) {
    let (train, test) = desk_data(1);
    let pool = TrainPartnerPool::new(train).unwrap();
    let x = test.images.select_rows(&[0]);
    let spec = AuxTaskSpec::rotation().ratio_spec;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("build_mixed_batch_32", |b| {
        b.iter(|| build_mixed_batch(&x, &pool, &spec, 32, &mut rng).unwrap())
    });
}

fn episode(c: &mut Criterion) {
    let state = desk_network(2);
    let (train, test) = desk_data(2);
    let pool = TrainPartnerPool::new(train).unwrap();
    let res = EpisodeResources {
        pool: Some(&pool),
        feature_stats: None,
    };
    let x = test.images.select_rows(&[0]);
    let mut group = c.benchmark_group("episode");
    group.sample_size(20);
    for mix in [false, true] {
        let mut cfg = EpisodeConfig::new(AuxTaskSpec::rotation(), mix);
        cfg.steps = 1;
        cfg.partner_batch = 8;
        let name = if mix { "mixttt_step_b8" } else { "ttt_step_b8" };
        group.bench_function(name, |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| ttt_episode(&mut s, &x, &cfg, res).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, mixed_batch, episode);
criterion_main!(benches);
