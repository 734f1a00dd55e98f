//! Batch gradients and evaluation, run on the global pool and on a single
//! thread. Build with `--no-default-features` for the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fsspip::eval::evaluate;
use fsspip::model::init_params;
use fsspip::simgen::{sample_population, Activity, DenseChannelSpec, GenerativeSpec, SparseChannelSpec};
use fsspip::train::{gradients, Example, Target};
use fsspip::AttentionVariant;

fn spec() -> GenerativeSpec {
    let theta = |v: usize| -> Vec<Vec<f64>> {
        (0..2)
            .map(|c| {
                let w: Vec<f64> = (0..v).map(|i| if i % 2 == c { 1.4 } else { 0.6 }).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect()
    };
    let sparse = |ch: &str, v, rate| SparseChannelSpec {
        channel: ch.into(),
        activity: Activity::Poisson(rate),
        theta: theta(v),
    };
    GenerativeSpec {
        prior: vec![0.5, 0.5],
        d_em: 64,
        sparse: vec![
            sparse("tweet_hashtags", 500, 20.0),
            sparse("follower_ids", 2000, 40.0),
            sparse("retweetee_ids", 300, 10.0),
        ],
        dense: vec![DenseChannelSpec {
            channel: "tweet_text".into(),
            means: vec![vec![0.1; 64], vec![-0.1; 64]],
            sigma: 1.0,
        }],
        follow_noise: 0.1,
        class_names: vec!["a".into(), "b".into()],
    }
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let mut out = vec![("1-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if cfg!(feature = "parallel") {
        out.push(("all-threads", rayon::ThreadPoolBuilder::new().build().unwrap()));
    }
    out
}

fn bench(c: &mut Criterion) {
    let (data, _) = sample_population(&spec(), 2048, 1).unwrap();
    let params = init_params(&data.schema, &data.vocab_sizes, 64, data.d_em, 2, 1).unwrap();
    let batch: Vec<Example<'_>> = data
        .users
        .iter()
        .map(|u| Example::borrowed(u, Target::Class(u.label.unwrap())))
        .collect();
    let mut group = c.benchmark_group("batch");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("gradients", name), |b| {
            b.iter(|| pool.install(|| gradients(&batch, &params, AttentionVariant::Dyattn).unwrap()))
        });
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| pool.install(|| evaluate(&params, &data, AttentionVariant::Dyattn).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
