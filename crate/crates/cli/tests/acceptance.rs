//! One PASS/FAIL line per acceptance criterion. Criteria run in order and a
//! failure in one does not stop the others.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fsspip::eval::{channel_importance, evaluate, few_shot_protocol, pearson_corr, two_sample_t_test, Metrics};
use fsspip::model::{channel_embedding, forward, init_params, user_embedding, AttentionVariant, ModelParams};
use fsspip::pretrain::{build_silver_labels, pretrain, selfsup_loss, HeadsConfig, SelfSupHeads};
use fsspip::schema::{ChannelData, ChannelKind, ChannelSchema, ChannelizedUser, Feature, LabeledDataset, Source};
use fsspip::simgen::{
    bayes_oracle_accuracy, sample_population, Activity, DenseChannelSpec, GenerativeSpec, SparseChannelSpec,
};
use fsspip::train::{
    augment_channel_dropout, augment_mixup, augment_sample, batch_loss, gradients, mixup_with_lambda, train, Example,
    Target, TrainConfig,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Small random models

const VLEN: usize = 10;
const D_EM: usize = 3;

fn small_schema() -> ChannelSchema {
    ChannelSchema::from_channels(&[
        (Source::Tweet, Feature::Text),
        (Source::Tweet, Feature::Hashtags),
        (Source::Profile, Feature::FollowerIds),
    ])
    .unwrap()
}

fn sizes(schema: &ChannelSchema) -> Vec<usize> {
    schema
        .channels()
        .iter()
        .map(|c| if c.kind == ChannelKind::Sparse { VLEN } else { 0 })
        .collect()
}

fn random_params(schema: &ChannelSchema, k: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = init_params(schema, &sizes(schema), 4, D_EM, k, rng.random()).unwrap();
    p.rho_p = rng.random_range(-1.5..1.5);
    p.rho_q = rng.random_range(-1.5..1.5);
    p.rho_k = rng.random_range(-1.5..1.5);
    p.fixed_logits.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p.bias.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    p
}

fn random_user(schema: &ChannelSchema, id: usize, rng: &mut ChaCha8Rng) -> ChannelizedUser {
    let mut u = ChannelizedUser::empty(schema, format!("u{id}"), D_EM);
    for (desc, data) in schema.channels().iter().zip(u.channels.iter_mut()) {
        *data = match desc.kind {
            ChannelKind::Sparse => ChannelData::Sparse((0..VLEN as u32).filter(|_| rng.random_bool(0.3)).collect()),
            ChannelKind::Dense => ChannelData::Dense((0..D_EM).map(|_| rng.random_range(-1.0..1.0)).collect()),
        };
    }
    u
}

fn set_flat(p: &mut ModelParams, mut index: usize, value: f64) {
    for s in p.slices_mut() {
        if index < s.len() {
            s[index] = value;
            return;
        }
        index -= s.len();
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Synthetic populations

fn tilted(v: usize, s: f64) -> Vec<Vec<f64>> {
    (0..2)
        .map(|c| {
            let w: Vec<f64> = (0..v).map(|i| if i % 2 == c { 1.0 + s } else { 1.0 - s }).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

/// Four class-dependent sparse channels plus a weakly informative text channel.
fn headline_spec() -> GenerativeSpec {
    let sparse = |ch: &str, v, rate| SparseChannelSpec {
        channel: ch.into(),
        activity: Activity::Poisson(rate),
        theta: tilted(v, 0.4),
    };
    let mean = |sign: f64| (0..16).map(|i| if i < 4 { sign * 0.2 } else { 0.0 }).collect();
    GenerativeSpec {
        prior: vec![0.5, 0.5],
        d_em: 16,
        sparse: vec![
            sparse("tweet_hashtags", 30, 4.0),
            sparse("retweetee_ids", 20, 3.0),
            sparse("follower_ids", 40, 5.0),
            sparse("tweet_domains", 16, 2.0),
        ],
        dense: vec![DenseChannelSpec {
            channel: "tweet_text".into(),
            means: vec![mean(1.0), mean(-1.0)],
            sigma: 1.0,
        }],
        follow_noise: 0.1,
        class_names: vec!["left".into(), "right".into()],
    }
}

/// Silver-labeled training set: `per_list` followers and retweeters per party.
fn silver_set(spec: &GenerativeSpec, pool: usize, per_list: usize, seed: u64) -> LabeledDataset {
    let (data, anchors) = sample_population(spec, pool, 100 + seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_silver_labels(&anchors, pool, per_list, &mut rng).unwrap().apply(&data).unwrap()
}

fn silver_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: 0.001,
        epochs,
        dim: 16,
        test_fraction: 0.0,
        ..TrainConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// Criteria

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let schema = small_schema();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for variant in AttentionVariant::ALL {
        for k in [2, 3] {
            for instance in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * k as u64 + instance);
                let mut params = random_params(&schema, k, &mut rng);
                let users: Vec<ChannelizedUser> = (0..4)
                    .map(|i| {
                        let mut u = random_user(&schema, i, &mut rng);
                        u.label = Some(rng.random_range(0..k));
                        u
                    })
                    .collect();
                let mut batch: Vec<Example<'_>> = users[..2]
                    .iter()
                    .map(|u| Example::borrowed(u, Target::Class(u.label.unwrap())))
                    .collect();
                for pair in [(1, 2), (3, 0)] {
                    let (m, y) = augment_mixup(&users[pair.0], &users[pair.1], k, &mut rng, 0.5).unwrap();
                    batch.push(Example::owned(m, Target::Soft(y)));
                }
                let (_, g) = gradients(&batch, &params, variant).unwrap();
                let analytic = g.flat();
                let base: Vec<f64> = params.slices().concat();
                for (i, &x) in base.iter().enumerate() {
                    set_flat(&mut params, i, x + 1e-4);
                    let up = batch_loss(&batch, &params, variant).unwrap();
                    set_flat(&mut params, i, x - 1e-4);
                    let down = batch_loss(&batch, &params, variant).unwrap();
                    set_flat(&mut params, i, x);
                    let numeric = (up - down) / 2e-4;
                    let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
                    worst = worst.max(err);
                }
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && secs < 120.0,
        format!("{cases} instances, max relative error {worst:.2e} (≤ 1e-4), {secs:.1}s (< 120s)"),
    )
}

fn reduction_identities() -> Outcome {
    let schema = small_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut worst_auto: f64 = 0.0;
    for _ in 0..100 {
        let mut p = random_params(&schema, 2, &mut rng);
        let u = random_user(&schema, 0, &mut rng);
        p.rho_p = f64::NEG_INFINITY;
        let h = user_embedding(&u, &p, AttentionVariant::Dyattn).unwrap();
        let mut sum = vec![0.0; p.d];
        let mut normalized = vec![0.0; p.d];
        for r in 0..schema.len() {
            let e = channel_embedding(&u, &p, r).unwrap();
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..p.d {
                sum[j] += e[j];
                if n >= 1e-12 {
                    normalized[j] += e[j] / n;
                }
            }
        }
        worst_sum = worst_sum.max(max_abs_diff(&h, &sum));
        let auto = user_embedding(&u, &p, AttentionVariant::Auto).unwrap();
        worst_auto = worst_auto.max(max_abs_diff(&auto, &normalized));
    }

    let single = ChannelSchema::from_channels(&[(Source::Tweet, Feature::Hashtags)]).unwrap();
    let mut p = init_params(&single, &[VLEN], 4, D_EM, 2, 5).unwrap();
    p.rho_p = f64::INFINITY;
    let mut u = ChannelizedUser::empty(&single, "s", D_EM);
    u.channels[0] = ChannelData::Sparse(vec![1, 4, 7]);
    let single_weight = forward(&u, &p, AttentionVariant::Dyattn).unwrap().weights[0];

    let p = random_params(&schema, 2, &mut rng);
    let reference = forward(&random_user(&schema, 0, &mut rng), &p, AttentionVariant::Fixedattn).unwrap().weights;
    let mut fixed_same = true;
    for i in 0..100 {
        let w = forward(&random_user(&schema, i, &mut rng), &p, AttentionVariant::Fixedattn).unwrap().weights;
        fixed_same &= w == reference;
    }
    let fixed_sum = reference.iter().sum::<f64>();
    check(
        worst_sum < 1e-9 && single_weight == 1.0 && worst_auto < 1e-9 && fixed_same && (fixed_sum - 1.0).abs() < 1e-12,
        format!(
            "p=0 vs channel sum {worst_sum:.1e}; single-channel p=1 weight {single_weight}; auto vs normalized sum {worst_auto:.1e}; fixed weights sum {fixed_sum:.15}, identical across 100 users: {fixed_same}"
        ),
    )
}

fn softmax_normalization() -> Outcome {
    let schema = ChannelSchema::default_schema();
    let sizes: Vec<usize> = schema
        .channels()
        .iter()
        .map(|c| if c.kind == ChannelKind::Sparse { VLEN } else { 0 })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = init_params(&schema, &sizes, 8, D_EM, 2, 3).unwrap();
    p.rho_q = 1.0;
    p.rho_k = -0.5;
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let u = random_user(&schema, i, &mut rng);
        let s: f64 = forward(&u, &p, AttentionVariant::Dyattn).unwrap().softmax.iter().sum();
        worst = worst.max((s - 1.0).abs());
    }
    check(worst < 1e-9, format!("1000 users over 22 channels, max |Σ softmax − 1| = {worst:.1e}"))
}

fn augmentation_statistics() -> Outcome {
    const DRAWS: usize = 10_000;
    let schema = ChannelSchema::default_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features = 20usize;

    let mut one = ChannelizedUser::empty(&schema, "one", D_EM);
    one.channels[2] = ChannelData::Sparse((0..features as u32).collect());
    let mut masked = 0usize;
    for _ in 0..DRAWS {
        masked += augment_sample(&one, &mut rng, 0.15).unwrap().1[2].len();
    }
    let rate = masked as f64 / (DRAWS * features) as f64;
    // m ~ U(0, 0.15), each feature Bernoulli(m): Var(fraction) = Var(m) + E[m(1−m)]/n.
    let var_m = 0.15f64.powi(2) / 12.0;
    let e_m2 = var_m + 0.075f64.powi(2);
    let sd_rate = ((var_m + (0.075 - e_m2) / features as f64) / DRAWS as f64).sqrt();
    let sampling_ok = (rate - 0.075).abs() <= 3.0 * sd_rate;

    let mut full = ChannelizedUser::empty(&schema, "full", D_EM);
    for (desc, data) in schema.channels().iter().zip(full.channels.iter_mut()) {
        *data = match desc.kind {
            ChannelKind::Sparse => ChannelData::Sparse(vec![0, 1]),
            ChannelKind::Dense => ChannelData::Dense(vec![1.0; D_EM]),
        };
    }
    let mut dropped = 0usize;
    for _ in 0..DRAWS {
        let u = augment_channel_dropout(&full, &mut rng, 0.1).unwrap();
        dropped += u.channels.iter().filter(|c| c.is_empty()).count();
    }
    let drop_mean = dropped as f64 / DRAWS as f64;
    let sd_drop = (22.0 * 0.1 * 0.9 / DRAWS as f64).sqrt();
    let dropout_ok = (drop_mean - 2.2).abs() <= 3.0 * sd_drop;

    // u1 holds A ∪ C, u2 holds B ∪ C with |A|=12, |B|=6, |C|=4.
    let lambda = 0.3;
    let mut u1 = ChannelizedUser::empty(&schema, "a", D_EM);
    let mut u2 = ChannelizedUser::empty(&schema, "b", D_EM);
    u1.label = Some(0);
    u2.label = Some(1);
    u1.channels[2] = ChannelData::Sparse((0..16).collect());
    u2.channels[2] = ChannelData::Sparse((12..22).collect());
    let (na, nb, nc) = (12.0, 6.0, 4.0);
    let shared = 1.0 - (1.0 - lambda) * lambda;
    let expected = lambda * na + (1.0 - lambda) * nb + shared * nc;
    let var = na * lambda * (1.0 - lambda) + nb * lambda * (1.0 - lambda) + nc * shared * (1.0 - shared);
    let mut total = 0usize;
    for _ in 0..DRAWS {
        let (m, _) = mixup_with_lambda(&u1, &u2, 2, lambda, &mut rng).unwrap();
        total += m.channels[2].sparse().unwrap().len();
    }
    let mix_mean = total as f64 / DRAWS as f64;
    let mixup_ok = (mix_mean - expected).abs() <= 3.0 * (var / DRAWS as f64).sqrt();

    check(
        sampling_ok && dropout_ok && mixup_ok,
        format!(
            "mask rate {rate:.5} vs 0.075 ± {:.5}; dropped channels {drop_mean:.4} vs 2.2 ± {:.4}; mixup count {mix_mean:.4} vs {expected:.4} ± {:.4}",
            3.0 * sd_rate,
            3.0 * sd_drop,
            3.0 * (var / DRAWS as f64).sqrt()
        ),
    )
}

fn selfsup_uniform_logits() -> Outcome {
    let schema = ChannelSchema::default_schema();
    let sizes: Vec<usize> = schema
        .channels()
        .iter()
        .enumerate()
        .map(|(i, c)| if c.kind == ChannelKind::Sparse { 5 + 7 * i } else { 0 })
        .collect();
    let p = init_params(&schema, &sizes, 6, D_EM, 2, 6).unwrap();
    let mut heads = SelfSupHeads::new(&p, &HeadsConfig::default());
    heads.slices_mut().iter_mut().for_each(|s| s.iter_mut().for_each(|x| *x = 0.0));
    let masked: Vec<Vec<u32>> = sizes.iter().map(|&v| if v > 0 { vec![(v / 2) as u32] } else { vec![] }).collect();
    let h = vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
    let loss = selfsup_loss(&h, &masked, &heads).unwrap();
    let expected: f64 = sizes.iter().filter(|&&v| v > 0).map(|&v| (v as f64).ln()).sum();
    let empty = selfsup_loss(&h, &vec![vec![]; schema.len()], &heads).unwrap();
    check(
        (loss - expected).abs() < 1e-9 && empty == 0.0,
        format!("uniform-logit loss {loss:.12} vs Σ ln Vlen {expected:.12}; empty mask {empty}"),
    )
}

fn majority_metric_identity() -> Outcome {
    let truth: Vec<usize> = (0..1000).map(|i| usize::from(i < 606)).collect();
    let m = Metrics::from_predictions(&truth, &vec![1; 1000], 2).unwrap();
    let (acc, f1) = (100.0 * m.accuracy, 100.0 * m.f1);
    check(
        (acc - 60.6).abs() <= 0.1 && (f1 - 75.5).abs() <= 0.1,
        format!("accuracy {acc:.2}% (60.6), positive-class F1 {f1:.2}% (75.5)"),
    )
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let spec = headline_spec();
    let (test, _) = sample_population(&spec, 1000, 999).unwrap();
    let oracle = bayes_oracle_accuracy(&spec, &test).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let silver = silver_set(&spec, 2000, 125, seed);
        assert_eq!(silver.len(), 500);
        let config = silver_config(seed, 60);
        let (out, _) = train(&silver, &config, None).unwrap();
        accs.push(evaluate(&out.params, &test, config.variant).unwrap().accuracy);
    }
    let acc = mean(&accs);
    let secs = start.elapsed().as_secs_f64();
    check(
        (0.90..=0.97).contains(&oracle) && acc >= oracle - 0.05 && secs < 300.0,
        format!("oracle {oracle:.3} in [0.90, 0.97]; dyattn on 500 silver labels {acc:.3} ≥ {:.3} (runs {accs:?}); {secs:.1}s", oracle - 0.05),
    )
}

fn zero_shot_silver_only() -> Outcome {
    let spec = headline_spec();
    let (test, _) = sample_population(&spec, 1000, 999).unwrap();
    let mut accs = Vec::new();
    for seed in 0..5 {
        let silver = silver_set(&spec, 4000, 400, seed);
        assert!(silver.users.iter().all(|u| u.label.is_some()));
        let config = silver_config(seed, 30);
        let (out, _) = train(&silver, &config, None).unwrap();
        accs.push(evaluate(&out.params, &test, config.variant).unwrap().accuracy);
    }
    let acc = mean(&accs);
    check(acc >= 0.85, format!("silver-only accuracy {acc:.3} ≥ 0.85 (runs {accs:?})"))
}

fn few_shot_trends() -> Outcome {
    let spec = headline_spec();
    let (gold, _) = sample_population(&spec, 2000, 7).unwrap();
    let config = TrainConfig {
        learning_rate: 0.001,
        epochs: 60,
        dim: 16,
        val_fraction: 0.1,
        test_fraction: 0.5,
        ..TrainConfig::default()
    };
    let at50 = few_shot_protocol(&gold, 50, 5, &config, None).unwrap().mean_accuracy;
    let at500 = few_shot_protocol(&gold, 500, 5, &config, None).unwrap().mean_accuracy;

    let silver = silver_set(&spec, 4000, 400, 0);
    let pre_config = TrainConfig {
        learning_rate: 0.01,
        dim: 16,
        ..TrainConfig::pretraining()
    };
    let pre = pretrain(&silver, &pre_config, &HeadsConfig::default(), None).unwrap();
    let pre50 = few_shot_protocol(&gold, 50, 5, &config, Some(&pre.params)).unwrap().mean_accuracy;
    check(
        at500 >= at50 && pre50 >= at50 - 0.01,
        format!("50 shots {at50:.3}, 500 shots {at500:.3}; pretrained 50 shots {pre50:.3} (≥ {:.3})", at50 - 0.01),
    )
}

fn channel_importance_ordering() -> Outcome {
    let uniform = |v: usize| vec![vec![1.0 / v as f64; v]; 2];
    let spec = GenerativeSpec {
        prior: vec![0.5, 0.5],
        d_em: 4,
        sparse: vec![
            SparseChannelSpec {
                channel: "tweet_hashtags".into(),
                activity: Activity::Poisson(4.0),
                theta: tilted(20, 0.4),
            },
            SparseChannelSpec {
                channel: "follower_ids".into(),
                activity: Activity::Poisson(4.0),
                theta: uniform(20),
            },
            SparseChannelSpec {
                channel: "retweetee_ids".into(),
                activity: Activity::Poisson(3.0),
                theta: uniform(12),
            },
        ],
        dense: vec![DenseChannelSpec {
            channel: "tweet_text".into(),
            means: vec![vec![0.0; 4]; 2],
            sigma: 1.0,
        }],
        follow_noise: 0.0,
        class_names: vec!["a".into(), "b".into()],
    };
    let target = ChannelSchema::default_schema().by_name("tweet_hashtags").unwrap().id;
    let mut firsts = 0;
    let mut tops = Vec::new();
    for seed in 0..5 {
        let (data, _) = sample_population(&spec, 1000, 50 + seed).unwrap();
        let config = TrainConfig {
            seed,
            epochs: 10,
            learning_rate: 0.01,
            test_fraction: 0.3,
            ..TrainConfig::default()
        };
        let imp = channel_importance(&data, &config).unwrap();
        let top = imp.ranking()[0];
        firsts += usize::from(top == target);
        tops.push(imp.channels[top].channel.clone());
    }
    check(firsts >= 4, format!("informative channel ranked first in {firsts}/5 seeds ({tops:?})"))
}

fn statistics() -> Outcome {
    let a = [0.91, 0.93, 0.92, 0.95, 0.9];
    let b = [0.88, 0.9, 0.87, 0.91, 0.89];
    let same = two_sample_t_test(&a, &a).unwrap();
    let ab = two_sample_t_test(&a, &b).unwrap();
    let ba = two_sample_t_test(&b, &a).unwrap();
    let x = [0.3, 1.7, -2.0, 4.1, 0.0, 2.2];
    let y = [1.0, 0.5, -1.0, 3.0, 0.2, 2.5];
    let r = pearson_corr(&x, &y).unwrap();
    let xs: Vec<f64> = x.iter().map(|v| 3.5 * v - 7.0).collect();
    let affine = (pearson_corr(&xs, &y).unwrap() - r).abs();
    let reference = pearson_corr(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    check(
        same.p == 1.0 && ab.t == -ba.t && ab.p == ba.p && affine < 1e-12 && (reference - 0.8).abs() < 1e-12,
        format!(
            "identical p={}; t(A,B)={:.6} t(B,A)={:.6}; affine shift {affine:.1e}; r((1,2,3,4),(1,3,2,4))={reference:.15}",
            same.p, ab.t, ba.t
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fsspip"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut spec = headline_spec();
    spec.d_em = 8;
    for m in &mut spec.dense[0].means {
        m.truncate(8);
    }
    std::fs::write(d.join("spec.json"), spec.to_json().unwrap()).unwrap();
    std::fs::write(d.join("train.cfg"), "epochs = 5\nlearning_rate = 0.01\ndim = 8\nseed = 11\n").unwrap();
    let steps: [&[&str]; 6] = [
        &["simulate", "--spec", "spec.json", "--n", "1500", "--seed", "3", "--out", "pool.jsonl", "--anchors", "anchors.jsonl"],
        &["silver", "--anchors", "anchors.jsonl", "--pool", "1500", "--sample", "100", "--seed", "4", "--data", "pool.jsonl", "--out", "silver.jsonl"],
        &["train", "--data", "silver.jsonl", "--config", "train.cfg", "--out", "model.json"],
        &["eval", "--ckpt", "model.json", "--data", "pool.jsonl", "--report", "eval.json", "--confusion", "cm.csv"],
        &["fewshot", "--data", "pool.jsonl", "--shots", "20,60", "--runs", "2", "--config", "train.cfg", "--report", "fewshot.csv"],
        &["oracle", "--spec", "spec.json", "--data", "pool.jsonl", "--report", "oracle.json"],
    ];
    for s in steps {
        run_cli(d, s).map_err(|e| format!("pipeline step failed: {e}"))?;
    }
    let primaries = ["pool.jsonl", "silver.jsonl", "model.json", "eval.json", "fewshot.csv", "oracle.json"];
    let reports = [
        "pool.jsonl",
        "anchors.jsonl",
        "silver.jsonl",
        "model.json",
        "eval.json",
        "cm.csv",
        "fewshot.csv",
        "fewshot.csv.summary.csv",
        "oracle.json",
    ];
    let before: Vec<Vec<u8>> = reports.iter().map(|r| std::fs::read(d.join(r)).unwrap()).collect();
    let other = tempfile::tempdir().map_err(|e| e.to_string())?;
    for p in primaries {
        let manifest = d.join(format!("{p}.manifest.json"));
        run_cli(other.path(), &["replay", "--manifest", manifest.to_str().unwrap()])?;
    }
    let changed: Vec<&str> = reports
        .iter()
        .zip(&before)
        .filter(|(r, b)| std::fs::read(d.join(r)).unwrap() != **b)
        .map(|(r, _)| *r)
        .collect();
    check(
        changed.is_empty(),
        format!("{} artifacts from 6 commands replayed from manifests; changed: {changed:?}", reports.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradient_correctness),
        ("reduction identities", reduction_identities),
        ("softmax normalization", softmax_normalization),
        ("augmentation statistics", augmentation_statistics),
        ("self-supervision loss", selfsup_uniform_logits),
        ("majority metric identity", majority_metric_identity),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("zero-shot silver training", zero_shot_silver_only),
        ("few-shot trends", few_shot_trends),
        ("channel importance ordering", channel_importance_ordering),
        ("statistics", statistics),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(detail) => {
                println!("FAIL {:>2} {name} [{secs:.1}s]: {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
