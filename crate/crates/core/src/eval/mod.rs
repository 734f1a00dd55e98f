//! Metrics, the few-shot protocol, channel importance, significance tests
//! and group-level analyses.

pub mod metrics;
pub mod stats;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::channelize_record;
use crate::embed::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::ingest::{RawUserRecord, TimeWindow};
use crate::model::{forward, predict_class, predict_proba, AttentionVariant, ModelParams};
use crate::par;
use crate::schema::{ChannelSchema, ChannelizedUser, LabeledDataset, Vocabulary};
use crate::train::{fit, split_indices, TrainConfig};

pub use metrics::{confusion_matrix, mean_std, Metrics, RunSummary};
pub use stats::{agreement_rate, pearson_corr, two_sample_t_test, TTest};

/// Predicted class for every user, in order.
pub fn predict_classes(params: &ModelParams, users: &[ChannelizedUser], variant: AttentionVariant) -> Result<Vec<usize>> {
    par::map(users, |u| predict_class(u, params, variant)).into_iter().collect()
}

/// Metrics on the users at `indices`.
pub fn evaluate_subset(params: &ModelParams, data: &LabeledDataset, indices: &[usize], variant: AttentionVariant) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::Validation("evaluation on an empty dataset".into()));
    }
    let preds: Vec<Result<(usize, usize)>> = par::map(indices, |&i| {
        let u = &data.users[i];
        let truth = u
            .label
            .ok_or_else(|| Error::Validation(format!("user {} is unlabeled", u.user_id)))?;
        Ok((truth, predict_class(u, params, variant)?))
    });
    let (mut truth, mut pred) = (Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len()));
    for r in preds {
        let (t, p) = r?;
        truth.push(t);
        pred.push(p);
    }
    Metrics::from_predictions(&truth, &pred, params.num_classes)
}

pub fn evaluate(params: &ModelParams, data: &LabeledDataset, variant: AttentionVariant) -> Result<Metrics> {
    params.validate(&data.schema, &data.vocab_sizes)?;
    if params.num_classes != data.num_classes {
        return Err(Error::Dimension(format!(
            "model has {} classes, dataset {}",
            params.num_classes, data.num_classes
        )));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_subset(params, data, &all, variant)
}

/// `count` seeds derived from `master`.
pub fn derive_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Choose `shots` of `pool` with class counts as equal as possible, keeping
/// `pool` order. `pool` is assumed already shuffled.
pub fn balanced_subsample(data: &LabeledDataset, pool: &[usize], shots: usize) -> Result<Vec<usize>> {
    if shots > pool.len() {
        return Err(Error::Validation(format!(
            "{shots} shots requested, training split has {}",
            pool.len()
        )));
    }
    let k = data.num_classes;
    let mut available = vec![0usize; k];
    for &i in pool {
        let l = data.users[i]
            .label
            .ok_or_else(|| Error::Validation(format!("user {} is unlabeled", data.users[i].user_id)))?;
        available[l.min(k - 1)] += 1;
    }
    let mut quota = vec![0usize; k];
    let mut remaining = shots;
    while remaining > 0 {
        let open: Vec<usize> = (0..k).filter(|&c| quota[c] < available[c]).collect();
        let share = (remaining / open.len()).max(1);
        for &c in &open {
            if remaining == 0 {
                break;
            }
            let add = share.min(available[c] - quota[c]).min(remaining);
            quota[c] += add;
            remaining -= add;
        }
    }
    let mut taken = vec![0usize; k];
    let mut out = Vec::with_capacity(shots);
    for &i in pool {
        let l = data.users[i].label.unwrap_or_default().min(k - 1);
        if taken[l] < quota[l] {
            taken[l] += 1;
            out.push(i);
        }
    }
    Ok(out)
}

/// One few-shot run: split, subsample `shots` class-balanced training
/// users, train, evaluate on the test split.
pub fn few_shot_run(data: &LabeledDataset, shots: usize, config: &TrainConfig, init: Option<ModelParams>) -> Result<Metrics> {
    let split = split_indices(data.len(), config.val_fraction, config.test_fraction, config.seed);
    let train_idx = balanced_subsample(data, &split.train, shots)?;
    let out = fit(data, &train_idx, &split.val, config, init)?;
    evaluate_subset(&out.params, data, &split.test, config.variant)
}

/// `runs` independent few-shot runs with seeds derived from `config.seed`.
pub fn few_shot_protocol(
    data: &LabeledDataset,
    shots: usize,
    runs: usize,
    config: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<RunSummary> {
    if runs == 0 {
        return Err(Error::Validation("few-shot protocol needs at least one run".into()));
    }
    let seeds = derive_seeds(config.seed, runs);
    let results = par::map(&seeds, |&seed| {
        let cfg = TrainConfig { seed, ..config.clone() };
        few_shot_run(data, shots, &cfg, init.cloned())
    });
    RunSummary::new(results.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDrop {
    pub channel: String,
    /// Accuracy with the channel removed.
    pub accuracy: f64,
    /// Baseline minus ablated accuracy, in percentage points.
    pub drop: f64,
    /// The channel was empty for every user, so no retraining was done.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub baseline: f64,
    pub channels: Vec<ChannelDrop>,
}

impl ChannelImportance {
    /// Channel ids ordered by decreasing drop; ties keep schema order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.channels.len()).collect();
        ids.sort_by(|&a, &b| self.channels[b].drop.total_cmp(&self.channels[a].drop));
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,accuracy,drop\n");
        for c in &self.channels {
            s.push_str(&format!("{},{},{}\n", c.channel, c.accuracy, c.drop));
        }
        s
    }
}

fn test_accuracy(data: &LabeledDataset, config: &TrainConfig) -> Result<f64> {
    let split = split_indices(data.len(), config.val_fraction, config.test_fraction, config.seed);
    let eval_idx = if split.test.is_empty() { &split.val } else { &split.test };
    let out = fit(data, &split.train, &split.val, config, None)?;
    Ok(evaluate_subset(&out.params, data, eval_idx, config.variant)?.accuracy)
}

/// Retrain with each channel emptied in every user and report the accuracy
/// drop against the full model.
pub fn channel_importance(data: &LabeledDataset, config: &TrainConfig) -> Result<ChannelImportance> {
    let baseline = test_accuracy(data, config)?;
    let ids: Vec<usize> = (0..data.schema.len()).collect();
    let drops = par::map(&ids, |&r| -> Result<ChannelDrop> {
        let name = data.schema.channel(r).name.clone();
        if data.users.iter().all(|u| u.channels[r].is_empty()) {
            return Ok(ChannelDrop {
                channel: name,
                accuracy: baseline,
                drop: 0.0,
                skipped: true,
            });
        }
        let mut ablated = data.clone();
        ablated.users.iter_mut().for_each(|u| u.channels[r].clear());
        let accuracy = test_accuracy(&ablated, config)?;
        Ok(ChannelDrop {
            channel: name,
            accuracy,
            drop: 100.0 * (baseline - accuracy),
            skipped: false,
        })
    });
    Ok(ChannelImportance {
        baseline,
        channels: drops.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLeaning {
    pub mean_leaning: f64,
    pub n: usize,
}

/// Mean predicted probability of `class` per group; empty groups are
/// skipped with a warning.
pub fn group_leaning(
    params: &ModelParams,
    groups: &BTreeMap<String, Vec<ChannelizedUser>>,
    variant: AttentionVariant,
    class: usize,
) -> Result<BTreeMap<String, GroupLeaning>> {
    if class >= params.num_classes {
        return Err(Error::Validation(format!("class {class} outside 0..{}", params.num_classes)));
    }
    let mut out = BTreeMap::new();
    for (name, users) in groups {
        if users.is_empty() {
            log::warn!("group {name:?} has no users, excluded");
            continue;
        }
        let probs = par::map(users, |u| predict_proba(u, params, variant).map(|p| p[class]));
        let mut sum = 0.0;
        for p in probs {
            sum += p?;
        }
        out.insert(
            name.clone(),
            GroupLeaning {
                mean_leaning: sum / users.len() as f64,
                n: users.len(),
            },
        );
    }
    Ok(out)
}

pub fn group_leaning_csv(groups: &BTreeMap<String, GroupLeaning>) -> String {
    let mut s = String::from("group,mean_leaning,n\n");
    for (g, l) in groups {
        s.push_str(&format!("{g},{},{}\n", l.mean_leaning, l.n));
    }
    s
}

/// Partition users by the value of attribute `field`; users without it are
/// left out.
pub fn group_by_attr(users: &[ChannelizedUser], field: &str) -> BTreeMap<String, Vec<ChannelizedUser>> {
    let mut out: BTreeMap<String, Vec<ChannelizedUser>> = BTreeMap::new();
    for u in users {
        if let Some(v) = u.attrs.get(field) {
            out.entry(v.clone()).or_default().push(u.clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    /// Total wall-clock seconds of each repeat.
    pub repeat_seconds: Vec<f64>,
    pub users: usize,
    pub seconds_per_user: f64,
}

/// Time channelization plus the forward pass over `records`, `repeats` times.
#[allow(clippy::too_many_arguments)]
pub fn time_inference(
    schema: &ChannelSchema,
    params: &ModelParams,
    variant: AttentionVariant,
    records: &[RawUserRecord],
    window: &TimeWindow,
    vocab: &Vocabulary,
    provider: &dyn EmbeddingProvider,
    repeats: usize,
) -> Result<InferenceTiming> {
    if records.is_empty() || repeats == 0 {
        return Err(Error::Validation("timing needs users and at least one repeat".into()));
    }
    let mut repeat_seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for rec in records {
            let u = channelize_record(schema, rec, window, vocab, provider)?;
            std::hint::black_box(forward(&u, params, variant)?);
        }
        repeat_seconds.push(start.elapsed().as_secs_f64());
    }
    let mean = repeat_seconds.iter().sum::<f64>() / repeats as f64;
    Ok(InferenceTiming {
        users: records.len(),
        seconds_per_user: mean / records.len() as f64,
        repeat_seconds,
    })
}
