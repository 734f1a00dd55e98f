//! Supervised training: losses, gradients, Adam, augmentations and the
//! minibatch loop with best-validation checkpoint selection.

pub mod adam;
pub mod augment;
pub mod config;
pub mod grad;
pub mod loss;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::evaluate_subset;
use crate::model::{init_params, ModelParams};
use crate::schema::{ChannelizedUser, LabeledDataset};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use augment::{augment_channel_dropout, augment_mixup, augment_sample, mixup_with_lambda};
pub use config::TrainConfig;
pub use grad::{batch_loss, gradients, Example, ParamGradients};
pub use loss::{classification_loss, LossValue, Target};

/// Disjoint index sets into a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`, cut into test, validation and training parts
/// (in that order) with rounded sizes.
pub fn split_indices(n: usize, val_fraction: f64, test_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n - n_test);
    let test = idx[..n_test].to_vec();
    let val = idx[n_test..n_test + n_val].to_vec();
    let train = idx[n_test + n_val..].to_vec();
    Split { train, val, test }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_f1: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_acc,val_f1,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6}",
                r.epoch,
                r.train_loss,
                opt(r.val_acc),
                opt(r.val_f1),
                r.seconds
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
}

/// Parameters to start from: `init` after validation, or a fresh seeded draw.
pub fn starting_params(data: &LabeledDataset, config: &TrainConfig, init: Option<ModelParams>) -> Result<ModelParams> {
    match init {
        Some(p) => {
            p.validate(&data.schema, &data.vocab_sizes)?;
            if p.num_classes != data.num_classes || p.d_em != data.d_em {
                return Err(Error::Dimension(format!(
                    "initial parameters have K={} d_em={}, dataset has K={} d_em={}",
                    p.num_classes, p.d_em, data.num_classes, data.d_em
                )));
            }
            Ok(p)
        }
        None => init_params(
            &data.schema,
            &data.vocab_sizes,
            config.dim,
            data.d_em,
            data.num_classes,
            config.seed,
        ),
    }
}

/// Apply feature sampling and channel dropout as enabled in `config`.
pub(crate) fn perturb<R: Rng + ?Sized>(user: &ChannelizedUser, config: &TrainConfig, rng: &mut R) -> Result<(ChannelizedUser, Vec<Vec<u32>>)> {
    let (mut u, masked) = if config.sampling {
        augment_sample(user, rng, config.sample_rate_max)?
    } else {
        (user.clone(), vec![Vec::new(); user.channels.len()])
    };
    if config.channel_dropout {
        u = augment_channel_dropout(&u, rng, config.channel_dropout_prob)?;
    }
    Ok((u, masked))
}

/// Mixed examples pairing each user with a uniformly drawn batch partner.
pub(crate) fn mixup_examples<R: Rng + ?Sized>(
    users: &[ChannelizedUser],
    num_classes: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<Example<'static>>> {
    let mut out = Vec::with_capacity(users.len());
    for u in users {
        let partner = &users[rng.random_range(0..users.len())];
        let (m, y) = augment_mixup(u, partner, num_classes, rng, alpha)?;
        out.push(Example::owned(m, Target::Soft(y)));
    }
    Ok(out)
}

pub(crate) fn require_labels(data: &LabeledDataset, idx: &[usize]) -> Result<()> {
    for &i in idx {
        let u = &data.users[i];
        match u.label {
            Some(l) if l < data.num_classes => {}
            _ => {
                return Err(Error::Validation(format!(
                    "training user {} has no valid label",
                    u.user_id
                )))
            }
        }
    }
    Ok(())
}

/// Train on `train` indices, selecting the epoch with the best accuracy on
/// `val` (the last epoch when `val` is empty).
pub fn fit(
    data: &LabeledDataset,
    train: &[usize],
    val: &[usize],
    config: &TrainConfig,
    init: Option<ModelParams>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = starting_params(data, config, init)?;
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log,
            best_epoch: 0,
        });
    }
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    require_labels(data, train)?;
    require_labels(data, val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&params);
    let mut order = train.to_vec();
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut base = Vec::with_capacity(chunk.len());
            for &i in chunk {
                base.push(perturb(&data.users[i], config, &mut rng)?.0);
            }
            let mut batch: Vec<Example<'_>> = base
                .iter()
                .map(|u| Example::borrowed(u, Target::Class(u.label.unwrap_or_default())))
                .collect();
            if config.mixup {
                batch.extend(mixup_examples(&base, data.num_classes, config.mixup_alpha, &mut rng)?);
            }
            let (loss, g) = gradients(&batch, &params, config.variant)?;
            adam_step(&mut params, &g, &mut state, config.learning_rate, &config.adam)?;
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let (val_acc, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let m = evaluate_subset(&params, data, val, config.variant)?;
            (Some(m.accuracy), Some(m.f1))
        };
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        if val.is_empty() || best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val_acc,
            val_f1,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: loss {:.5} val_acc {val_acc:?}", loss_sum / count as f64);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// Split `data` by the configured fractions and train; returns the outcome
/// and the split used.
pub fn train(data: &LabeledDataset, config: &TrainConfig, init: Option<ModelParams>) -> Result<(TrainOutcome, Split)> {
    config.validate()?;
    let split = split_indices(data.len(), config.val_fraction, config.test_fraction, config.seed);
    let out = fit(data, &split.train, &split.val, config, init)?;
    Ok((out, split))
}
