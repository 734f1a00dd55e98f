//! Silver labels from party anchor lists, and pretraining with mixup plus
//! masked-feature self-supervision.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, AttentionVariant, ChannelWeights, ModelParams};
use crate::par;
use crate::schema::{ChannelizedUser, LabeledDataset, Provenance};
use crate::tensor::{axpy, log_sum_exp, softmax, Matrix};
use crate::train::config::take;
use crate::train::grad::{backprop_hidden, gradients, Example, ParamGradients};
use crate::train::{adam_step, adam_update, mixup_examples, perturb, starting_params, AdamState, TrainConfig};

pub const DEFAULT_POOL_SIZE: usize = 75_000;
pub const DEFAULT_SAMPLE_PER_PARTY: usize = 2_500;

/// Follower and retweeter lists of one party's anchor accounts, most recent
/// first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyAnchor {
    pub party: String,
    #[serde(default)]
    pub follower_ids: Vec<String>,
    #[serde(default)]
    pub retweeter_ids: Vec<String>,
}

pub fn read_anchors<R: BufRead>(r: R) -> Result<Vec<PartyAnchor>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_anchors(path: &Path) -> Result<Vec<PartyAnchor>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_anchors(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorSource {
    Follower,
    Retweeter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverLabel {
    pub user_id: String,
    pub label: usize,
    pub party: String,
    pub source: AnchorSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyCount {
    pub party: String,
    pub followers: usize,
    pub retweeters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilverLabels {
    pub parties: Vec<String>,
    pub labels: Vec<SilverLabel>,
    pub counts: Vec<PartyCount>,
}

fn pool(ids: &[String], size: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.iter()
        .take(size)
        .filter(|id| seen.insert(id.as_str()))
        .cloned()
        .collect()
}

/// Label users by party membership: pool each party's most recent followers
/// and retweeters, remove ids claimed by more than one party, then sample
/// `sample_per_party` from each list.
pub fn build_silver_labels<R: Rng + ?Sized>(
    anchors: &[PartyAnchor],
    pool_size: usize,
    sample_per_party: usize,
    rng: &mut R,
) -> Result<SilverLabels> {
    if anchors.len() < 2 {
        return Err(Error::Config(format!("need at least 2 parties, got {}", anchors.len())));
    }
    if pool_size < sample_per_party {
        return Err(Error::Config(format!(
            "pool size {pool_size} smaller than per-party sample {sample_per_party}"
        )));
    }
    let pools: Vec<(Vec<String>, Vec<String>)> = anchors
        .iter()
        .map(|a| (pool(&a.follower_ids, pool_size), pool(&a.retweeter_ids, pool_size)))
        .collect();
    let mut owners: HashMap<&str, BTreeSet<usize>> = HashMap::new();
    for (party, (f, r)) in pools.iter().enumerate() {
        for id in f.iter().chain(r) {
            owners.entry(id.as_str()).or_default().insert(party);
        }
    }
    let exclusive = |id: &String| owners[id.as_str()].len() == 1;

    let mut labels = Vec::new();
    let mut counts = Vec::new();
    for (party, ((followers, retweeters), anchor)) in pools.iter().zip(anchors).enumerate() {
        let size_err = |available| Error::Size {
            party: anchor.party.clone(),
            available,
            requested: sample_per_party,
        };
        let followers: Vec<&String> = followers.iter().filter(|id| exclusive(id)).collect();
        if followers.len() < sample_per_party {
            return Err(size_err(followers.len()));
        }
        let chosen: Vec<&String> = sample(rng, followers.len(), sample_per_party)
            .into_iter()
            .map(|i| followers[i])
            .collect();
        let taken: HashSet<&String> = chosen.iter().copied().collect();
        let retweeters: Vec<&String> = retweeters
            .iter()
            .filter(|id| exclusive(id) && !taken.contains(id))
            .collect();
        if retweeters.len() < sample_per_party {
            return Err(size_err(retweeters.len()));
        }
        let chosen_rt: Vec<&String> = sample(rng, retweeters.len(), sample_per_party)
            .into_iter()
            .map(|i| retweeters[i])
            .collect();
        for (ids, source) in [(chosen, AnchorSource::Follower), (chosen_rt, AnchorSource::Retweeter)] {
            for id in ids {
                labels.push(SilverLabel {
                    user_id: id.clone(),
                    label: party,
                    party: anchor.party.clone(),
                    source,
                });
            }
        }
        counts.push(PartyCount {
            party: anchor.party.clone(),
            followers: sample_per_party,
            retweeters: sample_per_party,
        });
    }
    Ok(SilverLabels {
        parties: anchors.iter().map(|a| a.party.clone()).collect(),
        labels,
        counts,
    })
}

impl SilverLabels {
    pub fn label_of(&self) -> HashMap<&str, usize> {
        self.labels.iter().map(|l| (l.user_id.as_str(), l.label)).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for l in &self.labels {
            s.push_str(&serde_json::to_string(l)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// The silver-labeled subset of `pool`, in label order. Labeled ids
    /// missing from `pool` are skipped with a warning.
    pub fn apply(&self, pool: &LabeledDataset) -> Result<LabeledDataset> {
        let by_id: HashMap<&str, &ChannelizedUser> = pool.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
        let mut users = Vec::with_capacity(self.labels.len());
        let mut missing = 0usize;
        for l in &self.labels {
            match by_id.get(l.user_id.as_str()) {
                Some(u) => {
                    let mut u = (*u).clone();
                    u.label = Some(l.label);
                    users.push(u);
                }
                None => missing += 1,
            }
        }
        if missing > 0 {
            log::warn!("{missing} silver-labeled users not found in the user pool");
        }
        let mut out = pool.with_users(users);
        out.num_classes = self.parties.len().max(2);
        out.provenance = Provenance::Silver;
        out.class_names = self.parties.clone();
        out.validate()?;
        Ok(out)
    }
}

/// Shape of the per-channel prediction networks used for self-supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HeadsConfig {
    /// Hidden tanh layers before the output layer; 0 gives an affine head.
    pub depth: usize,
    /// Width of each hidden layer; 0 means the model dimension `d`.
    pub hidden: usize,
    pub seed: u64,
}

impl HeadsConfig {
    /// Consume `heads_depth`, `heads_hidden` and `heads_seed` from `entries`.
    pub fn apply_entries(mut self, entries: &mut BTreeMap<String, String>) -> Result<Self> {
        if let Some(v) = take(entries, "heads_depth")? {
            self.depth = v;
        }
        if let Some(v) = take(entries, "heads_hidden")? {
            self.hidden = v;
        }
        if let Some(v) = take(entries, "heads_seed")? {
            self.seed = v;
        }
        Ok(self)
    }
}

/// `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Feed-forward network from the user embedding to logits over one
/// channel's vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelHead {
    pub layers: Vec<Layer>,
}

impl ChannelHead {
    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, h: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![h.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weights.matvec(acts.last().expect("input present"));
            axpy(&mut z, 1.0, &layer.bias);
            if l < last {
                z.iter_mut().for_each(|x| *x = x.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.activations(h).pop().expect("at least one layer")
    }

    pub fn vocab_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }
}

/// One prediction network per sparse channel (`None` for dense channels).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSupHeads {
    pub heads: Vec<Option<ChannelHead>>,
}

impl SelfSupHeads {
    pub fn new(params: &ModelParams, config: &HeadsConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let hidden = if config.hidden == 0 { params.d } else { config.hidden };
        let heads = params
            .channels
            .iter()
            .map(|c| match c {
                ChannelWeights::Sparse(table) => {
                    let mut dims = vec![params.d];
                    dims.extend(std::iter::repeat_n(hidden, config.depth));
                    dims.push(table.rows);
                    let layers = dims
                        .windows(2)
                        .map(|w| {
                            let bound = 1.0 / (w[0] as f64).sqrt();
                            let mut m = Matrix::zeros(w[1], w[0]);
                            m.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
                            Layer {
                                weights: m,
                                bias: vec![0.0; w[1]],
                            }
                        })
                        .collect();
                    Some(ChannelHead { layers })
                }
                ChannelWeights::Dense(_) => None,
            })
            .collect();
        SelfSupHeads { heads }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for head in self.heads.iter().flatten() {
            for l in &head.layers {
                v.push(&l.weights.data);
                v.push(&l.bias);
            }
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for head in self.heads.iter_mut().flatten() {
            for l in head.layers.iter_mut() {
                v.push(&mut l.weights.data);
                v.push(&mut l.bias);
            }
        }
        v
    }

    /// Zero gradient arrays matching [`Self::slices`].
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.slices().iter().map(|s| vec![0.0; s.len()]).collect()
    }
}

fn check_mask(heads: &SelfSupHeads, masked: &[Vec<u32>]) -> Result<()> {
    if masked.len() != heads.heads.len() {
        return Err(Error::Dimension(format!(
            "{} masked sets for {} channels",
            masked.len(),
            heads.heads.len()
        )));
    }
    for (r, (m, head)) in masked.iter().zip(&heads.heads).enumerate() {
        if m.is_empty() {
            continue;
        }
        let vlen = match head {
            Some(h) => h.vocab_len(),
            None => return Err(Error::Validation(format!("mask on dense channel {r}"))),
        };
        if let Some(&bad) = m.iter().find(|&&j| j as usize >= vlen) {
            return Err(Error::Corruption(format!("masked index {bad} ≥ Vlen {vlen} in channel {r}")));
        }
    }
    Ok(())
}

/// `Σ_r Σ_{j ∈ masked_r} −log softmax(F_r(h))[j]`.
pub fn selfsup_loss(h: &[f64], masked: &[Vec<u32>], heads: &SelfSupHeads) -> Result<f64> {
    check_mask(heads, masked)?;
    let mut loss = 0.0;
    for (m, head) in masked.iter().zip(&heads.heads) {
        if let (false, Some(head)) = (m.is_empty(), head) {
            let z = head.logits(h);
            let lse = log_sum_exp(&z);
            loss += m.iter().map(|&j| lse - z[j as usize]).sum::<f64>();
        }
    }
    Ok(loss)
}

/// Self-supervision loss, its gradient with respect to `h`, and the head
/// gradients (scaled by `weight`) accumulated into `head_grads`.
pub fn selfsup_backward(
    h: &[f64],
    masked: &[Vec<u32>],
    heads: &SelfSupHeads,
    weight: f64,
    head_grads: &mut [Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    check_mask(heads, masked)?;
    let mut loss = 0.0;
    let mut dh = vec![0.0; h.len()];
    let mut slot = 0;
    for (m, head) in masked.iter().zip(&heads.heads) {
        let Some(head) = head else { continue };
        let n_layers = head.layers.len();
        if m.is_empty() {
            slot += 2 * n_layers;
            continue;
        }
        let acts = head.activations(h);
        let z = &acts[n_layers];
        let lse = log_sum_exp(z);
        loss += m.iter().map(|&j| lse - z[j as usize]).sum::<f64>();
        let mut delta: Vec<f64> = softmax(z).iter().map(|p| p * m.len() as f64 * weight).collect();
        for &j in m {
            delta[j as usize] -= weight;
        }
        for l in (0..n_layers).rev() {
            let layer = &head.layers[l];
            let input = &acts[l];
            let (gw, gb) = head_grads[slot + 2 * l..slot + 2 * l + 2].split_at_mut(1);
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(&mut gw[0][o * input.len()..(o + 1) * input.len()], d, input);
                }
            }
            axpy(&mut gb[0], 1.0, &delta);
            let mut back = layer.weights.matvec_t(&delta);
            if l > 0 {
                back.iter_mut().zip(input).for_each(|(b, a)| *b *= 1.0 - a * a);
            }
            delta = back;
        }
        // `delta` is now the gradient for h, already scaled by `weight`.
        axpy(&mut dh, 1.0, &delta);
        slot += 2 * n_layers;
    }
    Ok((loss, dh))
}

/// A user with its masked features, the unit of the self-supervised term.
#[derive(Debug, Clone)]
pub struct MaskedUser {
    pub user: ChannelizedUser,
    pub masked: Vec<Vec<u32>>,
}

/// Mean self-supervision loss over `batch` with gradients for the model and
/// the heads.
pub fn selfsup_gradients(
    batch: &[MaskedUser],
    params: &ModelParams,
    heads: &SelfSupHeads,
    variant: AttentionVariant,
) -> Result<(f64, ParamGradients, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Config("self-supervision on an empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let parts = par::map_chunks(batch, 8, |chunk| -> Result<(f64, ParamGradients, Vec<Vec<f64>>)> {
        let mut g = ParamGradients::zeros(params);
        let mut hg = heads.zero_grads();
        let mut loss = 0.0;
        for mu in chunk {
            if mu.masked.iter().all(Vec::is_empty) {
                continue;
            }
            let fwd = forward(&mu.user, params, variant)?;
            let (l, dh) = selfsup_backward(&fwd.hidden, &mu.masked, heads, weight, &mut hg)?;
            if !l.is_finite() {
                return Err(Error::Numerical {
                    user_id: mu.user.user_id.clone(),
                });
            }
            loss += l;
            backprop_hidden(&mu.user, &fwd, params, variant, &dh, &mut g);
        }
        Ok((loss, g, hg))
    });
    let mut g = ParamGradients::zeros(params);
    let mut hg = heads.zero_grads();
    let mut loss = 0.0;
    for part in parts {
        let (l, pg, phg) = part?;
        loss += l;
        g.add_assign(&pg);
        for (a, b) in hg.iter_mut().zip(&phg) {
            axpy(a, 1.0, b);
        }
    }
    Ok((loss * weight, g, hg))
}

/// Mean self-supervision loss without gradients.
pub fn selfsup_batch_loss(
    batch: &[MaskedUser],
    params: &ModelParams,
    heads: &SelfSupHeads,
    variant: AttentionVariant,
) -> Result<f64> {
    let mut total = 0.0;
    for mu in batch {
        let h = forward(&mu.user, params, variant)?.hidden;
        total += selfsup_loss(&h, &mu.masked, heads)?;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub mixup_loss: f64,
    pub selfsup_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ModelParams,
    pub heads: SelfSupHeads,
    pub log: Vec<PretrainEpoch>,
}

/// Minimize mixup classification loss plus self-supervision loss. The mixup
/// term is dropped when any user is unlabeled.
pub fn pretrain(
    data: &LabeledDataset,
    config: &TrainConfig,
    heads_config: &HeadsConfig,
    init: Option<ModelParams>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let mut params = starting_params(data, config, init)?;
    let mut heads = SelfSupHeads::new(&params, heads_config);
    let mut log = Vec::new();
    if config.epochs == 0 {
        return Ok(PretrainOutcome { params, heads, log });
    }
    if data.is_empty() {
        return Err(Error::Config("empty pretraining set".into()));
    }
    let use_mixup = config.mixup && data.is_labeled();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&params);
    let mut head_state = AdamState::for_lengths(heads.slices().iter().map(|s| s.len()));
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut mix_sum, mut ss_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut masked_users = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (user, masked) = perturb(&data.users[i], config, &mut rng)?;
                masked_users.push(MaskedUser { user, masked });
            }
            let (ss, mut g, hg) = selfsup_gradients(&masked_users, &params, &heads, config.variant)?;
            let mut mix = 0.0;
            if use_mixup {
                let base: Vec<ChannelizedUser> = masked_users.iter().map(|m| m.user.clone()).collect();
                let mixed: Vec<Example<'_>> = mixup_examples(&base, data.num_classes, config.mixup_alpha, &mut rng)?;
                let (l, mg) = gradients(&mixed, &params, config.variant)?;
                mix = l;
                g.add_assign(&mg);
            }
            adam_step(&mut params, &g, &mut state, config.learning_rate, &config.adam)?;
            let hg: Vec<&[f64]> = hg.iter().map(Vec::as_slice).collect();
            adam_update(&mut heads.slices_mut(), &hg, &mut head_state, config.learning_rate, &config.adam)?;
            mix_sum += mix;
            ss_sum += ss;
            batches += 1;
        }
        let (mixup_loss, selfsup_loss) = (mix_sum / batches as f64, ss_sum / batches as f64);
        log::debug!("pretrain epoch {epoch}: mixup {mixup_loss:.5} selfsup {selfsup_loss:.5}");
        log.push(PretrainEpoch {
            epoch,
            loss: mixup_loss + selfsup_loss,
            mixup_loss,
            selfsup_loss,
        });
    }
    Ok(PretrainOutcome { params, heads, log })
}
