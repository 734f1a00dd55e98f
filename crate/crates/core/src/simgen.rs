//! Synthetic populations from a class-conditional naive-Bayes model, with
//! the exact posterior-argmax classifier as an accuracy ceiling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::par;
use crate::pretrain::PartyAnchor;
use crate::schema::{ChannelData, ChannelKind, ChannelSchema, ChannelizedUser, LabeledDataset, Provenance};

pub const DEFAULT_SYNTHETIC_D_EM: usize = 16;
/// Largest presence set scored exactly under a fixed number of draws.
pub const MAX_EXACT_SET: usize = 20;

/// How many categorical draws a user makes in a sparse channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    /// Poisson number of draws with this mean.
    Poisson(f64),
    /// Exactly this many draws.
    Fixed(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseChannelSpec {
    pub channel: String,
    pub activity: Activity,
    /// Per class, a distribution over the channel vocabulary.
    pub theta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseChannelSpec {
    pub channel: String,
    /// Per class, the mean vector of length `d_em`.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeSpec {
    pub prior: Vec<f64>,
    #[serde(default = "default_d_em")]
    pub d_em: usize,
    #[serde(default)]
    pub sparse: Vec<SparseChannelSpec>,
    #[serde(default)]
    pub dense: Vec<DenseChannelSpec>,
    /// Probability that a user lands in another class's anchor list.
    #[serde(default)]
    pub follow_noise: f64,
    #[serde(default)]
    pub class_names: Vec<String>,
}

fn default_d_em() -> usize {
    DEFAULT_SYNTHETIC_D_EM
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|&x| x.is_finite() && x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

/// Channel ids resolved against the schema.
struct Resolved<'a> {
    sparse: Vec<(usize, &'a SparseChannelSpec)>,
    dense: Vec<(usize, &'a DenseChannelSpec)>,
}

impl GenerativeSpec {
    pub fn num_classes(&self) -> usize {
        self.prior.len()
    }

    pub fn class_name(&self, c: usize) -> String {
        self.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GenerativeSpec = serde_json::from_str(text)?;
        spec.validate(&ChannelSchema::default_schema())?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self, schema: &ChannelSchema) -> Result<()> {
        self.resolve(schema).map(|_| ())
    }

    fn resolve<'a>(&'a self, schema: &ChannelSchema) -> Result<Resolved<'a>> {
        let bad = |m: String| Err(Error::Validation(m));
        let k = self.num_classes();
        if k < 2 || !is_distribution(&self.prior) {
            return bad("prior must be a distribution over at least 2 classes".into());
        }
        if !(0.0..0.5).contains(&self.follow_noise) {
            return bad(format!("follow_noise {} outside [0, 0.5)", self.follow_noise));
        }
        if self.d_em == 0 {
            return bad("d_em must be ≥ 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut lookup = |name: &str, kind: ChannelKind| -> Result<usize> {
            let desc = schema
                .by_name(name)
                .ok_or_else(|| Error::Validation(format!("unknown channel {name:?}")))?;
            if desc.kind != kind {
                return Err(Error::Validation(format!("channel {name:?} has the wrong kind")));
            }
            if !seen.insert(desc.id) {
                return Err(Error::Validation(format!("channel {name:?} listed twice")));
            }
            Ok(desc.id)
        };
        let mut sparse = Vec::new();
        for s in &self.sparse {
            let id = lookup(&s.channel, ChannelKind::Sparse)?;
            let vlen = s.theta.first().map_or(0, Vec::len);
            if s.theta.len() != k || vlen == 0 || s.theta.iter().any(|t| t.len() != vlen || !is_distribution(t)) {
                return bad(format!("channel {}: theta must be {k} distributions of equal length", s.channel));
            }
            match s.activity {
                Activity::Poisson(l) if !(l.is_finite() && l >= 0.0) => {
                    return bad(format!("channel {}: Poisson mean {l}", s.channel))
                }
                Activity::Fixed(n) if n as usize > 10_000 => return bad(format!("channel {}: {n} draws", s.channel)),
                _ => {}
            }
            sparse.push((id, s));
        }
        let mut dense = Vec::new();
        for d in &self.dense {
            let id = lookup(&d.channel, ChannelKind::Dense)?;
            if d.means.len() != k || d.means.iter().any(|m| m.len() != self.d_em) {
                return bad(format!("channel {}: need {k} means of length {}", d.channel, self.d_em));
            }
            if !(d.sigma.is_finite() && d.sigma > 0.0) {
                return bad(format!("channel {}: sigma {}", d.channel, d.sigma));
            }
            dense.push((id, d));
        }
        Ok(Resolved { sparse, dense })
    }

    /// Vocabulary size per schema channel (0 for dense and unused channels).
    pub fn vocab_sizes(&self, schema: &ChannelSchema) -> Result<Vec<usize>> {
        let r = self.resolve(schema)?;
        let mut sizes = vec![0; schema.len()];
        for (id, s) in r.sparse {
            sizes[id] = s.theta[0].len();
        }
        Ok(sizes)
    }
}

fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn sample_sparse<R: Rng + ?Sized>(spec: &SparseChannelSpec, class: usize, rng: &mut R) -> Vec<u32> {
    let theta = &spec.theta[class];
    match spec.activity {
        // Poisson thinning: token counts are independent Poisson(λθ_v), so
        // presence is independent Bernoulli(1 − e^{−λθ_v}).
        Activity::Poisson(lambda) => (0..theta.len() as u32)
            .filter(|&v| rng.random_bool(1.0 - (-lambda * theta[v as usize]).exp()))
            .collect(),
        Activity::Fixed(n) => {
            let mut set: Vec<u32> = (0..n).map(|_| categorical(theta, rng) as u32).collect();
            set.sort_unstable();
            set.dedup();
            set
        }
    }
}

/// Draw `n` users and the noisy anchor lists. User `i` uses its own random
/// stream, so results do not depend on parallel scheduling.
pub fn sample_population(spec: &GenerativeSpec, n: usize, seed: u64) -> Result<(LabeledDataset, Vec<PartyAnchor>)> {
    if n == 0 {
        return Err(Error::Validation("population size must be ≥ 1".into()));
    }
    let schema = ChannelSchema::default_schema();
    let resolved = spec.resolve(&schema)?;
    let k = spec.num_classes();
    let draws = par::map_range(n, |i| -> Result<(ChannelizedUser, usize, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let class = categorical(&spec.prior, &mut rng);
        let mut u = ChannelizedUser::empty(&schema, format!("u{i}"), spec.d_em);
        u.label = Some(class);
        for (id, s) in &resolved.sparse {
            u.channels[*id] = ChannelData::Sparse(sample_sparse(s, class, &mut rng));
        }
        for (id, d) in &resolved.dense {
            let noise = Normal::new(0.0, d.sigma).map_err(|e| Error::Validation(e.to_string()))?;
            let v = d.means[class].iter().map(|m| m + noise.sample(&mut rng)).collect();
            u.channels[*id] = ChannelData::Dense(v);
        }
        let anchor = if rng.random_bool(spec.follow_noise) {
            let other = rng.random_range(0..k - 1);
            if other >= class {
                other + 1
            } else {
                other
            }
        } else {
            class
        };
        let as_follower = rng.random_bool(0.5);
        Ok((u, anchor, as_follower))
    });
    let mut data = LabeledDataset::new(
        schema.clone(),
        spec.vocab_sizes(&schema)?,
        spec.d_em,
        k,
        Provenance::Synthetic,
    );
    data.class_names = (0..k).map(|c| spec.class_name(c)).collect();
    let mut anchors: Vec<PartyAnchor> = (0..k)
        .map(|c| PartyAnchor {
            party: spec.class_name(c),
            follower_ids: Vec::new(),
            retweeter_ids: Vec::new(),
        })
        .collect();
    for d in draws {
        let (u, anchor, as_follower) = d?;
        let list = if as_follower {
            &mut anchors[anchor].follower_ids
        } else {
            &mut anchors[anchor].retweeter_ids
        };
        list.push(u.user_id.clone());
        data.users.push(u);
    }
    Ok((data, anchors))
}

/// `log Σ_{T⊆S} (−1)^{|S|−|T|} θ(T)^n`: the probability that `n` draws hit
/// exactly the set `S`.
fn log_exact_set_prob(theta: &[f64], set: &[u32], n: u32) -> Result<f64> {
    let s = set.len();
    if s > MAX_EXACT_SET {
        return Err(Error::Validation(format!(
            "{s} distinct tokens exceeds the exact-likelihood limit {MAX_EXACT_SET}"
        )));
    }
    if s > n as usize {
        return Ok(f64::NEG_INFINITY);
    }
    if s == 0 {
        return Ok(if n == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let mut total = 0.0;
    for mask in 1u32..(1 << s) {
        let mass: f64 = (0..s).filter(|b| mask & (1 << b) != 0).map(|b| theta[set[b] as usize]).sum();
        let sign = if (s - mask.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
        total += sign * mass.powi(n as i32);
    }
    Ok(if total > 0.0 { total.ln() } else { f64::NEG_INFINITY })
}

fn sparse_log_likelihood(spec: &SparseChannelSpec, class: usize, set: &[u32]) -> Result<f64> {
    let theta = &spec.theta[class];
    if let Some(&bad) = set.iter().find(|&&v| v as usize >= theta.len()) {
        return Err(Error::Corruption(format!("index {bad} outside channel {} vocabulary", spec.channel)));
    }
    match spec.activity {
        Activity::Poisson(lambda) => {
            let mut present = vec![false; theta.len()];
            set.iter().for_each(|&v| present[v as usize] = true);
            Ok(theta
                .iter()
                .zip(&present)
                .map(|(&t, &p)| {
                    let rate = lambda * t;
                    if p {
                        (-(-rate).exp_m1()).ln()
                    } else {
                        -rate
                    }
                })
                .sum())
        }
        Activity::Fixed(n) => log_exact_set_prob(theta, set, n),
    }
}

/// Unnormalized log posterior of each class.
pub fn log_posterior(spec: &GenerativeSpec, user: &ChannelizedUser) -> Result<Vec<f64>> {
    let schema = ChannelSchema::default_schema();
    let resolved = spec.resolve(&schema)?;
    if user.channels.len() != schema.len() {
        return Err(Error::Dimension(format!("user {} does not match the schema", user.user_id)));
    }
    let mut out = Vec::with_capacity(spec.num_classes());
    for c in 0..spec.num_classes() {
        let mut lp = spec.prior[c].ln();
        for (id, s) in &resolved.sparse {
            let set = user.channels[*id]
                .sparse()
                .ok_or_else(|| Error::Corruption(format!("channel {} is not sparse", s.channel)))?;
            lp += sparse_log_likelihood(s, c, set)?;
        }
        for (id, d) in &resolved.dense {
            let x = user.channels[*id]
                .dense()
                .ok_or_else(|| Error::Corruption(format!("channel {} is not dense", d.channel)))?;
            if x.len() != spec.d_em {
                return Err(Error::Dimension(format!("channel {} length {}", d.channel, x.len())));
            }
            let sq: f64 = x.iter().zip(&d.means[c]).map(|(a, m)| (a - m).powi(2)).sum();
            lp -= sq / (2.0 * d.sigma * d.sigma);
        }
        out.push(lp);
    }
    Ok(out)
}

/// Posterior argmax; ties go to the lowest class index.
pub fn bayes_oracle_predict(spec: &GenerativeSpec, user: &ChannelizedUser) -> Result<usize> {
    Ok(argmax(&log_posterior(spec, user)?))
}

/// Fraction of labeled users whose oracle prediction equals their label.
pub fn bayes_oracle_accuracy(spec: &GenerativeSpec, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Validation("oracle accuracy of an empty dataset".into()));
    }
    let hits = par::map(&data.users, |u| -> Result<bool> {
        let label = u
            .label
            .ok_or_else(|| Error::Validation(format!("user {} is unlabeled", u.user_id)))?;
        Ok(bayes_oracle_predict(spec, u)? == label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}
