//! Channel taxonomy, vocabularies and the channelized user representation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Tweet,
    Reply,
    Retweet,
    Profile,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Tweet => "tweet",
            Source::Reply => "reply",
            Source::Retweet => "retweet",
            Source::Profile => "profile",
        }
    }
}

/// What a channel carries, independent of which source it was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Text,
    Bios,
    Hashtags,
    Domains,
    DomainCodomain,
    Mentions,
    FollowerIds,
    FriendIds,
    RetweeteeIds,
    ReplieeIds,
}

impl Feature {
    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Text => "text",
            Feature::Bios => "bios",
            Feature::Hashtags => "hashtags",
            Feature::Domains => "domains",
            Feature::DomainCodomain => "domain_codomain",
            Feature::Mentions => "mentions",
            Feature::FollowerIds => "follower_ids",
            Feature::FriendIds => "friend_ids",
            Feature::RetweeteeIds => "retweetee_ids",
            Feature::ReplieeIds => "repliee_ids",
        }
    }

    pub fn kind(self) -> ChannelKind {
        match self {
            Feature::Text | Feature::Bios => ChannelKind::Dense,
            _ => ChannelKind::Sparse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDescriptor {
    pub id: usize,
    pub name: String,
    pub kind: ChannelKind,
    pub source: Source,
    pub feature: Feature,
}

/// Ordered list of feature channels. Channel `id` equals its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchema {
    channels: Vec<ChannelDescriptor>,
}

/// Per-source features, in channel order.
const SOURCE_FEATURES: [Feature; 6] = [
    Feature::Text,
    Feature::Bios,
    Feature::Hashtags,
    Feature::Domains,
    Feature::DomainCodomain,
    Feature::Mentions,
];

impl ChannelSchema {
    /// The 22-channel schema: six features for each of tweets, replies and
    /// retweets, then follower, friend, retweetee and repliee ids.
    pub fn default_schema() -> Self {
        let mut channels = Vec::with_capacity(22);
        for source in [Source::Tweet, Source::Reply, Source::Retweet] {
            for feature in SOURCE_FEATURES {
                channels.push((source, feature));
            }
        }
        channels.push((Source::Profile, Feature::FollowerIds));
        channels.push((Source::Profile, Feature::FriendIds));
        channels.push((Source::Retweet, Feature::RetweeteeIds));
        channels.push((Source::Reply, Feature::ReplieeIds));
        Self::from_pairs(&channels)
    }

    /// A schema over the given channels, in order. Names must be unique.
    pub fn from_channels(pairs: &[(Source, Feature)]) -> Result<Self> {
        let schema = Self::from_pairs(pairs);
        let names: BTreeSet<&str> = schema.channels.iter().map(|c| c.name.as_str()).collect();
        if names.len() != schema.channels.len() {
            return Err(Error::Config("duplicate channel in schema".into()));
        }
        Ok(schema)
    }

    fn from_pairs(pairs: &[(Source, Feature)]) -> Self {
        let channels = pairs
            .iter()
            .enumerate()
            .map(|(id, &(source, feature))| {
                let name = match source {
                    Source::Profile => feature.as_str().to_string(),
                    _ if matches!(feature, Feature::RetweeteeIds | Feature::ReplieeIds) => {
                        feature.as_str().to_string()
                    }
                    _ => format!("{}_{}", source.as_str(), feature.as_str()),
                };
                ChannelDescriptor {
                    id,
                    name,
                    kind: feature.kind(),
                    source,
                    feature,
                }
            })
            .collect();
        ChannelSchema { channels }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[ChannelDescriptor] {
        &self.channels
    }

    pub fn channel(&self, id: usize) -> &ChannelDescriptor {
        &self.channels[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ChannelDescriptor> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn find(&self, source: Source, feature: Feature) -> Option<usize> {
        self.channels
            .iter()
            .find(|c| c.source == source && c.feature == feature)
            .map(|c| c.id)
    }

    pub fn sparse_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.channels
            .iter()
            .filter(|c| c.kind == ChannelKind::Sparse)
            .map(|c| c.id)
    }

    pub fn dense_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.channels
            .iter()
            .filter(|c| c.kind == ChannelKind::Dense)
            .map(|c| c.id)
    }

    /// Stable digest of the channel layout, embedded in datasets and checkpoints.
    pub fn hash(&self) -> String {
        let mut canon = String::new();
        for c in &self.channels {
            let kind = match c.kind {
                ChannelKind::Sparse => "sparse",
                ChannelKind::Dense => "dense",
            };
            let _ = writeln!(canon, "{}\t{}\t{}\t{}", c.id, c.name, kind, c.source.as_str());
        }
        let digest = Sha256::digest(canon.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(out, "{b:02x}");
        }
        format!("v1-{out}")
    }
}

impl Default for ChannelSchema {
    fn default() -> Self {
        Self::default_schema()
    }
}

/// Tokens of a channel are compared case-insensitively when the channel
/// carries handles or hashtags.
pub fn normalize_token(feature: Feature, token: &str) -> String {
    match feature {
        Feature::Mentions | Feature::Hashtags => token.to_lowercase(),
        _ => token.to_string(),
    }
}

/// Raw per-channel token multisets and documents for one user, keyed by
/// channel name. Produced by ingest, consumed by vocabulary building and
/// vectorization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelBags {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
    #[serde(default)]
    pub tokens: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub documents: BTreeMap<String, String>,
}

impl ChannelBags {
    pub fn new(user_id: impl Into<String>) -> Self {
        ChannelBags {
            user_id: user_id.into(),
            ..Default::default()
        }
    }

    pub fn push_token(&mut self, channel: &str, token: impl Into<String>) {
        self.tokens
            .entry(channel.to_string())
            .or_default()
            .push(token.into());
    }

    pub fn channel_tokens(&self, channel: &str) -> &[String] {
        self.tokens.get(channel).map_or(&[], Vec::as_slice)
    }

    pub fn document(&self, channel: &str) -> &str {
        self.documents.get(channel).map_or("", String::as_str)
    }
}

/// Token ↔ index map for one sparse channel.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "ChannelVocabRepr", into = "ChannelVocabRepr")]
pub struct ChannelVocab {
    tokens: Vec<String>,
    doc_freq: Vec<u32>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct ChannelVocabRepr {
    tokens: Vec<String>,
    doc_freq: Vec<u32>,
}

impl From<ChannelVocabRepr> for ChannelVocab {
    fn from(r: ChannelVocabRepr) -> Self {
        ChannelVocab::from_parts(r.tokens, r.doc_freq)
    }
}

impl From<ChannelVocab> for ChannelVocabRepr {
    fn from(v: ChannelVocab) -> Self {
        ChannelVocabRepr {
            tokens: v.tokens,
            doc_freq: v.doc_freq,
        }
    }
}

impl ChannelVocab {
    pub fn from_parts(tokens: Vec<String>, doc_freq: Vec<u32>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        ChannelVocab {
            tokens,
            doc_freq,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    pub fn doc_freq(&self, index: u32) -> Option<u32> {
        self.doc_freq.get(index as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Per-channel vocabularies aligned with a [`ChannelSchema`]. Dense channels
/// carry an empty vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub channels: Vec<ChannelVocab>,
}

impl Vocabulary {
    pub fn empty(schema: &ChannelSchema) -> Self {
        Vocabulary {
            channels: vec![ChannelVocab::default(); schema.len()],
        }
    }

    pub fn channel(&self, id: usize) -> &ChannelVocab {
        &self.channels[id]
    }

    /// `Vlen_r` for every channel (zero for dense channels).
    pub fn sizes(&self) -> Vec<usize> {
        self.channels.iter().map(ChannelVocab::len).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.channels.iter().map(ChannelVocab::len).sum()
    }

    /// Tab-separated `channel_id, index, token, doc_frequency`, sorted by
    /// `(channel_id, index)`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (cid, ch) in self.channels.iter().enumerate() {
            for (i, (tok, df)) in ch.tokens.iter().zip(&ch.doc_freq).enumerate() {
                writeln!(w, "{cid}\t{i}\t{tok}\t{df}")?;
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(schema: &ChannelSchema, r: R) -> Result<Self> {
        let mut channels: Vec<(Vec<String>, Vec<u32>)> = vec![Default::default(); schema.len()];
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: lineno + 1,
                message: m.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 tab-separated fields"));
            }
            let cid: usize = fields[0].parse().map_err(|_| bad("bad channel id"))?;
            let idx: usize = fields[1].parse().map_err(|_| bad("bad index"))?;
            let df: u32 = fields[3].parse().map_err(|_| bad("bad doc frequency"))?;
            if cid >= schema.len() {
                return Err(bad("channel id out of range"));
            }
            if schema.channel(cid).kind == ChannelKind::Dense {
                return Err(bad("dense channel cannot carry a vocabulary"));
            }
            let (toks, dfs) = &mut channels[cid];
            if idx != toks.len() {
                return Err(bad("indices must be dense and sorted"));
            }
            toks.push(fields[2].to_string());
            dfs.push(df);
        }
        Ok(Vocabulary {
            channels: channels
                .into_iter()
                .map(|(t, d)| ChannelVocab::from_parts(t, d))
                .collect(),
        })
    }

    pub fn load(schema: &ChannelSchema, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_tsv(schema, std::io::BufReader::new(f))
    }
}

/// Build per-channel vocabularies keeping tokens seen in at least `min_count`
/// distinct users. Indices are assigned by descending document frequency,
/// ties broken lexicographically.
pub fn build_vocabulary(schema: &ChannelSchema, users: &[ChannelBags], min_count: u32) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: Vec<HashMap<String, u32>> = vec![HashMap::new(); schema.len()];
    for user in users {
        for desc in schema.channels() {
            if desc.kind != ChannelKind::Sparse {
                continue;
            }
            let distinct: BTreeSet<String> = user
                .channel_tokens(&desc.name)
                .iter()
                .map(|t| normalize_token(desc.feature, t))
                .collect();
            let c = &mut counts[desc.id];
            for tok in distinct {
                *c.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let channels = counts
        .into_iter()
        .map(|c| {
            let mut kept: Vec<(String, u32)> =
                c.into_iter().filter(|(_, n)| *n >= min_count).collect();
            kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let (tokens, dfs) = kept.into_iter().unzip();
            ChannelVocab::from_parts(tokens, dfs)
        })
        .collect();
    Vocabulary { channels }
}

/// One channel's contents for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChannelData {
    /// Sorted, de-duplicated vocabulary indices (the active entries of the
    /// presence-absence vector).
    #[serde(rename = "s")]
    Sparse(Vec<u32>),
    /// External text embedding of length `d_em`.
    #[serde(rename = "d")]
    Dense(Vec<f64>),
}

impl ChannelData {
    pub fn is_empty(&self) -> bool {
        match self {
            ChannelData::Sparse(ix) => ix.is_empty(),
            ChannelData::Dense(v) => v.iter().all(|&x| x == 0.0),
        }
    }

    pub fn sparse(&self) -> Option<&[u32]> {
        match self {
            ChannelData::Sparse(ix) => Some(ix),
            ChannelData::Dense(_) => None,
        }
    }

    pub fn dense(&self) -> Option<&[f64]> {
        match self {
            ChannelData::Dense(v) => Some(v),
            ChannelData::Sparse(_) => None,
        }
    }

    /// Empty the channel in place (sparse → no indices, dense → zeros).
    pub fn clear(&mut self) {
        match self {
            ChannelData::Sparse(ix) => ix.clear(),
            ChannelData::Dense(v) => v.iter_mut().for_each(|x| *x = 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelizedUser {
    pub user_id: String,
    pub channels: Vec<ChannelData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, String>,
}

impl ChannelizedUser {
    /// A user with every channel empty.
    pub fn empty(schema: &ChannelSchema, user_id: impl Into<String>, d_em: usize) -> Self {
        let channels = schema
            .channels()
            .iter()
            .map(|c| match c.kind {
                ChannelKind::Sparse => ChannelData::Sparse(Vec::new()),
                ChannelKind::Dense => ChannelData::Dense(vec![0.0; d_em]),
            })
            .collect();
        ChannelizedUser {
            user_id: user_id.into(),
            channels,
            label: None,
            attrs: BTreeMap::new(),
        }
    }

    /// Check the user against channel kinds, vocabulary sizes and `d_em`.
    pub fn validate(&self, schema: &ChannelSchema, vocab_sizes: &[usize], d_em: usize) -> Result<()> {
        if self.channels.len() != schema.len() {
            return Err(Error::Dimension(format!(
                "user {}: {} channels, schema has {}",
                self.user_id,
                self.channels.len(),
                schema.len()
            )));
        }
        for (desc, data) in schema.channels().iter().zip(&self.channels) {
            match (desc.kind, data) {
                (ChannelKind::Sparse, ChannelData::Sparse(ix)) => {
                    if let Some(&bad) = ix.iter().find(|&&i| i as usize >= vocab_sizes[desc.id]) {
                        return Err(Error::Corruption(format!(
                            "user {}: index {bad} out of range for channel {} (Vlen {})",
                            self.user_id, desc.name, vocab_sizes[desc.id]
                        )));
                    }
                    if ix.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Corruption(format!(
                            "user {}: channel {} indices not sorted/unique",
                            self.user_id, desc.name
                        )));
                    }
                }
                (ChannelKind::Dense, ChannelData::Dense(v)) => {
                    if v.len() != d_em {
                        return Err(Error::Dimension(format!(
                            "user {}: channel {} has length {}, expected {d_em}",
                            self.user_id,
                            desc.name,
                            v.len()
                        )));
                    }
                }
                _ => {
                    return Err(Error::Corruption(format!(
                        "user {}: channel {} has the wrong kind",
                        self.user_id, desc.name
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Convert one user's bags into vocabulary indices plus dense vectors.
///
/// `dense` maps dense channel ids to their embedding; missing dense channels
/// become zero vectors.
pub fn vectorize(
    schema: &ChannelSchema,
    bags: &ChannelBags,
    vocab: &Vocabulary,
    dense: &BTreeMap<usize, Vec<f64>>,
    d_em: usize,
) -> Result<ChannelizedUser> {
    let mut user = ChannelizedUser::empty(schema, bags.user_id.clone(), d_em);
    user.label = bags.label;
    user.attrs = bags.attrs.clone();
    for desc in schema.channels() {
        match desc.kind {
            ChannelKind::Sparse => {
                let cv = vocab.channel(desc.id);
                let ix: BTreeSet<u32> = bags
                    .channel_tokens(&desc.name)
                    .iter()
                    .filter_map(|t| cv.index_of(&normalize_token(desc.feature, t)))
                    .collect();
                user.channels[desc.id] = ChannelData::Sparse(ix.into_iter().collect());
            }
            ChannelKind::Dense => {
                if let Some(v) = dense.get(&desc.id) {
                    if v.len() != d_em {
                        return Err(Error::Dimension(format!(
                            "dense vector for channel {} has length {}, expected {d_em}",
                            desc.name,
                            v.len()
                        )));
                    }
                    user.channels[desc.id] = ChannelData::Dense(v.clone());
                }
            }
        }
    }
    Ok(user)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gold,
    Silver,
    Synthetic,
    Unlabeled,
}

/// A set of channelized users sharing one schema, vocabulary and `d_em`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub schema: ChannelSchema,
    pub vocab_sizes: Vec<usize>,
    pub d_em: usize,
    pub num_classes: usize,
    pub provenance: Provenance,
    pub class_names: Vec<String>,
    pub vocabulary: Option<Vocabulary>,
    pub users: Vec<ChannelizedUser>,
}

impl LabeledDataset {
    pub fn new(
        schema: ChannelSchema,
        vocab_sizes: Vec<usize>,
        d_em: usize,
        num_classes: usize,
        provenance: Provenance,
    ) -> Self {
        LabeledDataset {
            schema,
            vocab_sizes,
            d_em,
            num_classes,
            provenance,
            class_names: Vec::new(),
            vocabulary: None,
            users: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.users.is_empty() && self.users.iter().all(|u| u.label.is_some())
    }

    /// Same metadata, different users.
    pub fn with_users(&self, users: Vec<ChannelizedUser>) -> Self {
        LabeledDataset {
            schema: self.schema.clone(),
            vocab_sizes: self.vocab_sizes.clone(),
            d_em: self.d_em,
            num_classes: self.num_classes,
            provenance: self.provenance,
            class_names: self.class_names.clone(),
            vocabulary: self.vocabulary.clone(),
            users,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "dataset needs at least 2 classes, has {}",
                self.num_classes
            )));
        }
        if self.vocab_sizes.len() != self.schema.len() {
            return Err(Error::Dimension(format!(
                "{} vocabulary sizes for {} channels",
                self.vocab_sizes.len(),
                self.schema.len()
            )));
        }
        if let Some(v) = &self.vocabulary {
            if v.sizes() != self.vocab_sizes {
                return Err(Error::Corruption("embedded vocabulary disagrees with vocab_sizes".into()));
            }
        }
        for u in &self.users {
            u.validate(&self.schema, &self.vocab_sizes, self.d_em)?;
            if let Some(l) = u.label {
                if l >= self.num_classes {
                    return Err(Error::Validation(format!(
                        "user {}: label {l} outside 0..{}",
                        u.user_id, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.users.iter().filter_map(|u| u.label).collect()
    }
}
