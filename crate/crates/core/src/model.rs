//! Forward pass: per-channel embeddings, channel attention, user embedding
//! and the classification head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ChannelData, ChannelKind, ChannelSchema, ChannelizedUser, Vocabulary};
use crate::tensor::{axpy, dot, logistic, norm2, softmax, Matrix};

/// Norms below this are treated as zero when normalizing channel embeddings.
pub const NORM_EPS: f64 = 1e-12;
pub const DEFAULT_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Dynamic dot-product attention mixed with embedding norms.
    Dyattn,
    /// Learned per-channel weights shared by all users.
    Fixedattn,
    /// Unweighted sum of normalized channel embeddings.
    Auto,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [Self::Dyattn, Self::Fixedattn, Self::Auto];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dyattn => "dyattn",
            Self::Fixedattn => "fixedattn",
            Self::Auto => "auto",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dyattn" => Ok(Self::Dyattn),
            "fixedattn" => Ok(Self::Fixedattn),
            "auto" => Ok(Self::Auto),
            other => Err(Error::Config(format!("unknown attention variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelWeights {
    /// `Vlen_r × d` embedding table.
    Sparse(Matrix),
    /// `d × d_em` projection of the external text embedding.
    Dense(Matrix),
}

impl ChannelWeights {
    pub fn matrix(&self) -> &Matrix {
        match self {
            ChannelWeights::Sparse(m) | ChannelWeights::Dense(m) => m,
        }
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        match self {
            ChannelWeights::Sparse(m) | ChannelWeights::Dense(m) => m,
        }
    }
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub d_em: usize,
    pub num_classes: usize,
    pub schema_hash: String,
    pub channels: Vec<ChannelWeights>,
    /// Static per-channel queries, `R × d`.
    pub queries: Matrix,
    /// Static per-channel keys, `R × d`.
    pub keys: Matrix,
    /// Logits of the fixed-attention weights.
    pub fixed_logits: Vec<f64>,
    /// Unconstrained gate parameters; the gates are their logistic.
    pub rho_p: f64,
    pub rho_q: f64,
    pub rho_k: f64,
    /// `d × K` output weights.
    pub head: Matrix,
    pub bias: Vec<f64>,
}

impl ModelParams {
    pub fn p(&self) -> f64 {
        logistic(self.rho_p)
    }

    pub fn q(&self) -> f64 {
        logistic(self.rho_q)
    }

    pub fn k(&self) -> f64 {
        logistic(self.rho_k)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.channels
            .iter()
            .map(|c| match c {
                ChannelWeights::Sparse(m) => m.rows,
                ChannelWeights::Dense(_) => 0,
            })
            .collect()
    }

    /// Parameter storage in canonical order: channel tables, queries, keys,
    /// fixed logits, the three gates, head, bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.channels.iter().map(|c| c.matrix().data.as_slice()).collect();
        v.push(&self.queries.data);
        v.push(&self.keys.data);
        v.push(&self.fixed_logits);
        v.push(std::slice::from_ref(&self.rho_p));
        v.push(std::slice::from_ref(&self.rho_q));
        v.push(std::slice::from_ref(&self.rho_k));
        v.push(&self.head.data);
        v.push(&self.bias);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .channels
            .iter_mut()
            .map(|c| c.matrix_mut().data.as_mut_slice())
            .collect();
        v.push(&mut self.queries.data);
        v.push(&mut self.keys.data);
        v.push(&mut self.fixed_logits);
        v.push(std::slice::from_mut(&mut self.rho_p));
        v.push(std::slice::from_mut(&mut self.rho_q));
        v.push(std::slice::from_mut(&mut self.rho_k));
        v.push(&mut self.head.data);
        v.push(&mut self.bias);
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Check every shape against the declared dimensions and vocabulary sizes.
    pub fn validate(&self, schema: &ChannelSchema, vocab_sizes: &[usize]) -> Result<()> {
        let dim = |m: String| Err(Error::Dimension(m));
        if self.schema_hash != schema.hash() {
            return Err(Error::SchemaMismatch {
                expected: schema.hash(),
                found: self.schema_hash.clone(),
            });
        }
        if self.d == 0 || self.num_classes < 2 {
            return dim(format!("d={} K={}", self.d, self.num_classes));
        }
        let r = schema.len();
        if self.channels.len() != r || vocab_sizes.len() != r {
            return dim(format!(
                "{} channel tables, {} vocabulary sizes, schema has {r} channels",
                self.channels.len(),
                vocab_sizes.len()
            ));
        }
        for (desc, w) in schema.channels().iter().zip(&self.channels) {
            let ok = match (desc.kind, w) {
                (ChannelKind::Sparse, ChannelWeights::Sparse(m)) => {
                    m.shape() == (vocab_sizes[desc.id], self.d)
                }
                (ChannelKind::Dense, ChannelWeights::Dense(m)) => {
                    m.shape() == (self.d, self.d_em) && vocab_sizes[desc.id] == 0
                }
                _ => false,
            };
            if !ok || w.matrix().data.len() != w.matrix().rows * w.matrix().cols {
                return dim(format!("channel {} table has the wrong kind or shape", desc.name));
            }
        }
        for (name, m, shape) in [
            ("queries", &self.queries, (r, self.d)),
            ("keys", &self.keys, (r, self.d)),
            ("head", &self.head, (self.d, self.num_classes)),
        ] {
            if m.shape() != shape || m.data.len() != shape.0 * shape.1 {
                return dim(format!("{name} has shape {:?}, expected {shape:?}", m.shape()));
            }
        }
        if self.fixed_logits.len() != r || self.bias.len() != self.num_classes {
            return dim("fixed logits or bias length".into());
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Corruption("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Initialize parameters: matrices i.i.d. uniform in `[-1/√d, 1/√d]`, gates
/// at zero (so p = q = k = 0.5), fixed logits and bias at zero.
pub fn init_params(
    schema: &ChannelSchema,
    vocab_sizes: &[usize],
    d: usize,
    d_em: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    if d == 0 {
        return Err(Error::Config("embedding dimension d must be ≥ 1".into()));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if vocab_sizes.len() != schema.len() {
        return Err(Error::Dimension(format!(
            "{} vocabulary sizes for {} channels",
            vocab_sizes.len(),
            schema.len()
        )));
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize| {
        let mut m = Matrix::zeros(rows, cols);
        m.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        m
    };
    let mut channels = Vec::with_capacity(schema.len());
    for desc in schema.channels() {
        channels.push(match desc.kind {
            ChannelKind::Sparse => ChannelWeights::Sparse(uniform(vocab_sizes[desc.id], d)),
            ChannelKind::Dense => {
                if vocab_sizes[desc.id] != 0 {
                    return Err(Error::Dimension(format!(
                        "dense channel {} has a vocabulary",
                        desc.name
                    )));
                }
                ChannelWeights::Dense(uniform(d, d_em))
            }
        });
    }
    let r = schema.len();
    let queries = uniform(r, d);
    let keys = uniform(r, d);
    let head = uniform(d, num_classes);
    Ok(ModelParams {
        d,
        d_em,
        num_classes,
        schema_hash: schema.hash(),
        channels,
        queries,
        keys,
        fixed_logits: vec![0.0; r],
        rho_p: 0.0,
        rho_q: 0.0,
        rho_k: 0.0,
        head,
        bias: vec![0.0; num_classes],
    })
}

/// `e_ir`: sum of embedding rows at the active indices for sparse channels,
/// `W_r · x` for dense channels. Empty channels give the zero vector.
pub fn channel_embedding(user: &ChannelizedUser, params: &ModelParams, r: usize) -> Result<Vec<f64>> {
    let data = user
        .channels
        .get(r)
        .ok_or_else(|| Error::Dimension(format!("user {} has no channel {r}", user.user_id)))?;
    match (&params.channels[r], data) {
        (ChannelWeights::Sparse(h), ChannelData::Sparse(ix)) => {
            let mut e = vec![0.0; params.d];
            for &i in ix {
                let i = i as usize;
                if i >= h.rows {
                    return Err(Error::Corruption(format!(
                        "user {}: index {i} ≥ Vlen {} in channel {r}",
                        user.user_id, h.rows
                    )));
                }
                axpy(&mut e, 1.0, h.row(i));
            }
            Ok(e)
        }
        (ChannelWeights::Dense(w), ChannelData::Dense(x)) => {
            if x.len() != params.d_em {
                return Err(Error::Dimension(format!(
                    "user {}: dense channel {r} has length {}, expected {}",
                    user.user_id,
                    x.len(),
                    params.d_em
                )));
            }
            Ok(w.matvec(x))
        }
        _ => Err(Error::Corruption(format!(
            "user {}: channel {r} kind does not match parameters",
            user.user_id
        ))),
    }
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub embeddings: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    /// `e/‖e‖`, or zero when the norm is below [`NORM_EPS`].
    pub units: Vec<Vec<f64>>,
    /// Dynamic queries and keys (dyattn only, otherwise empty).
    pub queries: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    /// Softmax component of the attention: over `q_ir·k_ir` for dyattn, over
    /// the fixed logits for fixedattn, empty for auto.
    pub softmax: Vec<f64>,
    pub weights: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn forward(user: &ChannelizedUser, params: &ModelParams, variant: AttentionVariant) -> Result<Forward> {
    let r_count = params.num_channels();
    if user.channels.len() != r_count {
        return Err(Error::Dimension(format!(
            "user {} has {} channels, model has {r_count}",
            user.user_id,
            user.channels.len()
        )));
    }
    let mut embeddings = Vec::with_capacity(r_count);
    for r in 0..r_count {
        embeddings.push(channel_embedding(user, params, r)?);
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm2(e)).collect();
    let units: Vec<Vec<f64>> = embeddings
        .iter()
        .zip(&norms)
        .map(|(e, &n)| {
            if n < NORM_EPS {
                vec![0.0; e.len()]
            } else {
                e.iter().map(|x| x / n).collect()
            }
        })
        .collect();

    let (mut queries, mut keys) = (Vec::new(), Vec::new());
    let (softmax_part, weights) = match variant {
        AttentionVariant::Dyattn => {
            let (p, q, k) = (params.p(), params.q(), params.k());
            let mut scores = Vec::with_capacity(r_count);
            for (r, e) in embeddings.iter().enumerate() {
                let qv: Vec<f64> = e
                    .iter()
                    .zip(params.queries.row(r))
                    .map(|(x, s)| q * x + (1.0 - q) * s)
                    .collect();
                let kv: Vec<f64> = e
                    .iter()
                    .zip(params.keys.row(r))
                    .map(|(x, s)| k * x + (1.0 - k) * s)
                    .collect();
                scores.push(dot(&qv, &kv));
                queries.push(qv);
                keys.push(kv);
            }
            let a = softmax(&scores);
            let w = a
                .iter()
                .zip(&norms)
                .map(|(ai, n)| p * ai + (1.0 - p) * n)
                .collect();
            (a, w)
        }
        AttentionVariant::Fixedattn => {
            let a = softmax(&params.fixed_logits);
            (a.clone(), a)
        }
        AttentionVariant::Auto => (Vec::new(), vec![1.0; r_count]),
    };

    let mut hidden = vec![0.0; params.d];
    for (u, &w) in units.iter().zip(&weights) {
        axpy(&mut hidden, w, u);
    }
    let logits: Vec<f64> = params
        .head
        .matvec_t(&hidden)
        .iter()
        .zip(&params.bias)
        .map(|(z, b)| z + b)
        .collect();
    let probs = class_probabilities(&logits);
    Ok(Forward {
        embeddings,
        norms,
        units,
        queries,
        keys,
        softmax: softmax_part,
        weights,
        hidden,
        logits,
        probs,
    })
}

/// Two classes: logistic of the logit difference. More: softmax.
pub fn class_probabilities(logits: &[f64]) -> Vec<f64> {
    if logits.len() == 2 {
        let p1 = logistic(logits[1] - logits[0]);
        vec![1.0 - p1, p1]
    } else {
        softmax(logits)
    }
}

/// `α_i·`, one weight per channel.
pub fn attention_weights(user: &ChannelizedUser, params: &ModelParams, variant: AttentionVariant) -> Result<Vec<f64>> {
    Ok(forward(user, params, variant)?.weights)
}

/// `h_i = Σ_r α_ir e_ir/‖e_ir‖`.
pub fn user_embedding(user: &ChannelizedUser, params: &ModelParams, variant: AttentionVariant) -> Result<Vec<f64>> {
    Ok(forward(user, params, variant)?.hidden)
}

pub fn predict_proba(user: &ChannelizedUser, params: &ModelParams, variant: AttentionVariant) -> Result<Vec<f64>> {
    Ok(forward(user, params, variant)?.probs)
}

pub fn predict_class(user: &ChannelizedUser, params: &ModelParams, variant: AttentionVariant) -> Result<usize> {
    Ok(argmax(&predict_proba(user, params, variant)?))
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub const CHECKPOINT_FORMAT: &str = "fsspip-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: parameters plus the attention variant they were trained
/// with and, when known, the vocabulary needed to vectorize raw input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: AttentionVariant,
    pub vocab_sizes: Vec<usize>,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub params: ModelParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vocabulary>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, variant: AttentionVariant) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            variant,
            vocab_sizes: params.vocab_sizes(),
            class_names: Vec::new(),
            params,
            vocabulary: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parse and validate against `schema`.
    pub fn from_json(schema: &ChannelSchema, text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.params.validate(schema, &ck.vocab_sizes)?;
        if let Some(v) = &ck.vocabulary {
            if v.sizes() != ck.vocab_sizes {
                return Err(Error::Corruption("checkpoint vocabulary disagrees with its sizes".into()));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(schema: &ChannelSchema, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(schema, &text)
    }
}
