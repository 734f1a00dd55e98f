//! Hand-derived reverse-mode gradients of the full forward graph: channel
//! embeddings, normalization, the three attention variants, head and loss.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{forward, AttentionVariant, ChannelWeights, Forward, ModelParams, NORM_EPS};
use crate::par;
use crate::schema::{ChannelData, ChannelizedUser};
use crate::tensor::{axpy, dot, log_sum_exp, Matrix};
use crate::train::loss::Target;

/// Examples per parallel work unit. Fixed so summation order does not depend
/// on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelGrad {
    /// Gradient of a `rows × cols` embedding table; only touched rows are stored.
    Rows {
        rows: usize,
        cols: usize,
        touched: BTreeMap<u32, Vec<f64>>,
    },
    Dense(Matrix),
}

impl ChannelGrad {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            ChannelGrad::Rows { rows, cols, .. } => (*rows, *cols),
            ChannelGrad::Dense(m) => m.shape(),
        }
    }

    fn to_dense(&self) -> Vec<f64> {
        match self {
            ChannelGrad::Rows { rows, cols, touched } => {
                let mut out = vec![0.0; rows * cols];
                for (&i, row) in touched {
                    let i = i as usize;
                    out[i * cols..(i + 1) * cols].copy_from_slice(row);
                }
                out
            }
            ChannelGrad::Dense(m) => m.data.clone(),
        }
    }
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub channels: Vec<ChannelGrad>,
    pub queries: Matrix,
    pub keys: Matrix,
    pub fixed_logits: Vec<f64>,
    pub rho_p: f64,
    pub rho_q: f64,
    pub rho_k: f64,
    pub head: Matrix,
    pub bias: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros(params: &ModelParams) -> Self {
        let channels = params
            .channels
            .iter()
            .map(|c| match c {
                ChannelWeights::Sparse(h) => ChannelGrad::Rows {
                    rows: h.rows,
                    cols: h.cols,
                    touched: BTreeMap::new(),
                },
                ChannelWeights::Dense(w) => ChannelGrad::Dense(Matrix::zeros(w.rows, w.cols)),
            })
            .collect();
        ParamGradients {
            channels,
            queries: Matrix::zeros(params.queries.rows, params.queries.cols),
            keys: Matrix::zeros(params.keys.rows, params.keys.cols),
            fixed_logits: vec![0.0; params.fixed_logits.len()],
            rho_p: 0.0,
            rho_q: 0.0,
            rho_k: 0.0,
            head: Matrix::zeros(params.head.rows, params.head.cols),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.channels.iter_mut().zip(&other.channels) {
            match (a, b) {
                (ChannelGrad::Rows { touched: ta, .. }, ChannelGrad::Rows { touched: tb, .. }) => {
                    for (i, row) in tb {
                        match ta.get_mut(i) {
                            Some(r) => axpy(r, 1.0, row),
                            None => {
                                ta.insert(*i, row.clone());
                            }
                        }
                    }
                }
                (ChannelGrad::Dense(ma), ChannelGrad::Dense(mb)) => axpy(&mut ma.data, 1.0, &mb.data),
                _ => unreachable!("gradient layouts built from the same parameters"),
            }
        }
        axpy(&mut self.queries.data, 1.0, &other.queries.data);
        axpy(&mut self.keys.data, 1.0, &other.keys.data);
        axpy(&mut self.fixed_logits, 1.0, &other.fixed_logits);
        self.rho_p += other.rho_p;
        self.rho_q += other.rho_q;
        self.rho_k += other.rho_k;
        axpy(&mut self.head.data, 1.0, &other.head.data);
        axpy(&mut self.bias, 1.0, &other.bias);
    }

    /// Row `i` of channel `r`'s table gradient, if that row was touched.
    pub fn sparse_row(&self, r: usize, i: u32) -> Option<&[f64]> {
        match &self.channels[r] {
            ChannelGrad::Rows { touched, .. } => touched.get(&i).map(Vec::as_slice),
            ChannelGrad::Dense(_) => None,
        }
    }

    /// Dense gradient arrays in the canonical order of [`ModelParams::slices`].
    pub fn dense_slices(&self) -> Vec<Cow<'_, [f64]>> {
        let mut v: Vec<Cow<'_, [f64]>> = self
            .channels
            .iter()
            .map(|c| match c {
                ChannelGrad::Dense(m) => Cow::Borrowed(m.data.as_slice()),
                rows => Cow::Owned(rows.to_dense()),
            })
            .collect();
        v.push(Cow::Borrowed(&self.queries.data));
        v.push(Cow::Borrowed(&self.keys.data));
        v.push(Cow::Borrowed(&self.fixed_logits));
        v.push(Cow::Owned(vec![self.rho_p]));
        v.push(Cow::Owned(vec![self.rho_q]));
        v.push(Cow::Owned(vec![self.rho_k]));
        v.push(Cow::Borrowed(&self.head.data));
        v.push(Cow::Borrowed(&self.bias));
        v
    }

    /// All entries, flattened in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.dense_slices().iter().flat_map(|s| s.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// Whether every array has the shape of the corresponding parameter.
    pub fn matches(&self, params: &ModelParams) -> bool {
        let mine = self.dense_slices();
        let theirs = params.slices();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|(a, b)| a.len() == b.len())
            && self
                .channels
                .iter()
                .zip(&params.channels)
                .all(|(g, p)| g.shape() == p.matrix().shape())
    }
}

/// Accumulate the output-layer gradient for `dlogits` and return `∂/∂h`.
pub(crate) fn backprop_head(fwd: &Forward, params: &ModelParams, dlogits: &[f64], g: &mut ParamGradients) -> Vec<f64> {
    for (j, &hj) in fwd.hidden.iter().enumerate() {
        if hj != 0.0 {
            axpy(g.head.row_mut(j), hj, dlogits);
        }
    }
    axpy(&mut g.bias, 1.0, dlogits);
    params.head.matvec(dlogits)
}

/// Propagate `dh = ∂L/∂h` through attention, normalization and the channel
/// embeddings, accumulating into `g`.
pub(crate) fn backprop_hidden(
    user: &ChannelizedUser,
    fwd: &Forward,
    params: &ModelParams,
    variant: AttentionVariant,
    dh: &[f64],
    g: &mut ParamGradients,
) {
    let r_count = params.num_channels();
    let d = params.d;
    let mut dalpha = vec![0.0; r_count];
    let mut de = vec![vec![0.0; d]; r_count];

    // h = Σ_r α_r u_r, u_r = e_r / ‖e_r‖
    for r in 0..r_count {
        let u = &fwd.units[r];
        dalpha[r] = dot(dh, u);
        let n = fwd.norms[r];
        if n >= NORM_EPS {
            let a = fwd.weights[r];
            let u_du = a * dalpha[r];
            for j in 0..d {
                de[r][j] += (a * dh[j] - u[j] * u_du) / n;
            }
        }
    }

    match variant {
        AttentionVariant::Dyattn => {
            let (p, q, k) = (params.p(), params.q(), params.k());
            let a = &fwd.softmax;
            let mut dp = 0.0;
            let mut da = vec![0.0; r_count];
            for r in 0..r_count {
                dp += dalpha[r] * (a[r] - fwd.norms[r]);
                da[r] = p * dalpha[r];
                if fwd.norms[r] >= NORM_EPS {
                    axpy(&mut de[r], (1.0 - p) * dalpha[r], &fwd.units[r]);
                }
            }
            let s: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
            let (mut dq, mut dk) = (0.0, 0.0);
            for r in 0..r_count {
                let ds = a[r] * (da[r] - s);
                if ds == 0.0 {
                    continue;
                }
                let qv = &fwd.queries[r];
                let kv = &fwd.keys[r];
                let e = &fwd.embeddings[r];
                let (q_static, k_static) = (params.queries.row(r), params.keys.row(r));
                for j in 0..d {
                    let dqv = ds * kv[j];
                    let dkv = ds * qv[j];
                    dq += dqv * (e[j] - q_static[j]);
                    dk += dkv * (e[j] - k_static[j]);
                    de[r][j] += q * dqv + k * dkv;
                }
                axpy(g.queries.row_mut(r), (1.0 - q) * ds, kv);
                axpy(g.keys.row_mut(r), (1.0 - k) * ds, qv);
            }
            g.rho_p += dp * p * (1.0 - p);
            g.rho_q += dq * q * (1.0 - q);
            g.rho_k += dk * k * (1.0 - k);
        }
        AttentionVariant::Fixedattn => {
            let w = &fwd.weights;
            let s: f64 = w.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
            for r in 0..r_count {
                g.fixed_logits[r] += w[r] * (dalpha[r] - s);
            }
        }
        AttentionVariant::Auto => {}
    }

    for r in 0..r_count {
        match (&mut g.channels[r], &user.channels[r]) {
            (ChannelGrad::Rows { cols, touched, .. }, ChannelData::Sparse(ix)) => {
                for &i in ix {
                    let row = touched.entry(i).or_insert_with(|| vec![0.0; *cols]);
                    axpy(row, 1.0, &de[r]);
                }
            }
            (ChannelGrad::Dense(gw), ChannelData::Dense(x)) => {
                for (j, &dej) in de[r].iter().enumerate() {
                    if dej != 0.0 {
                        axpy(gw.row_mut(j), dej, x);
                    }
                }
            }
            _ => unreachable!("forward pass already checked channel kinds"),
        }
    }
}

/// `∂loss/∂logits` and the loss for a soft target, computed from log-softmax.
pub(crate) fn cross_entropy_logits(logits: &[f64], probs: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let total: f64 = y.iter().sum();
    let loss = -logits
        .iter()
        .zip(y)
        .map(|(z, w)| if *w == 0.0 { 0.0 } else { w * (z - lse) })
        .sum::<f64>();
    let dz = probs.iter().zip(y).map(|(p, w)| p * total - w).collect();
    (loss, dz)
}

/// One supervised example: a (possibly augmented) user and its target.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub user: Cow<'a, ChannelizedUser>,
    pub target: Target,
}

impl<'a> Example<'a> {
    pub fn borrowed(user: &'a ChannelizedUser, target: Target) -> Self {
        Example {
            user: Cow::Borrowed(user),
            target,
        }
    }

    pub fn owned(user: ChannelizedUser, target: Target) -> Self {
        Example {
            user: Cow::Owned(user),
            target,
        }
    }
}

/// Forward + backward for one example, gradient scaled by `weight`.
pub(crate) fn accumulate_example(
    ex: &Example<'_>,
    params: &ModelParams,
    variant: AttentionVariant,
    weight: f64,
    g: &mut ParamGradients,
) -> Result<f64> {
    let fwd = forward(&ex.user, params, variant)?;
    let y = ex.target.distribution(params.num_classes)?;
    let (loss, mut dz) = cross_entropy_logits(&fwd.logits, &fwd.probs, &y);
    if !loss.is_finite() {
        return Err(Error::Numerical {
            user_id: ex.user.user_id.clone(),
        });
    }
    dz.iter_mut().for_each(|x| *x *= weight);
    let dh = backprop_head(&fwd, params, &dz, g);
    backprop_hidden(&ex.user, &fwd, params, variant, &dh, g);
    Ok(loss)
}

/// Mean cross-entropy over `batch` and its gradient with respect to every
/// parameter.
pub fn gradients(batch: &[Example<'_>], params: &ModelParams, variant: AttentionVariant) -> Result<(f64, ParamGradients)> {
    if batch.is_empty() {
        return Err(Error::Config("gradient of an empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let parts = par::map_chunks(batch, GRAD_CHUNK, |chunk| -> Result<(f64, ParamGradients)> {
        let mut g = ParamGradients::zeros(params);
        let mut loss = 0.0;
        for ex in chunk {
            loss += accumulate_example(ex, params, variant, weight, &mut g)?;
        }
        Ok((loss, g))
    });
    let mut total = ParamGradients::zeros(params);
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss * weight, total))
}

/// Mean loss only (no gradient).
pub fn batch_loss(batch: &[Example<'_>], params: &ModelParams, variant: AttentionVariant) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("loss of an empty batch".into()));
    }
    let losses = par::map(batch, |ex| -> Result<f64> {
        let fwd = forward(&ex.user, params, variant)?;
        let y = ex.target.distribution(params.num_classes)?;
        Ok(cross_entropy_logits(&fwd.logits, &fwd.probs, &y).0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len() as f64)
}
