//! Per-example augmentations: mixup, feature sampling and channel dropout.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::schema::{ChannelData, ChannelizedUser};

fn one_hot(user: &ChannelizedUser, num_classes: usize) -> Result<Vec<f64>> {
    match user.label {
        Some(c) if c < num_classes => {
            let mut y = vec![0.0; num_classes];
            y[c] = 1.0;
            Ok(y)
        }
        Some(c) => Err(Error::Validation(format!(
            "user {}: label {c} outside 0..{num_classes}",
            user.user_id
        ))),
        None => Err(Error::Validation(format!("user {} has no label to mix", user.user_id))),
    }
}

/// Draw `λ ~ Beta(alpha, alpha)` and mix two labeled users.
pub fn augment_mixup<R: Rng + ?Sized>(
    u1: &ChannelizedUser,
    u2: &ChannelizedUser,
    num_classes: usize,
    rng: &mut R,
    alpha: f64,
) -> Result<(ChannelizedUser, Vec<f64>)> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    let lambda = beta.sample(rng);
    mixup_with_lambda(u1, u2, num_classes, lambda, rng)
}

/// Mixup at a given `λ`: each sparse feature of `u1` survives with
/// probability `λ` and each of `u2` with `1−λ`; dense vectors and one-hot
/// labels are interpolated.
pub fn mixup_with_lambda<R: Rng + ?Sized>(
    u1: &ChannelizedUser,
    u2: &ChannelizedUser,
    num_classes: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(ChannelizedUser, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixing weight {lambda} outside [0,1]")));
    }
    if u1.channels.len() != u2.channels.len() {
        return Err(Error::Dimension("mixup of users with different channel counts".into()));
    }
    let y1 = one_hot(u1, num_classes)?;
    let y2 = one_hot(u2, num_classes)?;
    let mut channels = Vec::with_capacity(u1.channels.len());
    for (a, b) in u1.channels.iter().zip(&u2.channels) {
        channels.push(match (a, b) {
            (ChannelData::Sparse(fa), ChannelData::Sparse(fb)) => {
                let mut kept: Vec<u32> = fa.iter().copied().filter(|_| rng.random_bool(lambda)).collect();
                kept.extend(fb.iter().copied().filter(|_| rng.random_bool(1.0 - lambda)));
                kept.sort_unstable();
                kept.dedup();
                ChannelData::Sparse(kept)
            }
            (ChannelData::Dense(va), ChannelData::Dense(vb)) if va.len() == vb.len() => {
                ChannelData::Dense(va.iter().zip(vb).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect())
            }
            _ => return Err(Error::Dimension("mixup of mismatched channels".into())),
        });
    }
    let label: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
    let user = ChannelizedUser {
        user_id: format!("{}+{}", u1.user_id, u2.user_id),
        channels,
        label: None,
        attrs: Default::default(),
    };
    Ok((user, label))
}

/// Drop a uniformly drawn fraction `m ~ U(0, rate_max)` of each sparse
/// channel's features. Returns the reduced user and the dropped indices per
/// channel (always empty for dense channels).
pub fn augment_sample<R: Rng + ?Sized>(
    user: &ChannelizedUser,
    rng: &mut R,
    rate_max: f64,
) -> Result<(ChannelizedUser, Vec<Vec<u32>>)> {
    if !(0.0..=1.0).contains(&rate_max) {
        return Err(Error::Config(format!("sample rate {rate_max} outside [0,1]")));
    }
    let mut out = user.clone();
    let mut masked = vec![Vec::new(); user.channels.len()];
    for (data, mask) in out.channels.iter_mut().zip(masked.iter_mut()) {
        if let ChannelData::Sparse(ix) = data {
            let m = rng.random::<f64>() * rate_max;
            let mut kept = Vec::with_capacity(ix.len());
            for &i in ix.iter() {
                if rng.random_bool(m) {
                    mask.push(i);
                } else {
                    kept.push(i);
                }
            }
            *ix = kept;
        }
    }
    Ok((out, masked))
}

/// Empty each channel independently with probability `prob`.
pub fn augment_channel_dropout<R: Rng + ?Sized>(user: &ChannelizedUser, rng: &mut R, prob: f64) -> Result<ChannelizedUser> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Config(format!("dropout probability {prob} outside [0,1]")));
    }
    let mut out = user.clone();
    for data in out.channels.iter_mut() {
        if rng.random_bool(prob) {
            data.clear();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ChannelSchema;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn user(schema: &ChannelSchema, id: &str, label: usize, feats: Vec<u32>, dense: f64) -> ChannelizedUser {
        let mut u = ChannelizedUser::empty(schema, id, 2);
        u.label = Some(label);
        u.channels[2] = ChannelData::Sparse(feats);
        u.channels[0] = ChannelData::Dense(vec![dense, -dense]);
        u
    }

    #[test]
    fn mixup_limits() {
        let s = ChannelSchema::default_schema();
        let a = user(&s, "a", 0, vec![1, 2, 3], 1.0);
        let b = user(&s, "b", 1, vec![4, 5], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, y) = mixup_with_lambda(&a, &b, 2, 1.0, &mut rng).unwrap();
        assert_eq!(m.channels, a.channels);
        assert_eq!(y, vec![1.0, 0.0]);
        let (m, y) = mixup_with_lambda(&a, &b, 2, 0.0, &mut rng).unwrap();
        assert_eq!(m.channels, b.channels);
        assert_eq!(y, vec![0.0, 1.0]);
        let (m, y) = mixup_with_lambda(&a, &b, 2, 0.25, &mut rng).unwrap();
        assert_eq!(m.channels[0], ChannelData::Dense(vec![2.5, -2.5]));
        assert_eq!(y, vec![0.25, 0.75]);
    }

    #[test]
    fn sample_partitions_features() {
        let s = ChannelSchema::default_schema();
        let u = user(&s, "a", 0, (0..50).collect(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (same, mask) = augment_sample(&u, &mut rng, 0.0).unwrap();
        assert_eq!(same, u);
        assert!(mask.iter().all(Vec::is_empty));
        let (kept, mask) = augment_sample(&u, &mut rng, 1.0).unwrap();
        let mut all: Vec<u32> = kept.channels[2].sparse().unwrap().to_vec();
        all.extend(&mask[2]);
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(kept.channels[0], u.channels[0]);
    }

    #[test]
    fn dropout_limits() {
        let s = ChannelSchema::default_schema();
        let u = user(&s, "a", 0, vec![1], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(augment_channel_dropout(&u, &mut rng, 0.0).unwrap(), u);
        let d = augment_channel_dropout(&u, &mut rng, 1.0).unwrap();
        assert!(d.channels.iter().all(ChannelData::is_empty));
        assert!(augment_channel_dropout(&u, &mut rng, 1.5).is_err());
    }
}
