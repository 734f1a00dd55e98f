#![allow(dead_code)]

use fsspip::model::{init_params, ModelParams};
use fsspip::schema::{ChannelData, ChannelKind, ChannelSchema, ChannelizedUser, Feature, Source};
use fsspip::train::Target;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const D_EM: usize = 3;
pub const VLEN: usize = 10;

/// One dense and two sparse channels.
pub fn small_schema() -> ChannelSchema {
    ChannelSchema::from_channels(&[
        (Source::Tweet, Feature::Text),
        (Source::Tweet, Feature::Hashtags),
        (Source::Profile, Feature::FollowerIds),
    ])
    .unwrap()
}

pub fn vocab_sizes(schema: &ChannelSchema, vlen: usize) -> Vec<usize> {
    schema
        .channels()
        .iter()
        .map(|c| if c.kind == ChannelKind::Sparse { vlen } else { 0 })
        .collect()
}

/// Initialized parameters with every scalar group moved off its default.
pub fn random_params(schema: &ChannelSchema, d: usize, k: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = init_params(schema, &vocab_sizes(schema, VLEN), d, D_EM, k, rng.random()).unwrap();
    p.rho_p = rng.random_range(-1.5..1.5);
    p.rho_q = rng.random_range(-1.5..1.5);
    p.rho_k = rng.random_range(-1.5..1.5);
    p.fixed_logits.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    p.bias.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
    p
}

pub fn random_user(schema: &ChannelSchema, id: usize, vlen: usize, rng: &mut impl Rng) -> ChannelizedUser {
    let mut u = ChannelizedUser::empty(schema, format!("u{id}"), D_EM);
    for (desc, data) in schema.channels().iter().zip(u.channels.iter_mut()) {
        *data = match desc.kind {
            ChannelKind::Sparse => ChannelData::Sparse((0..vlen as u32).filter(|_| rng.random_bool(0.3)).collect()),
            ChannelKind::Dense => ChannelData::Dense((0..D_EM).map(|_| rng.random_range(-1.0..1.0)).collect()),
        };
    }
    u
}

pub fn random_target(k: usize, soft: bool, rng: &mut impl Rng) -> Target {
    if soft {
        let lambda: f64 = rng.random();
        let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
        let mut y = vec![0.0; k];
        y[a] += lambda;
        y[b] += 1.0 - lambda;
        Target::Soft(y)
    } else {
        Target::Class(rng.random_range(0..k))
    }
}

/// Write `value` at flat position `index` of the canonical parameter order.
pub fn set_flat(p: &mut ModelParams, mut index: usize, value: f64) {
    for s in p.slices_mut() {
        if index < s.len() {
            s[index] = value;
            return;
        }
        index -= s.len();
    }
    panic!("flat index out of range");
}

pub fn flat(p: &ModelParams) -> Vec<f64> {
    p.slices().iter().flat_map(|s| s.iter().copied()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
