//! Training configuration and its flat `key = value` file format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AttentionVariant, DEFAULT_DIM};
use crate::train::adam::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub variant: AttentionVariant,
    /// Channel embedding size used when no initial parameters are given.
    pub dim: usize,
    pub mixup: bool,
    pub sampling: bool,
    pub channel_dropout: bool,
    pub mixup_alpha: f64,
    pub sample_rate_max: f64,
    pub channel_dropout_prob: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.01,
            epochs: 50,
            adam: AdamConfig::default(),
            seed: 0,
            variant: AttentionVariant::Dyattn,
            dim: DEFAULT_DIM,
            mixup: true,
            sampling: true,
            channel_dropout: true,
            mixup_alpha: 0.1,
            sample_rate_max: 0.15,
            channel_dropout_prob: 0.1,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key {}", k.trim()),
            });
        }
    }
    Ok(out)
}

/// Remove `key` from `entries` and parse it, if present.
pub(crate) fn take<T: FromStr>(entries: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match entries.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
    }
}

impl TrainConfig {
    /// Defaults for self-supervised pretraining.
    pub fn pretraining() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            epochs: 5,
            ..Self::default()
        }
    }

    /// Overwrite fields from `entries`, consuming the keys it recognizes.
    pub fn apply_entries(mut self, entries: &mut BTreeMap<String, String>) -> Result<Self> {
        macro_rules! set {
            ($field:expr, $key:literal) => {
                if let Some(v) = take(entries, $key)? {
                    $field = v;
                }
            };
        }
        set!(self.batch_size, "batch_size");
        set!(self.learning_rate, "learning_rate");
        set!(self.epochs, "epochs");
        set!(self.adam.beta1, "beta1");
        set!(self.adam.beta2, "beta2");
        set!(self.adam.eps, "epsilon");
        set!(self.seed, "seed");
        set!(self.variant, "variant");
        set!(self.dim, "dim");
        set!(self.mixup, "mixup");
        set!(self.sampling, "sampling");
        set!(self.channel_dropout, "channel_dropout");
        set!(self.mixup_alpha, "mixup_alpha");
        set!(self.sample_rate_max, "sample_rate_max");
        set!(self.channel_dropout_prob, "channel_dropout_prob");
        set!(self.val_fraction, "val_fraction");
        set!(self.test_fraction, "test_fraction");
        self.validate()?;
        Ok(self)
    }

    /// Parse a config file on top of `base`; unknown keys are an error.
    pub fn parse(text: &str, base: Self) -> Result<Self> {
        let mut entries = parse_entries(text)?;
        let cfg = base.apply_entries(&mut entries)?;
        if let Some(k) = entries.keys().next() {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        Ok(cfg)
    }

    pub fn to_entries(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("batch_size", &self.batch_size);
        kv("learning_rate", &self.learning_rate);
        kv("epochs", &self.epochs);
        kv("beta1", &self.adam.beta1);
        kv("beta2", &self.adam.beta2);
        kv("epsilon", &self.adam.eps);
        kv("seed", &self.seed);
        kv("variant", &self.variant);
        kv("dim", &self.dim);
        kv("mixup", &self.mixup);
        kv("sampling", &self.sampling);
        kv("channel_dropout", &self.channel_dropout);
        kv("mixup_alpha", &self.mixup_alpha);
        kv("sample_rate_max", &self.sample_rate_max);
        kv("channel_dropout_prob", &self.channel_dropout_prob);
        kv("val_fraction", &self.val_fraction);
        kv("test_fraction", &self.test_fraction);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.dim == 0 {
            return bad("dim must be ≥ 1".into());
        }
        for (name, v) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1)"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return bad("validation and test fractions leave no training data".into());
        }
        for (name, v) in [
            ("sample_rate_max", self.sample_rate_max),
            ("channel_dropout_prob", self.channel_dropout_prob),
            ("beta1", self.adam.beta1),
            ("beta2", self.adam.beta2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0,1]"));
            }
        }
        if self.mixup && !(self.mixup_alpha.is_finite() && self.mixup_alpha > 0.0) {
            return bad(format!("mixup_alpha {} must be positive", self.mixup_alpha));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let cfg = TrainConfig {
            seed: 9,
            variant: AttentionVariant::Auto,
            learning_rate: 3e-5,
            mixup: false,
            ..TrainConfig::default()
        };
        let back = TrainConfig::parse(&cfg.to_entries(), TrainConfig::default()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = TrainConfig::parse("# comment\nepochs = 3\n\nseed=4 # trailing\n", TrainConfig::pretraining()).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.learning_rate), (3, 4, 3e-5));
        assert!(TrainConfig::parse("epochs = x", TrainConfig::default()).is_err());
        assert!(TrainConfig::parse("nope = 1", TrainConfig::default()).is_err());
        assert!(TrainConfig::parse("val_fraction = 1.0", TrainConfig::default()).is_err());
        assert!(TrainConfig::parse("channel_dropout_prob = 2", TrainConfig::default()).is_err());
        assert!(TrainConfig::parse("epochs 3", TrainConfig::default()).is_err());
    }
}
