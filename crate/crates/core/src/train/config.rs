//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{SpatialTanh, Variant};
use crate::encoder::DEFAULT_MAX_QUESTION_LEN;
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::train::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            _ => Err(Error::invalid(format!(
                "unknown profile `{s}` (valid: desk, full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub dropout: f64,
    pub seed: u64,
    pub profile: Profile,
    pub variant: Variant,
    pub spatial_tanh: SpatialTanh,
    pub max_question_len: usize,
    /// Layer-size overrides on top of the profile.
    pub embed: Option<usize>,
    pub hidden: Option<usize>,
    pub attention_hidden: Option<usize>,
    pub fused_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 30,
            clip_norm: 10.0,
            dropout: 0.5,
            seed: 0,
            profile: Profile::Desk,
            variant: Variant::Cva,
            spatial_tanh: SpatialTanh::default(),
            max_question_len: DEFAULT_MAX_QUESTION_LEN,
            embed: None,
            hidden: None,
            attention_hidden: None,
            fused_hidden: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "clip_norm",
    "dropout",
    "seed",
    "profile",
    "variant",
    "spatial_tanh",
    "max_question_len",
    "embed",
    "hidden",
    "attention_hidden",
    "fused_hidden",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl TrainConfig {
    /// Published optimization settings: batch 256 at full layer sizes.
    pub fn full() -> Self {
        TrainConfig {
            profile: Profile::Full,
            batch_size: 256,
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Layer sizes for a dataset with the given vocabulary, channel, and
    /// answer counts.
    pub fn dims(&self, vocab: usize, channels: usize, answers: usize) -> ModelDims {
        let mut d = match self.profile {
            Profile::Desk => ModelDims::desk(vocab, channels, answers),
            Profile::Full => ModelDims {
                vocab,
                channels,
                answers,
                ..ModelDims::full(vocab)
            },
        };
        d.embed = self.embed.unwrap_or(d.embed);
        d.hidden = self.hidden.unwrap_or(d.hidden);
        d.attention = self.attention_hidden.unwrap_or(d.attention);
        d.fused = self.fused_hidden.unwrap_or(d.fused);
        d
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "profile" => self.profile = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "spatial_tanh" => self.spatial_tanh = value.parse()?,
            "max_question_len" => self.max_question_len = parse(key, value)?,
            "embed" => self.embed = parse_opt(key, value)?,
            "hidden" => self.hidden = parse_opt(key, value)?,
            "attention_hidden" => self.attention_hidden = parse_opt(key, value)?,
            "fused_hidden" => self.fused_hidden = parse_opt(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_question_len == 0 {
            return bad("max_question_len must be at least 1".into());
        }
        for (name, v) in [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("attention_hidden", self.attention_hidden),
            ("fused_hidden", self.fused_hidden),
        ] {
            if v == Some(0) {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; keys outside the config are rejected with their line.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text, |_| false)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines, silently skipping keys for which
    /// `ignore` returns true.
    pub fn apply_kv(&mut self, text: &str, ignore: impl Fn(&str) -> bool) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected `key = value`, found `{line}`"),
                });
            };
            let k = k.trim();
            if ignore(k) {
                continue;
            }
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |v| v.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("clip_norm", format!("{:?}", self.clip_norm));
        kv("dropout", format!("{:?}", self.dropout));
        kv("seed", self.seed.to_string());
        kv("profile", self.profile.name().into());
        kv("variant", self.variant.name().into());
        kv("spatial_tanh", self.spatial_tanh.as_str().into());
        kv("max_question_len", self.max_question_len.to_string());
        kv("embed", opt(self.embed));
        kv("hidden", opt(self.hidden));
        kv("attention_hidden", opt(self.attention_hidden));
        kv("fused_hidden", opt(self.fused_hidden));
        s
    }
}
