//! Run configuration with a canonical, key-sorted `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::feature_extractor::LAYERS;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Desk => "desk",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Self::Full => ModelConfig::full(),
            Self::Desk => ModelConfig::desk(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (full|desk)"))),
        }
    }
}

/// Everything a training or evaluation run needs besides data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Full)
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

impl RunConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            model: preset.model(),
            train: TrainConfig::default(),
            corpus_dir: String::new(),
            out_dir: "runs".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every field as a key-sorted map.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let m = &self.model;
        let t = &self.train;
        [
            ("attention", m.decoder.attention.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("buckets.lengths", list(&t.buckets.lengths)),
            ("buckets.widths", list(&t.buckets.widths)),
            ("cnn.channels", list(&m.cnn.channels)),
            ("cnn.dropout", m.cnn.dropout_p.to_string()),
            ("cnn.kernel", m.cnn.kernel.to_string()),
            ("decode.max_len", t.max_len.to_string()),
            ("decoder.embedding", m.decoder.embedding.to_string()),
            ("decoder.hidden", m.decoder.hidden.to_string()),
            ("decoder.input_feeding", m.decoder.input_feeding.to_string()),
            ("decoder.layers", m.decoder.layers.to_string()),
            ("encoder.hidden", m.encoder_hidden.to_string()),
            ("epochs", t.epochs.to_string()),
            ("optimizer.eps", t.optimizer.eps.to_string()),
            ("optimizer.lr", t.optimizer.lr.to_string()),
            ("optimizer.max_norm", t.max_norm.to_string()),
            ("optimizer.rho", t.optimizer.rho.to_string()),
            ("paths.corpus", self.corpus_dir.clone()),
            ("paths.out", self.out_dir.clone()),
            ("preset", self.preset.to_string()),
            ("seed", t.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "attention" => m.decoder.attention = v.parse()?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "buckets.lengths" => t.buckets.lengths = parse_list(key, v)?,
            "buckets.widths" => t.buckets.widths = parse_list(key, v)?,
            "cnn.channels" => {
                let c = parse_list(key, v)?;
                m.cnn.channels = c
                    .try_into()
                    .map_err(|_| Error::Config(format!("`cnn.channels` needs {LAYERS} values")))?;
            }
            "cnn.dropout" => m.cnn.dropout_p = parse(key, v)?,
            "cnn.kernel" => m.cnn.kernel = parse(key, v)?,
            "decode.max_len" => t.max_len = parse(key, v)?,
            "decoder.embedding" => m.decoder.embedding = parse(key, v)?,
            "decoder.hidden" => m.decoder.hidden = parse(key, v)?,
            "decoder.input_feeding" => m.decoder.input_feeding = parse(key, v)?,
            "decoder.layers" => m.decoder.layers = parse(key, v)?,
            "encoder.hidden" => m.encoder_hidden = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "optimizer.eps" => t.optimizer.eps = parse(key, v)?,
            "optimizer.lr" => t.optimizer.lr = parse(key, v)?,
            "optimizer.max_norm" => t.max_norm = parse(key, v)?,
            "optimizer.rho" => t.optimizer.rho = parse(key, v)?,
            "paths.corpus" => self.corpus_dir = v.to_string(),
            "paths.out" => self.out_dir = v.to_string(),
            "preset" => self.preset = v.parse()?,
            "seed" => t.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Builds from a map: the named preset (default full) supplies every
    /// unset field. Unknown keys are rejected.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let preset = map.get("preset").map(|p| p.parse()).transpose()?.unwrap_or(Preset::Full);
        let mut cfg = Self::for_preset(preset);
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate config key `{}`", k.trim())));
            }
        }
        Ok(map)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&Self::parse_text(text)?)
    }

    /// Canonical form: one `key=value` line per field, sorted by key.
    pub fn to_text(&self) -> String {
        self.to_map().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
