//! Flat `key = value` config files.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a trailing comment. Keys may appear once. Unknown keys are errors.
//!
//! Run config keys (network then training):
//!
//! | key | default |
//! |-----|---------|
//! | `growth_rate` | 10 |
//! | `layers_per_block` | 5 |
//! | `depth` | 4 |
//! | `final_block_layers` | 4 |
//! | `leaky_alpha` | 0.01 |
//! | `lambda_p`, `lambda_h` | 0.5 |
//! | `lr0` | 0.001 |
//! | `batch_size` | 8 |
//! | `plateau_patience` | 3 |
//! | `plateau_factor` | 0.5 |
//! | `stop_patience` | 15 |
//! | `max_epochs` | 200 |
//! | `seed` | 0 |
//! | `val_fraction` | 0.2 |

use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

/// Value with the line it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub value: String,
}

pub fn parse_key_values(text: &str) -> Result<IndexMap<String, Entry>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config { line, msg: format!("expected `key = value`, got `{content}`") })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config { line, msg: "empty key or value".into() });
        }
        if out.insert(key.to_string(), Entry { line, value: value.to_string() }).is_some() {
            return Err(Error::Config { line, msg: format!("duplicate key `{key}`") });
        }
    }
    Ok(out)
}

/// Pulls typed values out of a parsed file; leftover keys are reported by
/// [`Fields::finish`].
pub(crate) struct Fields(IndexMap<String, Entry>);

impl Fields {
    pub(crate) fn new(text: &str) -> Result<Self> {
        parse_key_values(text).map(Self)
    }

    pub(crate) fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(e) = self.0.shift_remove(key) {
            *slot = e
                .value
                .parse()
                .map_err(|_| Error::Config { line: e.line, msg: format!("invalid value `{}` for `{key}`", e.value) })?;
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.0.into_iter().next() {
            Some((key, e)) => Err(Error::Config { line: e.line, msg: format!("unknown key `{key}`") }),
            None => Ok(()),
        }
    }
}

/// Network and training settings for `train` and `param-count`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub training: TrainConfig,
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut f = Fields::new(text)?;
        let mut cfg = RunConfig::default();
        let n = &mut cfg.network;
        f.take("growth_rate", &mut n.growth_rate)?;
        f.take("layers_per_block", &mut n.layers_per_block)?;
        f.take("depth", &mut n.depth)?;
        f.take("final_block_layers", &mut n.final_block_layers)?;
        f.take("leaky_alpha", &mut n.leaky_alpha)?;
        let t = &mut cfg.training;
        f.take("lambda_p", &mut t.lambda_p)?;
        f.take("lambda_h", &mut t.lambda_h)?;
        f.take("lr0", &mut t.lr0)?;
        f.take("batch_size", &mut t.batch_size)?;
        f.take("plateau_patience", &mut t.plateau_patience)?;
        f.take("plateau_factor", &mut t.plateau_factor)?;
        f.take("stop_patience", &mut t.stop_patience)?;
        f.take("max_epochs", &mut t.max_epochs)?;
        f.take("seed", &mut t.seed)?;
        f.take("val_fraction", &mut t.val_fraction)?;
        f.finish()?;
        cfg.network.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }
}
