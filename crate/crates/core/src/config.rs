//! Run configuration as plain `key=value` lines.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_text`] writes every key with defaults applied,
//! and parsing that text gives back an equal config.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::featurize::{FeaturizerKind, FeaturizerSpec, DEFAULT_BUCKETS, DEFAULT_EMBED_DIM};
use crate::model::{Mode, ModelConfig};
use crate::numcore::AdamConfig;
use crate::stdata::PayloadKind;

/// Image encoder choice; `Auto` picks from the dataset payload kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    Auto,
    Fixed(FeaturizerKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub d_fuse: usize,
    pub layers: usize,
    pub heads: usize,
    /// `None` means the mode's default.
    pub max_len: Option<usize>,
    pub coord_embed: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_fraction: f64,
    pub gene_featurizer: FeaturizerKind,
    pub gene_dim: usize,
    pub gene_buckets: usize,
    pub gene_trainable: bool,
    pub gene_source: Option<PathBuf>,
    pub image_featurizer: ImageKind,
    pub image_dim: usize,
    pub image_trainable: bool,
    pub image_source: Option<PathBuf>,
    /// Drop genes expressed in fewer spots than this (0 keeps all).
    pub min_spots: usize,
    /// Keep the union of each slide's top-k variable genes (0 keeps all).
    pub hvg_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::GeneAware,
            d_fuse: 256,
            layers: 2,
            heads: 8,
            max_len: None,
            coord_embed: false,
            epochs: 100,
            batch_size: 100,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_fraction: 0.1,
            gene_featurizer: FeaturizerKind::HashedText,
            gene_dim: DEFAULT_EMBED_DIM,
            gene_buckets: DEFAULT_BUCKETS,
            gene_trainable: false,
            gene_source: None,
            image_featurizer: ImageKind::Auto,
            image_dim: 32,
            image_trainable: false,
            image_source: None,
            min_spots: 0,
            hvg_k: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "d_fuse" => self.d_fuse = parse_num(key, value)?,
            "layers" => self.layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "max_len" => self.max_len = Some(parse_num(key, value)?),
            "coord_embed" => self.coord_embed = parse_bool(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_fraction" => self.eval_fraction = parse_num(key, value)?,
            "gene_featurizer" => self.gene_featurizer = value.parse()?,
            "gene_dim" => self.gene_dim = parse_num(key, value)?,
            "gene_buckets" => self.gene_buckets = parse_num(key, value)?,
            "gene_trainable" => self.gene_trainable = parse_bool(key, value)?,
            "gene_source" => self.gene_source = parse_path(value),
            "image_featurizer" => {
                self.image_featurizer = match value {
                    "auto" => ImageKind::Auto,
                    v => ImageKind::Fixed(v.parse()?),
                }
            }
            "image_dim" => self.image_dim = parse_num(key, value)?,
            "image_trainable" => self.image_trainable = parse_bool(key, value)?,
            "image_source" => self.image_source = parse_path(value),
            "min_spots" => self.min_spots = parse_num(key, value)?,
            "hvg_k" => self.hvg_k = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config("lr must be a finite non-negative number".into()));
        }
        if self.max_len == Some(0) {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if !matches!(self.gene_featurizer, FeaturizerKind::HashedText | FeaturizerKind::Precomputed) {
            return Err(Error::Config(format!(
                "{} cannot featurize genes",
                self.gene_featurizer.as_str()
            )));
        }
        if self.image_featurizer == ImageKind::Fixed(FeaturizerKind::HashedText) {
            return Err(Error::Config("hashed_text cannot featurize images".into()));
        }
        self.model_config(1, 1).validate()
    }

    pub fn max_len(&self) -> usize {
        self.max_len.unwrap_or_else(|| self.mode.default_max_len())
    }

    /// Fixes `image_featurizer=auto` to the kind matching the payload.
    pub fn resolve(&mut self, payload: PayloadKind) {
        if self.image_featurizer == ImageKind::Auto {
            self.image_featurizer = ImageKind::Fixed(match payload {
                PayloadKind::Patch => FeaturizerKind::PatchStats,
                PayloadKind::Feature => FeaturizerKind::Passthrough,
            });
        }
        self.max_len = Some(self.max_len());
    }

    pub fn gene_spec(&self) -> FeaturizerSpec {
        FeaturizerSpec {
            kind: self.gene_featurizer,
            output_dim: self.gene_dim,
            buckets: self.gene_buckets,
            trainable: self.gene_trainable,
            seed: self.seed,
            source: self.gene_source.clone(),
        }
    }

    /// Errors while the image featurizer is still `auto`.
    pub fn image_spec(&self) -> Result<FeaturizerSpec> {
        let ImageKind::Fixed(kind) = self.image_featurizer else {
            return Err(Error::Config("image featurizer not resolved against a dataset".into()));
        };
        Ok(FeaturizerSpec {
            kind,
            output_dim: self.image_dim,
            buckets: 0,
            trainable: self.image_trainable,
            seed: self.seed,
            source: self.image_source.clone(),
        })
    }

    pub fn model_config(&self, img_in_dim: usize, gene_in_dim: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            d_fuse: self.d_fuse,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len(),
            img_in_dim,
            gene_in_dim,
            seed: self.seed,
            coord_embed: self.coord_embed,
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

    pub fn to_text(&self) -> String {
        let image = match self.image_featurizer {
            ImageKind::Auto => "auto",
            ImageKind::Fixed(k) => k.as_str(),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("mode", self.mode.as_str().into()),
            ("d_fuse", self.d_fuse.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("max_len", self.max_len().to_string()),
            ("coord_embed", self.coord_embed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_fraction", self.eval_fraction.to_string()),
            ("gene_featurizer", self.gene_featurizer.as_str().into()),
            ("gene_dim", self.gene_dim.to_string()),
            ("gene_buckets", self.gene_buckets.to_string()),
            ("gene_trainable", self.gene_trainable.to_string()),
            ("gene_source", show_path(&self.gene_source)),
            ("image_featurizer", image.into()),
            ("image_dim", self.image_dim.to_string()),
            ("image_trainable", self.image_trainable.to_string()),
            ("image_source", show_path(&self.image_source)),
            ("min_spots", self.min_spots.to_string()),
            ("hvg_k", self.hvg_k.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
