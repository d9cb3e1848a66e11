//! Run configuration and its `key = value` file format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::HeadConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub head: HeadConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Annotation file; images are resolved next to it. `None` means synthesize.
    pub dataset: Option<PathBuf>,
    pub synth_images: usize,
    pub synth_seed: u64,
    pub synth_size: usize,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            head: HeadConfig::default(),
            learning_rate: 0.0025,
            batch_size: 1,
            iterations: 2000,
            seed: 0,
            dataset: None,
            synth_images: 16,
            synth_seed: 0,
            synth_size: 128,
            checkpoint_interval: 500,
        }
    }
}

/// Keys accepted by [`RunConfig::set`].
pub const RUN_KEYS: &[&str] = &[
    "embed_dim",
    "roi_h",
    "roi_w",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "ffn_dim",
    "decoder_ffn",
    "layer_norm",
    "samples_per_bin",
    "backbone",
    "input_channels",
    "occluder",
    "visible",
    "invisible",
    "amodal",
    "learning_rate",
    "batch_size",
    "iterations",
    "seed",
    "dataset",
    "synth_images",
    "synth_seed",
    "synth_size",
    "checkpoint_interval",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.head;
        match key {
            "embed_dim" => h.embed_dim = parse(key, value)?,
            "roi_h" => h.roi_h = parse(key, value)?,
            "roi_w" => h.roi_w = parse(key, value)?,
            "heads" => h.heads = parse(key, value)?,
            "encoder_layers" => h.encoder_layers = parse(key, value)?,
            "decoder_layers" => h.decoder_layers = parse(key, value)?,
            "ffn_dim" => h.ffn_dim = parse(key, value)?,
            "decoder_ffn" => h.decoder_ffn = parse_bool(key, value)?,
            "layer_norm" => h.layer_norm = parse_bool(key, value)?,
            "samples_per_bin" => h.samples_per_bin = parse(key, value)?,
            "backbone" => h.backbone = parse(key, value)?,
            "input_channels" => h.input_channels = parse(key, value)?,
            "occluder" => h.queries.occluder = parse_bool(key, value)?,
            "visible" => h.queries.visible = parse_bool(key, value)?,
            "invisible" => h.queries.invisible = parse_bool(key, value)?,
            "amodal" => {
                if !parse_bool(key, value)? {
                    return Err(Error::Config("the amodal head cannot be disabled".into()));
                }
            }
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth_images" => self.synth_images = parse(key, value)?,
            "synth_seed" => self.synth_seed = parse(key, value)?,
            "synth_size" => self.synth_size = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("{origin}:{}", n + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    location,
                    message: format!("expected `key = value`, found {line:?}"),
                });
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                location,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, v) in [("batch_size", self.batch_size), ("synth_size", self.synth_size)] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
