//! Flat key=value run configuration: encoder dims, prompt setup, fusion
//! knobs, and training hyperparameters. The canonical dump is what gets
//! digested and embedded in checkpoints, so parsing its own output must
//! be lossless.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hsf::{HsfConfig, HsfVariant, ScoreSource};
use crate::model::ModelConfig;
use crate::prompts::PromptConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    image_size: 64,
                    patch_size: 8,
                    embed_dim_v: 32,
                    embed_dim_t: 32,
                    shared_dim: 32,
                    num_layers: 6,
                    num_heads: 4,
                    context_len: 16,
                    hierarchy_layers: vec![2, 3, 4, 6],
                },
                prompt: PromptConfig {
                    depth: 4,
                    depth_text: None,
                    length: 5,
                    enable_static: true,
                    enable_dynamic: true,
                },
                hsf: HsfConfig::default(),
                per_layer_projection: false,
                temperature: 1.0,
                seed: 0,
            },
            train: TrainConfig::default(),
        }
    }
}

fn fmt_bool(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

impl RunConfig {
    /// Canonical dump: one `key=value` per line, keys sorted.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let p = &m.prompt;
        let h = &m.hsf;
        let t = &self.train;
        let hierarchy: Vec<String> = e.hierarchy_layers.iter().map(|v| v.to_string()).collect();
        let mut pairs: Vec<(String, String)> = vec![
            ("encoder.image_size".into(), e.image_size.to_string()),
            ("encoder.patch_size".into(), e.patch_size.to_string()),
            ("encoder.embed_dim_v".into(), e.embed_dim_v.to_string()),
            ("encoder.embed_dim_t".into(), e.embed_dim_t.to_string()),
            ("encoder.shared_dim".into(), e.shared_dim.to_string()),
            ("encoder.num_layers".into(), e.num_layers.to_string()),
            ("encoder.num_heads".into(), e.num_heads.to_string()),
            ("encoder.context_len".into(), e.context_len.to_string()),
            ("encoder.hierarchy_layers".into(), hierarchy.join(",")),
            ("prompt.depth".into(), p.depth.to_string()),
            (
                "prompt.depth_text".into(),
                p.depth_text.map_or_else(|| "same".to_string(), |v| v.to_string()),
            ),
            ("prompt.length".into(), p.length.to_string()),
            ("prompt.enable_static".into(), fmt_bool(p.enable_static).to_string()),
            ("prompt.enable_dynamic".into(), fmt_bool(p.enable_dynamic).to_string()),
            ("hsf.k".into(), h.k.to_string()),
            ("hsf.seed".into(), h.seed.to_string()),
            ("hsf.max_iter".into(), h.max_iter.to_string()),
            (
                "hsf.variant".into(),
                match h.variant {
                    HsfVariant::Top1 => "top1".to_string(),
                    HsfVariant::Legacy => "legacy".to_string(),
                },
            ),
            (
                "hsf.score_source".into(),
                match h.score_source {
                    ScoreSource::Aggregated => "aggregated".to_string(),
                    ScoreSource::PerLayer => "per_layer".to_string(),
                },
            ),
            ("hsf.topk".into(), h.topk.to_string()),
            ("hsf.legacy_clusters".into(), h.legacy_clusters.to_string()),
            ("model.per_layer_projection".into(), fmt_bool(m.per_layer_projection).to_string()),
            ("model.temperature".into(), m.temperature.to_string()),
            ("model.seed".into(), m.seed.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.learning_rate".into(), t.learning_rate.to_string()),
            ("train.momentum".into(), t.momentum.to_string()),
            ("train.w_focal_map".into(), t.w_focal_map.to_string()),
            ("train.w_dice_map".into(), t.w_dice_map.to_string()),
            ("train.w_focal_score".into(), t.w_focal_score.to_string()),
            ("train.focal_gamma".into(), t.focal_gamma.to_string()),
            ("train.focal_alpha".into(), t.focal_alpha.to_string()),
            ("train.dice_eps".into(), t.dice_eps.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.seed".into(), t.seed.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parse `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are usage errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::input(format!("config line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::input(format!("config line {}: {e}", lineno + 1))
            })?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| Error::input(format!("invalid value {v:?} for {key}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::input(format!("invalid bool {v:?} for {key}"))),
            }
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "encoder.image_size" => m.encoder.image_size = num(key, value)?,
            "encoder.patch_size" => m.encoder.patch_size = num(key, value)?,
            "encoder.embed_dim_v" => m.encoder.embed_dim_v = num(key, value)?,
            "encoder.embed_dim_t" => m.encoder.embed_dim_t = num(key, value)?,
            "encoder.shared_dim" => m.encoder.shared_dim = num(key, value)?,
            "encoder.num_layers" => m.encoder.num_layers = num(key, value)?,
            "encoder.num_heads" => m.encoder.num_heads = num(key, value)?,
            "encoder.context_len" => m.encoder.context_len = num(key, value)?,
            "encoder.hierarchy_layers" => {
                m.encoder.hierarchy_layers = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "prompt.depth" => m.prompt.depth = num(key, value)?,
            "prompt.depth_text" => {
                m.prompt.depth_text =
                    if value == "same" { None } else { Some(num(key, value)?) };
            }
            "prompt.length" => m.prompt.length = num(key, value)?,
            "prompt.enable_static" => m.prompt.enable_static = boolean(key, value)?,
            "prompt.enable_dynamic" => m.prompt.enable_dynamic = boolean(key, value)?,
            "hsf.k" => m.hsf.k = num(key, value)?,
            "hsf.seed" => m.hsf.seed = num(key, value)?,
            "hsf.max_iter" => m.hsf.max_iter = num(key, value)?,
            "hsf.variant" => {
                m.hsf.variant = match value {
                    "top1" => HsfVariant::Top1,
                    "legacy" => HsfVariant::Legacy,
                    _ => return Err(Error::input(format!("invalid hsf.variant {value:?}"))),
                };
            }
            "hsf.score_source" => {
                m.hsf.score_source = match value {
                    "aggregated" => ScoreSource::Aggregated,
                    "per_layer" => ScoreSource::PerLayer,
                    _ => return Err(Error::input(format!("invalid hsf.score_source {value:?}"))),
                };
            }
            "hsf.topk" => m.hsf.topk = num(key, value)?,
            "hsf.legacy_clusters" => m.hsf.legacy_clusters = num(key, value)?,
            "model.per_layer_projection" => m.per_layer_projection = boolean(key, value)?,
            "model.temperature" => m.temperature = num(key, value)?,
            "model.seed" => m.seed = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.learning_rate" => t.learning_rate = num(key, value)?,
            "train.momentum" => t.momentum = num(key, value)?,
            "train.w_focal_map" => t.w_focal_map = num(key, value)?,
            "train.w_dice_map" => t.w_dice_map = num(key, value)?,
            "train.w_focal_score" => t.w_focal_score = num(key, value)?,
            "train.focal_gamma" => t.focal_gamma = num(key, value)?,
            "train.focal_alpha" => t.focal_alpha = num(key, value)?,
            "train.dice_eps" => t.dice_eps = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            other => return Err(Error::input(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// SHA-256 of the canonical dump.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
