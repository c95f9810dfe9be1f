//! Flat key=value run configuration: hand-parsed so the on-disk format is
//! bit-exact and dependency-free, with every key and default surfaced in
//! `--help`.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{parse_pattern, ModelConfig, ScanKind};
use crate::error::{MapError, Result};
use crate::masking::{DecoderStrategy, MaskStrategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

impl FromStr for Mode {
    type Err = MapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            _ => Err(MapError::Usage(format!(
                "unknown mode `{}` (pretrain|finetune)",
                s
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}",
            match self {
                Mode::Pretrain => "pretrain",
                Mode::Finetune => "finetune",
            }
        )
    }
}

/// Everything a run needs, serializable both as flat key=value text (the
/// config file format) and as JSON (the checkpoint echo).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub pattern: String,
    pub scan_order: ScanKind,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub decoder_strategy: DecoderStrategy,
    pub map_self_visible: bool,
    pub dim: usize,
    pub d_state: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: String,
    pub dataset_size: usize,
    pub val_frac: f64,
    pub transpose_images: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            pattern: "MMMTMMMT".into(),
            scan_order: ScanKind::RowFirst,
            mask_strategy: MaskStrategy::Random,
            mask_ratio: 0.5,
            decoder_strategy: DecoderStrategy::Map,
            map_self_visible: true,
            dim: 64,
            d_state: 8,
            heads: 2,
            mlp_ratio: 2,
            dec_dim: 64,
            dec_depth: 2,
            image_size: 32,
            patch_size: 4,
            channels: 1,
            num_classes: 4,
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac: 0.05,
            grad_clip: 1.0,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            dataset: "synthetic".into(),
            dataset_size: 512,
            val_frac: 0.2,
            transpose_images: false,
        }
    }
}

impl TrainConfig {
    /// Mode-appropriate defaults: fine-tuning starts from a smaller lr.
    pub fn default_for(mode: Mode) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.mode = mode;
        if mode == Mode::Finetune {
            cfg.lr = 5e-4;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        parse_pattern(&self.pattern)?;
        let check = |ok: bool, msg: String| {
            if ok {
                Ok(())
            } else {
                Err(MapError::Config { line: 0, msg })
            }
        };
        check(
            (0.0..=1.0).contains(&self.mask_ratio),
            format!("mask_ratio {} outside [0,1]", self.mask_ratio),
        )?;
        check(self.lr > 0.0, format!("lr {} must be > 0", self.lr))?;
        check(
            self.weight_decay >= 0.0,
            format!("weight_decay {} must be >= 0", self.weight_decay),
        )?;
        check(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            format!("betas ({}, {}) must lie in [0,1)", self.beta1, self.beta2),
        )?;
        check(
            (0.0..=1.0).contains(&self.warmup_frac),
            format!("warmup_frac {} outside [0,1]", self.warmup_frac),
        )?;
        check(
            (0.0..1.0).contains(&self.val_frac),
            format!("val_frac {} outside [0,1)", self.val_frac),
        )?;
        check(self.epochs >= 1, "epochs must be >= 1".into())?;
        check(self.batch_size >= 1, "batch_size must be >= 1".into())?;
        check(self.dataset_size >= 1, "dataset_size must be >= 1".into())?;
        check(
            self.num_classes >= 2,
            "num_classes must be >= 2".into(),
        )?;
        self.model_config()?.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            pattern: parse_pattern(&self.pattern)?,
            scan: self.scan_order,
            dim: self.dim,
            d_state: self.d_state,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            dec_dim: self.dec_dim,
            dec_depth: self.dec_depth,
            image_h: self.image_size,
            image_w: self.image_size,
            patch_h: self.patch_size,
            patch_w: self.patch_size,
            channels: self.channels,
            map_self_visible: self.map_self_visible,
        })
    }

    /// Canonical flat key=value dump; reloads to an identical config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (key, _, _) in KEYS {
            let _ = writeln!(s, "{}={}", key, self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "mode" => self.mode.to_string(),
            "pattern" => self.pattern.clone(),
            "scan_order" => self.scan_order.to_string(),
            "mask_strategy" => self.mask_strategy.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "decoder_strategy" => self.decoder_strategy.to_string(),
            "map_self_visible" => self.map_self_visible.to_string(),
            "dim" => self.dim.to_string(),
            "d_state" => self.d_state.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "dec_dim" => self.dec_dim.to_string(),
            "dec_depth" => self.dec_depth.to_string(),
            "image_size" => self.image_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "channels" => self.channels.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "warmup_frac" => self.warmup_frac.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.clone(),
            "dataset_size" => self.dataset_size.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "transpose_images" => self.transpose_images.to_string(),
            _ => unreachable!("unknown key {}", key),
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn parse<T: FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| MapError::Config {
                line,
                msg: format!("cannot parse `{}` for key `{}`", value, key),
            })
        }
        match key {
            "mode" => self.mode = parse(value, key, line)?,
            "pattern" => self.pattern = value.to_string(),
            "scan_order" => self.scan_order = parse(value, key, line)?,
            "mask_strategy" => self.mask_strategy = parse(value, key, line)?,
            "mask_ratio" => self.mask_ratio = parse(value, key, line)?,
            "decoder_strategy" => self.decoder_strategy = parse(value, key, line)?,
            "map_self_visible" => self.map_self_visible = parse(value, key, line)?,
            "dim" => self.dim = parse(value, key, line)?,
            "d_state" => self.d_state = parse(value, key, line)?,
            "heads" => self.heads = parse(value, key, line)?,
            "mlp_ratio" => self.mlp_ratio = parse(value, key, line)?,
            "dec_dim" => self.dec_dim = parse(value, key, line)?,
            "dec_depth" => self.dec_depth = parse(value, key, line)?,
            "image_size" => self.image_size = parse(value, key, line)?,
            "patch_size" => self.patch_size = parse(value, key, line)?,
            "channels" => self.channels = parse(value, key, line)?,
            "num_classes" => self.num_classes = parse(value, key, line)?,
            "lr" => self.lr = parse(value, key, line)?,
            "weight_decay" => self.weight_decay = parse(value, key, line)?,
            "beta1" => self.beta1 = parse(value, key, line)?,
            "beta2" => self.beta2 = parse(value, key, line)?,
            "eps" => self.eps = parse(value, key, line)?,
            "warmup_frac" => self.warmup_frac = parse(value, key, line)?,
            "grad_clip" => self.grad_clip = parse(value, key, line)?,
            "epochs" => self.epochs = parse(value, key, line)?,
            "batch_size" => self.batch_size = parse(value, key, line)?,
            "seed" => self.seed = parse(value, key, line)?,
            "dataset" => self.dataset = value.to_string(),
            "dataset_size" => self.dataset_size = parse(value, key, line)?,
            "val_frac" => self.val_frac = parse(value, key, line)?,
            "transpose_images" => self.transpose_images = parse(value, key, line)?,
            _ => {
                let valid: Vec<&str> = KEYS.iter().map(|(k, _, _)| *k).collect();
                return Err(MapError::Config {
                    line,
                    msg: format!(
                        "unknown key `{}`; valid keys: {}",
                        key,
                        valid.join(", ")
                    ),
                });
            }
        }
        Ok(())
    }
}

/// (key, default, description) for every config key; the single source for
/// parsing, dumping, and `--help`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "pretrain", "run mode: pretrain|finetune"),
    ("pattern", "MMMTMMMT", "backbone block pattern over {M,T}"),
    ("scan_order", "row_first", "SSM token order: row_first|column_first"),
    ("mask_strategy", "random", "masking: random|sequential|diagonal"),
    ("mask_ratio", "0.5", "fraction of tokens masked, in [0,1]"),
    ("decoder_strategy", "map", "decoder visibility: ar|mae|local_mae|map"),
    ("map_self_visible", "true", "masked MAP queries may attend to self"),
    ("dim", "64", "encoder width"),
    ("d_state", "8", "SSM state size per channel"),
    ("heads", "2", "attention heads (encoder and decoder)"),
    ("mlp_ratio", "2", "MLP hidden width multiplier"),
    ("dec_dim", "64", "decoder width"),
    ("dec_depth", "2", "decoder block count"),
    ("image_size", "32", "square image side in pixels"),
    ("patch_size", "4", "square patch side in pixels"),
    ("channels", "1", "image channels"),
    ("num_classes", "4", "label count for classification"),
    ("lr", "0.001", "peak learning rate (finetune default 0.0005)"),
    ("weight_decay", "0.05", "decoupled AdamW weight decay"),
    ("beta1", "0.9", "AdamW beta1"),
    ("beta2", "0.999", "AdamW beta2"),
    ("eps", "0.00000001", "AdamW epsilon"),
    ("warmup_frac", "0.05", "fraction of steps spent in linear warmup"),
    ("grad_clip", "1", "global gradient-norm clip (0 disables)"),
    ("epochs", "10", "training epochs"),
    ("batch_size", "64", "images per optimizer step"),
    ("seed", "0", "master RNG seed"),
    ("dataset", "synthetic", "archive path, or `synthetic`"),
    ("dataset_size", "512", "image count when dataset=synthetic"),
    ("val_frac", "0.2", "held-out fraction for accuracy reporting"),
    (
        "transpose_images",
        "false",
        "transpose each image after cropping (swaps row/column roles)",
    ),
];

/// Help text block enumerating every config key and its default.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key=value, one per line; # comments):\n");
    for (key, default, desc) in KEYS {
        let _ = writeln!(s, "  {:<17} {} (default {})", key, desc, default);
    }
    s
}

/// Parse flat key=value text. Blank lines and `#` comments are skipped;
/// `[section]` headers are tolerated and ignored. Unknown keys and malformed
/// lines fail with their line number.
pub fn parse_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if s.starts_with('[') && s.ends_with(']') {
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| MapError::Config {
            line,
            msg: format!("expected key=value, got `{}`", s),
        })?;
        cfg.set(key.trim(), value.trim(), line)?;
    }
    cfg.validate().map_err(|e| match e {
        // attribute whole-file validation to the file, not a line
        MapError::Config { msg, .. } => MapError::Config { line: 0, msg },
        other => other,
    })?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path, base: TrainConfig) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_defaults() {
        let cfg = parse_config("", TrainConfig::default()).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.pattern, "MMMTMMMT");
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.mask_strategy, MaskStrategy::Random);
        assert_eq!(cfg.decoder_strategy, DecoderStrategy::Map);
    }

    #[test]
    fn comments_sections_and_overrides() {
        let text = "# a comment\n[model]\ndim=32\nheads=4\n\n[train]\nlr = 0.01\n";
        let cfg = parse_config(text, TrainConfig::default()).unwrap();
        assert_eq!(cfg.dim, 32);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn out_of_range_ratio_rejected() {
        let err = parse_config("mask_ratio=1.5", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("mask_ratio"));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config("dim=8\nbogus=1\n", TrainConfig::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"));
        assert!(msg.contains("line 2"));
        assert!(msg.contains("mask_ratio"), "valid keys not listed: {}", msg);
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_config("dim=8\nnot a pair\n", TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = TrainConfig::default_for(Mode::Finetune);
        cfg.pattern = "MT".into();
        cfg.mask_ratio = 0.25;
        cfg.scan_order = ScanKind::ColumnFirst;
        cfg.seed = 99;
        cfg.dataset = "data.bin".into();
        let reloaded = parse_config(&cfg.dump(), TrainConfig::default()).unwrap();
        assert_eq!(cfg, reloaded);
    }

    #[test]
    fn keys_table_matches_defaults() {
        // the documented defaults in KEYS must agree with Default::default()
        let cfg = TrainConfig::default();
        for (key, default, _) in KEYS {
            assert_eq!(
                &cfg.get(key),
                default,
                "KEYS default for `{}` drifted",
                key
            );
        }
    }

    #[test]
    fn finetune_defaults_lower_lr() {
        let cfg = TrainConfig::default_for(Mode::Finetune);
        assert_eq!(cfg.mode, Mode::Finetune);
        assert_eq!(cfg.lr, 5e-4);
    }

    #[test]
    fn invalid_pattern_rejected() {
        assert!(parse_config("pattern=MQ", TrainConfig::default()).is_err());
    }

    #[test]
    fn indivisible_geometry_rejected() {
        assert!(parse_config("image_size=30", TrainConfig::default()).is_err());
        assert!(parse_config("dim=65", TrainConfig::default()).is_err());
    }

    #[test]
    fn json_round_trip_for_checkpoint_echo() {
        let cfg = TrainConfig::default();
        let js = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(cfg, back);
    }
}
