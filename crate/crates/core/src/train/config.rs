//! Run configuration in a flat `key = value` text format. Lines starting
//! with `#` are comments. Unknown keys are rejected with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::augment::{AugmentConfig, NoiseSource};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Stage};
use crate::nn::AdamConfig;
use crate::synth::InterferenceMode;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// `None` selects the stage default (1e-3 pretrain, 1e-4 finetune).
    pub lr: Option<f64>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: None, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pretrain_mode: InterferenceMode,
    pub clip_duration_s: f64,
    pub snr_range_db: (f64, f64),
    /// Mixtures drawn per pretraining epoch; 0 means one per corpus clip.
    pub samples_per_epoch: usize,
    pub val_fraction: f64,
    pub grad_clip: f64,
    pub bn_momentum: f64,
    /// Plus-and-minus augmentation during fine-tuning.
    pub augment_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            epochs: 20,
            seed: 0,
            pretrain_mode: InterferenceMode::SSN,
            clip_duration_s: 4.0,
            snr_range_db: (-10.0, 10.0),
            samples_per_epoch: 0,
            val_fraction: 0.05,
            grad_clip: 5.0,
            bn_momentum: 0.1,
            augment_enabled: true,
        }
    }
}

fn pair(v: (f64, f64)) -> String {
    format!("{}, {}", v.0, v.1)
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_usize(s: &str) -> std::result::Result<usize, String> {
    s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"))
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got `{s}`"));
    }
    Ok((parse_f64(parts[0])?, parse_f64(parts[1])?))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected true/false, got `{other}`")),
    }
}

impl RunConfig {
    pub fn adam(&self, stage: Stage) -> AdamConfig {
        let lr = self.optimizer.lr.unwrap_or(match stage {
            Stage::Pretrain => 1e-3,
            Stage::Finetune => 1e-4,
        });
        AdamConfig {
            lr,
            beta1: self.optimizer.betas.0,
            beta2: self.optimizer.betas.1,
            eps: self.optimizer.eps,
            weight_decay: self.optimizer.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if let Some(lr) = self.optimizer.lr {
            if !(lr > 0.0) {
                return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.clip_duration_s != 4.0 {
            return Err(Error::invalid(format!(
                "pretraining clips must be 4 s, got {}",
                self.clip_duration_s
            )));
        }
        if !(self.snr_range_db.0 <= self.snr_range_db.1) {
            return Err(Error::invalid("snr_range_db must be ordered"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::invalid("grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        for (k, v) in self.model.to_pairs() {
            kv(&format!("model.{k}"), v.to_string());
        }
        let a = &self.augment;
        kv("augment.audio_mask_frac", a.audio_mask_frac.to_string());
        kv("augment.visual_mask_frac", a.visual_mask_frac.to_string());
        kv("augment.segment_dur_range_s", pair(a.segment_dur_range_s));
        kv(
            "augment.cutout_side_range_px",
            format!("{}, {}", a.cutout_side_range_px.0, a.cutout_side_range_px.1),
        );
        kv("augment.plus_snr_range_db", pair(a.plus_snr_range_db));
        kv("augment.noise_sources", a.noise_sources.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "));
        let o = &self.optimizer;
        kv("optimizer.name", "adam".into());
        kv("optimizer.lr", o.lr.map_or_else(|| "default".to_string(), |v| v.to_string()));
        kv("optimizer.betas", pair(o.betas));
        kv("optimizer.eps", o.eps.to_string());
        kv("optimizer.weight_decay", o.weight_decay.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.pretrain_mode", self.pretrain_mode.to_string());
        kv("train.clip_duration_s", self.clip_duration_s.to_string());
        kv("train.snr_range_db", pair(self.snr_range_db));
        kv("train.samples_per_epoch", self.samples_per_epoch.to_string());
        kv("train.val_fraction", self.val_fraction.to_string());
        kv("train.grad_clip", self.grad_clip.to_string());
        kv("train.bn_momentum", self.bn_momentum.to_string());
        kv("train.augment", self.augment_enabled.to_string());
        out
    }

    /// Parses a config, starting from the defaults. Every key is optional.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut model_keys = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Config { line: line_no, detail };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(mk) = key.strip_prefix("model.") {
                model_keys.insert(mk.to_string(), parse_usize(value).map_err(&err)?);
                continue;
            }
            let a = &mut cfg.augment;
            match key {
                "augment.audio_mask_frac" => a.audio_mask_frac = parse_f64(value).map_err(&err)?,
                "augment.visual_mask_frac" => a.visual_mask_frac = parse_f64(value).map_err(&err)?,
                "augment.segment_dur_range_s" => a.segment_dur_range_s = parse_pair(value).map_err(&err)?,
                "augment.cutout_side_range_px" => {
                    let (lo, hi) = parse_pair(value).map_err(&err)?;
                    if lo < 0.0 || hi < 0.0 || lo.fract() != 0.0 || hi.fract() != 0.0 {
                        return Err(err(format!("cutout sides must be whole pixels, got `{value}`")));
                    }
                    a.cutout_side_range_px = (lo as usize, hi as usize);
                }
                "augment.plus_snr_range_db" => a.plus_snr_range_db = parse_pair(value).map_err(&err)?,
                "augment.noise_sources" => {
                    a.noise_sources = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| NoiseSource::parse(s).map_err(|e| err(e.to_string())))
                        .collect::<Result<_>>()?;
                }
                "optimizer.name" => {
                    if value != "adam" {
                        return Err(err(format!("only `adam` is supported, got `{value}`")));
                    }
                }
                "optimizer.lr" => {
                    cfg.optimizer.lr =
                        if value == "default" { None } else { Some(parse_f64(value).map_err(&err)?) }
                }
                "optimizer.betas" => cfg.optimizer.betas = parse_pair(value).map_err(&err)?,
                "optimizer.eps" => cfg.optimizer.eps = parse_f64(value).map_err(&err)?,
                "optimizer.weight_decay" => cfg.optimizer.weight_decay = parse_f64(value).map_err(&err)?,
                "train.batch_size" => cfg.batch_size = parse_usize(value).map_err(&err)?,
                "train.epochs" => cfg.epochs = parse_usize(value).map_err(&err)?,
                "train.seed" => cfg.seed = value.parse().map_err(|e| err(format!("`{value}`: {e}")))?,
                "train.pretrain_mode" => {
                    cfg.pretrain_mode = value.parse().map_err(|e: Error| err(e.to_string()))?
                }
                "train.clip_duration_s" => cfg.clip_duration_s = parse_f64(value).map_err(&err)?,
                "train.snr_range_db" => cfg.snr_range_db = parse_pair(value).map_err(&err)?,
                "train.samples_per_epoch" => cfg.samples_per_epoch = parse_usize(value).map_err(&err)?,
                "train.val_fraction" => cfg.val_fraction = parse_f64(value).map_err(&err)?,
                "train.grad_clip" => cfg.grad_clip = parse_f64(value).map_err(&err)?,
                "train.bn_momentum" => cfg.bn_momentum = parse_f64(value).map_err(&err)?,
                "train.augment" => cfg.augment_enabled = parse_bool(value).map_err(&err)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.model.apply(&model_keys)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig { seed: 42, pretrain_mode: InterferenceMode::SN, ..Default::default() };
        cfg.optimizer.lr = Some(3e-4);
        cfg.model.d = 64;
        cfg.augment.noise_sources.remove(&NoiseSource::Ambient);
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let default_back = RunConfig::parse(&RunConfig::default().to_text()).unwrap();
        assert_eq!(default_back, RunConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("# header\ntrain.epochs = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }), "{err}");
        assert!(RunConfig::parse("optimizer.lr = -1").is_err());
        assert!(RunConfig::parse("train.clip_duration_s = 3").is_err());
    }

    #[test]
    fn stage_default_learning_rates() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.adam(Stage::Pretrain).lr, 1e-3);
        assert_eq!(cfg.adam(Stage::Finetune).lr, 1e-4);
    }
}
