//! Run configuration: one validated struct covering model geometry,
//! optimization, schedule, data, and loss toggles.
//!
//! The on-disk format is a flat `section.key: value` file (comments start
//! with `#`); the resolved config is serialized as JSON next to checkpoints
//! and metrics so every run is reproducible from its artifacts.

use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::model::{LossToggles, ModelConfig};
use crate::train::{OptimizerConfig, TrainerOptions};
use crate::vision::{BackboneConfig, ScalePolicy};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    /// Total optimization steps; epochs emerge from the dataset size.
    pub max_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { batch_size: 32, max_steps: 2000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Load scenes from this directory when set; otherwise generate.
    pub dataset_dir: Option<String>,
    pub scene: SceneConfig,
    pub scene_count: usize,
    pub seed: u64,
    /// Scale augmentation; off in determinism mode.
    pub augment: bool,
    pub scale_policy: ScalePolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: None,
            scene: SceneConfig::default(),
            scene_count: 16,
            seed: 3,
            augment: false,
            scale_policy: ScalePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub losses: LossToggles,
    pub mlm_rate: f64,
    pub label_smooth: f64,
    pub determinism: bool,
    pub halt_after_failures: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataConfig::default(),
            losses: LossToggles::default(),
            mlm_rate: 0.15,
            label_smooth: 0.0,
            determinism: true,
            halt_after_failures: 3,
        }
    }
}

impl RunConfig {
    /// The desk-scale overfitting recipe used by the acceptance suite:
    /// 16 scenes, batch 8, 2000 steps, uniform 1e-3 learning rate.
    pub fn desk_overfit() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            optimizer: OptimizerConfig {
                lr_transformer: 1e-3,
                lr_backbone: 1e-3,
                ..OptimizerConfig::default()
            },
            schedule: ScheduleConfig { batch_size: 8, max_steps: 2000 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.schedule.batch_size == 0 || self.schedule.max_steps == 0 {
            return Err(Error::Config("schedule needs positive batch size and steps".into()));
        }
        if self.data.scene_count == 0 {
            return Err(Error::Config("scene_count must be >= 1".into()));
        }
        if self.model.num_queries < self.data.scene.max_objects {
            return Err(Error::Config(format!(
                "num_queries {} must cover max_objects {} per scene",
                self.model.num_queries, self.data.scene.max_objects
            )));
        }
        if !(0.0..1.0).contains(&self.mlm_rate) {
            return Err(Error::Config(format!("mlm_rate {} outside [0,1)", self.mlm_rate)));
        }
        if !(0.0..1.0).contains(&self.label_smooth) {
            return Err(Error::Config(format!("label_smooth {} outside [0,1)", self.label_smooth)));
        }
        Ok(())
    }

    pub fn trainer_options(&self) -> TrainerOptions {
        TrainerOptions {
            losses: self.losses,
            mlm_rate: self.mlm_rate,
            matched_fraction: 0.5,
            label_smooth: self.label_smooth,
            determinism: self.determinism,
            halt_after_failures: self.halt_after_failures,
        }
    }

    /// Apply environment overrides: `GRIDVLP_SEED`, `GRIDVLP_DATA_DIR`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("GRIDVLP_SEED") {
            self.data.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("GRIDVLP_SEED must be an integer, got {seed}")))?;
        }
        if let Ok(dir) = std::env::var("GRIDVLP_DATA_DIR") {
            self.data.dataset_dir = Some(dir);
        }
        Ok(())
    }

    /// Resolved-config JSON written alongside checkpoints and metrics.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn save_resolved(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Parse the flat `key: value` config format, starting from defaults
    /// (or the named preset via `preset: ...`).
    pub fn from_file(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        Self::from_str_body(&body)
    }

    pub fn from_str_body(body: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // preset line applies first so later keys override it
        for line in body.lines() {
            let line = strip_comment(line);
            if let Some((k, v)) = split_kv(line)? {
                if k == "preset" {
                    cfg = match v {
                        "desk_overfit" => RunConfig::desk_overfit(),
                        "default" => RunConfig::default(),
                        other => return Err(Error::Config(format!("unknown preset {other}"))),
                    };
                }
            }
        }
        for (lineno, raw) in body.lines().enumerate() {
            let line = strip_comment(raw);
            let Some((key, value)) = split_kv(line)? else { continue };
            if key == "preset" {
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one dotted key. Every documented key lives here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} value {v}")))
        }
        match key {
            "model.hidden_size" => self.model.attention.hidden_size = p(key, value)?,
            "model.num_heads" => self.model.attention.num_heads = p(key, value)?,
            "model.ffn_size" => self.model.attention.ffn_size = p(key, value)?,
            "model.dropout" => self.model.attention.dropout_rate = p(key, value)?,
            "model.encoder_layers" => self.model.encoder_layers = p(key, value)?,
            "model.decoder_layers" => self.model.decoder_layers = p(key, value)?,
            "model.num_queries" => self.model.num_queries = p(key, value)?,
            "model.max_text_len" => self.model.max_text_len = p(key, value)?,
            "model.max_caption_len" => self.model.max_caption_len = p(key, value)?,
            "model.tie_mlm_head" => self.model.tie_mlm_head = p(key, value)?,
            "model.detect_cross_attend_text" => self.model.detect_cross_attend_text = p(key, value)?,
            "model.aux_detection_outputs" => self.model.aux_detection_outputs = p(key, value)?,
            "model.backbone_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| p("model.backbone_widths", s.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    return Err(Error::Config("backbone_widths wants 4 comma-separated values".into()));
                }
                self.model.backbone = BackboneConfig {
                    widths: [parts[0], parts[1], parts[2], parts[3]],
                };
            }
            "optimizer.lr_transformer" => self.optimizer.lr_transformer = p(key, value)?,
            "optimizer.lr_backbone" => self.optimizer.lr_backbone = p(key, value)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = p(key, value)?,
            "optimizer.grad_clip_norm" => self.optimizer.grad_clip_norm = p(key, value)?,
            "optimizer.lr_drop_epochs" => {
                self.optimizer.lr_drop_epochs = if value.trim().is_empty() {
                    vec![]
                } else {
                    value
                        .split(',')
                        .map(|s| p("optimizer.lr_drop_epochs", s.trim()))
                        .collect::<Result<_>>()?
                };
            }
            "optimizer.lr_drop_factor" => self.optimizer.lr_drop_factor = p(key, value)?,
            "schedule.batch_size" => self.schedule.batch_size = p(key, value)?,
            "schedule.max_steps" => self.schedule.max_steps = p(key, value)?,
            "data.dataset_dir" => self.data.dataset_dir = Some(value.to_string()),
            "data.scene_count" => self.data.scene_count = p(key, value)?,
            "data.seed" => self.data.seed = p(key, value)?,
            "data.image_size" => self.data.scene.image_size = p(key, value)?,
            "data.max_objects" => self.data.scene.max_objects = p(key, value)?,
            "data.augment" => self.data.augment = p(key, value)?,
            "data.scale_min_short" => self.data.scale_policy.min_short = p(key, value)?,
            "data.scale_max_short" => self.data.scale_policy.max_short = p(key, value)?,
            "data.scale_max_long" => self.data.scale_policy.max_long = p(key, value)?,
            "losses.mlm" => self.losses.mlm = p(key, value)?,
            "losses.itm" => self.losses.itm = p(key, value)?,
            "losses.detection" => self.losses.detection = p(key, value)?,
            "losses.caption" => self.losses.caption = p(key, value)?,
            "mlm_rate" => self.mlm_rate = p(key, value)?,
            "label_smooth" => self.label_smooth = p(key, value)?,
            "determinism" => self.determinism = p(key, value)?,
            "halt_after_failures" => self.halt_after_failures = p(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_kv(line: &str) -> Result<Option<(&str, &str)>> {
    let line = line.trim();
    if line.is_empty() {
        return Ok(None);
    }
    let Some((k, v)) = line.split_once(':') else {
        return Err(Error::Config(format!("expected `key: value`, got `{line}`")));
    };
    Ok(Some((k.trim(), v.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk_overfit().validate().unwrap();
    }

    #[test]
    fn parses_flat_file_with_preset_and_overrides() {
        let body = "
# acceptance recipe, shrunk
preset: desk_overfit
schedule.max_steps: 50   # short
schedule.batch_size: 4
optimizer.lr_transformer: 5e-4
model.backbone_widths: 8, 16, 24, 64
losses.caption: false
";
        let cfg = RunConfig::from_str_body(body).unwrap();
        assert_eq!(cfg.schedule.max_steps, 50);
        assert_eq!(cfg.schedule.batch_size, 4);
        assert_eq!(cfg.optimizer.lr_transformer, 5e-4);
        assert_eq!(cfg.model.backbone.widths, [8, 16, 24, 64]);
        assert!(!cfg.losses.caption);
        // preset fields not overridden stay
        assert_eq!(cfg.model.attention.hidden_size, 64);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = RunConfig::from_str_body("model.hidden_size: 64\nbogus.key: 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn invalid_geometry_fails_validation() {
        let err = RunConfig::from_str_body("model.hidden_size: 62\n").unwrap_err();
        assert!(err.to_string().contains("62"), "{err}");
    }

    #[test]
    fn env_overrides_seed_and_data_dir() {
        let mut cfg = RunConfig::default();
        std::env::set_var("GRIDVLP_SEED", "99");
        std::env::set_var("GRIDVLP_DATA_DIR", "/tmp/somewhere");
        cfg.apply_env().unwrap();
        std::env::remove_var("GRIDVLP_SEED");
        std::env::remove_var("GRIDVLP_DATA_DIR");
        assert_eq!(cfg.data.seed, 99);
        assert_eq!(cfg.data.dataset_dir.as_deref(), Some("/tmp/somewhere"));
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = RunConfig::desk_overfit();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
