//! Flat run configuration: model, schedule and trainer keys in one table.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::schedule::ScheduleConfig;
use crate::error::{config_err, Error, Result};
use crate::frontend::SAMPLE_RATE;
use crate::network::ModelConfig;

/// Trainer options outside the schedule and the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Weight of the label loss; `1 − kd_lambda` weighs the teacher loss.
    pub kd_lambda: f64,
    pub mixup_coef: f64,
    pub mixup_spectrogram: bool,
    pub mixup_waveform: bool,
    /// Random jitter of the mel filterbank's lower and upper edges.
    pub mel_perturb: bool,
    /// Maximum circular roll of the waveform, in milliseconds.
    pub roll_ms: f64,
    /// Maximum gain change, in dB.
    pub gain_db: f64,
    pub weight_decay: f64,
    pub clip_seconds: f64,
    /// `0` means one pass over the sampler's order per epoch.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 120,
            kd_lambda: 0.1,
            mixup_coef: 0.3,
            mixup_spectrogram: true,
            mixup_waveform: false,
            mel_perturb: true,
            roll_ms: 0.0,
            gain_db: 0.0,
            weight_decay: 1e-4,
            clip_seconds: 10.0,
            steps_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.kd_lambda) {
            return bad(format!("kd_lambda {} outside [0, 1]", self.kd_lambda));
        }
        if (self.mixup_spectrogram || self.mixup_waveform) && !(self.mixup_coef > 0.0) {
            return bad(format!("mixup_coef must be positive, got {}", self.mixup_coef));
        }
        if self.roll_ms < 0.0 || self.gain_db < 0.0 || self.weight_decay < 0.0 {
            return bad("roll_ms, gain_db and weight_decay must be non-negative".into());
        }
        if !(self.clip_seconds > 0.0) {
            return bad(format!("clip_seconds must be positive, got {}", self.clip_seconds));
        }
        Ok(())
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(v: &T) -> Vec<String> {
    match Value::try_from(v) {
        Ok(Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn as_table<T: Serialize>(v: &T) -> Result<Table> {
    match Value::try_from(v).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => config_err("section does not serialize to a table"),
    }
}

fn enc<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(e.to_string()))
}

fn section<T: DeserializeOwned>(t: Table) -> Result<T> {
    Value::Table(t).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Downstream fine-tuning options: roll ±125 ms, gain ±7 dB, two-level
    /// mixup, no weight decay, τ fixed at 1.
    pub fn fine_tuning(model: ModelConfig, peak_lr: f64) -> Self {
        Self {
            model,
            schedule: ScheduleConfig::fine_tuning(peak_lr),
            train: TrainConfig {
                roll_ms: 125.0,
                gain_db: 7.0,
                mixup_waveform: true,
                mixup_spectrogram: true,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.train.validate()
    }

    /// Parses a flat TOML table; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_str_over(text, &Self::default())
    }

    /// Like [`RunConfig::from_toml_str`], with absent keys taken from `base`.
    pub fn from_toml_str_over(text: &str, base: &RunConfig) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let model_keys = keys_of(&ModelConfig::default());
        let schedule_keys = keys_of(&ScheduleConfig::default());
        let (mut m, mut s, mut t) = (as_table(&base.model)?, as_table(&base.schedule)?, as_table(&base.train)?);
        for (k, v) in table {
            if model_keys.contains(&k) {
                m.insert(k, v);
            } else if schedule_keys.contains(&k) {
                s.insert(k, v);
            } else {
                t.insert(k, v);
            }
        }
        let cfg = Self {
            model: section(m)?,
            schedule: section(s)?,
            train: section(t)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key, flat, grouped by section.
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(format!(
            "# model\n{}\n# schedule\n{}\n# trainer\n{}",
            enc(&self.model)?,
            enc(&self.schedule)?,
            enc(&self.train)?
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_keeps_base_values() {
        let mut base = RunConfig::default();
        base.model.n_classes = 2;
        base.train.batch_size = 16;
        let c = RunConfig::from_toml_str_over("batch_size = 8\nepochs = 3\nwarmup_epochs = 1\nrampdown_epochs = 1\ntail_epochs = 0", &base).unwrap();
        assert_eq!((c.model.n_classes, c.train.batch_size, c.schedule.epochs), (2, 8, 3));
        assert!(RunConfig::from_toml_str_over("bogus = 1", &base).is_err());
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.kd_lambda, 0.1);
    }

    #[test]
    fn keys_route_to_their_section() {
        let c = RunConfig::from_toml_str("width_mult = 0.4\nepochs = 50\nwarmup_epochs = 2\nrampdown_epochs = 20\ntail_epochs = 5\nkd_lambda = 0.3\nplacement = \"last5\"\n").unwrap();
        assert_eq!(c.model.width_mult, 0.4);
        assert_eq!(c.model.placement, crate::network::Placement::Last5);
        assert_eq!(c.schedule.epochs, 50);
        assert_eq!(c.train.kd_lambda, 0.3);
    }

    #[test]
    fn unknown_and_invalid_keys_fail() {
        assert!(matches!(RunConfig::from_toml_str("nonsense = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("kd_lambda = 2.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("epochs = 10"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_text() {
        let c = RunConfig::fine_tuning(ModelConfig::preset("dymn-s").unwrap(), 2e-4);
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
