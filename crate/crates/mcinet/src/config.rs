//! Effective run configuration: defaults, then a JSON file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mcinet_core::train::{CompareOptions, Seeds, TrainConfig};

use crate::error::{self, AppError, Result};

/// Training fields mirror [`TrainConfig`]; the rest control data
/// preparation and model construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_boundary: Option<String>,
    pub seeds: Seeds,
    pub cache_frozen_features: bool,
    pub split_fraction: f64,
    pub input_size: Option<usize>,
    pub width_divisor: usize,
    pub source_classes: usize,
    /// Record wall-clock seconds; off makes every emitted file reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let c = CompareOptions::default();
        RunConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            freeze_boundary: t.freeze_boundary,
            seeds: t.seeds,
            cache_frozen_features: t.cache_frozen_features,
            split_fraction: 0.7,
            input_size: c.input_size,
            width_divisor: c.width_divisor,
            source_classes: c.source_classes,
            timing: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8], origin: &Path) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| AppError::Usage(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&error::read(path)?, path)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            freeze_boundary: self.freeze_boundary.clone(),
            seeds: self.seeds,
            cache_frozen_features: self.cache_frozen_features,
        }
    }

    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            input_size: self.input_size,
            width_divisor: self.width_divisor,
            source_classes: self.source_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(AppError::Usage(format!(
                "split_fraction {} is outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.width_divisor == 0 || self.source_classes < 2 || self.input_size == Some(0) {
            return Err(AppError::Usage(
                "width_divisor must be positive, source_classes at least 2, input_size positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(
            br#"{"epochs": 3, "seeds": {"split": 1, "shuffle": 2, "init": 3, "dropout": 4}}"#,
            Path::new("c.json"),
        )
        .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.seeds.dropout, 4);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.freeze_boundary.as_deref(), Some("backbone"));
        let c = RunConfig::from_json(br#"{"freeze_boundary": null}"#, Path::new("c.json")).unwrap();
        assert_eq!(c.freeze_boundary, None);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_json(br#"{"learning_rat": 0.1}"#, Path::new("c.json")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn roundtrips_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_vec(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text, Path::new("c.json")).unwrap(), c);
        assert!(c.validate().is_ok());
    }
}
