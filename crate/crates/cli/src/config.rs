use std::path::Path;

use connseg::metrics::{DEFAULT_GRID, DEFAULT_IOU};
use connseg::model::PredictorConfig;
use connseg::training::TrainConfig;
use connseg::tta::FusionPlan;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Threshold midpoints in the max-F sweep.
    pub grid: usize,
    pub iou: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            iou: DEFAULT_IOU,
        }
    }
}

/// Everything a run needs; every section and key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub fusion: FusionPlan,
    pub metrics: MetricOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: connseg::Error| CliError::Usage(format!("config: {e}"));
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.fusion.validate().map_err(usage)?;
        if self.metrics.grid == 0 {
            return Err(CliError::Usage("config: metrics.grid must be positive".into()));
        }
        if !(self.metrics.iou > 0.0 && self.metrics.iou <= 1.0) {
            return Err(CliError::Usage("config: metrics.iou must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns defaults when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(connseg::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| {
        CliError::Data(connseg::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(RunConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"width": [1]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": {"start": 1}}}"#).is_err());
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}, "fusion": {"use_flip": false}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert!(!c.fusion.use_flip);
        assert_eq!(c.metrics.grid, 256);
    }

    #[test]
    fn defaults_roundtrip_through_json() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
    }
}
