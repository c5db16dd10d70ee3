use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{TF, TP};
use crate::synth::TemplateMix;

/// Everything that determines a training run. Stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// model width
    pub d: usize,
    /// nodes per lane proposal
    pub h: usize,
    pub max_n: usize,
    /// trajectories per lane and in the final prediction
    pub k: usize,
    pub tp: usize,
    pub tf: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// social-to-lane relatedness radius, meters
    pub s2l_threshold: f64,
    pub template_mix: String,
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub out_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            d: 64,
            h: 50,
            max_n: 10,
            k: 6,
            tp: TP,
            tf: TF,
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 2000,
            s2l_threshold: 7.5,
            template_mix: "straight:1,curve:1,fork:1,intersection:1,congestion:1".into(),
            data_path: None,
            out_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tp != TP || self.tf != TF {
            return Err(Error::Config(format!(
                "tp/tf must be {TP}/{TF}, got {}/{}",
                self.tp, self.tf
            )));
        }
        let counts = [
            ("d", self.d),
            ("max_n", self.max_n),
            ("k", self.k),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.h < 2 {
            return Err(Error::Config("h must be at least 2".into()));
        }
        if !self.d.is_multiple_of(4) {
            return Err(Error::Config("d must be a multiple of 4".into()));
        }
        if !(self.s2l_threshold > 0.0) {
            return Err(Error::Config("s2l_threshold must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(
                "learning rate and lambdas must be non-negative".into(),
            ));
        }
        self.template_mix.parse::<TemplateMix>()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_horizons_and_counts() {
        let cfg = ExperimentConfig {
            tf: 40,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            k: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            template_mix: "lava".into(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2").is_err());
    }
}
