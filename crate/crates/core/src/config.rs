//! Run configuration, read from TOML. Every section is optional and falls
//! back to defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub spec: CorpusSpec,
    /// With fewer utterances the content encoder starts memorizing whole
    /// utterances instead of learning phone classes.
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            spec: CorpusSpec::default(),
            utterances_per_speaker: 40,
            frames_per_utterance: 250,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitsConfig {
    /// Codebook size; must equal `model.content.num_units`.
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for UnitsConfig {
    fn default() -> Self {
        UnitsConfig {
            k: 100,
            iters: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub units: UnitsConfig,
    pub model: ModelConfig,
    /// Seed of parameter initialization.
    pub model_seed: u64,
    pub schedule: DiffusionSchedule,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Sampling seed used by `convert`.
    pub sample_seed: u64,
    /// Output directory; relative paths resolve against the working
    /// directory.
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            units: UnitsConfig::default(),
            model: ModelConfig::default(),
            model_seed: 0,
            schedule: DiffusionSchedule::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sample_seed: 0,
            run_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.spec.validate()?;
        if self.corpus.utterances_per_speaker < 2 || self.corpus.frames_per_utterance == 0 {
            return Err(Error::Config(
                "need >= 2 utterances per speaker and >= 1 frame per utterance".into(),
            ));
        }
        if !(self.corpus.train_fraction > 0.0 && self.corpus.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1)".into()));
        }
        if self.units.k < 2 {
            return Err(Error::Config("units.k must be >= 2".into()));
        }
        if self.units.k != self.model.content.num_units {
            return Err(Error::Config(format!(
                "units.k = {} but model.content.num_units = {}",
                self.units.k, self.model.content.num_units
            )));
        }
        if self.model.mel_dim != self.corpus.spec.mel_dim {
            return Err(Error::Config(format!(
                "model.mel_dim = {} but corpus mel_dim = {}",
                self.model.mel_dim, self.corpus.spec.mel_dim
            )));
        }
        self.model.validate()?;
        self.schedule
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.eval.pairs == 0 {
            return Err(Error::Config("eval.pairs must be >= 1".into()));
        }
        Ok(())
    }
}
