use std::fs;
use std::path::{Path, PathBuf};

use dynslim::data::MixtureSpec;
use dynslim::losses::LossConfig;
use dynslim::training::TrainConfig;
use dynslim::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

/// Corpus size for `synth-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 200, seconds: 2.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs, read from one TOML file. Missing sections take
/// their defaults; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Utterances held out from the end of the training corpus.
    pub validation: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mixture: MixtureSpec,
    pub synth: SynthConfig,
    pub slim: TrainConfig,
    #[serde(rename = "dyn")]
    pub dynamic: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            validation: 12,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            mixture: MixtureSpec::default(),
            synth: SynthConfig::default(),
            slim: TrainConfig::default(),
            dynamic: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.mixture.validate()?;
        self.slim.validate()?;
        self.dynamic.validate()?;
        if !(self.synth.count > 0 && self.synth.seconds > 0.0) {
            return Err(Error::Config("synth.count and synth.seconds must be positive".into()));
        }
        if self.validation == 0 {
            return Err(Error::Config("validation must hold at least one utterance".into()));
        }
        Ok(())
    }
}
