use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use prosody_core::data::SyntheticSpec;
use prosody_core::diffusion::DiffusionConfig;
use prosody_core::encoder::EncoderConfig;
use prosody_core::eval::HistogramSpec;
use prosody_core::flow::FlowConfig;
use prosody_core::model::{ModelConfig, ModelKind, Task};
use prosody_core::regression::RegressionConfig;
use prosody_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Encoder sizes; vocabularies come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub phone_dim: usize,
    pub style_dim: usize,
    pub context_width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let e = EncoderConfig::new(1, 1);
        Self {
            phone_dim: e.phone_dim,
            style_dim: e.style_dim,
            context_width: e.context_width,
            hidden: e.hidden,
            depth: e.depth,
            out_dim: e.out_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Falls back to the model family's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub draws: usize,
    pub taus: Vec<f64>,
    pub parallel: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            tau: None,
            draws: 1,
            taus: vec![0.2, 0.4, 0.6, 0.8],
            parallel: false,
        }
    }
}

/// One JSON document describing a whole experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    pub data: SyntheticSpec,
    pub encoder: EncoderSettings,
    pub regression: RegressionConfig,
    pub flow: FlowConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainConfig,
    /// Per-model replacements for `training`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub training_overrides: BTreeMap<ModelKind, TrainConfig>,
    pub sampling: SamplingConfig,
    pub eval: HistogramSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Prosody,
            model: None,
            data: SyntheticSpec::default(),
            encoder: EncoderSettings::default(),
            regression: RegressionConfig::default(),
            flow: FlowConfig::default(),
            diffusion: DiffusionConfig::default(),
            training: TrainConfig::default(),
            training_overrides: BTreeMap::new(),
            sampling: SamplingConfig::default(),
            eval: HistogramSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.training.validate()?;
        for t in self.training_overrides.values() {
            t.validate()?;
        }
        self.eval.validate()?;
        if self.sampling.draws == 0 {
            return Err(CliError::Usage("sampling.draws must be at least 1".into()));
        }
        if let Some(t) = self.sampling.tau {
            check_tau(t)?;
        }
        self.sampling.taus.iter().try_for_each(|&t| check_tau(t))?;
        for kind in [ModelKind::L2, ModelKind::Flow, ModelKind::Diff] {
            self.model_config(kind).validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, kind: ModelKind) -> ModelConfig {
        let style_vocab = match self.task {
            Task::Prosody => self.data.n_styles,
            Task::Frames => self.data.n_speakers,
        };
        let e = &self.encoder;
        ModelConfig {
            task: self.task,
            kind,
            encoder: EncoderConfig {
                phone_vocab: self.data.n_phonemes,
                style_vocab,
                phone_dim: e.phone_dim,
                style_dim: e.style_dim,
                context_width: e.context_width,
                hidden: e.hidden,
                depth: e.depth,
                out_dim: e.out_dim,
            },
            regression: self.regression.clone(),
            flow: self.flow.clone(),
            diffusion: self.diffusion.clone(),
            frame_seed: self.seed,
            dequantize: true,
        }
    }

    pub fn train_config(&self, kind: ModelKind) -> &TrainConfig {
        self.training_overrides.get(&kind).unwrap_or(&self.training)
    }

    pub fn tau_for(&self, kind: ModelKind) -> f64 {
        self.sampling.tau.unwrap_or_else(|| kind.default_tau())
    }
}

pub fn check_tau(tau: f64) -> Result<(), CliError> {
    if tau >= 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("tau must be a non-negative number, got {tau}")))
    }
}
