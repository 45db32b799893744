use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Reduction;
use crate::contrastive::NegativeSamplingStrategy;
use crate::error::{CpcError, Result};
use crate::model::{CriticConfig, ModelConfig};
use crate::probe::ProbeSettings;
use crate::synthdata::TaskConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub steps: u64,
    /// Sequences per minibatch (sequence tasks). Pair tasks use
    /// `contrastive.candidates` pairs per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Held-out sequences scored at every log step.
    pub eval_sequences: usize,
    /// Held-out pair batches scored at every log step.
    pub eval_batches: usize,
    pub reduction: Reduction,
    /// Steps for the supervised ceiling model; 0 reuses `steps`.
    pub supervised_steps: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-4,
            seed: 0,
            log_every: 100,
            eval_sequences: 8,
            eval_batches: 20,
            reduction: Reduction::Mean,
            supervised_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// `N`: candidates per prediction, positive included.
    pub candidates: usize,
    pub strategy: NegativeSamplingStrategy,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            candidates: 16,
            strategy: NegativeSamplingStrategy::MixedSource,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

/// Everything that determines a run. The prediction horizon `K` is
/// `model.horizons`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub critic: CriticConfig,
    pub training: TrainingConfig,
    pub contrastive: ContrastiveConfig,
    pub probe: ProbeSettings,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CpcError::Config(vec![format!("config: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CpcError::Config(vec![format!("config {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn is_sequence_task(&self) -> bool {
        matches!(self.task, TaskConfig::Markov(_))
    }

    /// Every problem with the config, each naming its field.
    pub fn errors(&self) -> Vec<String> {
        let mut errs = match self.task.validate() {
            Ok(()) => Vec::new(),
            Err(CpcError::Config(v)) => v,
            Err(e) => vec![e.to_string()],
        };
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            errs.push(format!("training.learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.log_every == 0 {
            errs.push("training.log_every must be at least 1".into());
        }
        if t.eval_batches == 0 {
            errs.push("training.eval_batches must be at least 1".into());
        }
        if self.contrastive.candidates < 2 {
            errs.push(format!(
                "contrastive.candidates must be at least 2, got {}",
                self.contrastive.candidates
            ));
        }
        match &self.task {
            TaskConfig::Markov(task) => {
                errs.extend(self.model.errors());
                if t.batch_size == 0 {
                    errs.push("training.batch_size must be at least 1".into());
                }
                if t.eval_sequences == 0 {
                    errs.push("training.eval_sequences must be at least 1".into());
                }
                if self.model.input_channels != task.dim {
                    errs.push(format!(
                        "model.input_channels ({}) must equal task.dim ({})",
                        self.model.input_channels, task.dim
                    ));
                }
                if self.model.errors().is_empty() {
                    match self.model.latent_len(task.length) {
                        Some(frames) if frames > self.model.horizons => {}
                        frames => errs.push(format!(
                            "task.length {} yields {} latent frames; need more than model.horizons = {}",
                            task.length,
                            frames.unwrap_or(0),
                            self.model.horizons
                        )),
                    }
                }
                errs.extend(self.probe.errors(task));
            }
            _ => errs.extend(self.critic.errors()),
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CpcError::Config(errs))
        }
    }
}
