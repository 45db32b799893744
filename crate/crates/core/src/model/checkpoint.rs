use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CpcModel, Critic, CriticConfig, ModelConfig, ParamSet};
use crate::autodiff::Tensor;
use crate::error::{CpcError, Result};

pub const CHECKPOINT_FORMAT: &str = "cpc-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointKind {
    Cpc {
        model: ModelConfig,
    },
    Critic {
        critic: CriticConfig,
        x_dim: usize,
        c_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Self-describing JSON checkpoint: architecture, init seed, step count and
/// every parameter tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: CheckpointKind,
    pub seed: u64,
    pub trained_steps: u64,
    pub params: Vec<NamedTensor>,
}

fn named(params: &ParamSet) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &CpcModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: CheckpointKind::Cpc {
                model: model.config().clone(),
            },
            seed: model.seed(),
            trained_steps: model.trained_steps(),
            params: named(model.params()),
        }
    }

    pub fn from_critic(critic: &Critic) -> Self {
        let (x_dim, c_dim) = critic.dims();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            architecture: CheckpointKind::Critic {
                critic: critic.config().clone(),
                x_dim,
                c_dim,
            },
            seed: critic.seed(),
            trained_steps: critic.trained_steps(),
            params: named(critic.params()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| CpcError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(CpcError::Checkpoint(format!(
                "format: expected {CHECKPOINT_FORMAT:?}, found {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(CpcError::Checkpoint(format!(
                "version: unsupported version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CpcError::Checkpoint(m) => CpcError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn tensors(self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let t = Tensor::new(p.shape, p.values)
                    .map_err(|e| CpcError::Checkpoint(format!("params[{i}] ({}): {e}", p.name)))?;
                Ok((p.name, t))
            })
            .collect()
    }

    pub fn into_model(self) -> Result<CpcModel> {
        let config = match &self.architecture {
            CheckpointKind::Cpc { model } => model.clone(),
            CheckpointKind::Critic { .. } => {
                return Err(CpcError::Checkpoint("architecture.kind: expected \"cpc\", found \"critic\"".into()))
            }
        };
        let (seed, steps) = (self.seed, self.trained_steps);
        let mut m = CpcModel::new(config, seed).map_err(|e| CpcError::Checkpoint(format!("architecture.model: {e}")))?;
        m.params_mut().load(self.tensors()?)?;
        m.set_trained_steps(steps);
        Ok(m)
    }

    pub fn into_critic(self) -> Result<Critic> {
        let (config, x_dim, c_dim) = match &self.architecture {
            CheckpointKind::Critic { critic, x_dim, c_dim } => (critic.clone(), *x_dim, *c_dim),
            CheckpointKind::Cpc { .. } => {
                return Err(CpcError::Checkpoint("architecture.kind: expected \"critic\", found \"cpc\"".into()))
            }
        };
        let (seed, steps) = (self.seed, self.trained_steps);
        let mut c = Critic::new(config, x_dim, c_dim, seed)
            .map_err(|e| CpcError::Checkpoint(format!("architecture.critic: {e}")))?;
        c.params_mut().load(self.tensors()?)?;
        c.set_trained_steps(steps);
        Ok(c)
    }
}
