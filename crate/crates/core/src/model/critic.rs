use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CpcError, Result};
use crate::rng::{derive_seed, seeded, streams, uniform_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { hidden: 64, embed: 32 }
    }
}

impl CriticConfig {
    pub fn errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.hidden == 0 {
            errs.push("critic.hidden must be positive".into());
        }
        if self.embed == 0 {
            errs.push("critic.embed must be positive".into());
        }
        errs
    }
}

/// Separable log-score `F(x, c) = h(c)ᵀ M g(x)` with one-hidden-layer tanh
/// encoders `g` and `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    config: CriticConfig,
    x_dim: usize,
    c_dim: usize,
    seed: u64,
    trained_steps: u64,
    params: ParamSet,
}

impl Critic {
    pub fn new(config: CriticConfig, x_dim: usize, c_dim: usize, seed: u64) -> Result<Self> {
        let errs = config.errors();
        if !errs.is_empty() {
            return Err(CpcError::Config(errs));
        }
        if x_dim == 0 || c_dim == 0 {
            return Err(CpcError::invalid("critic input dimensions must be positive"));
        }
        let mut rng = seeded(derive_seed(seed, streams::INIT));
        let mut params = ParamSet::new();
        let (h, e) = (config.hidden, config.embed);
        for (side, d) in [("x", x_dim), ("c", c_dim)] {
            let b1 = 1.0 / (d as f64).sqrt();
            let b2 = 1.0 / (h as f64).sqrt();
            params.push(format!("{side}.w1"), uniform_tensor(&[d, h], b1, &mut rng));
            params.push(format!("{side}.b1"), uniform_tensor(&[h], b1, &mut rng));
            params.push(format!("{side}.w2"), uniform_tensor(&[h, e], b2, &mut rng));
            params.push(format!("{side}.b2"), uniform_tensor(&[e], b2, &mut rng));
        }
        params.push("bilinear", uniform_tensor(&[e, e], 1.0 / (e as f64).sqrt(), &mut rng));
        Ok(Self {
            config,
            x_dim,
            c_dim,
            seed,
            trained_steps: 0,
            params,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.x_dim, self.c_dim)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn set_trained_steps(&mut self, steps: u64) {
        self.trained_steps = steps;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Score matrix on a tape: `out[i][j] = F(x_j, c_i)`.
    pub fn scores_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, c: Var) -> Result<Var> {
        let embed = |tape: &mut Tape, input: Var, p: &[Var]| -> Result<Var> {
            let a = tape.matmul(input, p[0])?;
            let a = tape.add_row_bias(a, p[1])?;
            let a = tape.tanh(a);
            let b = tape.matmul(a, p[2])?;
            tape.add_row_bias(b, p[3])
        };
        let g = embed(tape, x, &vars[0..4])?;
        let h = embed(tape, c, &vars[4..8])?;
        let hm = tape.matmul(h, vars[8])?;
        let gt = tape.transpose(g)?;
        tape.matmul(hm, gt)
    }

    pub fn score_matrix(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        if x.shape().get(1) != Some(&self.x_dim) || c.shape().get(1) != Some(&self.c_dim) {
            return Err(CpcError::shape("critic", x.shape(), c.shape()));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let s = self.scores_on_tape(&mut tape, &vars, xv, cv)?;
        Ok(tape.value(s).clone())
    }
}
