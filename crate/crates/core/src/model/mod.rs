//! The CPC network: a strided convolutional encoder, a GRU context model and
//! one log-bilinear prediction head `W_k` per horizon.

mod checkpoint;
mod critic;
mod loss;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointKind, NamedTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use critic::{Critic, CriticConfig};
pub use loss::{cpc_loss, frame_labels, CpcLossConfig, CpcLossOutput, HorizonStats, SequenceInput};
pub use params::ParamSet;

use crate::autodiff::{conv_out_len, GruVars, Tape, Tensor, Var};
use crate::error::{CpcError, Result};
use crate::rng::{derive_seed, seeded, streams, uniform_tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub strides: Vec<usize>,
    pub widths: Vec<usize>,
    pub channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            strides: vec![2, 2],
            widths: vec![4, 4],
            channels: vec![32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of the raw input signal.
    pub input_channels: usize,
    pub encoder: EncoderConfig,
    /// GRU hidden size `d_c`.
    pub context_dim: usize,
    /// Maximum prediction horizon `K`.
    pub horizons: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 16,
            encoder: EncoderConfig::default(),
            context_dim: 32,
            horizons: 8,
        }
    }
}

impl ModelConfig {
    pub fn errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let e = &self.encoder;
        if e.strides.is_empty() {
            errs.push("model.encoder.strides must have at least one layer".into());
        }
        if e.strides.len() != e.widths.len() || e.strides.len() != e.channels.len() {
            errs.push(format!(
                "model.encoder: strides, widths and channels must have equal length (got {}, {}, {})",
                e.strides.len(),
                e.widths.len(),
                e.channels.len()
            ));
        }
        for (name, list) in [("strides", &e.strides), ("widths", &e.widths), ("channels", &e.channels)] {
            if list.contains(&0) {
                errs.push(format!("model.encoder.{name} entries must be positive"));
            }
        }
        if self.input_channels == 0 {
            errs.push("model.input_channels must be positive".into());
        }
        if self.context_dim == 0 {
            errs.push("model.context_dim must be positive".into());
        }
        if self.horizons == 0 {
            errs.push("model.horizons must be at least 1".into());
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

    /// Latent dimension `d_z`: channels of the last encoder layer.
    pub fn latent_dim(&self) -> usize {
        *self.encoder.channels.last().unwrap_or(&0)
    }

    /// Raw samples seen by one latent frame; also the minimum input length.
    pub fn receptive_field(&self) -> usize {
        let e = &self.encoder;
        e.strides
            .iter()
            .zip(&e.widths)
            .rev()
            .fold(1, |len, (&s, &w)| (len - 1) * s + w)
    }

    /// Raw samples between consecutive latent frames.
    pub fn total_stride(&self) -> usize {
        self.encoder.strides.iter().product()
    }

    /// Number of latent frames for a raw input of length `time`.
    pub fn latent_len(&self, time: usize) -> Option<usize> {
        let e = &self.encoder;
        e.strides
            .iter()
            .zip(&e.widths)
            .try_fold(time, |len, (&s, &w)| conv_out_len(len, w, s))
    }

    /// Raw index of the last sample inside latent frame `t`.
    pub fn frame_end(&self, t: usize) -> usize {
        t * self.total_stride() + self.receptive_field() - 1
    }
}

/// Latent and context sequences for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// `T × d_z`
    pub z: Tensor,
    /// `T × d_c`
    pub c: Tensor,
}

/// Which per-frame features a probe sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    C,
    Z,
    /// Sequence mean of `c`, repeated for every frame.
    MeanC,
    /// Sequence mean of `z`, repeated for every frame.
    MeanZ,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub conv: Vec<(Var, Var)>,
    pub gru: GruVars,
    pub heads: Vec<Var>,
    pub all: Vec<Var>,
    strides: Vec<usize>,
    context_dim: usize,
}

impl ModelVars {
    /// `x` is `channels × time`; returns `T × d_z`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (&(w, b), &s) in self.conv.iter().zip(&self.strides) {
            h = tape.conv1d(h, w, s)?;
            h = tape.add_channel_bias(h, b)?;
            h = tape.relu(h);
        }
        tape.transpose(h)
    }

    /// `z` is `T × d_z`; returns `T × d_c`, starting from a zero state.
    pub fn contextualize(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let t = match tape.shape(z) {
            [t, _] => *t,
            other => return Err(CpcError::invalid(format!("contextualize: expected T × d_z, got {other:?}"))),
        };
        let mut h = tape.constant(Tensor::zeros(&[self.context_dim]));
        let mut rows = Vec::with_capacity(t);
        for i in 0..t {
            let zi = tape.row(z, i)?;
            h = tape.gru_step(h, zi, self.gru)?;
            rows.push(h);
        }
        tape.stack_rows(&rows)
    }

    /// `W_k` for `k` in `1..=K`.
    pub fn head(&self, k: usize) -> Result<Var> {
        if k == 0 || k > self.heads.len() {
            return Err(CpcError::HorizonOutOfRange { k, max: self.heads.len() });
        }
        Ok(self.heads[k - 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpcModel {
    config: ModelConfig,
    seed: u64,
    trained_steps: u64,
    params: ParamSet,
}

impl CpcModel {
    /// Initializes every weight uniformly in `±1/√fan_in`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, streams::INIT));
        let mut params = ParamSet::new();
        let e = &config.encoder;
        let mut cin = config.input_channels;
        for (i, (&w, &cout)) in e.widths.iter().zip(&e.channels).enumerate() {
            let bound = 1.0 / ((cin * w) as f64).sqrt();
            params.push(format!("conv{i}.weight"), uniform_tensor(&[cout, cin, w], bound, &mut rng));
            params.push(format!("conv{i}.bias"), uniform_tensor(&[cout], bound, &mut rng));
            cin = cout;
        }
        let dz = config.latent_dim();
        let dc = config.context_dim;
        let bound = 1.0 / (dc as f64).sqrt();
        params.push("gru.w_ih", uniform_tensor(&[3 * dc, dz], bound, &mut rng));
        params.push("gru.w_hh", uniform_tensor(&[3 * dc, dc], bound, &mut rng));
        params.push("gru.b_ih", uniform_tensor(&[3 * dc], bound, &mut rng));
        params.push("gru.b_hh", uniform_tensor(&[3 * dc], bound, &mut rng));
        for k in 1..=config.horizons {
            params.push(format!("head{k}.weight"), uniform_tensor(&[dz, dc], bound, &mut rng));
        }
        Ok(Self {
            config,
            seed,
            trained_steps: 0,
            params,
        })
    }

    /// Same layout as [`CpcModel::new`] with every value zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for t in m.params.tensors_mut() {
            t.values_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    pub fn horizons(&self) -> usize {
        self.config.horizons
    }

    pub fn head(&self, k: usize) -> Result<&Tensor> {
        if k == 0 || k > self.config.horizons {
            return Err(CpcError::HorizonOutOfRange {
                k,
                max: self.config.horizons,
            });
        }
        Ok(self.params.get(&format!("head{k}.weight")).expect("head exists"))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let all = self.params.bind(tape, trainable);
        let layers = self.config.encoder.strides.len();
        let conv = (0..layers).map(|i| (all[2 * i], all[2 * i + 1])).collect();
        let g = 2 * layers;
        let gru = GruVars {
            w_ih: all[g],
            w_hh: all[g + 1],
            b_ih: all[g + 2],
            b_hh: all[g + 3],
        };
        let heads = all[g + 4..].to_vec();
        ModelVars {
            conv,
            gru,
            heads,
            all,
            strides: self.config.encoder.strides.clone(),
            context_dim: self.config.context_dim,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            [ch, time] if *ch == self.config.input_channels => {
                let min = self.config.receptive_field();
                if *time < min {
                    return Err(CpcError::InputTooShort {
                        op: "encode",
                        len: *time,
                        min,
                    });
                }
                Ok(())
            }
            other => Err(CpcError::shape("encode", other, &[self.config.input_channels, 0])),
        }
    }

    /// `x` is `channels × time`; returns `T × d_z`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = vars.encode(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    /// `z` is `T × d_z`; returns `T × d_c`.
    pub fn contextualize(&self, z: &Tensor) -> Result<Tensor> {
        match z.shape() {
            [t, d] if *t >= 1 && *d == self.latent_dim() => {}
            [_, d] if *d == self.latent_dim() => return Err(CpcError::Empty("contextualize")),
            other => return Err(CpcError::shape("contextualize", other, &[0, self.latent_dim()])),
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let c = vars.contextualize(&mut tape, zv)?;
        Ok(tape.value(c).clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<LatentSequence> {
        let z = self.encode(x)?;
        let c = self.contextualize(&z)?;
        Ok(LatentSequence { z, c })
    }

    /// `W_k c`, a vector in latent space.
    pub fn predict(&self, c: &[f64], k: usize) -> Result<Vec<f64>> {
        let w = self.head(k)?;
        if c.len() != self.context_dim() {
            return Err(CpcError::shape("predict", &[c.len()], &[self.context_dim()]));
        }
        Ok((0..self.latent_dim())
            .map(|i| w.row(i).iter().zip(c).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Log-score `zᵀ W_k c`.
    pub fn score(&self, z: &[f64], c: &[f64], k: usize) -> Result<f64> {
        if z.len() != self.latent_dim() {
            return Err(CpcError::shape("score", &[z.len()], &[self.latent_dim()]));
        }
        let p = self.predict(c, k)?;
        Ok(z.iter().zip(&p).map(|(a, b)| a * b).sum())
    }

    /// Per-frame features, `T × d`.
    pub fn representation(&self, x: &Tensor, which: Representation) -> Result<Tensor> {
        let seq = self.forward(x)?;
        let base = match which {
            Representation::C | Representation::MeanC => seq.c,
            Representation::Z | Representation::MeanZ => seq.z,
        };
        match which {
            Representation::C | Representation::Z => Ok(base),
            Representation::MeanC | Representation::MeanZ => {
                let (t, d) = base.dims2().expect("matrix");
                let mut mean = vec![0.0; d];
                for i in 0..t {
                    for (m, v) in mean.iter_mut().zip(base.row(i)) {
                        *m += v / t as f64;
                    }
                }
                Tensor::from_rows(&vec![mean; t])
            }
        }
    }
}

#[cfg(test)]
mod tests;
