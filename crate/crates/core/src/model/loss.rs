use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelVars};
use crate::autodiff::{logsumexp, Reduction, Tape, Tensor, Var};
use crate::contrastive::{FramePool, NegativeSampler, NegativeSamplingStrategy};
use crate::error::{CpcError, Result};
use crate::rng::Rng;

/// One raw sequence in a minibatch.
#[derive(Debug, Clone, Copy)]
pub struct SequenceInput<'a> {
    pub id: usize,
    pub source: usize,
    /// `channels × time`
    pub observations: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpcLossConfig {
    /// Candidates per prediction, positive included.
    pub candidates: usize,
    pub strategy: NegativeSamplingStrategy,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonStats {
    pub k: usize,
    /// Mean InfoNCE loss over this horizon's predictions.
    pub loss: f64,
    pub accuracy: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct CpcLossOutput {
    pub loss: Var,
    pub horizons: Vec<HorizonStats>,
    /// Mean InfoNCE loss over all `(t, k)` predictions.
    pub mean_loss: f64,
    /// Mean MINE-style value over all predictions.
    pub mine: f64,
    pub pairs: usize,
}

/// Hidden-state label of each latent frame: the state at the last raw sample
/// the frame sees.
pub fn frame_labels(config: &ModelConfig, states: &[usize]) -> Result<Vec<usize>> {
    let t = config.latent_len(states.len()).ok_or(CpcError::InputTooShort {
        op: "frame_labels",
        len: states.len(),
        min: config.receptive_field(),
    })?;
    Ok((0..t).map(|i| states[config.frame_end(i)]).collect())
}

/// InfoNCE over every horizon `1..=K` and every valid position of every
/// sequence in the minibatch. Negatives come from the latent frames of the
/// whole minibatch under `cfg.strategy`.
pub fn cpc_loss(
    tape: &mut Tape,
    vars: &ModelVars,
    inputs: &[SequenceInput<'_>],
    cfg: &CpcLossConfig,
    rng: &mut Rng,
) -> Result<CpcLossOutput> {
    if inputs.is_empty() {
        return Err(CpcError::Empty("cpc_loss"));
    }
    if cfg.candidates < 2 {
        return Err(CpcError::invalid("cpc_loss: need at least 2 candidates"));
    }
    let kmax = vars.heads.len();
    let mut zs = Vec::with_capacity(inputs.len());
    let mut cs = Vec::with_capacity(inputs.len());
    let mut lens = Vec::with_capacity(inputs.len());
    for s in inputs {
        let x = tape.constant(s.observations.clone());
        let z = vars.encode(tape, x)?;
        let t = tape.shape(z)[0];
        if t <= kmax {
            return Err(CpcError::invalid(format!(
                "cpc_loss: sequence {} yields {t} latent frames, need more than K = {kmax}",
                s.id
            )));
        }
        let c = vars.contextualize(tape, z)?;
        zs.push(z);
        cs.push(c);
        lens.push(t);
    }
    let z_all = tape.concat_rows(&zs)?;
    let c_all = tape.concat_rows(&cs)?;
    let pool = FramePool::from_sequences(
        &inputs
            .iter()
            .zip(&lens)
            .map(|(s, &t)| (s.id, s.source, t))
            .collect::<Vec<_>>(),
    );
    let sampler = NegativeSampler::new(&pool, cfg.strategy);
    sampler.check_feasible()?;
    let mut offsets = Vec::with_capacity(inputs.len());
    let mut acc = 0;
    for &t in &lens {
        offsets.push(acc);
        acc += t;
    }

    let n = cfg.candidates;
    let mut total: Option<Var> = None;
    let mut stats = Vec::with_capacity(kmax);
    let mut loss_sum = 0.0;
    let mut mine_sum = 0.0;
    let mut pairs = 0;
    for k in 1..=kmax {
        let mut ctx = Vec::new();
        let mut cand = Vec::new();
        for (b, s) in inputs.iter().enumerate() {
            for t in 0..lens[b] - k {
                ctx.push(offsets[b] + t);
                cand.push(offsets[b] + t + k);
                cand.extend(sampler.draw(s.id, n - 1, rng)?);
            }
        }
        let p = ctx.len();
        let cands = tape.gather_rows(z_all, cand)?;
        let cg = tape.gather_rows(c_all, ctx)?;
        let wt = tape.transpose(vars.head(k)?)?;
        let preds = tape.matmul(cg, wt)?;
        let scores = tape.grouped_dot(cands, preds, n)?;
        let lk = tape.softmax_xent(scores, &vec![0; p], Reduction::Sum)?;
        total = Some(match total {
            None => lk,
            Some(acc) => tape.add(acc, lk)?,
        });

        let sv = tape.value(scores).values();
        let (mut hl, mut ha, mut hm) = (0.0, 0.0, 0.0);
        for row in sv.chunks(n) {
            let lse = logsumexp(row).expect("non-empty");
            hl += lse - row[0];
            if row[1..].iter().all(|&s| row[0] > s) {
                ha += 1.0;
            }
            hm += row[0] - (logsumexp(&row[1..]).expect("negatives") - ((n - 1) as f64).ln());
        }
        loss_sum += hl;
        mine_sum += hm;
        pairs += p;
        stats.push(HorizonStats {
            k,
            loss: hl / p as f64,
            accuracy: ha / p as f64,
            pairs: p,
        });
    }
    let mut loss = total.expect("K >= 1");
    if cfg.reduction == Reduction::Mean {
        loss = tape.scale(loss, 1.0 / pairs as f64);
    }
    Ok(CpcLossOutput {
        loss,
        horizons: stats,
        mean_loss: loss_sum / pairs as f64,
        mine: mine_sum / pairs as f64,
        pairs,
    })
}
