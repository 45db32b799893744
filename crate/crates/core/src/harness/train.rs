use std::time::Instant;

use super::config::ExperimentConfig;
use super::metrics::MetricRow;
use crate::autodiff::{AdamState, Reduction, Tape, Tensor};
use crate::contrastive::{mi_lower_bound, square_batch_stats, MiEstimate};
use crate::error::{CpcError, Result};
use crate::model::{cpc_loss, frame_labels, CpcLossConfig, CpcModel, Critic, SequenceInput};
use crate::rng::{derive_seed, seeded, streams, uniform_tensor};
use crate::synthdata::{LabeledSequence, LatentMarkovSequenceTask, PairBatch, TaskConfig};

/// Ids of held-out evaluation sequences start here.
const EVAL_ID_BASE: usize = 1 << 40;

pub type Progress<'a> = Option<&'a mut dyn FnMut(&MetricRow)>;

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub rows: Vec<MetricRow>,
    /// `(step, seconds since start)` per logged row.
    pub timings: Vec<(u64, f64)>,
}

fn markov(cfg: &ExperimentConfig) -> Result<&LatentMarkovSequenceTask> {
    match &cfg.task {
        TaskConfig::Markov(t) => Ok(t),
        _ => Err(CpcError::UnsupportedTask("this command needs the markov sequence task")),
    }
}

/// Sequence ids and sources for training step `step`: consecutive pairs of
/// sequences share a source, so every sequence has a same-source partner.
pub fn batch_specs(step: u64, batch: usize, sources: usize) -> Vec<(usize, usize)> {
    let pairs = (batch / 2).max(1);
    (0..batch)
        .map(|j| {
            let slot = (j / 2).min(pairs - 1);
            let source = (step as usize * pairs + slot) % sources;
            (step as usize * batch + j, source)
        })
        .collect()
}

fn is_log_step(step: u64, total: u64, every: u64) -> bool {
    step > 0 && (step.is_multiple_of(every) || step == total)
}

pub fn eval_sequences(cfg: &ExperimentConfig) -> Result<Vec<LabeledSequence>> {
    let task = markov(cfg)?;
    let mut rng = seeded(derive_seed(cfg.training.seed, streams::EVAL_DATA));
    task.sample_sequences(cfg.training.eval_sequences, EVAL_ID_BASE, &mut rng)
}

fn inputs(seqs: &[LabeledSequence]) -> Vec<SequenceInput<'_>> {
    seqs.iter()
        .map(|s| SequenceInput {
            id: s.id,
            source: s.source,
            observations: &s.observations,
        })
        .collect()
}

fn loss_config(cfg: &ExperimentConfig) -> CpcLossConfig {
    CpcLossConfig {
        candidates: cfg.contrastive.candidates,
        strategy: cfg.contrastive.strategy,
        reduction: cfg.training.reduction,
    }
}

/// Per-horizon loss and accuracy of `model` on held-out sequences, with a
/// fixed negative draw.
pub fn evaluate_cpc(model: &CpcModel, cfg: &ExperimentConfig, seqs: &[LabeledSequence], step: u64) -> Result<MetricRow> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let mut rng = seeded(derive_seed(cfg.training.seed, streams::EVAL_NEGATIVES));
    let out = cpc_loss(&mut tape, &vars, &inputs(seqs), &loss_config(cfg), &mut rng)?;
    Ok(MetricRow {
        step,
        loss_k: out.horizons.iter().map(|h| h.loss).collect(),
        acc_k: out.horizons.iter().map(|h| h.accuracy).collect(),
        loss: out.mean_loss,
        mi_bound: mi_lower_bound(out.mean_loss, cfg.contrastive.candidates)?,
        mine: out.mine,
    })
}

/// Trains a CPC model with Adam on InfoNCE over horizons `1..=K`.
pub fn train_cpc(cfg: &ExperimentConfig, mut progress: Progress<'_>) -> Result<Trained<CpcModel>> {
    cfg.validate()?;
    let task = markov(cfg)?;
    let t = &cfg.training;
    let mut model = CpcModel::new(cfg.model.clone(), t.seed)?;
    let eval = eval_sequences(cfg)?;
    let mut data_rng = seeded(derive_seed(t.seed, streams::TRAIN_DATA));
    let mut neg_rng = seeded(derive_seed(t.seed, streams::NEGATIVES));
    let mut adam = AdamState::new(t.learning_rate, &model.params().tensors().iter().collect::<Vec<_>>());
    let lc = loss_config(cfg);
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for step in 1..=t.steps {
        let seqs = task.sample_with_sources(&batch_specs(step - 1, t.batch_size, task.sources), &mut data_rng)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let out = cpc_loss(&mut tape, &vars, &inputs(&seqs), &lc, &mut neg_rng)?;
        let grads = tape.backward(out.loss)?;
        let g: Vec<Tensor> = vars.all.iter().map(|v| grads.get(*v)).collect();
        adam.step(&mut model.params_mut().tensors_mut(), &g)?;
        model.set_trained_steps(step);
        if is_log_step(step, t.steps, t.log_every) {
            let row = evaluate_cpc(&model, cfg, &eval, step)?;
            if !row.loss.is_finite() {
                return Err(CpcError::invalid(format!("training diverged at step {step}")));
            }
            if let Some(p) = progress.as_mut() {
                p(&row);
            }
            timings.push((step, start.elapsed().as_secs_f64()));
            rows.push(row);
        }
    }
    Ok(Trained { model, rows, timings })
}

/// The same encoder and GRU trained end-to-end on hidden-state labels
/// through a linear softmax layer on `c_t`.
pub fn train_supervised(cfg: &ExperimentConfig) -> Result<CpcModel> {
    cfg.validate()?;
    let task = markov(cfg)?;
    let t = &cfg.training;
    let steps = if t.supervised_steps > 0 { t.supervised_steps } else { t.steps };
    let seed = derive_seed(t.seed, streams::SUPERVISED);
    let mut model = CpcModel::new(cfg.model.clone(), seed)?;
    let dc = cfg.model.context_dim;
    let mut init = seeded(derive_seed(seed, streams::INIT));
    let mut head = [
        uniform_tensor(&[dc, task.states], 1.0 / (dc as f64).sqrt(), &mut init),
        Tensor::zeros(&[task.states]),
    ];
    let mut all: Vec<&Tensor> = model.params().tensors().iter().collect();
    all.extend(head.iter());
    let mut adam = AdamState::new(t.learning_rate, &all);
    let mut data_rng = seeded(derive_seed(seed, streams::TRAIN_DATA));
    for step in 1..=steps {
        let seqs = task.sample_with_sources(&batch_specs(step - 1, t.batch_size, task.sources), &mut data_rng)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let hw = tape.param(head[0].clone());
        let hb = tape.param(head[1].clone());
        let mut cs = Vec::with_capacity(seqs.len());
        let mut labels = Vec::new();
        for s in &seqs {
            let x = tape.constant(s.observations.clone());
            let z = vars.encode(&mut tape, x)?;
            cs.push(vars.contextualize(&mut tape, z)?);
            labels.extend(frame_labels(&cfg.model, &s.states)?);
        }
        let c = tape.concat_rows(&cs)?;
        let logits = tape.matmul(c, hw)?;
        let logits = tape.add_row_bias(logits, hb)?;
        let loss = tape.softmax_xent(logits, &labels, Reduction::Mean)?;
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor> = vars.all.iter().map(|v| grads.get(*v)).collect();
        g.push(grads.get(hw));
        g.push(grads.get(hb));
        let mut params = model.params_mut().tensors_mut();
        let [h0, h1] = &mut head;
        params.push(h0);
        params.push(h1);
        adam.step(&mut params, &g)?;
    }
    model.set_trained_steps(steps);
    Ok(model)
}

fn pair_task(cfg: &ExperimentConfig) -> Result<&TaskConfig> {
    match &cfg.task {
        TaskConfig::Markov(_) => Err(CpcError::UnsupportedTask(
            "this command needs a task with known mutual information (gaussian or discrete)",
        )),
        t => Ok(t),
    }
}

/// Held-out pair batches, `N` pairs each.
pub fn eval_pair_batches(cfg: &ExperimentConfig, batches: usize, seed: u64) -> Result<Vec<PairBatch>> {
    let task = pair_task(cfg)?;
    let mut rng = seeded(derive_seed(seed, streams::EVAL_DATA));
    (0..batches)
        .map(|_| task.sample_pairs(cfg.contrastive.candidates, &mut rng))
        .collect()
}

/// InfoNCE bound and MINE over score matrices produced by `scorer`.
pub fn estimate_mi(
    batches: &[PairBatch],
    n: usize,
    scorer: &dyn Fn(&PairBatch) -> Result<Tensor>,
) -> Result<(MiEstimate, f64)> {
    let mut per = Vec::with_capacity(batches.len());
    let mut acc = 0.0;
    for b in batches {
        let (loss, a, mine) = square_batch_stats(&scorer(b)?)?;
        per.push((loss, mine));
        acc += a;
    }
    Ok((MiEstimate::from_batches(n, &per)?, acc / batches.len() as f64))
}

fn critic_row(critic: &Critic, cfg: &ExperimentConfig, eval: &[PairBatch], step: u64) -> Result<MetricRow> {
    let (est, acc) = estimate_mi(eval, cfg.contrastive.candidates, &|b| critic.score_matrix(&b.x, &b.c))?;
    Ok(MetricRow {
        step,
        loss_k: vec![est.loss],
        acc_k: vec![acc],
        loss: est.loss,
        mi_bound: est.lower_bound,
        mine: est.mine,
    })
}

/// Trains a separable critic on `N × N` in-batch InfoNCE.
pub fn train_critic(cfg: &ExperimentConfig, mut progress: Progress<'_>) -> Result<Trained<Critic>> {
    cfg.validate()?;
    let task = pair_task(cfg)?;
    let t = &cfg.training;
    let (dx, dc) = task.pair_dims()?;
    let mut critic = Critic::new(cfg.critic.clone(), dx, dc, t.seed)?;
    let n = cfg.contrastive.candidates;
    let eval = eval_pair_batches(cfg, t.eval_batches, t.seed)?;
    let mut data_rng = seeded(derive_seed(t.seed, streams::TRAIN_DATA));
    let mut adam = AdamState::new(t.learning_rate, &critic.params().tensors().iter().collect::<Vec<_>>());
    let targets: Vec<usize> = (0..n).collect();
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for step in 1..=t.steps {
        let batch = task.sample_pairs(n, &mut data_rng)?;
        let mut tape = Tape::new();
        let vars = critic.params().bind(&mut tape, true);
        let x = tape.constant(batch.x);
        let c = tape.constant(batch.c);
        let s = critic.scores_on_tape(&mut tape, &vars, x, c)?;
        let loss = tape.softmax_xent(s, &targets, t.reduction)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
        adam.step(&mut critic.params_mut().tensors_mut(), &g)?;
        critic.set_trained_steps(step);
        if is_log_step(step, t.steps, t.log_every) {
            let row = critic_row(&critic, cfg, &eval, step)?;
            if !row.loss.is_finite() {
                return Err(CpcError::invalid(format!("training diverged at step {step}")));
            }
            if let Some(p) = progress.as_mut() {
                p(&row);
            }
            timings.push((step, start.elapsed().as_secs_f64()));
            rows.push(row);
        }
    }
    Ok(Trained {
        model: critic,
        rows,
        timings,
    })
}
