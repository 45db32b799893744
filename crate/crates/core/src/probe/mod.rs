//! Linear probes on frozen representations.
//!
//! A probe is multinomial logistic regression on standardized per-frame
//! features, fit by L-BFGS. The suite compares CPC features against a
//! randomly initialized model and a supervised model of the same
//! architecture, on hidden-state and source-id targets.

mod lbfgs;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult};

use crate::autodiff::{logsumexp, AdamState, Reduction, Tape, Tensor, Var};
use crate::error::{CpcError, Result};
use crate::model::{frame_labels, CpcModel, Representation};
use crate::rng::{derive_seed, seeded, streams, uniform_tensor};
use crate::synthdata::{LabeledSequence, LatentMarkovSequenceTask};

/// Standardization plus a linear map, `classes × (dim + 1)` with the bias in
/// the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeWeights {
    pub classes: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Tensor,
}

impl ProbeWeights {
    /// Untrained probe: every class scores zero.
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            weights: Tensor::zeros(&[classes, dim + 1]),
        }
    }

    fn logits(&self, row: &[f64], out: &mut [f64]) {
        let w = self.weights.values();
        let stride = self.dim + 1;
        for (c, o) in out.iter_mut().enumerate() {
            let wc = &w[c * stride..(c + 1) * stride];
            let mut s = wc[self.dim];
            for j in 0..self.dim {
                s += wc[j] * (row[j] - self.mean[j]) / self.scale[j];
            }
            *o = s;
        }
    }

    /// Argmax class per row; ties go to the lowest class id.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let (n, d) = features.dims2().ok_or(CpcError::Empty("probe features"))?;
        if d != self.dim {
            return Err(CpcError::shape("evaluate_probe", &[n, d], &[n, self.dim]));
        }
        let mut logits = vec![0.0; self.classes];
        Ok((0..n)
            .map(|i| {
                self.logits(features.row(i), &mut logits);
                argmax(&logits)
            })
            .collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_labels(n: usize, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CpcError::shape("probe labels", &[n], &[labels.len()]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(CpcError::IndexOutOfRange {
            op: "probe labels",
            index: l,
            len: classes,
        });
    }
    Ok(())
}

fn standardize_stats(features: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = features.dims2().expect("matrix");
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Multinomial logistic regression minimizing mean cross-entropy plus
/// `l2/2 · ‖W‖²` (bias excluded).
pub fn fit_linear_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    l2: f64,
    opts: LbfgsOptions,
) -> Result<ProbeWeights> {
    let (n, d) = features.dims2().ok_or(CpcError::Empty("probe features"))?;
    check_labels(n, labels, classes)?;
    if !(l2 >= 0.0) {
        return Err(CpcError::invalid(format!("probe l2 must be non-negative, got {l2}")));
    }
    if n < classes {
        return Err(CpcError::invalid(format!("probe needs at least {classes} examples, got {n}")));
    }
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(CpcError::MissingClass(c));
    }

    let (mean, scale) = standardize_stats(features);
    let stride = d + 1;
    let mut xs = vec![0.0; n * stride];
    for i in 0..n {
        for j in 0..d {
            xs[i * stride + j] = (features.row(i)[j] - mean[j]) / scale[j];
        }
        xs[i * stride + d] = 1.0;
    }
    let inv_n = 1.0 / n as f64;
    let mut logits = vec![0.0; classes];
    let objective = |w: &[f64], g: &mut [f64]| -> f64 {
        g.fill(0.0);
        let mut f = 0.0;
        for i in 0..n {
            let x = &xs[i * stride..(i + 1) * stride];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = w[c * stride..(c + 1) * stride].iter().zip(x).map(|(a, b)| a * b).sum();
            }
            let lse = logsumexp(&logits).expect("classes > 0");
            f += lse - logits[labels[i]];
            for c in 0..classes {
                let p = (logits[c] - lse).exp() - if c == labels[i] { 1.0 } else { 0.0 };
                for (gj, xj) in g[c * stride..(c + 1) * stride].iter_mut().zip(x) {
                    *gj += p * xj;
                }
            }
        }
        f *= inv_n;
        g.iter_mut().for_each(|v| *v *= inv_n);
        if l2 > 0.0 {
            for c in 0..classes {
                for j in 0..d {
                    let wj = w[c * stride + j];
                    f += 0.5 * l2 * wj * wj;
                    g[c * stride + j] += l2 * wj;
                }
            }
        }
        f
    };
    let res = minimize(objective, vec![0.0; classes * stride], opts);
    Ok(ProbeWeights {
        classes,
        dim: d,
        mean,
        scale,
        weights: Tensor::new(vec![classes, stride], res.x)?,
    })
}

/// Fraction of rows whose argmax class matches the label.
pub fn evaluate_probe(weights: &ProbeWeights, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = weights.predict(features)?;
    check_labels(pred.len(), labels, weights.classes)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Single-hidden-layer ReLU classifier trained full-batch with Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl HiddenProbe {
    pub fn fit(
        features: &Tensor,
        labels: &[usize],
        classes: usize,
        width: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Self> {
        let (n, d) = features.dims2().ok_or(CpcError::Empty("probe features"))?;
        check_labels(n, labels, classes)?;
        let (mean, scale) = standardize_stats(features);
        let x = standardized(features, &mean, &scale);
        let mut rng = seeded(derive_seed(seed, streams::PROBE_FIT));
        let mut p = vec![
            uniform_tensor(&[d, width], 1.0 / (d as f64).sqrt(), &mut rng),
            Tensor::zeros(&[width]),
            uniform_tensor(&[width, classes], 1.0 / (width as f64).sqrt(), &mut rng),
            Tensor::zeros(&[classes]),
        ];
        let mut adam = AdamState::new(1e-2, &p.iter().collect::<Vec<_>>());
        for _ in 0..steps {
            let mut tape = Tape::new();
            let vars: Vec<_> = p.iter().map(|t| tape.param(t.clone())).collect();
            let xv = tape.constant(x.clone());
            let logits = hidden_logits(&mut tape, xv, &vars)?;
            let loss = tape.softmax_xent(logits, labels, Reduction::Mean)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
            adam.step(&mut p.iter_mut().collect::<Vec<_>>(), &g)?;
        }
        let [w1, b1, w2, b2] = <[Tensor; 4]>::try_from(p).expect("four tensors");
        Ok(Self {
            mean,
            scale,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let x = standardized(features, &self.mean, &self.scale);
        let mut tape = Tape::new();
        let vars: Vec<_> = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let xv = tape.constant(x);
        let logits = hidden_logits(&mut tape, xv, &vars)?;
        let lv = tape.value(logits);
        let (n, _) = lv.dims2().expect("matrix");
        check_labels(n, labels, lv.shape()[1])?;
        let hits = (0..n).filter(|&i| argmax(lv.row(i)) == labels[i]).count();
        Ok(hits as f64 / n as f64)
    }
}

fn standardized(features: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let (n, d) = features.dims2().expect("matrix");
    let mut out = features.clone();
    for i in 0..n {
        for j in 0..d {
            out.values_mut()[i * d + j] = (features.row(i)[j] - mean[j]) / scale[j];
        }
    }
    out
}

fn hidden_logits(tape: &mut Tape, x: Var, v: &[Var]) -> Result<Var> {
    let h = tape.matmul(x, v[0])?;
    let h = tape.add_row_bias(h, v[1])?;
    let h = tape.relu(h);
    let o = tape.matmul(h, v[2])?;
    tape.add_row_bias(o, v[3])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    CpcC,
    CpcZ,
    RandomInit,
    SupervisedCeiling,
}

impl FeatureSource {
    pub fn tag(self) -> &'static str {
        match self {
            Self::CpcC => "cpc-c",
            Self::CpcZ => "cpc-z",
            Self::RandomInit => "random-init",
            Self::SupervisedCeiling => "supervised-ceiling",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTarget {
    HiddenState,
    SourceId,
}

impl ProbeTarget {
    pub const ALL: [Self; 2] = [Self::HiddenState, Self::SourceId];

    pub fn tag(self) -> &'static str {
        match self {
            Self::HiddenState => "hidden-state",
            Self::SourceId => "source-id",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    Linear,
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub train_sequences: usize,
    pub validation_sequences: usize,
    pub test_sequences: usize,
    pub l2_grid: Vec<f64>,
    pub max_iterations: usize,
    /// Also fit the single-hidden-layer variant.
    pub hidden_layer: bool,
    pub hidden_width: usize,
    pub hidden_steps: usize,
    /// Train a supervised model of the same architecture as a ceiling.
    pub supervised: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            train_sequences: 40,
            validation_sequences: 10,
            test_sequences: 20,
            l2_grid: vec![0.0, 1e-4, 1e-2],
            max_iterations: 300,
            hidden_layer: false,
            hidden_width: 256,
            hidden_steps: 300,
            supervised: true,
        }
    }
}

impl ProbeSettings {
    pub fn errors(&self, task: &LatentMarkovSequenceTask) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("probe.train_sequences", self.train_sequences),
            ("probe.validation_sequences", self.validation_sequences),
            ("probe.test_sequences", self.test_sequences),
        ] {
            if v < task.sources {
                errs.push(format!("{name} must be at least task.sources ({}) so every source appears", task.sources));
            }
        }
        if self.l2_grid.is_empty() || self.l2_grid.iter().any(|l| !(*l >= 0.0)) {
            errs.push("probe.l2_grid must be a non-empty list of non-negative values".into());
        }
        if self.max_iterations == 0 {
            errs.push("probe.max_iterations must be positive".into());
        }
        if self.hidden_layer && self.hidden_width == 0 {
            errs.push("probe.hidden_width must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub source: FeatureSource,
    pub target: ProbeTarget,
    pub classifier: Classifier,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub validation_accuracy: f64,
    /// Test-set frequency of the most common class.
    pub majority_baseline: f64,
    pub l2: f64,
    pub feature_dim: usize,
    pub classes: usize,
    pub train_frames: usize,
    pub test_frames: usize,
    pub model_fingerprint: String,
    pub config_hash: String,
}

/// A frozen model and the features to read from it.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSubject<'a> {
    pub source: FeatureSource,
    pub model: &'a CpcModel,
    pub representation: Representation,
}

impl<'a> ProbeSubject<'a> {
    /// Standard tagging: an untrained checkpoint is `random-init`, a trained
    /// one yields `cpc-c` and `cpc-z`.
    pub fn for_checkpoint(model: &'a CpcModel) -> Vec<Self> {
        if model.trained_steps() == 0 {
            vec![Self {
                source: FeatureSource::RandomInit,
                model,
                representation: Representation::C,
            }]
        } else {
            vec![
                Self {
                    source: FeatureSource::CpcC,
                    model,
                    representation: Representation::C,
                },
                Self {
                    source: FeatureSource::CpcZ,
                    model,
                    representation: Representation::Z,
                },
            ]
        }
    }
}

/// Train/validation/test sequences for probing, disjoint by sequence.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub train: Vec<LabeledSequence>,
    pub validation: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
}

impl ProbeData {
    pub fn generate(task: &LatentMarkovSequenceTask, settings: &ProbeSettings, seed: u64) -> Result<Self> {
        let errs = settings.errors(task);
        if !errs.is_empty() {
            return Err(CpcError::Config(errs));
        }
        let mut rng = seeded(derive_seed(seed, streams::PROBE_DATA));
        let (a, b, c) = (settings.train_sequences, settings.validation_sequences, settings.test_sequences);
        Ok(Self {
            train: task.sample_sequences(a, 0, &mut rng)?,
            validation: task.sample_sequences(b, a, &mut rng)?,
            test: task.sample_sequences(c, a + b, &mut rng)?,
        })
    }
}

/// Per-frame features with hidden-state and source labels.
pub fn extract_features(
    model: &CpcModel,
    which: Representation,
    seqs: &[LabeledSequence],
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut states = Vec::new();
    let mut sources = Vec::new();
    for s in seqs {
        let f = model.representation(&s.observations, which)?;
        let labels = frame_labels(model.config(), &s.states)?;
        let (t, _) = f.dims2().expect("matrix");
        for (i, &l) in labels.iter().enumerate().take(t) {
            rows.push(f.row(i).to_vec());
            states.push(l);
            sources.push(s.source);
        }
    }
    Ok((Tensor::from_rows(&rows)?, states, sources))
}

fn majority(labels: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

/// Hash of the task and probe settings that produced a report.
pub fn config_hash(task: &LatentMarkovSequenceTask, settings: &ProbeSettings, seed: u64) -> Result<String> {
    let text = serde_json::to_string(&(task, settings, seed))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// One report per subject, target and classifier.
pub fn run_probe_suite(
    subjects: &[ProbeSubject<'_>],
    task: &LatentMarkovSequenceTask,
    settings: &ProbeSettings,
    seed: u64,
) -> Result<Vec<ProbeReport>> {
    let data = ProbeData::generate(task, settings, seed)?;
    let hash = config_hash(task, settings, seed)?;
    let opts = LbfgsOptions {
        max_iterations: settings.max_iterations,
        ..LbfgsOptions::default()
    };
    let mut reports = Vec::new();
    for subj in subjects {
        let before = subj.model.params().fingerprint();
        let (xtr, str_, srtr) = extract_features(subj.model, subj.representation, &data.train)?;
        let (xva, sva, srva) = extract_features(subj.model, subj.representation, &data.validation)?;
        let (xte, ste, srte) = extract_features(subj.model, subj.representation, &data.test)?;
        for target in ProbeTarget::ALL {
            let (classes, ytr, yva, yte) = match target {
                ProbeTarget::HiddenState => (task.states, &str_, &sva, &ste),
                ProbeTarget::SourceId => (task.sources, &srtr, &srva, &srte),
            };
            let mut best: Option<(f64, f64, ProbeWeights)> = None;
            for &l2 in &settings.l2_grid {
                let w = fit_linear_probe(&xtr, ytr, classes, l2, opts)?;
                let va = evaluate_probe(&w, &xva, yva)?;
                if best.as_ref().is_none_or(|b| va > b.0) {
                    best = Some((va, l2, w));
                }
            }
            let (va, l2, w) = best.expect("non-empty grid");
            reports.push(ProbeReport {
                source: subj.source,
                target,
                classifier: Classifier::Linear,
                train_accuracy: evaluate_probe(&w, &xtr, ytr)?,
                test_accuracy: evaluate_probe(&w, &xte, yte)?,
                validation_accuracy: va,
                majority_baseline: majority(yte, classes),
                l2,
                feature_dim: xtr.shape()[1],
                classes,
                train_frames: ytr.len(),
                test_frames: yte.len(),
                model_fingerprint: before.clone(),
                config_hash: hash.clone(),
            });
            if settings.hidden_layer {
                let hp = HiddenProbe::fit(&xtr, ytr, classes, settings.hidden_width, settings.hidden_steps, seed)?;
                reports.push(ProbeReport {
                    source: subj.source,
                    target,
                    classifier: Classifier::Hidden,
                    train_accuracy: hp.accuracy(&xtr, ytr)?,
                    test_accuracy: hp.accuracy(&xte, yte)?,
                    validation_accuracy: hp.accuracy(&xva, yva)?,
                    majority_baseline: majority(yte, classes),
                    l2: 0.0,
                    feature_dim: xtr.shape()[1],
                    classes,
                    train_frames: ytr.len(),
                    test_frames: yte.len(),
                    model_fingerprint: before.clone(),
                    config_hash: hash.clone(),
                });
            }
        }
        if subj.model.params().fingerprint() != before {
            return Err(CpcError::invalid(format!(
                "probe modified the parameters of the {} model",
                subj.source.tag()
            )));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests;
