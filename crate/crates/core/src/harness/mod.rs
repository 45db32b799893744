//! Experiment front door: configuration, training, evaluation, probing,
//! ablations and the files they write.

pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

pub use config::{ContrastiveConfig, ExperimentConfig, OutputConfig, TrainingConfig};
pub use gradcheck::gradcheck_suite;
pub use metrics::{csv_header, loss_slope, metrics_csv, MetricRow};
pub use train::{train_cpc, train_critic, train_supervised, Progress, Trained};

use crate::autodiff::gradcheck::GradCheck;
use crate::contrastive::enumerate::{by_counts, true_ratio_scores, Expectation};
use crate::contrastive::{MiEstimate, NegativeSamplingStrategy};
use crate::error::{CpcError, Result};
use crate::model::{Checkpoint, CpcModel, Representation};
use crate::probe::{run_probe_suite, FeatureSource, ProbeReport, ProbeSubject, ProbeTarget};
use crate::rng::{derive_seed, seeded, streams};
use crate::synthdata::dump::write_dataset;
use crate::synthdata::TaskConfig;

pub const REPORT_SCHEMA: &str = "cpc-lab-report";
pub const REPORT_VERSION: u32 = 1;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn timings_csv(timings: &[(u64, f64)]) -> String {
    let mut s = String::from("step,seconds\n");
    for (step, secs) in timings {
        s.push_str(&format!("{step},{secs:.3}\n"));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub schema: &'static str,
    pub version: u32,
    pub kind: &'static str,
    pub task: &'static str,
    pub steps: u64,
    pub seed: u64,
    pub final_metrics: Option<MetricRow>,
    /// Held-out loss trend over the last logged rows, nats per 1000 steps.
    pub loss_slope_per_1k: Option<f64>,
    pub model_fingerprint: String,
    pub checkpoint: PathBuf,
}

/// Trains on the configured task and writes `checkpoint.json`,
/// `metrics.csv`, `timings.csv` and `summary.json` under `output.dir`.
pub fn cmd_train(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let (ck, rows, timings, horizons, fingerprint) = if cfg.is_sequence_task() {
        let t = train_cpc(cfg, progress)?;
        let fp = t.model.params().fingerprint();
        (Checkpoint::from_model(&t.model), t.rows, t.timings, cfg.model.horizons, fp)
    } else {
        let t = train_critic(cfg, progress)?;
        let fp = t.model.params().fingerprint();
        (Checkpoint::from_critic(&t.model), t.rows, t.timings, 1, fp)
    };
    let ck_path = dir.join("checkpoint.json");
    ck.save(&ck_path)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(horizons, &rows))?;
    fs::write(dir.join("timings.csv"), timings_csv(&timings))?;
    let summary = TrainSummary {
        schema: REPORT_SCHEMA,
        version: REPORT_VERSION,
        kind: "train",
        task: cfg.task.tag(),
        steps: cfg.training.steps,
        seed: cfg.training.seed,
        final_metrics: rows.last().cloned(),
        loss_slope_per_1k: loss_slope(&rows, 10),
        model_fingerprint: fingerprint,
        checkpoint: ck_path,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct MiReport {
    pub schema: &'static str,
    pub version: u32,
    pub kind: &'static str,
    pub task: &'static str,
    pub scorer: &'static str,
    pub candidates: usize,
    pub true_mi: f64,
    pub estimate: MiEstimate,
    pub accuracy: f64,
    /// Exact expectation over all candidate sets (discrete task, oracle scorer).
    pub exact: Option<Expectation>,
}

/// Bound and MINE on held-out batches, from a trained critic or the true
/// density ratio.
pub fn cmd_eval_mi(cfg: &ExperimentConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<MiReport> {
    cfg.validate()?;
    if cfg.is_sequence_task() {
        return Err(CpcError::UnsupportedTask(
            "eval-mi needs a task with known mutual information (gaussian or discrete)",
        ));
    }
    let task = &cfg.task;
    let n = cfg.contrastive.candidates;
    let batches = train::eval_pair_batches(cfg, cfg.training.eval_batches, cfg.training.seed)?;
    let (estimate, accuracy, exact, scorer) = if oracle {
        let (est, acc) = train::estimate_mi(&batches, n, &|b| task.log_ratio_matrix(b))?;
        let exact = match task {
            TaskConfig::Discrete(d) => Some(by_counts(d, n, &true_ratio_scores(d))?),
            _ => None,
        };
        (est, acc, exact, "oracle")
    } else {
        let path = checkpoint.ok_or_else(|| CpcError::invalid("eval-mi needs --checkpoint or --oracle"))?;
        let critic = Checkpoint::load(path)?.into_critic()?;
        if critic.dims() != task.pair_dims()? {
            return Err(CpcError::Checkpoint(format!(
                "critic input dims {:?} do not match the task {:?}",
                critic.dims(),
                task.pair_dims()?
            )));
        }
        let (est, acc) = train::estimate_mi(&batches, n, &|b| critic.score_matrix(&b.x, &b.c))?;
        (est, acc, None, "critic")
    };
    let report = MiReport {
        schema: REPORT_SCHEMA,
        version: REPORT_VERSION,
        kind: "eval_mi",
        task: task.tag(),
        scorer,
        candidates: n,
        true_mi: task.true_mi()?,
        estimate,
        accuracy,
        exact,
    };
    fs::create_dir_all(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join("eval_mi.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSuiteReport {
    pub schema: &'static str,
    pub version: u32,
    pub kind: &'static str,
    pub checkpoint_steps: u64,
    pub reports: Vec<ProbeReport>,
}

/// Probe suite for a checkpoint. A trained checkpoint is compared against a
/// random-init model with the same init seed and, when enabled, a
/// supervised model of the same architecture; an untrained one is probed
/// alone and tagged `random-init`.
pub fn cmd_probe(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ProbeSuiteReport> {
    cfg.validate()?;
    let task = match &cfg.task {
        TaskConfig::Markov(t) => t,
        _ => return Err(CpcError::UnsupportedTask("probe needs the markov sequence task")),
    };
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let suite = probe_models(cfg, &model, cfg.probe.supervised)?;
    let report = ProbeSuiteReport {
        schema: REPORT_SCHEMA,
        version: REPORT_VERSION,
        kind: "probe",
        checkpoint_steps: model.trained_steps(),
        reports: run_probe_suite(&suite.subjects(&model), task, &cfg.probe, cfg.training.seed)?,
    };
    fs::create_dir_all(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join("probe.json"), &report)?;
    Ok(report)
}

/// Baseline models that accompany a probed checkpoint.
pub struct ProbeModels {
    random: Option<CpcModel>,
    supervised: Option<CpcModel>,
}

impl ProbeModels {
    pub fn subjects<'a>(&'a self, model: &'a CpcModel) -> Vec<ProbeSubject<'a>> {
        let mut out = ProbeSubject::for_checkpoint(model);
        if let Some(r) = &self.random {
            out.push(ProbeSubject {
                source: FeatureSource::RandomInit,
                model: r,
                representation: Representation::C,
            });
        }
        if let Some(s) = &self.supervised {
            out.push(ProbeSubject {
                source: FeatureSource::SupervisedCeiling,
                model: s,
                representation: Representation::C,
            });
        }
        out
    }
}

pub fn probe_models(cfg: &ExperimentConfig, model: &CpcModel, supervised: bool) -> Result<ProbeModels> {
    if model.config().input_channels != cfg.model.input_channels {
        return Err(CpcError::Checkpoint(format!(
            "checkpoint expects {} input channels, task has {}",
            model.config().input_channels,
            cfg.model.input_channels
        )));
    }
    if model.trained_steps() == 0 {
        return Ok(ProbeModels {
            random: None,
            supervised: None,
        });
    }
    let random = CpcModel::new(model.config().clone(), model.seed())?;
    let supervised = if supervised {
        let mut scfg = cfg.clone();
        scfg.model = model.config().clone();
        Some(train_supervised(&scfg)?)
    } else {
        None
    };
    Ok(ProbeModels {
        random: Some(random),
        supervised,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Steps,
    Negatives,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Steps => "steps",
            Self::Negatives => "negatives",
        }
    }
}

/// Horizons swept by the steps ablation.
pub const ABLATION_HORIZONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub label: String,
    pub horizons: usize,
    pub strategy: NegativeSamplingStrategy,
    /// `ok` or `infeasible`.
    pub status: String,
    pub hidden_state_accuracy: Option<f64>,
    pub source_id_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub note: Option<String>,
}

fn ablation_settings(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, String, ExperimentConfig)> {
    match axis {
        AblationAxis::Steps => ABLATION_HORIZONS
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.model.horizons = k;
                (format!("k{k}"), format!("{k} steps"), c)
            })
            .collect(),
        AblationAxis::Negatives => NegativeSamplingStrategy::ALL
            .iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.contrastive.strategy = s;
                (s.name().to_string(), s.label().to_string(), c)
            })
            .collect(),
    }
}

fn run_setting(setting: String, label: String, cfg: ExperimentConfig) -> Result<AblationRow> {
    let task = match &cfg.task {
        TaskConfig::Markov(t) => t.clone(),
        _ => return Err(CpcError::UnsupportedTask("ablate needs the markov sequence task")),
    };
    let mut row = AblationRow {
        setting,
        label,
        horizons: cfg.model.horizons,
        strategy: cfg.contrastive.strategy,
        status: "ok".into(),
        hidden_state_accuracy: None,
        source_id_accuracy: None,
        final_loss: None,
        note: None,
    };
    let summary = match cmd_train(&cfg, None) {
        Ok(s) => s,
        Err(e @ CpcError::StrategyInfeasible { .. }) => {
            row.status = "infeasible".into();
            row.note = Some(e.to_string());
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let model = Checkpoint::load(&summary.checkpoint)?.into_model()?;
    let subj = [ProbeSubject {
        source: FeatureSource::CpcC,
        model: &model,
        representation: Representation::C,
    }];
    let reports = run_probe_suite(&subj, &task, &cfg.probe, cfg.training.seed)?;
    for r in &reports {
        match r.target {
            ProbeTarget::HiddenState => row.hidden_state_accuracy = Some(r.test_accuracy),
            ProbeTarget::SourceId => row.source_id_accuracy = Some(r.test_accuracy),
        }
    }
    row.final_loss = summary.final_metrics.map(|m| m.loss);
    Ok(row)
}

/// Worker count from `CPC_LAB_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("CPC_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,label,horizons,strategy,status,hidden_state_accuracy,source_id_accuracy,final_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},\"{}\",{},{},{},{},{},{}\n",
            r.setting,
            r.label,
            r.horizons,
            r.strategy.name(),
            r.status,
            opt(r.hidden_state_accuracy),
            opt(r.source_id_accuracy),
            opt(r.final_loss)
        ));
    }
    s
}

/// One train-and-probe run per setting on the chosen axis. Settings share
/// every seed and differ only along the axis; each writes to its own
/// directory under `output.dir`.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if !cfg.is_sequence_task() {
        return Err(CpcError::UnsupportedTask("ablate needs the markov sequence task"));
    }
    let root = cfg.output.dir.join(format!("ablate-{}", axis.name()));
    let mut settings = ablation_settings(cfg, axis);
    for (name, _, c) in &mut settings {
        c.output.dir = root.join(name.as_str());
        c.validate()?;
    }
    let count = settings.len();
    let jobs = Mutex::new(settings.into_iter().map(Some).collect::<Vec<_>>());
    let results: Vec<Mutex<Option<Result<AblationRow>>>> = (0..count).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_count().min(results.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= results.len() {
                    break;
                }
                let job = jobs.lock().expect("lock")[i].take().expect("each job runs once");
                let r = run_setting(job.0, job.1, job.2);
                *results[i].lock().expect("lock") = Some(r);
            });
        }
    });
    let rows = results
        .into_iter()
        .map(|m| m.into_inner().expect("lock").expect("job ran"))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join(format!("ablate_{}.csv", axis.name())), ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Probe,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
            Self::Probe => "probe",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::Train => streams::TRAIN_DATA,
            Self::Eval => streams::EVAL_DATA,
            Self::Probe => streams::PROBE_DATA,
        }
    }
}

/// Writes `sequences` Markov sequences of one split to `path`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, split: Split, sequences: usize, path: &Path) -> Result<()> {
    let task = match &cfg.task {
        TaskConfig::Markov(t) => t,
        _ => return Err(CpcError::UnsupportedTask("gen-data writes markov sequence datasets")),
    };
    task.validate()?;
    let mut rng = seeded(derive_seed(cfg.training.seed, split.stream()));
    let seqs = task.sample_sequences(sequences, 0, &mut rng)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(&mut w, split.name(), task, &seqs)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub schema: &'static str,
    pub version: u32,
    pub kind: &'static str,
    pub passed: bool,
    pub checks: Vec<GradCheck>,
}

pub fn cmd_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let checks = gradcheck_suite(seed, None)?;
    Ok(GradcheckReport {
        schema: REPORT_SCHEMA,
        version: REPORT_VERSION,
        kind: "gradcheck",
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
