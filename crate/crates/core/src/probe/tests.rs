use rand::Rng as _;

use super::*;
use crate::model::ModelConfig;
use crate::rng::{normal, seeded};

fn opts() -> LbfgsOptions {
    LbfgsOptions::default()
}

fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = seeded(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let s = if y == 0 { -sep } else { sep };
        rows.push(vec![s + normal(&mut rng), 0.5 * s + normal(&mut rng)]);
        labels.push(y);
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn one_hot_features_are_fit_exactly() {
    let labels: Vec<usize> = (0..60).map(|i| (i * 7) % 5).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..5).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let w = fit_linear_probe(&x, &labels, 5, 0.0, opts()).unwrap();
    assert_eq!(evaluate_probe(&w, &x, &labels).unwrap(), 1.0);
}

#[test]
fn constant_features_give_the_prior_predictor() {
    let labels: Vec<usize> = (0..100).map(|i| if i < 55 { 2 } else if i < 80 { 0 } else { 1 }).collect();
    let x = Tensor::zeros(&[100, 4]);
    let w = fit_linear_probe(&x, &labels, 3, 0.0, opts()).unwrap();
    assert!((evaluate_probe(&w, &x, &labels).unwrap() - 0.55).abs() < 1e-12);
    // bias converges to the log prior up to a shared constant
    let b: Vec<f64> = (0..3).map(|c| w.weights.at2(c, 4)).collect();
    assert!(((b[2] - b[0]) - (0.55f64 / 0.25).ln()).abs() < 1e-4);
}

#[test]
fn separable_blobs_generalize() {
    let (xtr, ytr) = blobs(400, 2.0, 1);
    let (xte, yte) = blobs(400, 2.0, 2);
    let w = fit_linear_probe(&xtr, &ytr, 2, 1e-4, opts()).unwrap();
    assert!(evaluate_probe(&w, &xte, &yte).unwrap() > 0.95);
}

#[test]
fn hand_weights_and_tie_rule() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.5]]).unwrap();
    let mut w = ProbeWeights::zeros(2, 2);
    assert_eq!(w.predict(&x).unwrap(), vec![0, 0, 0]);
    assert!((evaluate_probe(&w, &x, &[0, 1, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    w.weights = Tensor::from_rows(&[vec![1.0, -1.0, 0.0], vec![-1.0, 1.0, 0.0]]).unwrap();
    assert_eq!(evaluate_probe(&w, &x, &[0, 1, 0]).unwrap(), 1.0);
    assert!(evaluate_probe(&w, &Tensor::zeros(&[2, 3]), &[0, 0]).is_err());
}

#[test]
fn random_labels_score_chance() {
    let mut rng = seeded(3);
    let n = 20_000;
    let x = Tensor::from_rows(&(0..n).map(|_| vec![normal(&mut rng), normal(&mut rng)]).collect::<Vec<_>>()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let mut w = ProbeWeights::zeros(8, 2);
    for v in w.weights.values_mut() {
        *v = normal(&mut rng);
    }
    let acc = evaluate_probe(&w, &x, &labels).unwrap();
    let sigma = (0.125f64 * 0.875 / n as f64).sqrt();
    assert!((acc - 0.125).abs() < 3.0 * sigma, "{acc}");
}

#[test]
fn fit_errors() {
    let x = Tensor::zeros(&[4, 2]);
    assert!(matches!(fit_linear_probe(&x, &[0, 0, 2, 2], 3, 0.0, opts()), Err(CpcError::MissingClass(1))));
    assert!(fit_linear_probe(&x, &[0, 1, 0], 2, 0.0, opts()).is_err());
    assert!(fit_linear_probe(&x, &[0, 1, 0, 1], 2, -1.0, opts()).is_err());
    assert!(fit_linear_probe(&x, &[0, 1, 0, 5], 2, 0.0, opts()).is_err());
}

#[test]
fn accuracy_is_invariant_to_invertible_maps() {
    let (xtr, ytr) = blobs(600, 0.7, 4);
    let (xte, yte) = blobs(600, 0.7, 5);
    let map = |x: &Tensor| {
        let rows: Vec<Vec<f64>> = (0..x.shape()[0])
            .map(|i| {
                let r = x.row(i);
                vec![3.0 * r[0] - 2.0 * r[1] + 1.0, 0.01 * r[0] + 0.5 * r[1]]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let a = fit_linear_probe(&xtr, &ytr, 2, 0.0, opts()).unwrap();
    let b = fit_linear_probe(&map(&xtr), &ytr, 2, 0.0, opts()).unwrap();
    let ea = evaluate_probe(&a, &xte, &yte).unwrap();
    let eb = evaluate_probe(&b, &map(&xte), &yte).unwrap();
    assert!((ea - eb).abs() <= 1e-3, "{ea} vs {eb}");
    assert!(ea > 0.6);
}

#[test]
fn hidden_probe_solves_xor() {
    let mut rng = seeded(8);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..400 {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        rows.push(vec![a, b]);
        labels.push(usize::from((a > 0.0) != (b > 0.0)));
    }
    let x = Tensor::from_rows(&rows).unwrap();
    let lin = fit_linear_probe(&x, &labels, 2, 0.0, opts()).unwrap();
    assert!(evaluate_probe(&lin, &x, &labels).unwrap() < 0.7);
    let hp = HiddenProbe::fit(&x, &labels, 2, 32, 400, 0).unwrap();
    assert!(hp.accuracy(&x, &labels).unwrap() > 0.95);
}

fn small_task() -> LatentMarkovSequenceTask {
    LatentMarkovSequenceTask {
        states: 3,
        sources: 2,
        dim: 4,
        length: 40,
        noise: 0.0,
        source_offset: 0.0,
        ..LatentMarkovSequenceTask::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        input_channels: 4,
        context_dim: 8,
        horizons: 2,
        encoder: crate::model::EncoderConfig {
            strides: vec![2, 2],
            widths: vec![4, 4],
            channels: vec![8, 8],
        },
    }
}

#[test]
fn suite_tags_and_freezes() {
    let task = small_task();
    let settings = ProbeSettings {
        train_sequences: 6,
        validation_sequences: 2,
        test_sequences: 4,
        ..ProbeSettings::default()
    };
    let random = CpcModel::new(small_model(), 1).unwrap();
    let mut trained = random.clone();
    trained.set_trained_steps(5);
    let mut subjects = ProbeSubject::for_checkpoint(&random);
    subjects.extend(ProbeSubject::for_checkpoint(&trained));
    let reports = run_probe_suite(&subjects, &task, &settings, 0).unwrap();
    let tags: Vec<(&str, &str)> = reports.iter().map(|r| (r.source.tag(), r.target.tag())).collect();
    assert_eq!(
        tags,
        vec![
            ("random-init", "hidden-state"),
            ("random-init", "source-id"),
            ("cpc-c", "hidden-state"),
            ("cpc-c", "source-id"),
            ("cpc-z", "hidden-state"),
            ("cpc-z", "source-id"),
        ]
    );
    for r in &reports {
        assert!((0.0..=1.0).contains(&r.test_accuracy) && (0.0..=1.0).contains(&r.train_accuracy));
        assert_eq!(r.model_fingerprint, random.params().fingerprint());
        // 40 raw → 8 frames per sequence
        assert_eq!((r.train_frames, r.test_frames), (48, 32));
    }
    let json = serde_json::to_string(&reports[0]).unwrap();
    assert!(json.contains("\"random-init\"") && json.contains("\"hidden-state\""));
}

#[test]
fn noiseless_states_are_linearly_readable_from_the_signal() {
    // Identity "encoder": one width-1 stride-1 layer whose kernel copies the input.
    let task = LatentMarkovSequenceTask {
        length: 400,
        ..small_task()
    };
    let cfg = ModelConfig {
        input_channels: 4,
        context_dim: 2,
        horizons: 1,
        encoder: crate::model::EncoderConfig {
            strides: vec![1],
            widths: vec![1],
            channels: vec![8],
        },
    };
    let mut m = CpcModel::new(cfg, 0).unwrap();
    let mut k = Tensor::zeros(&[8, 4, 1]);
    for i in 0..4 {
        k.values_mut()[i * 4 + i] = 1.0;
        k.values_mut()[(4 + i) * 4 + i] = -1.0;
    }
    *m.params_mut().get_mut("conv0.weight").unwrap() = k;
    m.params_mut().get_mut("conv0.bias").unwrap().values_mut().fill(0.0);
    let settings = ProbeSettings {
        train_sequences: 4,
        validation_sequences: 2,
        test_sequences: 4,
        ..ProbeSettings::default()
    };
    let subj = ProbeSubject {
        source: FeatureSource::SupervisedCeiling,
        model: &m,
        representation: Representation::Z,
    };
    let data = ProbeData::generate(&task, &settings, 0).unwrap();
    let (x, y, _) = extract_features(&m, Representation::Z, &data.train).unwrap();
    let mut present = [false; 3];
    y.iter().for_each(|&s| present[s] = true);
    assert!(present.iter().all(|&p| p));
    let r = run_probe_suite(&[subj], &task, &settings, 0).unwrap();
    assert_eq!(r[0].test_accuracy, 1.0);
    assert_eq!(r[0].source, FeatureSource::SupervisedCeiling);
    assert_eq!(x.shape()[1], 8);
}

#[test]
fn settings_require_every_source() {
    let task = LatentMarkovSequenceTask::default();
    let s = ProbeSettings {
        test_sequences: 3,
        ..ProbeSettings::default()
    };
    let errs = s.errors(&task);
    assert_eq!(errs.len(), 1);
    assert!(errs[0].contains("probe.test_sequences"));
}
