use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::Reduction;
use crate::contrastive::NegativeSamplingStrategy;
use crate::rng::{normal_tensor, seeded};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        encoder: EncoderConfig {
            strides: vec![2],
            widths: vec![3],
            channels: vec![3],
        },
        context_dim: 3,
        horizons: 2,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// Straight-line references, written without the tape.
fn naive_conv_relu(x: &[Vec<f64>], w: &Tensor, b: &Tensor, stride: usize) -> Vec<Vec<f64>> {
    let (cout, cin, width) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let time = x[0].len();
    let tout = (time - width) / stride + 1;
    let mut out = vec![vec![0.0; tout]; cout];
    for o in 0..cout {
        for t in 0..tout {
            let mut s = b.values()[o];
            for i in 0..cin {
                for j in 0..width {
                    s += w.values()[(o * cin + i) * width + j] * x[i][t * stride + j];
                }
            }
            out[o][t] = s.max(0.0);
        }
    }
    out
}

fn naive_gru(h: &[f64], x: &[f64], m: &CpcModel) -> Vec<f64> {
    let d = h.len();
    let p = m.params();
    let (wi, wh, bi, bh) = (
        p.get("gru.w_ih").unwrap(),
        p.get("gru.w_hh").unwrap(),
        p.get("gru.b_ih").unwrap(),
        p.get("gru.b_hh").unwrap(),
    );
    let lin = |w: &Tensor, b: &Tensor, v: &[f64], r: usize| -> f64 {
        b.values()[r] + w.row(r).iter().zip(v).map(|(a, c)| a * c).sum::<f64>()
    };
    (0..d)
        .map(|j| {
            let r = sigmoid(lin(wi, bi, x, j) + lin(wh, bh, h, j));
            let u = sigmoid(lin(wi, bi, x, d + j) + lin(wh, bh, h, d + j));
            let n = (lin(wi, bi, x, 2 * d + j) + r * lin(wh, bh, h, 2 * d + j)).tanh();
            (1.0 - u) * n + u * h[j]
        })
        .collect()
}

#[test]
fn length_arithmetic() {
    let cfg = ModelConfig::default();
    // (64 − 4)/2 + 1 = 31, then (31 − 4)/2 + 1 = 14
    assert_eq!(cfg.latent_len(64), Some(14));
    assert_eq!(cfg.receptive_field(), 10);
    assert_eq!(cfg.latent_len(10), Some(1));
    assert_eq!(cfg.latent_len(9), None);
    assert_eq!(cfg.total_stride(), 4);
    assert_eq!(cfg.frame_end(0), 9);
    assert_eq!(cfg.frame_end(3), 21);
    // 256 raw samples: 127 then 62 frames
    assert_eq!(cfg.latent_len(256), Some(62));
}

#[test]
fn encode_matches_reference_and_lengths() {
    let cfg = ModelConfig::default();
    let m = CpcModel::new(cfg.clone(), 3).unwrap();
    let x = normal_tensor(&[16, 64], &mut seeded(4));
    let z = m.encode(&x).unwrap();
    assert_eq!(z.shape(), &[14, 32]);

    let mut h: Vec<Vec<f64>> = (0..16).map(|i| x.row(i).to_vec()).collect();
    for layer in 0..2 {
        let w = m.params().get(&format!("conv{layer}.weight")).unwrap();
        let b = m.params().get(&format!("conv{layer}.bias")).unwrap();
        h = naive_conv_relu(&h, w, b, 2);
    }
    for t in 0..14 {
        for ch in 0..32 {
            assert!((z.at2(t, ch) - h[ch][t]).abs() < 1e-12);
        }
    }
    let one = m.encode(&normal_tensor(&[16, 10], &mut seeded(5))).unwrap();
    assert_eq!(one.shape(), &[1, 32]);
}

#[test]
fn encode_rejects_short_input() {
    let m = CpcModel::new(ModelConfig::default(), 0).unwrap();
    let err = m.encode(&Tensor::zeros(&[16, 9])).unwrap_err();
    assert!(matches!(err, CpcError::InputTooShort { min: 10, len: 9, .. }));
    assert!(err.to_string().contains("10"));
}

#[test]
fn zero_model_is_silent() {
    let m = CpcModel::zeros(ModelConfig::default()).unwrap();
    let x = normal_tensor(&[16, 40], &mut seeded(1));
    let seq = m.forward(&x).unwrap();
    assert!(seq.z.values().iter().all(|&v| v == 0.0));
    assert!(seq.c.values().iter().all(|&v| v == 0.0));
    let mut zb = CpcModel::new(ModelConfig::default(), 1).unwrap();
    let names = zb.params().names().to_vec();
    for (name, t) in names.iter().zip(zb.params_mut().tensors_mut()) {
        if name.ends_with("bias") {
            t.values_mut().fill(0.0);
        }
    }
    assert!(zb.encode(&Tensor::zeros(&[16, 40])).unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn contextualize_is_causal_and_matches_reference() {
    let m = CpcModel::new(ModelConfig::default(), 8).unwrap();
    let z = normal_tensor(&[12, 32], &mut seeded(2));
    let c = m.contextualize(&z).unwrap();
    assert_eq!(c.shape(), &[12, 32]);

    let mut h = vec![0.0; 32];
    for t in 0..12 {
        h = naive_gru(&h, z.row(t), &m);
        for j in 0..32 {
            assert!((c.at2(t, j) - h[j]).abs() < 1e-12);
        }
    }

    for cut in [0, 5, 10] {
        let mut z2 = z.clone();
        for v in &mut z2.values_mut()[(cut + 1) * 32..] {
            *v += 1.5;
        }
        let c2 = m.contextualize(&z2).unwrap();
        assert_eq!(c.values()[..(cut + 1) * 32], c2.values()[..(cut + 1) * 32]);
        assert_ne!(c.values()[(cut + 1) * 32..], c2.values()[(cut + 1) * 32..]);
    }
    let single = m.contextualize(&Tensor::from_rows(&[z.row(0).to_vec()]).unwrap()).unwrap();
    assert_eq!(single.values(), &c.values()[..32]);
}

#[test]
fn score_predict_duality() {
    let m = CpcModel::new(ModelConfig::default(), 11).unwrap();
    let mut rng = seeded(12);
    for k in 1..=8 {
        let z = normal_tensor(&[32], &mut rng);
        let c = normal_tensor(&[32], &mut rng);
        let s = m.score(z.values(), c.values(), k).unwrap();
        let p = m.predict(c.values(), k).unwrap();
        let w = m.head(k).unwrap();
        let mut direct = 0.0;
        for i in 0..32 {
            for j in 0..32 {
                direct += z.values()[i] * w.at2(i, j) * c.values()[j];
            }
        }
        let inner: f64 = z.values().iter().zip(&p).map(|(a, b)| a * b).sum();
        assert!((s - inner).abs() < 1e-12 && (s - direct).abs() < 1e-12);
        let twice: Vec<f64> = z.values().iter().map(|v| 2.0 * v).collect();
        assert!((m.score(&twice, c.values(), k).unwrap() - 2.0 * s).abs() < 1e-12);
    }
    assert_eq!(m.score(&[0.0; 32], &[1.0; 32], 3).unwrap(), 0.0);
    assert!(m.predict(&[0.0; 32], 2).unwrap().iter().all(|&v| v == 0.0));
    assert!(matches!(m.score(&[0.0; 32], &[0.0; 32], 9), Err(CpcError::HorizonOutOfRange { k: 9, max: 8 })));
    assert!(matches!(m.predict(&[0.0; 32], 0), Err(CpcError::HorizonOutOfRange { .. })));
}

#[test]
fn identity_head() {
    let mut m = CpcModel::new(ModelConfig::default(), 0).unwrap();
    *m.params_mut().get_mut("head1.weight").unwrap() = Tensor::identity(32);
    let z: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
    let norm: f64 = z.iter().map(|v| v * v).sum();
    assert!((m.score(&z, &z, 1).unwrap() - norm).abs() < 1e-12);
    assert_eq!(m.predict(&z, 1).unwrap(), z);
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = CpcModel::new(ModelConfig::default(), 5).unwrap();
    let b = CpcModel::new(ModelConfig::default(), 5).unwrap();
    let c = CpcModel::new(ModelConfig::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.params().fingerprint(), b.params().fingerprint());
    assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    assert_eq!(a.params().len(), 4 + 4 + 8);
}

#[test]
fn invalid_configs_list_fields() {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            strides: vec![2, 2],
            widths: vec![4],
            channels: vec![0, 8],
        },
        horizons: 0,
        ..ModelConfig::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("model.encoder"));
    assert!(msg.contains("model.horizons"));
    assert!(msg.contains("model.encoder.channels"));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut m = CpcModel::new(ModelConfig::default(), 21).unwrap();
    m.set_trained_steps(17);
    let text = Checkpoint::from_model(&m).to_json().unwrap();
    let back = Checkpoint::parse(&text).unwrap().into_model().unwrap();
    assert_eq!(back, m);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&m).save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().into_model().unwrap(), m);
}

#[test]
fn checkpoint_errors_name_location() {
    let e = Checkpoint::parse("{\"format\": \"cpc-lab-checkpoint\",\n \"version\": 1, \"seed\": }").unwrap_err();
    assert!(e.to_string().contains("line 2"), "{e}");
    let e = Checkpoint::parse("{\"format\": \"cpc-lab-checkpoint\", \"version\": 1}").unwrap_err();
    assert!(e.to_string().contains("architecture"), "{e}");

    let m = CpcModel::new(tiny_config(), 0).unwrap();
    let mut ck = Checkpoint::from_model(&m);
    ck.params[2].shape = vec![1, 2];
    ck.params[2].values = vec![0.0, 0.0];
    let e = ck.into_model().unwrap_err().to_string();
    assert!(e.contains("params[2].shape"), "{e}");

    let mut ck = Checkpoint::from_model(&m);
    ck.params[0].values.pop();
    assert!(ck.into_model().unwrap_err().to_string().contains("params[0]"));

    let critic = Critic::new(CriticConfig::default(), 1, 1, 0).unwrap();
    let e = Checkpoint::from_critic(&critic).into_model().unwrap_err();
    assert!(e.to_string().contains("architecture.kind"));
}

#[test]
fn critic_round_trip_and_shape() {
    let c = Critic::new(CriticConfig { hidden: 5, embed: 4 }, 2, 3, 9).unwrap();
    let s = c
        .score_matrix(&normal_tensor(&[6, 2], &mut seeded(1)), &normal_tensor(&[6, 3], &mut seeded(2)))
        .unwrap();
    assert_eq!(s.shape(), &[6, 6]);
    let back = Checkpoint::parse(&Checkpoint::from_critic(&c).to_json().unwrap())
        .unwrap()
        .into_critic()
        .unwrap();
    assert_eq!(back, c);
    assert!(c.score_matrix(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn frame_labels_use_last_sample() {
    let cfg = ModelConfig::default();
    let states: Vec<usize> = (0..30).collect();
    // 30 raw → 14 → 6 frames, ending at 9, 13, …, 29
    assert_eq!(frame_labels(&cfg, &states).unwrap(), vec![9, 13, 17, 21, 25, 29]);
    assert!(frame_labels(&cfg, &states[..5]).is_err());
}

fn loss_inputs(cfg: &ModelConfig, len: usize) -> Vec<Tensor> {
    let mut rng = seeded(77);
    (0..3).map(|_| normal_tensor(&[cfg.input_channels, len], &mut rng)).collect()
}

#[test]
fn silent_model_loss_is_log_n() {
    let cfg = ModelConfig::default();
    let m = CpcModel::zeros(cfg.clone()).unwrap();
    let xs = loss_inputs(&cfg, 64);
    let inputs: Vec<SequenceInput> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| SequenceInput {
            id: i,
            source: i % 2,
            observations: x,
        })
        .collect();
    let lc = CpcLossConfig {
        candidates: 16,
        strategy: NegativeSamplingStrategy::MixedSource,
        reduction: Reduction::Mean,
    };
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let out = cpc_loss(&mut tape, &vars, &inputs, &lc, &mut seeded(0)).unwrap();
    assert!((tape.value(out.loss).values()[0] - 16f64.ln()).abs() < 1e-12);
    // 14 frames per sequence, horizons 1..8: Σ(14 − k) = 76 per sequence
    assert_eq!(out.pairs, 3 * 76);
    assert!(out.horizons.iter().all(|h| h.accuracy == 0.0));
    assert!(out.mine.abs() < 1e-12);
}

#[test]
fn composed_loss_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let m = CpcModel::new(cfg.clone(), 4).unwrap();
    let xs = loss_inputs(&cfg, 12);
    let lc = CpcLossConfig {
        candidates: 3,
        strategy: NegativeSamplingStrategy::SameSource,
        reduction: Reduction::Mean,
    };
    let layout = m.clone();
    let report = check_gradients("cpc_loss", m.params().tensors(), None, |tape, vars| {
        let mut mv = layout.bind(tape, false);
        mv.conv = vec![(vars[0], vars[1])];
        mv.gru = GruVars {
            w_ih: vars[2],
            w_hh: vars[3],
            b_ih: vars[4],
            b_hh: vars[5],
        };
        mv.heads = vars[6..].to_vec();
        let inputs: Vec<SequenceInput> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| SequenceInput {
                id: i,
                source: i % 2,
                observations: x,
            })
            .collect();
        Ok(cpc_loss(tape, &mv, &inputs, &lc, &mut seeded(3))?.loss)
    })
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 50);
}

#[test]
fn loss_requires_enough_frames() {
    let cfg = ModelConfig::default();
    let m = CpcModel::new(cfg.clone(), 0).unwrap();
    let x = Tensor::zeros(&[16, 40]); // 8 frames, K = 8
    let inputs = [SequenceInput {
        id: 0,
        source: 0,
        observations: &x,
    }];
    let lc = CpcLossConfig {
        candidates: 4,
        strategy: NegativeSamplingStrategy::MixedSource,
        reduction: Reduction::Mean,
    };
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    assert!(cpc_loss(&mut tape, &vars, &inputs, &lc, &mut seeded(0)).is_err());
}
