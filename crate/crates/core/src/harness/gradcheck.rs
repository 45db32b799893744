use crate::autodiff::gradcheck::{check_gradients, GradCheck};
use crate::autodiff::{GruVars, OpKind, Reduction, Tape, Tensor, Var};
use crate::contrastive::{infonce_loss_on_tape, NegativeSamplingStrategy};
use crate::error::Result;
use crate::model::{cpc_loss, CpcLossConfig, CpcModel, Critic, CriticConfig, EncoderConfig, ModelConfig, SequenceInput};
use crate::rng::{normal_tensor, seeded, Rng};

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Normal values pushed away from zero, so ReLU kinks stay out of reach of
/// the finite-difference step.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    normal_tensor(shape, rng).map(|v| v + 0.1 * v.signum())
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = normal_tensor(tape.shape(out), &mut seeded(seed));
    let rv = tape.constant(r);
    let m = tape.mul(out, rv)?;
    Ok(tape.sum(m))
}

fn primitive_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut t = |shape: &[usize]| off_zero(shape, rng);
    vec![
        ("matmul", vec![t(&[3, 4]), t(&[4, 2])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.matmul(v[0], v[1])?;
            project(tp, o, 1)
        }) as Build),
        ("add", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.add(v[0], v[1])?;
            project(tp, o, 2)
        })),
        ("sub", vec![t(&[2, 3]), t(&[2, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.sub(v[0], v[1])?;
            project(tp, o, 3)
        })),
        ("mul", vec![t(&[5]), t(&[5])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.mul(v[0], v[1])?;
            Ok(tp.sum(o))
        })),
        ("scale", vec![t(&[4])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.scale(v[0], -1.7);
            project(tp, o, 4)
        })),
        ("relu", vec![t(&[3, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.relu(v[0]);
            project(tp, o, 5)
        })),
        ("tanh", vec![t(&[6])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.tanh(v[0]);
            project(tp, o, 6)
        })),
        ("sigmoid", vec![t(&[6])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.sigmoid(v[0]);
            project(tp, o, 7)
        })),
        ("transpose", vec![t(&[2, 5])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.transpose(v[0])?;
            project(tp, o, 8)
        })),
        ("add_row_bias", vec![t(&[4, 3]), t(&[3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.add_row_bias(v[0], v[1])?;
            project(tp, o, 9)
        })),
        ("add_channel_bias", vec![t(&[3, 5]), t(&[3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.add_channel_bias(v[0], v[1])?;
            project(tp, o, 10)
        })),
        ("conv1d", vec![t(&[2, 11]), t(&[3, 2, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.conv1d(v[0], v[1], 2)?;
            project(tp, o, 11)
        })),
        (
            "gru_step",
            vec![t(&[3]), t(&[2]), t(&[9, 2]), t(&[9, 3]), t(&[9]), t(&[9])],
            Box::new(|tp: &mut Tape, v: &[Var]| {
                let p = GruVars {
                    w_ih: v[2],
                    w_hh: v[3],
                    b_ih: v[4],
                    b_hh: v[5],
                };
                let h = tp.gru_step(v[0], v[1], p)?;
                let h = tp.gru_step(h, v[1], p)?;
                project(tp, h, 12)
            }),
        ),
        ("row", vec![t(&[3, 4])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.row(v[0], 1)?;
            project(tp, o, 13)
        })),
        ("stack_rows", vec![t(&[3]), t(&[3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.stack_rows(&[v[0], v[1], v[0]])?;
            project(tp, o, 14)
        })),
        ("concat_rows", vec![t(&[2, 3]), t(&[1, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.concat_rows(&[v[0], v[1]])?;
            project(tp, o, 15)
        })),
        ("logsumexp", vec![t(&[7])], Box::new(|tp: &mut Tape, v: &[Var]| tp.logsumexp(v[0]))),
        ("pick", vec![t(&[4])], Box::new(|tp: &mut Tape, v: &[Var]| tp.pick(v[0], 2))),
        ("sum", vec![t(&[2, 2])], Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.sum(v[0])))),
        ("mean", vec![t(&[2, 3])], Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.mean(v[0])))),
        ("sum_squares", vec![t(&[5])], Box::new(|tp: &mut Tape, v: &[Var]| Ok(tp.sum_squares(v[0])))),
        ("gather_rows", vec![t(&[4, 2])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.gather_rows(v[0], vec![3, 0, 3, 1])?;
            project(tp, o, 16)
        })),
        ("grouped_dot", vec![t(&[6, 3]), t(&[2, 3])], Box::new(|tp: &mut Tape, v: &[Var]| {
            let o = tp.grouped_dot(v[0], v[1], 3)?;
            project(tp, o, 17)
        })),
        ("softmax_xent_mean", vec![t(&[3, 4])], Box::new(|tp: &mut Tape, v: &[Var]| {
            tp.softmax_xent(v[0], &[0, 3, 1], Reduction::Mean)
        })),
        ("softmax_xent_sum", vec![t(&[3, 4])], Box::new(|tp: &mut Tape, v: &[Var]| {
            tp.softmax_xent(v[0], &[2, 2, 0], Reduction::Sum)
        })),
        ("infonce", vec![t(&[8])], Box::new(|tp: &mut Tape, v: &[Var]| infonce_loss_on_tape(tp, v[0], 0))),
    ]
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_channels: 2,
        encoder: EncoderConfig {
            strides: vec![2, 1],
            widths: vec![3, 2],
            channels: vec![3, 3],
        },
        context_dim: 3,
        horizons: 2,
    }
}

fn composed_case(seed: u64, fault: Option<OpKind>) -> Result<GradCheck> {
    let cfg = tiny_model();
    let model = CpcModel::new(cfg.clone(), seed)?;
    let mut rng = seeded(seed ^ 0x5eed);
    let xs: Vec<Tensor> = (0..4).map(|_| normal_tensor(&[2, 14], &mut rng)).collect();
    let lc = CpcLossConfig {
        candidates: 4,
        strategy: NegativeSamplingStrategy::SameSourceExcludingCurrent,
        reduction: Reduction::Mean,
    };
    let layers = cfg.encoder.strides.len();
    check_gradients("cpc_infonce_loss", model.params().tensors(), fault, |tape, vars| {
        let mut mv = model.bind(tape, false);
        mv.conv = (0..layers).map(|i| (vars[2 * i], vars[2 * i + 1])).collect();
        let g = 2 * layers;
        mv.gru = GruVars {
            w_ih: vars[g],
            w_hh: vars[g + 1],
            b_ih: vars[g + 2],
            b_hh: vars[g + 3],
        };
        mv.heads = vars[g + 4..].to_vec();
        let inputs: Vec<SequenceInput> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| SequenceInput {
                id: i,
                source: i / 2,
                observations: x,
            })
            .collect();
        Ok(cpc_loss(tape, &mv, &inputs, &lc, &mut seeded(seed))?.loss)
    })
}

fn critic_case(seed: u64, fault: Option<OpKind>) -> Result<GradCheck> {
    let critic = Critic::new(CriticConfig { hidden: 4, embed: 3 }, 2, 2, seed)?;
    let mut rng = seeded(seed ^ 0xc1);
    let x = normal_tensor(&[5, 2], &mut rng);
    let c = normal_tensor(&[5, 2], &mut rng);
    check_gradients("critic_infonce_loss", critic.params().tensors(), fault, |tape, vars| {
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let s = critic.scores_on_tape(tape, vars, xv, cv)?;
        tape.softmax_xent(s, &[0, 1, 2, 3, 4], Reduction::Mean)
    })
}

/// Finite-difference check of every primitive and both composed losses.
/// `fault` corrupts one backward rule, for testing the checker itself.
pub fn gradcheck_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheck>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    for (name, inputs, build) in primitive_cases(&mut rng) {
        out.push(check_gradients(name, &inputs, fault, build)?);
    }
    out.push(composed_case(seed, fault)?);
    out.push(critic_case(seed, fault)?);
    out.push(check_gradients("empty", &[], fault, |tape, _| Ok(tape.constant(Tensor::scalar(0.0))))?);
    Ok(out)
}
