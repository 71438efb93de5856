//! Finite-difference gradient suite over every differentiable op, both
//! losses and a whole tiny model. Shared by the `gradcheck` command and
//! the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{check_gradients, GradCheckOptions, Tape, Tensor, Var};
use crate::distill::kd_loss_on_tape;
use crate::error::Result;
use crate::frontend::FeatureMatrix;
use crate::model::{forward_lattice, DecoderConfig, EncoderConfig, Model, ModelConfig};
use crate::rnnt::{rnnt_loss_on_tape, Lattice};

type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    /// The op or loss under test; several cases share one.
    pub subject: &'static str,
    pub point: Vec<Tensor>,
    program: Program,
}

#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub subject: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Every differentiable tape op.
pub const TAPE_OPS: [&str; 27] = [
    "matmul",
    "matmul_nt",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "broadcast_add",
    "sigmoid",
    "tanh",
    "swish",
    "relu",
    "glu",
    "concat",
    "slice",
    "embedding",
    "layer_norm",
    "softmax",
    "causal_softmax",
    "log_softmax",
    "depthwise_conv1d_causal",
    "max_pool1d_time",
    "dropout",
    "sum",
    "mean",
    "external_scalar",
    "linear_no_bias",
];

/// `sum_i w_i y_i` with fixed, uneven weights, so that ops whose plain sum
/// is constant (softmax rows) still get a non-trivial gradient.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values at least 0.1 from zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values on a 0.1 grid, shuffled, so max-pool has no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches data")
}

fn case(name: String, subject: &'static str, point: Vec<Tensor>, program: Program) -> GradCase {
    GradCase {
        name,
        subject,
        point,
        program,
    }
}

fn unary(
    rng: &mut ChaCha8Rng,
    subject: &'static str,
    shapes: &[&[usize]],
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> Vec<GradCase> {
    shapes
        .iter()
        .map(|s| {
            let x = uniform(rng, s, -1.5, 1.5);
            case(
                format!("{subject} {s:?}"),
                subject,
                vec![x],
                Box::new(move |t, v| {
                    let y = op(t, v[0])?;
                    project(t, y)
                }),
            )
        })
        .collect()
}

fn binary(
    rng: &mut ChaCha8Rng,
    subject: &'static str,
    shapes: &[(&[usize], &[usize])],
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Vec<GradCase> {
    shapes
        .iter()
        .map(|(a, b)| {
            let x = uniform(rng, a, -1.5, 1.5);
            let y = uniform(rng, b, -1.5, 1.5);
            case(
                format!("{subject} {a:?} {b:?}"),
                subject,
                vec![x, y],
                Box::new(move |t, v| {
                    let z = op(t, v[0], v[1])?;
                    project(t, z)
                }),
            )
        })
        .collect()
}

/// Three or more shapes per tape op.
pub fn diffcore_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let same: &[(&[usize], &[usize])] = &[(&[1], &[1]), (&[2, 3], &[2, 3]), (&[3, 4], &[3, 4])];
    let mut cases = Vec::new();
    cases.extend(binary(r, "matmul", &[(&[1, 1], &[1, 1]), (&[2, 3], &[3, 4]), (&[4, 2], &[2, 5])], |t, a, b| {
        t.matmul(a, b)
    }));
    cases.extend(binary(r, "matmul_nt", &[(&[1, 1], &[1, 1]), (&[2, 3], &[4, 3]), (&[5, 2], &[3, 2])], |t, a, b| {
        t.matmul_nt(a, b)
    }));
    cases.extend(binary(r, "linear_no_bias", &[(&[1, 1], &[1, 1]), (&[3, 2], &[2, 4]), (&[2, 5], &[5, 3])], |t, a, b| {
        t.linear(a, b, None)
    }));
    for (m, k, n) in [(1, 1, 1), (3, 2, 4), (2, 5, 3)] {
        let point = vec![uniform(r, &[m, k], -1.0, 1.0), uniform(r, &[k, n], -1.0, 1.0), uniform(r, &[n], -1.0, 1.0)];
        cases.push(case(
            format!("linear [{m}, {k}] [{k}, {n}] [{n}]"),
            "linear",
            point,
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y)
            }),
        ));
    }
    cases.extend(binary(r, "add", same, |t, a, b| t.add(a, b)));
    cases.extend(binary(r, "sub", same, |t, a, b| t.sub(a, b)));
    cases.extend(binary(r, "mul", same, |t, a, b| t.mul(a, b)));
    cases.extend(binary(r, "broadcast_add", &[(&[1, 1], &[1, 1]), (&[2, 3], &[3, 3]), (&[4, 2], &[2, 2])], |t, a, b| {
        t.broadcast_add(a, b)
    }));
    let shapes: &[&[usize]] = &[&[1], &[2, 3], &[4, 5]];
    cases.extend(unary(r, "scale", shapes, |t, a| t.scale(a, -1.7)));
    cases.extend(unary(r, "sigmoid", shapes, |t, a| t.sigmoid(a)));
    cases.extend(unary(r, "tanh", shapes, |t, a| t.tanh(a)));
    cases.extend(unary(r, "swish", shapes, |t, a| t.swish(a)));
    cases.extend(unary(r, "softmax", &[&[1, 1], &[2, 3], &[3, 5]], |t, a| t.softmax(a)));
    cases.extend(unary(r, "log_softmax", &[&[1, 2], &[2, 3], &[3, 5]], |t, a| t.log_softmax(a)));
    cases.extend(unary(r, "causal_softmax", &[&[1, 1], &[3, 3], &[4, 4]], |t, a| t.causal_softmax(a)));
    cases.extend(unary(r, "glu", &[&[1, 2], &[3, 4], &[2, 6]], |t, a| t.glu(a)));
    cases.extend(unary(r, "sum", shapes, |t, a| {
        let s = t.sum(a)?;
        t.scale(s, 0.9)
    }));
    cases.extend(unary(r, "mean", shapes, |t, a| {
        let s = t.mean(a)?;
        t.scale(s, 1.1)
    }));
    cases.extend(unary(r, "dropout", &[&[4], &[3, 4], &[5, 5]], |t, a| t.dropout(a, 0.3, true)));
    for s in [&[2usize][..], &[3, 2], &[2, 4]] {
        let x = off_zero(r, s);
        cases.push(case(
            format!("relu {s:?}"),
            "relu",
            vec![x],
            Box::new(|t, v| {
                let y = t.relu(v[0])?;
                project(t, y)
            }),
        ));
    }
    for (a, b, axis) in [((1, 1), (1, 1), 0), ((2, 3), (1, 3), 0), ((2, 2), (2, 3), 1)] {
        let point = vec![uniform(r, &[a.0, a.1], -1.0, 1.0), uniform(r, &[b.0, b.1], -1.0, 1.0)];
        cases.push(case(
            format!("concat axis {axis} {a:?} {b:?}"),
            "concat",
            point,
            Box::new(move |t, v| {
                let y = t.concat(&[v[0], v[1], v[0]], axis)?;
                project(t, y)
            }),
        ));
    }
    for (shape, axis, start, len) in [([1usize, 1usize], 0usize, 0usize, 1usize), ([4, 3], 0, 1, 2), ([3, 5], 1, 2, 3)] {
        let x = uniform(r, &shape, -1.0, 1.0);
        cases.push(case(
            format!("slice {shape:?} axis {axis} {start}+{len}"),
            "slice",
            vec![x],
            Box::new(move |t, v| {
                let y = t.slice(v[0], axis, start, len)?;
                project(t, y)
            }),
        ));
    }
    for (rows, cols, idx) in [(2usize, 1usize, vec![1usize]), (3, 2, vec![0, 2, 2]), (5, 3, vec![4, 0, 1, 0])] {
        let table = uniform(r, &[rows, cols], -1.0, 1.0);
        cases.push(case(
            format!("embedding [{rows}, {cols}] {idx:?}"),
            "embedding",
            vec![table],
            Box::new(move |t, v| {
                let y = t.embedding(v[0], &idx)?;
                project(t, y)
            }),
        ));
    }
    for (m, n) in [(1, 2), (3, 4), (2, 7)] {
        let point = vec![uniform(r, &[m, n], -2.0, 2.0), uniform(r, &[n], 0.5, 1.5), uniform(r, &[n], -0.5, 0.5)];
        cases.push(case(
            format!("layer_norm [{m}, {n}]"),
            "layer_norm",
            point,
            Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y)
            }),
        ));
    }
    for (frames, ch, k) in [(1, 1, 1), (4, 3, 3), (6, 2, 5)] {
        let point = vec![
            uniform(r, &[frames, ch], -1.0, 1.0),
            uniform(r, &[ch, k], -1.0, 1.0),
            uniform(r, &[ch], -0.5, 0.5),
        ];
        cases.push(case(
            format!("depthwise_conv1d_causal T={frames} C={ch} K={k}"),
            "depthwise_conv1d_causal",
            point,
            Box::new(|t, v| {
                let y = t.depthwise_conv1d_causal(v[0], v[1], v[2])?;
                project(t, y)
            }),
        ));
    }
    for s in [[2usize, 1usize], [4, 3], [5, 2]] {
        let x = distinct(r, &s);
        cases.push(case(
            format!("max_pool1d_time {s:?}"),
            "max_pool1d_time",
            vec![x],
            Box::new(|t, v| {
                let y = t.max_pool1d_time(v[0])?;
                project(t, y)
            }),
        ));
    }
    for s in [[1usize], [3], [6]] {
        let x = uniform(r, &s, -1.0, 1.0);
        cases.push(case(
            format!("external_scalar {s:?}"),
            "external_scalar",
            vec![x],
            // sum of cubes, with its gradient supplied from outside the tape
            Box::new(|t, v| {
                let x = t.value(v[0]).data().to_vec();
                let value = x.iter().map(|a| a * a * a).sum();
                let grad = x.iter().map(|a| 3.0 * a * a).collect();
                t.external_scalar(v[0], value, grad)
            }),
        ));
    }
    cases
}

fn lattice_logits(rng: &mut ChaCha8Rng, frames: usize, labels: usize, vocab: usize) -> Tensor {
    uniform(rng, &[frames * (labels + 1), vocab + 1], -2.0, 2.0)
}

/// Transducer loss, distillation loss and their weighted sum, each on
/// several lattice sizes, differentiated through a log-softmax.
pub fn loss_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let dims = [(1usize, 1usize, 1usize), (2, 1, 2), (3, 2, 3), (4, 3, 3)];
    let mut cases = Vec::new();
    for (frames, u, vocab) in dims {
        let labels: Vec<usize> = (0..u).map(|_| r.random_range(1..=vocab)).collect();
        let point = vec![lattice_logits(r, frames, u, vocab)];
        cases.push(case(
            format!("rnnt_loss T={frames} U={u} V={vocab}"),
            "rnnt_loss",
            point,
            Box::new(move |t, v| {
                let lp = t.log_softmax(v[0])?;
                Ok(rnnt_loss_on_tape(t, lp, frames, &labels)?.0)
            }),
        ));
    }
    for (i, (frames, u, vocab)) in dims.into_iter().enumerate() {
        let teacher = Lattice::from_logits(frames, u, vocab, lattice_logits(r, frames, u, vocab).data()).expect("valid dims");
        let tau = if i % 2 == 0 { 1.0 } else { 2.0 };
        let point = vec![lattice_logits(r, frames, u, vocab)];
        cases.push(case(
            format!("kd_loss T={frames} U={u} V={vocab} tau={tau}"),
            "kd_loss",
            point,
            Box::new(move |t, v| {
                let scaled = t.scale(v[0], 1.0 / tau)?;
                let lp = t.log_softmax(scaled)?;
                Ok(kd_loss_on_tape(t, lp, &teacher)?.0)
            }),
        ));
    }
    for (frames, u, vocab) in [(2usize, 1usize, 2usize), (3, 2, 3), (4, 2, 3)] {
        let labels: Vec<usize> = (0..u).map(|_| r.random_range(1..=vocab)).collect();
        let teacher = Lattice::from_logits(frames, u, vocab, lattice_logits(r, frames, u, vocab).data()).expect("valid dims");
        let point = vec![lattice_logits(r, frames, u, vocab)];
        cases.push(case(
            format!("total_loss T={frames} U={u} V={vocab}"),
            "total_loss",
            point,
            Box::new(move |t, v| {
                let lp = t.log_softmax(v[0])?;
                let (a, _) = rnnt_loss_on_tape(t, lp, frames, &labels)?;
                let (b, _) = kd_loss_on_tape(t, lp, &teacher)?;
                let a = t.scale(a, 0.75)?;
                let b = t.scale(b, 0.25)?;
                t.add(a, b)
            }),
        ));
    }
    cases
}

/// A conformer transducer small enough for entry-by-entry differencing.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 3,
            num_layers: 2,
            model_dim: 4,
            attention_heads: 2,
            ff_expansion: 2,
            conv_kernel: 3,
            pooling_layers: 1,
            dropout: 0.1,
            max_positions: 8,
        },
        decoder: DecoderConfig {
            num_layers: 2,
            hidden_dim: 3,
            dropout: 0.1,
        },
        joint_dim: 3,
        vocab_size: 3,
        blank_id: 0,
    }
}

/// Transducer loss (and the full distillation objective) of a tiny model,
/// differentiated with respect to every parameter, in training mode with
/// dropout and in eval mode.
pub fn model_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let frames = 6;
    let features = FeatureMatrix::new(
        frames,
        cfg.encoder.input_dim,
        (0..frames * cfg.encoder.input_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )?;
    let labels = vec![2, 1];
    let mut cases = Vec::new();
    for (train, kd) in [(false, false), (true, false), (true, true)] {
        let model = Model::new(cfg.clone(), seed.wrapping_add(u64::from(train) + 2 * u64::from(kd)))?;
        let store = model.params().clone();
        let point = store.tensors().to_vec();
        let teacher = if kd {
            let t_frames = frames / 2;
            Some(Lattice::from_logits(
                t_frames,
                labels.len(),
                cfg.vocab_size,
                lattice_logits(&mut rng, t_frames, labels.len(), cfg.vocab_size).data(),
            )?)
        } else {
            None
        };
        let (cfg, features, labels) = (cfg.clone(), features.clone(), labels.clone());
        cases.push(case(
            format!("model {} {}", if train { "train" } else { "eval" }, if kd { "distill" } else { "transducer" }),
            "model",
            point,
            Box::new(move |t, v| {
                let p = store.bind_vars(v.to_vec())?;
                let (lat, frames) = forward_lattice(t, &p, &cfg, &features, &labels, 1.0, train)?;
                let (loss, _) = rnnt_loss_on_tape(t, lat, frames, &labels)?;
                match &teacher {
                    None => Ok(loss),
                    Some(target) => {
                        let (kd, _) = kd_loss_on_tape(t, lat, target)?;
                        let a = t.scale(loss, 0.98)?;
                        let b = t.scale(kd, 0.02)?;
                        t.add(a, b)
                    }
                }
            }),
        ));
    }
    Ok(cases)
}

pub fn run_case(case: &GradCase, opts: GradCheckOptions) -> Result<CaseOutcome> {
    let report = check_gradients(&case.program, &case.point, opts)?;
    Ok(CaseOutcome {
        name: case.name.clone(),
        subject: case.subject,
        max_rel_error: report.max_rel_error(),
        passed: report.passed(),
    })
}

/// Every case of every suite.
pub fn run_all(seed: u64, opts: GradCheckOptions) -> Result<Vec<CaseOutcome>> {
    let mut cases = diffcore_cases(seed);
    cases.extend(loss_cases(seed));
    cases.extend(model_cases(seed)?);
    cases.iter().map(|c| run_case(c, opts)).collect()
}
