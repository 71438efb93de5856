//! Optimiser, learning-rate schedule and the training loop.

mod optim;
mod schedule;

#[cfg(test)]
mod tests;

pub use optim::{optimizer_step, AdamConfig, StepStats, TrainState};
pub use schedule::{learning_rate, ScheduleConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FlatConfig;
use crate::diffcore::{Tape, Var};
use crate::distill::{kd_loss, kd_loss_on_tape, DistillationConfig, LossBreakdown};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeOptions};
use crate::frontend::{apply_masks, sample_masks, AugmentPolicy, FeatureMatrix, Utterance};
use crate::model::{encode, joint_lattice, load_checkpoint, predict, Model, ModelConfig};
use crate::rnnt::{lattice_from_var, rnnt_loss, rnnt_loss_on_tape, Lattice};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Scratch,
    Distill,
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scratch" => Ok(TrainMode::Scratch),
            "distill" => Ok(TrainMode::Distill),
            _ => Err(format!("expected `scratch` or `distill`, got {s:?}")),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Scratch => "scratch",
            TrainMode::Distill => "distill",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub teacher_checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub distill: DistillationConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Dev utterances decoded after each epoch (all when `None`).
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    /// Toy-scale settings: warmup 500, decay 2000.
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Scratch,
            teacher_checkpoint: None,
            model: ModelConfig::default(),
            distill: DistillationConfig::default(),
            schedule: ScheduleConfig {
                base_lr: 1e-4,
                warmup: 500,
                decay_steps: 2000,
            },
            optimizer: AdamConfig::default(),
            batch_size: 8,
            epochs: 30,
            seed: 0,
            augment: AugmentPolicy::default(),
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.mode == TrainMode::Distill && self.teacher_checkpoint.is_none() {
            return Err(Error::Config("train.mode = distill needs train.teacher_checkpoint".into()));
        }
        Ok(())
    }

    /// Reads `train.*`, `model.*`, `distill.*`, `schedule.*`, `optim.*`
    /// and `augment.*` keys on top of `base`, consuming them.
    pub fn from_flat(cfg: &mut FlatConfig, base: &TrainConfig) -> Result<Self> {
        let mut model_keys = cfg.take_section("model");
        let model = ModelConfig::from_flat(&mut model_keys, &base.model)?;
        model_keys.finish("model")?;
        let out = TrainConfig {
            mode: cfg.take_or("train.mode", base.mode)?,
            teacher_checkpoint: cfg
                .take::<PathBuf>("train.teacher_checkpoint")?
                .or_else(|| base.teacher_checkpoint.clone()),
            model,
            distill: DistillationConfig {
                alpha: cfg.take_or("distill.alpha", base.distill.alpha)?,
                temperature: cfg.take_or("distill.temperature", base.distill.temperature)?,
            },
            schedule: ScheduleConfig {
                base_lr: cfg.take_or("schedule.base_lr", base.schedule.base_lr)?,
                warmup: cfg.take_or("schedule.warmup", base.schedule.warmup)?,
                decay_steps: cfg.take_or("schedule.decay_steps", base.schedule.decay_steps)?,
            },
            optimizer: AdamConfig {
                beta1: cfg.take_or("optim.beta1", base.optimizer.beta1)?,
                beta2: cfg.take_or("optim.beta2", base.optimizer.beta2)?,
                eps: cfg.take_or("optim.eps", base.optimizer.eps)?,
                clip_norm: cfg.take_or("optim.clip_norm", base.optimizer.clip_norm)?,
            },
            batch_size: cfg.take_or("train.batch_size", base.batch_size)?,
            epochs: cfg.take_or("train.epochs", base.epochs)?,
            seed: cfg.take_or("train.seed", base.seed)?,
            augment: AugmentPolicy {
                freq_masks: cfg.take_or("augment.freq_masks", base.augment.freq_masks)?,
                freq_mask_width_max: cfg.take_or("augment.freq_mask_width_max", base.augment.freq_mask_width_max)?,
                time_masks: cfg.take_or("augment.time_masks", base.augment.time_masks)?,
                time_mask_width_max: cfg.take_or("augment.time_mask_width_max", base.augment.time_mask_width_max)?,
            },
            dev_limit: cfg.take("train.dev_limit")?.or(base.dev_limit),
        };
        Ok(out)
    }

    /// Everything needed to reproduce the run, as checkpoint metadata.
    pub fn provenance(&self, state: &TrainState) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("train.step", state.step.to_string());
        put("train.mode", self.mode.to_string());
        put("train.seed", self.seed.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.epochs", self.epochs.to_string());
        put("schedule.base_lr", format!("{:?}", self.schedule.base_lr));
        put("schedule.warmup", self.schedule.warmup.to_string());
        put("schedule.decay_steps", self.schedule.decay_steps.to_string());
        put("optim.name", "adam".into());
        put("optim.beta1", format!("{:?}", self.optimizer.beta1));
        put("optim.beta2", format!("{:?}", self.optimizer.beta2));
        put("optim.eps", format!("{:?}", self.optimizer.eps));
        put("optim.clip_norm", format!("{:?}", self.optimizer.clip_norm));
        put("distill.alpha", format!("{:?}", self.distill.alpha));
        put("distill.temperature", format!("{:?}", self.distill.temperature));
        m
    }
}

/// SplitMix64 finaliser folded over `parts`; keys every random stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_transducer_loss: f64,
    pub train_kd_loss: f64,
    /// Fractions; NaN when there is no dev set.
    pub dev_wer: f64,
    pub dev_ser: f64,
}

pub const METRIC_LOG_HEADER: &str = "epoch\tstep\tlr\ttrain_loss\ttrain_transducer_loss\ttrain_kd_loss\tdev_wer\tdev_ser";

impl EpochMetrics {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.2}\t{:.2}",
            self.epoch,
            self.step,
            self.lr,
            self.train_loss,
            self.train_transducer_loss,
            self.train_kd_loss,
            100.0 * self.dev_wer,
            100.0 * self.dev_ser
        )
    }
}

pub fn render_metric_log(log: &[EpochMetrics]) -> String {
    let mut out = format!("{METRIC_LOG_HEADER}\n");
    for m in log {
        let _ = writeln!(out, "{}", m.tsv());
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last good ones if training diverged.
    pub model: Model,
    pub state: TrainState,
    pub log: Vec<EpochMetrics>,
    /// Set when a non-finite loss or gradient stopped the run.
    pub diverged: Option<String>,
    /// Epoch-0 training loss, measured before the first update.
    pub initial_loss: f64,
}

/// Weights of the two loss terms for a mode.
fn term_weights(cfg: &TrainConfig) -> (f64, f64) {
    match cfg.mode {
        TrainMode::Scratch => (1.0, 0.0),
        TrainMode::Distill => (1.0 - cfg.distill.alpha, cfg.distill.alpha),
    }
}

/// The teacher's lattice for one (augmented) utterance, in eval mode.
pub fn teacher_lattice(teacher: &Model, features: &FeatureMatrix, labels: &[usize], temperature: f64) -> Result<Lattice> {
    let mut tape = Tape::new();
    let p = teacher.params().bind(&mut tape, false);
    let enc = encode(&mut tape, &p, &teacher.config().encoder, features, false)?;
    let pred = predict(&mut tape, &p, teacher.config(), labels, false)?;
    let lat = joint_lattice(&mut tape, &p, enc, pred, temperature)?;
    let frames = tape.shape(enc)[0];
    lattice_from_var(&tape, lat, frames, labels.len())
}

/// Loss and parameter gradients of one utterance.
pub struct UtteranceGrad {
    pub losses: LossBreakdown,
    pub grads: Vec<Vec<f64>>,
}

/// Forward and backward for one utterance. `tape_seed` keys dropout.
pub fn utterance_gradients(
    cfg: &TrainConfig,
    student: &Model,
    teacher: Option<&Model>,
    features: &FeatureMatrix,
    labels: &[usize],
    tape_seed: u64,
) -> Result<UtteranceGrad> {
    let target = match teacher {
        Some(t) => Some(teacher_lattice(t, features, labels, cfg.distill.temperature)?),
        None => None,
    };
    gradients_against(cfg, student, target.as_ref(), features, labels, tape_seed)
}

/// [`utterance_gradients`] with the teacher lattice already computed.
fn gradients_against(
    cfg: &TrainConfig,
    student: &Model,
    target: Option<&Lattice>,
    features: &FeatureMatrix,
    labels: &[usize],
    tape_seed: u64,
) -> Result<UtteranceGrad> {
    let (w_rnnt, w_kd) = term_weights(cfg);
    let tau = cfg.distill.temperature;
    let mut tape = Tape::with_seed(tape_seed);
    let p = student.params().bind(&mut tape, true);
    let enc = encode(&mut tape, &p, &student.config().encoder, features, true)?;
    let frames = tape.shape(enc)[0];
    let pred = predict(&mut tape, &p, student.config(), labels, true)?;
    let lat = joint_lattice(&mut tape, &p, enc, pred, 1.0)?;

    let mut terms: Vec<Var> = Vec::new();
    let transducer_loss = if w_rnnt > 0.0 {
        let (v, value) = rnnt_loss_on_tape(&mut tape, lat, frames, labels)?;
        terms.push(if w_rnnt == 1.0 { v } else { tape.scale(v, w_rnnt)? });
        value
    } else {
        rnnt_loss(&lattice_from_var(&tape, lat, frames, labels.len())?, labels)?.loss
    };

    let kd_value = match target {
        None => 0.0,
        Some(target) => {
            let student_lat = if tau == 1.0 { lat } else { joint_lattice(&mut tape, &p, enc, pred, tau)? };
            if w_kd > 0.0 {
                let (v, value) = kd_loss_on_tape(&mut tape, student_lat, target)?;
                terms.push(if w_kd == 1.0 { v } else { tape.scale(v, w_kd)? });
                value
            } else {
                kd_loss(target, &lattice_from_var(&tape, student_lat, frames, labels.len())?)?.loss
            }
        }
    };

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let grads = tape.backward(total)?;
    let grads = p
        .vars()
        .iter()
        .zip(student.params().tensors())
        .map(|(&v, t)| grads.wrt_slice(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    Ok(UtteranceGrad {
        losses: LossBreakdown {
            transducer_loss,
            kd_loss: kd_value,
            total: tape.value(total).item(),
        },
        grads,
    })
}

fn augmented(cfg: &TrainConfig, features: &FeatureMatrix, epoch: usize, index: usize) -> Result<FeatureMatrix> {
    if cfg.augment.is_identity() {
        return Ok(features.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64, index as u64]));
    let masks = sample_masks(&cfg.augment, features.frames(), features.dims(), &mut rng);
    apply_masks(features, &masks)
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Diverged { .. })
}

/// Mean training loss over `data` without updating anything, in eval mode.
pub fn mean_loss(cfg: &TrainConfig, student: &Model, teacher: Option<&Model>, data: &[Utterance]) -> Result<LossBreakdown> {
    let (w_rnnt, w_kd) = term_weights(cfg);
    let mut acc = LossBreakdown {
        transducer_loss: 0.0,
        kd_loss: 0.0,
        total: 0.0,
    };
    for u in data {
        let mut tape = Tape::new();
        let p = student.params().bind(&mut tape, false);
        let enc = encode(&mut tape, &p, &student.config().encoder, &u.features, false)?;
        let frames = tape.shape(enc)[0];
        let pred = predict(&mut tape, &p, student.config(), &u.labels, false)?;
        let lat = joint_lattice(&mut tape, &p, enc, pred, 1.0)?;
        let lt = rnnt_loss(&lattice_from_var(&tape, lat, frames, u.labels.len())?, &u.labels)?.loss;
        let lk = match teacher {
            Some(t) => {
                let tau = cfg.distill.temperature;
                let student = if tau == 1.0 { lat } else { joint_lattice(&mut tape, &p, enc, pred, tau)? };
                let student = lattice_from_var(&tape, student, frames, u.labels.len())?;
                kd_loss(&teacher_lattice(t, &u.features, &u.labels, tau)?, &student)?.loss
            }
            None => 0.0,
        };
        acc.transducer_loss += lt;
        acc.kd_loss += lk;
        acc.total += w_rnnt * lt + w_kd * lk;
    }
    let n = data.len().max(1) as f64;
    Ok(LossBreakdown {
        transducer_loss: acc.transducer_loss / n,
        kd_loss: acc.kd_loss / n,
        total: acc.total / n,
    })
}

/// Trains a fresh student (initialised from `seed`) on `train`, scoring
/// `dev` with greedy decoding after every epoch.
pub fn train_model(
    cfg: &TrainConfig,
    teacher: Option<&Model>,
    train: &[Utterance],
    dev: &[Utterance],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if cfg.mode == TrainMode::Distill && teacher.is_none() {
        return Err(Error::Config("distill mode needs a teacher".into()));
    }
    let teacher = if cfg.mode == TrainMode::Distill { teacher } else { None };
    if let Some(t) = teacher {
        if t.config().vocab_size != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "teacher vocab_size {} differs from student vocab_size {}",
                t.config().vocab_size,
                cfg.model.vocab_size
            )));
        }
    }
    // Without augmentation the teacher sees the same input every epoch.
    let cached: Option<Vec<Lattice>> = match teacher {
        Some(t) if cfg.augment.is_identity() => Some(
            train
                .iter()
                .map(|u| teacher_lattice(t, &u.features, &u.labels, cfg.distill.temperature))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let mut state = TrainState::new(model.params());
    let initial_loss = mean_loss(cfg, &model, teacher, train)?.total;
    let dev_set = &dev[..cfg.dev_limit.unwrap_or(dev.len()).min(dev.len())];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_ORDER, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut failed = None;
            for &i in batch {
                let utt = &train[i];
                let step = (|| {
                    let feats = augmented(cfg, &utt.features, epoch, i)?;
                    let seed = derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, i as u64]);
                    match (&cached, teacher) {
                        (Some(c), _) => gradients_against(cfg, &model, Some(&c[i]), &feats, &utt.labels, seed),
                        (None, t) => utterance_gradients(cfg, &model, t, &feats, &utt.labels, seed),
                    }
                })();
                match step {
                    Ok(g) if g.losses.total.is_finite() => {
                        sums.0 += g.losses.total;
                        sums.1 += g.losses.transducer_loss;
                        sums.2 += g.losses.kd_loss;
                        for (a, g) in acc.iter_mut().zip(&g.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                    Ok(_) => {
                        failed = Some(format!("non-finite loss on `{}`", utt.id));
                        break;
                    }
                    Err(e) if is_divergence(&e) => {
                        failed = Some(format!("`{}`: {e}", utt.id));
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            let outcome = match failed {
                Some(detail) => Err(detail),
                None => {
                    let inv = 1.0 / batch.len() as f64;
                    for a in &mut acc {
                        for x in a.iter_mut() {
                            *x *= inv;
                        }
                    }
                    let lr = learning_rate(state.step, &cfg.schedule);
                    optimizer_step(model.params_mut(), &acc, &mut state, lr, &cfg.optimizer)
                        .map(|_| ())
                        .map_err(|e| e.to_string())
                }
            };
            if let Err(detail) = outcome {
                return Ok(TrainOutcome {
                    model,
                    state: state.clone(),
                    log,
                    diverged: Some(format!("step {}: {detail}", state.step)),
                    initial_loss,
                });
            }
        }
        let n = train.len() as f64;
        let (dev_wer, dev_ser) = if dev_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let r = evaluate(&model, dev_set, &DecodeOptions::greedy())?;
            (r.wer(), r.ser())
        };
        log.push(EpochMetrics {
            epoch,
            step: state.step,
            lr: learning_rate(state.step, &cfg.schedule),
            train_loss: sums.0 / n,
            train_transducer_loss: sums.1 / n,
            train_kd_loss: sums.2 / n,
            dev_wer,
            dev_ser,
        });
    }
    Ok(TrainOutcome {
        model,
        state,
        log,
        diverged: None,
        initial_loss,
    })
}

/// [`train_model`] with the teacher loaded from `cfg.teacher_checkpoint`.
pub fn run_training(cfg: &TrainConfig, train: &[Utterance], dev: &[Utterance]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let teacher = match (&cfg.mode, &cfg.teacher_checkpoint) {
        (TrainMode::Distill, Some(path)) => Some(load_checkpoint(path)?.model),
        _ => None,
    };
    train_model(cfg, teacher.as_ref(), train, dev)
}

/// Writes `model.ctkd` and `metrics.tsv` under `dir`.
pub fn write_outcome(dir: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ck = dir.join("model.ctkd");
    let mut meta = cfg.provenance(&outcome.state);
    if outcome.diverged.is_some() {
        meta.insert("train.status".into(), "diverged".into());
    }
    crate::model::save_checkpoint(&ck, &outcome.model, &meta)?;
    let log = dir.join("metrics.tsv");
    std::fs::write(&log, render_metric_log(&outcome.log)).map_err(|e| Error::io(&log, e))?;
    Ok(ck)
}
