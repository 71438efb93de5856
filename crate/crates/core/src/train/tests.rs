use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::diffcore::Tensor;
use crate::frontend::{generate_toy_corpus, ToyCorpusSpec};
use crate::model::{encode_checkpoint, DecoderConfig, EncoderConfig, ParamStore};

fn default_schedule() -> ScheduleConfig {
    ScheduleConfig::default()
}

#[test]
fn schedule_reference_points() {
    let c = default_schedule();
    assert!((learning_rate(0, &c) - 1.0e-7).abs() < 1e-20);
    assert!((learning_rate(5000, &c) - 1.26e-5).abs() < 1e-18);
    assert_eq!(learning_rate(10_000, &c), 1.0e-4);
    let late = learning_rate(650_000, &c);
    assert!((late - 5e-4 * 0.9f64.powi(16)).abs() < 1e-18);
    assert!((late - 9.2651e-5).abs() < 1e-9);
}

#[test]
fn schedule_step_at_warmup_is_exactly_the_offset() {
    let c = default_schedule();
    // the warmup branch evaluated at lambda = 1
    let left_limit = c.base_lr * 1.0f64.powi(3) + 1e-7;
    let right = learning_rate(c.warmup, &c);
    assert!((left_limit - right - 1e-7).abs() < 1e-20);
    assert!(learning_rate(c.warmup - 1, &c) < left_limit);
    // gamma is not floored: the decay moves within a decay period
    let a = learning_rate(c.warmup + 40_000 * 15 + 1, &c);
    let b = learning_rate(c.warmup + 40_000 * 15 + 20_000, &c);
    assert!(b < a);
}

proptest! {
    #[test]
    fn schedule_is_bounded(step in 0u64..5_000_000, lr in 1e-6f64..1.0, warmup in 1u64..50_000, decay in 1u64..100_000) {
        let c = ScheduleConfig { base_lr: lr, warmup, decay_steps: decay };
        let v = learning_rate(step, &c);
        prop_assert!(v >= 0.0);
        prop_assert!(v <= lr + 1e-7);
        if step + 1 < warmup {
            prop_assert!(learning_rate(step + 1, &c) >= v);
        }
        if step >= warmup {
            prop_assert!(learning_rate(step + 1, &c) <= v);
        }
    }
}

fn store(values: &[&[f64]]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        s.insert(format!("p{i}"), Tensor::vector(v.to_vec())).unwrap();
    }
    s
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = store(&[&[1.0, -2.0], &[0.5]]);
    let before = p.clone();
    let mut st = TrainState::new(&p);
    for _ in 0..3 {
        optimizer_step(&mut p, &[vec![0.0; 2], vec![0.0]], &mut st, 0.1, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 3);
}

#[test]
fn scalar_adam_matches_hand_recurrence() {
    let cfg = AdamConfig::default();
    let (g, lr) = (0.3, 0.01);
    let mut p = store(&[&[2.0]]);
    let mut st = TrainState::new(&p);
    let (mut x, mut m, mut v, mut b1, mut b2) = (2.0f64, 0.0f64, 0.0f64, 1.0f64, 1.0f64);
    for _ in 0..25 {
        optimizer_step(&mut p, &[vec![g]], &mut st, lr, &cfg).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.98 * v + 0.02 * g * g;
        b1 *= 0.9;
        b2 *= 0.98;
        x -= lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + 1e-9);
        let got = p.tensors()[0].data()[0];
        assert!((got - x).abs() <= 1e-12 * x.abs(), "{got} vs {x}");
    }
}

#[test]
fn clipping_rescales_to_the_norm() {
    let mut p = store(&[&[0.0, 0.0]]);
    let mut st = TrainState::new(&p);
    let stats = optimizer_step(&mut p, &[vec![30.0, 40.0]], &mut st, 1e-3, &AdamConfig::default()).unwrap();
    assert_eq!(stats.grad_norm, 50.0);
    assert!((stats.clip_scale - 0.1).abs() < 1e-15);
    // first moment holds (1 - beta1) times the clipped gradient (3, 4)
    let m = &st.first_moments()[0];
    assert!((m[0] - 0.3).abs() < 1e-12 && (m[1] - 0.4).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_aborts_without_change() {
    let mut p = store(&[&[1.0], &[2.0]]);
    let mut st = TrainState::new(&p);
    optimizer_step(&mut p, &[vec![0.1], vec![0.2]], &mut st, 1e-2, &AdamConfig::default()).unwrap();
    let (p0, s0) = (p.clone(), st.clone());
    let err = optimizer_step(&mut p, &[vec![0.1], vec![f64::NAN]], &mut st, 1e-2, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
    assert!(err.to_string().contains("p1"));
    assert_eq!(p, p0);
    assert_eq!(st, s0);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 6,
            num_layers: 2,
            model_dim: 8,
            attention_heads: 2,
            ff_expansion: 2,
            conv_kernel: 3,
            pooling_layers: 2,
            dropout: 0.1,
            max_positions: 64,
        },
        decoder: DecoderConfig {
            num_layers: 1,
            hidden_dim: 8,
            dropout: 0.1,
        },
        joint_dim: 8,
        vocab_size: 3,
        blank_id: 0,
    }
}

fn corpus(n: usize, sample_seed: u64) -> Vec<Utterance> {
    generate_toy_corpus(&ToyCorpusSpec {
        vocab_size: 3,
        num_utterances: n,
        label_len_range: (2, 3),
        frames_per_label: 4,
        noise_std: 0.3,
        synthesizer_seed: 5,
        sample_seed,
        dims: 6,
        id_prefix: "t".into(),
    })
    .unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        schedule: ScheduleConfig {
            base_lr: 1e-2,
            warmup: 5,
            decay_steps: 50,
        },
        batch_size: 3,
        epochs: 4,
        seed: 9,
        augment: AugmentPolicy {
            freq_mask_width_max: 2,
            freq_masks: 1,
            time_mask_width_max: 2,
            time_masks: 1,
        },
        ..TrainConfig::default()
    }
}

fn bytes(m: &Model) -> Vec<u8> {
    encode_checkpoint(m, &BTreeMap::new()).unwrap()
}

#[test]
fn training_reduces_loss() {
    let data = corpus(12, 1);
    let mut cfg = tiny_train();
    cfg.epochs = 15;
    let out = train_model(&cfg, None, &data, &data[..4]).unwrap();
    assert!(out.diverged.is_none());
    let last = out.log.last().unwrap();
    assert!(last.train_loss < out.initial_loss, "{} vs {}", last.train_loss, out.initial_loss);
    assert_eq!(out.log.len(), 15);
    assert_eq!(last.step, 15 * 4);
    assert!(last.dev_wer.is_finite());
}

#[test]
fn training_is_deterministic() {
    let data = corpus(7, 2);
    let a = train_model(&tiny_train(), None, &data, &[]).unwrap();
    let b = train_model(&tiny_train(), None, &data, &[]).unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
    assert_eq!(a.model, b.model);
    let mut other = tiny_train();
    other.seed = 10;
    assert_ne!(train_model(&other, None, &data, &[]).unwrap().model, a.model);
}

#[test]
fn zero_alpha_distillation_is_scratch() {
    let data = corpus(6, 3);
    let mut tc = tiny_train();
    tc.seed = 77;
    tc.epochs = 1;
    let teacher = train_model(&tc, None, &data, &[]).unwrap().model;
    let teacher_bytes = bytes(&teacher);

    let scratch = train_model(&tiny_train(), None, &data, &[]).unwrap();
    let mut dc = tiny_train();
    dc.mode = TrainMode::Distill;
    dc.teacher_checkpoint = Some("unused".into());
    dc.distill.alpha = 0.0;
    let distilled = train_model(&dc, Some(&teacher), &data, &[]).unwrap();
    assert_eq!(scratch.model, distilled.model);
    assert_eq!(scratch.state, distilled.state);
    assert!(distilled.log[0].train_kd_loss > 0.0);

    dc.distill.alpha = 0.5;
    let mixed = train_model(&dc, Some(&teacher), &data, &[]).unwrap();
    assert_ne!(mixed.model, scratch.model);
    assert_eq!(bytes(&teacher), teacher_bytes);
}

#[test]
fn distillation_guards() {
    let data = corpus(3, 4);
    let mut dc = tiny_train();
    dc.mode = TrainMode::Distill;
    assert!(matches!(train_model(&dc, None, &data, &[]), Err(Error::Config(_))));
    dc.teacher_checkpoint = Some("t.ctkd".into());
    assert!(matches!(train_model(&dc, None, &data, &[]), Err(Error::Config(_))));
    let mut big = tiny_model();
    big.vocab_size = 4;
    let teacher = Model::new(big, 0).unwrap();
    let err = train_model(&dc, Some(&teacher), &data, &[]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("vocab"));
    assert!(matches!(train_model(&tiny_train(), None, &[], &[]), Err(Error::Input(_))));
}

#[test]
fn divergence_keeps_last_good_parameters() {
    let data = corpus(6, 5);
    let mut cfg = tiny_train();
    cfg.schedule = ScheduleConfig {
        base_lr: 1e200,
        warmup: 1,
        decay_steps: 1,
    };
    let out = train_model(&cfg, None, &data, &[]).unwrap();
    let detail = out.diverged.as_deref().unwrap();
    assert!(detail.contains("step"), "{detail}");
    assert!(out.model.params().tensors().iter().all(|t| t.all_finite()));
    assert!(out.log.len() < cfg.epochs);
}

#[test]
fn config_from_flat() {
    let mut flat = FlatConfig::parse(
        "train.mode = distill\ntrain.teacher_checkpoint = t.ctkd\ndistill.alpha = 0.5\nmodel.vocab_size = 3\nschedule.warmup = 7\n",
    )
    .unwrap();
    let cfg = TrainConfig::from_flat(&mut flat, &TrainConfig::default()).unwrap();
    flat.finish("").unwrap();
    assert_eq!(cfg.mode, TrainMode::Distill);
    assert_eq!(cfg.distill.alpha, 0.5);
    assert_eq!(cfg.model.vocab_size, 3);
    assert_eq!(cfg.schedule.warmup, 7);
    cfg.validate().unwrap();

    let mut bad = FlatConfig::parse("model.encoder.mystery = 1\n").unwrap();
    let err = TrainConfig::from_flat(&mut bad, &TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("model.encoder.mystery"));
    let mut bad = FlatConfig::parse("train.mode = teach\n").unwrap();
    assert!(TrainConfig::from_flat(&mut bad, &TrainConfig::default()).is_err());
}

#[test]
fn metric_log_layout() {
    let m = EpochMetrics {
        epoch: 2,
        step: 40,
        lr: 1e-3,
        train_loss: 1.5,
        train_transducer_loss: 1.5,
        train_kd_loss: 0.0,
        dev_wer: 0.25,
        dev_ser: 0.5,
    };
    let text = render_metric_log(&[m]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0].split('\t').count(), 8);
    assert_eq!(lines[1].split('\t').count(), 8);
    assert!(lines[1].ends_with("25.00\t50.00"));
}

#[test]
fn seeds_are_decorrelated() {
    let mut seen = std::collections::HashSet::new();
    for a in 0..20 {
        for b in 0..20 {
            assert!(seen.insert(derive_seed(3, &[a, b])));
        }
    }
}
