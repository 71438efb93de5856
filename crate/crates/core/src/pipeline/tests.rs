use super::*;
use crate::config::FlatConfig;
use crate::model::count_parameters;
use crate::train::TrainConfig;

const M: u64 = 1_000_000;

#[test]
fn compression_examples() {
    let c = compression_percent(128 * M, 80 * M).unwrap();
    assert_eq!(c.display, 38);
    assert!((c.exact - 37.5).abs() < 1e-12);
    assert_eq!(compression_percent(7, 7).unwrap().display, 0);
    assert_eq!(compression_percent(128 * M, 46 * M).unwrap().display, 64);
    // 25.806..% rounds to 26, one above the reported 25
    let c = compression_percent(62 * M, 46 * M).unwrap();
    assert_eq!(c.display, 26);
    assert!((c.display - 25).abs() <= 1);
    assert!(matches!(compression_percent(10, 11), Err(crate::Error::Config(_))));
    assert!(compression_percent(0, 0).is_err());
}

#[test]
fn half_rounds_up() {
    // 100 (1 - 1/8) = 87.5
    assert_eq!(compression_percent(8, 1).unwrap().display, 88);
    // 100 (1 - 3/8) = 62.5
    assert_eq!(compression_percent(8, 3).unwrap().display, 63);
}

#[test]
fn naming_schemes() {
    let n = Naming::default();
    let names = |k: usize| (n.teacher(k), n.baseline(k), n.student_from_original(k), n.student(k));
    assert_eq!((n.teacher(1), n.baseline(1), n.student(1)), ("T1".into(), "B1".into(), "S1".into()));
    assert_eq!(names(2), ("T2".into(), "B2".into(), "S2".into(), "S3".into()));
    assert_eq!(names(3), ("T3".into(), "B3".into(), "S4".into(), "S5".into()));

    let n = Naming {
        teacher_offset: 2,
        baseline_offset: 3,
        student_offset: 5,
    };
    assert_eq!((n.teacher(1), n.baseline(1), n.student(1)), ("T1".into(), "B4".into(), "S6".into()));
    assert_eq!(
        (n.teacher(2), n.baseline(2), n.student_from_original(2), n.student(2)),
        ("T4".into(), "B5".into(), "S7".into(), "S8".into())
    );
}

#[test]
fn mean_std() {
    let m = MeanStd::of(&[1.0, 2.0, 3.0]);
    assert_eq!(m.mean, 2.0);
    assert!((m.std - 1.0).abs() < 1e-15);
    assert_eq!(MeanStd::of(&[0.25]).std, 0.0);
}

fn tiny_text() -> String {
    "
    seeds = 7
    decode.mode = greedy
    data.train.toy.num_utterances = 12
    data.dev.toy.num_utterances = 4
    data.eval.test.toy.num_utterances = 5
    train.epochs = 1
    train.batch_size = 4
    schedule.base_lr = 0.003
    augment.freq_masks = 0
    augment.time_masks = 0
    model.encoder.input_dim = 40
    model.encoder.num_layers = 2
    model.encoder.model_dim = 16
    model.encoder.attention_heads = 2
    model.encoder.conv_kernel = 3
    model.encoder.pooling_layers = 1
    model.encoder.max_positions = 64
    model.decoder.num_layers = 1
    model.decoder.hidden_dim = 16
    model.joint_dim = 16
    model.vocab_size = 8
    stage1.model.encoder.model_dim = 12
    stage1.model.decoder.hidden_dim = 12
    stage1.model.joint_dim = 12
    stage2.model.encoder.num_layers = 1
    stage2.model.encoder.model_dim = 8
    stage2.model.decoder.hidden_dim = 8
    stage2.model.joint_dim = 8
    "
    .into()
}

fn parse(text: &str, out: &std::path::Path) -> crate::Result<PipelineConfig> {
    let mut flat = FlatConfig::parse(text)?;
    flat.set("output_dir", out.display());
    PipelineConfig::from_flat(flat, &TrainConfig::default())
}

#[test]
fn config_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&tiny_text(), dir.path()).unwrap();
    assert_eq!(cfg.seeds, vec![7]);
    assert_eq!(cfg.stages.len(), 2);
    assert_eq!(cfg.stages[0].teacher_source, TeacherSource::Original);
    assert!(!cfg.stages[0].also_train_from_original_teacher);
    assert_eq!(cfg.stages[1].teacher_source, TeacherSource::PreviousStage);
    assert!(cfg.stages[1].also_train_from_original_teacher && cfg.stages[1].also_train_scratch_baseline);
    assert_eq!(cfg.stages[1].student_model.encoder.num_layers, 1);
    // stage models inherit the teacher's unset keys
    assert_eq!(cfg.stages[1].student_model.encoder.attention_heads, 2);
    assert_eq!(cfg.stages[1].train.epochs, 1);
    assert!(cfg.stages[1].train.augment.is_identity());
    let OriginalTeacher::Train(t) = &cfg.original_teacher else { panic!() };
    assert_eq!(t.model.encoder.model_dim, 16);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let err = |extra: &str| parse(&(tiny_text() + extra), dir.path()).unwrap_err().to_string();
    assert!(err("stage1.teacher = previous_stage\n").contains("stage1.teacher"));
    assert!(err("stage1.model.encoder.wobble = 3\n").contains("stage1.model.encoder.wobble"));
    assert!(err("stage4.model.joint_dim = 4\n").contains("stage4"));
    assert!(err("bogus = 1\n").contains("bogus"));
    assert!(err("decode.mode = beam\ndecode.beam_size = 0\n").contains("beam_size"));
    // stage 2 no smaller than stage 1
    let e = err("stage2.model.encoder.num_layers = 2\nstage2.model.encoder.model_dim = 12\nstage2.model.decoder.hidden_dim = 12\nstage2.model.joint_dim = 12\n");
    assert!(e.contains("strictly decrease"), "{e}");
    // a student larger than the teacher
    let e = err("stage1.model.encoder.model_dim = 32\n");
    assert!(e.contains("not fewer"), "{e}");
    let e = err("data.train.manifest = x.tsv\ndata.train.toy.noise_std = 1\n");
    assert!(e.contains("data.train"), "{e}");
}

#[test]
fn stage_one_previous_rejected_by_runner() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse(&tiny_text(), dir.path()).unwrap();
    cfg.stages[0].teacher_source = TeacherSource::PreviousStage;
    assert!(matches!(cfg.validate(), Err(crate::Error::Config(_))));
    assert!(matches!(run_pipeline(&cfg), Err(crate::Error::Config(_))));
}

#[test]
fn two_stage_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&tiny_text(), dir.path()).unwrap();
    let out = run_pipeline(&cfg).unwrap();
    assert!(out.is_complete(), "{:?}", out.failure);

    let names: Vec<&str> = out.reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["T1", "B1", "S1", "T2", "B2", "S2", "S3"]);
    let by = |n: &str| out.reports.iter().find(|r| r.name == n).unwrap();
    // promotion identity
    assert_eq!(by("T2").checkpoint_sha256, by("S1").checkpoint_sha256);
    assert_eq!(by("T2").alias.as_deref(), Some("S1"));
    assert_eq!(by("T2").params, by("S1").params);
    // stage teacher is S1 for every stage-2 row; T1 counts differ
    let t1 = by("T1").params;
    let s1 = by("S1").params;
    for n in ["B2", "S2", "S3"] {
        assert_eq!(by(n).comp_vs_original.unwrap(), compression_percent(t1, by(n).params).unwrap());
    }
    // each student against its own teacher; baselines have none
    assert_eq!(by("S3").comp_vs_teacher.unwrap(), compression_percent(s1, by("S3").params).unwrap());
    assert_eq!(by("S2").comp_vs_teacher.unwrap(), compression_percent(t1, by("S2").params).unwrap());
    assert_eq!(by("B2").comp_vs_teacher, None);
    assert_eq!(by("T2").comp_vs_teacher, by("S1").comp_vs_teacher);
    assert_eq!(by("T2").comp_vs_original, by("S1").comp_vs_original);
    assert!(t1 > s1 && s1 > by("S3").params);
    assert_eq!(by("S3").params, count_parameters(&cfg.stages[1].student_model).total);
    // the scratch baseline and student share a config but not weights
    assert_ne!(by("B2").checkpoint_sha256, by("S3").checkpoint_sha256);

    assert!(out.table.contains("T2 = S1"));
    assert!(out.comparison.contains("multi-stage S3"));
    assert!(out.comparison.contains("distilled S1"));
    for f in ["report.txt", "report.tsv", "reports_per_seed.tsv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(dir.path().join("seed-7/stage2/S3/model.ctkd").exists());
    assert!(dir.path().join("seed-7/stage2/S3/metrics.tsv").exists());

    // determinism per seed
    let dir2 = tempfile::tempdir().unwrap();
    let again = run_pipeline(&parse(&tiny_text(), dir2.path()).unwrap()).unwrap();
    assert_eq!(again.reports, out.reports);
    assert_eq!(again.tsv, out.tsv);
}

#[test]
fn stage_with_all_flags_trains_three_models() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ctkd").display().to_string();
    let cfg = parse(&(tiny_text() + "stage1.teacher = " + &missing + "\n"), dir.path()).unwrap();
    assert!(cfg.stages[0].also_train_from_original_teacher);
    assert!(matches!(run_pipeline(&cfg), Err(crate::Error::Config(_))));
    // a failure after the first stage keeps what finished, marked partial
    let cfg = parse(&(tiny_text() + "stage2.teacher = " + &missing + "\n"), dir.path()).unwrap();
    let out = run_pipeline(&cfg).unwrap();
    assert!(out.failure.as_deref().unwrap().contains("not found"));
    assert!(out.table.starts_with("# PARTIAL"));
    let names: Vec<&str> = out.reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["T1", "B1", "S1"]);

    // single stage, explicit teacher, all flags on
    let teacher_dir = tempfile::tempdir().unwrap();
    let base = parse(&tiny_text(), teacher_dir.path()).unwrap();
    let OriginalTeacher::Train(tc) = &base.original_teacher else { panic!() };
    let data = base.data.train.load().unwrap();
    let t = crate::train::train_model(tc, None, &data, &[]).unwrap();
    let tpath = crate::train::write_outcome(&teacher_dir.path().join("t"), tc, &t).unwrap();
    let ppath = teacher_dir.path().join("other.ctkd");
    std::fs::copy(&tpath, &ppath).unwrap();

    let mut cfg = base.clone();
    cfg.output_dir = dir.path().join("run");
    cfg.original_teacher = OriginalTeacher::Checkpoint(tpath.clone());
    cfg.stages.truncate(1);
    cfg.stages[0].teacher_source = TeacherSource::Path(ppath);
    cfg.stages[0].also_train_from_original_teacher = true;
    let original = SavedModel::load("T1", &tpath).unwrap();
    let (train, dev) = (base.data.train.load().unwrap(), base.data.dev.load().unwrap());
    let eval = vec![("test".to_string(), base.data.eval[0].1.load().unwrap())];
    let ctx = StageContext {
        seed: 3,
        naming: Naming::default(),
        original: &original,
        previous: None,
        train: &train,
        dev: &dev,
        eval: &eval,
        decode: cfg.decode,
        out_dir: cfg.output_dir.clone(),
    };
    let out = run_stage(&cfg.stages[0], &ctx).unwrap();
    assert_eq!(out.reports.len(), 3);
    let roles: Vec<Role> = out.reports.iter().map(|r| r.role.clone()).collect();
    assert_eq!(roles, [Role::Baseline, Role::StudentFromOriginal, Role::Student]);

    // a student as large as its teacher is refused
    let mut same = cfg.stages[0].clone();
    same.student_model = tc.model.clone();
    same.train.model = tc.model.clone();
    assert!(matches!(run_stage(&same, &ctx), Err(crate::Error::Config(_))));
}

#[test]
fn single_stage_is_plain_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = tiny_text().lines().filter(|l| !l.trim_start().starts_with("stage2")).map(|l| format!("{l}\n")).collect();
    let cfg = parse(&(text + "stage1.baseline = false\n"), dir.path()).unwrap();
    let out = run_pipeline(&cfg).unwrap();
    let names: Vec<&str> = out.reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["T1", "S1"]);
    assert_eq!(out.reports[0].comp_vs_original, None);
}
