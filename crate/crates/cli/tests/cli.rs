use std::path::Path;
use std::process::{Command, Output};

fn ctkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctkd")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

const TINY_MODEL: &[&str] = &[
    "--set", "model.encoder.num_layers=1",
    "--set", "model.encoder.model_dim=8",
    "--set", "model.encoder.attention_heads=2",
    "--set", "model.encoder.conv_kernel=3",
    "--set", "model.encoder.pooling_layers=1",
    "--set", "model.encoder.max_positions=64",
    "--set", "model.decoder.num_layers=1",
    "--set", "model.decoder.hidden_dim=8",
    "--set", "model.joint_dim=8",
    "--set", "model.vocab_size=8",
];

#[test]
fn count_params_prints_exact_total_and_millions() {
    let cfg = configs().join("t1.cfg");
    let o = ctkd(&["count-params", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("total\t120520704\t120.52M"), "{}", stdout(&o));
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let o = ctkd(&["count-params", "--set", "model.encoder.widgets=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.encoder.widgets"), "{}", stderr(&o));

    let o = ctkd(&["count-params", "--set", "model.encoder.model_dim=abc"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.encoder.model_dim"), "{}", stderr(&o));

    let o = ctkd(&["count-params", "--set", "no_equals_sign"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ctkd(&["count-params", "--config", "/nonexistent/file.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "this line has no equals sign\n").unwrap();
    let o = ctkd(&["count-params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ctkd");
    let o = ctkd(&["eval", "--set", &format!("checkpoint={}", missing.display()), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn toy_data_train_eval_decode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = ctkd(&[
        "gen-toy-data",
        "--set", "toy.num_utterances=6",
        "--set", "toy.sample_seed=5",
        "--out", data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = data.join("manifest.tsv");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 6);

    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "--set", "train.epochs=1",
        "--set", "train.batch_size=3",
        "--set", "data.train.toy.num_utterances=6",
        "--set", "data.dev.toy.num_utterances=2",
        "--out", run.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_MODEL);
    let o = ctkd(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("epoch\tstep"));
    let ck = run.join("model.ctkd");
    assert!(ck.exists() && run.join("metrics.tsv").exists());

    let student = dir.path().join("student");
    let teacher_arg = format!("train.teacher_checkpoint={}", ck.display());
    let mut args = vec![
        "distill",
        "--set", &teacher_arg,
        "--set", "train.epochs=1",
        "--set", "data.train.toy.num_utterances=6",
        "--set", "data.dev.toy.num_utterances=2",
        "--out", student.to_str().unwrap(),
    ];
    args.extend_from_slice(TINY_MODEL);
    let o = ctkd(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let ck_arg = format!("checkpoint={}", ck.display());
    let manifest_arg = format!("data.manifest={}", manifest.display());
    let ev = dir.path().join("eval");
    let o = ctkd(&["eval", "--set", &ck_arg, "--set", &manifest_arg, "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("# corpus_wer"));
    assert!(stdout(&o).contains("# utterances\t6"));
    let text = std::fs::read_to_string(ev.join("eval.tsv")).unwrap();
    assert!(text.starts_with("id\treference\thypothesis\twer\n"));

    let o = ctkd(&["decode", "--set", &ck_arg, "--set", &manifest_arg, "--set", "decode.mode=greedy", "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 7);

    // distill without a teacher is a config error
    let mut args = vec!["distill", "--out", student.to_str().unwrap()];
    args.extend_from_slice(TINY_MODEL);
    let o = ctkd(&args);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn pipeline_with_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke_pipeline.cfg");
    let o = ctkd(&[
        "pipeline",
        "--config", cfg.to_str().unwrap(),
        "--set", "seeds=1,2,3",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("T2 = S1"), "{out}");
    assert!(out.contains("multi-stage S3"), "{out}");
    let tsv = std::fs::read_to_string(dir.path().join("report.tsv")).unwrap();
    // seeds column
    assert!(tsv.lines().skip(1).all(|l| l.ends_with("\t3")), "{tsv}");
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctkd(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains(", 0 failed"));
    // an impossible tolerance makes it fail with the runtime status
    let o = ctkd(&["gradcheck", "--set", "gradcheck.tolerance=1e-30", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
