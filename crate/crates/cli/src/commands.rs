use std::fmt::Write as _;
use std::path::Path;

use ctkd::config::FlatConfig;
use ctkd::diffcore::GradCheckOptions;
use ctkd::eval::{decode as decode_one, evaluate, DecodeOptions, SearchMode, MAX_SYMBOLS_PER_FRAME};
use ctkd::frontend::{write_dataset, ToyCorpusSpec};
use ctkd::gradsuite;
use ctkd::model::{count_parameters, load_checkpoint, ModelConfig};
use ctkd::pipeline::{run_pipeline, toy_spec_from_flat, DataConfig, DataSource, PipelineConfig};
use ctkd::train::{run_training, write_outcome, TrainConfig, TrainMode};
use ctkd::Error;

use crate::Failure;

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

fn data_source(cfg: &mut FlatConfig, prefix: &str, base: &DataSource) -> Result<DataSource, Error> {
    let mut s = cfg.take_section(prefix);
    let src = DataSource::from_flat(&mut s, base, prefix)?;
    s.finish(prefix)?;
    Ok(src)
}

fn decode_options(cfg: &mut FlatConfig) -> Result<DecodeOptions, Error> {
    let max_symbols_per_frame = cfg.take_or("decode.max_symbols_per_frame", MAX_SYMBOLS_PER_FRAME)?;
    let mode = match cfg.take_or("decode.mode", String::from("beam"))?.as_str() {
        "greedy" => SearchMode::Greedy,
        "beam" => SearchMode::Beam(cfg.take_or("decode.beam_size", 8)?),
        other => return Err(Error::Config(format!("key `decode.mode`: expected greedy or beam, got {other:?}"))),
    };
    if matches!(mode, SearchMode::Beam(0)) {
        return Err(Error::Config("key `decode.beam_size` must be positive".into()));
    }
    Ok(DecodeOptions {
        mode,
        max_symbols_per_frame,
    })
}

pub fn train(mut cfg: FlatConfig, out: &Path, distill: bool) -> Result<(), Failure> {
    let defaults = DataConfig::default();
    let train_src = data_source(&mut cfg, "data.train", &defaults.train)?;
    let dev_src = data_source(&mut cfg, "data.dev", &defaults.dev)?;
    let mut tc = TrainConfig::from_flat(&mut cfg, &TrainConfig::default())?;
    cfg.finish("")?;
    if distill {
        tc.mode = TrainMode::Distill;
    } else if tc.mode == TrainMode::Distill {
        return Err(Error::Config("key `train.mode`: use the distill command for distillation".into()).into());
    }
    tc.validate()?;
    let (train, dev) = (train_src.load()?, dev_src.load()?);
    let outcome = run_training(&tc, &train, &dev)?;
    let ck = write_outcome(out, &tc, &outcome)?;
    print!("{}", ctkd::train::render_metric_log(&outcome.log));
    println!("checkpoint {}", ck.display());
    match outcome.diverged {
        Some(d) => Err(Failure::runtime(format!("training diverged ({d}); last good checkpoint kept"))),
        None => Ok(()),
    }
}

pub fn pipeline(cfg: FlatConfig, out: &Path) -> Result<(), Failure> {
    let mut cfg = cfg;
    if !cfg.contains("output_dir") {
        cfg.set("output_dir", out.display());
    }
    let pc = PipelineConfig::from_flat(cfg, &TrainConfig::default())?;
    let outcome = run_pipeline(&pc)?;
    println!("{}", outcome.table);
    println!("{}", outcome.comparison);
    match outcome.failure {
        Some(f) => Err(Failure::runtime(format!("pipeline halted, partial results kept: {f}"))),
        None => Ok(()),
    }
}

fn eval_inputs(cfg: &mut FlatConfig) -> Result<(ctkd::model::Model, Vec<ctkd::frontend::Utterance>, DecodeOptions), Failure> {
    let ck: std::path::PathBuf = cfg.take_required("checkpoint")?;
    let src = data_source(cfg, "data", &DataConfig::default().eval[0].1)?;
    let opts = decode_options(cfg)?;
    let model = load_checkpoint(&ck)?.model;
    Ok((model, src.load()?, opts))
}

pub fn eval(mut cfg: FlatConfig, out: &Path) -> Result<(), Failure> {
    let (model, utts, opts) = eval_inputs(&mut cfg)?;
    cfg.finish("")?;
    let report = evaluate(&model, &utts, &opts)?;
    create_dir(out)?;
    write(&out.join("eval.tsv"), &report.render())?;
    let summary: String = report.render().lines().filter(|l| l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    print!("{summary}");
    Ok(())
}

pub fn decode(mut cfg: FlatConfig, out: &Path) -> Result<(), Failure> {
    let (model, utts, opts) = eval_inputs(&mut cfg)?;
    cfg.finish("")?;
    let mut text = String::from("id\thypothesis\tlog_score\n");
    for u in &utts {
        let (hyp, score) = decode_one(&model, &u.features, &opts)?;
        let hyp: Vec<String> = hyp.iter().map(usize::to_string).collect();
        let _ = writeln!(text, "{}\t{}\t{score:.6}", u.id, hyp.join(" "));
    }
    create_dir(out)?;
    write(&out.join("decode.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn count_params(mut cfg: FlatConfig) -> Result<(), Failure> {
    let mut keys = cfg.take_section("model");
    let model = ModelConfig::from_flat(&mut keys, &ModelConfig::default())?;
    keys.finish("model")?;
    cfg.finish("")?;
    model.validate()?;
    let b = count_parameters(&model);
    println!("encoder_input\t{}", b.encoder_input);
    println!("positions\t{}", b.positions);
    println!("encoder_blocks\t{}", b.encoder_blocks);
    println!("decoder\t{}", b.decoder);
    println!("joint\t{}", b.joint);
    println!("total\t{}\t{:.2}M", b.total, b.total as f64 / 1e6);
    Ok(())
}

pub fn gradcheck(mut cfg: FlatConfig, out: &Path) -> Result<(), Failure> {
    let defaults = GradCheckOptions::default();
    let opts = GradCheckOptions {
        epsilon: cfg.take_or("gradcheck.epsilon", defaults.epsilon)?,
        tolerance: cfg.take_or("gradcheck.tolerance", defaults.tolerance)?,
        scale_floor: cfg.take_or("gradcheck.scale_floor", defaults.scale_floor)?,
        seed: Some(cfg.take_or("gradcheck.seed", 0)?),
    };
    let seed = cfg.take_or("gradcheck.case_seed", 11)?;
    cfg.finish("")?;
    let results = gradsuite::run_all(seed, opts)?;
    let mut text = String::from("case\tmax_rel_error\tstatus\n");
    for r in &results {
        let _ = writeln!(text, "{}\t{:.3e}\t{}", r.name, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let _ = writeln!(text, "# {} cases, {failed} failed, tolerance {:e}", results.len(), opts.tolerance);
    create_dir(out)?;
    write(&out.join("gradcheck.tsv"), &text)?;
    print!("{text}");
    if failed > 0 {
        return Err(Failure::runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn gen_toy_data(mut cfg: FlatConfig, out: &Path) -> Result<(), Failure> {
    let mut keys = cfg.take_section("toy");
    let spec = toy_spec_from_flat(&mut keys, &ToyCorpusSpec::default())?;
    keys.finish("toy")?;
    cfg.finish("")?;
    let utts = ctkd::frontend::generate_toy_corpus(&spec)?;
    let manifest = write_dataset(out, &utts)?;
    println!("{} utterances, manifest {}", utts.len(), manifest.display());
    Ok(())
}
