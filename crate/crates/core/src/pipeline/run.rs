//! Stage execution, promotion and the multi-seed driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeOptions};
use crate::frontend::Utterance;
use crate::model::{load_checkpoint, load_checkpoint_expecting, Model};
use crate::train::{train_model, write_outcome, TrainConfig, TrainMode, TrainOutcome};

use super::config::{OriginalTeacher, PipelineConfig, StageConfig, TeacherSource};
use super::report::{aggregate, render_comparison, render_table, render_tsv, render_seed_tsv};
use super::{compression_percent, EvalScore, Naming, Role, StageReport};

/// A model as it exists on disk, reloaded from its checkpoint.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub name: String,
    pub model: Model,
    pub path: PathBuf,
    pub sha256: String,
    pub params: u64,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl SavedModel {
    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let model = load_checkpoint(path)?.model;
        Ok(SavedModel {
            name: name.into(),
            params: model.num_parameters() as u64,
            sha256: file_sha256(path)?,
            path: path.to_path_buf(),
            model,
        })
    }
}

pub struct StageContext<'a> {
    pub seed: u64,
    pub naming: Naming,
    pub original: &'a SavedModel,
    /// Student of the previous stage, if any.
    pub previous: Option<&'a SavedModel>,
    pub train: &'a [Utterance],
    pub dev: &'a [Utterance],
    pub eval: &'a [(String, Vec<Utterance>)],
    pub decode: DecodeOptions,
    /// Per-seed output directory.
    pub out_dir: PathBuf,
}

pub struct StageOutput {
    /// The stage teacher, resolved and loaded from disk.
    pub teacher: SavedModel,
    /// One report per trained model: baseline, student from the original
    /// teacher, then the stage student.
    pub reports: Vec<StageReport>,
    /// The stage student, reloaded from its checkpoint.
    pub student: SavedModel,
}

fn score(model: &Model, sets: &[(String, Vec<Utterance>)], decode: &DecodeOptions) -> Result<Vec<EvalScore>> {
    sets.iter()
        .map(|(name, utts)| {
            let r = evaluate(model, utts, decode)?;
            Ok(EvalScore {
                set: name.clone(),
                wer: r.wer(),
                ser: r.ser(),
            })
        })
        .collect()
}

/// Trains one model, writes its checkpoint and metric log under
/// `dir/name`, and returns it as reloaded from disk.
fn train_and_save(
    cfg: &TrainConfig,
    teacher: Option<&Model>,
    ctx: &StageContext<'_>,
    dir: &Path,
    name: &str,
) -> Result<SavedModel> {
    let outcome: TrainOutcome = train_model(cfg, teacher, ctx.train, ctx.dev)?;
    let path = write_outcome(&dir.join(name), cfg, &outcome)?;
    if let Some(detail) = &outcome.diverged {
        return Err(Error::Diverged {
            step: outcome.state.step,
            detail: format!("{name}: {detail} (last good checkpoint kept at {})", path.display()),
        });
    }
    let model = load_checkpoint_expecting(&path, &cfg.model)?.model;
    Ok(SavedModel {
        name: name.to_string(),
        params: model.num_parameters() as u64,
        sha256: file_sha256(&path)?,
        path,
        model,
    })
}

fn resolve_teacher(stage: &StageConfig, ctx: &StageContext<'_>) -> Result<SavedModel> {
    let k = stage.stage_id;
    match &stage.teacher_source {
        TeacherSource::Original => Ok(ctx.original.clone()),
        TeacherSource::PreviousStage => {
            let prev = ctx.previous.ok_or_else(|| {
                Error::Config(format!("stage{k}.teacher = previous_stage but no previous student exists"))
            })?;
            // Promotion goes through the file, never the in-memory copy.
            let promoted = SavedModel::load(ctx.naming.teacher(k), &prev.path)?;
            if promoted.sha256 != prev.sha256 || promoted.model.params().tensors() != prev.model.params().tensors() {
                return Err(Error::Integrity(format!(
                    "promoted teacher {} differs from student {} it was saved as",
                    promoted.name, prev.name
                )));
            }
            Ok(promoted)
        }
        TeacherSource::Path(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("stage{k}.teacher: checkpoint {} not found", p.display())));
            }
            SavedModel::load(ctx.naming.teacher(k), p)
        }
    }
}

/// Runs one stage for one seed: distils the stage student and, as
/// configured, a scratch baseline and a student distilled straight from
/// the original teacher.
pub fn run_stage(stage: &StageConfig, ctx: &StageContext<'_>) -> Result<StageOutput> {
    let k = stage.stage_id;
    if k == 1 && stage.teacher_source == TeacherSource::PreviousStage {
        return Err(Error::Config("stage1.teacher = previous_stage: the first stage has no previous stage".into()));
    }
    let teacher = resolve_teacher(stage, ctx)?;
    let student_params = crate::model::count_parameters(&stage.student_model).total;
    let vs_teacher = compression_percent(teacher.params, student_params).map_err(|e| {
        Error::Config(format!("stage{k}: {e}"))
    })?;
    if student_params == teacher.params {
        return Err(Error::Config(format!(
            "stage{k}: student ({student_params} parameters) does not shrink its teacher"
        )));
    }
    let vs_original = compression_percent(ctx.original.params, student_params)?;
    let dir = ctx.out_dir.join(format!("stage{k}"));

    let base = TrainConfig {
        model: stage.student_model.clone(),
        seed: ctx.seed,
        ..stage.train.clone()
    };
    let distill_from = |t: &SavedModel| TrainConfig {
        mode: TrainMode::Distill,
        teacher_checkpoint: Some(t.path.clone()),
        ..base.clone()
    };
    let report = |role: Role, m: &SavedModel| -> Result<StageReport> {
        Ok(StageReport {
            stage_id: k,
            role,
            name: m.name.clone(),
            alias: None,
            params: m.params,
            comp_vs_teacher: match role {
                Role::Baseline => None,
                Role::StudentFromOriginal => Some(vs_original),
                _ => Some(vs_teacher),
            },
            comp_vs_original: Some(vs_original),
            scores: score(&m.model, ctx.eval, &ctx.decode)?,
            seed: ctx.seed,
            checkpoint_sha256: m.sha256.clone(),
        })
    };

    let mut reports = Vec::new();
    if stage.also_train_scratch_baseline {
        let cfg = TrainConfig {
            mode: TrainMode::Scratch,
            teacher_checkpoint: None,
            ..base.clone()
        };
        let b = train_and_save(&cfg, None, ctx, &dir, &ctx.naming.baseline(k))?;
        reports.push(report(Role::Baseline, &b)?);
    }
    if stage.also_train_from_original_teacher {
        let name = ctx.naming.student_from_original(k);
        let s = train_and_save(&distill_from(ctx.original), Some(&ctx.original.model), ctx, &dir, &name)?;
        reports.push(report(Role::StudentFromOriginal, &s)?);
    }
    let student = train_and_save(&distill_from(&teacher), Some(&teacher.model), ctx, &dir, &ctx.naming.student(k))?;
    reports.push(report(Role::Student, &student)?);
    Ok(StageOutput {
        teacher,
        reports,
        student,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// Every report of every seed, in execution order.
    pub reports: Vec<StageReport>,
    /// Set when a stage failed; `reports` then holds what finished.
    pub failure: Option<String>,
    pub table: String,
    pub tsv: String,
    pub comparison: String,
}

impl PipelineOutcome {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

fn load_sets(cfg: &PipelineConfig) -> Result<(Vec<Utterance>, Vec<Utterance>, Vec<(String, Vec<Utterance>)>)> {
    let train = cfg.data.train.load()?;
    let dev = cfg.data.dev.load()?;
    let eval = cfg
        .data
        .eval
        .iter()
        .map(|(n, s)| Ok((n.clone(), s.load()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, dev, eval))
}

fn run_seed(
    cfg: &PipelineConfig,
    seed: u64,
    data: &(Vec<Utterance>, Vec<Utterance>, Vec<(String, Vec<Utterance>)>),
    reports: &mut Vec<StageReport>,
) -> Result<()> {
    let out_dir = cfg.output_dir.join(format!("seed-{seed}"));
    let (train, dev, eval) = data;
    let original = match &cfg.original_teacher {
        OriginalTeacher::Checkpoint(p) => SavedModel::load("T1", p)?,
        OriginalTeacher::Train(t) => {
            let tc = TrainConfig { seed, ..t.clone() };
            let path = out_dir.join("T1");
            let outcome = train_model(&tc, None, train, dev)?;
            let ck = write_outcome(&path, &tc, &outcome)?;
            if let Some(d) = outcome.diverged {
                return Err(Error::Diverged {
                    step: outcome.state.step,
                    detail: format!("T1: {d}"),
                });
            }
            SavedModel::load("T1", &ck)?
        }
    };
    let mut previous: Option<SavedModel> = None;
    for stage in &cfg.stages {
        let ctx = StageContext {
            seed,
            naming: cfg.naming,
            original: &original,
            previous: previous.as_ref(),
            train,
            dev,
            eval,
            decode: cfg.decode,
            out_dir: out_dir.clone(),
        };
        let out = run_stage(stage, &ctx)?;
        let (alias, scores, comp_vs_teacher, comp_vs_original) = match (&stage.teacher_source, &previous) {
            (TeacherSource::Original, _) => (None, score(&out.teacher.model, eval, &cfg.decode)?, None, None),
            (TeacherSource::PreviousStage, Some(p)) => {
                // Bit-identical to the student it was promoted from, so it
                // inherits that row.
                let r = reports
                    .iter()
                    .rev()
                    .find(|r| r.seed == seed && r.name == p.name)
                    .ok_or_else(|| Error::Contract(format!("no report for promoted student {}", p.name)))?;
                (Some(p.name.clone()), r.scores.clone(), r.comp_vs_teacher, r.comp_vs_original)
            }
            _ => (
                None,
                score(&out.teacher.model, eval, &cfg.decode)?,
                None,
                compression_percent(original.params, out.teacher.params).ok(),
            ),
        };
        reports.push(StageReport {
            stage_id: stage.stage_id,
            role: Role::Teacher,
            name: if stage.stage_id == 1 && stage.teacher_source == TeacherSource::Original {
                "T1".into()
            } else {
                cfg.naming.teacher(stage.stage_id)
            },
            alias,
            params: out.teacher.params,
            comp_vs_teacher,
            comp_vs_original,
            scores,
            seed,
            checkpoint_sha256: out.teacher.sha256.clone(),
        });
        reports.extend(out.reports);
        previous = Some(out.student);
    }
    Ok(())
}

/// Runs every seed through every stage, then aggregates. A failing stage
/// stops the run; the reports gathered so far are kept and the rendered
/// output is marked partial.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = load_sets(cfg)?;
    let mut reports = Vec::new();
    let mut failure = None;
    for &seed in &cfg.seeds {
        match run_seed(cfg, seed, &data, &mut reports) {
            Ok(()) => {}
            Err(e @ Error::Config(_)) if reports.is_empty() => return Err(e),
            Err(e) => {
                failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    let rows = aggregate(&reports);
    let set_names: Vec<String> = cfg.data.eval.iter().map(|(n, _)| n.clone()).collect();
    let mut table = render_table(&rows, &set_names);
    let mut tsv = render_tsv(&rows, &set_names);
    let comparison = render_comparison(&rows, &set_names);
    if let Some(f) = &failure {
        let mark = format!("# PARTIAL: {f}\n");
        table = mark.clone() + &table;
        tsv = mark + &tsv;
    }
    let outcome = PipelineOutcome {
        reports,
        failure,
        table,
        tsv,
        comparison,
    };
    write_reports(&cfg.output_dir, &outcome, &set_names)?;
    Ok(outcome)
}

fn write_reports(dir: &Path, outcome: &PipelineOutcome, set_names: &[String]) -> Result<()> {
    let mut files: BTreeMap<&str, String> = BTreeMap::new();
    files.insert("report.txt", format!("{}\n{}", outcome.table, outcome.comparison));
    files.insert("report.tsv", outcome.tsv.clone());
    files.insert("reports_per_seed.tsv", render_seed_tsv(&outcome.reports, set_names));
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
