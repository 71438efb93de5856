//! Multi-stage progressive distillation: each stage distills a smaller
//! student from its teacher, and that student becomes the next stage's
//! teacher.

mod config;
mod report;
mod run;

#[cfg(test)]
mod tests;

pub use config::{
    toy_spec_from_flat, DataConfig, DataSource, OriginalTeacher, PipelineConfig, StageConfig,
    TeacherSource,
};
pub use report::{aggregate, render_comparison, render_seed_tsv, render_table, render_tsv, AggregateRow, MeanStd};
pub use run::{run_pipeline, run_stage, PipelineOutcome, SavedModel, StageContext, StageOutput};

use crate::error::{Error, Result};

/// Size reduction of a student relative to a teacher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Compression {
    /// `100 (1 - student / teacher)`, unrounded.
    pub exact: f64,
    /// `exact` rounded half up to a whole percent, for display.
    pub display: i64,
}

pub fn compression_percent(teacher_params: u64, student_params: u64) -> Result<Compression> {
    if teacher_params == 0 {
        return Err(Error::Config("teacher has no parameters".into()));
    }
    if student_params > teacher_params {
        return Err(Error::Config(format!(
            "student ({student_params} parameters) is larger than its teacher ({teacher_params})"
        )));
    }
    let exact = 100.0 * (1.0 - student_params as f64 / teacher_params as f64);
    Ok(Compression {
        exact,
        display: (exact + 0.5).floor() as i64,
    })
}

/// What a report row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// The stage's teacher (the original model, or a promoted student).
    Teacher,
    /// Student-sized model trained without distillation.
    Baseline,
    /// Student distilled from the original teacher.
    StudentFromOriginal,
    /// Student distilled from the stage teacher.
    Student,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalScore {
    pub set: String,
    /// Fractions.
    pub wer: f64,
    pub ser: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage_id: usize,
    pub role: Role,
    /// Display name such as `S3`.
    pub name: String,
    /// For a promoted teacher, the student it used to be (`S1` for `T2`).
    pub alias: Option<String>,
    pub params: u64,
    /// Against the stage teacher; `None` on teacher rows.
    pub comp_vs_teacher: Option<Compression>,
    /// Against the original teacher; `None` on the original's own row.
    pub comp_vs_original: Option<Compression>,
    pub scores: Vec<EvalScore>,
    pub seed: u64,
    /// SHA-256 of the checkpoint file evaluated.
    pub checkpoint_sha256: String,
}

/// Names the models of stage `stage` (1-based) with the usual
/// scheme: stage 1 has `T1`, `B`, `S`; later stages have `T`, `B`, the
/// student distilled from `T1`, then the student distilled from the stage
/// teacher. Offsets shift the numbering so a second experiment can
/// continue where the first stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Naming {
    pub teacher_offset: usize,
    pub baseline_offset: usize,
    pub student_offset: usize,
}

impl Naming {
    pub fn teacher(&self, stage: usize) -> String {
        if stage == 1 {
            "T1".into()
        } else {
            format!("T{}", self.teacher_offset + stage)
        }
    }

    pub fn baseline(&self, stage: usize) -> String {
        format!("B{}", self.baseline_offset + stage)
    }

    /// Stage 1 has one student; later stages have two.
    fn first_student(&self, stage: usize) -> usize {
        self.student_offset + if stage == 1 { 1 } else { 2 * stage - 2 }
    }

    pub fn student_from_original(&self, stage: usize) -> String {
        format!("S{}", self.first_student(stage))
    }

    pub fn student(&self, stage: usize) -> String {
        if stage == 1 {
            format!("S{}", self.first_student(1))
        } else {
            format!("S{}", self.first_student(stage) + 1)
        }
    }
}
