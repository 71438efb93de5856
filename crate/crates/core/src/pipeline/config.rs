//! Pipeline configuration and its flat-text form.
//!
//! Key layout (everything optional unless noted):
//!
//! ```text
//! seeds = 1, 2, 3
//! output_dir = runs/exp1
//! naming.teacher_offset = 0        # also baseline_offset, student_offset
//! decode.mode = beam               # or greedy
//! decode.beam_size = 8
//! decode.max_symbols_per_frame = 10
//! data.train.toy.num_utterances = 2000   # or data.train.manifest = path
//! data.dev.toy.sample_seed = 3
//! data.eval = test                 # comma-separated set names
//! data.eval.test.toy.sample_seed = 4
//! train.epochs = 8                 # shared training keys (train.*, schedule.*, ...)
//! teacher.checkpoint = t1.ctkd     # or teacher.model.* and teacher.train.* ...
//! stage1.teacher = original        # original | previous_stage | a checkpoint path
//! stage1.baseline = true
//! stage1.from_original = false
//! stage1.model.encoder.model_dim = 24    # required: at least one model key
//! stage1.train.epochs = 10         # per-stage training overrides
//! ```

use std::path::PathBuf;

use crate::config::FlatConfig;
use crate::error::{Error, Result};
use crate::eval::{DecodeOptions, SearchMode};
use crate::frontend::{generate_toy_corpus, read_manifest, ToyCorpusSpec, Utterance};
use crate::model::{count_parameters, ModelConfig};
use crate::train::TrainConfig;

use super::Naming;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TeacherSource {
    Original,
    PreviousStage,
    Path(PathBuf),
}

impl TeacherSource {
    fn parse(s: &str) -> Self {
        match s {
            "original" => TeacherSource::Original,
            "previous_stage" | "previous" => TeacherSource::PreviousStage,
            p => TeacherSource::Path(PathBuf::from(p)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// 1-based position in the pipeline.
    pub stage_id: usize,
    pub teacher_source: TeacherSource,
    pub student_model: ModelConfig,
    pub also_train_scratch_baseline: bool,
    pub also_train_from_original_teacher: bool,
    /// Training settings for every model of the stage. Mode and model are
    /// set per model by the runner.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OriginalTeacher {
    Checkpoint(PathBuf),
    /// Trained from scratch once per seed.
    Train(TrainConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(ToyCorpusSpec),
    Manifest(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Utterance>> {
        match self {
            DataSource::Toy(spec) => generate_toy_corpus(spec),
            DataSource::Manifest(p) => read_manifest(p),
        }
    }

    /// Reads `manifest` or `toy.*` keys; `context` prefixes error messages.
    pub fn from_flat(cfg: &mut FlatConfig, base: &DataSource, context: &str) -> Result<Self> {
        let manifest: Option<PathBuf> = cfg.take("manifest")?;
        let mut toy = cfg.take_section("toy");
        let out = match (manifest, toy.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config(format!("`{context}` sets both a manifest and toy.* keys")));
            }
            (Some(p), true) => DataSource::Manifest(p),
            (None, _) => {
                let base_spec = match base {
                    DataSource::Toy(s) => s.clone(),
                    DataSource::Manifest(_) => ToyCorpusSpec::default(),
                };
                if toy.is_empty() {
                    base.clone()
                } else {
                    DataSource::Toy(toy_spec_from_flat(&mut toy, &base_spec)?)
                }
            }
        };
        toy.finish(&format!("{context}.toy"))?;
        Ok(out)
    }
}

/// Reads toy corpus keys (`vocab_size`, `num_utterances`, `label_len_min`,
/// `label_len_max`, `frames_per_label`, `noise_std`, `synthesizer_seed`,
/// `sample_seed`, `dims`, `id_prefix`) on top of `base`.
pub fn toy_spec_from_flat(cfg: &mut FlatConfig, base: &ToyCorpusSpec) -> Result<ToyCorpusSpec> {
    let spec = ToyCorpusSpec {
        vocab_size: cfg.take_or("vocab_size", base.vocab_size)?,
        num_utterances: cfg.take_or("num_utterances", base.num_utterances)?,
        label_len_range: (
            cfg.take_or("label_len_min", base.label_len_range.0)?,
            cfg.take_or("label_len_max", base.label_len_range.1)?,
        ),
        frames_per_label: cfg.take_or("frames_per_label", base.frames_per_label)?,
        noise_std: cfg.take_or("noise_std", base.noise_std)?,
        synthesizer_seed: cfg.take_or("synthesizer_seed", base.synthesizer_seed)?,
        sample_seed: cfg.take_or("sample_seed", base.sample_seed)?,
        dims: cfg.take_or("dims", base.dims)?,
        id_prefix: cfg.take_or("id_prefix", base.id_prefix.clone())?,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: DataSource,
    pub dev: DataSource,
    /// Named evaluation sets, in report order.
    pub eval: Vec<(String, DataSource)>,
}

impl Default for DataConfig {
    /// Toy corpus: 2000 training, 200 dev and 200 test utterances sharing
    /// one synthesizer.
    fn default() -> Self {
        let toy = |n, sample_seed, prefix: &str| {
            DataSource::Toy(ToyCorpusSpec {
                num_utterances: n,
                sample_seed,
                id_prefix: prefix.into(),
                ..ToyCorpusSpec::default()
            })
        };
        DataConfig {
            train: toy(2000, 2, "train"),
            dev: toy(200, 3, "dev"),
            eval: vec![("test".into(), toy(200, 4, "test"))],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub original_teacher: OriginalTeacher,
    pub stages: Vec<StageConfig>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub naming: Naming,
    pub decode: DecodeOptions,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("pipeline needs at least one stage".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` is empty".into()));
        }
        if self.data.eval.is_empty() {
            return Err(Error::Config("`data.eval` names no evaluation set".into()));
        }
        if let SearchMode::Beam(0) = self.decode.mode {
            return Err(Error::Config("decode.beam_size must be positive".into()));
        }
        if let OriginalTeacher::Train(t) = &self.original_teacher {
            t.validate()?;
        }
        let mut previous: Option<u64> = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let k = i + 1;
            if stage.stage_id != k {
                return Err(Error::Config(format!("stage {} listed at position {k}", stage.stage_id)));
            }
            stage.student_model.validate()?;
            stage.train.validate()?;
            let params = count_parameters(&stage.student_model).total;
            match &stage.teacher_source {
                TeacherSource::PreviousStage if k == 1 => {
                    return Err(Error::Config(
                        "stage1.teacher = previous_stage: the first stage has no previous stage".into(),
                    ));
                }
                TeacherSource::Original if stage.also_train_from_original_teacher => {
                    return Err(Error::Config(format!(
                        "stage{k}.from_original duplicates the stage student when stage{k}.teacher = original"
                    )));
                }
                _ => {}
            }
            let teacher_params = match (&stage.teacher_source, &self.original_teacher) {
                // covered by the decreasing-size check below
                (TeacherSource::PreviousStage, _) => None,
                (TeacherSource::Original, OriginalTeacher::Train(t)) => Some(count_parameters(&t.model).total),
                _ => None,
            };
            if let Some(tp) = teacher_params {
                if params >= tp {
                    return Err(Error::Config(format!(
                        "stage{k} student has {params} parameters, not fewer than its teacher's {tp}"
                    )));
                }
            }
            if let Some(p) = previous {
                if params >= p {
                    return Err(Error::Config(format!(
                        "stage{k} student has {params} parameters; sizes must strictly decrease across stages (previous {p})"
                    )));
                }
            }
            previous = Some(params);
        }
        Ok(())
    }

    /// Parses a whole pipeline config, consuming every key. `base` supplies
    /// the shared training defaults.
    pub fn from_flat(mut cfg: FlatConfig, base: &TrainConfig) -> Result<Self> {
        let seeds = cfg.take_list::<u64>("seeds")?.unwrap_or_else(|| vec![base.seed]);
        let output_dir = cfg.take_or("output_dir", PathBuf::from("pipeline_out"))?;
        let naming = Naming {
            teacher_offset: cfg.take_or("naming.teacher_offset", 0)?,
            baseline_offset: cfg.take_or("naming.baseline_offset", 0)?,
            student_offset: cfg.take_or("naming.student_offset", 0)?,
        };
        let decode = {
            let max_symbols_per_frame = cfg.take_or("decode.max_symbols_per_frame", crate::eval::MAX_SYMBOLS_PER_FRAME)?;
            let mode = match cfg.take_or("decode.mode", String::from("beam"))?.as_str() {
                "greedy" => SearchMode::Greedy,
                "beam" => SearchMode::Beam(cfg.take_or("decode.beam_size", 8)?),
                other => {
                    return Err(Error::Config(format!("key `decode.mode`: expected greedy or beam, got {other:?}")));
                }
            };
            if cfg.contains("decode.beam_size") {
                return Err(Error::Config("key `decode.beam_size` needs decode.mode = beam".into()));
            }
            DecodeOptions {
                mode,
                max_symbols_per_frame,
            }
        };

        let data = {
            let defaults = DataConfig::default();
            let mut d = cfg.take_section("data");
            let eval_names = d.take_list::<String>("eval")?;
            let mut s = d.take_section("train");
            let train = DataSource::from_flat(&mut s, &defaults.train, "data.train")?;
            s.finish("data.train")?;
            let mut s = d.take_section("dev");
            let dev = DataSource::from_flat(&mut s, &defaults.dev, "data.dev")?;
            s.finish("data.dev")?;
            let mut eval_section = d.take_section("eval");
            let eval = match eval_names {
                None => {
                    let (name, src) = defaults.eval[0].clone();
                    let mut s = eval_section.take_section(&name);
                    let src = DataSource::from_flat(&mut s, &src, &format!("data.eval.{name}"))?;
                    s.finish(&format!("data.eval.{name}"))?;
                    vec![(name, src)]
                }
                Some(names) => {
                    let mut out = Vec::new();
                    for (i, name) in names.into_iter().enumerate() {
                        let ctx = format!("data.eval.{name}");
                        let base_src = DataSource::Toy(ToyCorpusSpec {
                            num_utterances: 200,
                            sample_seed: 4 + i as u64,
                            id_prefix: name.clone(),
                            ..ToyCorpusSpec::default()
                        });
                        let mut s = eval_section.take_section(&name);
                        let src = DataSource::from_flat(&mut s, &base_src, &ctx)?;
                        s.finish(&ctx)?;
                        if out.iter().any(|(n, _)| n == &name) {
                            return Err(Error::Config(format!("key `data.eval`: set `{name}` listed twice")));
                        }
                        out.push((name, src));
                    }
                    out
                }
            };
            eval_section.finish("data.eval")?;
            d.finish("data")?;
            DataConfig { train, dev, eval }
        };

        // Stage sections are split off first so the shared keys below
        // cannot swallow them.
        let mut stage_sections = Vec::new();
        for k in 1.. {
            let s = cfg.take_section(&format!("stage{k}"));
            if s.is_empty() {
                break;
            }
            stage_sections.push(s);
        }
        if let Some(stray) = cfg.keys().find(|k| k.starts_with("stage")).map(str::to_string) {
            return Err(Error::Config(format!(
                "unknown key `{stray}` (stages must be numbered stage1, stage2, ... without gaps)"
            )));
        }
        let mut teacher_keys = cfg.take_section("teacher");
        let shared = TrainConfig::from_flat(&mut cfg, base)?;
        cfg.finish("")?;

        let original_teacher = match teacher_keys.take::<PathBuf>("checkpoint")? {
            Some(p) => {
                teacher_keys.finish("teacher")?;
                OriginalTeacher::Checkpoint(p)
            }
            None => {
                let t = TrainConfig::from_flat(&mut teacher_keys, &shared)?;
                teacher_keys.finish("teacher")?;
                OriginalTeacher::Train(TrainConfig {
                    mode: crate::train::TrainMode::Scratch,
                    ..t
                })
            }
        };
        let model_base = match &original_teacher {
            OriginalTeacher::Train(t) => t.model.clone(),
            OriginalTeacher::Checkpoint(_) => shared.model.clone(),
        };

        let mut stages = Vec::new();
        for (i, mut s) in stage_sections.into_iter().enumerate() {
            let k = i + 1;
            let ctx = format!("stage{k}");
            let teacher_source = match s.take::<String>("teacher")? {
                Some(v) => TeacherSource::parse(&v),
                None if k == 1 => TeacherSource::Original,
                None => TeacherSource::PreviousStage,
            };
            let also_train_scratch_baseline = s.take_bool("baseline", true)?;
            let also_train_from_original_teacher =
                s.take_bool("from_original", teacher_source != TeacherSource::Original)?;
            let mut model_keys = s.take_section("model");
            if model_keys.is_empty() {
                return Err(Error::Config(format!("missing `{ctx}.model.*`: every stage needs a student model")));
            }
            let student_model = ModelConfig::from_flat(&mut model_keys, &model_base)?;
            model_keys.finish(&format!("{ctx}.model"))?;
            let train = TrainConfig::from_flat(&mut s, &shared)?;
            s.finish(&ctx)?;
            stages.push(StageConfig {
                stage_id: k,
                teacher_source,
                student_model: student_model.clone(),
                also_train_scratch_baseline,
                also_train_from_original_teacher,
                train: TrainConfig {
                    model: student_model,
                    teacher_checkpoint: None,
                    ..train
                },
            });
        }

        let out = PipelineConfig {
            original_teacher,
            stages,
            data,
            output_dir,
            seeds,
            naming,
            decode,
        };
        out.validate()?;
        Ok(out)
    }
}
