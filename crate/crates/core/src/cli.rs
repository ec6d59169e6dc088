//! The `layerdistill` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ablation::{prepare_teachers, run_ablation, Recipe, TaskData, Teachers};
use crate::augment::{augment_dataset, load_glove, TeacherSource};
use crate::checkpoint::{self, CheckpointInfo, Stage};
use crate::config::ExperimentConfig;
use crate::data::{load_lines, load_tsv, write_tsv, Example, Split, Vocab};
use crate::distill::Objectives;
use crate::error::{Error, Result};
use crate::pipeline::{
    distill_intermediate, distill_prediction, evaluate, finetune, general_distill, sub_seed, train_mlm, RunLog,
    StageResult, SALT_INIT,
};
use crate::transformer::{TransformerConfig, TransformerModel};

pub const VERSION: &str = match option_env!("LAYERDISTILL_GIT_DESCRIBE") {
    Some(v) => v,
    None => env!("CARGO_PKG_VERSION"),
};

#[derive(Debug, Parser)]
#[command(name = "layerdistill", version = VERSION, about = "Layer-wise transformer distillation")]
pub struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the experiment file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Every output lands here.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TeacherStage {
    Mlm,
    Finetune,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    Intermediate,
    Prediction,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MLM-pretrain and/or fine-tune the teacher.
    TrainTeacher {
        #[arg(long, value_enum, default_value = "both")]
        stage: TeacherStage,
        /// Starting checkpoint for fine-tuning.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Distill a fresh student from the MLM teacher on general text.
    GeneralDistill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Expand a TSV training set by word replacement.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        /// Written under --out-dir when relative.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        glove: Option<PathBuf>,
        /// Checkpoint with an MLM head.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pt: Option<f64>,
        #[arg(long)]
        na: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        include_original: Option<bool>,
    },
    /// Task distillation: intermediate layers, then predictions.
    TaskDistill {
        /// Fine-tuned teacher.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        /// Training TSV; defaults to data.train.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        phase: Phase,
    },
    /// Accuracy and Matthews correlation of a checkpoint.
    Evaluate {
        /// Defaults to <out-dir>/task-prediction.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dev")]
        split: SplitArg,
    },
    /// Run an ablation grid and write a TSV report.
    Ablate {
        #[arg(long)]
        recipe: String,
        /// Reuse an MLM teacher instead of training one.
        #[arg(long, requires = "teacher")]
        general_teacher: Option<PathBuf>,
        /// Reuse a fine-tuned teacher.
        #[arg(long, requires = "general_teacher")]
        teacher: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration, size, lineage and metrics.
    InspectCheckpoint { path: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher { .. } => "train-teacher",
            Command::GeneralDistill { .. } => "general-distill",
            Command::Augment { .. } => "augment",
            Command::TaskDistill { .. } => "task-distill",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::InspectCheckpoint { .. } => "inspect-checkpoint",
        }
    }
}

/// Parses `argv` (including the program name).
pub fn parse_args<I, T>(argv: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

/// Parses and runs, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse_args(argv.clone()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().filter_level(cli.log_level).try_init();
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'a str,
    seed: Option<u64>,
    config: Option<&'a ExperimentConfig>,
    wall_time_secs: f64,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("{} needs --config", cli.command.name())))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one parsed command; `args` is recorded in the run manifest.
pub fn run(cli: &Cli, args: &[String]) -> Result<()> {
    let start = Instant::now();
    if let Command::InspectCheckpoint { path } = &cli.command {
        print!("{}", checkpoint::inspect(path)?.summary());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    fs::create_dir_all(&cli.out_dir)?;
    let ctx = Ctx {
        cfg: &cfg,
        out: &cli.out_dir,
    };
    match &cli.command {
        Command::TrainTeacher { stage, init } => ctx.train_teacher(*stage, init.as_deref())?,
        Command::GeneralDistill { teacher } => ctx.general_distill(teacher)?,
        Command::Augment {
            input,
            out,
            glove,
            teacher,
            pt,
            na,
            k,
            include_original,
        } => {
            let mut aug = cfg.augment.with_seed(cfg.seed);
            aug.p_t = pt.unwrap_or(aug.p_t);
            aug.n_a = na.unwrap_or(aug.n_a);
            aug.k = k.unwrap_or(aug.k);
            aug.include_original = include_original.unwrap_or(aug.include_original);
            aug.validate()?;
            ctx.augment(input, out, glove.as_deref(), teacher, &aug)?
        }
        Command::TaskDistill {
            teacher,
            student,
            train,
            phase,
        } => ctx.task_distill(teacher, student, train.as_deref(), *phase)?,
        Command::Evaluate { checkpoint, split } => {
            let path = checkpoint.clone().unwrap_or_else(|| cli.out_dir.join("task-prediction"));
            ctx.evaluate(&path, *split)?
        }
        Command::Ablate {
            recipe,
            general_teacher,
            teacher,
        } => {
            let recipe: Recipe = recipe.parse()?;
            let reuse = general_teacher.as_deref().zip(teacher.as_deref());
            ctx.ablate(recipe, reuse)?
        }
        Command::InspectCheckpoint { .. } => unreachable!(),
    }
    let manifest = RunManifest {
        command: cli.command.name(),
        args: args.to_vec(),
        version: VERSION,
        seed: Some(cfg.seed),
        config: Some(&cfg),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    fs::write(
        cli.out_dir.join(format!("run-{}.json", cli.command.name())),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

fn load_checkpoint(path: &Path) -> Result<(TransformerModel, CheckpointInfo)> {
    checkpoint::load(path)
}

impl Ctx<'_> {
    fn vocab(&self) -> Result<Vocab> {
        let v = Vocab::load(self.cfg.data.require(&self.cfg.data.vocab, "vocab")?)?;
        self.cfg.check_vocab(&v)?;
        Ok(v)
    }

    fn labeled(&self, path: &Option<PathBuf>, key: &str, split: Split) -> Result<Vec<Example>> {
        load_tsv(self.cfg.data.require(path, key)?, split)
    }

    fn general(&self) -> Result<Vec<Example>> {
        load_lines(self.cfg.data.require(&self.cfg.data.general, "general")?)
    }

    fn save(
        &self,
        name: &str,
        result: &StageResult,
        stage: Stage,
        parent: Option<&str>,
        log: &RunLog,
    ) -> Result<CheckpointInfo> {
        let info = checkpoint::save(self.out.join(name), &result.model, stage, parent, &result.metrics)?;
        log.write(self.out.join(format!("{name}.metrics.jsonl")))?;
        log::info!("wrote {name} ({stage}, lineage {})", info.lineage);
        Ok(info)
    }

    fn train_teacher(&self, stage: TeacherStage, init: Option<&Path>) -> Result<()> {
        let cfg = self.cfg;
        let vocab = self.vocab()?;
        let mut start: Option<(TransformerModel, Option<String>)> = match init {
            Some(p) => {
                let (m, info) = load_checkpoint(p)?;
                Some((m, Some(info.lineage)))
            }
            None => None,
        };
        if matches!(stage, TeacherStage::Mlm | TeacherStage::Both) {
            let corpus = self.general()?;
            let model = TransformerModel::new(cfg.teacher.clone())?;
            let mut log = RunLog::default();
            let r = train_mlm(model, &corpus, &vocab, &cfg.train_config(Stage::TeacherMlm, cfg.seed), &mut log)?;
            let info = self.save("teacher-mlm", &r, Stage::TeacherMlm, None, &log)?;
            start = Some((r.model, Some(info.lineage)));
        }
        if matches!(stage, TeacherStage::Finetune | TeacherStage::Both) {
            let train = match &cfg.data.teacher_train {
                Some(_) => self.labeled(&cfg.data.teacher_train, "teacher_train", Split::Train)?,
                None => self.labeled(&cfg.data.train, "train", Split::Train)?,
            };
            let dev = self.labeled(&cfg.data.dev, "dev", Split::Dev)?;
            let (model, parent) = match start {
                Some(s) => s,
                None => (TransformerModel::new(cfg.teacher.clone())?, None),
            };
            let mut log = RunLog::default();
            let r = finetune(model, &train, Some(&dev), &vocab, &cfg.train_config(Stage::TeacherFinetune, cfg.seed), &mut log)?;
            self.save("teacher", &r, Stage::TeacherFinetune, parent.as_deref(), &log)?;
            print_metrics("teacher", &r.metrics);
        }
        Ok(())
    }

    fn general_distill(&self, teacher: &Path) -> Result<()> {
        let cfg = self.cfg;
        let setup = cfg.distill_setup(Objectives::INTERMEDIATE, cfg.seed)?;
        let vocab = self.vocab()?;
        let corpus = self.general()?;
        let (teacher, _) = load_checkpoint(teacher)?;
        check_teacher_shape(&teacher, &cfg.teacher)?;
        let init = TransformerModel::new(TransformerConfig {
            seed: sub_seed(cfg.seed, SALT_INIT),
            ..cfg.student.clone()
        })?;
        let root = checkpoint::save(self.out.join("student-init"), &init, Stage::Init, None, &BTreeMap::new())?;
        let mut log = RunLog::default();
        let r = general_distill(&teacher, init, &corpus, &vocab, &cfg.train_config(Stage::General, cfg.seed), &setup, &mut log)?;
        self.save("general", &r, Stage::General, Some(&root.lineage), &log)?;
        Ok(())
    }

    fn augment(&self, input: &Path, out: &Path, glove: Option<&Path>, teacher: &Path, aug: &crate::augment::AugmentConfig) -> Result<()> {
        let out = self.inside_out_dir(out)?;
        let glove = match glove {
            Some(g) => g.to_path_buf(),
            None => self.cfg.data.require(&self.cfg.data.glove, "glove")?.to_path_buf(),
        };
        let vocab = self.vocab()?;
        let examples = load_tsv(input, Split::Train)?;
        let store = load_glove(glove, self.cfg.data.glove_limit)?;
        let (teacher, _) = load_checkpoint(teacher)?;
        let source = TeacherSource::new(&teacher, &vocab, &store);
        let augmented = augment_dataset(&examples, aug, &source)?;
        if let Some(dir) = out.parent() {
            fs::create_dir_all(dir)?;
        }
        write_tsv(&out, &augmented)?;
        log::info!("wrote {} examples to {}", augmented.len(), out.display());
        Ok(())
    }

    fn inside_out_dir(&self, path: &Path) -> Result<PathBuf> {
        if path.is_relative() {
            return Ok(self.out.join(path));
        }
        if path.starts_with(self.out) {
            return Ok(path.to_path_buf());
        }
        Err(Error::Usage(format!(
            "{} is outside --out-dir {}",
            path.display(),
            self.out.display()
        )))
    }

    fn task_distill(&self, teacher: &Path, student: &Path, train: Option<&Path>, phase: Phase) -> Result<()> {
        let cfg = self.cfg;
        let setup = cfg.distill_setup(Objectives::INTERMEDIATE, cfg.seed)?;
        let vocab = self.vocab()?;
        let train = match train {
            Some(p) => load_tsv(p, Split::Train)?,
            None => self.labeled(&cfg.data.train, "train", Split::Train)?,
        };
        let dev = self.labeled(&cfg.data.dev, "dev", Split::Dev)?;
        let (teacher, _) = load_checkpoint(teacher)?;
        check_teacher_shape(&teacher, &cfg.teacher)?;
        let (mut model, info) = load_checkpoint(student)?;
        let mut stage = info.stage;
        let mut parent = info.lineage;
        if matches!(phase, Phase::Intermediate | Phase::Both) {
            let mut log = RunLog::default();
            let r = distill_intermediate(&teacher, model, &train, &vocab, &cfg.train_config(Stage::TaskIntermediate, cfg.seed), &setup, &mut log)?;
            let saved = self.save("task-intermediate", &r, Stage::TaskIntermediate, Some(&parent), &log)?;
            model = r.model;
            stage = Stage::TaskIntermediate;
            parent = saved.lineage;
        }
        if matches!(phase, Phase::Prediction | Phase::Both) {
            let mut log = RunLog::default();
            let r = distill_prediction(
                &teacher,
                model,
                stage,
                &train,
                &dev,
                &vocab,
                &cfg.train_config(Stage::TaskPrediction, cfg.seed),
                &setup,
                &mut log,
            )?;
            self.save("task-prediction", &r, Stage::TaskPrediction, Some(&parent), &log)?;
            print_metrics("student", &r.metrics);
        }
        Ok(())
    }

    fn evaluate(&self, path: &Path, split: SplitArg) -> Result<()> {
        let cfg = self.cfg;
        let vocab = self.vocab()?;
        let (model, _) = load_checkpoint(path)?;
        let (examples, name) = match split {
            SplitArg::Train => (self.labeled(&cfg.data.train, "train", Split::Train)?, "train"),
            SplitArg::Dev => (self.labeled(&cfg.data.dev, "dev", Split::Dev)?, "dev"),
        };
        let m = evaluate(&model, &examples, &vocab, cfg.data.max_len, 64)?;
        let json = serde_json::to_string(&m).expect("metrics serialize");
        println!("{json}");
        fs::write(self.out.join(format!("eval-{name}.json")), json + "\n")?;
        Ok(())
    }

    fn ablate(&self, recipe: Recipe, reuse: Option<(&Path, &Path)>) -> Result<()> {
        let cfg = self.cfg;
        let vocab = self.vocab()?;
        let task = TaskData {
            name: cfg
                .data
                .train
                .as_deref()
                .and_then(|p| p.file_stem())
                .map_or("task".into(), |s| s.to_string_lossy().into_owned()),
            general: self.general()?,
            teacher_train: match &cfg.data.teacher_train {
                Some(_) => self.labeled(&cfg.data.teacher_train, "teacher_train", Split::Train)?,
                None => self.labeled(&cfg.data.train, "train", Split::Train)?,
            },
            train: self.labeled(&cfg.data.train, "train", Split::Train)?,
            dev: self.labeled(&cfg.data.dev, "dev", Split::Dev)?,
            glove: load_glove(cfg.data.require(&cfg.data.glove, "glove")?, cfg.data.glove_limit)?,
            vocab,
        };
        let teachers = match reuse {
            Some((general, task_teacher)) => {
                let (task_model, info) = load_checkpoint(task_teacher)?;
                Teachers {
                    general: load_checkpoint(general)?.0,
                    task: task_model,
                    task_dev_accuracy: info.metrics.get("dev_accuracy").copied().unwrap_or(f64::NAN),
                }
            }
            None => prepare_teachers(cfg, &task, &mut RunLog::default())?,
        };
        let threads = std::env::var("DISTILL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let report = pool.install(|| run_ablation(recipe, cfg, &[(task, teachers)]))?;
        let tsv = report.to_tsv();
        print!("{tsv}");
        fs::write(self.out.join(format!("ablation-{}.tsv", recipe.name())), tsv)?;
        Ok(())
    }
}

fn check_teacher_shape(teacher: &TransformerModel, expected: &TransformerConfig) -> Result<()> {
    let got = teacher.config();
    if got.num_layers != expected.num_layers || got.hidden != expected.hidden || got.heads != expected.heads {
        return Err(Error::Config(format!(
            "teacher checkpoint has {} layers × {} wide × {} heads, config says {} × {} × {}",
            got.num_layers, got.hidden, got.heads, expected.num_layers, expected.hidden, expected.heads
        )));
    }
    Ok(())
}

fn print_metrics(who: &str, m: &BTreeMap<String, f64>) {
    for (k, v) in m {
        println!("{who} {k} {v:.4}");
    }
}
