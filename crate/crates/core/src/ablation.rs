//! Ablation grids over procedures, objectives and layer mappings, run per
//! seed and summarized as a TSV table.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{augment_dataset, EmbeddingStore, TeacherSource};
use crate::checkpoint::Stage;
use crate::config::ExperimentConfig;
use crate::data::{Example, Vocab};
use crate::distill::Objectives;
use crate::error::{Error, Result};
use crate::mapping::Strategy;
use crate::pipeline::{
    distill, distill_intermediate, distill_prediction, finetune, general_distill, sub_seed, train_mlm, RunLog,
    SALT_AUGMENT, SALT_INIT,
};
use crate::transformer::{TransformerConfig, TransformerModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Procedures,
    Objectives,
    Mapping,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Procedures => "procedures",
            Recipe::Objectives => "objectives",
            Recipe::Mapping => "mapping",
        }
    }

    pub fn runs(self) -> Vec<RunSpec> {
        let gd = Init::General(Objectives::INTERMEDIATE);
        let td = |intermediate, augmented, gold_prediction| Training::TaskDistill {
            intermediate,
            augmented,
            gold_prediction,
        };
        let full = td(Objectives::INTERMEDIATE, true, false);
        let spec = |name: &str, init, training| RunSpec {
            name: name.to_string(),
            init,
            training,
            mapping: None,
        };
        let without = |embd, attn, hidn| Objectives {
            embd,
            attn,
            hidn,
            pred: false,
        };
        match self {
            Recipe::Procedures => vec![
                spec("full", gd, full),
                spec("w/o GD", Init::Random, full),
                spec("w/o TD", gd, Training::Finetune),
                spec("w/o DA", gd, td(Objectives::INTERMEDIATE, false, false)),
                spec("scratch", Init::Random, Training::Finetune),
            ],
            Recipe::Objectives => {
                let mut runs = vec![spec("full", gd, full)];
                for (name, obj) in [
                    ("w/o Embd", without(false, true, true)),
                    ("w/o Pred", Objectives::INTERMEDIATE),
                    ("w/o Trm", without(true, false, false)),
                    ("w/o Attn", without(true, false, true)),
                    ("w/o Hidn", without(true, true, false)),
                ] {
                    let gold = name == "w/o Pred";
                    runs.push(spec(name, Init::General(obj), td(obj, true, gold)));
                }
                runs
            }
            Recipe::Mapping => Strategy::ALL
                .into_iter()
                .map(|s| RunSpec {
                    mapping: Some(s),
                    ..spec(s.name(), gd, full)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procedures" => Ok(Recipe::Procedures),
            "objectives" => Ok(Recipe::Objectives),
            "mapping" => Ok(Recipe::Mapping),
            other => Err(Error::Usage(format!(
                "unknown recipe {other:?}; expected procedures, objectives or mapping"
            ))),
        }
    }
}

/// How the student is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Random,
    /// General distillation with these objectives.
    General(Objectives),
}

/// What happens on the task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Training {
    /// Intermediate phase with `intermediate`, then a prediction phase. With
    /// `gold_prediction` the second phase is cross-entropy on the original
    /// gold labels, step-matched to the distilled phase.
    TaskDistill {
        intermediate: Objectives,
        augmented: bool,
        gold_prediction: bool,
    },
    /// Prediction-layer distillation alone, for as many steps as the full
    /// task distillation takes.
    PredictionOnly { augmented: bool },
    /// Cross-entropy on the original training set for as many steps as the
    /// full task distillation takes.
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub name: String,
    pub init: Init,
    pub training: Training,
    /// Overrides the configured mapping in both distillation stages.
    pub mapping: Option<Strategy>,
}

/// One task's data.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub vocab: Vocab,
    /// Unlabeled general-domain text.
    pub general: Vec<Example>,
    /// Labeled data for the teacher.
    pub teacher_train: Vec<Example>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub glove: EmbeddingStore,
}

/// The MLM-pretrained teacher (general distillation and augmentation) and
/// its fine-tuned copy (task distillation).
#[derive(Clone, Debug)]
pub struct Teachers {
    pub general: TransformerModel,
    pub task: TransformerModel,
    pub task_dev_accuracy: f64,
}

/// Pretrains and fine-tunes a teacher from `cfg.teacher`.
pub fn prepare_teachers(cfg: &ExperimentConfig, task: &TaskData, log: &mut RunLog) -> Result<Teachers> {
    cfg.check_vocab(&task.vocab)?;
    let init = TransformerModel::new(cfg.teacher.clone())?;
    let general = train_mlm(init, &task.general, &task.vocab, &cfg.train_config(Stage::TeacherMlm, cfg.seed), log)?.model;
    let ft = finetune(
        general.clone(),
        &task.teacher_train,
        Some(&task.dev),
        &task.vocab,
        &cfg.train_config(Stage::TeacherFinetune, cfg.seed),
        log,
    )?;
    Ok(Teachers {
        general,
        task_dev_accuracy: ft.metrics.get("dev_accuracy").copied().unwrap_or(0.0),
        task: ft.model,
    })
}

/// Accuracy of every run, `[run][seed]`, for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResults {
    pub task: String,
    pub accuracy: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub recipe: Recipe,
    pub runs: Vec<String>,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskResults>,
}

impl AblationReport {
    pub fn mean(&self, run: &str, task: usize) -> Option<f64> {
        let i = self.runs.iter().position(|r| r == run)?;
        let accs = &self.tasks.get(task)?.accuracy[i];
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }

    /// One row per run; per task a column per seed and a mean column.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant");
        for t in &self.tasks {
            for seed in &self.seeds {
                let _ = write!(s, "\t{}.seed{seed}", t.task);
            }
            let _ = write!(s, "\t{}.mean", t.task);
        }
        s.push('\n');
        for (i, run) in self.runs.iter().enumerate() {
            s.push_str(run);
            for t in &self.tasks {
                for a in &t.accuracy[i] {
                    let _ = write!(s, "\t{a:.4}");
                }
                let _ = write!(s, "\t{:.4}", self.mean(run, self.tasks.iter().position(|x| x.task == t.task).expect("task")).expect("run"));
            }
            s.push('\n');
        }
        s
    }
}

fn random_student(cfg: &TransformerConfig, seed: u64) -> Result<TransformerModel> {
    TransformerModel::new(TransformerConfig {
        seed: sub_seed(seed, SALT_INIT),
        ..cfg.clone()
    })
}

/// Dev accuracy of every run in `specs` for one seed.
pub fn run_seed(
    cfg: &ExperimentConfig,
    task: &TaskData,
    teachers: &Teachers,
    specs: &[RunSpec],
    seed: u64,
) -> Result<Vec<f64>> {
    let mut log = RunLog::default();
    let wants_aug = |t: Training| match t {
        Training::TaskDistill { augmented, .. } | Training::PredictionOnly { augmented } => augmented,
        Training::Finetune => false,
    };
    let augmented = if specs.iter().any(|s| wants_aug(s.training)) {
        let source = TeacherSource::new(&teachers.general, &task.vocab, &task.glove);
        augment_dataset(&task.train, &cfg.augment.with_seed(sub_seed(seed, SALT_AUGMENT)), &source)?
    } else {
        Vec::new()
    };
    let full_td_steps = cfg.task_intermediate.total_steps(augmented.len().max(task.train.len()))
        + cfg.task_prediction.total_steps(augmented.len().max(task.train.len()));
    let mut generals: BTreeMap<String, TransformerModel> = BTreeMap::new();
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut distill_cfg = cfg.clone();
        if let Some(s) = spec.mapping {
            distill_cfg.distill.mapping = crate::pipeline::MappingSpec::Strategy(s);
        }
        let student = match spec.init {
            Init::Random => random_student(&cfg.student, seed)?,
            Init::General(obj) => {
                let key = format!("{obj:?}/{:?}", spec.mapping);
                match generals.get(&key) {
                    Some(m) => m.clone(),
                    None => {
                        let setup = distill_cfg.distill_setup(obj, seed)?;
                        let m = general_distill(
                            &teachers.general,
                            random_student(&cfg.student, seed)?,
                            &task.general,
                            &task.vocab,
                            &cfg.train_config(Stage::General, seed),
                            &setup,
                            &mut log,
                        )?
                        .model;
                        generals.insert(key, m.clone());
                        m
                    }
                }
            }
        };
        let model = match spec.training {
            Training::Finetune => {
                let mut tc = cfg.train_config(Stage::Finetune, seed);
                tc.settings = tc.settings.for_steps(full_td_steps, task.train.len());
                finetune(student, &task.train, Some(&task.dev), &task.vocab, &tc, &mut log)?.model
            }
            Training::PredictionOnly { augmented: aug } => {
                let data = if aug { &augmented } else { &task.train };
                let mut setup = distill_cfg.distill_setup(Objectives::PREDICTION, seed)?;
                setup.params.objectives = Objectives::PREDICTION;
                let mut tc = cfg.train_config(Stage::TaskPrediction, seed);
                let steps = cfg.task_intermediate.total_steps(data.len()) + tc.settings.total_steps(data.len());
                tc.settings = tc.settings.for_steps(steps, data.len());
                distill(&teachers.task, student, data, Some(&task.dev), &task.vocab, &tc, &setup, &mut log)?.model
            }
            Training::TaskDistill {
                intermediate,
                augmented: aug,
                gold_prediction,
            } => {
                let data = if aug { &augmented } else { &task.train };
                let setup = distill_cfg.distill_setup(intermediate, seed)?;
                let inter = distill_intermediate(
                    &teachers.task,
                    student,
                    data,
                    &task.vocab,
                    &cfg.train_config(Stage::TaskIntermediate, seed),
                    &setup,
                    &mut log,
                )?
                .model;
                let pred_cfg = cfg.train_config(Stage::TaskPrediction, seed);
                if gold_prediction {
                    let mut tc = cfg.train_config(Stage::Finetune, seed);
                    tc.settings = pred_cfg
                        .settings
                        .for_steps(pred_cfg.settings.total_steps(data.len()), task.train.len());
                    finetune(inter, &task.train, Some(&task.dev), &task.vocab, &tc, &mut log)?.model
                } else {
                    distill_prediction(
                        &teachers.task,
                        inter,
                        Stage::TaskIntermediate,
                        data,
                        &task.dev,
                        &task.vocab,
                        &pred_cfg,
                        &setup,
                        &mut log,
                    )?
                    .model
                }
            }
        };
        let m = crate::pipeline::evaluate(&model, &task.dev, &task.vocab, cfg.data.max_len, 64)?;
        out.push(m.accuracy);
    }
    Ok(out)
}

/// Runs `recipe` for every task and every configured seed. Seeds run in
/// parallel on the current rayon pool; results do not depend on the pool
/// size.
pub fn run_ablation(
    recipe: Recipe,
    cfg: &ExperimentConfig,
    tasks: &[(TaskData, Teachers)],
) -> Result<AblationReport> {
    let specs = recipe.runs();
    let seeds = cfg.ablation.seeds.clone();
    let mut results = Vec::new();
    for (task, teachers) in tasks {
        let per_seed = seeds
            .par_iter()
            .map(|&s| run_seed(cfg, task, teachers, &specs, s))
            .collect::<Result<Vec<_>>>()?;
        let accuracy = (0..specs.len())
            .map(|r| per_seed.iter().map(|row| row[r]).collect())
            .collect();
        results.push(TaskResults {
            task: task.name.clone(),
            accuracy,
        });
    }
    Ok(AblationReport {
        recipe,
        runs: specs.into_iter().map(|s| s.name).collect(),
        seeds,
        tasks: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_shapes() {
        assert_eq!(Recipe::Mapping.runs().len(), 3);
        let obj = Recipe::Objectives.runs();
        let trm = obj.iter().find(|r| r.name == "w/o Trm").unwrap();
        let embd_only = Objectives {
            embd: true,
            attn: false,
            hidn: false,
            pred: false,
        };
        assert_eq!(trm.init, Init::General(embd_only));
        assert!(matches!(trm.training, Training::TaskDistill { intermediate, gold_prediction: false, .. } if intermediate == embd_only));
        assert!("tables".parse::<Recipe>().is_err());
    }

    #[test]
    fn report_table() {
        let r = AblationReport {
            recipe: Recipe::Mapping,
            runs: vec!["uniform".into(), "top".into(), "bottom".into()],
            seeds: vec![1, 2],
            tasks: vec![TaskResults {
                task: "toy".into(),
                accuracy: vec![vec![0.5, 1.0], vec![0.25, 0.25], vec![1.0, 1.0]],
            }],
        };
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "variant\ttoy.seed1\ttoy.seed2\ttoy.mean");
        assert_eq!(lines[1], "uniform\t0.5000\t1.0000\t0.7500");
        assert_eq!(r.mean("top", 0), Some(0.25));
    }
}
