//! The whole recipe on the synthetic task: teacher pretraining and
//! fine-tuning, general distillation, augmentation, then both task phases.
//! Takes a couple of minutes in release mode.

use layerdistill::ablation::prepare_teachers;
use layerdistill::augment::{augment_dataset, TeacherSource};
use layerdistill::checkpoint::Stage;
use layerdistill::config::toy;
use layerdistill::distill::Objectives;
use layerdistill::pipeline::{evaluate, general_distill, task_distill, RunLog};
use layerdistill::synthetic::{self, SyntheticConfig, TaskSizes};
use layerdistill::transformer::TransformerModel;

fn main() -> layerdistill::Result<()> {
    let task = synthetic::task("toy", 1, TaskSizes::default(), &SyntheticConfig::default());
    let cfg = toy(task.vocab.len());
    let mut log = RunLog::default();
    let teachers = prepare_teachers(&cfg, &task, &mut log)?;
    println!("teacher dev accuracy {:.3}", teachers.task_dev_accuracy);

    let setup = cfg.distill_setup(Objectives::INTERMEDIATE, cfg.seed)?;
    let student = TransformerModel::new(cfg.student.clone())?;
    let general = general_distill(&teachers.general, student, &task.general, &task.vocab, &cfg.train_config(Stage::General, cfg.seed), &setup, &mut log)?;
    let acc = |m: &TransformerModel| evaluate(m, &task.dev, &task.vocab, 16, 64).map(|x| x.accuracy);
    println!("after general distillation {:.3}", acc(&general.model)?);

    let source = TeacherSource::new(&teachers.general, &task.vocab, &task.glove);
    let augmented = augment_dataset(&task.train, &cfg.augment.with_seed(cfg.seed), &source)?;
    println!("{} training examples augmented to {}", task.train.len(), augmented.len());

    let r = task_distill(
        &teachers.task,
        general.model,
        &augmented,
        &task.dev,
        &task.vocab,
        &cfg.train_config(Stage::TaskIntermediate, cfg.seed),
        &cfg.train_config(Stage::TaskPrediction, cfg.seed),
        &setup,
        &mut log,
    )?;
    println!("after intermediate phase {:.3}", acc(&r.intermediate.model)?);
    println!("after prediction phase {:.3}", acc(&r.prediction.model)?);
    std::fs::write("two_stage_pipeline.metrics.jsonl", log.to_jsonl())?;
    Ok(())
}
