//! Runs one ablation recipe on the synthetic task and prints the TSV report.
//!
//!     cargo run --release --example ablation_report -- procedures 2

use layerdistill::ablation::{prepare_teachers, run_ablation, Recipe};
use layerdistill::config::toy;
use layerdistill::pipeline::RunLog;
use layerdistill::synthetic::{self, SyntheticConfig, TaskSizes};

fn main() -> layerdistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let recipe: Recipe = args.next().unwrap_or_else(|| "mapping".into()).parse()?;
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let task = synthetic::task("toy", 1, TaskSizes::default(), &SyntheticConfig::default());
    let mut cfg = toy(task.vocab.len());
    cfg.ablation.seeds = (1..=seeds).collect();
    let teachers = prepare_teachers(&cfg, &task, &mut RunLog::default())?;
    eprintln!("teacher dev accuracy {:.3}", teachers.task_dev_accuracy);
    let report = run_ablation(recipe, &cfg, &[(task, teachers)])?;
    print!("{}", report.to_tsv());
    Ok(())
}
