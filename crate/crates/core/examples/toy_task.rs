//! Writes the synthetic task and a matching experiment file to a directory,
//! ready for the `layerdistill` binary.
//!
//!     cargo run --release --example toy_task -- runs/toy [--small]

use layerdistill::config::toy;
use layerdistill::synthetic::{self, SyntheticConfig, TaskSizes};

fn main() -> layerdistill::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = args.first().map_or("runs/toy", String::as_str);
    let small = args.iter().any(|a| a == "--small");
    let sizes = if small {
        TaskSizes { general: 300, teacher_train: 200, train: 40, dev: 60 }
    } else {
        TaskSizes::default()
    };
    let task = synthetic::task("toy", 1, sizes, &SyntheticConfig::default());
    synthetic::write_task(&task, dir)?;

    let mut cfg = toy(task.vocab.len());
    cfg.data = synthetic::task_data_config(16);
    if small {
        for s in [&mut cfg.teacher_mlm, &mut cfg.teacher_finetune, &mut cfg.finetune] {
            s.epochs = 2;
        }
        cfg.augment.n_a = 2;
        cfg.ablation.seeds = vec![1, 2];
    }
    std::fs::write(format!("{dir}/experiment.toml"), cfg.to_toml())?;
    println!("wrote {dir}/experiment.toml");
    Ok(())
}
