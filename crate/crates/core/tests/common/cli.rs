use std::fs;
use std::path::{Path, PathBuf};

use layerdistill::cli::main_with_args;
use layerdistill::config::toy;
use layerdistill::pipeline::TrainSettings;
use layerdistill::synthetic::{self, SyntheticConfig, TaskSizes};

/// Writes a tiny synthetic task and experiment file; returns the file.
pub fn setup(dir: &Path) -> PathBuf {
    let sizes = TaskSizes {
        general: 96,
        teacher_train: 64,
        train: 16,
        dev: 32,
    };
    let task = synthetic::task("toy", 1, sizes, &SyntheticConfig::default());
    synthetic::write_task(&task, dir).unwrap();
    let mut cfg = toy(task.vocab.len());
    cfg.data = synthetic::task_data_config(16);
    for s in [
        &mut cfg.teacher_mlm,
        &mut cfg.teacher_finetune,
        &mut cfg.general_distill,
        &mut cfg.task_intermediate,
        &mut cfg.task_prediction,
        &mut cfg.finetune,
    ] {
        *s = TrainSettings::new(1, 16, 2e-3);
    }
    cfg.augment.n_a = 2;
    cfg.ablation.seeds = vec![1];
    let path = dir.join("experiment.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

pub fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["layerdistill"];
    argv.extend_from_slice(args);
    main_with_args(argv)
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn pipeline(cfg: &Path, out: &Path) {
    let (c, o) = (s(cfg), s(out));
    let p = |n: &str| out.join(n).to_string_lossy().into_owned();
    assert_eq!(run(&["--config", c, "--out-dir", o, "train-teacher"]), 0);
    assert_eq!(run(&["--config", c, "--out-dir", o, "general-distill", "--teacher", &p("teacher-mlm")]), 0);
    assert_eq!(
        run(&["--config", c, "--out-dir", o, "augment", "--in", s(&cfg.with_file_name("train.tsv")), "--out", "train.aug.tsv", "--teacher", &p("teacher-mlm")]),
        0
    );
    assert_eq!(
        run(&["--config", c, "--out-dir", o, "task-distill", "--teacher", &p("teacher"), "--student", &p("general"), "--train", &p("train.aug.tsv")]),
        0
    );
    assert_eq!(run(&["--config", c, "--out-dir", o, "evaluate", "--split", "dev"]), 0);
}

/// Every metric log and checkpoint file under `dir`, relative path first.
pub fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if path.is_dir() {
            for f in ["manifest.txt", "weights.bin"] {
                out.push((format!("{name}/{f}"), fs::read(path.join(f)).unwrap()));
            }
        } else if name.ends_with(".jsonl") || name.ends_with(".tsv") || name.starts_with("eval-") {
            out.push((name, fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}
