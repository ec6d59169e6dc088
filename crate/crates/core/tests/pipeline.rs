mod common;

use std::path::PathBuf;

use layerdistill::ablation::{run_ablation, Recipe, TaskData, Teachers};
use layerdistill::augment::{load_glove, mlm_candidates, parse_glove, EmbeddingStore};
use layerdistill::checkpoint::{self, Stage};
use layerdistill::config::{toy, ExperimentConfig};
use layerdistill::data::{load_tsv, normalize_words, Example, Split, Vocab, CLS, MASK, SEP};
use layerdistill::distill::Objectives;
use layerdistill::metrics::Confusion;
use layerdistill::pipeline::{
    distill, distill_intermediate, distill_prediction, evaluate, finetune, general_distill, train_mlm, LogRecord,
    RunLog, TrainConfig, TrainSettings,
};
use layerdistill::synthetic::{self, Rule, SyntheticConfig, TaskSizes};
use layerdistill::transformer::{TransformerConfig, TransformerModel};
use layerdistill::Error;

fn teacher_config(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: 4,
        hidden: 16,
        ffn: 32,
        heads: 2,
        vocab_size: vocab,
        max_len: 16,
        num_classes: 2,
        dropout: 0.0,
        mlm_head: true,
        seed: 3,
    }
}

fn student_config(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: 2,
        hidden: 8,
        ffn: 16,
        mlm_head: false,
        seed: 4,
        ..teacher_config(vocab)
    }
}

fn train_cfg(stage: Stage, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        stage,
        settings: TrainSettings::new(epochs, 16, lr),
        seed: 9,
        max_len: 16,
    }
}

/// A small experiment over the synthetic vocabulary.
fn small_experiment() -> ExperimentConfig {
    let v = synthetic::vocab();
    let mut cfg = toy(v.len());
    cfg.teacher = teacher_config(v.len());
    cfg.student = student_config(v.len());
    cfg
}

fn corpus(n: usize, seed: u64) -> Vec<Example> {
    synthetic::unlabeled(n, seed, &SyntheticConfig::default())
}

fn params_of(m: &TransformerModel) -> Vec<u64> {
    m.named_params()
        .into_iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn step_records(log: &RunLog, stage: Stage) -> Vec<(f64, layerdistill::pipeline::StepComponents)> {
    log.steps(stage)
        .map(|r| match r {
            LogRecord::Step { loss, components, .. } => (*loss, components.clone().expect("distillation logs components")),
            _ => unreachable!(),
        })
        .collect()
}

#[test]
fn teacher_learns_a_bag_of_words_rule() {
    let cfg = SyntheticConfig {
        rule: Rule::BagOfWords,
        ..Default::default()
    };
    let v = synthetic::vocab();
    let train = synthetic::examples(600, 1, Split::Train, &cfg);
    let dev = synthetic::examples(200, 2, Split::Dev, &cfg);
    let mut tc = teacher_config(v.len());
    tc.num_layers = 2;
    let model = TransformerModel::new(tc).unwrap();
    let r = finetune(model, &train, Some(&dev), &v, &train_cfg(Stage::TeacherFinetune, 8, 3e-3), &mut RunLog::default()).unwrap();
    let acc = r.metrics["dev_accuracy"];
    assert!(acc >= 0.95, "dev accuracy {acc}");
    assert_eq!(evaluate(&r.model, &dev, &v, 16, 64).unwrap().accuracy, acc);
}

#[test]
fn polarity_file_is_learnable() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data/polarity.tsv");
    let data = load_tsv(&path, Split::Train).unwrap();
    assert_eq!(data.len(), 80);
    let v = Vocab::from_corpus(data.iter().map(|e| e.text_a.as_str()), 200);
    let mut tc = teacher_config(v.len());
    tc.num_layers = 2;
    let model = TransformerModel::new(tc).unwrap();
    let r = finetune(model, &data, Some(&data), &v, &train_cfg(Stage::TeacherFinetune, 30, 3e-3), &mut RunLog::default()).unwrap();
    assert!(r.metrics["dev_accuracy"] >= 0.9, "{:?}", r.metrics);
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let v = synthetic::vocab();
    let model = TransformerModel::new(teacher_config(v.len())).unwrap();
    let data = synthetic::examples(20, 1, Split::Train, &SyntheticConfig::default());
    let mut log = RunLog::default();
    let r = finetune(model.clone(), &data, None, &v, &train_cfg(Stage::TeacherFinetune, 0, 1e-3), &mut log).unwrap();
    assert_eq!(r.model, model);
    assert_eq!(r.steps, 0);
    let r = train_mlm(model.clone(), &data, &v, &train_cfg(Stage::TeacherMlm, 0, 1e-3), &mut log).unwrap();
    assert_eq!(r.model, model);
}

#[test]
fn training_is_deterministic_per_seed() {
    let v = synthetic::vocab();
    let data = synthetic::examples(64, 1, Split::Train, &SyntheticConfig::default());
    let run = |seed| {
        let model = TransformerModel::new(teacher_config(v.len())).unwrap();
        let mut cfg = train_cfg(Stage::TeacherMlm, 2, 1e-3);
        cfg.seed = seed;
        let mut log = RunLog::default();
        let r = train_mlm(model, &data, &v, &cfg, &mut log).unwrap();
        (r.metrics["train_loss"], log.to_jsonl())
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(la, lb);
    assert_ne!(run(2).1, la);
}

#[test]
fn mlm_head_is_required() {
    let v = synthetic::vocab();
    let model = TransformerModel::new(student_config(v.len())).unwrap();
    let data = corpus(8, 1);
    let e = train_mlm(model.clone(), &data, &v, &train_cfg(Stage::TeacherMlm, 1, 1e-3), &mut RunLog::default()).unwrap_err();
    assert!(matches!(e, Error::Capability(_)), "{e}");
    let e = mlm_candidates(&model, &v, &[CLS, 5, MASK, SEP], 2, 3).unwrap_err();
    assert!(matches!(e, Error::Capability(_)), "{e}");
}

#[test]
fn overfit_mlm_ranks_the_true_word() {
    let sentences = ["the plot was very good", "a cast of dark music"];
    let v = synthetic::vocab();
    let data: Vec<Example> = (0..64).map(|i| Example::single(sentences[i % 2], None)).collect();
    let model = TransformerModel::new(teacher_config(v.len())).unwrap();
    let r = train_mlm(model, &data, &v, &train_cfg(Stage::TeacherMlm, 60, 5e-3), &mut RunLog::default()).unwrap();
    for s in sentences {
        let words = normalize_words(s);
        for i in 0..words.len() {
            let mut ids = vec![CLS];
            ids.extend(v.encode_words(&words));
            ids.push(SEP);
            ids[i + 1] = MASK;
            let top = mlm_candidates(&r.model, &v, &ids, i + 1, 5).unwrap();
            assert!(top.contains(&words[i]), "{s:?} @ {i}: {top:?}");
            assert_eq!(top, mlm_candidates(&r.model, &v, &ids, i + 1, 5).unwrap());
            let all = mlm_candidates(&r.model, &v, &ids, i + 1, v.len()).unwrap();
            assert!(all.iter().all(|w| !w.starts_with('[') && !w.starts_with("##")));
        }
    }
}

#[test]
fn neighbor_fixtures() {
    let mut s = EmbeddingStore::new(2);
    s.insert("a", &[1.0, 0.0]).unwrap();
    s.insert("b", &[1.0, 0.0]).unwrap();
    s.insert("c", &[0.0, 1.0]).unwrap();
    assert_eq!(s.neighbors("a", 1), vec!["b"]);
    assert_eq!(s.neighbors("A", 10), vec!["b", "c"]);
    assert!(s.neighbors("zzz", 3).is_empty());

    let text = "x 0.5 1\ny -1 2.25\nz 3 4\n";
    assert_eq!(parse_glove(text, "mem", None).unwrap().len(), 3);
    assert_eq!(parse_glove(text, "mem", Some(1)).unwrap().len(), 1);
    let e = parse_glove("x 1 2\ny 1\n", "mem", None).unwrap_err();
    assert!(e.to_string().contains(":2"), "{e}");
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("g.txt"), text).unwrap();
    assert_eq!(load_glove(dir.path().join("g.txt"), None).unwrap().get("Y").unwrap(), &[-1.0, 2.25]);
}

#[test]
fn metric_fixtures() {
    assert_eq!(Confusion::from_pairs(2, &[0, 1, 1], &[0, 1, 1]).accuracy(), 1.0);
    assert_eq!(Confusion::from_pairs(2, &[0, 1, 0, 1], &[1, 1, 1, 1]).mcc(), 0.0);
    assert_eq!(Confusion::from_pairs(2, &[1, 0, 0, 1], &[1, 0, 1, 0]).mcc(), 0.0);
    let v = synthetic::vocab();
    let model = TransformerModel::new(student_config(v.len())).unwrap();
    assert!(matches!(evaluate(&model, &[], &v, 16, 8), Err(Error::Empty(_))));
}

struct Distilled {
    teacher: TransformerModel,
    before: Vec<u64>,
    log: RunLog,
    result: layerdistill::pipeline::StageResult,
    lambda: Vec<f64>,
}

fn general_run(lambda: Option<Vec<f64>>) -> Distilled {
    let mut cfg = small_experiment();
    cfg.distill.lambda = lambda;
    let v = synthetic::vocab();
    let teacher = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let before = params_of(&teacher);
    let student = TransformerModel::new(cfg.student.clone()).unwrap();
    let setup = cfg.distill_setup(Objectives::ALL, 5).unwrap();
    let mut log = RunLog::default();
    let result = general_distill(&teacher, student, &corpus(480, 3), &v, &train_cfg(Stage::General, 2, 5e-3), &setup, &mut log).unwrap();
    Distilled {
        teacher,
        before,
        log,
        result,
        lambda: setup.params.lambda,
    }
}

#[test]
fn general_distillation_reduces_every_intermediate_loss() {
    let d = general_run(None);
    assert_eq!(params_of(&d.teacher), d.before, "teacher must not move");
    let steps = step_records(&d.log, Stage::General);
    assert_eq!(steps.len(), 60);
    let avg = |range: &[(f64, layerdistill::pipeline::StepComponents)], f: &dyn Fn(&layerdistill::pipeline::StepComponents) -> f64| {
        range.iter().map(|(_, c)| f(c)).sum::<f64>() / range.len() as f64
    };
    let (first, last) = (&steps[..10], &steps[steps.len() - 10..]);
    let mut terms: Vec<(String, Box<dyn Fn(&layerdistill::pipeline::StepComponents) -> f64>)> =
        vec![("embd".into(), Box::new(|c| c.embd.unwrap()))];
    for m in 0..2 {
        terms.push((format!("attn{m}"), Box::new(move |c| c.attn.as_ref().unwrap()[m])));
        terms.push((format!("hidn{m}"), Box::new(move |c| c.hidn.as_ref().unwrap()[m])));
    }
    for (name, f) in &terms {
        let (a, b) = (avg(first, f.as_ref()), avg(last, f.as_ref()));
        assert!(b < a, "{name}: first {a} last {b}");
    }
    for (loss, c) in &steps {
        assert!(c.pred.is_none(), "prediction term must be absent");
        assert!((c.weighted_total(&d.lambda) - loss).abs() < 1e-9);
    }
    assert!(!d.log.to_jsonl().contains("\"pred\""));
}

#[test]
fn logged_total_decomposes_under_random_lambda() {
    let lambda = vec![0.3, 1.7, 0.05, 2.0];
    let d = general_run(Some(lambda.clone()));
    for (loss, c) in step_records(&d.log, Stage::General) {
        assert!((c.weighted_total(&lambda) - loss).abs() < 1e-9);
    }
}

#[test]
fn zero_lambda_leaves_parameters_unchanged() {
    let cfg = small_experiment();
    let d = general_run(Some(vec![0.0; 4]));
    let fresh = TransformerModel::new(cfg.student.clone()).unwrap();
    assert_eq!(params_of(&d.result.model), params_of(&fresh));
}

#[test]
fn prediction_phase_needs_an_intermediate_student() {
    let cfg = small_experiment();
    let v = synthetic::vocab();
    let teacher = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let student = TransformerModel::new(cfg.student.clone()).unwrap();
    let data = synthetic::examples(16, 1, Split::Train, &SyntheticConfig::default());
    let setup = cfg.distill_setup(Objectives::INTERMEDIATE, 1).unwrap();
    for stage in [Stage::Init, Stage::General, Stage::TaskPrediction] {
        let e = distill_prediction(&teacher, student.clone(), stage, &data, &data, &v, &train_cfg(Stage::TaskPrediction, 1, 1e-3), &setup, &mut RunLog::default())
            .unwrap_err();
        assert!(matches!(e, Error::Lineage(_)), "{e}");
    }
    let inter = distill_intermediate(&teacher, student, &data, &v, &train_cfg(Stage::TaskIntermediate, 1, 1e-3), &setup, &mut RunLog::default()).unwrap();
    let mut log = RunLog::default();
    distill_prediction(&teacher, inter.model, Stage::TaskIntermediate, &data, &data, &v, &train_cfg(Stage::TaskPrediction, 1, 1e-3), &setup, &mut log).unwrap();
    for (_, c) in step_records(&log, Stage::TaskPrediction) {
        assert!(c.embd.is_none() && c.attn.is_none() && c.hidn.is_none() && c.pred.is_some());
    }
}

#[test]
fn prediction_phase_is_stationary_when_logits_match() {
    let v = synthetic::vocab();
    let mut cfg = small_experiment();
    cfg.student = cfg.teacher.clone();
    let data = synthetic::examples(96, 1, Split::Train, &SyntheticConfig::default());
    let dev = synthetic::examples(64, 2, Split::Dev, &SyntheticConfig::default());
    let init = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let model = finetune(init, &data, None, &v, &train_cfg(Stage::TeacherFinetune, 4, 3e-3), &mut RunLog::default())
        .unwrap()
        .model;
    let mut setup = cfg.distill_setup(Objectives::PREDICTION, 1).unwrap();
    setup.params.objectives = Objectives::PREDICTION;
    let before = evaluate(&model, &dev, &v, 16, 64).unwrap();
    let mut log = RunLog::default();
    let r = distill(&model, model.clone(), &data, None, &v, &train_cfg(Stage::TaskPrediction, 2, 1e-4), &setup, &mut log).unwrap();
    match log.steps(Stage::TaskPrediction).next() {
        Some(LogRecord::Step { grad_norm, .. }) => assert!(*grad_norm < 1e-12, "{grad_norm}"),
        _ => unreachable!(),
    }
    // Adam turns rounding-level gradients into steps of order lr, so the
    // weights jitter by at most lr per step around the optimum
    for ((_, a), (_, b)) in r.model.named_params().into_iter().zip(model.named_params()) {
        assert!(a.max_abs_diff(b) <= 1e-4 * r.steps as f64 * 1.01);
    }
    assert_eq!(evaluate(&r.model, &dev, &v, 16, 64).unwrap().accuracy, before.accuracy);
}

#[test]
fn mismatched_heads_are_rejected() {
    let mut cfg = small_experiment();
    cfg.student.heads = 4;
    assert!(cfg.validate().is_err());
    let v = synthetic::vocab();
    let teacher = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let student = TransformerModel::new(cfg.student.clone()).unwrap();
    let setup = small_experiment().distill_setup(Objectives::ALL, 1).unwrap();
    let e = general_distill(&teacher, student, &corpus(8, 1), &v, &train_cfg(Stage::General, 1, 1e-3), &setup, &mut RunLog::default()).unwrap_err();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn lineage_chain_from_initialization_to_final_student() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment();
    let v = synthetic::vocab();
    let teacher = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let init = TransformerModel::new(cfg.student.clone()).unwrap();
    let data = synthetic::examples(32, 1, Split::Train, &SyntheticConfig::default());
    let setup = cfg.distill_setup(Objectives::INTERMEDIATE, 1).unwrap();
    let mut log = RunLog::default();
    let empty = Default::default();
    let p = |n: &str| dir.path().join(n);
    let root = checkpoint::save(p("init"), &init, Stage::Init, None, &empty).unwrap();
    let g = general_distill(&teacher, init, &data, &v, &train_cfg(Stage::General, 1, 1e-3), &setup, &mut log).unwrap();
    let gi = checkpoint::save(p("general"), &g.model, Stage::General, Some(&root.lineage), &g.metrics).unwrap();
    let i = distill_intermediate(&teacher, g.model, &data, &v, &train_cfg(Stage::TaskIntermediate, 1, 1e-3), &setup, &mut log).unwrap();
    let ii = checkpoint::save(p("inter"), &i.model, Stage::TaskIntermediate, Some(&gi.lineage), &i.metrics).unwrap();
    let f = distill_prediction(&teacher, i.model, ii.stage, &data, &data, &v, &train_cfg(Stage::TaskPrediction, 1, 1e-3), &setup, &mut log).unwrap();
    checkpoint::save(p("final"), &f.model, Stage::TaskPrediction, Some(&ii.lineage), &f.metrics).unwrap();
    let chain = checkpoint::verify_chain(&[p("final"), p("inter"), p("general"), p("init")]).unwrap();
    assert_eq!(chain.len(), 4);
    assert!(checkpoint::verify_chain(&[p("final"), p("general"), p("init")]).is_err());

    // a flipped byte in the blob is reported with its tensor's offset
    let blob = p("inter").join(checkpoint::WEIGHTS);
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let e = checkpoint::inspect(p("inter")).unwrap_err();
    assert!(matches!(e, Error::Checkpoint { .. }), "{e}");
    assert!(checkpoint::verify_chain(&[p("final"), p("inter"), p("general"), p("init")]).is_err());
}

fn tiny_task() -> (ExperimentConfig, TaskData, Teachers) {
    let mut cfg = small_experiment();
    for s in [&mut cfg.general_distill, &mut cfg.task_intermediate, &mut cfg.task_prediction, &mut cfg.finetune] {
        *s = TrainSettings::new(1, 16, 2e-3);
    }
    cfg.augment.n_a = 1;
    cfg.ablation.seeds = vec![1, 2];
    let sizes = TaskSizes {
        general: 64,
        teacher_train: 32,
        train: 16,
        dev: 16,
    };
    let task = synthetic::task("tiny", 3, sizes, &SyntheticConfig::default());
    let teacher = TransformerModel::new(cfg.teacher.clone()).unwrap();
    let teachers = Teachers {
        general: teacher.clone(),
        task: teacher,
        task_dev_accuracy: 0.5,
    };
    (cfg, task, teachers)
}

#[test]
fn ablation_reports_are_shaped_and_reproducible() {
    let (cfg, task, teachers) = tiny_task();
    let tasks = [(task, teachers)];
    let mapping = run_ablation(Recipe::Mapping, &cfg, &tasks).unwrap();
    let tsv = mapping.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "variant\ttiny.seed1\ttiny.seed2\ttiny.mean");
    assert_eq!(mapping.runs, vec!["uniform", "top", "bottom"]);
    assert_eq!(run_ablation(Recipe::Mapping, &cfg, &tasks).unwrap().to_tsv(), tsv);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let threaded = pool.install(|| run_ablation(Recipe::Mapping, &cfg, &tasks).unwrap());
    assert_eq!(threaded.to_tsv(), tsv);
    let procedures = run_ablation(Recipe::Procedures, &cfg, &tasks).unwrap();
    assert_eq!(procedures.runs, vec!["full", "w/o GD", "w/o TD", "w/o DA", "scratch"]);
    assert!(procedures.tasks[0].accuracy.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
}
