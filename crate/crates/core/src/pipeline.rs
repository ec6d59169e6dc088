//! Teacher preparation, general distillation, two-phase task distillation,
//! hard-label fine-tuning and evaluation.
//!
//! Every stage is a pure function of its inputs and seed. Teachers are only
//! ever borrowed immutably; their behaviors enter the student's loss as
//! constants.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::data::{batch, Batch, Example, Vocab, MASK};
use crate::distill::{model_loss, DistillParams, LossComponents, LossContext, Objectives};
use crate::error::{Error, Result};
use crate::mapping::{LayerMapping, Strategy};
use crate::metrics::Metrics;
use crate::optim::{clip_grad_norm, AdamState, Schedule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{ForwardOptions, Input, TransformerConfig, TransformerModel};

/// Fraction of real tokens masked for MLM training.
pub const MLM_MASK_RATE: f64 = 0.15;

fn default_warmup() -> f64 {
    0.1
}

fn default_clip() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    1.0
}

/// Optimization knobs of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Stops after this many optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl TrainSettings {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64) -> Self {
        TrainSettings {
            epochs,
            batch_size,
            learning_rate,
            warmup_fraction: default_warmup(),
            clip_norm: default_clip(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        Ok(())
    }

    /// Same settings, run for exactly `steps` optimizer steps over
    /// `examples` examples.
    pub fn for_steps(&self, steps: usize, examples: usize) -> Self {
        let per_epoch = examples.div_ceil(self.batch_size).max(1);
        TrainSettings {
            epochs: steps.div_ceil(per_epoch),
            max_steps: Some(steps),
            ..self.clone()
        }
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        let steps = self.epochs * examples.div_ceil(self.batch_size);
        self.max_steps.map_or(steps, |m| steps.min(m))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub settings: TrainSettings,
    pub seed: u64,
    /// Sequence length cap used when batching.
    pub max_len: usize,
}

/// A built-in strategy name or an explicit table `g(0..=M+1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MappingSpec {
    Strategy(Strategy),
    Table(Vec<usize>),
}

impl Default for MappingSpec {
    fn default() -> Self {
        MappingSpec::Strategy(Strategy::Uniform)
    }
}

impl MappingSpec {
    pub fn resolve(&self, student_layers: usize, teacher_layers: usize) -> Result<LayerMapping> {
        match self {
            MappingSpec::Strategy(s) => s.build(student_layers, teacher_layers),
            MappingSpec::Table(t) => LayerMapping::custom(student_layers, teacher_layers, t.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    #[serde(default)]
    pub mapping: MappingSpec,
    /// `λ_0 ..= λ_{M+1}`; all ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub shared_projection: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        DistillSettings {
            mapping: MappingSpec::default(),
            lambda: None,
            temperature: default_temperature(),
            shared_projection: false,
        }
    }
}

/// A validated mapping plus fresh loss parameters for one student/teacher pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSetup {
    pub mapping: LayerMapping,
    pub params: DistillParams,
}

impl DistillSetup {
    pub fn new(
        settings: &DistillSettings,
        student: &TransformerConfig,
        teacher: &TransformerConfig,
        objectives: Objectives,
        seed: u64,
    ) -> Result<Self> {
        check_pair(student, teacher)?;
        let mapping = settings.mapping.resolve(student.num_layers, teacher.num_layers)?;
        let mut params = DistillParams::new(
            student.num_layers,
            student.hidden,
            teacher.hidden,
            settings.shared_projection,
            sub_seed(seed, SALT_PROJECTION),
        );
        if let Some(l) = &settings.lambda {
            params.lambda = l.clone();
        }
        params.temperature = settings.temperature;
        params.objectives = objectives;
        params.validate(&mapping)?;
        Ok(DistillSetup { mapping, params })
    }
}

/// Attention losses compare `[l, l]` maps head by head, so the pair must
/// agree on head count.
pub fn check_pair(student: &TransformerConfig, teacher: &TransformerConfig) -> Result<()> {
    if student.heads != teacher.heads {
        return Err(Error::Config(format!(
            "student has {} heads but teacher {}",
            student.heads, teacher.heads
        )));
    }
    if student.vocab_size != teacher.vocab_size {
        return Err(Error::Config(format!(
            "student vocabulary {} differs from teacher's {}",
            student.vocab_size, teacher.vocab_size
        )));
    }
    Ok(())
}

const SALT_SHUFFLE: u64 = 1;
const SALT_DROPOUT: u64 = 2;
const SALT_MASKING: u64 = 3;
const SALT_PROJECTION: u64 = 4;
pub(crate) const SALT_INIT: u64 = 5;
pub(crate) const SALT_AUGMENT: u64 = 6;

/// An independent seed for a named purpose.
pub fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng.next_u64()
}

/// Loss terms of one distillation step; absent terms were disabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepComponents {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attn: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidn: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred: Option<f64>,
}

impl StepComponents {
    pub fn new(c: &LossComponents, obj: Objectives) -> Self {
        StepComponents {
            embd: obj.embd.then_some(c.embd),
            attn: obj.attn.then(|| c.attn.clone()),
            hidn: obj.hidn.then(|| c.hidn.clone()),
            pred: obj.pred.then_some(c.pred),
        }
    }

    pub fn weighted_total(&self, lambda: &[f64]) -> f64 {
        let m = lambda.len() - 2;
        let zeros = vec![0.0; m];
        LossComponents {
            embd: self.embd.unwrap_or(0.0),
            attn: self.attn.clone().unwrap_or_else(|| zeros.clone()),
            hidn: self.hidn.clone().unwrap_or(zeros),
            pred: self.pred.unwrap_or(0.0),
        }
        .weighted_total(lambda)
    }
}

/// One line of a metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        stage: Stage,
        step: usize,
        lr: f64,
        loss: f64,
        grad_norm: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        components: Option<StepComponents>,
    },
    Epoch {
        stage: Stage,
        epoch: usize,
        train_loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dev: Option<Metrics>,
        best: bool,
    },
}

/// Line-delimited JSON metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "<log>".into(),
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunLog { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn steps(&self, stage: Stage) -> impl Iterator<Item = &LogRecord> {
        self.records
            .iter()
            .filter(move |r| matches!(r, LogRecord::Step { stage: s, .. } if *s == stage))
    }
}

/// A trained model and its headline numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct StageResult {
    pub model: TransformerModel,
    pub metrics: BTreeMap<String, f64>,
    pub steps: usize,
}

struct Trainer {
    stage: Stage,
    state: AdamState,
    schedule: Schedule,
    clip: f64,
    step: usize,
}

impl Trainer {
    fn new<'a>(stage: Stage, params: impl IntoIterator<Item = &'a Tensor>, settings: &TrainSettings, total: usize) -> Self {
        Trainer {
            stage,
            state: AdamState::new(params),
            schedule: Schedule::new(settings.learning_rate, total, settings.warmup_fraction),
            clip: settings.clip_norm,
            step: 0,
        }
    }

    fn diverged(&self, what: impl std::fmt::Display) -> Error {
        Error::Divergence(format!("{} step {}: {what}", self.stage, self.step))
    }

    /// Maps numerical failures inside a step to a divergence error.
    fn guard<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite(_) => self.diverged(e),
            other => other,
        })
    }

    /// Backpropagates `loss`, clips and applies one Adam update.
    fn apply(&mut self, tape: &Tape, loss: Var, vars: &[Var], params: Vec<&mut Tensor>) -> Result<(f64, f64)> {
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(self.diverged(format!("loss is {value}")));
        }
        let mut g = self.guard(tape.backward(loss))?;
        let mut grads: Vec<Tensor> = vars.iter().map(|&v| g.take(v)).collect();
        let norm = clip_grad_norm(&mut grads, self.clip);
        if !norm.is_finite() {
            return Err(self.diverged(format!("gradient norm is {norm}")));
        }
        let lr = self.schedule.rate(self.step);
        self.state.update(params, &grads, lr)?;
        self.step += 1;
        Ok((lr, norm))
    }
}

fn check_len(model: &TransformerModel, max_len: usize) -> Result<()> {
    if max_len > model.config().max_len {
        return Err(Error::Config(format!(
            "data max_len {max_len} exceeds model max_len {}",
            model.config().max_len
        )));
    }
    Ok(())
}

fn require_nonempty(examples: &[Example], what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Empty(format!("{what} has no examples")));
    }
    Ok(())
}

fn epoch_batches(examples: &[Example], vocab: &Vocab, cfg: &TrainConfig, epoch: usize) -> Result<Vec<Batch>> {
    let seed = sub_seed(sub_seed(cfg.seed, SALT_SHUFFLE), epoch as u64);
    batch(examples, vocab, cfg.max_len, cfg.settings.batch_size, Some(seed))
}

fn class_targets(batch: &Batch, num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros([batch.len(), num_classes]);
    for (i, l) in batch.labels.iter().enumerate() {
        let c = l
            .and_then(|l| l.class())
            .ok_or_else(|| Error::Param(format!("example {} has no class label", batch.indices[i])))?;
        if c >= num_classes {
            return Err(Error::Param(format!("label {c} outside {num_classes} classes")));
        }
        t.set(&[i, c], 1.0);
    }
    Ok(t)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Accuracy, Matthews correlation and mean gold cross-entropy.
pub fn evaluate(
    model: &TransformerModel,
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
    batch_size: usize,
) -> Result<Metrics> {
    require_nonempty(examples, "evaluation split")?;
    let c = model.config().num_classes;
    let mut gold = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for b in batch(examples, vocab, max_len, batch_size, None)? {
        let logits = model.infer(&b.tokens, &b.pad_mask)?.logits;
        let targets = class_targets(&b, c)?;
        for (row, t) in logits.rows().zip(targets.rows()) {
            let g = t.iter().position(|&x| x == 1.0).expect("one-hot");
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[g];
            let p = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &z)| if z > row[best] { j } else { best });
            gold.push(g);
            pred.push(p);
        }
    }
    Metrics::from_predictions(c, &gold, &pred, loss / examples.len() as f64)
}

fn better(a: &Metrics, b: &Metrics) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.loss < b.loss)
}

fn dev_metrics_map(m: &Metrics, out: &mut BTreeMap<String, f64>) {
    out.insert("dev_accuracy".into(), m.accuracy);
    out.insert("dev_mcc".into(), m.mcc);
    out.insert("dev_loss".into(), m.loss);
}

/// Tracks the best dev epoch for model selection.
struct Selector {
    best: Option<(Metrics, TransformerModel)>,
}

impl Selector {
    fn offer(&mut self, m: Metrics, model: &TransformerModel) -> bool {
        let take = self.best.as_ref().is_none_or(|(b, _)| better(&m, b));
        if take {
            self.best = Some((m, model.clone()));
        }
        take
    }
}

/// Supervised training on gold class labels with cross-entropy. With a dev
/// split the epoch with the best dev accuracy (ties: lower dev loss) is
/// returned.
pub fn finetune(
    mut model: TransformerModel,
    train: &[Example],
    dev: Option<&[Example]>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageResult> {
    cfg.settings.validate()?;
    check_len(&model, cfg.max_len)?;
    require_nonempty(train, "training set")?;
    let total = cfg.settings.total_steps(train.len());
    let mut trainer = Trainer::new(cfg.stage, model.named_params().into_iter().map(|(_, t)| t), &cfg.settings, total);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_DROPOUT));
    let c = model.config().num_classes;
    let mut selector = Selector { best: None };
    let eval_bs = cfg.settings.batch_size.max(32);
    if let Some(dev) = dev {
        let m = evaluate(&model, dev, vocab, cfg.max_len, eval_bs)?;
        selector.offer(m, &model);
    }
    'epochs: for epoch in 0..cfg.settings.epochs {
        let mut losses = Vec::new();
        for b in epoch_batches(train, vocab, cfg, epoch)? {
            if trainer.step >= total {
                break;
            }
            let targets = class_targets(&b, c)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let acts = trainer.guard(model.forward(
                &mut tape,
                &bound,
                Input {
                    tokens: &b.tokens,
                    pad_mask: &b.pad_mask,
                },
                ForwardOptions {
                    dropout_rng: Some(&mut drop_rng),
                    mlm_logits: false,
                },
            ))?;
            let loss = trainer.guard(tape.cross_entropy_with_targets(&targets, acts.logits, 1.0))?;
            let value = tape.value(loss).item();
            let step = trainer.step;
            let (lr, grad_norm) = trainer.apply(&tape, loss, bound.vars(), model.params_mut())?;
            losses.push(value);
            log.push(LogRecord::Step {
                stage: cfg.stage,
                step,
                lr,
                loss: value,
                grad_norm,
                components: None,
            });
        }
        let dev_m = match dev {
            Some(dev) => Some(evaluate(&model, dev, vocab, cfg.max_len, eval_bs)?),
            None => None,
        };
        let best = dev_m.clone().is_some_and(|m| selector.offer(m, &model));
        log.push(LogRecord::Epoch {
            stage: cfg.stage,
            epoch,
            train_loss: mean(&losses),
            dev: dev_m,
            best,
        });
        if trainer.step >= total {
            break 'epochs;
        }
    }
    let mut metrics = BTreeMap::new();
    if let Some((m, best)) = selector.best {
        dev_metrics_map(&m, &mut metrics);
        model = best;
    }
    Ok(StageResult {
        model,
        metrics,
        steps: trainer.step,
    })
}

/// Masks about 15% of real tokens (at least one per row): 80% become
/// `[MASK]`, 10% a random piece, 10% stay. Returns inputs and one-hot
/// targets `[b, l, V]` that are zero on unmasked positions.
pub fn mask_tokens(b: &Batch, vocab_size: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<u32>>, Tensor) {
    let l = b.seq_len();
    let mut tokens = b.tokens.clone();
    let mut targets = Tensor::zeros([b.len(), l, vocab_size]);
    for (i, row) in tokens.iter_mut().enumerate() {
        // [CLS] and the final [SEP] never count; interior separators are rare
        let real: Vec<usize> = (1..l).filter(|&j| b.pad_mask[i][j] && j + 1 < l && b.pad_mask[i][j + 1]).collect();
        if real.is_empty() {
            continue;
        }
        let mut chosen: Vec<usize> = real.iter().copied().filter(|_| rng.random::<f64>() < MLM_MASK_RATE).collect();
        if chosen.is_empty() {
            chosen.push(real[rng.random_range(0..real.len())]);
        }
        for j in chosen {
            targets.set(&[i, j, row[j] as usize], 1.0);
            let r: f64 = rng.random();
            if r < 0.8 {
                row[j] = MASK;
            } else if r < 0.9 && vocab_size > 5 {
                row[j] = rng.random_range(5..vocab_size as u32);
            }
        }
    }
    (tokens, targets)
}

/// Masked-language-model training on unlabeled text.
pub fn train_mlm(
    mut model: TransformerModel,
    corpus: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageResult> {
    cfg.settings.validate()?;
    check_len(&model, cfg.max_len)?;
    require_nonempty(corpus, "corpus")?;
    if model.mlm.is_none() {
        return Err(Error::Capability("masked-language-model training needs an MLM head".into()));
    }
    let v = model.config().vocab_size;
    let total = cfg.settings.total_steps(corpus.len());
    let mut trainer = Trainer::new(cfg.stage, model.named_params().into_iter().map(|(_, t)| t), &cfg.settings, total);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_DROPOUT));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_MASKING));
    let mut last = Vec::new();
    for epoch in 0..cfg.settings.epochs {
        let mut losses = Vec::new();
        for b in epoch_batches(corpus, vocab, cfg, epoch)? {
            if trainer.step >= total {
                break;
            }
            let (tokens, targets) = mask_tokens(&b, v, &mut mask_rng);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let acts = trainer.guard(model.forward(
                &mut tape,
                &bound,
                Input {
                    tokens: &tokens,
                    pad_mask: &b.pad_mask,
                },
                ForwardOptions {
                    dropout_rng: Some(&mut drop_rng),
                    mlm_logits: true,
                },
            ))?;
            let logits = acts.mlm_logits.expect("mlm head present");
            let loss = trainer.guard(tape.cross_entropy_with_targets(&targets, logits, 1.0))?;
            let value = tape.value(loss).item();
            let step = trainer.step;
            let (lr, grad_norm) = trainer.apply(&tape, loss, bound.vars(), model.params_mut())?;
            losses.push(value);
            log.push(LogRecord::Step {
                stage: cfg.stage,
                step,
                lr,
                loss: value,
                grad_norm,
                components: None,
            });
        }
        log.push(LogRecord::Epoch {
            stage: cfg.stage,
            epoch,
            train_loss: mean(&losses),
            dev: None,
            best: false,
        });
        last = losses;
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("train_loss".into(), mean(&last));
    Ok(StageResult {
        model,
        metrics,
        steps: trainer.step,
    })
}

/// Teacher preparation: MLM pretraining when the stage is
/// [`Stage::TeacherMlm`], supervised fine-tuning otherwise.
pub fn train_teacher(
    model: TransformerModel,
    train: &[Example],
    dev: Option<&[Example]>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<StageResult> {
    match cfg.stage {
        Stage::TeacherMlm => train_mlm(model, train, vocab, cfg, log),
        _ => finetune(model, train, dev, vocab, cfg, log),
    }
}

/// One distillation step's loss on `b`.
fn distill_loss(
    teacher: &TransformerModel,
    student: &TransformerModel,
    setup: &DistillSetup,
    b: &Batch,
    tape: &mut Tape,
    drop_rng: &mut ChaCha8Rng,
) -> Result<(Var, LossComponents, Vec<Var>)> {
    let t_acts = teacher.infer(&b.tokens, &b.pad_mask)?;
    let bound = student.bind(tape, true);
    let proj = setup.params.bind(tape);
    let s_acts = student.forward(
        tape,
        &bound,
        Input {
            tokens: &b.tokens,
            pad_mask: &b.pad_mask,
        },
        ForwardOptions {
            dropout_rng: Some(drop_rng),
            mlm_logits: false,
        },
    )?;
    let ctx = LossContext {
        mapping: &setup.mapping,
        student: &s_acts,
        teacher: &t_acts,
        projections: &proj,
        params: &setup.params,
        pad_mask: &b.pad_mask,
    };
    let (loss, comps) = model_loss(tape, &ctx)?;
    let mut vars = bound.vars().to_vec();
    vars.extend(proj.vars());
    Ok((loss, comps, vars))
}

/// Trains `student` and the projections in `setup` to imitate `teacher`
/// under `setup.params.objectives`. With a dev split the best dev epoch is
/// kept.
pub fn distill(
    teacher: &TransformerModel,
    mut student: TransformerModel,
    data: &[Example],
    dev: Option<&[Example]>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    setup: &DistillSetup,
    log: &mut RunLog,
) -> Result<StageResult> {
    cfg.settings.validate()?;
    check_pair(student.config(), teacher.config())?;
    check_len(&student, cfg.max_len)?;
    check_len(teacher, cfg.max_len)?;
    require_nonempty(data, "distillation set")?;
    setup.mapping.validate()?;
    setup.params.validate(&setup.mapping)?;
    if setup.mapping.student_layers() != student.config().num_layers
        || setup.mapping.teacher_layers() != teacher.config().num_layers
    {
        return Err(Error::Mapping(format!(
            "mapping is for {} → {} layers but models have {} and {}",
            setup.mapping.student_layers(),
            setup.mapping.teacher_layers(),
            student.config().num_layers,
            teacher.config().num_layers
        )));
    }
    let mut setup = setup.clone();
    let total = cfg.settings.total_steps(data.len());
    let tracked: Vec<&Tensor> = student
        .named_params()
        .into_iter()
        .map(|(_, t)| t)
        .chain(setup.params.hidden_proj.iter())
        .chain(std::iter::once(&setup.params.embed_proj))
        .collect();
    let mut trainer = Trainer::new(cfg.stage, tracked, &cfg.settings, total);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_DROPOUT));
    let mut selector = Selector { best: None };
    let eval_bs = cfg.settings.batch_size.max(32);
    if let Some(dev) = dev {
        selector.offer(evaluate(&student, dev, vocab, cfg.max_len, eval_bs)?, &student);
    }
    let obj = setup.params.objectives;
    let mut last = Vec::new();
    for epoch in 0..cfg.settings.epochs {
        let mut losses = Vec::new();
        for b in epoch_batches(data, vocab, cfg, epoch)? {
            if trainer.step >= total {
                break;
            }
            let mut tape = Tape::new();
            let (loss, comps, vars) = trainer.guard(distill_loss(teacher, &student, &setup, &b, &mut tape, &mut drop_rng))?;
            let value = tape.value(loss).item();
            let step = trainer.step;
            let params: Vec<&mut Tensor> = student.params_mut().into_iter().chain(setup.params.params_mut()).collect();
            let (lr, grad_norm) = trainer.apply(&tape, loss, &vars, params)?;
            losses.push(value);
            log.push(LogRecord::Step {
                stage: cfg.stage,
                step,
                lr,
                loss: value,
                grad_norm,
                components: Some(StepComponents::new(&comps, obj)),
            });
        }
        let dev_m = match dev {
            Some(dev) => Some(evaluate(&student, dev, vocab, cfg.max_len, eval_bs)?),
            None => None,
        };
        let best = dev_m.clone().is_some_and(|m| selector.offer(m, &student));
        log.push(LogRecord::Epoch {
            stage: cfg.stage,
            epoch,
            train_loss: mean(&losses),
            dev: dev_m,
            best,
        });
        last = losses;
        if trainer.step >= total {
            break;
        }
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("train_loss".into(), mean(&last));
    if let Some((m, best)) = selector.best {
        dev_metrics_map(&m, &mut metrics);
        student = best;
    }
    Ok(StageResult {
        model: student,
        metrics,
        steps: trainer.step,
    })
}

/// Intermediate-layer distillation from an un-fine-tuned teacher on
/// general text. The prediction term is always off.
pub fn general_distill(
    teacher: &TransformerModel,
    student: TransformerModel,
    corpus: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    setup: &DistillSetup,
    log: &mut RunLog,
) -> Result<StageResult> {
    let mut setup = setup.clone();
    setup.params.objectives.pred = false;
    distill(teacher, student, corpus, None, vocab, cfg, &setup, log)
}

/// Task phase 1: embedding and transformer-layer terms only.
pub fn distill_intermediate(
    teacher: &TransformerModel,
    student: TransformerModel,
    train: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    setup: &DistillSetup,
    log: &mut RunLog,
) -> Result<StageResult> {
    let mut setup = setup.clone();
    setup.params.objectives.pred = false;
    distill(teacher, student, train, None, vocab, cfg, &setup, log)
}

/// Task phase 2: the prediction term only, with dev-based selection. The
/// student must come out of phase 1.
pub fn distill_prediction(
    teacher: &TransformerModel,
    student: TransformerModel,
    student_stage: Stage,
    train: &[Example],
    dev: &[Example],
    vocab: &Vocab,
    cfg: &TrainConfig,
    setup: &DistillSetup,
    log: &mut RunLog,
) -> Result<StageResult> {
    if student_stage != Stage::TaskIntermediate {
        return Err(Error::Lineage(format!(
            "prediction-layer distillation needs a {} student, got {student_stage}",
            Stage::TaskIntermediate
        )));
    }
    let mut setup = setup.clone();
    setup.params.objectives = Objectives::PREDICTION;
    distill(teacher, student, train, Some(dev), vocab, cfg, &setup, log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistillResult {
    pub intermediate: StageResult,
    pub prediction: StageResult,
}

/// Both task phases on the same (usually augmented) training set.
pub fn task_distill(
    teacher: &TransformerModel,
    student: TransformerModel,
    train: &[Example],
    dev: &[Example],
    vocab: &Vocab,
    intermediate: &TrainConfig,
    prediction: &TrainConfig,
    setup: &DistillSetup,
    log: &mut RunLog,
) -> Result<TaskDistillResult> {
    let inter = distill_intermediate(teacher, student, train, vocab, intermediate, setup, log)?;
    let pred = distill_prediction(
        teacher,
        inter.model.clone(),
        Stage::TaskIntermediate,
        train,
        dev,
        vocab,
        prediction,
        setup,
        log,
    )?;
    Ok(TaskDistillResult {
        intermediate: inter,
        prediction: pred,
    })
}
