//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line to stderr.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use layerdistill::ablation::{prepare_teachers, run_seed, Init, Recipe, RunSpec, TaskData, Teachers, Training};
use layerdistill::augment::{augment_dataset, augment_example, AugmentConfig, ReplacementSource};
use layerdistill::checkpoint::Stage;
use layerdistill::config::toy;
use layerdistill::data::{format_tsv, Example, Label, Split};
use layerdistill::distill::{attn_loss, embd_loss, hidn_loss, layer_loss, model_loss, pred_loss, DistillParams, LossContext, Objectives};
use layerdistill::mapping::{LayerMapping, Strategy};
use layerdistill::pipeline::{distill, finetune, LogRecord, RunLog, TrainConfig, TrainSettings};
use layerdistill::synthetic::{self, SyntheticConfig, TaskSizes};
use layerdistill::transformer::{attention_scores, ForwardOptions, Input, ModelActivations, TapeActivations, TransformerModel};
use layerdistill::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, ok: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

/// Runs `body` and reports its panic message, if any, as a failure.
fn criterion(n: usize, body: impl FnOnce() -> String + std::panic::UnwindSafe) {
    let start = Instant::now();
    match std::panic::catch_unwind(body) {
        Ok(detail) => report(n, true, format!("({detail}; {:.1}s)", start.elapsed().as_secs_f64())),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(n, false, format!("({msg})"));
        }
    }
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random_tensor(&mut rng(seed.wrapping_mul(31) + 7), &shape, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

/// Coordinate `i` of the `k`-th trainable tensor, student weights first.
fn slot<'a>(s: &'a mut TransformerModel, p: &'a mut DistillParams, k: usize, i: usize) -> &'a mut f64 {
    let n = s.named_params().len();
    let t = if k < n { s.params_mut().swap_remove(k) } else { p.params_mut().swap_remove(k - n) };
    &mut t.data_mut()[i]
}

fn composed_fd_worst(seed: u64) -> (f64, usize) {
    const H: f64 = 1e-5;
    let mut r = rng(seed);
    let mut student = TransformerModel::new(tiny_config(2, 8, seed)).unwrap();
    let teacher = TransformerModel::new(tiny_config(4, 12, seed + 100)).unwrap();
    let mut params = DistillParams::new(2, 8, 12, false, seed);
    params.lambda = (0..4).map(|_| r.random_range(0.2..2.0)).collect();
    params.temperature = r.random_range(0.5..2.0);
    let mapping = LayerMapping::uniform(2, 4).unwrap();
    let mut mask = random_pad_mask(&mut r, 2, 6);
    mask[0] = vec![true; 6];
    let tokens = random_tokens(&mut r, &mask, 11);
    let t_acts = teacher.infer(&tokens, &mask).unwrap();
    let loss = |student: &TransformerModel, params: &DistillParams, tape: &mut Tape| -> (Var, Vec<Var>) {
        let bound = student.bind(tape, true);
        let acts = student
            .forward(tape, &bound, Input { tokens: &tokens, pad_mask: &mask }, ForwardOptions::default())
            .unwrap();
        let proj = params.bind(tape);
        let ctx = LossContext {
            mapping: &mapping,
            student: &acts,
            teacher: &t_acts,
            projections: &proj,
            params,
            pad_mask: &mask,
        };
        let (l, _) = model_loss(tape, &ctx).unwrap();
        (l, bound.vars().iter().copied().chain(proj.vars()).collect())
    };
    let mut tape = Tape::new();
    let (l, vars) = loss(&student, &params, &mut tape);
    let grads = tape.backward(l).unwrap();
    let (mut worst, mut checked) = (0.0f64, 0);
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for _ in 0..4.min(analytic.numel()) {
            let i = r.random_range(0..analytic.numel());
            let orig = *slot(&mut student, &mut params, k, i);
            let mut value_at = |x: f64| {
                *slot(&mut student, &mut params, k, i) = x;
                let mut t = Tape::new();
                let (l, _) = loss(&student, &params, &mut t);
                t.value(l).item()
            };
            let numeric = (value_at(orig + H) - value_at(orig - H)) / (2.0 * H);
            value_at(orig);
            let a = analytic.data()[i];
            checked += 1;
            let diff = (a - numeric).abs();
            if diff > 1e-8 {
                worst = worst.max(diff / a.abs().max(numeric.abs()));
            }
        }
    }
    (worst, checked)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    criterion(1, || {
        const RTOL: f64 = 1e-3;
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut r = rng(seed);
            let (b, p, q) = (r.random_range(1..4), r.random_range(1..5), r.random_range(2..6));
            let a = random_tensor(&mut r, &[b, p, q], 2.0).map(|z| if z.abs() < 0.05 { z + 0.1 } else { z });
            let c = random_tensor(&mut r, &[b, q, p], 1.0);
            let gain = random_tensor(&mut r, &[q], 1.5);
            let bias = random_tensor(&mut r, &[q], 0.5);
            let rows = [a.clone().reshape([b * p, q]).unwrap(), random_tensor(&mut r, &[b * p, q], 1.0)];
            let mask = Tensor::new(vec![b, p, q], (0..b * p * q).map(|_| r.random_range(0..2) as f64).collect()).unwrap();
            let mut target = Tensor::zeros([b * p, q]);
            for row in 0..b * p {
                target.set(&[row, r.random_range(0..q)], 1.0);
            }
            let temp = r.random_range(0.5..3.0);
            let teacher = rows[0].clone();
            let drop_seed = r.random::<u64>();
            let unary: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
                ("relu", Box::new(|t: &mut Tape, x| t.relu(x))),
                ("softmax_rows", Box::new(|t: &mut Tape, x| t.softmax_rows(x))),
                ("log_softmax_rows", Box::new(|t: &mut Tape, x| t.log_softmax_rows(x))),
                ("transpose_last", Box::new(|t: &mut Tape, x| t.transpose_last(x))),
                ("slice_last", Box::new(|t: &mut Tape, x| t.slice_last(x, 1, 1))),
                ("scale", Box::new(|t: &mut Tape, x| t.scale(x, -1.7))),
                ("select_axis1", Box::new(|t: &mut Tape, x| t.select_axis1(x, 0))),
                (
                    "dropout",
                    Box::new(move |t: &mut Tape, x| t.dropout(x, 0.3, &mut ChaCha8Rng::seed_from_u64(drop_seed))),
                ),
            ];
            for (name, op) in &unary {
                worst = worst.max(check_gradients(name, &[a.clone()], |t, v| { let o = op(t, v[0])?; project(t, o, seed) }, RTOL, 64, seed));
            }
            let pair = [a.clone(), random_tensor(&mut r, &[b, p, q], 1.0)];
            worst = worst.max(check_gradients("add", &pair, |t, v| { let o = t.add(v[0], v[1])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("sub", &pair, |t, v| { let o = t.sub(v[0], v[1])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("mul", &pair, |t, v| { let o = t.mul(v[0], v[1])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("concat_last", &pair, |t, v| { let o = t.concat_last(&[v[0], v[1]])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("stack_axis1", &pair, |t, v| { let o = t.stack_axis1(&[v[0], v[1]])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("mse", &pair, |t, v| t.mse(v[0], v[1]), RTOL, 64, seed));
            worst = worst.max(check_gradients("masked_mse", &pair, |t, v| t.masked_mse(v[0], v[1], &mask), RTOL, 64, seed));
            worst = worst.max(check_gradients("sum", &pair[..1], |t, v| t.sum(v[0]), RTOL, 64, seed));
            worst = worst.max(check_gradients("mean", &pair[..1], |t, v| t.mean(v[0]), RTOL, 64, seed));
            worst = worst.max(check_gradients("reshape", &pair[..1], |t, v| { let o = t.reshape(v[0], [b * p * q])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients("matmul", &[a.clone(), c.clone()], |t, v| { let o = t.matmul(v[0], v[1])?; project(t, o, seed) }, RTOL, 64, seed));
            let table = random_tensor(&mut r, &[5, q], 1.0);
            worst = worst.max(check_gradients("gather_rows", &[table], |t, v| { let o = t.gather_rows(v[0], &[4, 0, 4, 2])?; project(t, o, seed) }, RTOL, 64, seed));
            worst = worst.max(check_gradients(
                "layer_norm",
                &[a.clone(), gain, bias],
                |t, v| { let o = t.layer_norm(v[0], v[1], v[2], 1e-12)?; project(t, o, seed) },
                RTOL,
                64,
                seed,
            ));
            worst = worst.max(check_gradients(
                "soft_cross_entropy",
                &rows[1..],
                |t, v| { let z = t.constant(teacher.clone()); t.soft_cross_entropy(z, v[0], temp) },
                RTOL,
                64,
                seed,
            ));
            worst = worst.max(check_gradients("cross_entropy", &rows[1..], |t, v| t.cross_entropy_with_targets(&target, v[0], temp), RTOL, 64, seed));
            let qk = [random_tensor(&mut r, &[b, 2, 4, 3], 1.0), random_tensor(&mut r, &[b, 2, 4, 3], 1.0)];
            worst = worst.max(check_gradients("attention_scores", &qk, |t, v| { let o = attention_scores(t, v[0], v[1], 3)?; project(t, o, seed) }, RTOL, 64, seed));
        }
        let mut checked = 0;
        for seed in 0..20 {
            let (w, n) = composed_fd_worst(seed);
            assert!(w <= RTOL, "model_loss seed {seed}: relative error {w:e}");
            worst = worst.max(w);
            checked += n;
        }
        format!("worst relative error {worst:.1e}; {checked} model_loss coordinates over 20 seeds")
    });
}

fn oracle_attn(s: &Tensor, t: &Tensor, mask: &[Vec<bool>]) -> f64 {
    let [b, h, l, _] = s.shape().try_into().unwrap();
    let (mut total, mut count) = (0.0, 0usize);
    for bi in 0..b {
        for hi in 0..h {
            for q in 0..l {
                for k in 0..l {
                    if mask[bi][q] && mask[bi][k] {
                        let d = s.get(&[bi, hi, q, k]) - t.get(&[bi, hi, q, k]);
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    total / count as f64
}

fn oracle_projected(s: &Tensor, w: &Tensor, t: &Tensor, mask: &[Vec<bool>]) -> f64 {
    let [b, l, d] = s.shape().try_into().unwrap();
    let dt = t.shape()[2];
    let (mut total, mut count) = (0.0, 0usize);
    for bi in 0..b {
        for li in 0..l {
            if !mask[bi][li] {
                continue;
            }
            for j in 0..dt {
                let proj: f64 = (0..d).map(|i| s.get(&[bi, li, i]) * w.get(&[i, j])).sum();
                let diff = proj - t.get(&[bi, li, j]);
                total += diff * diff;
                count += 1;
            }
        }
    }
    total / count as f64
}

fn oracle_pred(zt: &Tensor, zs: &Tensor, temp: f64) -> f64 {
    let [rows, c] = zt.shape().try_into().unwrap();
    let mut total = 0.0;
    for r in 0..rows {
        let t: Vec<f64> = (0..c).map(|j| zt.get(&[r, j]) / temp).collect();
        let s: Vec<f64> = (0..c).map(|j| zs.get(&[r, j]) / temp).collect();
        let tz: f64 = t.iter().map(|v| v.exp()).sum();
        let sz: f64 = s.iter().map(|v| v.exp()).sum();
        for j in 0..c {
            total -= t[j].exp() / tz * (s[j].exp() / sz).ln();
        }
    }
    total / rows as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

#[test]
fn criterion_2_losses_match_brute_force() {
    criterion(2, || {
        let mut branches = [0usize; 3];
        for i in 0..100u64 {
            let mut r = rng(50_000 + i);
            let (b, h, l) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..7));
            let (ds, dt, c) = (r.random_range(1..6), r.random_range(1..6), r.random_range(2..5));
            let mask = random_pad_mask(&mut r, b, l);

            let (s, t) = (random_tensor(&mut r, &[b, h, l, l], 3.0), random_tensor(&mut r, &[b, h, l, l], 3.0));
            let mut tape = Tape::new();
            let sv = tape.param(s.clone());
            let got = attn_loss(&mut tape, sv, &t, &mask).unwrap();
            assert!(close(tape.value(got).item(), oracle_attn(&s, &t, &mask)), "attn instance {i}");

            let s = random_tensor(&mut r, &[b, l, ds], 2.0);
            let t = random_tensor(&mut r, &[b, l, dt], 2.0);
            let w = random_tensor(&mut r, &[ds, dt], 1.0);
            let want = oracle_projected(&s, &w, &t, &mask);
            let sv = tape.param(s.clone());
            let wv = tape.param(w.clone());
            let hl = hidn_loss(&mut tape, sv, &t, wv, &mask).unwrap();
            let el = embd_loss(&mut tape, sv, &t, wv, &mask).unwrap();
            assert!(close(tape.value(hl).item(), want), "hidn instance {i}");
            assert!(close(tape.value(el).item(), want), "embd instance {i}");

            let rows = r.random_range(1..6);
            let (zt, zs) = (random_tensor(&mut r, &[rows, c], 4.0), random_tensor(&mut r, &[rows, c], 4.0));
            let temp = r.random_range(0.2..5.0);
            let zv = tape.param(zs.clone());
            let pl = pred_loss(&mut tape, &zt, zv, temp).unwrap();
            assert!(close(tape.value(pl).item(), oracle_pred(&zt, &zs, temp)), "pred instance {i}");

            // selector and weighted sum on random activations, mapping and objectives
            let n = r.random_range(1..7);
            let divisors: Vec<usize> = (1..=n).filter(|m| n % m == 0).collect();
            let m = divisors[r.random_range(0..divisors.len())];
            let mapping = Strategy::ALL[r.random_range(0..3)].build(m, n).unwrap();
            let acts = |r: &mut ChaCha8Rng, layers: usize, d: usize| ModelActivations {
                embeddings: random_tensor(r, &[b, l, d], 1.0),
                attentions: (0..layers).map(|_| random_tensor(r, &[b, h, l, l], 2.0)).collect(),
                hiddens: (0..layers).map(|_| random_tensor(r, &[b, l, d], 1.0)).collect(),
                logits: random_tensor(r, &[b, c], 3.0),
            };
            let (sa, ta) = (acts(&mut r, m, ds), acts(&mut r, n, dt));
            let mut params = DistillParams::new(m, ds, dt, r.random_bool(0.3), i);
            for p in params.params_mut() {
                *p = random_tensor(&mut r, p.shape(), 1.0);
            }
            params.lambda = (0..m + 2).map(|_| r.random_range(0.0..3.0)).collect();
            params.temperature = r.random_range(0.5..3.0);
            params.objectives = Objectives {
                embd: r.random_bool(0.7),
                attn: r.random_bool(0.7),
                hidn: r.random_bool(0.7),
                pred: r.random_bool(0.7),
            };
            let mut tape = Tape::new();
            let student = TapeActivations {
                embeddings: tape.param(sa.embeddings.clone()),
                attentions: sa.attentions.iter().map(|t| tape.param(t.clone())).collect(),
                hiddens: sa.hiddens.iter().map(|t| tape.param(t.clone())).collect(),
                logits: tape.param(sa.logits.clone()),
                mlm_logits: None,
            };
            let proj = params.bind(&mut tape);
            let ctx = LossContext {
                mapping: &mapping,
                student: &student,
                teacher: &ta,
                projections: &proj,
                params: &params,
                pad_mask: &mask,
            };
            let obj = params.objectives;
            let w_h = |k: usize| &params.hidden_proj[if params.hidden_proj.len() == 1 { 0 } else { k - 1 }];
            let mut weighted = 0.0;
            for k in 0..=m + 1 {
                let want = if k == 0 {
                    branches[0] += 1;
                    if obj.embd { oracle_projected(&sa.embeddings, &params.embed_proj, &ta.embeddings, &mask) } else { 0.0 }
                } else if k <= m {
                    branches[1] += 1;
                    let g = mapping.target(k).unwrap();
                    let mut v = 0.0;
                    if obj.attn {
                        v += oracle_attn(&sa.attentions[k - 1], &ta.attentions[g - 1], &mask);
                    }
                    if obj.hidn {
                        v += oracle_projected(&sa.hiddens[k - 1], w_h(k), &ta.hiddens[g - 1], &mask);
                    }
                    v
                } else {
                    branches[2] += 1;
                    if obj.pred { oracle_pred(&ta.logits, &sa.logits, params.temperature) } else { 0.0 }
                };
                let ll = layer_loss(&mut tape, k, &ctx).unwrap();
                assert!(close(tape.value(ll.total).item(), want), "selector instance {i} m={k}");
                weighted += params.lambda[k] * want;
            }
            let (total, _) = model_loss(&mut tape, &ctx).unwrap();
            assert!(close(tape.value(total).item(), weighted), "weighted sum instance {i}");
        }
        format!("100 instances per loss within 1e-10; selector branches {branches:?}")
    });
}

#[test]
fn criterion_3_layer_mappings() {
    criterion(3, || {
        let table = |s: Strategy| s.build(4, 12).unwrap().table().to_vec();
        assert_eq!(table(Strategy::Uniform), [0, 3, 6, 9, 12, 13]);
        assert_eq!(table(Strategy::Top), [0, 9, 10, 11, 12, 13]);
        assert_eq!(table(Strategy::Bottom), [0, 1, 2, 3, 4, 13]);
        let mut valid = 0;
        for n in 1..=12 {
            for m in 1..=n {
                for s in Strategy::ALL {
                    match s.build(m, n) {
                        Ok(map) => {
                            map.validate().unwrap();
                            valid += 1;
                        }
                        Err(e) => assert!(s == Strategy::Uniform && n % m != 0, "{s:?}({m},{n}): {e}"),
                    }
                    if s == Strategy::Uniform && n % m != 0 {
                        assert!(s.build(m, n).is_err());
                    }
                }
            }
        }
        format!("{valid} valid mappings for 1<=M<=N<=12")
    });
}

/// Replacement candidates that always differ from the original word.
struct Marked;

impl ReplacementSource for Marked {
    fn is_single_piece(&self, word: &str) -> bool {
        !word.ends_with('3')
    }
    fn mlm_candidates(&self, _: &[String], _: usize, k: usize) -> Result<Vec<String>> {
        Ok((0..k).map(|j| format!("m{j}")).collect())
    }
    fn neighbor_candidates(&self, word: &str, k: usize) -> Vec<String> {
        (0..k.min(4)).map(|j| format!("{word}~{j}")).collect()
    }
}

#[test]
fn criterion_4_augmentation() {
    criterion(4, || {
        let x: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let mut rates = Vec::new();
        for p_t in [0.1, 0.4, 0.9] {
            let cfg = AugmentConfig { p_t, n_a: 1000, k: 15, seed: 0, include_original: false };
            let out = augment_example(&x, &cfg, &Marked, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(out.len(), 1000);
            let changed: usize = out.iter().map(|v| v.iter().zip(&x).filter(|(a, b)| a != b).count()).sum();
            let rate = changed as f64 / (out.len() * x.len()) as f64;
            assert!((rate - p_t).abs() <= 0.02, "p_t {p_t}: rate {rate}");
            rates.push(rate);
        }
        let edge = |p_t| AugmentConfig { p_t, n_a: 20, k: 15, seed: 0, include_original: false };
        let mut r = ChaCha8Rng::seed_from_u64(4);
        assert!(augment_example(&x, &edge(0.0), &Marked, &mut r).unwrap().iter().all(|v| v == &x));
        for v in augment_example(&x, &edge(1.0), &Marked, &mut r).unwrap() {
            assert!(v.iter().zip(&x).all(|(a, b)| a != b));
        }

        let data: Vec<Example> = (0..12)
            .map(|i| Example {
                text_a: format!("w{i} w{} w3 w9", i + 1),
                text_b: None,
                label: Some(Label::Class(i % 2)),
                split: Split::Train,
            })
            .collect();
        let cfg = AugmentConfig { p_t: 0.4, n_a: 20, k: 15, seed: 9, include_original: false };
        let a = format_tsv(&augment_dataset(&data, &cfg, &Marked).unwrap()).unwrap();
        let b = format_tsv(&augment_dataset(&data, &cfg, &Marked).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 12 * 20);
        let other = format_tsv(&augment_dataset(&data, &AugmentConfig { seed: 10, ..cfg }, &Marked).unwrap()).unwrap();
        assert_ne!(a, other);
        format!("replacement rates {rates:.3?} over 10000 draws each; corpus byte-identical per seed")
    });
}

#[test]
fn criterion_5_self_distillation_converges() {
    criterion(5, || {
        let v = synthetic::vocab();
        let mut cfg = toy(v.len()).student;
        cfg.num_classes = 2;
        let batch = synthetic::examples(32, 1, Split::Train, &SyntheticConfig::default());
        let train = |stage, epochs, bs, lr| TrainConfig {
            stage,
            settings: TrainSettings::new(epochs, bs, lr),
            seed: 5,
            max_len: 16,
        };
        let teacher = finetune(
            TransformerModel::new(cfg.clone()).unwrap(),
            &batch,
            None,
            &v,
            &train(Stage::TeacherFinetune, TEACHER_EPOCHS, 32, 3e-3),
            &mut RunLog::default(),
        )
        .unwrap()
        .model;
        let student = TransformerModel::new(layerdistill::transformer::TransformerConfig { seed: 99, ..cfg.clone() }).unwrap();
        let mut setup = layerdistill::pipeline::DistillSetup::new(&Default::default(), &cfg, &cfg, Objectives::ALL, 1).unwrap();
        setup.params = DistillParams::identity(cfg.num_layers, cfg.hidden);
        let steps = STEPS;
        let mut log = RunLog::default();
        distill(&teacher, student, &batch, None, &v, &train(Stage::TaskIntermediate, steps, 32, 3e-3), &setup, &mut log).unwrap();
        let losses: Vec<f64> = log
            .steps(Stage::TaskIntermediate)
            .map(|r| match r {
                LogRecord::Step { loss, .. } => *loss,
                _ => unreachable!(),
            })
            .collect();
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert_eq!(losses.len(), steps);
        assert!(last < 0.01 * first, "loss {first:.4} -> {last:.4} after {steps} steps");
        format!("loss {first:.4} -> {last:.5} ({:.2}%) in {steps} steps", 100.0 * last / first)
    });
}

/// The soft cross-entropy term bottoms out at the teacher's entropy, so the
/// teacher is first made confident on the batch.
const TEACHER_EPOCHS: usize = 300;
const STEPS: usize = 1500;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Mean dev accuracy per variant over [`SEEDS`], for the procedure and
/// objective ablations plus a prediction-only student.
fn ablation_means() -> &'static HashMap<String, f64> {
    static MEANS: OnceLock<HashMap<String, f64>> = OnceLock::new();
    MEANS.get_or_init(|| {
        let task = synthetic::task("toy", 1, TaskSizes::default(), &SyntheticConfig::default());
        let mut cfg = toy(task.vocab.len());
        cfg.ablation.seeds = SEEDS.to_vec();
        let teachers = prepare_teachers(&cfg, &task, &mut RunLog::default()).unwrap();
        let mut specs: Vec<RunSpec> = Recipe::Procedures.runs();
        specs.extend(Recipe::Objectives.runs().into_iter().filter(|r| r.name != "full"));
        specs.push(RunSpec {
            name: "prediction only".into(),
            init: Init::Random,
            training: Training::PredictionOnly { augmented: true },
            mapping: None,
        });
        mean_accuracy(&cfg, &task, &teachers, &specs)
    })
}

fn mean_accuracy(cfg: &layerdistill::config::ExperimentConfig, task: &TaskData, teachers: &Teachers, specs: &[RunSpec]) -> HashMap<String, f64> {
    let mut sums = vec![0.0; specs.len()];
    for seed in SEEDS {
        for (sum, acc) in sums.iter_mut().zip(run_seed(cfg, task, teachers, specs, seed).unwrap()) {
            *sum += acc;
        }
    }
    let means = specs.iter().zip(sums).map(|(s, sum)| (s.name.clone(), sum / SEEDS.len() as f64)).collect();
    let line = format!("teacher dev accuracy {:.4}; means {means:?}\n", teachers.task_dev_accuracy);
    let _ = std::io::stderr().write_all(line.as_bytes());
    means
}

fn table(means: &HashMap<String, f64>, names: &[&str]) -> String {
    names.iter().map(|n| format!("{n} {:.4}", means[*n])).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_6_procedure_ablation_ordering() {
    criterion(6, || {
        let m = ablation_means();
        let detail = table(m, &["full", "w/o GD", "w/o TD", "w/o DA", "scratch", "prediction only"]);
        assert!(m["full"] >= m["w/o GD"] && m["w/o GD"] >= m["w/o TD"], "{detail}");
        assert!(m["full"] - m["scratch"] >= 0.02, "{detail}");
        assert!(m["full"] > m["prediction only"], "{detail}");
        detail
    });
}

#[test]
fn criterion_7_objective_ablation_ordering() {
    criterion(7, || {
        let m = ablation_means();
        let detail = table(m, &["full", "w/o Embd", "w/o Pred", "w/o Trm", "w/o Attn", "w/o Hidn"]);
        assert!(m["w/o Trm"] < m["w/o Pred"] && m["w/o Trm"] < m["w/o Embd"], "{detail}");
        detail
    });
}

#[test]
fn criterion_8_cli_pipeline_is_deterministic() {
    criterion(8, || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cli::setup(dir.path());
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        cli::pipeline(&cfg, &a);
        cli::pipeline(&cfg, &b);
        let (x, y) = (cli::artifacts(&a), cli::artifacts(&b));
        assert!(x.iter().any(|(n, _)| n.ends_with(".metrics.jsonl")));
        assert!(x.iter().any(|(n, _)| n.ends_with("weights.bin")));
        for ((na, ba), (nb, bb)) in x.iter().zip(&y) {
            assert_eq!(na, nb);
            assert!(ba == bb, "{na} differs between runs");
        }
        assert_eq!(x.len(), y.len());
        format!("{} metric logs and checkpoint files byte-identical", x.len())
    });
}

#[test]
fn criterion_9_soft_cross_entropy_fixture() {
    criterion(9, || {
        let z = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let zs = tape.param(z.clone());
        let l = pred_loss(&mut tape, &z, zs, 1.0).unwrap();
        let value = tape.value(l).item();
        assert!((value - 2f64.ln()).abs() < 1e-12, "{value}");
        let g = tape.backward(l).unwrap().wrt(zs);
        let norm = g.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-9, "{norm}");
        format!("loss - ln 2 = {:.1e}, gradient norm {norm:.1e}", value - 2f64.ln())
    });
}
