//! Layer-wise distillation objectives.
//!
//! Student behaviors are tape variables; teacher behaviors are plain tensors
//! and enter every loss as constants, so no gradient ever reaches the
//! teacher. Positions where the padding mask is false are excluded and the
//! MSE means divide by the number of remaining elements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::LayerMapping;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{ModelActivations, TapeActivations, INIT_STD};

/// Which loss terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objectives {
    pub embd: bool,
    pub attn: bool,
    pub hidn: bool,
    pub pred: bool,
}

impl Objectives {
    pub const ALL: Objectives = Objectives {
        embd: true,
        attn: true,
        hidn: true,
        pred: true,
    };

    /// Embedding and transformer layers only.
    pub const INTERMEDIATE: Objectives = Objectives {
        embd: true,
        attn: true,
        hidn: true,
        pred: false,
    };

    pub const PREDICTION: Objectives = Objectives {
        embd: false,
        attn: false,
        hidn: false,
        pred: true,
    };
}

impl Default for Objectives {
    fn default() -> Self {
        Objectives::ALL
    }
}

/// Loss weights, temperature and the learnable width-matching projections.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillParams {
    /// `λ_m` for `m = 0..=M+1`.
    pub lambda: Vec<f64>,
    pub temperature: f64,
    /// One `[d', d]` projection per student layer, or a single shared one.
    pub hidden_proj: Vec<Tensor>,
    /// `[d', d]`
    pub embed_proj: Tensor,
    pub objectives: Objectives,
}

impl DistillParams {
    /// λ = 1 everywhere, `t = 1`, projections ~ N(0, 0.02²).
    pub fn new(
        student_layers: usize,
        student_hidden: usize,
        teacher_hidden: usize,
        shared_hidden_projection: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_proj = if shared_hidden_projection { 1 } else { student_layers };
        let shape = [student_hidden, teacher_hidden];
        let hidden_proj = (0..n_proj)
            .map(|_| Tensor::truncated_normal(shape, INIT_STD, &mut rng))
            .collect();
        let embed_proj = Tensor::truncated_normal(shape, INIT_STD, &mut rng);
        DistillParams {
            lambda: vec![1.0; student_layers + 2],
            temperature: 1.0,
            hidden_proj,
            embed_proj,
            objectives: Objectives::ALL,
        }
    }

    /// Identity projections (requires equal widths).
    pub fn identity(student_layers: usize, hidden: usize) -> Self {
        DistillParams {
            lambda: vec![1.0; student_layers + 2],
            temperature: 1.0,
            hidden_proj: vec![Tensor::eye(hidden); student_layers],
            embed_proj: Tensor::eye(hidden),
            objectives: Objectives::ALL,
        }
    }

    pub fn shared_hidden_projection(&self) -> bool {
        self.hidden_proj.len() == 1
    }

    pub fn include_prediction(&self) -> bool {
        self.objectives.pred
    }

    pub fn validate(&self, mapping: &LayerMapping) -> Result<()> {
        let m = mapping.student_layers();
        if self.lambda.len() != m + 2 {
            return Err(Error::Config(format!(
                "lambda has {} weights, expected M + 2 = {}",
                self.lambda.len(),
                m + 2
            )));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("lambda weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.hidden_proj.len() != m && self.hidden_proj.len() != 1 {
            return Err(Error::Config(format!(
                "{} hidden projections for {m} student layers",
                self.hidden_proj.len()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ProjectionVars {
        ProjectionVars {
            hidden: self.hidden_proj.iter().map(|t| tape.param(t.clone())).collect(),
            embed: tape.param(self.embed_proj.clone()),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.hidden_proj.iter_mut().collect();
        v.push(&mut self.embed_proj);
        v
    }
}

/// Projections bound to a tape, in [`DistillParams::params_mut`] order.
#[derive(Clone, Debug)]
pub struct ProjectionVars {
    pub hidden: Vec<Var>,
    pub embed: Var,
}

impl ProjectionVars {
    pub fn hidden_for(&self, student_layer: usize) -> Var {
        if self.hidden.len() == 1 {
            self.hidden[0]
        } else {
            self.hidden[student_layer - 1]
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.hidden.clone();
        v.push(self.embed);
        v
    }
}

fn check_mask(pad_mask: &[Vec<bool>], b: usize, l: usize) -> Result<()> {
    if pad_mask.len() != b || pad_mask.iter().any(|r| r.len() != l) {
        return Err(Error::Shape(format!("pad mask does not cover a [{b}, {l}] batch")));
    }
    Ok(())
}

/// `[b, h, l, l]` mask that is 1 where both query and key are real tokens.
pub fn attention_mask(pad_mask: &[Vec<bool>], heads: usize) -> Tensor {
    let b = pad_mask.len();
    let l = pad_mask[0].len();
    let mut data = Vec::with_capacity(b * heads * l * l);
    for row in pad_mask {
        for _ in 0..heads {
            for &q in row {
                for &k in row {
                    data.push(if q && k { 1.0 } else { 0.0 });
                }
            }
        }
    }
    Tensor::new([b, heads, l, l], data).expect("mask shape")
}

/// `[b, l, d]` mask that is 1 on every feature of a real token.
pub fn position_mask(pad_mask: &[Vec<bool>], d: usize) -> Tensor {
    let b = pad_mask.len();
    let l = pad_mask[0].len();
    let data = pad_mask
        .iter()
        .flat_map(|row| row.iter().flat_map(|&real| std::iter::repeat_n(if real { 1.0 } else { 0.0 }, d)))
        .collect();
    Tensor::new([b, l, d], data).expect("mask shape")
}

/// Mean over heads of the MSE between pre-softmax attention scores.
pub fn attn_loss(tape: &mut Tape, student: Var, teacher: &Tensor, pad_mask: &[Vec<bool>]) -> Result<Var> {
    let s = tape.shape(student).to_vec();
    let t = teacher.shape();
    if s.len() != 4 || t.len() != 4 {
        return Err(Error::Shape(format!("attention scores must be [b, h, l, l], got {s:?} / {t:?}")));
    }
    if s[1] != t[1] {
        return Err(Error::Config(format!(
            "student has {} attention heads but teacher has {}",
            s[1], t[1]
        )));
    }
    if s[..] != t[..] {
        return Err(Error::dim("attn_loss", &s, t));
    }
    check_mask(pad_mask, s[0], s[2])?;
    let tv = tape.constant(teacher.clone());
    tape.masked_mse(student, tv, &attention_mask(pad_mask, s[1]))
}

fn projected_mse(
    op: &'static str,
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    proj: Var,
    pad_mask: &[Vec<bool>],
) -> Result<Var> {
    let s = tape.shape(student).to_vec();
    let p = tape.shape(proj).to_vec();
    let t = teacher.shape();
    if s.len() != 3 || t.len() != 3 || p.len() != 2 || p[0] != s[2] || p[1] != t[2] {
        return Err(Error::dim(op, &s, &p));
    }
    if s[..2] != t[..2] {
        return Err(Error::dim(op, &s, t));
    }
    check_mask(pad_mask, s[0], s[1])?;
    let projected = tape.matmul(student, proj)?;
    let tv = tape.constant(teacher.clone());
    tape.masked_mse(projected, tv, &position_mask(pad_mask, t[2]))
}

/// `MSE(H^S W_h, H^T)` over real tokens.
pub fn hidn_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    w_h: Var,
    pad_mask: &[Vec<bool>],
) -> Result<Var> {
    projected_mse("hidn_loss", tape, student, teacher, w_h, pad_mask)
}

/// `MSE(E^S W_e, E^T)` over real tokens.
pub fn embd_loss(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    w_e: Var,
    pad_mask: &[Vec<bool>],
) -> Result<Var> {
    projected_mse("embd_loss", tape, student, teacher, w_e, pad_mask)
}

/// Soft cross-entropy between teacher and student logits at temperature `t`.
pub fn pred_loss(tape: &mut Tape, teacher: &Tensor, student: Var, t: f64) -> Result<Var> {
    let tv = tape.constant(teacher.clone());
    tape.soft_cross_entropy(tv, student, t)
}

/// Everything a layer loss needs besides the layer index.
pub struct LossContext<'a> {
    pub mapping: &'a LayerMapping,
    pub student: &'a TapeActivations,
    pub teacher: &'a ModelActivations,
    pub projections: &'a ProjectionVars,
    pub params: &'a DistillParams,
    pub pad_mask: &'a [Vec<bool>],
}

/// Per-layer loss values of one evaluation of [`model_loss`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub embd: f64,
    /// Indexed by student layer `m - 1`.
    pub attn: Vec<f64>,
    pub hidn: Vec<f64>,
    pub pred: f64,
}

impl LossComponents {
    /// `Σ_m λ_m · L_layer(m)` recomputed from the logged components.
    pub fn weighted_total(&self, lambda: &[f64]) -> f64 {
        let m = self.attn.len();
        let mut total = lambda[0] * self.embd;
        for i in 0..m {
            total += lambda[i + 1] * (self.attn[i] + self.hidn[i]);
        }
        total + lambda[m + 1] * self.pred
    }
}

pub struct LayerLoss {
    pub total: Var,
    pub embd: Option<Var>,
    pub attn: Option<Var>,
    pub hidn: Option<Var>,
    pub pred: Option<Var>,
}

/// The per-layer selector: embedding loss at `m = 0`, attention plus hidden
/// loss for `1 ≤ m ≤ M`, prediction loss at `m = M + 1`. Disabled
/// objectives contribute a constant zero.
pub fn layer_loss(tape: &mut Tape, m: usize, ctx: &LossContext<'_>) -> Result<LayerLoss> {
    let student_layers = ctx.mapping.student_layers();
    let n = ctx
        .mapping
        .target(m)
        .ok_or_else(|| Error::Param(format!("layer index {m} outside 0..={}", student_layers + 1)))?;
    let obj = ctx.params.objectives;
    let mut out = LayerLoss {
        total: tape.constant(Tensor::scalar(0.0)),
        embd: None,
        attn: None,
        hidn: None,
        pred: None,
    };
    if m == 0 {
        if obj.embd {
            let l = embd_loss(
                tape,
                ctx.student.embeddings,
                &ctx.teacher.embeddings,
                ctx.projections.embed,
                ctx.pad_mask,
            )?;
            out.embd = Some(l);
            out.total = l;
        }
    } else if m <= student_layers {
        let teacher_attn = ctx
            .teacher
            .attentions
            .get(n - 1)
            .ok_or_else(|| Error::Param(format!("teacher has no layer {n}")))?;
        let teacher_hidn = &ctx.teacher.hiddens[n - 1];
        let mut parts = Vec::new();
        if obj.attn {
            let l = attn_loss(tape, ctx.student.attentions[m - 1], teacher_attn, ctx.pad_mask)?;
            out.attn = Some(l);
            parts.push(l);
        }
        if obj.hidn {
            let l = hidn_loss(
                tape,
                ctx.student.hiddens[m - 1],
                teacher_hidn,
                ctx.projections.hidden_for(m),
                ctx.pad_mask,
            )?;
            out.hidn = Some(l);
            parts.push(l);
        }
        match parts[..] {
            [] => {}
            [one] => out.total = one,
            [a, b] => out.total = tape.add(a, b)?,
            _ => unreachable!(),
        }
    } else if obj.pred {
        let l = pred_loss(
            tape,
            &ctx.teacher.logits,
            ctx.student.logits,
            ctx.params.temperature,
        )?;
        out.pred = Some(l);
        out.total = l;
    }
    Ok(out)
}

/// `Σ_{m=0}^{M+1} λ_m · L_layer(m)` for one batch, plus its components.
pub fn model_loss(tape: &mut Tape, ctx: &LossContext<'_>) -> Result<(Var, LossComponents)> {
    ctx.mapping.validate()?;
    ctx.params.validate(ctx.mapping)?;
    let m_layers = ctx.mapping.student_layers();
    if ctx.student.hiddens.len() != m_layers {
        return Err(Error::Config(format!(
            "student has {} layers but mapping expects {m_layers}",
            ctx.student.hiddens.len()
        )));
    }
    if ctx.teacher.hiddens.len() != ctx.mapping.teacher_layers() {
        return Err(Error::Config(format!(
            "teacher has {} layers but mapping expects {}",
            ctx.teacher.hiddens.len(),
            ctx.mapping.teacher_layers()
        )));
    }
    let mut comps = LossComponents {
        attn: vec![0.0; m_layers],
        hidn: vec![0.0; m_layers],
        ..Default::default()
    };
    let mut total: Option<Var> = None;
    for m in 0..=m_layers + 1 {
        let lambda = ctx.params.lambda[m];
        let ll = layer_loss(tape, m, ctx)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        if m == 0 {
            comps.embd = value(ll.embd);
        } else if m <= m_layers {
            comps.attn[m - 1] = value(ll.attn);
            comps.hidn[m - 1] = value(ll.hidn);
        } else {
            comps.pred = value(ll.pred);
        }
        let weighted = tape.scale(ll.total, lambda)?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    Ok((total.expect("at least two layers"), comps))
}
