//! Per-layer distillation losses between a 4-layer teacher and a 2-layer
//! student on one batch, plus the weighted total.

use layerdistill::data::batch;
use layerdistill::distill::{model_loss, DistillParams, LossContext, Objectives};
use layerdistill::mapping::Strategy;
use layerdistill::synthetic::{self, SyntheticConfig};
use layerdistill::transformer::{ForwardOptions, Input, TransformerModel};
use layerdistill::{config, data::Split, Tape};

fn main() -> layerdistill::Result<()> {
    let vocab = synthetic::vocab();
    let cfg = config::toy(vocab.len());
    let teacher = TransformerModel::new(cfg.teacher.clone())?;
    let student = TransformerModel::new(cfg.student.clone())?;
    let examples = synthetic::examples(8, 1, Split::Train, &SyntheticConfig::default());
    let b = &batch(&examples, &vocab, 16, 8, None)?[0];

    for strategy in Strategy::ALL {
        let mapping = strategy.build(2, 4)?;
        let mut params = DistillParams::new(2, cfg.student.hidden, cfg.teacher.hidden, false, 7);
        params.objectives = Objectives::ALL;
        let t_acts = teacher.infer(&b.tokens, &b.pad_mask)?;
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);
        let s_acts = student.forward(&mut tape, &bound, Input { tokens: &b.tokens, pad_mask: &b.pad_mask }, ForwardOptions::default())?;
        let proj = params.bind(&mut tape);
        let ctx = LossContext {
            mapping: &mapping,
            student: &s_acts,
            teacher: &t_acts,
            projections: &proj,
            params: &params,
            pad_mask: &b.pad_mask,
        };
        let (total, c) = model_loss(&mut tape, &ctx)?;
        println!(
            "{:>7} {:?}: embd {:.4} attn {:.4?} hidn {:.4?} pred {:.4} total {:.4}",
            strategy.name(),
            mapping.table(),
            c.embd,
            c.attn,
            c.hidn,
            c.pred,
            tape.value(total).item()
        );
    }
    Ok(())
}
