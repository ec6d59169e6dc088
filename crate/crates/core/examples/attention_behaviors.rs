//! Runs an untrained encoder over one padded batch and prints the behaviors
//! a student imitates: pre-softmax attention scores, hidden states and logits.

use layerdistill::data::{batch, Example};
use layerdistill::synthetic;
use layerdistill::transformer::{TransformerConfig, TransformerModel};

fn main() -> layerdistill::Result<()> {
    let vocab = synthetic::vocab();
    let mut model = TransformerModel::new(TransformerConfig {
        num_layers: 2,
        hidden: 8,
        ffn: 16,
        heads: 2,
        vocab_size: vocab.len(),
        max_len: 16,
        num_classes: 2,
        dropout: 0.0,
        mlm_head: false,
        seed: 3,
    })?;
    // fresh weights are tiny; scale them so the scores are visible
    for t in model.params_mut() {
        *t = t.map(|x| 20.0 * x);
    }
    let examples = [Example::single("the film was very good", None), Example::single("the plot seemed slow", None)];
    let b = &batch(&examples, &vocab, 16, 2, None)?[0];
    let acts = model.infer(&b.tokens, &b.pad_mask)?;

    for (row, tokens) in b.tokens.iter().enumerate() {
        let pieces: Vec<&str> = tokens.iter().map(|&t| vocab.piece(t)).collect();
        println!("row {row}: {}", pieces.join(" "));
    }
    let l = b.seq_len();
    println!("\nlayer 1, head 0 scores QKᵀ/√d_k for row 0:");
    for q in 0..l {
        let scores: Vec<String> = (0..l).map(|k| format!("{:+.3}", acts.attentions[0].get(&[0, 0, q, k]))).collect();
        println!("  {}", scores.join(" "));
    }
    println!("\nhidden state shapes: {:?}", acts.hiddens.iter().map(|h| h.shape().to_vec()).collect::<Vec<_>>());
    println!("logits: {:?}", acts.logits.data());
    Ok(())
}
