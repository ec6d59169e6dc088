//! Builds a wordpiece vocabulary from the bundled polarity sentences, shows
//! greedy longest-match tokenization and pads a shuffled batch.

use layerdistill::data::{batch, load_tsv, Split, Vocab};

fn main() -> layerdistill::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/data/polarity.tsv");
    let examples = load_tsv(path, Split::Train)?;
    let vocab = Vocab::from_corpus(examples.iter().map(|e| e.text_a.as_str()), 60);
    println!("{} examples, vocabulary of {} pieces", examples.len(), vocab.len());

    for word in ["film", "unwatchable", "charming", "xylophone"] {
        let ids = vocab.tokenize(word);
        let pieces: Vec<&str> = ids.iter().map(|&i| vocab.piece(i)).collect();
        println!("{word:>12} -> {pieces:?} (round trip {:?})", vocab.detokenize(&ids));
    }

    let batches = batch(&examples[..6], &vocab, 12, 3, Some(1))?;
    for (i, b) in batches.iter().enumerate() {
        println!("\nbatch {i} rows {:?}", b.indices);
        for (tokens, mask) in b.tokens.iter().zip(&b.pad_mask) {
            let shown: Vec<String> = tokens
                .iter()
                .zip(mask)
                .map(|(&t, &real)| if real { vocab.piece(t).to_string() } else { "_".into() })
                .collect();
            println!("  {}", shown.join(" "));
        }
    }
    Ok(())
}
