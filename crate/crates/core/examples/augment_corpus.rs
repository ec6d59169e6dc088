//! Trains a small masked-language-model teacher on the synthetic corpus and
//! uses it, with embedding neighbors for multi-piece words, to augment a few
//! labeled sentences.

use layerdistill::augment::{augment_dataset, AugmentConfig, TeacherSource};
use layerdistill::checkpoint::Stage;
use layerdistill::config::toy;
use layerdistill::data::{format_tsv, Split};
use layerdistill::pipeline::{train_mlm, RunLog, TrainConfig, TrainSettings};
use layerdistill::synthetic::{self, SyntheticConfig};
use layerdistill::transformer::TransformerModel;

fn main() -> layerdistill::Result<()> {
    let syn = SyntheticConfig::default();
    let vocab = synthetic::vocab();
    let cfg = toy(vocab.len());
    let corpus = synthetic::unlabeled(600, 1, &syn);
    let train = TrainConfig {
        stage: Stage::TeacherMlm,
        settings: TrainSettings::new(4, 32, 5e-3),
        seed: 1,
        max_len: 16,
    };
    let teacher = train_mlm(TransformerModel::new(cfg.teacher)?, &corpus, &vocab, &train, &mut RunLog::default())?.model;
    let glove = synthetic::glove(synthetic::GLOVE_DIM, 1);
    let source = TeacherSource::new(&teacher, &vocab, &glove);

    let examples = synthetic::examples(3, 2, Split::Train, &syn);
    let aug = AugmentConfig { n_a: 4, seed: 5, ..Default::default() };
    print!("{}", format_tsv(&augment_dataset(&examples, &aug, &source)?)?);
    Ok(())
}
