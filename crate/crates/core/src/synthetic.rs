//! Generated toy corpora.
//!
//! Sentences are drawn from filler words plus two synonym classes: intensifiers
//! (`very`, `truly`, ...) and praise words (`good`, `great`, ...). Under the
//! bigram rule a sentence is positive when an intensifier is immediately
//! followed by a praise word; negatives use the same words reversed, split by
//! a filler, or alone. Some synonyms are rare and split into two pieces by
//! the vocabulary, so augmentation exercises both candidate sources.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ablation::TaskData;
use crate::augment::EmbeddingStore;
use crate::config::DataConfig;
use crate::data::{write_tsv, Example, Label, Split, Vocab, CONTINUATION, RESERVED_PIECES, UNK_TOKEN};
use crate::error::Result;

pub const INTENSIFIERS: [&str; 4] = ["very", "truly", "really", "quite"];
pub const PRAISE: [&str; 4] = ["good", "great", "fine", "nice"];
/// Rare synonyms and their two-piece split: `(intensifier?, head, tail)`.
pub const RARE: [(bool, &str, &str); 4] = [
    (true, "remark", "ably"),
    (true, "exception", "ally"),
    (false, "wonder", "ful"),
    (false, "splen", "did"),
];
pub const FILLERS: [&str; 28] = [
    "the", "a", "film", "movie", "plot", "cast", "was", "is", "and", "but", "with", "story", "actor",
    "scene", "ending", "music", "it", "this", "felt", "seemed", "long", "slow", "dark", "quiet",
    "old", "short", "of", "in",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    /// Positive iff an intensifier is directly followed by a praise word.
    Bigram,
    /// Positive iff any praise word occurs.
    BagOfWords,
}

fn rare_words(intensifier: bool) -> impl Iterator<Item = String> {
    RARE.iter()
        .filter(move |r| r.0 == intensifier)
        .map(|(_, h, t)| format!("{h}{t}"))
}

pub fn intensifiers() -> Vec<String> {
    INTENSIFIERS.iter().map(|s| s.to_string()).chain(rare_words(true)).collect()
}

pub fn praise_words() -> Vec<String> {
    PRAISE.iter().map(|s| s.to_string()).chain(rare_words(false)).collect()
}

/// Ground-truth label of a word sequence under `rule`.
pub fn label_of(words: &[String], rule: Rule) -> usize {
    let praise = praise_words();
    match rule {
        Rule::BagOfWords => words.iter().any(|w| praise.contains(w)) as usize,
        Rule::Bigram => {
            let int = intensifiers();
            words
                .windows(2)
                .any(|p| int.contains(&p[0]) && praise.contains(&p[1])) as usize
        }
    }
}

/// The fixed vocabulary: reserved tokens, `[UNK]`, every common word and
/// both pieces of every rare word.
pub fn vocab() -> Vocab {
    let mut pieces: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
    pieces.push(UNK_TOKEN.into());
    pieces.extend(FILLERS.iter().chain(&INTENSIFIERS).chain(&PRAISE).map(|s| s.to_string()));
    for (_, head, tail) in RARE {
        pieces.push(head.into());
        pieces.push(format!("{CONTINUATION}{tail}"));
    }
    Vocab::new(pieces).expect("synthetic vocab is valid")
}

/// Clustered word vectors: synonyms of a class sit near a shared center.
pub fn glove(dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.35).expect("valid normal");
    let draw = |n: &Normal<f64>, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| n.sample(rng)).collect() };
    let mut store = EmbeddingStore::new(dim);
    for class in [intensifiers(), praise_words()] {
        let center = draw(&unit, &mut rng);
        for w in class {
            let v: Vec<f64> = center.iter().zip(draw(&noise, &mut rng)).map(|(c, e)| c + e).collect();
            store.insert(&w, &v).expect("dimension matches");
        }
    }
    for w in FILLERS {
        let v = draw(&unit, &mut rng);
        store.insert(w, &v).expect("dimension matches");
    }
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub rule: Rule,
    pub min_words: usize,
    pub max_words: usize,
    /// Chance that a synonym slot uses a rare word.
    pub rare_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            rule: Rule::Bigram,
            min_words: 5,
            max_words: 10,
            rare_rate: 0.2,
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, common: &[&str], intensifier: bool, rare_rate: f64) -> String {
    if rng.random::<f64>() < rare_rate {
        let rare: Vec<String> = rare_words(intensifier).collect();
        rare.choose(rng).expect("non-empty").clone()
    } else {
        common.choose(rng).expect("non-empty").to_string()
    }
}

/// One sentence aiming for `positive`; the returned label is recomputed
/// from the words.
pub fn sentence(rng: &mut ChaCha8Rng, positive: bool, cfg: &SyntheticConfig) -> (Vec<String>, usize) {
    let len = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut words: Vec<String> = (0..len)
        .map(|_| FILLERS.choose(rng).expect("non-empty").to_string())
        .collect();
    let int = |rng: &mut ChaCha8Rng| pick(rng, &INTENSIFIERS, true, cfg.rare_rate);
    let pr = |rng: &mut ChaCha8Rng| pick(rng, &PRAISE, false, cfg.rare_rate);
    let at = |rng: &mut ChaCha8Rng, span: usize, len: usize| rng.random_range(0..=len - span);
    match (cfg.rule, positive) {
        (Rule::Bigram, true) => {
            let i = at(rng, 2, len);
            words[i] = int(rng);
            words[i + 1] = pr(rng);
        }
        (Rule::Bigram, false) => match rng.random_range(0..4) {
            0 => {
                let i = at(rng, 2, len);
                words[i] = pr(rng);
                words[i + 1] = int(rng);
            }
            1 => {
                let i = at(rng, 3, len);
                words[i] = int(rng);
                words[i + 2] = pr(rng);
            }
            2 => {
                let i = at(rng, 1, len);
                words[i] = int(rng);
            }
            _ => {
                let i = at(rng, 1, len);
                words[i] = pr(rng);
            }
        },
        (Rule::BagOfWords, true) => {
            let i = at(rng, 1, len);
            words[i] = pr(rng);
        }
        (Rule::BagOfWords, false) => {
            if rng.random::<bool>() {
                let i = at(rng, 1, len);
                words[i] = int(rng);
            }
        }
    }
    let label = label_of(&words, cfg.rule);
    (words, label)
}

/// `n` labeled examples, balanced in expectation.
pub fn examples(n: usize, seed: u64, split: Split, cfg: &SyntheticConfig) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let positive = rng.random::<bool>();
            let (words, label) = sentence(&mut rng, positive, cfg);
            Example {
                text_a: words.join(" "),
                text_b: None,
                label: Some(Label::Class(label)),
                split,
            }
        })
        .collect()
}

/// `n` unlabeled sentences from the same distribution.
pub fn unlabeled(n: usize, seed: u64, cfg: &SyntheticConfig) -> Vec<Example> {
    examples(n, seed, Split::Train, cfg)
        .into_iter()
        .map(|mut e| {
            e.label = None;
            e
        })
        .collect()
}

/// Split sizes of a generated task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSizes {
    pub general: usize,
    pub teacher_train: usize,
    pub train: usize,
    pub dev: usize,
}

impl Default for TaskSizes {
    fn default() -> Self {
        TaskSizes {
            general: 3000,
            teacher_train: 2000,
            train: 200,
            dev: 400,
        }
    }
}

pub const GLOVE_DIM: usize = 16;

/// Every split of a generated task, each from its own seed stream.
pub fn task(name: &str, seed: u64, sizes: TaskSizes, cfg: &SyntheticConfig) -> TaskData {
    let s = |salt| crate::pipeline::sub_seed(seed, salt);
    TaskData {
        name: name.to_string(),
        vocab: vocab(),
        general: unlabeled(sizes.general, s(10), cfg),
        teacher_train: examples(sizes.teacher_train, s(11), Split::Train, cfg),
        train: examples(sizes.train, s(12), Split::Train, cfg),
        dev: examples(sizes.dev, s(13), Split::Dev, cfg),
        glove: glove(GLOVE_DIM, s(14)),
    }
}

/// Writes every split of `task` into `dir` under the names used by
/// [`task_data_config`].
pub fn write_task(task: &TaskData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    task.vocab.save(dir.join("vocab.txt"))?;
    task.glove.save(dir.join("glove.txt"))?;
    let lines: String = task.general.iter().map(|e| format!("{}\n", e.text_a)).collect();
    fs::write(dir.join("general.txt"), lines)?;
    write_tsv(dir.join("teacher_train.tsv"), &task.teacher_train)?;
    write_tsv(dir.join("train.tsv"), &task.train)?;
    write_tsv(dir.join("dev.tsv"), &task.dev)?;
    Ok(())
}

/// Data section pointing at the files of [`write_task`], relative to the
/// directory holding the experiment file.
pub fn task_data_config(max_len: usize) -> DataConfig {
    let p = |s: &str| Some(PathBuf::from(s));
    DataConfig {
        train: p("train.tsv"),
        dev: p("dev.tsv"),
        teacher_train: p("teacher_train.tsv"),
        general: p("general.txt"),
        vocab: p("vocab.txt"),
        glove: p("glove.txt"),
        glove_limit: None,
        max_len,
    }
}
