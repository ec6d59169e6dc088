//! Word-replacement data augmentation.
//!
//! Each variant walks the words of an example left to right. A position is
//! replaced with probability `p_t` by a uniform draw from its candidate set:
//! masked-language-model predictions for single-piece words, nearest
//! embedding neighbors for multi-piece words.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{normalize_words, Example, Vocab, CLS, MASK_TOKEN, SEP};
use crate::error::{Error, Result};
use crate::transformer::TransformerModel;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Replacement probability per position.
    pub p_t: f64,
    /// Variants per example.
    pub n_a: usize,
    /// Candidate set size.
    pub k: usize,
    pub seed: u64,
    pub include_original: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_t: 0.4,
            n_a: 20,
            k: 15,
            seed: 0,
            include_original: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_t) {
            return Err(Error::Config(format!("p_t {} outside [0, 1]", self.p_t)));
        }
        if self.n_a < 1 {
            return Err(Error::Config("n_a must be at least 1".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Candidate providers. Returned lists hold at most `k` words and never the
/// mask token.
pub trait ReplacementSource: Sync {
    fn is_single_piece(&self, word: &str) -> bool;
    /// Candidates for `words[i]`, which the caller has set to `[MASK]`.
    fn mlm_candidates(&self, words: &[String], i: usize, k: usize) -> Result<Vec<String>>;
    fn neighbor_candidates(&self, word: &str, k: usize) -> Vec<String>;
}

/// Word vectors keyed by lowercased word.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    words: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            words: Vec::new(),
            index: HashMap::new(),
            dim,
            vectors: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// Adds a vector. A word already present (case-insensitively) is ignored.
    pub fn insert(&mut self, word: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim("EmbeddingStore::insert", &[self.dim], &[vector.len()]));
        }
        let key = word.to_lowercase();
        if self.index.contains_key(&key) {
            return Ok(());
        }
        self.index.insert(key.clone(), self.words.len());
        self.words.push(key);
        self.vectors.extend_from_slice(vector);
        self.norms.push(vector.iter().map(|x| x * x).sum::<f64>().sqrt());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        let i = *self.index.get(&word.to_lowercase())?;
        Some(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let ia = *self.index.get(&a.to_lowercase())?;
        let ib = *self.index.get(&b.to_lowercase())?;
        Some(self.cosine_idx(ia, ib))
    }

    fn cosine_idx(&self, a: usize, b: usize) -> f64 {
        let denom = self.norms[a] * self.norms[b];
        if denom == 0.0 {
            return 0.0;
        }
        let d = self.dim;
        let dot: f64 = self.vectors[a * d..(a + 1) * d]
            .iter()
            .zip(&self.vectors[b * d..(b + 1) * d])
            .map(|(x, y)| x * y)
            .sum();
        dot / denom
    }

    /// The `k` most cosine-similar other words, ties in lexicographic order.
    /// Unknown words have no neighbors.
    pub fn neighbors(&self, word: &str, k: usize) -> Vec<String> {
        let Some(&q) = self.index.get(&word.to_lowercase()) else {
            return Vec::new();
        };
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| i != q)
            .map(|i| (self.cosine_idx(q, i), i))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.words[a.1].cmp(&self.words[b.1]))
        });
        scored
            .into_iter()
            .take(k)
            .map(|(_, i)| self.words[i].clone())
            .collect()
    }

    /// Text in the `word v1 … vD` format read by [`load_glove`].
    pub fn to_glove_string(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for x in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_glove_string())?;
        Ok(())
    }
}

/// Reads up to `limit` entries of a GloVe text file.
pub fn load_glove(path: impl AsRef<Path>, limit: Option<usize>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    parse_glove(&fs::read_to_string(path)?, &path.display().to_string(), limit)
}

pub fn parse_glove(text: &str, source: &str, limit: Option<usize>) -> Result<EmbeddingStore> {
    let mut store: Option<EmbeddingStore> = None;
    let mut loaded = 0;
    for (i, line) in text.lines().enumerate() {
        if limit.is_some_and(|n| loaded >= n) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let word = parts.next().expect("non-empty line");
        let vector = parts
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if vector.is_empty() {
            return Err(err(format!("word {word:?} has no vector")));
        }
        let s = store.get_or_insert_with(|| EmbeddingStore::new(vector.len()));
        if vector.len() != s.dim {
            return Err(err(format!(
                "dimension {} differs from the first entry's {}",
                vector.len(),
                s.dim
            )));
        }
        s.insert(word, &vector)?;
        loaded += 1;
    }
    Ok(store.unwrap_or_else(|| EmbeddingStore::new(0)))
}

/// Top-`k` vocabulary words by MLM logit at token position `pos`, skipping
/// reserved tokens, `[UNK]` and continuation pieces.
pub fn mlm_candidates(
    model: &TransformerModel,
    vocab: &Vocab,
    tokens: &[u32],
    pos: usize,
    k: usize,
) -> Result<Vec<String>> {
    if pos >= tokens.len() {
        return Err(Error::Param(format!("position {pos} outside {} tokens", tokens.len())));
    }
    let logits = model.mlm_logits(&[tokens.to_vec()], &[vec![true; tokens.len()]])?;
    let v = vocab.len().min(logits.shape()[2]);
    let row = &logits.data()[pos * logits.shape()[2]..][..v];
    let mut ids: Vec<u32> = (0..v as u32)
        .filter(|&id| !vocab.is_special(id) && !vocab.piece(id).starts_with(crate::data::CONTINUATION))
        .collect();
    ids.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
    Ok(ids
        .into_iter()
        .take(k)
        .map(|id| vocab.piece(id).to_string())
        .collect())
}

/// Candidates from a teacher with an MLM head plus a word-vector store.
pub struct TeacherSource<'a> {
    pub model: &'a TransformerModel,
    pub vocab: &'a Vocab,
    pub store: &'a EmbeddingStore,
    cache: Mutex<HashMap<(Vec<u32>, usize), Vec<String>>>,
}

impl<'a> TeacherSource<'a> {
    pub fn new(model: &'a TransformerModel, vocab: &'a Vocab, store: &'a EmbeddingStore) -> Self {
        TeacherSource {
            model,
            vocab,
            store,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl ReplacementSource for TeacherSource<'_> {
    fn is_single_piece(&self, word: &str) -> bool {
        self.vocab.is_single_piece(word)
    }

    fn mlm_candidates(&self, words: &[String], i: usize, k: usize) -> Result<Vec<String>> {
        let mut ids = vec![CLS];
        let mut pos = 0;
        for (j, w) in words.iter().enumerate() {
            if j == i {
                pos = ids.len();
            }
            ids.extend(self.vocab.encode_words(std::slice::from_ref(w)));
        }
        ids.push(SEP);
        // keep a window that fits the model and contains the mask
        let max_len = self.model.config().max_len;
        if ids.len() > max_len {
            let start = pos.saturating_sub(max_len / 2).min(ids.len() - max_len);
            ids = ids[start..start + max_len].to_vec();
            pos -= start;
        }
        let key = (ids, pos);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.iter().take(k).cloned().collect());
        }
        let found = mlm_candidates(self.model, self.vocab, &key.0, pos, k)?;
        self.cache.lock().expect("cache lock").insert(key, found.clone());
        Ok(found)
    }

    fn neighbor_candidates(&self, word: &str, k: usize) -> Vec<String> {
        self.store.neighbors(word, k)
    }
}

/// `n_a` variants of `words`.
pub fn augment_example<S: ReplacementSource + ?Sized, R: Rng + ?Sized>(
    words: &[String],
    cfg: &AugmentConfig,
    source: &S,
    rng: &mut R,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(cfg.n_a);
    for _ in 0..cfg.n_a {
        let mut x_m = words.to_vec();
        for i in 0..x_m.len() {
            // the draw comes first; building C consumes no randomness, so
            // skipping it when the position is not selected changes nothing
            let p: f64 = rng.random();
            if p > cfg.p_t {
                continue;
            }
            let candidates = if source.is_single_piece(&words[i]) {
                let original = std::mem::replace(&mut x_m[i], MASK_TOKEN.to_string());
                let c = source.mlm_candidates(&x_m, i, cfg.k);
                x_m[i] = original;
                c?
            } else {
                source.neighbor_candidates(&words[i], cfg.k)
            };
            if !candidates.is_empty() {
                x_m[i] = candidates[rng.random_range(0..candidates.len())].clone();
            }
        }
        out.push(x_m);
    }
    Ok(out)
}

/// Stream `index` of the ChaCha generator seeded with `seed`.
pub fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Each example followed by its variants, all carrying its label. Pair texts
/// are augmented independently and zipped.
pub fn augment_dataset<S: ReplacementSource + ?Sized>(
    examples: &[Example],
    cfg: &AugmentConfig,
    source: &S,
) -> Result<Vec<Example>> {
    cfg.validate()?;
    let groups = examples
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            let mut rng = example_rng(cfg.seed, idx);
            let a = augment_example(&normalize_words(&ex.text_a), cfg, source, &mut rng)?;
            let b = match &ex.text_b {
                Some(t) => Some(augment_example(&normalize_words(t), cfg, source, &mut rng)?),
                None => None,
            };
            let mut group = Vec::with_capacity(cfg.n_a + 1);
            if cfg.include_original {
                group.push(ex.clone());
            }
            for j in 0..cfg.n_a {
                group.push(Example {
                    text_a: a[j].join(" "),
                    text_b: b.as_ref().map(|b| b[j].join(" ")),
                    label: ex.label,
                    split: ex.split,
                });
            }
            Ok(group)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}
