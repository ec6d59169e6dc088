//! Fixed-vocabulary subword tokenization, TSV corpora and padded batches.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const UNK_TOKEN: &str = "[UNK]";

pub const RESERVED_PIECES: [&str; 4] = [PAD_TOKEN, MASK_TOKEN, CLS_TOKEN, SEP_TOKEN];
pub const CONTINUATION: &str = "##";

/// Lowercases and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// An ordered list of pieces; the line number in a vocab file is the id.
///
/// Ids 0..=3 are `[PAD] [MASK] [CLS] [SEP]`. A `[UNK]` piece must also be
/// present; words that cannot be covered by pieces map to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
}

impl Vocab {
    pub fn new(pieces: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED_PIECES.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocab id {i} must be {r}")));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() || p.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("vocab piece {i} is empty or has whitespace")));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocab piece {p:?}")));
            }
        }
        let unk = *index
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::Config(format!("vocab lacks {UNK_TOKEN}")))?;
        Ok(Vocab { pieces, index, unk })
    }

    /// Reserved tokens, `[UNK]`, the `max_words` most frequent words of
    /// `texts` (ties broken alphabetically), then every character seen, both
    /// bare and `##`-prefixed.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut chars = std::collections::BTreeSet::new();
        for text in texts {
            for w in normalize_words(text) {
                chars.extend(w.chars());
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut pieces: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.push(UNK_TOKEN.into());
        let mut seen: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut push = |p: String, pieces: &mut Vec<String>| {
            if seen.insert(p.clone()) {
                pieces.push(p);
            }
        };
        for (w, _) in words.into_iter().take(max_words) {
            push(w, &mut pieces);
        }
        for c in chars {
            push(c.to_string(), &mut pieces);
            push(format!("{CONTINUATION}{c}"), &mut pieces);
        }
        Vocab::new(pieces).expect("constructed vocab is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Vocab::new(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    /// Reserved control tokens and `[UNK]`.
    pub fn is_special(&self, id: u32) -> bool {
        id < RESERVED_PIECES.len() as u32 || id == self.unk
    }

    /// Greedy longest-match-first decomposition of one word. Pieces after
    /// the first carry the `##` prefix. A word that cannot be covered
    /// becomes a single `[UNK]`.
    pub fn tokenize(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![self.unk],
            }
        }
        out
    }

    pub fn is_single_piece(&self, word: &str) -> bool {
        self.tokenize(word).len() == 1
    }

    /// Joins pieces back into a word, dropping `##` markers.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| {
                let p = self.piece(id);
                p.strip_prefix(CONTINUATION).unwrap_or(p)
            })
            .collect()
    }

    /// Token ids of a whole text, `[MASK]` words kept as the mask token.
    pub fn encode_words(&self, words: &[String]) -> Vec<u32> {
        words
            .iter()
            .flat_map(|w| {
                if w == MASK_TOKEN {
                    vec![MASK]
                } else {
                    self.tokenize(w)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }

    fn parse(s: &str) -> Option<Label> {
        if let Ok(c) = s.parse::<usize>() {
            return Some(Label::Class(c));
        }
        s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Label::Score)
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Score(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    /// `None` for unlabeled text such as a general-domain corpus.
    pub label: Option<Label>,
    pub split: Split,
}

impl Example {
    pub fn single(text: impl Into<String>, label: Option<Label>) -> Self {
        Example {
            text_a: text.into(),
            text_b: None,
            label,
            split: Split::Train,
        }
    }

    pub fn class(&self) -> Option<usize> {
        self.label.and_then(Label::class)
    }
}

/// Reads a tab-separated file whose header names `text_a`, `label` and
/// optionally `text_b`. An empty file yields no examples.
pub fn load_tsv(path: impl AsRef<Path>, split: Split) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tsv(&text, &path.display().to_string(), split)
}

pub fn parse_tsv(text: &str, source: &str, split: Split) -> Result<Vec<Example>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| cols.iter().position(|&c| c == name);
    let a = find("text_a").ok_or_else(|| err(1, "header has no text_a column".into()))?;
    let label = find("label").ok_or_else(|| err(1, "header has no label column".into()))?;
    let b = find("text_b");
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(err(
                lineno,
                format!("expected {} columns, found {}", cols.len(), fields.len()),
            ));
        }
        let lab = Label::parse(fields[label].trim())
            .ok_or_else(|| err(lineno, format!("bad label {:?}", fields[label])))?;
        out.push(Example {
            text_a: fields[a].to_string(),
            text_b: b.map(|j| fields[j].to_string()),
            label: Some(lab),
            split,
        });
    }
    Ok(out)
}

/// Writes examples in the format read by [`load_tsv`]. A `text_b` column is
/// written when any example has one.
pub fn write_tsv(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    fs::write(path, format_tsv(examples)?)?;
    Ok(())
}

pub fn format_tsv(examples: &[Example]) -> Result<String> {
    let pair = examples.iter().any(|e| e.text_b.is_some());
    let mut out = String::from(if pair { "text_a\ttext_b\tlabel\n" } else { "text_a\tlabel\n" });
    for e in examples {
        let fields = [Some(e.text_a.as_str()), e.text_b.as_deref()];
        if fields.iter().flatten().any(|f| f.contains(['\t', '\n', '\r'])) {
            return Err(Error::Param(format!("text {:?} contains a tab or newline", e.text_a)));
        }
        let label = e
            .label
            .ok_or_else(|| Error::Param(format!("example {:?} has no label", e.text_a)))?;
        if pair {
            let _ = writeln!(out, "{}\t{}\t{label}", e.text_a, e.text_b.as_deref().unwrap_or(""));
        } else {
            let _ = writeln!(out, "{}\t{label}", e.text_a);
        }
    }
    Ok(out)
}

/// One sentence per non-empty line, unlabeled.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Example::single(l, None))
        .collect())
}

/// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, truncated to `max_len` by
/// trimming the longer text first.
pub fn encode_example(example: &Example, vocab: &Vocab, max_len: usize) -> Result<Vec<u32>> {
    let mut a = vocab.encode_words(&normalize_words(&example.text_a));
    let mut b = example
        .text_b
        .as_ref()
        .map(|t| vocab.encode_words(&normalize_words(t)));
    let specials = if b.is_some() { 3 } else { 2 };
    if max_len < specials {
        return Err(Error::Param(format!("max_len {max_len} cannot hold the special tokens")));
    }
    let budget = max_len - specials;
    match &mut b {
        None => a.truncate(budget),
        Some(b) => {
            while a.len() + b.len() > budget {
                if a.len() > b.len() {
                    a.pop();
                } else {
                    b.pop();
                }
            }
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(a);
    ids.push(SEP);
    if let Some(b) = b {
        ids.extend(b);
        ids.push(SEP);
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    /// True on real (non-PAD) positions.
    pub pad_mask: Vec<Vec<bool>>,
    pub labels: Vec<Option<Label>>,
    /// Position of each row in the source example list.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn from_sequences(seqs: Vec<Vec<u32>>, labels: Vec<Option<Label>>, indices: Vec<usize>) -> Self {
        let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let pad_mask = seqs
            .iter()
            .map(|s| (0..l).map(|i| i < s.len()).collect())
            .collect();
        let tokens = seqs
            .into_iter()
            .map(|mut s| {
                s.resize(l, PAD);
                s
            })
            .collect();
        Batch {
            tokens,
            pad_mask,
            labels,
            indices,
        }
    }
}

/// Encodes, optionally shuffles (when `seed` is set) and groups examples
/// into batches padded to their own longest row.
pub fn batch(
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
    batch_size: usize,
    seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be positive".into()));
    }
    let encoded = examples
        .iter()
        .map(|e| encode_example(e, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            Batch::from_sequences(
                idx.iter().map(|&i| encoded[i].clone()).collect(),
                idx.iter().map(|&i| examples[i].label).collect(),
                idx.to_vec(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut p: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
        p.push(UNK_TOKEN.into());
        p.extend(extra.iter().map(|s| s.to_string()));
        Vocab::new(p).unwrap()
    }

    #[test]
    fn whole_word_is_one_piece() {
        let v = vocab(&["hello", "h", "##e"]);
        assert_eq!(v.tokenize("hello"), vec![v.id("hello").unwrap()]);
        assert!(v.is_single_piece("hello"));
    }

    #[test]
    fn greedy_longest_match() {
        let v = vocab(&["play", "##ing", "p", "##l", "##a", "##y"]);
        let ids = v.tokenize("playing");
        let pieces: Vec<&str> = ids.iter().map(|&i| v.piece(i)).collect();
        assert_eq!(pieces, ["play", "##ing"]);
        assert!(!v.is_single_piece("playing"));
    }

    #[test]
    fn character_fallback() {
        let v = Vocab::from_corpus(["x"], 0);
        let v2 = Vocab::from_corpus(["unknownword"], 0);
        assert_eq!(v.tokenize("x").len(), 1);
        let ids = v2.tokenize("unknownword");
        assert_eq!(ids.len(), "unknownword".len());
        assert!(!v2.piece(ids[0]).starts_with("##"));
        assert!(ids[1..].iter().all(|&i| v2.piece(i).starts_with("##")));
        assert_eq!(v2.detokenize(&ids), "unknownword");
    }

    #[test]
    fn uncoverable_word_is_unknown() {
        let v = vocab(&["a"]);
        assert_eq!(v.tokenize("ab"), vec![v.unk()]);
    }

    #[test]
    fn vocab_requires_reserved_prefix() {
        assert!(Vocab::new(vec!["[MASK]".into()]).is_err());
        let mut p: Vec<String> = RESERVED_PIECES.iter().map(|s| s.to_string()).collect();
        assert!(Vocab::new(p.clone()).is_err(), "missing [UNK]");
        p.push(UNK_TOKEN.into());
        p.push("a".into());
        p.push("a".into());
        assert!(Vocab::new(p).is_err(), "duplicate");
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::from_corpus(["the cat sat", "the dog"], 3);
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert_eq!(v.piece(4), UNK_TOKEN);
        assert_eq!(v.piece(5), "the");
    }

    #[test]
    fn tsv_parsing() {
        let ex = parse_tsv("text_a\tlabel\ngood film\t1\nbad film\t0\n", "t", Split::Train).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[1].class(), Some(0));
        assert!(parse_tsv("", "t", Split::Train).unwrap().is_empty());

        let pair = parse_tsv("label\ttext_a\ttext_b\n1\ta b\tc d\n", "t", Split::Dev).unwrap();
        assert_eq!(pair[0].text_b.as_deref(), Some("c d"));
        assert_eq!(pair[0].split, Split::Dev);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        let e = parse_tsv("text_a\tlabel\nok\t1\nbroken\tx\n", "f.tsv", Split::Train).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        let e = parse_tsv("text\tlabel\n", "f.tsv", Split::Train).unwrap_err();
        assert!(e.to_string().contains("text_a"));
        let e = parse_tsv("text_a\tlabel\na\tb\tc\n", "f.tsv", Split::Train).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn tsv_write_read_round_trip() {
        let ex = vec![
            Example {
                text_a: "a b".into(),
                text_b: Some("c".into()),
                label: Some(Label::Class(1)),
                split: Split::Train,
            },
            Example {
                text_a: "d".into(),
                text_b: Some("e f".into()),
                label: Some(Label::Class(0)),
                split: Split::Train,
            },
        ];
        let text = format_tsv(&ex).unwrap();
        assert_eq!(parse_tsv(&text, "t", Split::Train).unwrap(), ex);
    }

    #[test]
    fn pair_truncation_keeps_both_separators() {
        let v = Vocab::from_corpus(["a b c d e f g h"], 10);
        let e = Example {
            text_a: "a b c d e f".into(),
            text_b: Some("g h".into()),
            label: Some(Label::Class(0)),
            split: Split::Train,
        };
        let ids = encode_example(&e, &v, 7).unwrap();
        assert_eq!(ids.len(), 7);
        assert_eq!(ids[0], CLS);
        assert_eq!(ids.iter().filter(|&&t| t == SEP).count(), 2);
        assert_eq!(*ids.last().unwrap(), SEP);
        // the longer text loses tokens first: a keeps 2, b keeps 2
        assert_eq!(ids.iter().position(|&t| t == SEP), Some(3));
    }

    #[test]
    fn batching_is_seeded_permutation() {
        let v = Vocab::from_corpus(["one two three four five"], 10);
        let ex: Vec<Example> = ["one", "two three", "four", "five one two", "three"]
            .iter()
            .enumerate()
            .map(|(i, t)| Example::single(*t, Some(Label::Class(i % 2))))
            .collect();
        let b1 = batch(&ex, &v, 16, 2, Some(9)).unwrap();
        let b2 = batch(&ex, &v, 16, 2, Some(9)).unwrap();
        assert_eq!(b1, b2);
        let mut seen: Vec<usize> = b1.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        for b in &b1 {
            for (row, mask) in b.tokens.iter().zip(&b.pad_mask) {
                assert_eq!(row[0], CLS);
                for (&t, &m) in row.iter().zip(mask) {
                    assert_eq!(m, t != PAD);
                }
            }
        }
        let singles = batch(&ex, &v, 16, 1, None).unwrap();
        assert_eq!(singles.len(), 5);
        assert!(singles.iter().all(|b| b.len() == 1));
    }
}
