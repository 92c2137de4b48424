//! Whitespace tokenization, vocabulary construction and TSV loaders.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Ranks lowercased whitespace tokens by descending frequency, breaking
    /// ties lexicographically, and keeps the first `cap - 4` after the
    /// specials. Tokens spelled like a special are never admitted.
    pub fn from_sentences<S: AsRef<str>>(sentences: &[S], cap: usize) -> Result<Self> {
        if cap < SPECIALS.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is smaller than the {} special tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for s in sentences {
            for w in s.as_ref().split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let reserved: Vec<String> = SPECIALS.iter().map(|s| s.to_lowercase()).collect();
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !reserved.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(cap)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Validation(
                "token list must start with the special tokens".into(),
            ));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Validation("token list contains duplicates".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Stable text form: one token per line in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_token_list(text.lines().map(str::to_string).collect())
    }
}

pub fn build_vocab(corpus: &Path, cap: usize) -> Result<Vocab> {
    Vocab::from_sentences(&load_corpus(corpus)?, cap)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub ids: Vec<u32>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with [PAD] to `len`, masking the new positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        out.ids.resize(len.max(self.len()), PAD);
        out.mask.resize(len.max(self.len()), false);
        out
    }
}

/// `[CLS] ids [SEP]`, cut to `max_len` with [SEP] kept last.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedSentence> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max length {max_len} cannot hold [CLS] and [SEP]"
        )));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .map(|w| vocab.id(&w.to_lowercase()))
            .take(max_len - 2),
    );
    ids.push(SEP);
    let mask = vec![true; ids.len()];
    Ok(TokenizedSentence { ids, mask })
}

/// Space-joined tokens between [CLS] and [SEP]; padding is skipped.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| i != PAD && i != CLS && i != SEP)
        .map(|&i| vocab.token(i).unwrap_or(SPECIALS[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn pad_batch(batch: &[TokenizedSentence]) -> Vec<TokenizedSentence> {
    let len = batch.iter().map(TokenizedSentence::len).max().unwrap_or(0);
    batch.iter().map(|s| s.padded(len)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub anchor: String,
    pub positive: String,
    pub hard_negative: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub a: String,
    pub b: String,
    pub score: f64,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: msg.into(),
    }
}

/// Non-blank lines with their 1-based line numbers, trailing `\r` removed.
fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn columns<'a>(path: &Path, line: usize, raw: &'a str) -> Result<[&'a str; 3]> {
    let cols: Vec<&str> = raw.split('\t').collect();
    let Ok(cols) = <[&str; 3]>::try_from(cols.as_slice()) else {
        return Err(parse_err(
            path,
            line,
            format!("expected 3 tab-separated columns, found {}", cols.len()),
        ));
    };
    if let Some(i) = cols.iter().position(|c| c.trim().is_empty()) {
        return Err(parse_err(path, line, format!("column {} is empty", i + 1)));
    }
    Ok(cols)
}

pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = read(path)?;
    let out: Vec<String> = records(&text).map(|(_, l)| l.trim().to_string()).collect();
    if out.is_empty() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: "corpus contains no sentences".into(),
        });
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<TripletRecord>> {
    let text = read(path)?;
    records(&text)
        .map(|(n, l)| {
            let [a, p, h] = columns(path, n, l)?;
            Ok(TripletRecord {
                anchor: a.to_string(),
                positive: p.to_string(),
                hard_negative: h.to_string(),
            })
        })
        .collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<ScoredPair>> {
    let text = read(path)?;
    records(&text)
        .map(|(n, l)| {
            let [s, a, b] = columns(path, n, l)?;
            let score: f64 = s
                .trim()
                .parse()
                .map_err(|_| parse_err(path, n, format!("score {s:?} is not a number")))?;
            if !(0.0..=5.0).contains(&score) {
                return Err(Error::Validation(format!(
                    "{}:{n}: score {score} outside [0, 5]",
                    path.display()
                )));
            }
            Ok(ScoredPair {
                a: a.to_string(),
                b: b.to_string(),
                score,
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, sentences: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in sentences {
        let _ = writeln!(s, "{l}");
    }
    Ok(std::fs::write(path, s)?)
}

pub fn write_triplets(path: &Path, triplets: &[TripletRecord]) -> Result<()> {
    let mut s = String::new();
    for t in triplets {
        let _ = writeln!(s, "{}\t{}\t{}", t.anchor, t.positive, t.hard_negative);
    }
    Ok(std::fs::write(path, s)?)
}

pub fn write_pairs(path: &Path, pairs: &[ScoredPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        let _ = writeln!(s, "{}\t{}\t{}", p.score, p.a, p.b);
    }
    Ok(std::fs::write(path, s)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = Vocab::from_sentences(&["a b", "a"], 10).unwrap();
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b"]);
        let v = Vocab::from_sentences(&["Zeta alpha", "zeta ALPHA beta"], 10).unwrap();
        assert_eq!(&v.tokens()[4..], &["alpha", "zeta", "beta"]);
    }

    #[test]
    fn cap_four_is_specials_only() {
        let v = Vocab::from_sentences(&["a b c"], 4).unwrap();
        assert_eq!(v.len(), 4);
        let t = tokenize("a b c", &v, 32).unwrap();
        assert_eq!(t.ids, vec![CLS, UNK, UNK, UNK, SEP]);
        assert!(Vocab::from_sentences(&["a"], 3).is_err());
    }

    #[test]
    fn rebuild_from_file_is_identical() {
        let f = tmp("the cat\nthe dog\n\n");
        assert_eq!(
            build_vocab(f.path(), 100).unwrap(),
            build_vocab(f.path(), 100).unwrap()
        );
        let empty = tmp("\n  \n");
        assert!(matches!(
            build_vocab(empty.path(), 100),
            Err(Error::Ingest { .. })
        ));
    }

    #[test]
    fn tokenize_contract() {
        let v = Vocab::from_sentences(&["a b"], 10).unwrap();
        let t = tokenize("a b", &v, 32).unwrap();
        assert_eq!(t.ids, vec![CLS, v.id("a"), v.id("b"), SEP]);
        assert_eq!(t.mask, vec![true; 4]);
        assert_eq!(tokenize("", &v, 32).unwrap().ids, vec![CLS, SEP]);
        assert_eq!(tokenize("a zzz", &v, 32).unwrap().ids[2], UNK);

        let long = vec!["a"; 100].join(" ");
        let t = tokenize(&long, &v, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(t.len(), 32);
        assert_eq!(t.ids[0], CLS);
        assert_eq!(*t.ids.last().unwrap(), SEP);
    }

    #[test]
    fn padding_masks_new_positions() {
        let v = Vocab::from_sentences(&["a b"], 10).unwrap();
        let batch = vec![
            tokenize("a", &v, 32).unwrap(),
            tokenize("a b a b", &v, 32).unwrap(),
        ];
        let p = pad_batch(&batch);
        assert_eq!(p[0].ids, vec![CLS, 4, SEP, PAD, PAD, PAD]);
        assert_eq!(p[0].mask, vec![true, true, true, false, false, false]);
        assert_eq!(p[1], batch[1]);
    }

    #[test]
    fn loaders_parse_and_report_lines() {
        let f = tmp("s0\ts1\tneg\n");
        assert_eq!(
            load_triplets(f.path()).unwrap(),
            vec![TripletRecord {
                anchor: "s0".into(),
                positive: "s1".into(),
                hard_negative: "neg".into()
            }]
        );
        let f = tmp("4.2\tA\tB\n");
        assert_eq!(
            load_pairs(f.path()).unwrap(),
            vec![ScoredPair {
                a: "A".into(),
                b: "B".into(),
                score: 4.2
            }]
        );
        let f = tmp("a\tb\tc\nbad\n");
        match load_triplets(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = tmp("5.5\tA\tB\n");
        assert!(matches!(load_pairs(f.path()), Err(Error::Validation(_))));
        let f = tmp("x\tA\tB\n");
        assert!(matches!(
            load_pairs(f.path()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::from_sentences(&["x y y"], 10).unwrap();
        assert_eq!(Vocab::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn detokenize_round_trips(words in prop::collection::vec("[a-z]{1,6}", 0..20)) {
            let text = words.join("  ");
            let v = Vocab::from_sentences(std::slice::from_ref(&text), 1000).unwrap();
            let t = tokenize(&text, &v, 64).unwrap();
            let back = detokenize(&t.ids, &v);
            prop_assert_eq!(back, words.join(" "));
            prop_assert_eq!(tokenize(&detokenize(&t.ids, &v), &v, 64).unwrap(), t);
        }
    }
}
