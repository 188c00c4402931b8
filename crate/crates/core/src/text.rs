//! Whitespace tokenization, vocabulary construction, TF-IDF scoring and
//! keyword extraction.
//!
//! A vocabulary always starts with five reserved ids:
//!
//! | id | token   |
//! |----|---------|
//! | 0  | `<PAD>` |
//! | 1  | `<UNK>` |
//! | 2  | `<S>`   |
//! | 3  | `</S>`  |
//! | 4  | `<M>`   |
//!
//! Corpus tokens are numbered from 5 upwards, most frequent first.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<PAD>", "<UNK>", "<S>", "</S>", "<M>"];

/// Function words and punctuation that are never picked as keywords.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "of", "to", "in", "on", "at", "by", "for", "with",
    "from", "as", "is", "are", "was", "were", "be", "been", "am", "it", "its", "this", "that",
    "these", "those", "i", "you", "he", "she", "we", "they", "me", "him", "her", "us", "them",
    "my", "your", "his", "our", "their", "not", "no", "so", "do", "does", "did", "have", "has",
    "had", "will", "would", "can", "could", ".", ",", "!", "?", ";", ":", "'", "\"", "-", "(",
    ")", "'s", "n't",
];

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid vocab parameters: {0}")]
    InvalidParams(String),
    #[error("malformed sentence ids: {0}")]
    Malformed(String),
    #[error("insufficient keywords: need {needed}, sentence has {available} eligible tokens")]
    InsufficientKeywords { needed: usize, available: usize },
    #[error("bad vocab file: {0}")]
    BadVocabFile(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TextError {
    fn from(e: std::io::Error) -> Self {
        TextError::Io(e.to_string())
    }
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from the given corpus tokens, which must not
    /// repeat and must not collide with the reserved strings.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id: HashMap<String, TokenId> = id_to_token
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabFile(format!("invalid token {tok:?}")));
            }
            if token_to_id.contains_key(&tok) {
                return Err(TextError::BadVocabFile(format!("duplicate token {tok:?}")));
            }
            token_to_id.insert(tok.clone(), id_to_token.len() as TokenId);
            id_to_token.push(tok);
        }
        Ok(Self { token_to_id, id_to_token })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Id of a surface token; unknown and reserved strings map to `UNK`.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        match self.id(token) {
            Some(id) if !is_special(id) => id,
            _ => UNK,
        }
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Corpus tokens in id order (the reserved ids are not included).
    pub fn corpus_tokens(&self) -> &[String] {
        &self.id_to_token[NUM_SPECIALS..]
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS {
            return Err(TextError::BadVocabFile("fewer than 5 lines".into()));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *expected {
                return Err(TextError::BadVocabFile(format!(
                    "line {i} must be {expected:?}, found {:?}",
                    lines[i]
                )));
            }
        }
        Self::from_tokens(lines[NUM_SPECIALS..].iter().copied())
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for tok in &self.id_to_token {
            writeln!(w, "{tok}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts whitespace tokens and keeps those seen at least `min_freq` times,
/// most frequent first with lexicographic tie-breaking.
pub fn build_vocab<S: AsRef<str>>(
    corpus_lines: &[S],
    min_freq: usize,
    max_size: usize,
) -> Result<Vocab, TextError> {
    if min_freq < 1 {
        return Err(TextError::InvalidParams("min_freq must be >= 1".into()));
    }
    if max_size < NUM_SPECIALS + 1 {
        return Err(TextError::InvalidParams("max_size must be >= 6".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus_lines {
        for tok in line.as_ref().split_whitespace() {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(tok))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// A well-formed sentence: `BOS`, interior content ids, `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentenceIds(Vec<TokenId>);

impl SentenceIds {
    pub fn new(ids: Vec<TokenId>) -> Result<Self, TextError> {
        if ids.len() < 2 {
            return Err(TextError::Malformed("fewer than two ids".into()));
        }
        if ids[0] != BOS {
            return Err(TextError::Malformed("missing BOS".into()));
        }
        if ids[ids.len() - 1] != EOS {
            return Err(TextError::Malformed("missing EOS".into()));
        }
        if let Some(bad) = ids[1..ids.len() - 1]
            .iter()
            .find(|&&t| matches!(t, PAD | BOS | EOS | MASK))
        {
            return Err(TextError::Malformed(format!("reserved id {bad} in interior")));
        }
        Ok(Self(ids))
    }

    /// Wraps interior content ids with `BOS`/`EOS`.
    pub fn from_interior(interior: &[TokenId]) -> Result<Self, TextError> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(BOS);
        ids.extend_from_slice(interior);
        ids.push(EOS);
        Self::new(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn interior(&self) -> &[TokenId] {
        &self.0[1..self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

pub fn encode(text: &str, vocab: &Vocab) -> SentenceIds {
    let mut ids = vec![BOS];
    ids.extend(text.split_whitespace().map(|t| vocab.id_or_unk(t)));
    ids.push(EOS);
    SentenceIds(ids)
}

pub fn decode(ids: &SentenceIds, vocab: &Vocab) -> Result<String, TextError> {
    let checked = SentenceIds::new(ids.0.clone())?;
    let words: Result<Vec<&str>, TextError> = checked
        .interior()
        .iter()
        .map(|&id| {
            vocab
                .token(id)
                .ok_or_else(|| TextError::Malformed(format!("id {id} outside vocab")))
        })
        .collect();
    Ok(words?.join(" "))
}

/// Document frequencies and inverse document frequencies over a line corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfIdfTable {
    doc_count: usize,
    doc_freq: BTreeMap<TokenId, usize>,
    idf: BTreeMap<TokenId, f64>,
}

impl TfIdfTable {
    pub fn from_doc_freq(doc_count: usize, doc_freq: BTreeMap<TokenId, usize>) -> Self {
        let idf = doc_freq
            .iter()
            .map(|(&t, &df)| (t, (doc_count as f64 / df as f64).ln()))
            .collect();
        Self { doc_count, doc_freq, idf }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn doc_freq(&self, token: TokenId) -> Option<usize> {
        self.doc_freq.get(&token).copied()
    }

    /// `ln(N / df)`, present only for tokens that occur in the corpus.
    pub fn idf(&self, token: TokenId) -> Option<f64> {
        self.idf.get(&token).copied()
    }

    /// TF-IDF of `token` within `sentence` (`count / interior length * idf`).
    pub fn score_in(&self, token: TokenId, sentence: &SentenceIds) -> f64 {
        let interior = sentence.interior();
        if interior.is_empty() {
            return 0.0;
        }
        let count = interior.iter().filter(|&&t| t == token).count();
        let tf = count as f64 / interior.len() as f64;
        tf * self.idf(token).unwrap_or(0.0)
    }
}

pub fn build_tfidf<S: AsRef<str>>(corpus_lines: &[S], vocab: &Vocab) -> TfIdfTable {
    let mut doc_freq: BTreeMap<TokenId, usize> = BTreeMap::new();
    for line in corpus_lines {
        let seen: HashSet<TokenId> = encode(line.as_ref(), vocab).interior().iter().copied().collect();
        for t in seen {
            *doc_freq.entry(t).or_default() += 1;
        }
    }
    TfIdfTable::from_doc_freq(corpus_lines.len(), doc_freq)
}

fn is_eligible_keyword(id: TokenId, vocab: &Vocab) -> bool {
    if is_special(id) {
        return false;
    }
    match vocab.token(id) {
        Some(tok) => tok.chars().count() >= 2 && !STOPWORDS.contains(&tok.to_lowercase().as_str()),
        None => false,
    }
}

/// Positions of keyword candidates: first occurrences of distinct content tokens.
pub fn eligible_keyword_positions(sentence: &SentenceIds, vocab: &Vocab) -> Vec<usize> {
    let mut seen = HashSet::new();
    let ids = sentence.ids();
    (1..ids.len() - 1)
        .filter(|&i| is_eligible_keyword(ids[i], vocab) && seen.insert(ids[i]))
        .collect()
}

/// Samples `n` keyword candidates uniformly without replacement and returns
/// them in sentence order.
pub fn extract_keywords(
    sentence: &SentenceIds,
    n: usize,
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<TokenId>, TextError> {
    let eligible = eligible_keyword_positions(sentence, vocab);
    if n < 1 || eligible.len() < n {
        return Err(TextError::InsufficientKeywords { needed: n, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|p| sentence.ids()[p]).collect())
}

/// Reads a corpus file, dropping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, TextError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}
