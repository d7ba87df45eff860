//! Token vocabularies and framed id sequences.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijection between surface tokens and ids. Ids 0..4 are the reserved
/// PAD, BOS, EOS and UNK markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from a full id-ordered token list (specials included).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of a surface token, UNK when absent.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(SPECIALS[UNK as usize], String::as_str)
    }

    /// Regular (non-special) tokens with their ids.
    pub fn regular(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(SPECIALS.len())
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> TokenSeq {
        TokenSeq::from_content(words.iter().map(|w| self.id(w.as_ref())).collect())
    }

    pub fn decode(&self, seq: &TokenSeq) -> Vec<&str> {
        seq.content().iter().map(|&id| self.token(id)).collect()
    }

    pub fn decode_line(&self, seq: &TokenSeq) -> String {
        self.decode(seq).join(" ")
    }
}

/// Builds a vocabulary keeping tokens seen at least `min_freq` times, sorted
/// by descending count with lexicographic tie-break.
pub fn build_vocab<'a, I, S>(sentences: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut any = false;
    for sentence in sentences {
        any = true;
        for tok in sentence.as_ref() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::EmptySequence("build_vocab"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_freq && !SPECIALS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Id sequence framed as `BOS w1 .. wn EOS`. Decoder output that hit the
/// length limit may lack the closing EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn from_content(content: Vec<u32>) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(BOS);
        ids.extend(content);
        ids.push(EOS);
        TokenSeq { ids }
    }

    /// Wraps already framed ids; the first id must be BOS.
    pub fn from_framed(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&BOS) {
            return Err(Error::invalid("framed sequence must start with BOS"));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Tokens between BOS and the closing EOS (if present).
    pub fn content(&self) -> &[u32] {
        let end = if self.is_finished() {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[1..end]
    }

    pub fn is_finished(&self) -> bool {
        self.ids.len() >= 2 && self.ids.last() == Some(&EOS)
    }

    /// Framed length, BOS and EOS included.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }

    /// Decoder inputs: every id but the last.
    pub fn inputs(&self) -> &[u32] {
        &self.ids[..self.ids.len() - 1]
    }

    /// Prediction targets: every id after BOS.
    pub fn targets(&self) -> &[u32] {
        &self.ids[1..]
    }
}
