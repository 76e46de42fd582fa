//! WordPiece tokenization against a line-per-token vocabulary file.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

const CONTINUATION: &str = "##";

/// Words longer than this (in chars) become `[UNK]` without matching.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Casing {
    Cased,
    Uncased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
    pub pad: u32,
    pub unk: u32,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    special: SpecialIds,
    casing: Casing,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I, casing: Casing) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Format(format!("empty token on line {}", i + 1)));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token `{tok}` on line {}", i + 1)));
            }
        }
        let get = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::Format(format!("vocabulary lacks special token {name}")))
        };
        let special = SpecialIds {
            cls: get(CLS)?,
            sep: get(SEP)?,
            mask: get(MASK)?,
            pad: get(PAD)?,
            unk: get(UNK)?,
        };
        Ok(Self {
            tokens,
            ids,
            special,
            casing,
        })
    }

    pub fn load(path: impl AsRef<Path>, casing: Casing) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')), casing)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of the five special tokens.
    pub fn is_special(&self, id: u32) -> bool {
        let s = self.special;
        [s.cls, s.sep, s.mask, s.pad, s.unk].contains(&id)
    }

    /// Unknown tokens map to `[UNK]`.
    pub fn to_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(self.special.unk))
            .collect()
    }

    pub fn to_tokens(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, self)
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '\u{2000}'..='\u{206F}' | '\u{00A1}'..='\u{00BF}')
}

/// Splits on whitespace, then isolates every punctuation character.
fn pre_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

/// Greedy longest-match WordPiece. Total: unknown words become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    let text = match vocab.casing {
        Casing::Cased => text.to_string(),
        Casing::Uncased => text.chars().flat_map(char::to_lowercase).collect(),
    };
    let mut out = Vec::new();
    for word in pre_split(&text) {
        out.extend(wordpiece(&word, vocab));
    }
    out
}

fn wordpiece(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION);
            }
            if vocab.ids.contains_key(&piece) {
                found = Some(piece);
                break;
            }
            end -= 1;
        }
        match found {
            Some(p) => {
                pieces.push(p);
                start = end;
            }
            None => return vec![UNK.to_string()],
        }
    }
    pieces
}

/// Model input for one example or sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub segment_ids: Vec<u8>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Wraps already-mapped ids as `[CLS] ids [SEP]` padded to `max_len`.
    pub fn from_ids(ids: &[u32], vocab: &Vocab, max_len: usize) -> Result<Self> {
        build(ids.to_vec(), None, vocab, max_len)
    }
}

/// `[CLS] a [SEP] (b [SEP])`, longest-first truncated and padded to `max_len`.
pub fn encode_pair(a: &str, b: Option<&str>, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    let ta = vocab.to_ids(&tokenize(a, vocab));
    let tb = b.map(|b| vocab.to_ids(&tokenize(b, vocab)));
    build(ta, tb, vocab, max_len)
}

fn build(mut a: Vec<u32>, mut b: Option<Vec<u32>>, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    if max_len < 3 {
        return Err(Error::Contract(format!("max_len must be at least 3, got {max_len}")));
    }
    let reserved = if b.is_some() { 3 } else { 2 };
    let budget = max_len.saturating_sub(reserved);
    truncate_longest_first(&mut a, b.as_mut(), budget);
    let s = vocab.special;
    let mut ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    ids.push(s.cls);
    ids.extend(&a);
    ids.push(s.sep);
    segment_ids.resize(ids.len(), 0);
    if let Some(b) = b {
        ids.extend(&b);
        ids.push(s.sep);
        segment_ids.resize(ids.len(), 1);
    }
    let real = ids.len();
    ids.resize(max_len, s.pad);
    segment_ids.resize(max_len, 0);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    Ok(Encoding {
        ids,
        attention_mask,
        segment_ids,
    })
}

/// Pops from the longer sequence (the second one on ties) until both fit.
fn truncate_longest_first(a: &mut Vec<u32>, mut b: Option<&mut Vec<u32>>, budget: usize) {
    loop {
        let lb = b.as_ref().map_or(0, |b| b.len());
        if a.len() + lb <= budget {
            return;
        }
        match b.as_mut() {
            Some(b) if b.len() >= a.len() => {
                b.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
}
