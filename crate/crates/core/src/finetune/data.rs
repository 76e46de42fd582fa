//! Task datasets in tab-separated form.
//!
//! Tagging files hold one token per line with the tag in the last column and
//! blank lines between sentences. Example files start with a header naming
//! the columns `id`, `text`, optionally `text_b`, and either `label` (class
//! index) or `score` (real value).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{encode_pair, Encoding, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct TaggedSentence {
    pub words: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub id: String,
    pub text: String,
    pub text_b: Option<String>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Tagging(Vec<TaggedSentence>),
    Examples(Vec<TextExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Tagging(s) => s.len(),
            Dataset::Examples(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn parse_tagging(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        let mut cur = TaggedSentence {
            words: Vec::new(),
            tags: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                if !cur.words.is_empty() {
                    out.push(std::mem::replace(
                        &mut cur,
                        TaggedSentence {
                            words: Vec::new(),
                            tags: Vec::new(),
                        },
                    ));
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols[0].is_empty() || cols.last().unwrap().is_empty() {
                return Err(Error::Format(format!(
                    "line {}: expected `token<TAB>...<TAB>tag`",
                    n + 1
                )));
            }
            cur.words.push(cols[0].to_string());
            cur.tags.push(cols.last().unwrap().trim().to_string());
        }
        if !cur.words.is_empty() {
            out.push(cur);
        }
        Ok(Dataset::Tagging(out))
    }

    pub fn parse_examples(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty dataset".into()))?;
        let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let id_col = find("id").ok_or_else(|| Error::Format("header lacks `id`".into()))?;
        let text_col = find("text").ok_or_else(|| Error::Format("header lacks `text`".into()))?;
        let b_col = find("text_b");
        let (target_col, is_score) = match (find("label"), find("score")) {
            (Some(c), None) => (c, false),
            (None, Some(c)) => (c, true),
            _ => return Err(Error::Format("header needs exactly one of `label` or `score`".into())),
        };
        let mut out = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if f.len() != cols.len() {
                return Err(Error::Format(format!(
                    "line {}: {} columns, header has {}",
                    n + 1,
                    f.len(),
                    cols.len()
                )));
            }
            let raw = f[target_col].trim();
            let target = if is_score {
                Target::Score(
                    raw.parse()
                        .map_err(|_| Error::Format(format!("line {}: score `{raw}` is not a number", n + 1)))?,
                )
            } else {
                Target::Class(
                    raw.parse()
                        .map_err(|_| Error::Format(format!("line {}: label `{raw}` is not a class index", n + 1)))?,
                )
            };
            out.push(TextExample {
                id: f[id_col].to_string(),
                text: f[text_col].to_string(),
                text_b: b_col.map(|c| f[c].to_string()),
                target,
            });
        }
        Ok(Dataset::Examples(out))
    }

    pub fn load_tagging(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_tagging(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn load_examples(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse_examples(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Sorted distinct tags of a tagging set.
    pub fn tag_set(&self) -> Vec<String> {
        match self {
            Dataset::Tagging(s) => {
                let mut tags: Vec<String> = s.iter().flat_map(|x| x.tags.iter().cloned()).collect();
                tags.sort();
                tags.dedup();
                tags
            }
            Dataset::Examples(_) => Vec::new(),
        }
    }
}

/// A tagged sentence encoded for the model: first-subword position of every
/// word that fit within the length budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSentence {
    pub encoding: Encoding,
    /// `word_rows[w]` is the position of word `w`'s first subword, or `None`
    /// when truncation removed the word.
    pub word_rows: Vec<Option<usize>>,
}

pub fn align_words(words: &[String], vocab: &Vocab, max_len: usize) -> Result<AlignedSentence> {
    let budget = max_len.saturating_sub(2);
    let mut ids = Vec::new();
    let mut word_rows = Vec::with_capacity(words.len());
    for w in words {
        let mut pieces = vocab.to_ids(&vocab.tokenize(w));
        if pieces.is_empty() {
            pieces.push(vocab.special().unk);
        }
        if ids.len() + pieces.len() > budget {
            word_rows.push(None);
            continue;
        }
        word_rows.push(Some(ids.len() + 1));
        ids.extend(pieces);
    }
    Ok(AlignedSentence {
        encoding: Encoding::from_ids(&ids, vocab, max_len)?,
        word_rows,
    })
}

/// Pair inputs use segments 0 / 1; single texts use segment 0 only.
pub fn encode_example(ex: &TextExample, vocab: &Vocab, max_len: usize) -> Result<Encoding> {
    encode_pair(&ex.text, ex.text_b.as_deref(), vocab, max_len)
}
