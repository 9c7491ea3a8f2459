//! Closed word-level vocabulary over everything the biography grammar can render.
//!
//! Words are whitespace-delimited; a trailing `.` or `,` and a possessive `'s`
//! are split off as their own tokens. Those three "glue" tokens attach to the
//! previous word when decoding, which makes decode(encode(x)) = x for any text
//! whose words are separated by single spaces.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::biogen::{AttributeKind, Pools};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOD: TokenId = 1;
pub const RESERVED: [&str; 2] = ["<pad>", "<eod>"];

const GLUE: [&str; 3] = [".", ",", "'s"];

/// What a provenance span realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpanLabel {
    Name,
    Value(AttributeKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub label: SpanLabel,
    /// Entity the span belongs to.
    pub entity_id: u32,
    pub tokens: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub spans: Vec<Span>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends another sequence, shifting its spans.
    pub fn extend(&mut self, other: &TokenSeq) {
        let off = self.ids.len();
        self.ids.extend_from_slice(&other.ids);
        self.spans.extend(other.spans.iter().map(|s| Span {
            label: s.label,
            entity_id: s.entity_id,
            tokens: s.tokens.start + off..s.tokens.end + off,
        }));
    }

    pub fn spans_with(&self, label: SpanLabel, entity_id: u32) -> impl Iterator<Item = &Span> {
        self.spans
            .iter()
            .filter(move |s| s.label == label && s.entity_id == entity_id)
    }
}

/// Splits text into words, returning each word with its byte range.
fn split_words(text: &str) -> Vec<(&str, Range<usize>)> {
    let mut out = Vec::new();
    let base = text.as_ptr() as usize;
    for chunk in text.split_whitespace() {
        let start = chunk.as_ptr() as usize - base;
        let mut word = chunk;
        let mut tail = Vec::new();
        loop {
            if let Some(stripped) = word.strip_suffix('.').or_else(|| word.strip_suffix(',')) {
                if stripped.is_empty() {
                    break;
                }
                tail.push(&word[stripped.len()..]);
                word = stripped;
                continue;
            }
            if let Some(stripped) = word.strip_suffix("'s") {
                if !stripped.is_empty() {
                    tail.push("'s");
                    word = stripped;
                    continue;
                }
            }
            break;
        }
        out.push((word, start..start + word.len()));
        let mut pos = start + word.len();
        for t in tail.into_iter().rev() {
            out.push((t, pos..pos + t.len()));
            pos += t.len();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from content words. Reserved tokens come first,
    /// content words follow in sorted order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = words.into_iter().map(Into::into).collect();
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(set.into_iter().filter(|w| !RESERVED.contains(&w.as_str())))
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        Ok(TokenSeq {
            ids: self.encode_with_offsets(text)?.into_iter().map(|(id, _)| id).collect(),
            spans: Vec::new(),
        })
    }

    /// Token ids with the byte range each token covers in `text`.
    pub fn encode_with_offsets(&self, text: &str) -> Result<Vec<(TokenId, Range<usize>)>> {
        split_words(text)
            .into_iter()
            .map(|(w, r)| {
                self.id(w)
                    .map(|id| (id, r))
                    .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
            })
            .collect()
    }

    /// Encodes text and converts labelled byte ranges into token ranges.
    /// Every byte range must align with token boundaries.
    pub fn encode_spans(&self, text: &str, byte_spans: &[(SpanLabel, u32, Range<usize>)]) -> Result<TokenSeq> {
        let toks = self.encode_with_offsets(text)?;
        let mut spans = Vec::with_capacity(byte_spans.len());
        for (label, entity_id, range) in byte_spans {
            let start = toks.iter().position(|(_, r)| r.start == range.start);
            let end = toks.iter().rposition(|(_, r)| r.end == range.end);
            match (start, end) {
                (Some(s), Some(e)) if s <= e => spans.push(Span {
                    label: *label,
                    entity_id: *entity_id,
                    tokens: s..e + 1,
                }),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "span {range:?} does not align with token boundaries"
                    )))
                }
            }
        }
        Ok(TokenSeq {
            ids: toks.into_iter().map(|(id, _)| id).collect(),
            spans,
        })
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            if !out.is_empty() && !GLUE.contains(&tok) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }

    /// Writes content tokens one per line; the line number plus the reserved
    /// count is the token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for t in &self.tokens[RESERVED.len()..] {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(text.lines().map(String::from))
            .collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidPool {
                    path: path.into(),
                    reason: format!("token {t:?} listed twice"),
                });
            }
        }
        Ok(Self { tokens, index })
    }
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    split_words(text).into_iter().map(|(w, _)| w.to_string())
}

/// Closed vocabulary covering every sentence the pools can render.
pub fn build_vocab(pools: &Pools) -> Vocab {
    let mut words: Vec<String> = GLUE.iter().map(|s| s.to_string()).collect();
    for kind in AttributeKind::ALL {
        match kind {
            // 73k dates reduce to months, days, years and the comma.
            AttributeKind::BirthDate => {
                words.extend(crate::biogen::MONTHS.iter().map(|m| m.to_string()));
                words.extend((1..=31).map(|d| d.to_string()));
                words.extend((1900..=2099).map(|y| y.to_string()));
            }
            _ => {
                for v in pools.value_pool(kind).values() {
                    words.extend(words_of(v));
                }
            }
        }
        for t in &pools.template_pool(kind).templates {
            let stripped = t.text().replace("{person}", " ").replace("{value}", " ");
            words.extend(words_of(&stripped));
        }
    }
    let n = &pools.names;
    words.extend(n.first.iter().chain(&n.middle).chain(&n.last).cloned());
    Vocab::from_words(words)
}
