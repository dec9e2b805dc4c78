use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const UNK: &str = "<unk>";
pub const ANSWER: &str = "<ans>";
pub const EOS: &str = "<eos>";

/// Word-level vocabulary. Ids 0, 1, 2 are the unknown, answer and
/// end-of-sequence tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

/// A tokenized text. Piece `i` covers bytes `ranges[i]`, which include the
/// whitespace before the word, so the ranges tile the text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub ranges: Vec<(usize, usize)>,
    pub sentence_start: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn is_terminal(word: &str) -> bool {
    matches!(word, "." | "?" | "!")
}

/// Splits `text` into `(leading_ws_start, word_start, word_end)` triples.
fn lex(text: &str) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut it = text.char_indices().peekable();
    let mut ws_start = 0;
    while let Some(&(i, c)) = it.peek() {
        if c.is_whitespace() {
            it.next();
            continue;
        }
        let mut end = i + c.len_utf8();
        it.next();
        if c.is_alphanumeric() {
            while let Some(&(j, d)) = it.peek() {
                if !d.is_alphanumeric() {
                    break;
                }
                end = j + d.len_utf8();
                it.next();
            }
        }
        out.push((ws_start, i, end));
        ws_start = end;
    }
    out
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut all: Vec<String> = [UNK, ANSWER, EOS].iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.into();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let mut v = Self {
            words: all,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    /// Vocabulary of every word in `texts`, sorted.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for (_, a, b) in lex(t) {
                set.insert(&t[a..b]);
            }
        }
        Self::new(set.into_iter().map(String::from))
    }

    /// Needed after deserialising.
    pub fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn answer(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| contract!("token id {id} outside vocabulary"))
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let pieces = lex(text);
        let mut enc = Encoded {
            ids: Vec::with_capacity(pieces.len()),
            ranges: Vec::with_capacity(pieces.len()),
            sentence_start: Vec::with_capacity(pieces.len()),
        };
        let mut prev: Option<&str> = None;
        for (k, &(ws, a, b)) in pieces.iter().enumerate() {
            let word = &text[a..b];
            let end = if k + 1 == pieces.len() { text.len() } else { b };
            enc.ids.push(self.id(word));
            enc.ranges.push((ws, end));
            enc.sentence_start
                .push(prev.is_none_or(is_terminal) || text[ws..a].contains('\n'));
            prev = Some(word);
        }
        enc
    }

    /// Space-joined words.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id)?);
        }
        Ok(out)
    }
}
