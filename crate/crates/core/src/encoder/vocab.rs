//! Word-level tokenizer and vocabulary with the special symbols the prompt
//! packer relies on.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Learned separator between the history and target segments.
pub const SEP: u32 = 4;
/// Image placeholder; its embedding is replaced by projected image features.
pub const IMG: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<image>"];
pub const IMAGE_PLACEHOLDER: &str = "<image>";

const HEADER: &str = "# seqrec-vocab v1";

/// Split text into lowercase word and punctuation tokens. The literal
/// `<image>` survives as one token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '<' && rest.starts_with(IMAGE_PLACEHOLDER) {
            flush(&mut word, &mut out);
            out.push(IMAGE_PLACEHOLDER.to_string());
            rest = &rest[IMAGE_PLACEHOLDER.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }
}

impl Vocab {
    /// Build a vocabulary, assigning ids in first-seen order after the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for text in texts {
            for w in split_words(text) {
                v.insert(w);
            }
        }
        v
    }

    fn insert(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
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

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Tokenize, growing the vocabulary with unseen words.
    pub fn encode_building(&mut self, text: &str) -> Vec<u32> {
        split_words(text).into_iter().map(|w| self.insert(w)).collect()
    }

    /// Render ids as text, skipping special symbols. Punctuation attaches to
    /// the preceding word, so re-tokenizing the output yields the same words.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            if Self::is_special(id) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            let is_word = tok.chars().next().is_some_and(char::is_alphanumeric);
            let opens = matches!(tok, "(" | "[" | "$" | "#");
            if !s.is_empty() && (is_word || opens) && !s.ends_with(['(', '[', '$', '#']) {
                s.push(' ');
            }
            s.push_str(tok);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER} specials={}", SPECIAL_TOKENS.join(","));
        for t in &self.tokens[SPECIAL_TOKENS.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let expected = format!("{HEADER} specials={}", SPECIAL_TOKENS.join(","));
        if header != expected {
            return Err(Error::format(
                path.display().to_string(),
                format!("unexpected header `{header}`"),
            ));
        }
        let mut v = Self::default();
        for (i, line) in lines.enumerate() {
            if line.is_empty() || v.index.contains_key(line) {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("bad or duplicate token on line {}", i + 2),
                ));
            }
            v.insert(line.to_string());
        }
        Ok(v)
    }
}
