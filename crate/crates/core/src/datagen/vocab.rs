//! The fixed toy vocabulary shared by captions, box captions and VQA text.
//!
//! Every encoded sequence ends with [`EOT`], so final-token pooling sees the
//! whole phrase.

use crate::error::{Error, Result};

pub const EOT: u32 = 0;

pub const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

pub const GLYPH_NAMES: [&str; 8] = ["block", "ring", "plus", "ex", "hbar", "vbar", "checker", "dot"];

const WORDS: [&str; 21] = [
    "<eot>", "one", "two", "three", "and", "which", "object", "is", "present", "?", "how", "many", "objects",
    "block", "ring", "plus", "ex", "hbar", "vbar", "checker", "dot",
];

pub fn size() -> usize {
    WORDS.len()
}

pub fn word(id: u32) -> Option<&'static str> {
    WORDS.get(id as usize).copied()
}

pub fn id(word: &str) -> Option<u32> {
    WORDS.iter().position(|w| *w == word).map(|i| i as u32)
}

/// Whitespace-splits `text` into word ids.
pub fn words(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| id(w).ok_or_else(|| Error::invalid(format!("word `{w}` is not in the vocabulary"))))
        .collect()
}

/// [`words`] followed by the end-of-text marker.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    let mut out = words(text)?;
    out.push(EOT);
    Ok(out)
}

/// Inverse of [`encode`]; the trailing marker is dropped.
pub fn decode(tokens: &[u32]) -> Result<String> {
    let body = tokens.strip_suffix(&[EOT]).unwrap_or(tokens);
    let words = body
        .iter()
        .map(|&t| word(t).ok_or_else(|| Error::invalid(format!("token {t} is not in the vocabulary"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

pub fn glyph_token(glyph: usize) -> u32 {
    id(GLYPH_NAMES[glyph]).expect("glyph names are in the vocabulary")
}

pub fn count_token(count: usize) -> u32 {
    id(COUNT_WORDS[count - 1]).expect("count words are in the vocabulary")
}
