//! Closed scene-descriptor vocabulary used for prompts.

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Token 0 is the null token; the empty prompt embeds to it.
pub const NULL_TOKEN: TokenId = 0;

pub const WORDS: &[&str] = &[
    "<null>", "circle", "square", "red", "green", "blue", "yellow", "cyan", "magenta", "left", "right", "up",
    "down", "still",
];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn token(word: &str) -> Option<TokenId> {
    WORDS.iter().position(|w| *w == word)
}

pub fn word(id: TokenId) -> Option<&'static str> {
    WORDS.get(id).copied()
}

/// Splits on whitespace and maps every word to its token.
pub fn tokenize(prompt: &str) -> Result<Vec<TokenId>> {
    prompt
        .split_whitespace()
        .map(|w| token(w).ok_or_else(|| Error::Argument(alloc::format!("unknown prompt word `{w}`"))))
        .collect()
}

pub fn detokenize(tokens: &[TokenId]) -> alloc::string::String {
    let words: Vec<&str> = tokens.iter().map(|&t| word(t).unwrap_or("<?>")).collect();
    words.join(" ")
}
