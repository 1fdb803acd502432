//! Fixed vocabulary and prompt embeddings.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 8;
pub const NULL_TOKEN: TokenId = TokenId(0);

/// The fixed vocabulary. Entries wrapped in angle brackets (other than
/// `<null>`) are style-trigger tokens reserved for adapters.
pub const VOCAB: &[&str] = &[
    "<null>",
    "style",
    "circle",
    "square",
    "triangle",
    "shape",
    "image",
    "a",
    "<sss>",
    "<stripe>",
    "<invert>",
    "<saturate>",
    "<s1>",
    "<s2>",
    "<s3>",
    "<s4>",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn lookup(word: &str) -> Result<Self> {
        VOCAB
            .iter()
            .position(|w| *w == word)
            .map(|i| TokenId(i as u32))
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(self) -> &'static str {
        VOCAB[self.0 as usize]
    }

    pub fn is_style_trigger(self) -> bool {
        self != NULL_TOKEN && self.word().starts_with('<')
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Splits on whitespace after dropping `,` and `.`; the empty prompt is the
/// NULL prompt.
pub fn tokenize(prompt: &str) -> Result<Vec<TokenId>> {
    let cleaned: String = prompt
        .to_lowercase()
        .chars()
        .map(|c| if c == ',' || c == '.' { ' ' } else { c })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        return Ok(vec![NULL_TOKEN]);
    }
    let tokens = words
        .iter()
        .map(|w| TokenId::lookup(w))
        .collect::<Result<Vec<_>>>()?;
    validate_tokens(&tokens)?;
    Ok(tokens)
}

pub fn validate_tokens(tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidRange("prompt must contain at least one token".into()));
    }
    if tokens.len() > MAX_TOKENS {
        return Err(Error::PromptTooLong {
            len: tokens.len(),
            max: MAX_TOKENS,
        });
    }
    if let Some(t) = tokens.iter().find(|t| t.index() >= VOCAB.len()) {
        return Err(Error::UnknownToken(format!("#{}", t.0)));
    }
    if tokens.len() > 1 && tokens.contains(&NULL_TOKEN) {
        return Err(Error::InvalidRange("the NULL token must appear alone".into()));
    }
    Ok(())
}

/// Text conditioning: one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<TokenId>,
    pub vectors: Array2<f32>,
}

impl PromptEmbedding {
    pub fn is_null(&self) -> bool {
        self.tokens == [NULL_TOKEN]
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.tokens.contains(&token)
    }
}
