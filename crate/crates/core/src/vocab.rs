//! Word-level vocabulary and tokenization for the text tower.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const NUM_SPECIALS: u32 = 4;

/// Word table. Ids 0..3 are reserved for PAD/BOS/EOS/UNK; file-loaded words
/// get `line_number + 4`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + NUM_SPECIALS))
            .collect();
        Vocabulary { words, index }
    }

    /// One word per line; ids follow line order after the reserved specials.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading vocabulary {}", path.display()), e))?;
        Ok(Self::from_words(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty())))
    }

    /// Built-in word list covering the caption templates and the synthetic
    /// shape categories.
    pub fn builtin() -> Self {
        Self::from_words([
            "a", "photo", "of", "normal", "damaged", "squares", "disks", "bars", "widget",
            "surface", "texture", "object",
        ])
    }

    /// Total id count including the reserved specials.
    pub fn size(&self) -> usize {
        self.words.len() + NUM_SPECIALS as usize
    }

    pub fn id_of(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }
}

/// A tokenized, right-padded caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Position of the final real token (the EOS) before padding.
    pub last_index: usize,
}

/// `[BOS] words… [EOS]` right-padded to `context_len`. Unknown words map to
/// UNK; text longer than the context is an input error.
pub fn tokenize(text: &str, vocab: &Vocabulary, context_len: usize) -> Result<TokenSequence> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let needed = words.len() + 2;
    if needed > context_len {
        return Err(Error::input(format!(
            "caption needs {needed} tokens but context length is {context_len}"
        )));
    }
    let mut ids = Vec::with_capacity(context_len);
    ids.push(BOS_ID);
    for w in &words {
        ids.push(vocab.id_of(w));
    }
    ids.push(EOS_ID);
    let last_index = ids.len() - 1;
    ids.resize(context_len, PAD_ID);
    Ok(TokenSequence { ids, last_index })
}
