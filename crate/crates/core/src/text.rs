//! Prompt construction and the frozen lookup-table text encoder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::error::{Error, Result};

pub const NULL_TOKEN: &str = "<null>";
pub const UNKNOWN_TOKEN: &str = "<unk>";
/// Reserved identifier used instead of a descriptive style phrase.
pub const RARE_TOKEN: &str = "[V*]";

/// Content text, optional style descriptor and a negative flag. Renders as
/// `content in descriptor style`, or just `content` without a descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub content_text: Vec<String>,
    pub style_descriptor: Option<Vec<String>>,
    #[serde(default)]
    pub is_negative: bool,
}

fn split_words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// `build_prompt("A cat", Some("watercolor painting"))` renders as
/// "A cat in watercolor painting style".
pub fn build_prompt(content: &str, style_descriptor: Option<&str>) -> Result<PromptSpec> {
    let content_text = split_words(content);
    if content_text.is_empty() {
        return Err(Error::InvalidArgument(
            "prompt content must not be empty".into(),
        ));
    }
    let style_descriptor = style_descriptor.map(split_words).filter(|d| !d.is_empty());
    Ok(PromptSpec {
        content_text,
        style_descriptor,
        is_negative: false,
    })
}

/// Removes the style descriptor; identity when there is none.
pub fn strip_style(p: &PromptSpec) -> PromptSpec {
    PromptSpec {
        style_descriptor: None,
        ..p.clone()
    }
}

impl PromptSpec {
    /// The empty negative prompt.
    pub fn negative() -> Self {
        Self {
            content_text: Vec::new(),
            style_descriptor: None,
            is_negative: true,
        }
    }

    pub fn words(&self) -> Vec<String> {
        let mut w = self.content_text.clone();
        if let Some(d) = &self.style_descriptor {
            w.push("in".into());
            w.extend(d.iter().cloned());
            w.push("style".into());
        }
        w
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }
}

impl std::fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text())
    }
}

/// Closed word list; lookups are case-insensitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Words used by the prompt templates besides shape and style words.
pub const TEMPLATE_WORDS: [&str; 9] = [
    "a", "in", "style", "on", "the", "canvas", "center", "small", "bold",
];

impl Vocabulary {
    /// Builds a vocabulary whose first three entries are the null, unknown and
    /// rare tokens.
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = vec![
            NULL_TOKEN.into(),
            UNKNOWN_TOKEN.into(),
            RARE_TOKEN.to_lowercase(),
        ];
        for w in words {
            let w = w.to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words: all, index }
    }

    pub fn from_catalog(cat: &Catalog) -> Self {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(cat.contents.iter().map(|c| c.shape.word().to_string()));
        for s in &cat.styles {
            words.extend(split_words(&s.descriptor));
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn null_id(&self) -> usize {
        0
    }

    pub fn unknown_id(&self) -> usize {
        1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(self.unknown_id())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids for a prompt; an empty prompt becomes the single null token.
    pub fn ids(&self, p: &PromptSpec) -> Vec<usize> {
        let ids: Vec<usize> = p.words().iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            vec![self.null_id()]
        } else {
            ids
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.words)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Self::from_words(serde_json::from_slice(bytes)?)
    }

    /// Inverse of [`Vocabulary::words`].
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != NULL_TOKEN || words[1] != UNKNOWN_TOKEN {
            return Err(Error::Format(
                "vocabulary must start with <null>, <unk>".into(),
            ));
        }
        Ok(Self::new(words.into_iter().skip(3)))
    }
}

/// `rows × width` matrix of looked-up embedding rows, plus the token ids that
/// produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub ids: Vec<usize>,
    pub width: usize,
    pub data: Vec<f64>,
}

impl TextEmbedding {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Builds an embedding from ids against `table` (`|V| × width`).
    pub fn from_ids(ids: Vec<usize>, table: &[f64], width: usize) -> Result<Self> {
        let vocab = table.len() / width.max(1);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in &ids {
            if id >= vocab {
                return Err(Error::Shape(format!(
                    "token id {id} outside table of {vocab} rows"
                )));
            }
            data.extend_from_slice(&table[id * width..(id + 1) * width]);
        }
        Ok(Self { ids, width, data })
    }
}

/// Looks up every token of `p` in `table` (`|V| × width`, row-major).
pub fn encode_text(
    p: &PromptSpec,
    vocab: &Vocabulary,
    table: &[f64],
    width: usize,
) -> Result<TextEmbedding> {
    if width == 0 || table.len() != vocab.len() * width {
        return Err(Error::Shape(format!(
            "embedding table has {} values, expected {} rows of width {width}",
            table.len(),
            vocab.len()
        )));
    }
    TextEmbedding::from_ids(vocab.ids(p), table, width)
}
