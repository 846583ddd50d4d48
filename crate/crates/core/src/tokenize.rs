//! Token counting for corpus and prompt-length statistics.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// How text is split into tokens when counting lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerConfig {
    /// Unicode whitespace runs separate tokens.
    #[default]
    Whitespace,
    /// Runs of word characters, plus every other non-space character alone.
    WordPunct,
}

fn word_punct() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"))
}

impl TokenizerConfig {
    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizerConfig::Whitespace => text.split_whitespace().collect(),
            TokenizerConfig::WordPunct => word_punct().find_iter(text).map(|m| m.as_str()).collect(),
        }
    }

    pub fn count(&self, text: &str) -> usize {
        match self {
            TokenizerConfig::Whitespace => text.split_whitespace().count(),
            TokenizerConfig::WordPunct => word_punct().find_iter(text).count(),
        }
    }
}
