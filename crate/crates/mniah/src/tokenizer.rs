//! Token counting and token-offset services.
//!
//! All construction and measurement code in this crate works in token
//! space, and every emitted artifact records the tokenizer profile it was
//! built with. Two profile kinds exist:
//!
//! - `builtin-whitespace`: splits on Unicode whitespace with punctuation
//!   kept attached to its word. Fully deterministic and dependency-free;
//!   this is the profile all offline tests run under.
//! - `external-model-vocab`: greedy longest-match over a vocabulary file
//!   (one token per line), for callers that need token counts aligned to
//!   a specific model vocabulary.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::error::{Classify, ErrorClass};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("profile '{0}' uses an external vocabulary but no vocab_ref is set")]
    MissingVocabRef(String),
    #[error("vocabulary file {path}: {source}")]
    VocabUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file {0} contains no tokens")]
    VocabEmpty(PathBuf),
}

impl Classify for TokenizerError {
    fn class(&self) -> ErrorClass {
        ErrorClass::Config
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    BuiltinWhitespace,
    ExternalModelVocab,
}

/// Names a tokenization scheme. The profile name is recorded in every
/// instance, trace and report so lengths stay interpretable after the fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerProfile {
    pub name: String,
    pub kind: TokenizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_ref: Option<PathBuf>,
}

impl TokenizerProfile {
    pub fn builtin(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: TokenizerKind::BuiltinWhitespace,
            vocab_ref: None,
        }
    }

    pub fn external(name: impl Into<String>, vocab: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            kind: TokenizerKind::ExternalModelVocab,
            vocab_ref: Some(vocab.into()),
        }
    }
}

impl Default for TokenizerProfile {
    fn default() -> Self {
        Self::builtin("builtin-ws")
    }
}

/// One token of an [`Encoding`]: its 0-based index and the byte span it
/// occupies in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

/// Result of encoding a text: token spans plus the delimiter runs between
/// them, so the exact source text can be reconstructed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub spans: Vec<TokenSpan>,
    pieces: Vec<String>,
    /// gaps[i] precedes token i; the final entry is the trailing delimiter run.
    gaps: Vec<String>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn token_text(&self, index: usize) -> &str {
        &self.pieces[index]
    }

    /// Reconstructs the exact text this encoding was produced from.
    pub fn decode(&self) -> String {
        let mut out = String::new();
        for (i, piece) in self.pieces.iter().enumerate() {
            out.push_str(&self.gaps[i]);
            out.push_str(piece);
        }
        out.push_str(self.gaps.last().map(String::as_str).unwrap_or(""));
        out
    }
}

/// A resolved tokenizer: profile plus any loaded vocabulary. Stateless
/// after construction and safe to share across worker threads.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    profile: TokenizerProfile,
    vocab: Option<Vocab>,
}

#[derive(Debug, Clone)]
struct Vocab {
    tokens: HashSet<String>,
    max_bytes: usize,
}

impl Tokenizer {
    /// Resolves a profile, loading the vocabulary file for external kinds.
    pub fn resolve(profile: TokenizerProfile) -> Result<Self, TokenizerError> {
        let vocab = match profile.kind {
            TokenizerKind::BuiltinWhitespace => None,
            TokenizerKind::ExternalModelVocab => {
                let path = profile
                    .vocab_ref
                    .as_deref()
                    .ok_or_else(|| TokenizerError::MissingVocabRef(profile.name.clone()))?;
                Some(Vocab::load(path)?)
            }
        };
        Ok(Self { profile, vocab })
    }

    pub fn builtin() -> Self {
        Self {
            profile: TokenizerProfile::default(),
            vocab: None,
        }
    }

    pub fn profile(&self) -> &TokenizerProfile {
        &self.profile
    }

    pub fn profile_name(&self) -> &str {
        &self.profile.name
    }

    /// Number of tokens in `text` under this profile.
    pub fn count_tokens(&self, text: &str) -> usize {
        match &self.vocab {
            None => text.split_whitespace().count(),
            Some(v) => v.count(text),
        }
    }

    /// Full encoding with byte spans and reconstructable delimiters.
    pub fn encode(&self, text: &str) -> Encoding {
        match &self.vocab {
            None => encode_whitespace(text),
            Some(v) => v.encode(text),
        }
    }

    /// Token spans only, in strictly increasing start order.
    pub fn encode_with_offsets(&self, text: &str) -> Vec<TokenSpan> {
        self.encode(text).spans
    }

    /// Longest prefix of `text` holding at most `n` tokens, ending on a
    /// token boundary. Returns `text` unchanged when it already fits.
    pub fn truncate_to_tokens<'a>(&self, text: &'a str, n: usize) -> &'a str {
        if n == 0 {
            return "";
        }
        let spans = self.encode_with_offsets(text);
        if spans.len() <= n {
            return text;
        }
        &text[..spans[n - 1].end]
    }
}

fn encode_whitespace(text: &str) -> Encoding {
    let mut spans = Vec::new();
    let mut pieces = Vec::new();
    let mut gaps = Vec::new();
    let mut gap_start = 0usize;
    let mut token_start: Option<usize> = None;

    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(start) = token_start.take() {
                spans.push(TokenSpan {
                    index: spans.len(),
                    start,
                    end: idx,
                });
                pieces.push(text[start..idx].to_string());
                gap_start = idx;
            }
        } else if token_start.is_none() {
            gaps.push(text[gap_start..idx].to_string());
            token_start = Some(idx);
        }
    }
    if let Some(start) = token_start {
        spans.push(TokenSpan {
            index: spans.len(),
            start,
            end: text.len(),
        });
        pieces.push(text[start..].to_string());
        gaps.push(String::new());
    } else {
        gaps.push(text[gap_start..].to_string());
    }
    Encoding { spans, pieces, gaps }
}

impl Vocab {
    fn load(path: &Path) -> Result<Self, TokenizerError> {
        let raw = std::fs::read_to_string(path).map_err(|source| TokenizerError::VocabUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        let tokens: HashSet<String> = raw
            .lines()
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.is_empty() {
            return Err(TokenizerError::VocabEmpty(path.to_path_buf()));
        }
        let max_bytes = tokens.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(Self { tokens, max_bytes })
    }

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    /// Greedy longest-match; characters not covered by any vocabulary entry
    /// become single-character tokens, so every character is covered.
    fn encode(&self, text: &str) -> Encoding {
        let mut spans = Vec::new();
        let mut pieces = Vec::new();
        let mut pos = 0usize;
        while pos < text.len() {
            let limit = (pos + self.max_bytes).min(text.len());
            let mut end = pos
                + text[pos..]
                    .chars()
                    .next()
                    .map(char::len_utf8)
                    .unwrap_or(1);
            let mut cursor = limit;
            while cursor > pos {
                if text.is_char_boundary(cursor) {
                    if self.tokens.contains(&text[pos..cursor]) {
                        end = cursor;
                        break;
                    }
                    cursor -= 1;
                } else {
                    cursor -= 1;
                }
            }
            spans.push(TokenSpan {
                index: spans.len(),
                start: pos,
                end,
            });
            pieces.push(text[pos..end].to_string());
            pos = end;
        }
        let gaps = vec![String::new(); pieces.len() + 1];
        Encoding { spans, pieces, gaps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn builtin() -> Tokenizer {
        Tokenizer::builtin()
    }

    #[test]
    fn empty_text_counts_zero() {
        assert_eq!(builtin().count_tokens(""), 0);
    }

    #[test]
    fn whitespace_split_counts_words() {
        assert_eq!(builtin().count_tokens("a b c"), 3);
        assert_eq!(builtin().count_tokens("  a\tb\nc  "), 3);
    }

    #[test]
    fn count_matches_encode_length() {
        let t = builtin();
        for text in ["", "one", "a b c", " leading and trailing ", "punct, stays. glued!"] {
            assert_eq!(t.count_tokens(text), t.encode(text).len());
        }
    }

    #[test]
    fn offsets_for_two_words() {
        let spans = builtin().encode_with_offsets("ab cd");
        assert_eq!(spans.len(), 2);
        assert_eq!((spans[0].start, spans[0].end), (0, 2));
        assert_eq!((spans[1].start, spans[1].end), (3, 5));
    }

    #[test]
    fn offsets_empty() {
        assert!(builtin().encode_with_offsets("").is_empty());
    }

    #[test]
    fn truncate_basics() {
        let t = builtin();
        assert_eq!(t.truncate_to_tokens("a b c", 0), "");
        assert_eq!(t.truncate_to_tokens("a b c", 2), "a b");
        assert_eq!(t.truncate_to_tokens("a b c", 3), "a b c");
        assert_eq!(t.truncate_to_tokens("a b c", 10), "a b c");
    }

    #[test]
    fn thousand_word_fixture_counts_exactly() {
        let text = crate::fixtures::word_block(1000, 11);
        // Independent oracle: manual state-machine word counter.
        let mut oracle = 0usize;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_whitespace() {
                in_word = false;
            } else if !in_word {
                in_word = true;
                oracle += 1;
            }
        }
        assert_eq!(oracle, 1000);
        assert_eq!(builtin().count_tokens(&text), 1000);
    }

    #[test]
    fn truncate_to_500_recounts_500() {
        let t = builtin();
        let text = crate::fixtures::word_block(1200, 3);
        let cut = t.truncate_to_tokens(&text, 500);
        assert_eq!(t.count_tokens(cut), 500);
        assert!(text.starts_with(cut));
    }

    #[test]
    fn external_vocab_greedy_longest_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "ab\nabc\nc\n").unwrap();
        let t = Tokenizer::resolve(TokenizerProfile::external("ext", &path)).unwrap();
        // "abc" matches the longest entry, then "ab" + unknown "d".
        assert_eq!(t.count_tokens("abc"), 1);
        assert_eq!(t.count_tokens("abd"), 2);
        let enc = t.encode("abcabd");
        assert_eq!(enc.decode(), "abcabd");
    }

    #[test]
    fn missing_vocab_is_config_error() {
        let profile = TokenizerProfile::external("ext", "/nonexistent/vocab.txt");
        let err = Tokenizer::resolve(profile).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Config);
    }

    proptest! {
        #[test]
        fn builtin_roundtrip_is_exact(text in "\\PC{0,120}") {
            let enc = builtin().encode(&text);
            prop_assert_eq!(enc.decode(), text);
        }

        #[test]
        fn spans_strictly_increase(text in "\\PC{0,120}") {
            let spans = builtin().encode_with_offsets(&text);
            for w in spans.windows(2) {
                prop_assert!(w[0].start < w[1].start);
                prop_assert!(w[0].end <= w[1].start);
            }
        }

        #[test]
        fn truncate_respects_budget(text in "[a-z ]{0,200}", n in 0usize..40) {
            let t = builtin();
            let cut = t.truncate_to_tokens(&text, n);
            let total = t.count_tokens(&text);
            prop_assert!(t.count_tokens(cut) <= n);
            if total >= n {
                prop_assert_eq!(t.count_tokens(cut), n);
            } else {
                prop_assert_eq!(cut, text.as_str());
            }
        }
    }
}
