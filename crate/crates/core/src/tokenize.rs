//! Tokenizers used for chunking and length statistics.
//!
//! A tokenizer reports byte spans into the source text rather than owned
//! tokens. Chunk texts are produced by slicing the source between spans, so
//! the round-trip back to text is lossless.

use std::ops::Range;

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;

    /// Byte spans of the tokens in `text`, in order and non-overlapping.
    fn spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.spans(text).len()
    }

    fn tokens<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.spans(text).into_iter().map(|r| &text[r]).collect()
    }
}

/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token of its own; whitespace separates.
#[derive(Debug, Default, Clone, Copy)]
pub struct WordPunctTokenizer;

impl Tokenizer for WordPunctTokenizer {
    fn name(&self) -> &str {
        "word-punct"
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(s) = word_start.take() {
                out.push(s..i);
            }
            if !c.is_whitespace() {
                out.push(i..i + c.len_utf8());
            }
        }
        if let Some(s) = word_start {
            out.push(s..text.len());
        }
        out
    }
}

/// Whitespace-separated words; the fallback measuring stick for stats.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    out.push(s..i);
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            out.push(s..text.len());
        }
        out
    }
}

/// Looks a tokenizer up by its configured name.
pub fn by_name(name: &str) -> Option<Box<dyn Tokenizer>> {
    match name {
        "word-punct" => Some(Box::new(WordPunctTokenizer)),
        "whitespace" => Some(Box::new(WhitespaceTokenizer)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_punct_splits_punctuation() {
        let t = WordPunctTokenizer;
        assert_eq!(
            t.tokens("Let x=3, then f(x) is 9."),
            ["Let", "x", "=", "3", ",", "then", "f", "(", "x", ")", "is", "9", "."]
        );
        assert_eq!(t.tokens("  \n "), Vec::<&str>::new());
        assert_eq!(t.tokens("naïve café"), ["naïve", "café"]);
        assert_eq!(t.tokens("$\\boxed{5}$"), ["$", "\\", "boxed", "{", "5", "}", "$"]);
    }

    #[test]
    fn whitespace_words() {
        let t = WhitespaceTokenizer;
        assert_eq!(t.tokens(" a  b\tc\n"), ["a", "b", "c"]);
        assert_eq!(t.count(""), 0);
    }
}
