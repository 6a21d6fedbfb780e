//! Whitespace tokenization with byte offsets into the source text.

use std::ops::Range;

/// A whitespace-delimited token, as a byte range into its source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Token {
    pub start: usize,
    pub end: usize,
}

impl Token {
    pub fn range(self) -> Range<usize> {
        self.start..self.end
    }

    pub fn text(self, source: &str) -> &str {
        &source[self.start..self.end]
    }

    pub fn overlaps(self, bytes: &Range<usize>) -> bool {
        self.start < bytes.end && bytes.start < self.end
    }
}

pub fn whitespace_tokens(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                tokens.push(Token { start: s, end: i });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(Token {
            start: s,
            end: text.len(),
        });
    }
    tokens
}

/// Source substring covering tokens `first..=last`.
pub fn span_text<'a>(source: &'a str, tokens: &[Token], first: usize, last: usize) -> &'a str {
    &source[tokens[first].start..tokens[last].end]
}

/// Indices of tokens overlapping the byte range, as an inclusive pair.
pub fn covering_tokens(tokens: &[Token], bytes: &Range<usize>) -> Option<(usize, usize)> {
    let mut hit = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.overlaps(bytes))
        .map(|(i, _)| i);
    let first = hit.next()?;
    let last = hit.next_back().unwrap_or(first);
    Some((first, last))
}

/// Byte offset of the `char_offset`-th character; `text.len()` when it equals the char count.
pub fn char_to_byte(text: &str, char_offset: usize) -> Option<usize> {
    text.char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .nth(char_offset)
}

pub fn byte_to_char(text: &str, byte_offset: usize) -> usize {
    text[..byte_offset].chars().count()
}
