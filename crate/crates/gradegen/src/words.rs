//! Word-level tokenization shared by the lexicon, corpus and metrics.
//!
//! Sentences here are plain text; "words" are whitespace-separated chunks
//! with leading and trailing punctuation peeled off as their own tokens.
//! Interior punctuation (apostrophes, hyphens) stays inside the word, so
//! "don't" is one word while "(tree)." is four tokens.

/// Characters treated as punctuation when splitting and classifying.
pub const PUNCTUATION_CHARS: &[char] = &[
    '.', ',', '!', '?', ';', ':', '\'', '"', '(', ')', '[', ']', '{', '}', '-', '…', '·', '、',
    '。', '！', '？', '；', '：', '（', '）', '「', '」', '“', '”', '‘', '’',
];

/// True when `c` is in [`PUNCTUATION_CHARS`].
pub fn is_punctuation_char(c: char) -> bool {
    PUNCTUATION_CHARS.contains(&c)
}

/// True when the word consists entirely of punctuation characters.
pub fn is_punctuation_word(word: &str) -> bool {
    !word.is_empty() && word.chars().all(is_punctuation_char)
}

/// The default punctuation word set used by lexicons: each punctuation
/// character as a one-character word.
pub fn default_punctuation_words() -> Vec<String> {
    PUNCTUATION_CHARS.iter().map(|c| c.to_string()).collect()
}

/// Split text into word tokens.
///
/// Whitespace separates chunks; each chunk then sheds leading and trailing
/// punctuation characters as individual tokens. Never returns empty tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut start = 0;
        let mut end = chars.len();
        while start < end && is_punctuation_char(chars[start]) {
            out.push(chars[start].to_string());
            start += 1;
        }
        // Peel from the back into a scratch list so output order is left to right.
        let mut tail = Vec::new();
        while end > start && is_punctuation_char(chars[end - 1]) {
            tail.push(chars[end - 1].to_string());
            end -= 1;
        }
        if end > start {
            out.push(chars[start..end].iter().collect());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}
