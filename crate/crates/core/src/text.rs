//! Word tokenisation shared by the lexical detector, the template realiser
//! and the hashing encoder.

/// A lowercased word together with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits on anything that is not alphanumeric (apostrophes stay inside
/// words) and lowercases each token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (is_word_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(make_token(text, s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s, text.len()));
    }
    out
}

fn make_token(text: &str, start: usize, end: usize) -> Token {
    Token { word: text[start..end].trim_matches('\'').to_lowercase(), start, end }
}

/// Lowercased words only.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.word).filter(|w| !w.is_empty()).collect()
}

/// Position of the first occurrence of `needle` as a contiguous run of
/// tokens inside `haystack`.
pub fn find_phrase(haystack: &[Token], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).find(|&i| needle.iter().enumerate().all(|(j, w)| haystack[i + j].word == *w))
}
