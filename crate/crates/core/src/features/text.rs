use std::collections::BTreeMap;

/// Lowercases, splits on whitespace and peels leading/trailing punctuation
/// off each word as single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let chars: Vec<char> = word.chars().collect();
        let start = chars.iter().position(|c| c.is_alphanumeric());
        let Some(start) = start else {
            tokens.extend(chars.iter().map(char::to_string));
            continue;
        };
        let end = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap() + 1;
        tokens.extend(chars[..start].iter().map(char::to_string));
        tokens.push(chars[start..end].iter().collect());
        tokens.extend(chars[end..].iter().map(char::to_string));
    }
    tokens
}

/// Contiguous word n-gram counts for `n` in `n_range`, keyed `w<n>:a_b`.
pub fn word_ngrams(
    tokens: &[String],
    n_range: std::ops::RangeInclusive<usize>,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    add_word_ngrams(&mut counts, tokens, n_range);
    counts
}

pub(crate) fn add_word_ngrams(
    counts: &mut BTreeMap<String, usize>,
    tokens: &[String],
    n_range: std::ops::RangeInclusive<usize>,
) {
    for n in n_range {
        if n == 0 || tokens.len() < n {
            continue;
        }
        for gram in tokens.windows(n) {
            *counts.entry(format!("w{n}:{}", gram.join("_"))).or_default() += 1;
        }
    }
}

/// Contiguous character n-gram counts (whitespace included), keyed `c<n>:..`.
pub fn char_ngrams(text: &str, n_range: std::ops::RangeInclusive<usize>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    add_char_ngrams(&mut counts, text, n_range);
    counts
}

pub(crate) fn add_char_ngrams(
    counts: &mut BTreeMap<String, usize>,
    text: &str,
    n_range: std::ops::RangeInclusive<usize>,
) {
    let chars: Vec<char> = text.chars().collect();
    for n in n_range {
        if n == 0 || chars.len() < n {
            continue;
        }
        for gram in chars.windows(n) {
            let mut key = format!("c{n}:");
            key.extend(gram);
            *counts.entry(key).or_default() += 1;
        }
    }
}

/// `ln(chars)`, or 0 for texts of at most one character.
pub fn response_length(text: &str) -> f64 {
    let n = text.chars().count();
    if n <= 1 {
        0.0
    } else {
        (n as f64).ln()
    }
}
