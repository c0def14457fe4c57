//! Text normalization shared by the perception rules and the offline embedder.

/// Words carrying no topical signal.
const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be",
    "been", "before", "being", "but", "by", "can", "could", "did", "do", "does", "for", "from",
    "had", "has", "have", "he", "her", "here", "him", "his", "i", "if", "in", "into", "is", "it",
    "its", "just", "me", "my", "no", "not", "now", "of", "on", "once", "or", "our", "out", "over",
    "she", "should", "so", "some", "than", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "those", "to", "under", "until", "up", "us", "was", "we", "were",
    "what", "when", "where", "which", "while", "who", "will", "with", "would", "you", "your",
];

/// Surface-word synonyms folded onto one concept before stemming.
const LEXICON: &[(&str, &str)] = &[
    ("staged", "sequence"),
    ("phased", "sequence"),
    ("stepwise", "sequence"),
    ("sequencing", "sequence"),
    ("sequenced", "sequence"),
    ("recovery", "recover"),
    ("recovered", "recover"),
    ("recovering", "recover"),
    ("recovers", "recover"),
    ("db", "database"),
    ("dbs", "database"),
    ("temps", "temperature"),
    ("reboot", "restart"),
    ("rebooted", "restart"),
    ("rebooting", "restart"),
    ("revert", "rollback"),
    ("reverted", "rollback"),
    ("reverting", "rollback"),
];

const SUFFIXES: &[(&str, &str)] = &[
    ("ations", ""),
    ("ation", ""),
    ("ings", ""),
    ("ing", ""),
    ("edly", ""),
    ("ied", "y"),
    ("ies", "y"),
    ("ed", ""),
    ("es", ""),
    ("ions", ""),
    ("ion", ""),
    ("ments", ""),
    ("ment", ""),
    ("ly", ""),
    ("s", ""),
    ("e", ""),
];

/// Lowercases, collapses whitespace and trims. Used for dedup keys.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Removes `{slot}` markers from an action template.
pub fn strip_slots(template: &str) -> String {
    let mut out = String::with_capacity(template.len());
    let mut depth = 0usize;
    for ch in template.chars() {
        match ch {
            '{' => depth += 1,
            '}' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(ch),
            _ => {}
        }
    }
    out
}

/// Suffix-stripping stemmer. Crude but stable, which is what the offline
/// embedder needs.
pub fn stem(word: &str) -> String {
    if word.len() <= 3 || !word.is_ascii() {
        return word.to_string();
    }
    for (suffix, replacement) in SUFFIXES {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.len() >= 3 {
                let mut stemmed = format!("{base}{replacement}");
                let bytes = stemmed.as_bytes();
                let n = bytes.len();
                if n >= 4
                    && bytes[n - 1] == bytes[n - 2]
                    && !matches!(bytes[n - 1], b's' | b'a' | b'e' | b'i' | b'o' | b'u')
                {
                    stemmed.pop();
                }
                return stemmed;
            }
        }
    }
    word.to_string()
}

/// Content tokens: lowercased, stopwords dropped, synonyms folded, stemmed.
pub fn tokens(text: &str) -> Vec<String> {
    let lowered = strip_slots(text).to_lowercase();
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(w))
        .map(|w| {
            let folded = LEXICON
                .iter()
                .find(|(from, _)| *from == w)
                .map(|(_, to)| *to)
                .unwrap_or(w);
            stem(folded)
        })
        .collect()
}

/// Stemmed token set check: does `text` contain the phrase's stems in order?
pub fn contains_stemmed_phrase(text_tokens: &[String], phrase: &str) -> bool {
    let needle = tokens(phrase);
    if needle.is_empty() || needle.len() > text_tokens.len() {
        return false;
    }
    text_tokens
        .windows(needle.len())
        .any(|window| window == needle.as_slice())
}

/// Truncates to at most `max` characters on a char boundary.
pub fn truncate_chars(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text.to_string(),
    }
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
