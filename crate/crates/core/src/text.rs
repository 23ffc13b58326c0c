//! Concept-name normalization and string similarity used for knowledge-base matching.

use unicode_normalization::UnicodeNormalization;

/// Folds a display name into its matching key.
///
/// NFC, lowercase, trim, collapse internal whitespace runs to a single space,
/// and strip trailing punctuation.
pub fn normalize_name(name: &str) -> String {
    let composed: String = name.nfc().collect::<String>().to_lowercase();
    let collapsed = composed.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace() || is_unicode_punct(c))
        .to_string()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{3001}' | '\u{3002}' | '\u{ff01}' | '\u{ff0c}' | '\u{ff0e}'
    )
}

/// Normalized Levenshtein similarity in `[0, 1]` over Unicode scalar values.
pub fn similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}
