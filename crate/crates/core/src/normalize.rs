//! Text normalization shared by quote verification and theme merging.

/// Collapse every whitespace run to a single space and trim the ends.
pub fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Lowercase and map typographic quotes to their ASCII forms.
pub fn casefold(text: &str) -> String {
    text.chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{201B}' | '\u{2032}' => '\'',
            '\u{201C}' | '\u{201D}' | '\u{201F}' | '\u{2033}' | '\u{00AB}' | '\u{00BB}' => '"',
            '\u{00A0}' => ' ',
            other => other,
        })
        .flat_map(char::to_lowercase)
        .collect()
}

/// Normalized form of source text that quotes are searched in.
pub fn normalize_source(text: &str) -> String {
    collapse_whitespace(&casefold(text))
}

fn is_edge_noise(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '\u{2026}' | '\u{2013}' | '\u{2014}' | '\u{00BF}' | '\u{00A1}')
}

/// Normalized quote: whitespace collapsed, casefolded, and surrounding
/// punctuation and ellipses removed.
pub fn normalize_quote(quote: &str) -> String {
    let folded = normalize_source(quote);
    folded.trim_matches(is_edge_noise).to_string()
}

fn is_stop_punctuation(c: char) -> bool {
    matches!(
        c,
        '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '(' | ')' | '[' | ']' | '*' | '_' | '`' | '\u{2026}'
    )
}

/// Grouping key for theme names.
pub fn merge_key(theme: &str) -> String {
    let folded: String = casefold(theme)
        .chars()
        .map(|c| if is_stop_punctuation(c) { ' ' } else { c })
        .collect();
    collapse_whitespace(&folded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quote_edges_are_stripped() {
        assert_eq!(normalize_quote("  \"...I love the  flexibility…\"  "), "i love the flexibility");
        assert_eq!(normalize_quote("“It’s fine.”"), "it's fine");
        assert_eq!(normalize_quote("..."), "");
    }

    #[test]
    fn interior_punctuation_survives() {
        assert_eq!(normalize_quote("work-life balance, honestly"), "work-life balance, honestly");
    }

    #[test]
    fn merge_keys_group_cosmetic_variants() {
        assert_eq!(merge_key("Work-life balance"), merge_key("  work-life   Balance. "));
        assert_eq!(merge_key("\"Isolation\""), "isolation");
        assert_ne!(merge_key("Work-life balance"), merge_key("Work life balance!"));
    }

    proptest! {
        #[test]
        fn merge_key_is_idempotent(s in "\\PC{0,40}") {
            let once = merge_key(&s);
            prop_assert_eq!(merge_key(&once), once);
        }

        #[test]
        fn normalized_quote_of_a_substring_is_found(text in "[a-zA-Z ,.!?'\n\t]{1,80}", a in 0usize..80, len in 1usize..40) {
            let a = a.min(text.len());
            let b = (a + len).min(text.len());
            let q = normalize_quote(&text[a..b]);
            prop_assert!(normalize_source(&text).contains(&q));
        }
    }
}
