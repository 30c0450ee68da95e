//! Small shared text helpers.

/// Normalize a caption for duplicate detection and many-to-many counting:
/// lowercase, collapse internal whitespace, strip terminal punctuation.
pub fn normalize_caption(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    let joined = collapsed.join(" ");
    joined
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim_end()
        .to_string()
}

/// Lowercased word tokens: split at whitespace and punctuation, keeping
/// alphanumeric runs.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}
