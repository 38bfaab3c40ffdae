/// Version tag recorded in evaluation reports so scores can be traced to the
/// normalizer that produced them.
pub const NORMALIZER_VERSION: &str = "lower-strip-punct-v1";

/// Lowercases, drops punctuation (apostrophes inside words are kept, hyphens
/// split words) and collapses runs of whitespace to single spaces.
pub fn normalize(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for c in s.chars() {
        if c.is_alphanumeric() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else if c.is_whitespace() || c == '-' {
            pending_space = true;
        }
    }
    // apostrophes that ended up at a word edge are quotes, not contractions
    out.split(' ')
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn words(s: &str) -> Vec<String> {
    normalize(s).split_whitespace().map(str::to_owned).collect()
}
