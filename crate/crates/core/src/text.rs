//! Whitespace tokenization with punctuation detached.

/// Splits on whitespace, then emits every punctuation character as its own
/// token. Case is preserved; lowercasing happens at vocabulary lookup.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detaches_punctuation() {
        assert_eq!(
            tokenize("Joe Biden, America's  president."),
            vec!["Joe", "Biden", ",", "America", "'", "s", "president", "."]
        );
        assert!(tokenize("   ").is_empty());
    }
}
