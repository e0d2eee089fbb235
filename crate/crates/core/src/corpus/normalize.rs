//! Transcript normalization and the 41-character corpus alphabet.

/// Ordered character vocabulary. Index `i` here becomes transducer output
/// `i + 1`; output 0 is blank.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789'-.,";

pub fn alphabet() -> Vec<char> {
    ALPHABET.chars().collect()
}

pub fn char_index(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

pub fn in_alphabet(c: char) -> bool {
    char_index(c).is_some()
}

/// Strips bracketed non-lexical tokens (`[noise]`, `[laughter]`, ...) and
/// `<unk>`, lower-cases, drops characters outside the alphabet and collapses
/// whitespace.
pub fn normalize_transcript(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut cleaned = String::with_capacity(lowered.len());
    let mut rest = lowered.as_str();
    while !rest.is_empty() {
        if rest.starts_with('[') {
            if let Some(end) = rest.find(']') {
                cleaned.push(' ');
                rest = &rest[end + 1..];
                continue;
            }
        }
        if let Some(tail) = rest.strip_prefix("<unk>") {
            cleaned.push(' ');
            rest = tail;
            continue;
        }
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            cleaned.push(' ');
        } else if in_alphabet(c) {
            cleaned.push(c);
        }
        rest = &rest[c.len_utf8()..];
    }
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alphabet_has_41_distinct_chars() {
        let a = alphabet();
        assert_eq!(a.len(), 41);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 41);
    }

    #[test]
    fn strips_non_lexical_tokens() {
        assert_eq!(normalize_transcript("hello [noise] there"), "hello there");
        assert_eq!(normalize_transcript("[laughter] <unk>"), "");
        assert_eq!(normalize_transcript("Pay  my BILL"), "pay my bill");
        assert_eq!(normalize_transcript("[NOISE]ok<UNK>ay"), "ok ay");
    }

    #[test]
    fn drops_out_of_alphabet_chars() {
        assert_eq!(normalize_transcript("what's up? #1!"), "what's up 1");
    }

    proptest! {
        #[test]
        fn idempotent(raw in "\\PC{0,40}") {
            let once = normalize_transcript(&raw);
            prop_assert_eq!(normalize_transcript(&once), once.clone());
            prop_assert!(once.chars().all(in_alphabet));
            prop_assert!(!once.contains("  "));
        }

        #[test]
        fn idempotent_with_tokens(parts in proptest::collection::vec(
            proptest::sample::select(vec!["[noise]", "[laughter]", "<unk>", "[a", "<", "]", "[", "Hi", " ", "x9"]), 0..12)) {
            let raw: String = parts.concat();
            let once = normalize_transcript(&raw);
            prop_assert_eq!(normalize_transcript(&once), once);
        }
    }
}
