//! Byte-level tokenizer with a fixed merge table.
//!
//! Vocabulary layout:
//!   id 0            `<s>`  — decoder start (also used to pad decoder positions)
//!   id 1            `</s>` — reserved end-of-sequence marker
//!   ids 2..=257     the 256 raw bytes
//!   ids 258..       fixed multi-byte merges (see [`MERGES`])
//!
//! Tokenization is greedy longest-match over the merge table with single-byte
//! fallback, so no input can be out-of-vocabulary and `detokenize(tokenize(t))`
//! reproduces `t` exactly. The merge table is frozen in the repo: it covers the
//! synthetic task grammar plus common glue words, each in bare and
//! leading-space form.

use crate::error::{Error, Result};

pub const START_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
const BYTE_BASE: u32 = 2;
const MERGE_BASE: u32 = BYTE_BASE + 256;

/// Fixed merge table. Order defines token ids (`MERGE_BASE + index`); matching
/// is longest-first, so substring overlaps ("korv" in "korvan") are safe.
pub const MERGES: &[&str] = &[
    // task grammar: group nouns
    "korv", " korv", "zelt", " zelt", "marn", " marn", "plim", " plim", "drax", " drax", "fenn",
    " fenn",
    // task grammar: agent forms ("the korvan admitted it")
    "korvan", " korvan", "zeltan", " zeltan", "marnan", " marnan", "pliman", " pliman", "draxan",
    " draxan", "fennan", " fennan",
    // task grammar: abstention answers
    "unknown", " unknown", "cantsay", " cantsay", "nodata", " nodata", "unclear", " unclear",
    // glue words used by the instruction templates and contexts
    " the", "the", " worker", " and", " stood", " near", " depot", " later", " admitted", " it",
    " who", " took", " tools", "answer", " answer", "context", " context", "question", " question",
    "options", " options", " read", "read", " choose", "choose", " using", "using", " given",
    "given", " decide", " pick", "pick", " one", " of", " use", "use", " reply", " with",
    " consider", "consider", " then", " from", " follows", " is", " are", " to",
    // generic vocabulary so arbitrary prose stays compact
    " people", "people", " person", " poor", " rich", " a", " an", " in", " on", " at", " was",
    " were", " not", " no", " n/a", "n/a",
];

/// Total vocabulary size (specials + bytes + merges).
pub fn vocab_size() -> usize {
    MERGE_BASE as usize + MERGES.len()
}

/// Greedy longest-match tokenization with byte fallback.
///
/// Errors on empty input; never fails otherwise.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    let bytes = text.as_bytes();
    let mut ids = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        let mut best: Option<(usize, u32)> = None; // (length, id)
        for (idx, merge) in MERGES.iter().enumerate() {
            let m = merge.as_bytes();
            if m.len() > best.map_or(0, |(l, _)| l) && rest.starts_with(m) {
                best = Some((m.len(), MERGE_BASE + idx as u32));
            }
        }
        match best {
            Some((len, id)) => {
                ids.push(id);
                pos += len;
            }
            None => {
                ids.push(BYTE_BASE + bytes[pos] as u32);
                pos += 1;
            }
        }
    }
    Ok(ids)
}

/// Byte string for a single token id, if the id is in range.
pub fn token_bytes(id: u32) -> Option<Vec<u8>> {
    match id {
        START_ID => Some(b"<s>".to_vec()),
        EOS_ID => Some(b"</s>".to_vec()),
        _ if id >= BYTE_BASE && id < MERGE_BASE => Some(vec![(id - BYTE_BASE) as u8]),
        _ => MERGES
            .get((id.checked_sub(MERGE_BASE)?) as usize)
            .map(|s| s.as_bytes().to_vec()),
    }
}

/// Concatenates token byte strings. Lossless inverse of [`tokenize`] for ids it
/// produced; unknown ids are skipped, and invalid UTF-8 (possible only for
/// artificial id sequences, e.g. random token bags) is replaced lossily.
pub fn detokenize(ids: &[u32]) -> String {
    let mut bytes = Vec::new();
    for &id in ids {
        if id == START_ID || id == EOS_ID {
            continue;
        }
        if let Some(b) = token_bytes(id) {
            bytes.extend_from_slice(&b);
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(tokenize(""), Err(Error::EmptyText)));
    }

    #[test]
    fn fixed_text_tokenizes_deterministically() {
        let a = tokenize("poor people").unwrap();
        let b = tokenize("poor people").unwrap();
        assert_eq!(a, b);
        // "poor" has no bare merge, so it starts with byte tokens; " people" is
        // a single merge token.
        assert!(a.len() < "poor people".len());
    }

    #[test]
    fn longest_match_wins_over_prefix() {
        let korv = tokenize("korv").unwrap();
        let korvan = tokenize("korvan").unwrap();
        assert_eq!(korv.len(), 1);
        assert_eq!(korvan.len(), 1);
        assert_ne!(korv[0], korvan[0]);
    }

    #[test]
    fn spaced_and_bare_variants_are_distinct_single_tokens() {
        assert_eq!(tokenize("zelt").unwrap().len(), 1);
        assert_eq!(tokenize(" zelt").unwrap().len(), 1);
        assert_ne!(tokenize("zelt").unwrap(), tokenize(" zelt").unwrap());
    }

    #[test]
    fn round_trip_on_task_grammar() {
        let text = "the korv worker and the zelt worker stood near the depot later the korvan admitted it";
        assert_eq!(detokenize(&tokenize(text).unwrap()), text);
    }

    #[test]
    fn all_ids_below_vocab_size() {
        let ids = tokenize("answer: unknown \u{00e9}").unwrap();
        assert!(ids.iter().all(|&id| (id as usize) < vocab_size()));
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_text(text in "[ -~]{1,120}") {
            let ids = tokenize(&text).unwrap();
            prop_assert_eq!(detokenize(&ids), text);
        }

        #[test]
        fn round_trip_unicode_text(text in "\\PC{1,40}") {
            prop_assume!(!text.is_empty());
            let ids = tokenize(&text).unwrap();
            prop_assert_eq!(detokenize(&ids), text);
        }
    }
}
