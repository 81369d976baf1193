//! Bundled word lists and loaders for user-supplied lexicon files.

use std::io::{self, BufRead};
use std::path::Path;

const COMPARATIVE_ADJECTIVES: &str = include_str!("../lexicons/comparative_adjectives.txt");
const NEGATIVE_PHRASES: &str = include_str!("../lexicons/negative_phrases.txt");
const AUX_VERBS: &str = include_str!("../lexicons/aux_verbs.txt");
const ADVERBS: &str = include_str!("../lexicons/adverbs_of_frequency.txt");
const ANTONYMS: &str = include_str!("../lexicons/antonyms.tsv");

fn lines(src: &str) -> Vec<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// The 290 comparative adjectives used for the dynamic adjective clause.
pub fn comparative_adjectives() -> Vec<String> {
    lines(COMPARATIVE_ADJECTIVES)
}

/// Pronouns, discourse connectives, relative-clause starters and stray
/// punctuation that must never appear in a generation.
pub fn negative_phrases() -> Vec<String> {
    lines(NEGATIVE_PHRASES)
}

pub fn aux_verbs() -> Vec<String> {
    lines(AUX_VERBS)
}

pub fn adverbs_of_frequency() -> Vec<String> {
    lines(ADVERBS)
}

/// Every (aux verb, adverb) combination, aux-major.
pub fn default_combos() -> Vec<(String, String)> {
    let adverbs = adverbs_of_frequency();
    aux_verbs()
        .into_iter()
        .flat_map(|aux| adverbs.iter().map(move |adv| (aux.clone(), adv.clone())))
        .collect()
}

pub fn default_antonyms() -> Vec<(String, String)> {
    parse_pairs(ANTONYMS).expect("bundled antonym list is well formed")
}

/// Reads one phrase per line, skipping blank lines.
pub fn read_phrase_file(path: &Path) -> io::Result<Vec<String>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim();
        if !line.is_empty() {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

/// Parses `phrase<TAB>antonym` lines.
pub fn parse_pairs(src: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => {
                out.push((a.trim().to_string(), b.trim().to_string()))
            }
            _ => return Err(format!("line {}: expected `phrase<TAB>antonym`", i + 1)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_sizes() {
        let adjectives = comparative_adjectives();
        assert_eq!(adjectives.len(), 290);
        let mut dedup = adjectives.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 290);
        assert_eq!(aux_verbs(), vec!["have", "need", "may", "are", "would"]);
        assert_eq!(default_combos().len(), 25);
        assert_eq!(default_combos()[0], ("have".to_string(), "typically".to_string()));
        assert!(negative_phrases().iter().any(|p| p == "because"));
        assert!(!default_antonyms().is_empty());
    }

    #[test]
    fn pair_parse_errors_name_line() {
        let err = parse_pairs("a\tb\nbroken\n").unwrap_err();
        assert!(err.starts_with("line 2"));
    }
}
