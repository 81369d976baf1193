//! Relation-phrase extraction and template parsing for generated statements.

use std::collections::HashSet;

use crate::text;

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "been", "being", "but", "by", "can", "could", "for", "from", "had",
    "has", "have", "in", "is", "it", "its", "may", "might", "of", "on", "or", "should", "than", "that", "the",
    "their", "them", "these", "they", "this", "those", "to", "was", "were", "will", "with", "would",
];

const QUANTIFIERS: &[&str] = &["more", "less", "fewer"];

fn is_content_word(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_alphabetic) && !STOPWORDS.contains(&w)
}

/// Finds the comparative relation phrase in a statement.
#[derive(Debug, Clone)]
pub struct RelationExtractor {
    adjectives: HashSet<String>,
}

impl RelationExtractor {
    pub fn new<I, S>(adjectives: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        RelationExtractor { adjectives: adjectives.into_iter().map(|a| a.as_ref().trim().to_lowercase()).collect() }
    }

    /// First match in token order: "more/less/fewer" followed by a content
    /// word, or a lexicon adjective. Lowercased.
    pub fn extract(&self, text: &str) -> Option<String> {
        let words = text::lower_words(text);
        for (i, w) in words.iter().enumerate() {
            if QUANTIFIERS.contains(&w.as_str()) {
                if let Some(next) = words.get(i + 1).filter(|n| is_content_word(n)) {
                    return Some(format!("{w} {next}"));
                }
            }
            if self.adjectives.contains(w) {
                return Some(w.clone());
            }
        }
        None
    }
}

/// First relation phrase of `text`; see [`RelationExtractor::extract`].
pub fn extract_relation(text: &str, lexicon: &RelationExtractor) -> Option<String> {
    lexicon.extract(text)
}

/// A statement of the form "Compared to A, B ...".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement<'a> {
    /// The "compared to" entity.
    pub reference: &'a str,
    /// Everything after the comma: subject and predicate.
    pub rest: &'a str,
}

pub fn parse_statement(text: &str) -> Option<Statement<'_>> {
    const LEAD: &str = "compared to ";
    let t = text.trim();
    if t.len() < LEAD.len() || !t[..LEAD.len()].eq_ignore_ascii_case(LEAD) {
        return None;
    }
    let body = &t[LEAD.len()..];
    let comma = body.find(',')?;
    let reference = body[..comma].trim();
    let rest = body[comma + 1..].trim();
    if reference.is_empty() || rest.is_empty() {
        return None;
    }
    Some(Statement { reference, rest })
}

/// `rest` with a leading `subject` removed (case-insensitive, whole words).
pub fn strip_subject<'a>(rest: &'a str, subject: &str) -> Option<&'a str> {
    let n = subject.len();
    if rest.len() < n || !rest.is_char_boundary(n) || !rest[..n].eq_ignore_ascii_case(subject) {
        return None;
    }
    let tail = &rest[n..];
    if tail.is_empty() || tail.starts_with(char::is_whitespace) {
        Some(tail.trim_start())
    } else {
        None
    }
}

/// Relation of a templated statement about a known pair, ignoring words that
/// belong to the entity names themselves.
pub fn statement_relation(extractor: &RelationExtractor, text: &str, entity_a: &str, entity_b: &str) -> Option<String> {
    let predicate = parse_statement(text)
        .filter(|s| s.reference.eq_ignore_ascii_case(entity_a))
        .and_then(|s| strip_subject(s.rest, entity_b))
        .unwrap_or(text);
    extractor.extract(predicate)
}
