//! Word-level tokenization shared by the reference backend and the metrics.

/// Splits on whitespace and detaches punctuation into standalone tokens.
///
/// Hyphens and apostrophes stay attached when they sit between two
/// alphanumeric characters (`e-mail`, `don't`).
pub fn split_words(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else if (c == '-' || c == '\'')
            && !word.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric())
        {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

fn attaches_left(token: &str) -> bool {
    matches!(token, "," | "." | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "%")
}

fn attaches_right(token: &str) -> bool {
    matches!(token, "(" | "[" | "{")
}

/// Inverse of [`split_words`] for token streams it produced.
pub fn join_words<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let tok = tok.as_ref();
        if !glue_next && !attaches_left(tok) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = attaches_right(tok);
    }
    out
}

/// Lowercased word tokens, used wherever matching is case-insensitive.
pub fn lower_words(text: &str) -> Vec<String> {
    split_words(text).into_iter().map(|w| w.to_lowercase()).collect()
}

pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}
