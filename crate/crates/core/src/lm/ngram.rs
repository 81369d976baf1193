use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TokenId, TokenSequence, Vocabulary, UNK_TOKEN};
use crate::text;

/// Add-k smoothing constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub k: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing { k: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    total: u64,
    /// Sorted by token id.
    next: Vec<(TokenId, u64)>,
}

/// Word-level n-gram model with add-k smoothing.
///
/// The distribution after a prefix comes from the longest observed context
/// (at most `order - 1` tokens); unobserved contexts back off by dropping
/// their oldest token, down to the unigram distribution. Every level is
/// normalized on its own, so the result always sums to one.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    smoothing: Smoothing,
    vocab: Vocabulary,
    contexts: HashMap<Vec<TokenId>, ContextCounts>,
}

#[derive(Serialize, Deserialize)]
struct SerializedModel {
    order: usize,
    smoothing: Smoothing,
    vocab: Vec<String>,
    contexts: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>,
}

impl NgramModel {
    /// Trains on one sentence per line; contexts never span lines.
    pub fn train<I, S>(lines: I, order: usize, smoothing: Smoothing) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if order == 0 {
            return Err(LmError::Training("order must be at least 1".into()));
        }
        if !(smoothing.k >= 0.0 && smoothing.k.is_finite()) {
            return Err(LmError::Training("smoothing constant must be finite and >= 0".into()));
        }
        let sentences: Vec<Vec<String>> = lines
            .into_iter()
            .map(|l| text::split_words(l.as_ref()))
            .filter(|s| !s.is_empty())
            .collect();
        if sentences.is_empty() {
            return Err(LmError::Training("corpus is empty".into()));
        }

        let mut types: Vec<String> = sentences.iter().flatten().cloned().collect();
        types.push(UNK_TOKEN.to_string());
        types.sort();
        types.dedup();
        let vocab = Vocabulary::new(types);

        let mut counts: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, u64>> = BTreeMap::new();
        for sentence in &sentences {
            let ids: Vec<TokenId> = sentence.iter().map(|w| vocab.id(w).unwrap()).collect();
            for i in 0..ids.len() {
                for ctx_len in 0..order.min(i + 1) {
                    let ctx = ids[i - ctx_len..i].to_vec();
                    *counts.entry(ctx).or_default().entry(ids[i]).or_default() += 1;
                }
            }
        }
        let contexts = counts
            .into_iter()
            .map(|(ctx, next)| {
                let next: Vec<(TokenId, u64)> = next.into_iter().collect();
                let total = next.iter().map(|(_, c)| c).sum();
                (ctx, ContextCounts { total, next })
            })
            .collect();
        Ok(NgramModel { order, smoothing, vocab, contexts })
    }

    pub fn train_file(path: &Path, order: usize, smoothing: Smoothing) -> Result<Self, LmError> {
        let file = std::fs::File::open(path)?;
        let lines = std::io::BufReader::new(file)
            .lines()
            .collect::<Result<Vec<_>, _>>()?;
        Self::train(lines, order, smoothing)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn longest_context<'a>(&'a self, prefix: &[TokenId]) -> &'a ContextCounts {
        let max_len = (self.order - 1).min(prefix.len());
        for len in (0..=max_len).rev() {
            if let Some(c) = self.contexts.get(&prefix[prefix.len() - len..]) {
                if c.total > 0 {
                    return c;
                }
            }
        }
        // Training guarantees a non-empty unigram table.
        &self.contexts[&Vec::new()]
    }

    /// Unsmoothed relative frequency of `token` after the longest observed
    /// context of `prefix`.
    pub fn relative_frequency(&self, prefix: &[TokenId], token: TokenId) -> f64 {
        let ctx = self.longest_context(prefix);
        let count = ctx
            .next
            .binary_search_by_key(&token, |(t, _)| *t)
            .map(|i| ctx.next[i].1)
            .unwrap_or(0);
        count as f64 / ctx.total as f64
    }

    pub fn to_json(&self) -> Result<String, LmError> {
        let mut contexts: Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)> = self
            .contexts
            .iter()
            .map(|(k, v)| (k.clone(), v.next.clone()))
            .collect();
        contexts.sort();
        Ok(serde_json::to_string(&SerializedModel {
            order: self.order,
            smoothing: self.smoothing,
            vocab: self.vocab.tokens().to_vec(),
            contexts,
        })?)
    }

    pub fn from_json(src: &str) -> Result<Self, LmError> {
        let s: SerializedModel = serde_json::from_str(src)?;
        let vocab = Vocabulary::new(s.vocab);
        let contexts = s
            .contexts
            .into_iter()
            .map(|(ctx, next)| {
                let total = next.iter().map(|(_, c)| c).sum();
                (ctx, ContextCounts { total, next })
            })
            .collect::<HashMap<_, _>>();
        if !contexts.contains_key(&Vec::new()) {
            return Err(LmError::Training("model has no unigram table".into()));
        }
        Ok(NgramModel { order: s.order, smoothing: s.smoothing, vocab, contexts })
    }
}

impl LanguageModel for NgramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, input: &str) -> Result<TokenSequence, LmError> {
        let words = text::split_words(input);
        if words.is_empty() {
            return Err(LmError::EmptyText);
        }
        let unk = self.vocab.unk().expect("trained vocabulary carries <unk>");
        let ids: Vec<TokenId> = words.iter().map(|w| self.vocab.id(w).unwrap_or(unk)).collect();
        let surface = self.detokenize(&ids);
        Ok(TokenSequence { ids, surface })
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let ctx = self.longest_context(prefix);
        let v = self.vocab.len() as f64;
        let k = self.smoothing.k;
        let denom = ctx.total as f64 + k * v;
        let mut out = vec![(k / denom).ln(); self.vocab.len()];
        for &(tok, count) in &ctx.next {
            out[tok as usize] = ((count as f64 + k) / denom).ln();
        }
        Ok(out)
    }

    fn name(&self) -> String {
        format!("ngram-{}", self.order)
    }
}
