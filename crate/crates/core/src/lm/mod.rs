//! Language-model abstraction consumed by prompt scoring and the decoder.

use std::collections::HashMap;

use thiserror::Error;

use crate::remote::RemoteError;

mod ngram;
mod remote;

pub use ngram::{NgramModel, Smoothing};
pub use remote::{RemoteLm, RemoteLmOptions};

pub type TokenId = u32;

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("training failed: {0}")]
    Training(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

impl LmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LmError::Remote(e) if e.retryable)
    }
}

/// Bidirectional token string / id map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: Option<TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect::<HashMap<_, _>>();
        let unk = index.get(UNK_TOKEN).copied();
        Vocabulary { tokens, index, unk }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn unk(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids plus the detokenized surface they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub surface: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A scoring / generation backend.
///
/// Implementations must be safe for concurrent read-only use: decode workers
/// share one backend across threads.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError>;

    /// Log-probabilities of every vocabulary entry following `prefix`.
    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError>;

    fn detokenize(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&id| self.vocab().token(id).unwrap_or(UNK_TOKEN))
            .collect();
        crate::text::join_words(&words)
    }

    /// Per-token log-probabilities of `continuation` given `context`.
    fn token_logprobs(
        &self,
        context: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<Vec<f64>, LmError> {
        let mut prefix = context.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for &tok in continuation {
            let lp = self.next_logprobs(&prefix)?;
            out.push(*lp.get(tok as usize).ok_or(LmError::UnknownId(tok))?);
            prefix.push(tok);
        }
        Ok(out)
    }

    fn name(&self) -> String;
}

/// Length-penalized sequence score.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub logprob_sum: f64,
    pub length: usize,
    pub alpha: f64,
    pub value: f64,
    pub token_logprobs: Vec<f64>,
}

impl SequenceScore {
    /// `exp(-value)`, the quantity used to rank prompts.
    pub fn perplexity(&self) -> f64 {
        (-self.value).exp()
    }
}

/// `logprob_sum / length^alpha`.
pub fn length_penalized(logprob_sum: f64, length: usize, alpha: f64) -> f64 {
    logprob_sum / (length as f64).powf(alpha)
}

/// Scores a whole sequence from an empty context.
pub fn score_sequence(
    lm: &dyn LanguageModel,
    seq: &[TokenId],
    alpha: f64,
) -> Result<SequenceScore, LmError> {
    score_continuation(lm, &[], seq, alpha)
}

/// Scores `continuation` conditioned on `context`; only the continuation
/// counts toward the length.
pub fn score_continuation(
    lm: &dyn LanguageModel,
    context: &[TokenId],
    continuation: &[TokenId],
    alpha: f64,
) -> Result<SequenceScore, LmError> {
    if continuation.is_empty() {
        return Err(LmError::EmptySequence);
    }
    let token_logprobs = lm.token_logprobs(context, continuation)?;
    let logprob_sum = token_logprobs.iter().fold(0.0, |acc, lp| acc + lp);
    Ok(SequenceScore {
        logprob_sum,
        length: continuation.len(),
        alpha,
        value: length_penalized(logprob_sum, continuation.len(), alpha),
        token_logprobs,
    })
}
