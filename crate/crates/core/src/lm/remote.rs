use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, TokenId, TokenSequence, Vocabulary};
use crate::remote::{RemoteClient, RemoteOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteLmOptions {
    #[serde(flatten)]
    pub remote: RemoteOptions,
    /// Entries requested per `/v1/logprobs` call; 0 asks for the full vocabulary.
    #[serde(default)]
    pub top_k: usize,
    /// Log-probability given to tokens the server left out of a top-k reply.
    #[serde(default = "default_floor")]
    pub floor_logprob: f64,
}

fn default_floor() -> f64 {
    -30.0
}

impl RemoteLmOptions {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteLmOptions {
            remote: RemoteOptions::new(base_url),
            top_k: 0,
            floor_logprob: default_floor(),
        }
    }
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<String>,
}

#[derive(Serialize)]
struct LogprobsRequest<'a> {
    prefix: Vec<&'a str>,
    top_k: usize,
}

#[derive(Deserialize)]
struct LogprobEntry {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct LogprobsResponse {
    entries: Vec<LogprobEntry>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    tokens: Vec<&'a str>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
}

/// Client for a logit server speaking the `/v1/tokenize`, `/v1/logprobs`
/// and `/v1/score` protocol.
///
/// The vocabulary is learned at connect time from a full-vocabulary
/// `/v1/logprobs` call with an empty prefix.
pub struct RemoteLm {
    client: RemoteClient,
    vocab: Vocabulary,
    top_k: usize,
    floor_logprob: f64,
}

impl RemoteLm {
    pub fn connect(options: RemoteLmOptions) -> Result<Self, LmError> {
        let client = RemoteClient::new(options.remote);
        let reply: LogprobsResponse =
            client.post("/v1/logprobs", &LogprobsRequest { prefix: vec![], top_k: 0 })?;
        if reply.entries.is_empty() {
            return Err(LmError::Protocol("remote vocabulary handshake returned no tokens".into()));
        }
        let vocab = Vocabulary::new(reply.entries.into_iter().map(|e| e.token).collect());
        Ok(RemoteLm { client, vocab, top_k: options.top_k, floor_logprob: options.floor_logprob })
    }

    fn surfaces<'a>(&'a self, ids: &[TokenId]) -> Result<Vec<&'a str>, LmError> {
        ids.iter()
            .map(|&id| self.vocab.token(id).ok_or(LmError::UnknownId(id)))
            .collect()
    }
}

impl LanguageModel for RemoteLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError> {
        if text.trim().is_empty() {
            return Err(LmError::EmptyText);
        }
        let reply: TokenizeResponse = self.client.post("/v1/tokenize", &TokenizeRequest { text })?;
        let ids = reply
            .tokens
            .iter()
            .map(|t| {
                self.vocab
                    .id(t)
                    .or(self.vocab.unk())
                    .ok_or_else(|| LmError::Protocol(format!("server token {t:?} is not in its vocabulary")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSequence { ids, surface: text.to_string() })
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let request = LogprobsRequest { prefix: self.surfaces(prefix)?, top_k: self.top_k };
        let reply: LogprobsResponse = self.client.post("/v1/logprobs", &request)?;
        let mut out = vec![self.floor_logprob; self.vocab.len()];
        for entry in reply.entries {
            if let Some(id) = self.vocab.id(&entry.token) {
                out[id as usize] = entry.logprob;
            }
        }
        Ok(out)
    }

    fn token_logprobs(
        &self,
        context: &[TokenId],
        continuation: &[TokenId],
    ) -> Result<Vec<f64>, LmError> {
        let mut all = context.to_vec();
        all.extend_from_slice(continuation);
        let reply: ScoreResponse =
            self.client.post("/v1/score", &ScoreRequest { tokens: self.surfaces(&all)? })?;
        if reply.logprobs.len() != all.len() {
            return Err(LmError::Protocol(format!(
                "/v1/score returned {} logprobs for {} tokens",
                reply.logprobs.len(),
                all.len()
            )));
        }
        Ok(reply.logprobs[context.len()..].to_vec())
    }

    fn name(&self) -> String {
        format!("remote:{}", self.client.base_url())
    }
}
