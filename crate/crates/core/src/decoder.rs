//! Lexically constrained beam search.
//!
//! Each step expands every live hypothesis over a candidate set (the most
//! probable tokens plus whatever can advance an open positive phrase), prunes
//! candidates that can no longer lead to a valid output, keeps only those
//! within `tolerance` of the best satisfied-clause count, and then fills the
//! beam with the best candidate of every satisfied-count group followed by
//! the globally best remainder. Finished hypotheses that satisfy every
//! positive clause are banked and ranked by their length-penalized
//! log-probability.

use std::cmp::Ordering;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{
    compile, ClauseOrdering, ClauseRole, ConstraintParams, ConstraintSet, ConstraintState, OrderValidity,
};
use crate::entity::{ComparativePrompt, EntityPair};
use crate::lm::{length_penalized, LanguageModel, LmError, TokenId};
use crate::text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// Length-penalty exponent for the final ranking score.
    pub alpha: f64,
    /// Size of n-grams that may not repeat within a continuation; 0 disables.
    pub no_repeat_ngram: usize,
    pub tolerance: usize,
    /// Maximum continuation length in tokens.
    pub max_length: usize,
    pub num_return: usize,
    /// Number of most probable tokens expanded per hypothesis, on top of the
    /// constraint tokens.
    pub expansion_width: usize,
    /// Tokens that end a hypothesis.
    pub terminators: Vec<String>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 15,
            alpha: 0.1,
            no_repeat_ngram: 3,
            tolerance: 3,
            max_length: 32,
            num_return: 10,
            expansion_width: 128,
            terminators: vec![".".into(), "</s>".into()],
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam_size == 0 {
            return Err("beam_size must be at least 1".into());
        }
        if self.max_length == 0 {
            return Err("max_length must be at least 1".into());
        }
        if self.num_return == 0 {
            return Err("num_return must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err("alpha must be a non-negative number".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Continuation tokens, prompt excluded.
    pub tokens: Vec<TokenId>,
    pub logprob_sum: f64,
    pub state: ConstraintState,
    /// Constraint reward `r` for the latest step.
    pub progress: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root(state: ConstraintState) -> Self {
        Hypothesis { tokens: Vec::new(), logprob_sum: 0.0, state, progress: 0.0, finished: false }
    }
}

/// `logprob_sum + λ·r`, with the constraint term scaled by β on steps that
/// advanced a positive phrase.
pub fn step_score(h: &Hypothesis, set: &ConstraintSet, made_progress: bool) -> f64 {
    score_parts(h.logprob_sum, h.progress, set, made_progress)
}

fn score_parts(logprob_sum: f64, progress: f64, set: &ConstraintSet, made_progress: bool) -> f64 {
    let mut reward = set.lambda() * progress;
    if made_progress {
        reward *= set.beta();
    }
    logprob_sum + reward
}

/// A banked hypothesis with its ranking score.
#[derive(Debug, Clone, PartialEq)]
pub struct Finished {
    pub tokens: Vec<TokenId>,
    pub logprob_sum: f64,
    pub score: f64,
    pub state: ConstraintState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Beam steps taken.
    pub steps: usize,
    /// Hypotheses expanded (one backend call each).
    pub expansions: usize,
    /// Candidate continuations scored.
    pub candidates: usize,
}

impl std::ops::AddAssign for DecodeStats {
    fn add_assign(&mut self, o: Self) {
        self.steps += o.steps;
        self.expansions += o.expansions;
        self.candidates += o.candidates;
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Best first, at most `num_return`.
    pub finished: Vec<Finished>,
    pub diagnostic: Option<String>,
    pub stats: DecodeStats,
}

/// A one-token extension of a live hypothesis.
#[derive(Debug, Clone)]
struct Candidate {
    parent: usize,
    tok: TokenId,
    logprob_sum: f64,
    state: ConstraintState,
    progress: f64,
    finished: bool,
    score: f64,
}

impl Candidate {
    fn into_hypothesis(self, live: &[Hypothesis]) -> Hypothesis {
        let parent = &live[self.parent].tokens;
        let mut tokens = Vec::with_capacity(parent.len() + 1);
        tokens.extend_from_slice(parent);
        tokens.push(self.tok);
        Hypothesis {
            tokens,
            logprob_sum: self.logprob_sum,
            state: self.state,
            progress: self.progress,
            finished: self.finished,
        }
    }
}

/// Higher score first, then lexicographically smaller tokens. Live
/// hypotheses all have the same length, so parents compare first.
fn by_score_then_tokens(live: &[Hypothesis], a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        live[a.parent].tokens.cmp(&live[b.parent].tokens).then(a.tok.cmp(&b.tok))
    })
}

#[cfg(test)]
fn repeats_ngram(tokens: &[TokenId], n: usize) -> bool {
    if n == 0 || tokens.len() <= n {
        return false;
    }
    let tail = &tokens[tokens.len() - n..];
    tokens[..tokens.len() - 1].windows(n).any(|w| w == tail)
}

/// Indices of the `width` largest finite entries, ties to the smaller id,
/// in ascending id order.
fn top_tokens(lp: &[f64], width: usize) -> Vec<TokenId> {
    // Min-heap on (logprob, Reverse(id)): the root is the worst kept entry.
    let mut heap: BinaryHeap<Reverse<(OrdF64, Reverse<TokenId>)>> = BinaryHeap::with_capacity(width + 1);
    if width == 0 {
        return Vec::new();
    }
    for (t, &v) in lp.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let key = (OrdF64(v), Reverse(t as TokenId));
        if heap.len() < width {
            heap.push(Reverse(key));
        } else if key > heap.peek().unwrap().0 {
            heap.pop();
            heap.push(Reverse(key));
        }
    }
    let mut ids: Vec<TokenId> = heap.into_iter().map(|Reverse((_, Reverse(t)))| t).collect();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Whether appending `tok` to `tokens` repeats an `n`-gram.
fn repeats_with(tokens: &[TokenId], tok: TokenId, n: usize) -> bool {
    if n == 0 || tokens.len() < n {
        return false;
    }
    let head = &tokens[tokens.len() + 1 - n..];
    tokens.windows(n).any(|w| w[n - 1] == tok && &w[..n - 1] == head)
}

/// Beam search for continuations of `context` under `set`.
pub fn search(
    lm: &dyn LanguageModel,
    context: &[TokenId],
    set: &ConstraintSet,
    params: &DecodeParams,
) -> Result<SearchOutcome, LmError> {
    params.validate().map_err(LmError::Protocol)?;
    let vocab = lm.vocab();
    let unk = vocab.unk();
    let mut stats = DecodeStats::default();

    let dead = set.unsatisfiable_clauses(|t| t as usize >= vocab.len() || Some(t) == unk);
    if !dead.is_empty() {
        return Ok(SearchOutcome {
            finished: Vec::new(),
            diagnostic: Some(format!("positive clauses {dead:?} cannot be produced by the model vocabulary")),
            stats,
        });
    }

    let terminators: HashSet<TokenId> = params.terminators.iter().filter_map(|t| vocab.id(t)).collect();
    let mut live = vec![Hypothesis::root(set.initial_state())];
    let mut bank: Vec<Finished> = Vec::new();
    let mut prefix = context.to_vec();

    while !live.is_empty() {
        stats.steps += 1;
        let mut candidates = Vec::with_capacity(live.len() * (params.expansion_width + 8));
        for (parent, h) in live.iter().enumerate() {
            prefix.truncate(context.len());
            prefix.extend_from_slice(&h.tokens);
            let lp = lm.next_logprobs(&prefix)?;
            stats.expansions += 1;
            let promoted = set.dynamic_topk(&h.state, &lp);
            let mut toks = top_tokens(&lp, params.expansion_width);
            toks.extend(set.constraint_tokens(&h.state, &promoted));
            toks.sort_unstable();
            toks.dedup();

            for tok in toks {
                let logprob = lp.get(tok as usize).copied().unwrap_or(f64::NEG_INFINITY);
                if Some(tok) == unk || !logprob.is_finite() {
                    continue;
                }
                let (state, info) = set.advance_with(&h.state, tok, Some(&promoted));
                if info.violated || set.order_valid(&state) == OrderValidity::IrreversiblyInvalid {
                    continue;
                }
                if repeats_with(&h.tokens, tok, params.no_repeat_ngram) {
                    continue;
                }
                stats.candidates += 1;
                let finished = terminators.contains(&tok) || h.tokens.len() + 1 >= params.max_length;
                let progress = set.progress_with(&state, Some(&promoted));
                let logprob_sum = h.logprob_sum + logprob;
                let score = score_parts(logprob_sum, progress, set, info.made_progress);
                candidates.push(Candidate { parent, tok, logprob_sum, state, progress, finished, score });
            }
        }

        let (done, open): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.finished);
        for c in done {
            if set.all_positive_satisfied(&c.state) {
                let h = c.into_hypothesis(&live);
                let score = length_penalized(h.logprob_sum, h.tokens.len(), params.alpha);
                bank.push(Finished { tokens: h.tokens, logprob_sum: h.logprob_sum, score, state: h.state });
            }
        }
        live = select(&live, open, params);
    }

    bank.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    bank.truncate(params.num_return);
    let diagnostic = bank
        .is_empty()
        .then(|| format!("no hypothesis satisfied every positive clause within {} tokens", params.max_length));
    Ok(SearchOutcome { finished: bank, diagnostic, stats })
}

/// Tolerance filter, per-group best, then global fill. Survivors come back
/// best first.
fn select(live: &[Hypothesis], open: Vec<Candidate>, params: &DecodeParams) -> Vec<Hypothesis> {
    let count = |i: usize| open[i].state.satisfied_count();
    let Some(best_count) = (0..open.len()).map(count).max() else {
        return Vec::new();
    };
    let floor = best_count.saturating_sub(params.tolerance);
    let cmp = |a: &usize, b: &usize| by_score_then_tokens(live, &open[*a], &open[*b]);
    let mut eligible: Vec<usize> = (0..open.len()).filter(|&i| count(i) >= floor).collect();

    // best of every satisfied-count group, highest count first
    let mut group_best: Vec<Option<usize>> = vec![None; best_count - floor + 1];
    for &i in &eligible {
        let slot = &mut group_best[best_count - count(i)];
        if slot.is_none_or(|j| cmp(&i, &j) == Ordering::Less) {
            *slot = Some(i);
        }
    }
    let mut chosen: Vec<usize> = group_best.into_iter().flatten().take(params.beam_size).collect();

    // the fill never reaches past the global top `beam_size`
    if eligible.len() > params.beam_size {
        eligible.select_nth_unstable_by(params.beam_size, cmp);
        eligible.truncate(params.beam_size);
    }
    eligible.sort_unstable_by(cmp);
    for i in eligible {
        if chosen.len() == params.beam_size {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable_by(cmp);
    let mut slots: Vec<Option<Candidate>> = open.into_iter().map(Some).collect();
    chosen.into_iter().map(|i| slots[i].take().unwrap().into_hypothesis(live)).collect()
}

/// One generated statement with the constraints it satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub pair: EntityPair,
    pub prompt: String,
    /// Prompt and continuation joined into one sentence.
    pub text: String,
    pub continuation: String,
    pub aux: String,
    pub adverb: String,
    pub adjective: String,
    /// Length-penalized log-probability of the continuation.
    pub score: f64,
    pub logprob_sum: f64,
    pub length: usize,
}

#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub records: Vec<GenerationRecord>,
    pub diagnostic: Option<String>,
    pub stats: DecodeStats,
}

/// Decodes continuations of one prompt.
pub fn decode(
    lm: &dyn LanguageModel,
    prompt: &ComparativePrompt,
    set: &ConstraintSet,
    params: &DecodeParams,
) -> Result<DecodeOutcome, LmError> {
    let context = lm.tokenize(&prompt.text)?;
    let outcome = search(lm, &context.ids, set, params)?;
    let literal = |state: &ConstraintState, role| {
        set.satisfied_literal(state, role).map(|l| l.surface.clone()).unwrap_or_default()
    };
    let records = outcome
        .finished
        .iter()
        .map(|f| {
            let cont_words: Vec<&str> =
                f.tokens.iter().map(|&t| lm.vocab().token(t).unwrap_or_default()).collect();
            let mut words = text::split_words(&prompt.text);
            words.extend(cont_words.iter().map(|w| w.to_string()));
            GenerationRecord {
                pair: prompt.pair.clone(),
                prompt: prompt.text.clone(),
                text: text::join_words(&words),
                continuation: text::join_words(&cont_words),
                aux: literal(&f.state, ClauseRole::AuxVerb),
                adverb: literal(&f.state, ClauseRole::Adverb),
                adjective: literal(&f.state, ClauseRole::Adjective),
                score: f.score,
                logprob_sum: f.logprob_sum,
                length: f.tokens.len(),
            }
        })
        .collect();
    Ok(DecodeOutcome { records, diagnostic: outcome.diagnostic, stats: outcome.stats })
}

/// An (aux verb, adverb) pair driving one decoding pass.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Combo {
    pub aux: String,
    pub adverb: String,
}

impl Combo {
    pub fn new(aux: &str, adverb: &str) -> Self {
        Combo { aux: aux.to_string(), adverb: adverb.to_string() }
    }
}

/// Lexicons shared by every pass.
#[derive(Debug, Clone, Default)]
pub struct PassLexicons {
    pub negatives: Vec<String>,
    pub adjectives: Vec<String>,
    pub ordering: ClauseOrdering,
    pub constraint_params: ConstraintParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassFailure {
    pub combo: Combo,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct PassSchedule {
    /// Records of all passes, in combo order.
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<PassFailure>,
    pub diagnostics: Vec<(Combo, String)>,
    pub stats: DecodeStats,
}

/// Runs one decode per combo. Passes run in parallel; output order follows
/// `combos` regardless of scheduling.
pub fn run_pass_schedule(
    lm: &dyn LanguageModel,
    prompt: &ComparativePrompt,
    combos: &[Combo],
    lexicons: &PassLexicons,
    params: &DecodeParams,
) -> PassSchedule {
    let results: Vec<Result<DecodeOutcome, String>> = combos
        .par_iter()
        .map(|combo| {
            let set = compile(
                lm,
                &combo.aux,
                &combo.adverb,
                &lexicons.negatives,
                &lexicons.adjectives,
                &lexicons.ordering,
                lexicons.constraint_params,
            )
            .map_err(|e| e.to_string())?;
            decode(lm, prompt, &set, params).map_err(|e| e.to_string())
        })
        .collect();

    let mut out = PassSchedule::default();
    for (combo, result) in combos.iter().zip(results) {
        match result {
            Ok(outcome) => {
                out.stats += outcome.stats;
                if let Some(d) = outcome.diagnostic {
                    out.diagnostics.push((combo.clone(), d));
                }
                out.records.extend(outcome.records);
            }
            Err(message) => {
                log::warn!("pass {}/{} failed: {message}", combo.aux, combo.adverb);
                out.failures.push(PassFailure { combo: combo.clone(), message });
            }
        }
    }
    out
}
