//! CNF lexical constraints and per-hypothesis satisfaction tracking.
//!
//! A [`ConstraintSet`] is a conjunction of clauses; each clause is a
//! disjunction of phrase literals of a single polarity. Positive clauses are
//! satisfied when any of their phrases has been generated, and record the
//! order (1, 2, ...) in which that happened so that order indices can be
//! enforced. Negative clauses are violated as soon as one of their phrases
//! appears. The special adjective clause is satisfied by any phrase from the
//! comparative-adjective lexicon; during decoding only the currently most
//! probable `k_adjectives` of them earn the in-progress reward.

use std::collections::BTreeSet;

use smallvec::{smallvec, SmallVec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LanguageModel, TokenId};

mod automaton;

pub use automaton::{PhraseAutomaton, StateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("{role} phrase {phrase:?} tokenizes to nothing")]
    EmptyPhrase { role: &'static str, phrase: String },
    #[error("{role} phrase {phrase:?} is not representable in the model vocabulary")]
    OutOfVocabulary { role: &'static str, phrase: String },
    #[error("no comparative adjective survives tokenization")]
    NoAdjectives,
    #[error("invalid clause {clause}: {message}")]
    InvalidClause { clause: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClauseKind {
    Static,
    DynamicAdjective,
}

/// What a clause stands for in a generated comparative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClauseRole {
    AuxVerb,
    Adverb,
    Adjective,
    Negative,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Literal {
    pub phrase: Vec<TokenId>,
    pub polarity: Polarity,
    pub surface: String,
}

impl Literal {
    pub fn positive(phrase: Vec<TokenId>, surface: impl Into<String>) -> Self {
        Literal { phrase, polarity: Polarity::Positive, surface: surface.into() }
    }

    pub fn negative(phrase: Vec<TokenId>, surface: impl Into<String>) -> Self {
        Literal { phrase, polarity: Polarity::Negative, surface: surface.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub literals: Vec<Literal>,
    pub kind: ClauseKind,
    pub role: ClauseRole,
    /// Satisfaction positions (1-based) this clause may take.
    pub order_indices: BTreeSet<usize>,
}

impl Clause {
    pub fn polarity(&self) -> Polarity {
        self.literals[0].polarity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintParams {
    /// Weight of the constraint term in the step score.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Multiplier on the constraint term when a step extends a positive phrase.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_k_adjectives")]
    pub k_adjectives: usize,
}

fn default_lambda() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    1.25
}
fn default_k_adjectives() -> usize {
    5
}

impl Default for ConstraintParams {
    fn default() -> Self {
        ConstraintParams {
            lambda: default_lambda(),
            beta: default_beta(),
            k_adjectives: default_k_adjectives(),
        }
    }
}

/// Allowed satisfaction position(s) for one clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrderSlot {
    Named(NamedSlot),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedSlot {
    First,
    Last,
    Any,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClauseOrdering {
    pub aux: OrderSlot,
    pub adverb: OrderSlot,
    pub adjective: OrderSlot,
}

impl Default for ClauseOrdering {
    fn default() -> Self {
        ClauseOrdering {
            aux: OrderSlot::Named(NamedSlot::First),
            adverb: OrderSlot::Named(NamedSlot::Any),
            adjective: OrderSlot::Named(NamedSlot::Last),
        }
    }
}

impl OrderSlot {
    fn resolve(&self, total_clauses: usize, positive_clauses: usize) -> BTreeSet<usize> {
        match self {
            OrderSlot::Named(NamedSlot::First) => BTreeSet::from([1]),
            OrderSlot::Named(NamedSlot::Last) => BTreeSet::from([positive_clauses]),
            OrderSlot::Named(NamedSlot::Any) => (1..=total_clauses).collect(),
            OrderSlot::Indices(v) => v.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClauseStatus {
    Unsatisfied,
    /// `literal` indexes into the clause's literal list.
    Satisfied { position: u32, literal: u32 },
    Violated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderValidity {
    Valid,
    IrreversiblyInvalid,
}

/// Per-hypothesis constraint progress. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstraintState {
    node: StateId,
    /// Indexed by positive-clause ordinal.
    positive: SmallVec<[ClauseStatus; 4]>,
    /// Violated negative clause indices, ascending.
    violated: SmallVec<[u32; 2]>,
    satisfied: u32,
}

impl ConstraintState {
    pub fn satisfied_count(&self) -> usize {
        self.satisfied as usize
    }

    pub fn is_violated(&self) -> bool {
        !self.violated.is_empty()
    }
}

/// Side information about a single [`ConstraintSet::advance_with`] step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepInfo {
    /// The token extended (or completed) a rewarded positive phrase.
    pub made_progress: bool,
    pub newly_satisfied: u32,
    pub violated: bool,
}

#[derive(Debug, Clone, Copy)]
struct LiteralRef {
    clause: u32,
    index: u32,
    len: u32,
    positive: bool,
    adjective: bool,
}

/// An immutable, compiled conjunction of clauses.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    clauses: Vec<Clause>,
    params: ConstraintParams,
    automaton: PhraseAutomaton,
    literals: Vec<LiteralRef>,
    /// Positive-clause ordinal for each clause.
    ordinal: Vec<Option<u32>>,
    positive_clauses: Vec<usize>,
    adjective_clause: Option<usize>,
    static_positive_literals: Vec<u32>,
    /// Adjective literals as (first token, surface rank, literal id).
    adjective_keys: Vec<(TokenId, u32, u32)>,
    /// Allowed order positions per positive-clause ordinal as a bit set,
    /// when every position fits.
    order_masks: Option<Vec<u128>>,
}

impl ConstraintSet {
    pub fn new(clauses: Vec<Clause>, params: ConstraintParams) -> Result<Self, ConstraintError> {
        let m = clauses.len();
        let invalid = |clause: usize, message: &str| ConstraintError::InvalidClause {
            clause,
            message: message.to_string(),
        };
        let mut adjective_clause = None;
        for (i, c) in clauses.iter().enumerate() {
            if c.literals.is_empty() {
                return Err(invalid(i, "a clause needs at least one literal"));
            }
            if c.literals.iter().any(|l| l.phrase.is_empty()) {
                return Err(invalid(i, "literal phrases must be non-empty"));
            }
            if c.literals.iter().any(|l| l.polarity != c.polarity()) {
                return Err(invalid(i, "literals in a clause must share polarity"));
            }
            if c.polarity() == Polarity::Positive
                && (c.order_indices.is_empty() || c.order_indices.iter().any(|&o| o == 0 || o > m))
            {
                return Err(invalid(i, "order indices must be a non-empty subset of 1..=m"));
            }
            if c.kind == ClauseKind::DynamicAdjective {
                if c.polarity() != Polarity::Positive || adjective_clause.is_some() {
                    return Err(invalid(i, "at most one positive adjective clause is allowed"));
                }
                adjective_clause = Some(i);
            }
        }

        let mut literals = Vec::new();
        let mut patterns = Vec::new();
        let mut ordinal = vec![None; m];
        let mut positive_clauses = Vec::new();
        let mut static_positive_literals = Vec::new();
        let mut adjective_literals = Vec::new();
        for (ci, c) in clauses.iter().enumerate() {
            let positive = c.polarity() == Polarity::Positive;
            if positive {
                ordinal[ci] = Some(positive_clauses.len() as u32);
                positive_clauses.push(ci);
            }
            for (li, l) in c.literals.iter().enumerate() {
                let id = literals.len() as u32;
                let adjective = c.kind == ClauseKind::DynamicAdjective;
                literals.push(LiteralRef {
                    clause: ci as u32,
                    index: li as u32,
                    len: l.phrase.len() as u32,
                    positive,
                    adjective,
                });
                patterns.push(l.phrase.clone());
                if positive && adjective {
                    adjective_literals.push(id);
                } else if positive {
                    static_positive_literals.push(id);
                }
            }
        }
        let lit_of = |id: u32| {
            let r = literals[id as usize];
            &clauses[r.clause as usize].literals[r.index as usize]
        };
        let mut by_surface = adjective_literals;
        by_surface.sort_by(|&a, &b| lit_of(a).surface.cmp(&lit_of(b).surface).then(a.cmp(&b)));
        let adjective_keys = by_surface
            .iter()
            .enumerate()
            .map(|(rank, &id)| (lit_of(id).phrase[0], rank as u32, id))
            .collect();
        let order_masks = positive_clauses
            .iter()
            .map(|&ci| {
                clauses[ci].order_indices.iter().try_fold(0u128, |m, &o| (o < 128).then(|| m | 1 << o))
            })
            .collect();
        Ok(ConstraintSet {
            order_masks,
            automaton: PhraseAutomaton::build(&patterns),
            clauses,
            params,
            literals,
            ordinal,
            positive_clauses,
            adjective_clause,
            static_positive_literals,
            adjective_keys,
        })
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn params(&self) -> &ConstraintParams {
        &self.params
    }

    pub fn lambda(&self) -> f64 {
        self.params.lambda
    }

    pub fn beta(&self) -> f64 {
        self.params.beta
    }

    pub fn positive_clause_count(&self) -> usize {
        self.positive_clauses.len()
    }

    pub fn initial_state(&self) -> ConstraintState {
        ConstraintState {
            node: automaton::ROOT,
            positive: smallvec![ClauseStatus::Unsatisfied; self.positive_clauses.len()],
            violated: SmallVec::new(),
            satisfied: 0,
        }
    }

    /// Literal for a flat literal id.
    pub fn literal(&self, id: u32) -> &Literal {
        let r = self.literals[id as usize];
        &self.clauses[r.clause as usize].literals[r.index as usize]
    }

    pub fn clause_status(&self, state: &ConstraintState, clause: usize) -> ClauseStatus {
        match self.ordinal[clause] {
            Some(o) => state.positive[o as usize],
            None if state.violated.binary_search(&(clause as u32)).is_ok() => ClauseStatus::Violated,
            None => ClauseStatus::Unsatisfied,
        }
    }

    fn clause_open(&self, state: &ConstraintState, clause: u32) -> bool {
        self.ordinal[clause as usize]
            .is_some_and(|o| state.positive[o as usize] == ClauseStatus::Unsatisfied)
    }

    pub fn all_positive_satisfied(&self, state: &ConstraintState) -> bool {
        state.satisfied as usize == self.positive_clauses.len()
    }

    /// The literal that satisfied the first clause with `role`, if any.
    pub fn satisfied_literal(&self, state: &ConstraintState, role: ClauseRole) -> Option<&Literal> {
        let ci = self.clauses.iter().position(|c| c.role == role)?;
        match self.clause_status(state, ci) {
            ClauseStatus::Satisfied { literal, .. } => Some(&self.clauses[ci].literals[literal as usize]),
            _ => None,
        }
    }

    /// Matched prefix length of one literal in the current state.
    pub fn literal_prefix_len(&self, state: &ConstraintState, clause: usize, literal: usize) -> usize {
        let id = self
            .literals
            .iter()
            .position(|r| r.clause as usize == clause && r.index as usize == literal)
            .expect("literal exists") as u32;
        self.automaton
            .chain(state.node)
            .find(|&n| self.automaton.prefix_of(n).contains(&id))
            .map_or(0, |n| self.automaton.depth(n))
    }

    pub fn advance(&self, state: &ConstraintState, token: TokenId) -> ConstraintState {
        self.advance_with(state, token, None).0
    }

    /// Consumes one token. `promoted` restricts which adjective literals count
    /// toward `made_progress`; `None` counts all of them.
    pub fn advance_with(
        &self,
        state: &ConstraintState,
        token: TokenId,
        promoted: Option<&[u32]>,
    ) -> (ConstraintState, StepInfo) {
        let mut next = state.clone();
        next.node = self.automaton.step(state.node, token);
        let mut info = StepInfo::default();

        for &lit in self.automaton.outputs(next.node) {
            let r = self.literals[lit as usize];
            if r.positive {
                let o = self.ordinal[r.clause as usize].unwrap() as usize;
                if next.positive[o] == ClauseStatus::Unsatisfied {
                    next.satisfied += 1;
                    next.positive[o] = ClauseStatus::Satisfied { position: next.satisfied, literal: r.index };
                    info.newly_satisfied += 1;
                }
            } else if let Err(at) = next.violated.binary_search(&r.clause) {
                next.violated.insert(at, r.clause);
                info.violated = true;
            }
        }
        // Satisfaction positions follow clause order when one token completes
        // several clauses; outputs are sorted by literal id, which follows
        // clause order, so the loop above already assigns them that way.

        info.made_progress = self.automaton.chain(next.node).any(|n| {
            self.automaton.prefix_of(n).iter().any(|&lit| {
                let r = self.literals[lit as usize];
                r.positive
                    && self.clause_open(state, r.clause)
                    && (!r.adjective || promoted.is_none_or(|p| p.binary_search(&lit).is_ok()))
            })
        });
        (next, info)
    }

    /// Max over positive literals of matched/total length, with satisfied
    /// clauses counting as fully matched.
    pub fn progress(&self, state: &ConstraintState) -> f64 {
        self.progress_with(state, None)
    }

    pub fn progress_with(&self, state: &ConstraintState, promoted: Option<&[u32]>) -> f64 {
        if state.satisfied > 0 {
            return 1.0;
        }
        let mut best = 0.0f64;
        for n in self.automaton.chain(state.node) {
            let depth = self.automaton.depth(n) as f64;
            for &lit in self.automaton.prefix_of(n) {
                let r = self.literals[lit as usize];
                if !r.positive
                    || (r.adjective && promoted.is_some_and(|p| p.binary_search(&lit).is_err()))
                {
                    continue;
                }
                best = best.max(depth / r.len as f64);
            }
        }
        best
    }

    pub fn order_valid(&self, state: &ConstraintState) -> OrderValidity {
        if let Some(masks) = &self.order_masks {
            let ok = masks.iter().zip(&state.positive).all(|(&mask, status)| match *status {
                ClauseStatus::Satisfied { position, .. } => mask >> position & 1 == 1,
                _ => state.satisfied < 127 && mask >> (state.satisfied + 1) != 0,
            });
            return if ok { OrderValidity::Valid } else { OrderValidity::IrreversiblyInvalid };
        }
        for (o, &ci) in self.positive_clauses.iter().enumerate() {
            let allowed = &self.clauses[ci].order_indices;
            let ok = match state.positive[o] {
                ClauseStatus::Satisfied { position, .. } => allowed.contains(&(position as usize)),
                _ => allowed.range(state.satisfied as usize + 1..).next().is_some(),
            };
            if !ok {
                return OrderValidity::IrreversiblyInvalid;
            }
        }
        OrderValidity::Valid
    }

    /// The `k_adjectives` adjective literals whose first token is most
    /// probable next, as ascending flat literal ids. Ties go to the
    /// lexicographically smaller surface.
    pub fn dynamic_topk(&self, state: &ConstraintState, next_logprobs: &[f64]) -> Vec<u32> {
        let Some(ci) = self.adjective_clause else {
            return Vec::new();
        };
        if !self.clause_open(state, ci as u32) {
            return Vec::new();
        }
        let k = self.params.k_adjectives;
        let lp = |t: TokenId| next_logprobs.get(t as usize).copied().unwrap_or(f64::NEG_INFINITY);
        let mut keyed: Vec<(f64, u32, u32)> = self.adjective_keys.iter().map(|&(t, rank, lit)| (lp(t), rank, lit)).collect();
        let cmp = |a: &(f64, u32, u32), b: &(f64, u32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < keyed.len() {
            keyed.select_nth_unstable_by(k, cmp);
            keyed.truncate(k);
        }
        let mut ids: Vec<u32> = keyed.into_iter().map(|(_, _, lit)| lit).collect();
        ids.sort_unstable();
        ids
    }

    /// Tokens that start or continue an open positive phrase. Adjective
    /// phrases are only started when promoted.
    pub fn constraint_tokens(&self, state: &ConstraintState, promoted: &[u32]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for &lit in &self.static_positive_literals {
            if self.clause_open(state, self.literals[lit as usize].clause) {
                out.push(self.literal(lit).phrase[0]);
            }
        }
        if let Some(ci) = self.adjective_clause {
            if self.clause_open(state, ci as u32) {
                out.extend(promoted.iter().map(|&lit| self.literal(lit).phrase[0]));
            }
        }
        for n in self.automaton.chain(state.node) {
            let depth = self.automaton.depth(n);
            for &lit in self.automaton.prefix_of(n) {
                let r = self.literals[lit as usize];
                if r.positive && (depth as u32) < r.len && self.clause_open(state, r.clause) {
                    out.push(self.literal(lit).phrase[depth]);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Positive clauses none of whose literals can ever be produced because
    /// every literal contains a token from `banned`.
    pub fn unsatisfiable_clauses(&self, banned: impl Fn(TokenId) -> bool) -> Vec<usize> {
        self.positive_clauses
            .iter()
            .copied()
            .filter(|&ci| {
                self.clauses[ci]
                    .literals
                    .iter()
                    .all(|l| l.phrase.iter().any(|&t| banned(t)))
            })
            .collect()
    }
}

/// Tokenizes `phrase`; `None` when it is empty or contains an unknown token.
fn phrase_ids(lm: &dyn LanguageModel, phrase: &str) -> Result<Vec<TokenId>, bool> {
    let seq = lm.tokenize(phrase.trim()).map_err(|_| true)?;
    if seq.ids.is_empty() {
        return Err(true);
    }
    let unk = lm.vocab().unk();
    if seq.ids.iter().any(|&t| Some(t) == unk || t as usize >= lm.vocab().len()) {
        return Err(false);
    }
    Ok(seq.ids)
}

fn required(lm: &dyn LanguageModel, role: &'static str, phrase: &str) -> Result<Vec<TokenId>, ConstraintError> {
    phrase_ids(lm, phrase).map_err(|empty| {
        if empty {
            ConstraintError::EmptyPhrase { role, phrase: phrase.to_string() }
        } else {
            ConstraintError::OutOfVocabulary { role, phrase: phrase.to_string() }
        }
    })
}

/// Builds the clause set for one (aux verb, adverb) pass.
///
/// Clause layout is `[aux, adverb, adjective, negatives...]`. Negative and
/// adjective phrases the model cannot represent are skipped, since they can
/// never be generated anyway.
pub fn compile(
    lm: &dyn LanguageModel,
    aux_verb: &str,
    adverb: &str,
    negatives: &[String],
    adjectives: &[String],
    ordering: &ClauseOrdering,
    params: ConstraintParams,
) -> Result<ConstraintSet, ConstraintError> {
    let aux = required(lm, "auxiliary verb", aux_verb)?;
    let adv = required(lm, "adverb", adverb)?;

    let mut seen = BTreeSet::new();
    let adjective_literals: Vec<Literal> = adjectives
        .iter()
        .filter_map(|a| phrase_ids(lm, a).ok().map(|ids| (a, ids)))
        .filter(|(_, ids)| seen.insert(ids.clone()))
        .map(|(a, ids)| Literal::positive(ids, a.trim()))
        .collect();
    if adjective_literals.is_empty() {
        return Err(ConstraintError::NoAdjectives);
    }
    let mut seen = BTreeSet::new();
    let negative_literals: Vec<Literal> = negatives
        .iter()
        .filter_map(|n| phrase_ids(lm, n).ok().map(|ids| (n, ids)))
        .filter(|(_, ids)| seen.insert(ids.clone()))
        .map(|(n, ids)| Literal::negative(ids, n.trim()))
        .collect();
    let skipped = adjectives.len() + negatives.len() - adjective_literals.len() - negative_literals.len();
    if skipped > 0 {
        log::debug!("compile: {skipped} lexicon phrases skipped (unrepresentable or duplicate)");
    }

    let m = 3 + negative_literals.len();
    let positive = 3;
    let mut clauses = vec![
        Clause {
            literals: vec![Literal::positive(aux, aux_verb.trim())],
            kind: ClauseKind::Static,
            role: ClauseRole::AuxVerb,
            order_indices: ordering.aux.resolve(m, positive),
        },
        Clause {
            literals: vec![Literal::positive(adv, adverb.trim())],
            kind: ClauseKind::Static,
            role: ClauseRole::Adverb,
            order_indices: ordering.adverb.resolve(m, positive),
        },
        Clause {
            literals: adjective_literals,
            kind: ClauseKind::DynamicAdjective,
            role: ClauseRole::Adjective,
            order_indices: ordering.adjective.resolve(m, positive),
        },
    ];
    clauses.extend(negative_literals.into_iter().map(|l| Clause {
        literals: vec![l],
        kind: ClauseKind::Static,
        role: ClauseRole::Negative,
        order_indices: (1..=m).collect(),
    }));
    ConstraintSet::new(clauses, params)
}

#[cfg(test)]
mod tests;
