//! Shared fixtures for the integration suites: a seeded random trigram
//! model and an exhaustive reference decoder.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use compkb::constraints::{Clause, ClauseKind, ClauseRole, ConstraintParams, ConstraintSet, Literal, Polarity};
use compkb::lm::{LanguageModel, LmError, TokenId, TokenSequence, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trigram model with random normalized distributions for every context.
pub struct RandomTrigram {
    vocab: Vocabulary,
    table: HashMap<(Option<TokenId>, Option<TokenId>), Vec<f64>>,
}

impl RandomTrigram {
    /// Token 0 is ".", the rest are `w1`, `w2`, ...
    pub fn new(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens = vec![".".to_string()];
        tokens.extend((1..size).map(|i| format!("w{i}")));
        let ctx: Vec<Option<TokenId>> =
            std::iter::once(None).chain((0..size as TokenId).map(Some)).collect();
        let mut table = HashMap::new();
        for &a in &ctx {
            for &b in &ctx {
                if a.is_some() && b.is_none() {
                    continue;
                }
                let logits: Vec<f64> = (0..size).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z = logits.iter().map(|l: &f64| l.exp()).sum::<f64>().ln();
                table.insert((a, b), logits.iter().map(|l| l - z).collect());
            }
        }
        RandomTrigram { vocab: Vocabulary::new(tokens), table }
    }
}

impl LanguageModel for RandomTrigram {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError> {
        let ids = text
            .split_whitespace()
            .map(|w| self.vocab.id(w).ok_or_else(|| LmError::Protocol(format!("unknown word {w}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TokenSequence { ids, surface: text.to_string() })
    }

    fn next_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let n = prefix.len();
        let key = match n {
            0 => (None, None),
            1 => (None, Some(prefix[0])),
            _ => (Some(prefix[n - 2]), Some(prefix[n - 1])),
        };
        Ok(self.table[&key].clone())
    }

    fn name(&self) -> String {
        "random-trigram".into()
    }
}

/// A random constraint configuration over a vocabulary of `size` tokens
/// (terminator excluded from phrases).
pub fn random_constraints(rng: &mut ChaCha8Rng, size: usize) -> ConstraintSet {
    let phrase = |rng: &mut ChaCha8Rng| -> Vec<TokenId> {
        let len = if rng.gen_bool(0.7) { 1 } else { 2 };
        (0..len).map(|_| rng.gen_range(1..size as TokenId)).collect()
    };
    let n_pos = rng.gen_range(1..=3);
    let n_neg = rng.gen_range(0..=2);
    let m = n_pos + n_neg;
    let adjective_at = rng.gen_bool(0.5).then(|| rng.gen_range(0..n_pos));
    let mut clauses = Vec::new();
    for i in 0..n_pos {
        let n_lit = rng.gen_range(1..=2);
        let literals = (0..n_lit).map(|_| Literal::positive(phrase(rng), "")).collect::<Vec<_>>();
        let mut literals: Vec<Literal> = literals
            .into_iter()
            .enumerate()
            .map(|(j, mut l)| {
                l.surface = format!("p{i}_{j}");
                l
            })
            .collect();
        literals.dedup_by(|a, b| a.phrase == b.phrase);
        let order_indices: BTreeSet<usize> = match rng.gen_range(0..4) {
            0 => BTreeSet::from([i + 1]),
            1 => (1..=m).filter(|_| rng.gen_bool(0.6)).chain([i + 1]).collect(),
            _ => (1..=m).collect(),
        };
        let adjective = adjective_at == Some(i);
        clauses.push(Clause {
            literals,
            kind: if adjective { ClauseKind::DynamicAdjective } else { ClauseKind::Static },
            role: if adjective { ClauseRole::Adjective } else { ClauseRole::Other },
            order_indices,
        });
    }
    for i in 0..n_neg {
        clauses.push(Clause {
            literals: vec![Literal::negative(phrase(rng), format!("n{i}"))],
            kind: ClauseKind::Static,
            role: ClauseRole::Negative,
            order_indices: (1..=m).collect(),
        });
    }
    let params = ConstraintParams { k_adjectives: rng.gen_range(1..=2), ..ConstraintParams::default() };
    ConstraintSet::new(clauses, params).unwrap()
}

fn occurs_at_end(seq: &[TokenId], phrase: &[TokenId]) -> bool {
    seq.ends_with(phrase)
}

/// End index (exclusive) of the earliest occurrence of any literal.
fn first_completion(seq: &[TokenId], clause: &Clause) -> Option<usize> {
    (1..=seq.len()).find(|&end| clause.literals.iter().any(|l| occurs_at_end(&seq[..end], &l.phrase)))
}

pub fn contains(seq: &[TokenId], phrase: &[TokenId]) -> bool {
    seq.windows(phrase.len()).any(|w| w == phrase)
}

pub fn repeats_any_ngram(seq: &[TokenId], n: usize) -> bool {
    if n == 0 || seq.len() < n {
        return false;
    }
    let grams: Vec<&[TokenId]> = seq.windows(n).collect();
    (0..grams.len()).any(|i| (0..i).any(|j| grams[i] == grams[j]))
}

/// Order indices hold when positive clauses are numbered by first
/// completion, ties by clause index.
pub fn order_ok(seq: &[TokenId], clauses: &[Clause]) -> bool {
    let mut done: Vec<(usize, usize)> = clauses
        .iter()
        .enumerate()
        .filter(|(_, c)| c.polarity() == Polarity::Positive)
        .filter_map(|(i, c)| first_completion(seq, c).map(|end| (end, i)))
        .collect();
    done.sort_unstable();
    done.iter().enumerate().all(|(p, &(_, i))| clauses[i].order_indices.contains(&(p + 1)))
}

pub fn feasible(seq: &[TokenId], clauses: &[Clause], no_repeat: usize) -> bool {
    clauses.iter().all(|c| match c.polarity() {
        Polarity::Positive => c.literals.iter().any(|l| contains(seq, &l.phrase)),
        Polarity::Negative => c.literals.iter().all(|l| !contains(seq, &l.phrase)),
    }) && order_ok(seq, clauses)
        && !repeats_any_ngram(seq, no_repeat)
}

pub struct OracleResult {
    /// Best feasible sequence and its log-probability sum.
    pub best: Option<(Vec<TokenId>, f64, f64)>,
    pub feasible: usize,
    /// Largest number of prefixes alive at any depth.
    pub max_width: usize,
}

/// Exhaustive search over every continuation that ends at the terminator
/// (token 0) or at `max_length`, maximizing `sum / len^alpha`.
pub fn brute_force(
    lm: &dyn LanguageModel,
    set: &ConstraintSet,
    max_length: usize,
    no_repeat: usize,
    alpha: f64,
) -> OracleResult {
    let clauses = set.clauses();
    let negatives: Vec<&Literal> = clauses
        .iter()
        .filter(|c| c.polarity() == Polarity::Negative)
        .flat_map(|c| &c.literals)
        .collect();
    let v = lm.vocab().len() as TokenId;
    let mut out = OracleResult { best: None, feasible: 0, max_width: 0 };
    let mut width = vec![0usize; max_length + 1];
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((seq, sum)) = stack.pop() {
        let lp = lm.next_logprobs(&seq).unwrap();
        for t in 0..v {
            let mut next = seq.clone();
            next.push(t);
            // prefix-closed violations can be cut early
            if negatives.iter().any(|l| occurs_at_end(&next, &l.phrase)) {
                continue;
            }
            if no_repeat > 0 && next.len() >= no_repeat && repeats_any_ngram(&next, no_repeat) {
                continue;
            }
            let s = sum + lp[t as usize];
            width[next.len()] += 1;
            if t == 0 || next.len() == max_length {
                if feasible(&next, clauses, no_repeat) {
                    out.feasible += 1;
                    let value = s / (next.len() as f64).powf(alpha);
                    let better = match &out.best {
                        None => true,
                        Some((bs, _, bv)) => value > *bv || (value == *bv && next < *bs),
                    };
                    if better {
                        out.best = Some((next, s, value));
                    }
                }
            } else {
                stack.push((next, s));
            }
        }
    }
    out.max_width = width.into_iter().max().unwrap_or(0);
    out
}
