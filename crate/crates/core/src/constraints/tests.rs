use super::*;
use crate::lexicon;
use crate::lm::{NgramModel, Smoothing};
use proptest::prelude::*;

fn pos(phrases: &[&[TokenId]], order: &[usize]) -> Clause {
    Clause {
        literals: phrases.iter().map(|p| Literal::positive(p.to_vec(), format!("{p:?}"))).collect(),
        kind: ClauseKind::Static,
        role: ClauseRole::Other,
        order_indices: order.iter().copied().collect(),
    }
}

fn neg(phrase: &[TokenId], m: usize) -> Clause {
    Clause {
        literals: vec![Literal::negative(phrase.to_vec(), format!("{phrase:?}"))],
        kind: ClauseKind::Static,
        role: ClauseRole::Negative,
        order_indices: (1..=m).collect(),
    }
}

fn adjectives(phrases: &[(&str, &[TokenId])], order: &[usize]) -> Clause {
    Clause {
        literals: phrases.iter().map(|(s, p)| Literal::positive(p.to_vec(), *s)).collect(),
        kind: ClauseKind::DynamicAdjective,
        role: ClauseRole::Adjective,
        order_indices: order.iter().copied().collect(),
    }
}

fn run(set: &ConstraintSet, toks: &[TokenId]) -> ConstraintState {
    toks.iter().fold(set.initial_state(), |s, &t| set.advance(&s, t))
}

#[test]
fn two_token_literal_progress() {
    // 1 = "more", 2 = "expensive"
    let set = ConstraintSet::new(vec![pos(&[&[1, 2]], &[1])], ConstraintParams::default()).unwrap();
    let s = run(&set, &[1]);
    assert_eq!(set.progress(&s), 0.5);
    assert_eq!(set.clause_status(&s, 0), ClauseStatus::Unsatisfied);
    let s = set.advance(&s, 2);
    assert_eq!(set.clause_status(&s, 0), ClauseStatus::Satisfied { position: 1, literal: 0 });
    assert_eq!(set.progress(&s), 1.0);
}

#[test]
fn negative_literal_violates() {
    let set = ConstraintSet::new(vec![pos(&[&[1]], &[1, 2]), neg(&[7], 2)], ConstraintParams::default()).unwrap();
    let s = run(&set, &[3, 7]);
    assert!(s.is_violated());
    assert_eq!(set.clause_status(&s, 1), ClauseStatus::Violated);
}

#[test]
fn repeated_first_token_rematches() {
    let set = ConstraintSet::new(vec![pos(&[&[1, 2]], &[1])], ConstraintParams::default()).unwrap();
    let s = run(&set, &[1, 1]);
    assert_eq!(set.literal_prefix_len(&s, 0, 0), 1);
    let s = set.advance(&s, 2);
    assert!(set.all_positive_satisfied(&s));
}

#[test]
fn progress_values() {
    let set = ConstraintSet::new(
        vec![pos(&[&[1, 2, 3]], &[1, 2]), pos(&[&[4, 5]], &[1, 2])],
        ConstraintParams::default(),
    )
    .unwrap();
    assert_eq!(set.progress(&set.initial_state()), 0.0);
    assert_eq!(set.progress(&run(&set, &[9, 1])), 1.0 / 3.0);
    assert_eq!(set.progress(&run(&set, &[1, 2])), 2.0 / 3.0);
    assert_eq!(set.progress(&run(&set, &[4, 5])), 1.0);
}

#[test]
fn order_examples() {
    let set = ConstraintSet::new(
        vec![pos(&[&[1]], &[1]), pos(&[&[2]], &[2]), pos(&[&[3]], &[3])],
        ConstraintParams::default(),
    )
    .unwrap();
    assert_eq!(set.order_valid(&run(&set, &[1])), OrderValidity::Valid);
    assert_eq!(set.order_valid(&run(&set, &[2])), OrderValidity::IrreversiblyInvalid);
    assert_eq!(set.order_valid(&run(&set, &[1, 2])), OrderValidity::Valid);

    // every permutation of the three clauses: only 1,2,3 stays valid throughout
    let perms: [[TokenId; 3]; 6] = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
    for p in perms {
        let mut s = set.initial_state();
        let mut ok = true;
        for t in p {
            s = set.advance(&s, t);
            ok &= set.order_valid(&s) == OrderValidity::Valid;
        }
        assert_eq!(ok, p == [1, 2, 3], "{p:?}");
    }
}

#[test]
fn adverb_at_wrong_position_is_invalid() {
    let set = ConstraintSet::new(
        vec![pos(&[&[1]], &[1]), pos(&[&[2]], &[2])],
        ConstraintParams::default(),
    )
    .unwrap();
    assert_eq!(set.order_valid(&run(&set, &[2])), OrderValidity::IrreversiblyInvalid);
}

#[test]
fn unsatisfied_clause_with_no_room_left_is_invalid() {
    // clause 0 may only be first; satisfying clause 1 first closes that slot
    let set = ConstraintSet::new(
        vec![pos(&[&[1]], &[1]), pos(&[&[2]], &[1, 2])],
        ConstraintParams::default(),
    )
    .unwrap();
    assert_eq!(set.order_valid(&run(&set, &[2])), OrderValidity::IrreversiblyInvalid);
}

const LEX: [(&str, TokenId); 7] = [
    ("cheaper", 10),
    ("faster", 11),
    ("heavier", 12),
    ("larger", 13),
    ("lighter", 14),
    ("slower", 15),
    ("smaller", 16),
];

fn adjective_set(k: usize) -> ConstraintSet {
    let phrases: Vec<(&str, Vec<TokenId>)> = LEX.iter().map(|&(s, t)| (s, vec![t])).collect();
    let refs: Vec<(&str, &[TokenId])> = phrases.iter().map(|(s, p)| (*s, p.as_slice())).collect();
    ConstraintSet::new(
        vec![adjectives(&refs, &[1])],
        ConstraintParams { k_adjectives: k, ..ConstraintParams::default() },
    )
    .unwrap()
}

fn surfaces(set: &ConstraintSet, ids: &[u32]) -> Vec<String> {
    let mut v: Vec<String> = ids.iter().map(|&i| set.literal(i).surface.clone()).collect();
    v.sort();
    v
}

#[test]
fn dynamic_topk_promotes_most_probable() {
    let set = adjective_set(5);
    let mut lp = vec![-20.0; 17];
    for (i, t) in [13, 16, 12, 14, 11].into_iter().enumerate() {
        lp[t as usize] = -1.0 - i as f64;
    }
    let got = set.dynamic_topk(&set.initial_state(), &lp);
    assert_eq!(surfaces(&set, &got), ["faster", "heavier", "larger", "lighter", "smaller"]);
}

#[test]
fn dynamic_topk_ties_are_lexicographic() {
    let set = adjective_set(2);
    let lp = vec![-1.0; 17];
    let got = set.dynamic_topk(&set.initial_state(), &lp);
    assert_eq!(surfaces(&set, &got), ["cheaper", "faster"]);
}

#[test]
fn dynamic_topk_empty_once_satisfied() {
    let set = adjective_set(5);
    let s = run(&set, &[12]);
    assert!(set.dynamic_topk(&s, &[0.0; 17]).is_empty());
}

#[test]
fn dynamic_topk_k_exceeds_lexicon() {
    let set = adjective_set(50);
    assert_eq!(set.dynamic_topk(&set.initial_state(), &[0.0; 17]).len(), LEX.len());
}

#[test]
fn unpromoted_adjective_earns_no_partial_reward() {
    let set = ConstraintSet::new(
        vec![adjectives(&[("more expensive", &[1, 2]), ("more costly", &[1, 3])], &[1])],
        ConstraintParams::default(),
    )
    .unwrap();
    let s0 = set.initial_state();
    let (s1, info) = set.advance_with(&s0, 1, Some(&[]));
    assert!(!info.made_progress);
    assert_eq!(set.progress_with(&s1, Some(&[])), 0.0);
    let (_, info) = set.advance_with(&s0, 1, Some(&[0]));
    assert!(info.made_progress);
    assert_eq!(set.progress_with(&s1, Some(&[0])), 0.5);
}

fn toy_lm() -> NgramModel {
    NgramModel::train(
        ["planes are often faster than cars because of wings .", "cars have typically been more expensive ."],
        2,
        Smoothing::default(),
    )
    .unwrap()
}

#[test]
fn compile_default_clause_layout() {
    let lm = toy_lm();
    let adj = lexicon::comparative_adjectives();
    let set = compile(&lm, "have", "typically", &[], &adj, &ClauseOrdering::default(), ConstraintParams::default())
        .unwrap();
    let c = set.clauses();
    assert_eq!(c.len(), 3);
    assert_eq!(c[0].order_indices, BTreeSet::from([1]));
    assert_eq!(c[1].order_indices, (1..=3).collect());
    assert_eq!(c[2].kind, ClauseKind::DynamicAdjective);
    assert_eq!(c[2].order_indices, BTreeSet::from([3]));
    // only lexicon entries the model can spell survive
    let mut spelled: Vec<&str> = c[2].literals.iter().map(|l| l.surface.as_str()).collect();
    spelled.sort();
    assert_eq!(spelled, ["faster", "more"]);
}

#[test]
fn compile_adds_negative_clause() {
    let lm = toy_lm();
    let adj = lexicon::comparative_adjectives();
    let set = compile(
        &lm,
        "have",
        "typically",
        &[" because".to_string()],
        &adj,
        &ClauseOrdering::default(),
        ConstraintParams::default(),
    )
    .unwrap();
    assert_eq!(set.clauses().len(), 4);
    assert_eq!(set.clauses()[3].polarity(), Polarity::Negative);
}

#[test]
fn compile_rejects_empty_aux() {
    let lm = toy_lm();
    let adj = lexicon::comparative_adjectives();
    let err = compile(&lm, "", "often", &[], &adj, &ClauseOrdering::default(), ConstraintParams::default())
        .unwrap_err();
    assert!(matches!(err, ConstraintError::EmptyPhrase { .. }));
    let err = compile(&lm, "would", "often", &[], &adj, &ClauseOrdering::default(), ConstraintParams::default())
        .unwrap_err();
    assert!(matches!(err, ConstraintError::OutOfVocabulary { .. }));
}

#[test]
fn ordering_parses_from_config() {
    let o: ClauseOrdering = toml::from_str("aux = \"first\"\nadverb = [1, 2]\nadjective = \"last\"").unwrap();
    assert_eq!(o.adverb, OrderSlot::Indices(vec![1, 2]));
    assert_eq!(o.aux, OrderSlot::Named(NamedSlot::First));
}

#[test]
fn mixed_polarity_clause_rejected() {
    let mut c = pos(&[&[1]], &[1]);
    c.literals.push(Literal::negative(vec![2], "x"));
    assert!(ConstraintSet::new(vec![c], ConstraintParams::default()).is_err());
}

fn occurs(hay: &[TokenId], needle: &[TokenId]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn arb_phrases() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(0u32..5, 1..4), 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn satisfaction_matches_substring_oracle(
        positives in arb_phrases(),
        negatives in arb_phrases(),
        stream in prop::collection::vec(0u32..5, 0..16),
    ) {
        let m = positives.len() + negatives.len();
        let mut clauses: Vec<Clause> = positives.iter().map(|p| pos(&[p], &(1..=m).collect::<Vec<_>>())).collect();
        clauses.extend(negatives.iter().map(|n| neg(n, m)));
        let set = ConstraintSet::new(clauses, ConstraintParams::default()).unwrap();

        let mut s = set.initial_state();
        let mut last_progress = vec![0.0; positives.len()];
        for (i, &t) in stream.iter().enumerate() {
            s = set.advance(&s, t);
            let seen = &stream[..=i];
            for (ci, p) in positives.iter().enumerate() {
                let sat = matches!(set.clause_status(&s, ci), ClauseStatus::Satisfied { .. });
                prop_assert_eq!(sat, occurs(seen, p));
                let r = if sat { 1.0 } else { set.literal_prefix_len(&s, ci, 0) as f64 / p.len() as f64 };
                // one token moves a clause at most one phrase position, and a
                // satisfied clause stays at 1
                prop_assert!(r <= last_progress[ci] + 1.0 / p.len() as f64 + 1e-12);
                prop_assert!(last_progress[ci] < 1.0 || r == 1.0);
                last_progress[ci] = r;
            }
            let violated = negatives.iter().any(|n| occurs(seen, n));
            prop_assert_eq!(s.is_violated(), violated);
            let p = set.progress(&s);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        let mut positions: Vec<u32> = (0..positives.len())
            .filter_map(|ci| match set.clause_status(&s, ci) {
                ClauseStatus::Satisfied { position, .. } => Some(position),
                _ => None,
            })
            .collect();
        positions.sort_unstable();
        let expect: Vec<u32> = (1..=s.satisfied_count() as u32).collect();
        prop_assert_eq!(positions, expect);
    }

    #[test]
    fn progress_never_drops_before_satisfaction(
        phrase in prop::collection::vec(0u32..3, 1..4),
        stream in prop::collection::vec(0u32..3, 0..12),
    ) {
        // a single positive clause: once its phrase is matched, progress is
        // pinned at 1; before that it tracks the live prefix only
        let set = ConstraintSet::new(vec![pos(&[&phrase], &[1])], ConstraintParams::default()).unwrap();
        let mut s = set.initial_state();
        let mut best_seen = 0.0f64;
        for &t in &stream {
            s = set.advance(&s, t);
            let p = set.progress(&s);
            if set.all_positive_satisfied(&s) {
                prop_assert_eq!(p, 1.0);
            }
            best_seen = best_seen.max(p);
            prop_assert!(p <= 1.0);
        }
        if set.all_positive_satisfied(&s) {
            prop_assert_eq!(best_seen, 1.0);
        }
    }
}

fn order_rule(set: &ConstraintSet, s: &ConstraintState, positives: usize) -> bool {
    (0..positives).all(|ci| {
        let allowed = &set.clauses()[ci].order_indices;
        match set.clause_status(s, ci) {
            ClauseStatus::Satisfied { position, .. } => allowed.contains(&(position as usize)),
            _ => allowed.iter().any(|&o| o > s.satisfied_count()),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn order_validity_follows_definition(
        phrases in prop::collection::vec(prop::collection::vec(0u32..4, 1..3), 1..4),
        orders in prop::collection::vec(prop::collection::btree_set(1usize..=3, 1..=3), 3),
        stream in prop::collection::vec(0u32..4, 0..10),
        padding in prop_oneof![Just(0usize), Just(130usize)],
    ) {
        // padding negatives push m past the bit-set width for some cases
        let m = phrases.len() + padding;
        let mut clauses: Vec<Clause> = phrases
            .iter()
            .zip(&orders)
            .map(|(p, o)| {
                let mut order: Vec<usize> = o.iter().map(|&x| x.min(phrases.len())).collect();
                if padding > 0 {
                    order.push(m);
                }
                pos(&[p], &order)
            })
            .collect();
        clauses.extend((0..padding).map(|i| neg(&[100 + i as u32], m)));
        let set = ConstraintSet::new(clauses, ConstraintParams::default()).unwrap();
        let mut s = set.initial_state();
        for &t in &stream {
            s = set.advance(&s, t);
            let valid = set.order_valid(&s) == OrderValidity::Valid;
            prop_assert_eq!(valid, order_rule(&set, &s, phrases.len()));
        }
    }
}
