//! Token-level Aho-Corasick automaton over constraint phrases.
//!
//! A state is the trie node for the longest suffix of the stream that is a
//! prefix of some phrase. Every other phrase's live prefix is found on the
//! failure chain of that node, so one `u32` per hypothesis is enough to
//! recover the matched length of every literal.

use std::collections::VecDeque;

use crate::lm::TokenId;

pub type StateId = u32;

pub const ROOT: StateId = 0;

#[derive(Debug, Clone, Default)]
struct Node {
    children: Vec<(TokenId, StateId)>,
    fail: StateId,
    depth: u32,
    /// Patterns that end at this node or at any node on its failure chain.
    outputs: Vec<u32>,
    /// Patterns whose first `depth` tokens spell this node.
    prefix_of: Vec<u32>,
}

impl Node {
    fn child(&self, tok: TokenId) -> Option<StateId> {
        self.children
            .binary_search_by_key(&tok, |(t, _)| *t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct PhraseAutomaton {
    nodes: Vec<Node>,
}

impl PhraseAutomaton {
    /// Builds the automaton; pattern `i` is reported as `i`. Patterns must be
    /// non-empty.
    pub fn build(patterns: &[Vec<TokenId>]) -> Self {
        let mut nodes = vec![Node::default()];
        for (pid, pattern) in patterns.iter().enumerate() {
            assert!(!pattern.is_empty(), "constraint phrases are non-empty");
            let mut cur = ROOT;
            for &tok in pattern {
                cur = match nodes[cur as usize].child(tok) {
                    Some(next) => next,
                    None => {
                        let id = nodes.len() as StateId;
                        let depth = nodes[cur as usize].depth + 1;
                        nodes.push(Node { depth, ..Node::default() });
                        let children = &mut nodes[cur as usize].children;
                        let at = children.partition_point(|(t, _)| *t < tok);
                        children.insert(at, (tok, id));
                        id
                    }
                };
                nodes[cur as usize].prefix_of.push(pid as u32);
            }
            nodes[cur as usize].outputs.push(pid as u32);
        }

        let mut queue: VecDeque<StateId> = nodes[0].children.iter().map(|&(_, c)| c).collect();
        while let Some(u) = queue.pop_front() {
            let children = nodes[u as usize].children.clone();
            for (tok, child) in children {
                let mut f = nodes[u as usize].fail;
                let target = loop {
                    if let Some(next) = nodes[f as usize].child(tok) {
                        if next != child {
                            break next;
                        }
                    }
                    if f == ROOT {
                        break ROOT;
                    }
                    f = nodes[f as usize].fail;
                };
                nodes[child as usize].fail = target;
                let inherited = nodes[target as usize].outputs.clone();
                let outs = &mut nodes[child as usize].outputs;
                outs.extend(inherited);
                outs.sort_unstable();
                outs.dedup();
                queue.push_back(child);
            }
        }
        PhraseAutomaton { nodes }
    }

    pub fn step(&self, mut state: StateId, tok: TokenId) -> StateId {
        loop {
            if let Some(next) = self.nodes[state as usize].child(tok) {
                return next;
            }
            if state == ROOT {
                return ROOT;
            }
            state = self.nodes[state as usize].fail;
        }
    }

    pub fn depth(&self, state: StateId) -> usize {
        self.nodes[state as usize].depth as usize
    }

    pub fn outputs(&self, state: StateId) -> &[u32] {
        &self.nodes[state as usize].outputs
    }

    pub fn prefix_of(&self, state: StateId) -> &[u32] {
        &self.nodes[state as usize].prefix_of
    }

    /// `state` and its failure ancestors, deepest first, root excluded.
    pub fn chain(&self, state: StateId) -> impl Iterator<Item = StateId> + '_ {
        let mut cur = state;
        std::iter::from_fn(move || {
            if cur == ROOT {
                return None;
            }
            let out = cur;
            cur = self.nodes[cur as usize].fail;
            Some(out)
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn occurs(hay: &[TokenId], needle: &[TokenId]) -> bool {
        hay.windows(needle.len()).any(|w| w == needle)
    }

    #[test]
    fn overlapping_prefix_rematches() {
        // "more more expensive" must still complete "more expensive"
        let a = PhraseAutomaton::build(&[vec![1, 2]]);
        let mut s = a.step(ROOT, 1);
        assert_eq!(a.depth(s), 1);
        s = a.step(s, 1);
        assert_eq!(a.depth(s), 1);
        s = a.step(s, 2);
        assert_eq!(a.outputs(s), &[0]);
    }

    #[test]
    fn nested_outputs_are_inherited() {
        let a = PhraseAutomaton::build(&[vec![1, 2, 3], vec![2, 3], vec![3]]);
        let mut s = ROOT;
        for t in [1, 2, 3] {
            s = a.step(s, t);
        }
        assert_eq!(a.outputs(s), &[0, 1, 2]);
    }

    proptest! {
        #[test]
        fn matches_brute_force_substring_search(
            patterns in prop::collection::vec(prop::collection::vec(0u32..4, 1..4), 1..5),
            stream in prop::collection::vec(0u32..4, 0..20),
        ) {
            let a = PhraseAutomaton::build(&patterns);
            let mut s = ROOT;
            let mut seen = vec![false; patterns.len()];
            for (i, &t) in stream.iter().enumerate() {
                s = a.step(s, t);
                for &p in a.outputs(s) {
                    seen[p as usize] = true;
                }
                // chain depths are the live prefix lengths
                for (pid, p) in patterns.iter().enumerate() {
                    let brute = (1..=p.len().min(i + 1))
                        .rev()
                        .find(|&d| stream[i + 1 - d..=i] == p[..d])
                        .unwrap_or(0);
                    let via_chain = a
                        .chain(s)
                        .find(|&n| a.prefix_of(n).contains(&(pid as u32)))
                        .map_or(0, |n| a.depth(n));
                    prop_assert_eq!(via_chain, brute);
                }
            }
            for (pid, p) in patterns.iter().enumerate() {
                prop_assert_eq!(seen[pid], occurs(&stream, p));
            }
        }
    }
}
