//! Entity collection: taxonomy traversal, set expansion, frequency pruning,
//! pair enumeration and prompt templating.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{self, LanguageModel, LmError};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("taxonomy line {line}: {message}")]
    Ingest { line: usize, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("scoring prompt {index}: {source}")]
    Scoring {
        index: usize,
        #[source]
        source: LmError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Taxonomy,
    Expanded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityClass {
    pub class_id: String,
    pub label: String,
    pub depth: usize,
    pub entities: Vec<Entity>,
}

impl EntityClass {
    pub fn contains(&self, name: &str) -> bool {
        let key = name.to_lowercase();
        self.entities.iter().any(|e| e.name.to_lowercase() == key)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.name.as_str())
    }

    /// Appends `name` unless an entity with the same case-folded name exists.
    pub fn push(&mut self, name: &str, provenance: Provenance) -> bool {
        if self.contains(name) {
            return false;
        }
        self.entities.push(Entity { name: name.to_string(), provenance });
        true
    }
}

/// One line of the taxonomy dump.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyRecord {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub subclass_of: Vec<String>,
    #[serde(default)]
    pub entities: Vec<String>,
}

pub fn read_taxonomy<R: BufRead>(reader: R) -> Result<Vec<TaxonomyRecord>, CatalogError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TaxonomyRecord = serde_json::from_str(&line)
            .map_err(|e| CatalogError::Ingest { line: i + 1, message: e.to_string() })?;
        if record.id.is_empty() || record.label.is_empty() {
            return Err(CatalogError::Ingest {
                line: i + 1,
                message: "id and label must be non-empty".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Breadth-first walk down subclass edges from `roots`.
///
/// Returns every class 1..=`max_depth` edges below a root (roots themselves
/// are seeds, not output), each exactly once at its shallowest depth, ordered
/// by (depth, class id).
pub fn load_taxonomy(
    records: &[TaxonomyRecord],
    roots: &[String],
    max_depth: usize,
) -> Result<Vec<EntityClass>, CatalogError> {
    let by_id: HashMap<&str, &TaxonomyRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let missing: Vec<&str> = roots
        .iter()
        .filter(|r| !by_id.contains_key(r.as_str()))
        .map(String::as_str)
        .collect();
    if roots.is_empty() || !missing.is_empty() {
        return Err(CatalogError::Config(format!("root classes not found in dump: {missing:?}")));
    }

    let mut children: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for r in records {
        for parent in &r.subclass_of {
            children.entry(parent.as_str()).or_default().insert(r.id.as_str());
        }
    }

    let mut seen: HashSet<&str> = roots.iter().map(String::as_str).collect();
    let mut frontier: Vec<&str> = roots.iter().map(String::as_str).collect();
    frontier.sort();
    let mut out = Vec::new();
    for depth in 1..=max_depth {
        let mut next = BTreeSet::new();
        for id in &frontier {
            for &child in children.get(id).into_iter().flatten() {
                if seen.insert(child) {
                    next.insert(child);
                }
            }
        }
        for &id in &next {
            let rec = by_id[id];
            let mut class = EntityClass {
                class_id: rec.id.clone(),
                label: rec.label.clone(),
                depth,
                entities: Vec::new(),
            };
            for e in &rec.entities {
                class.push(e, Provenance::Taxonomy);
            }
            out.push(class);
        }
        frontier = next.into_iter().collect();
        if frontier.is_empty() {
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionParams {
    #[serde(default = "default_expansion_n")]
    pub n: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_expansion_n() -> usize {
    100
}
fn default_rho() -> f64 {
    3.0
}

impl Default for ExpansionParams {
    fn default() -> Self {
        ExpansionParams { n: default_expansion_n(), rho: default_rho() }
    }
}

/// Item/context co-occurrence counts.
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceTable {
    rows: BTreeMap<(String, String), u64>,
}

impl CooccurrenceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, item: &str, context: &str, count: u64) {
        *self.rows.entry((item.to_lowercase(), context.to_string())).or_default() += count;
    }

    /// Parses `item<TAB>context<TAB>count` lines.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, CatalogError> {
        let mut table = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| CatalogError::Ingest { line: i + 1, message: m.to_string() };
            if parts.len() != 3 {
                return Err(bad("expected item<TAB>context<TAB>count"));
            }
            let count: u64 = parts[2].trim().parse().map_err(|_| bad("count is not an integer"))?;
            if count == 0 {
                return Err(bad("counts must be >= 1"));
            }
            table.add(parts[0].trim(), parts[1].trim(), count);
        }
        Ok(table)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Appends up to `params.n` related non-member items.
///
/// Each candidate is ranked by `sum_c sel(c)^rho * pmi(item, c)` over the
/// contexts it occurs in, where `sel(c)` is the fraction of the class's
/// current members seen with `c`. Only positively scored items are appended;
/// ties go to the lexicographically smaller item.
pub fn expand_class(
    class: &EntityClass,
    table: &CooccurrenceTable,
    params: ExpansionParams,
) -> EntityClass {
    let mut out = class.clone();
    if params.n == 0 || table.is_empty() || class.entities.is_empty() {
        return out;
    }
    let mut item_totals: HashMap<&str, u64> = HashMap::new();
    let mut context_totals: HashMap<&str, u64> = HashMap::new();
    let mut grand = 0u64;
    let mut contexts_of: BTreeMap<&str, Vec<(&str, u64)>> = BTreeMap::new();
    for ((item, ctx), &count) in &table.rows {
        *item_totals.entry(item).or_default() += count;
        *context_totals.entry(ctx).or_default() += count;
        grand += count;
        contexts_of.entry(item).or_default().push((ctx, count));
    }

    let seeds: Vec<String> = class.names().map(str::to_lowercase).collect();
    let mut seed_hits: HashMap<&str, usize> = HashMap::new();
    for seed in &seeds {
        for (ctx, _) in contexts_of.get(seed.as_str()).into_iter().flatten() {
            *seed_hits.entry(ctx).or_default() += 1;
        }
    }

    let mut scored: Vec<(f64, &str)> = Vec::new();
    for (item, ctxs) in &contexts_of {
        if class.contains(item) {
            continue;
        }
        let mut score = 0.0;
        for &(ctx, count) in ctxs {
            let sel = seed_hits.get(ctx).copied().unwrap_or(0) as f64 / seeds.len() as f64;
            if sel == 0.0 {
                continue;
            }
            let pmi = ((count as f64 * grand as f64)
                / (item_totals[item] as f64 * context_totals[ctx] as f64))
                .ln();
            score += sel.powf(params.rho) * pmi;
        }
        if score > 0.0 {
            scored.push((score, item));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    for (_, item) in scored.into_iter().take(params.n) {
        out.push(item, Provenance::Expanded);
    }
    out
}

/// Token (or phrase) corpus frequencies.
#[derive(Debug, Clone, Default)]
pub struct FrequencyTable {
    counts: HashMap<String, u64>,
}

impl FrequencyTable {
    pub fn from_pairs<I: IntoIterator<Item = (String, u64)>>(pairs: I) -> Self {
        FrequencyTable { counts: pairs.into_iter().collect() }
    }

    /// Parses `token<TAB>count` lines.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, CatalogError> {
        let mut counts = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (tok, count) = line.rsplit_once('\t').ok_or(CatalogError::Ingest {
                line: i + 1,
                message: "expected token<TAB>count".into(),
            })?;
            let count: u64 = count.trim().parse().map_err(|_| CatalogError::Ingest {
                line: i + 1,
                message: "count is not an integer".into(),
            })?;
            *counts.entry(tok.trim().to_string()).or_default() += count;
        }
        Ok(FrequencyTable { counts })
    }

    /// Exact lookup, falling back to the lowercased form; absent means 0.
    pub fn get(&self, token: &str) -> u64 {
        self.counts
            .get(token)
            .or_else(|| self.counts.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(0)
    }
}

pub fn filter_by_frequency(class: &EntityClass, counts: &FrequencyTable, threshold: u64) -> EntityClass {
    let mut out = class.clone();
    out.entities.retain(|e| counts.get(&e.name) >= threshold);
    out
}

pub fn drop_small_classes(classes: Vec<EntityClass>, min_size: usize) -> Vec<EntityClass> {
    classes.into_iter().filter(|c| c.entities.len() >= min_size).collect()
}

/// An ordered pair; `entity_a` is the "Compared to" entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityPair {
    pub class_id: String,
    pub entity_a: String,
    pub entity_b: String,
}

impl EntityPair {
    pub fn new(class_id: &str, a: &str, b: &str) -> Result<Self, CatalogError> {
        if a.is_empty() || b.is_empty() || a == b {
            return Err(CatalogError::Precondition(format!(
                "a pair needs two distinct entities, got ({a:?}, {b:?})"
            )));
        }
        Ok(EntityPair { class_id: class_id.to_string(), entity_a: a.to_string(), entity_b: b.to_string() })
    }
}

/// All pairs within a class in lexicographic order. Undirected pairs are
/// oriented so that `entity_a < entity_b`.
pub fn enumerate_pairs(class: &EntityClass, directed: bool) -> Result<Vec<EntityPair>, CatalogError> {
    if class.entities.len() < 2 {
        return Err(CatalogError::Precondition(format!(
            "class {} has fewer than 2 entities",
            class.class_id
        )));
    }
    let mut names: Vec<&str> = class.names().collect();
    names.sort();
    let mut out = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for (j, b) in names.iter().enumerate() {
            if i == j || (!directed && j < i) {
                continue;
            }
            out.push(EntityPair::new(&class.class_id, a, b)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparativePrompt {
    pub pair: EntityPair,
    pub text: String,
    /// Length-penalized perplexity under the scoring model, once scored.
    pub ppl: Option<f64>,
}

pub fn prompt_text(entity_a: &str, entity_b: &str) -> String {
    format!("Compared to {entity_a}, {entity_b}")
}

pub fn render_prompt(pair: &EntityPair) -> Result<ComparativePrompt, CatalogError> {
    if pair.entity_a == pair.entity_b {
        return Err(CatalogError::Precondition(format!(
            "cannot compare {:?} with itself",
            pair.entity_a
        )));
    }
    Ok(ComparativePrompt {
        pair: pair.clone(),
        text: prompt_text(&pair.entity_a, &pair.entity_b),
        ppl: None,
    })
}

fn floor_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Scores every prompt and drops the `floor(drop_fraction * N)` with the
/// highest perplexity. Survivors keep their input order and carry `ppl`.
pub fn perplexity_filter(
    prompts: &[ComparativePrompt],
    lm: &dyn LanguageModel,
    drop_fraction: f64,
    alpha: f64,
) -> Result<Vec<ComparativePrompt>, CatalogError> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(CatalogError::Precondition(format!(
            "drop_fraction must be in [0, 1), got {drop_fraction}"
        )));
    }
    let mut scored = Vec::with_capacity(prompts.len());
    for (index, p) in prompts.iter().enumerate() {
        let ppl = lm
            .tokenize(&p.text)
            .and_then(|seq| lm::score_sequence(lm, &seq.ids, alpha))
            .map_err(|source| CatalogError::Scoring { index, source })?
            .perplexity();
        let mut p = p.clone();
        p.ppl = Some(ppl);
        scored.push(p);
    }
    let drop = floor_count(drop_fraction, scored.len());
    let mut ranked: Vec<usize> = (0..scored.len()).collect();
    ranked.sort_by(|&i, &j| {
        let (a, b) = (&scored[i], &scored[j]);
        a.ppl.unwrap().total_cmp(&b.ppl.unwrap()).then_with(|| a.text.cmp(&b.text))
    });
    let dropped: HashSet<usize> = ranked[ranked.len() - drop..].iter().copied().collect();
    Ok(scored
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, p)| p)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, parents: &[&str], entities: &[&str]) -> TaxonomyRecord {
        TaxonomyRecord {
            id: id.into(),
            label: id.to_lowercase(),
            subclass_of: parents.iter().map(|s| s.to_string()).collect(),
            entities: entities.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn class(names: &[&str]) -> EntityClass {
        let mut c = EntityClass { class_id: "Q1".into(), label: "appliance".into(), depth: 1, entities: vec![] };
        for n in names {
            c.push(n, Provenance::Taxonomy);
        }
        c
    }

    #[test]
    fn chain_respects_depth_bound() {
        let dump = vec![rec("R", &[], &[]), rec("A", &["R"], &["x"]), rec("B", &["A"], &[]), rec("C", &["B"], &[])];
        let got = load_taxonomy(&dump, &["R".into()], 2).unwrap();
        let ids: Vec<_> = got.iter().map(|c| (c.class_id.as_str(), c.depth)).collect();
        assert_eq!(ids, vec![("A", 1), ("B", 2)]);
        assert_eq!(got[0].entities[0].name, "x");
    }

    #[test]
    fn diamond_is_visited_once() {
        let dump = vec![
            rec("R", &[], &[]),
            rec("A", &["R"], &[]),
            rec("B", &["R"], &[]),
            rec("C", &["A", "B"], &[]),
        ];
        let got = load_taxonomy(&dump, &["R".into()], 2).unwrap();
        let ids: Vec<_> = got.iter().map(|c| (c.class_id.as_str(), c.depth)).collect();
        assert_eq!(ids, vec![("A", 1), ("B", 1), ("C", 2)]);
    }

    #[test]
    fn missing_root_is_config_error() {
        assert!(matches!(load_taxonomy(&[], &["R".into()], 2), Err(CatalogError::Config(_))));
    }

    #[test]
    fn malformed_line_is_named() {
        let src = "{\"id\":\"R\",\"label\":\"r\"}\n{not json}\n";
        match read_taxonomy(src.as_bytes()) {
            Err(CatalogError::Ingest { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_entities_collapse_case_insensitively() {
        let dump = vec![rec("R", &[], &[]), rec("A", &["R"], &["Blender", "blender", "mixer"])];
        let got = load_taxonomy(&dump, &["R".into()], 2).unwrap();
        assert_eq!(got[0].names().collect::<Vec<_>>(), vec!["Blender", "mixer"]);
    }

    fn kitchen_table() -> CooccurrenceTable {
        let mut t = CooccurrenceTable::new();
        t.add("blender", "kitchen", 5);
        t.add("mixer", "kitchen", 5);
        t.add("toaster", "kitchen", 5);
        t.add("car", "road", 5);
        t
    }

    #[test]
    fn expansion_ranks_shared_contexts_first() {
        let seeds = class(&["blender", "mixer"]);
        let out = expand_class(&seeds, &kitchen_table(), ExpansionParams { n: 1, rho: 3.0 });
        assert_eq!(out.names().collect::<Vec<_>>(), vec!["blender", "mixer", "toaster"]);
        assert_eq!(out.entities[2].provenance, Provenance::Expanded);
        // car shares no context with the seeds, so it never scores above zero
        let wide = expand_class(&seeds, &kitchen_table(), ExpansionParams { n: 10, rho: 3.0 });
        assert!(!wide.contains("car"));
    }

    #[test]
    fn expansion_edge_cases() {
        let seeds = class(&["blender", "mixer"]);
        assert_eq!(expand_class(&seeds, &kitchen_table(), ExpansionParams { n: 0, rho: 3.0 }), seeds);
        assert_eq!(expand_class(&seeds, &CooccurrenceTable::new(), ExpansionParams::default()), seeds);
        let with_toaster = class(&["blender", "mixer", "Toaster"]);
        let out = expand_class(&with_toaster, &kitchen_table(), ExpansionParams::default());
        assert_eq!(out.entities.len(), 3);
    }

    #[test]
    fn frequency_filter_examples() {
        let c = class(&["blender", "prensa ironing"]);
        let counts = FrequencyTable::from_pairs([("blender".into(), 150), ("prensa ironing".into(), 3)]);
        assert_eq!(filter_by_frequency(&c, &counts, 100).names().collect::<Vec<_>>(), vec!["blender"]);
        assert_eq!(filter_by_frequency(&c, &counts, 0), c);
        let c2 = class(&["ghost"]);
        assert!(filter_by_frequency(&c2, &counts, 1).entities.is_empty());
    }

    #[test]
    fn small_classes_dropped() {
        let got = drop_small_classes(vec![class(&["a"]), class(&["a", "b"])], 2);
        assert_eq!(got.len(), 1);
        assert!(drop_small_classes(vec![], 2).is_empty());
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(enumerate_pairs(&class(&["x", "y", "z"]), true).unwrap().len(), 6);
        let und = enumerate_pairs(&class(&["y", "x"]), false).unwrap();
        assert_eq!((und[0].entity_a.as_str(), und[0].entity_b.as_str()), ("x", "y"));
        assert_eq!(und.len(), 1);
        assert!(enumerate_pairs(&class(&["x"]), true).is_err());
    }

    #[test]
    fn prompt_template() {
        let p = render_prompt(&EntityPair::new("c", "helicopters", "planes").unwrap()).unwrap();
        assert_eq!(p.text, "Compared to helicopters, planes");
        let p = render_prompt(&EntityPair::new("c", "cherries", "peaches").unwrap()).unwrap();
        assert_eq!(p.text, "Compared to cherries, peaches");
        assert!(EntityPair::new("c", "x", "x").is_err());
        let forged = EntityPair { class_id: "c".into(), entity_a: "x".into(), entity_b: "x".into() };
        assert!(render_prompt(&forged).is_err());
    }

    /// Each prompt text is one token whose log-probability is `-ln(ppl)`.
    struct FixedPerplexity {
        vocab: crate::lm::Vocabulary,
        ppl: Vec<f64>,
    }

    impl FixedPerplexity {
        fn new(entries: &[(&str, f64)]) -> Self {
            FixedPerplexity {
                vocab: crate::lm::Vocabulary::new(entries.iter().map(|(t, _)| t.to_string()).collect()),
                ppl: entries.iter().map(|(_, p)| *p).collect(),
            }
        }
    }

    impl LanguageModel for FixedPerplexity {
        fn vocab(&self) -> &crate::lm::Vocabulary {
            &self.vocab
        }
        fn tokenize(&self, text: &str) -> Result<crate::lm::TokenSequence, LmError> {
            let id = self.vocab.id(text).ok_or(LmError::EmptyText)?;
            Ok(crate::lm::TokenSequence { ids: vec![id], surface: text.into() })
        }
        fn next_logprobs(&self, _: &[crate::lm::TokenId]) -> Result<Vec<f64>, LmError> {
            Ok(self.ppl.iter().map(|p| -p.ln()).collect())
        }
        fn name(&self) -> String {
            "fixed".into()
        }
    }

    fn prompts(texts: &[&str]) -> Vec<ComparativePrompt> {
        texts
            .iter()
            .map(|t| ComparativePrompt {
                pair: EntityPair::new("c", "a", "b").unwrap(),
                text: t.to_string(),
                ppl: None,
            })
            .collect()
    }

    #[test]
    fn perplexity_filter_drops_the_worst() {
        let lm = FixedPerplexity::new(&[("p1", 5.0), ("p2", 50.0)]);
        let kept = perplexity_filter(&prompts(&["p1", "p2"]), &lm, 0.5, 0.1).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text, "p1");
        assert!((kept[0].ppl.unwrap() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_filter_counts() {
        let names: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let entries: Vec<(&str, f64)> = names.iter().enumerate().map(|(i, n)| (n.as_str(), 1.0 + i as f64)).collect();
        let lm = FixedPerplexity::new(&entries);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        assert_eq!(perplexity_filter(&prompts(&refs), &lm, 0.30, 0.1).unwrap().len(), 7);
        assert_eq!(perplexity_filter(&prompts(&refs), &lm, 0.0, 0.1).unwrap().len(), 10);
        assert!(perplexity_filter(&prompts(&refs), &lm, 1.0, 0.1).is_err());
    }

    #[test]
    fn perplexity_ties_break_by_text() {
        let lm = FixedPerplexity::new(&[("b", 9.0), ("a", 9.0), ("c", 1.0)]);
        let kept = perplexity_filter(&prompts(&["b", "a", "c"]), &lm, 0.34, 0.1).unwrap();
        let texts: Vec<&str> = kept.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "c"]);
    }

    #[test]
    fn perplexity_backend_failure_names_prompt() {
        let lm = FixedPerplexity::new(&[("p1", 5.0)]);
        match perplexity_filter(&prompts(&["p1", "missing"]), &lm, 0.3, 0.1) {
            Err(CatalogError::Scoring { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn brute_reachable(dump: &[TaxonomyRecord], root: &str, max_depth: usize) -> BTreeMap<String, usize> {
        // Relax shortest distances by repeated sweeps.
        let mut dist: BTreeMap<String, usize> = BTreeMap::new();
        dist.insert(root.to_string(), 0);
        loop {
            let mut changed = false;
            for r in dump {
                for p in &r.subclass_of {
                    if let Some(&d) = dist.get(p) {
                        let nd = d + 1;
                        if nd <= max_depth && dist.get(&r.id).is_none_or(|&old| nd < old) {
                            dist.insert(r.id.clone(), nd);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        dist.remove(root);
        dist
    }

    proptest! {
        #[test]
        fn bfs_matches_brute_force_reachability(
            edges in prop::collection::vec((0usize..12, 0usize..12), 0..30),
            max_depth in 0usize..4,
        ) {
            let mut dump: Vec<TaxonomyRecord> = (0..12).map(|i| rec(&format!("N{i:02}"), &[], &[])).collect();
            for (child, parent) in edges {
                if child != parent {
                    dump[child].subclass_of.push(format!("N{parent:02}"));
                }
            }
            let got = load_taxonomy(&dump, &["N00".into()], max_depth).unwrap();
            let expected = brute_reachable(&dump, "N00", max_depth);
            let got_map: BTreeMap<String, usize> = got.iter().map(|c| (c.class_id.clone(), c.depth)).collect();
            prop_assert_eq!(got.len(), got_map.len());
            prop_assert_eq!(got_map, expected);
            prop_assert!(got.iter().all(|c| c.depth <= max_depth));
        }

        #[test]
        fn frequency_filter_idempotent_and_order_free(
            names in prop::collection::btree_set("[a-f]{1,3}", 1..8),
            threshold in 0u64..10,
        ) {
            let names: Vec<String> = names.into_iter().collect();
            let counts = FrequencyTable::from_pairs(names.iter().enumerate().map(|(i, n)| (n.clone(), i as u64 * 2)));
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let c = class(&refs);
            let once = filter_by_frequency(&c, &counts, threshold);
            prop_assert_eq!(&filter_by_frequency(&once, &counts, threshold), &once);
            let mut rev = refs.clone();
            rev.reverse();
            let other = filter_by_frequency(&class(&rev), &counts, threshold);
            let mut a: Vec<&str> = once.names().collect();
            let mut b: Vec<&str> = other.names().collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn expansion_is_monotone_in_n(n in 0usize..6) {
            let mut t = kitchen_table();
            t.add("oven", "kitchen", 2);
            t.add("oven", "bakery", 9);
            t.add("kettle", "kitchen", 1);
            t.add("blender", "bakery", 1);
            let seeds = class(&["blender", "mixer"]);
            let small = expand_class(&seeds, &t, ExpansionParams { n, rho: 3.0 });
            let big = expand_class(&seeds, &t, ExpansionParams { n: n + 1, rho: 3.0 });
            prop_assert_eq!(&big.entities[..small.entities.len()], &small.entities[..]);
            prop_assert!(small.entities[2..].iter().all(|e| !seeds.contains(&e.name)));
        }

        #[test]
        fn perplexity_filter_size_is_exact(n in 0usize..40, frac in 0.0f64..0.99) {
            let names: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
            let entries: Vec<(&str, f64)> = names.iter().enumerate().map(|(i, s)| (s.as_str(), 1.0 + (i * 7 % 5) as f64)).collect();
            let lm = FixedPerplexity::new(&entries);
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let kept = perplexity_filter(&prompts(&refs), &lm, frac, 0.1).unwrap();
            prop_assert_eq!(kept.len(), n - (frac * n as f64 + 1e-9).floor() as usize);
        }

        #[test]
        fn prompts_are_injective(a in "[a-z]{1,5}", b in "[a-z]{1,5}", c in "[a-z]{1,5}", d in "[a-z]{1,5}") {
            prop_assume!(a != b && c != d && (a != c || b != d));
            prop_assert_ne!(prompt_text(&a, &b), prompt_text(&c, &d));
        }
    }
}
