//! Diversity and agreement metrics over comparative sets, and the QA
//! rendering of templated statements.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::relation::{parse_statement, strip_subject, RelationExtractor};
use crate::filter::{NliLabel, NliProvider, NliThresholds};
use crate::store::KnowledgeRecord;
use crate::text;

/// Floor used in place of a zero n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("self-BLEU needs at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("n-gram order must be at least 1")]
    BadOrder,
    #[error("no record has a relation phrase")]
    NoRelations,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {record_id} is not a templated statement: {reason}")]
    NotTemplated { record_id: u64, reason: String },
    #[error("entropy base must be positive and not 1")]
    BadBase,
}

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= k {
        for g in tokens.windows(k) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU of `hyp` against `refs` with uniform weights up to order
/// `n`, clipped counts, the closest-reference brevity penalty (ties go to
/// the shorter reference) and an epsilon floor for zero matches.
///
/// Hypotheses shorter than `n` use their effective order: orders with no
/// hypothesis n-grams are left out of the geometric mean.
pub fn bleu(hyp: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let order = n.min(hyp.len());
    let mut log_sum = 0.0;
    for k in 1..=order {
        let h = ngram_counts(hyp, k);
        let total: usize = h.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched == 0 { BLEU_EPSILON / total.max(1) as f64 } else { matched as f64 / total as f64 };
        log_sum += p.ln() / order as f64;
    }
    let c = hyp.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

/// Mean BLEU-n of every candidate against all the others.
pub fn self_bleu<S: AsRef<str>>(candidates: &[S], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::BadOrder);
    }
    if candidates.len() < 2 {
        return Err(MetricsError::TooFewCandidates(candidates.len()));
    }
    let toks: Vec<Vec<String>> = candidates.iter().map(|c| text::lower_words(c.as_ref())).collect();
    let total: f64 = (0..toks.len())
        .map(|i| {
            let refs: Vec<Vec<String>> =
                toks.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect();
            bleu(&toks[i], &refs, n)
        })
        .sum();
    Ok(total / toks.len() as f64)
}

/// Shannon entropy of a count distribution in the given log base.
pub fn entropy_of_counts<I: IntoIterator<Item = usize>>(counts: I, base: f64) -> Result<f64, MetricsError> {
    if !(base > 0.0) || base == 1.0 {
        return Err(MetricsError::BadBase);
    }
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(MetricsError::NoRelations);
    }
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum();
    Ok(if base == 2.0 { h } else { h / base.log2() })
}

/// Entropy of the relation-phrase distribution; records without a relation
/// are ignored.
pub fn relation_entropy(records: &[KnowledgeRecord], base: f64) -> Result<f64, MetricsError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let rel = r.adjective.trim();
        if !rel.is_empty() {
            *counts.entry(rel).or_default() += 1;
        }
    }
    entropy_of_counts(counts.into_values(), base)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Size,
    Speed,
    Length,
    Mass,
    Other,
}

impl Dimension {
    pub fn parse(s: &str) -> Option<Dimension> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "size" => Dimension::Size,
            "speed" => Dimension::Speed,
            "length" => Dimension::Length,
            "mass" | "weight" => Dimension::Mass,
            "other" => Dimension::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AGreater,
    BGreater,
}

impl Direction {
    pub fn flip(self) -> Direction {
        match self {
            Direction::AGreater => Direction::BGreater,
            Direction::BGreater => Direction::AGreater,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTriple {
    pub entity_a: String,
    pub entity_b: String,
    pub dimension: Dimension,
    pub direction: Direction,
}

/// Parses `entity_a<TAB>entity_b<TAB>dimension<TAB>direction` lines.
pub fn parse_gold(src: &str) -> Result<Vec<GoldTriple>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| MetricsError::Parse { line: i + 1, message: message.to_string() };
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 4 {
            return Err(err("expected 4 tab-separated fields"));
        }
        if f[0].is_empty() || f[0].eq_ignore_ascii_case(f[1]) {
            return Err(err("entities must be non-empty and distinct"));
        }
        let dimension = Dimension::parse(f[2]).ok_or_else(|| err("unknown dimension"))?;
        let direction = match f[3] {
            "a_greater" => Direction::AGreater,
            "b_greater" => Direction::BGreater,
            _ => return Err(err("direction must be a_greater or b_greater")),
        };
        out.push(GoldTriple { entity_a: f[0].into(), entity_b: f[1].into(), dimension, direction });
    }
    Ok(out)
}

/// Relation phrase to (dimension, whether it asserts "greater").
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DimensionLexicon {
    entries: BTreeMap<String, (Dimension, bool)>,
}

impl DimensionLexicon {
    /// Parses `adjective<TAB>dimension<TAB>polarity` lines, polarity being
    /// `greater` or `less`.
    pub fn parse(src: &str) -> Result<Self, MetricsError> {
        let mut entries = BTreeMap::new();
        for (i, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| MetricsError::Parse { line: i + 1, message: message.to_string() };
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 || f[0].is_empty() {
                return Err(err("expected `adjective<TAB>dimension<TAB>polarity`"));
            }
            let dim = Dimension::parse(f[1]).ok_or_else(|| err("unknown dimension"))?;
            let greater = match f[2] {
                "greater" => true,
                "less" => false,
                _ => return Err(err("polarity must be greater or less")),
            };
            entries.insert(f[0].to_lowercase(), (dim, greater));
        }
        Ok(DimensionLexicon { entries })
    }

    /// Size, speed, length and mass adjectives.
    pub fn builtin() -> Self {
        const ROWS: &[(&str, Dimension, bool)] = &[
            ("larger", Dimension::Size, true),
            ("bigger", Dimension::Size, true),
            ("taller", Dimension::Size, true),
            ("smaller", Dimension::Size, false),
            ("tinier", Dimension::Size, false),
            ("faster", Dimension::Speed, true),
            ("quicker", Dimension::Speed, true),
            ("slower", Dimension::Speed, false),
            ("longer", Dimension::Length, true),
            ("shorter", Dimension::Length, false),
            ("heavier", Dimension::Mass, true),
            ("lighter", Dimension::Mass, false),
        ];
        DimensionLexicon { entries: ROWS.iter().map(|&(a, d, g)| (a.to_string(), (d, g))).collect() }
    }

    pub fn lookup(&self, relation: &str) -> Option<(Dimension, bool)> {
        self.entries.get(&relation.trim().to_lowercase()).copied()
    }

    /// First "greater" adjective for a dimension, alphabetically.
    pub fn canonical(&self, dim: Dimension) -> Option<&str> {
        self.entries.iter().find(|(_, &(d, g))| d == dim && g).map(|(a, _)| a.as_str())
    }
}

/// Orientation of a record against a gold triple: `Some(false)` when the
/// entities line up, `Some(true)` when reversed.
fn orientation(r: &KnowledgeRecord, g: &GoldTriple) -> Option<bool> {
    let eq = |x: &str, y: &str| x.eq_ignore_ascii_case(y);
    if eq(&r.entity_a, &g.entity_a) && eq(&r.entity_b, &g.entity_b) {
        Some(false)
    } else if eq(&r.entity_a, &g.entity_b) && eq(&r.entity_b, &g.entity_a) {
        Some(true)
    } else {
        None
    }
}

/// Direction asserted by a templated record: the subject (`entity_b`) is
/// the greater one for a "greater" relation.
fn record_direction(greater: bool) -> Direction {
    if greater {
        Direction::BGreater
    } else {
        Direction::AGreater
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub overlap: usize,
    pub correct: usize,
}

impl Agreement {
    /// Fraction of overlapping records that agree; `None` without overlap.
    pub fn accuracy(&self) -> Option<f64> {
        (self.overlap > 0).then(|| self.correct as f64 / self.overlap as f64)
    }

    /// Shard merge.
    pub fn merge(self, other: Agreement) -> Agreement {
        Agreement { overlap: self.overlap + other.overlap, correct: self.correct + other.correct }
    }
}

/// Lexicon-based agreement: a record overlaps a gold triple when its
/// entities match in either orientation and its relation maps to the
/// triple's dimension. Each record counts at most once.
pub fn gold_agreement(records: &[KnowledgeRecord], gold: &[GoldTriple], lexicon: &DimensionLexicon) -> Agreement {
    let mut acc = Agreement { overlap: 0, correct: 0 };
    for r in records {
        let Some((dim, greater)) = lexicon.lookup(&r.adjective) else {
            continue;
        };
        let hit = gold.iter().find_map(|g| orientation(r, g).filter(|_| g.dimension == dim).map(|rev| (g, rev)));
        if let Some((g, reversed)) = hit {
            acc.overlap += 1;
            let mut dir = record_direction(greater);
            if reversed {
                dir = dir.flip();
            }
            if dir == g.direction {
                acc.correct += 1;
            }
        }
    }
    acc
}

/// Gold triples implied by records whose relation the lexicon knows.
pub fn gold_from_records(records: &[KnowledgeRecord], lexicon: &DimensionLexicon) -> Vec<GoldTriple> {
    records
        .iter()
        .filter_map(|r| {
            let (dimension, greater) = lexicon.lookup(&r.adjective)?;
            Some(GoldTriple {
                entity_a: r.entity_a.clone(),
                entity_b: r.entity_b.clone(),
                dimension,
                direction: record_direction(greater),
            })
        })
        .collect()
}

/// Renders a gold triple as a templated statement using the dimension's
/// canonical "greater" adjective.
pub fn gold_statement(g: &GoldTriple, lexicon: &DimensionLexicon) -> Option<String> {
    let adj = lexicon.canonical(g.dimension)?;
    let (lesser, greater) = match g.direction {
        Direction::AGreater => (&g.entity_b, &g.entity_a),
        Direction::BGreater => (&g.entity_a, &g.entity_b),
    };
    Some(format!("Compared to {lesser}, {greater} are {adj}."))
}

/// NLI-based agreement. A record overlaps a gold triple about the same
/// entities when NLI entails or contradicts in either direction; it is
/// correct when entailed and never contradicted.
pub fn nli_gold_agreement(
    records: &[KnowledgeRecord],
    gold: &[GoldTriple],
    lexicon: &DimensionLexicon,
    nli: &dyn NliProvider,
    thresholds: &NliThresholds,
) -> Agreement {
    let mut acc = Agreement { overlap: 0, correct: 0 };
    for r in records {
        let mut verdict = None;
        for g in gold.iter().filter(|g| orientation(r, g).is_some()) {
            let Some(stmt) = gold_statement(g, lexicon) else { continue };
            let labels: Vec<NliLabel> = [(&r.text, &stmt), (&stmt, &r.text)]
                .into_iter()
                .map(|(p, h)| nli.classify(p, h).map(|v| thresholds.apply(v)).unwrap_or(NliLabel::Neutral))
                .collect();
            if labels.contains(&NliLabel::Contradiction) {
                verdict = Some(false);
                break;
            }
            if labels.contains(&NliLabel::Entailment) {
                verdict = Some(true);
                break;
            }
        }
        if let Some(ok) = verdict {
            acc.overlap += 1;
            acc.correct += ok as usize;
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Answer {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaItem {
    pub question: String,
    pub option_a: String,
    pub option_b: String,
    pub answer: Answer,
}

fn predicate_of(r: &KnowledgeRecord) -> Result<&str, String> {
    let s = parse_statement(&r.text).ok_or("does not start with \"Compared to A, \"")?;
    if !s.reference.eq_ignore_ascii_case(&r.entity_a) {
        return Err(format!("reference {:?} is not {:?}", s.reference, r.entity_a));
    }
    let pred = strip_subject(s.rest, &r.entity_b).ok_or_else(|| format!("subject is not {:?}", r.entity_b))?;
    let pred = pred.trim_end_matches(|c: char| c == '.' || c.is_whitespace());
    if pred.is_empty() {
        return Err("empty predicate".into());
    }
    Ok(pred)
}

/// Multiple-choice rendering of a templated record. The subject is the
/// entity the statement favors, so the answer is always B.
pub fn qa_transform(r: &KnowledgeRecord, extractor: &RelationExtractor) -> Result<QaItem, MetricsError> {
    let bad = |reason: String| MetricsError::NotTemplated { record_id: r.record_id, reason };
    let pred = predicate_of(r).map_err(bad)?;
    if extractor.extract(pred).is_none() {
        return Err(bad(format!("no relation in {pred:?}")));
    }
    Ok(QaItem {
        question: format!("Which of the following {pred}?"),
        option_a: r.entity_a.clone(),
        option_b: r.entity_b.clone(),
        answer: Answer::B,
    })
}

/// Rebuilds the statement a QA item came from.
pub fn qa_statement(item: &QaItem) -> Option<String> {
    let pred = item.question.strip_prefix("Which of the following ")?.strip_suffix('?')?;
    let (lesser, greater) = match item.answer {
        Answer::A => (&item.option_b, &item.option_a),
        Answer::B => (&item.option_a, &item.option_b),
    };
    Some(format!("Compared to {lesser}, {greater} {pred}."))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub pairs: usize,
    /// Mean over pairs with at least two records.
    pub self_bleu2: Option<f64>,
    pub self_bleu3: Option<f64>,
    pub relation_entropy: Option<f64>,
    pub entropy_base: f64,
    pub distinct_relations: usize,
    pub gold: Option<Agreement>,
}

/// Corpus summary: per-pair Self-BLEU averaged over pairs, relation entropy
/// and optional gold agreement.
pub fn summarize(
    records: &[KnowledgeRecord],
    entropy_base: f64,
    gold: Option<(&[GoldTriple], &DimensionLexicon)>,
) -> Result<MetricsReport, MetricsError> {
    let mut by_pair: BTreeMap<(&str, &str, &str), Vec<&str>> = BTreeMap::new();
    for r in records {
        by_pair.entry((&r.class_id, &r.entity_a, &r.entity_b)).or_default().push(&r.text);
    }
    let mean_sb = |n: usize| -> Result<Option<f64>, MetricsError> {
        let vals: Vec<f64> = by_pair
            .values()
            .filter(|t| t.len() >= 2)
            .map(|t| self_bleu(t, n))
            .collect::<Result<_, _>>()?;
        Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
    };
    let relation_entropy = match relation_entropy(records, entropy_base) {
        Ok(h) => Some(h),
        Err(MetricsError::NoRelations) => None,
        Err(e) => return Err(e),
    };
    let distinct: std::collections::BTreeSet<&str> =
        records.iter().map(|r| r.adjective.trim()).filter(|a| !a.is_empty()).collect();
    Ok(MetricsReport {
        records: records.len(),
        pairs: by_pair.len(),
        self_bleu2: mean_sb(2)?,
        self_bleu3: mean_sb(3)?,
        relation_entropy,
        entropy_base,
        distinct_relations: distinct.len(),
        gold: gold.map(|(g, lex)| gold_agreement(records, g, lex)),
    })
}
