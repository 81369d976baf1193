//! Filter cascade over generated knowledge records.
//!
//! Every stage works per entity pair and returns its survivors (ordered by
//! `record_id`) with the stage's flag set. A stage whose input already
//! carries its flag on every record returns that input unchanged, so
//! re-running a stage on its own output is the identity.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::discriminator::KnowledgeScorer;
use crate::store::{FilterStage, KnowledgeRecord};

pub mod cluster;
pub mod embed;
pub mod nli;
pub mod relation;

pub use embed::{EmbeddingProvider, NgramEmbedder};
pub use nli::{AntonymNli, NliLabel, NliProvider, NliThresholds, NliVerdict, RemoteNli};
pub use relation::{extract_relation, RelationExtractor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("{0}")]
    Precondition(String),
    #[error("provider failed: {0}")]
    Provider(String),
    #[error("scorer failed on record {record_id}: {message}")]
    Scorer { record_id: u64, message: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageResult {
    pub kept: Vec<KnowledgeRecord>,
    pub diagnostics: Vec<String>,
}

fn sorted(mut records: Vec<KnowledgeRecord>) -> Vec<KnowledgeRecord> {
    records.sort_by_key(|r| r.record_id);
    records
}

fn already_applied(records: &[KnowledgeRecord], stage: FilterStage) -> bool {
    !records.is_empty() && records.iter().all(|r| r.stage_flags.get(stage))
}

/// Records grouped by entity pair, groups in pair order, members by id.
fn by_pair(records: &[KnowledgeRecord]) -> Vec<Vec<KnowledgeRecord>> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<KnowledgeRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.class_id, &r.entity_a, &r.entity_b)).or_default().push(r.clone());
    }
    groups.into_values().map(sorted).collect()
}

fn per_pair<F>(records: &[KnowledgeRecord], f: F) -> Result<StageResult, FilterError>
where
    F: Fn(Vec<KnowledgeRecord>) -> Result<StageResult, FilterError> + Sync + Send,
{
    let parts: Vec<StageResult> = by_pair(records).into_par_iter().map(f).collect::<Result<_, _>>()?;
    let mut out = StageResult::default();
    for p in parts {
        out.kept.extend(p.kept);
        out.diagnostics.extend(p.diagnostics);
    }
    out.kept = sorted(out.kept);
    Ok(out)
}

/// Best decode score first, then smaller id.
fn better(a: &KnowledgeRecord, b: &KnowledgeRecord) -> std::cmp::Ordering {
    b.decode_score.total_cmp(&a.decode_score).then(a.record_id.cmp(&b.record_id))
}

/// Clusters each pair's records by `1 - cosine` distance with average
/// linkage and keeps the best-scoring record of every cluster.
pub fn dedup(
    records: &[KnowledgeRecord],
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<StageResult, FilterError> {
    if already_applied(records, FilterStage::Deduped) {
        return Ok(StageResult { kept: sorted(records.to_vec()), diagnostics: vec![] });
    }
    per_pair(records, |group| {
        let texts: Vec<String> = group.iter().map(|r| r.text.clone()).collect();
        let vecs = provider.embed(&texts)?;
        if vecs.len() != group.len() {
            return Err(FilterError::Provider(format!("{} vectors for {} texts", vecs.len(), group.len())));
        }
        let dist: Vec<Vec<f64>> = vecs
            .iter()
            .map(|a| vecs.iter().map(|b| (1.0 - embed::cosine(a, b)).max(0.0)).collect())
            .collect();
        let labels = cluster::average_linkage(&dist, threshold);
        let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            clusters.entry(l).or_default().push(i);
        }
        let kept = clusters
            .into_values()
            .map(|members| {
                let cluster_id = group[members[0]].record_id;
                let best = members.iter().map(|&i| &group[i]).min_by(|a, b| better(a, b)).unwrap();
                let mut r = best.clone();
                r.cluster_id = Some(cluster_id);
                r.stage_flags.set(FilterStage::Deduped);
                r
            })
            .collect();
        Ok(StageResult { kept, diagnostics: vec![] })
    })
}

/// Keeps the best record per (aux, adverb, relation) within each pair.
pub fn group_select(records: &[KnowledgeRecord]) -> StageResult {
    if already_applied(records, FilterStage::GroupSelected) {
        return StageResult { kept: sorted(records.to_vec()), diagnostics: vec![] };
    }
    per_pair(records, |group| {
        let mut diagnostics = Vec::new();
        let mut best: BTreeMap<(String, String, String), KnowledgeRecord> = BTreeMap::new();
        for r in group {
            if r.adjective.trim().is_empty() {
                diagnostics.push(format!("record {} has no relation phrase; excluded", r.record_id));
                continue;
            }
            let key = (r.aux.clone(), r.adverb.clone(), r.adjective.clone());
            match best.get(&key) {
                Some(cur) if better(cur, &r).is_le() => {}
                _ => {
                    best.insert(key, r);
                }
            }
        }
        let kept = best
            .into_values()
            .map(|mut r| {
                r.stage_flags.set(FilterStage::GroupSelected);
                r
            })
            .collect();
        Ok(StageResult { kept, diagnostics })
    })
    .expect("group selection cannot fail")
}

/// Whether records `i` and `j` contradict in either direction. A failed
/// comparison counts as neutral.
fn contradicts(
    nli: &dyn NliProvider,
    thresholds: &NliThresholds,
    a: &KnowledgeRecord,
    b: &KnowledgeRecord,
    diagnostics: &mut Vec<String>,
) -> bool {
    [(a, b), (b, a)].into_iter().any(|(p, h)| match nli.classify(&p.text, &h.text) {
        Ok(v) => thresholds.apply(v) == NliLabel::Contradiction,
        Err(e) => {
            log::warn!("NLI failed on records {} -> {}: {e}", p.record_id, h.record_id);
            diagnostics.push(format!("NLI failed on records {} -> {}: {e}", p.record_id, h.record_id));
            false
        }
    })
}

/// Drops records that contradict more than half of the other records of
/// their pair.
pub fn contradiction_filter(
    records: &[KnowledgeRecord],
    nli: &dyn NliProvider,
    thresholds: &NliThresholds,
) -> StageResult {
    if already_applied(records, FilterStage::ContradictionOk) {
        return StageResult { kept: sorted(records.to_vec()), diagnostics: vec![] };
    }
    per_pair(records, |group| {
        let n = group.len();
        let mut diagnostics = Vec::new();
        let mut count = vec![0usize; n];
        for i in 0..n {
            for j in i + 1..n {
                if contradicts(nli, thresholds, &group[i], &group[j], &mut diagnostics) {
                    count[i] += 1;
                    count[j] += 1;
                }
            }
        }
        let kept = group
            .into_iter()
            .zip(count)
            .filter(|&(_, c)| 2 * c < n)
            .map(|(mut r, _)| {
                r.stage_flags.set(FilterStage::ContradictionOk);
                r
            })
            .collect();
        Ok(StageResult { kept, diagnostics })
    })
    .expect("contradiction filtering cannot fail")
}

/// Keeps the `k` best-scoring records of every pair.
pub fn topk_per_pair(records: &[KnowledgeRecord], k: usize) -> StageResult {
    if already_applied(records, FilterStage::Topk) {
        return StageResult { kept: sorted(records.to_vec()), diagnostics: vec![] };
    }
    per_pair(records, |mut group| {
        group.sort_by(better);
        group.truncate(k);
        for r in &mut group {
            r.stage_flags.set(FilterStage::Topk);
        }
        Ok(StageResult { kept: group, diagnostics: vec![] })
    })
    .expect("top-k selection cannot fail")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutcome {
    pub kept: Vec<KnowledgeRecord>,
    /// Lowest kept score.
    pub threshold: Option<f64>,
}

/// Number of records kept for a fraction, rounding up.
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    ((keep_fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Scores every record and keeps the top `ceil(keep_fraction * N)`.
pub fn discriminator_filter(
    records: &[KnowledgeRecord],
    scorer: &dyn KnowledgeScorer,
    keep_fraction: f64,
) -> Result<DiscriminatorOutcome, FilterError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(FilterError::Precondition(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    if already_applied(records, FilterStage::DiscriminatorKept) {
        let threshold = records.iter().filter_map(|r| r.discriminator_score).reduce(f64::min);
        return Ok(DiscriminatorOutcome { kept: sorted(records.to_vec()), threshold });
    }
    let scores: Vec<f64> = records
        .par_iter()
        .map(|r| {
            scorer
                .score(&r.text)
                .map_err(|e| FilterError::Scorer { record_id: r.record_id, message: e.to_string() })
        })
        .collect::<Result<_, _>>()?;
    let mut ranked: Vec<(f64, &KnowledgeRecord)> = scores.into_iter().zip(records).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.record_id.cmp(&b.1.record_id)));
    ranked.truncate(keep_count(keep_fraction, records.len()));
    let threshold = ranked.last().map(|(s, _)| *s);
    let kept = ranked
        .into_iter()
        .map(|(s, r)| {
            let mut r = r.clone();
            r.discriminator_score = Some(s);
            r.stage_flags.set(FilterStage::DiscriminatorKept);
            r
        })
        .collect();
    Ok(DiscriminatorOutcome { kept: sorted(kept), threshold })
}

/// Survivor counts per pair, used by reports.
pub fn pair_counts(records: &[KnowledgeRecord]) -> HashMap<(String, String, String), usize> {
    let mut out = HashMap::new();
    for r in records {
        *out.entry((r.class_id.clone(), r.entity_a.clone(), r.entity_b.clone())).or_default() += 1;
    }
    out
}
