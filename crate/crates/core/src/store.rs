//! Knowledge records, JSONL persistence and querying.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::GenerationRecord;
use crate::entity::EntityPair;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Filter stages in cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Deduped,
    GroupSelected,
    ContradictionOk,
    Topk,
    DiscriminatorKept,
}

impl FilterStage {
    pub const ALL: [FilterStage; 5] = [
        FilterStage::Deduped,
        FilterStage::GroupSelected,
        FilterStage::ContradictionOk,
        FilterStage::Topk,
        FilterStage::DiscriminatorKept,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterStage::Deduped => "deduped",
            FilterStage::GroupSelected => "group_selected",
            FilterStage::ContradictionOk => "contradiction_ok",
            FilterStage::Topk => "topk",
            FilterStage::DiscriminatorKept => "discriminator_kept",
        }
    }

    pub fn parse(s: &str) -> Option<FilterStage> {
        FilterStage::ALL.into_iter().find(|st| st.name() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFlags {
    pub deduped: bool,
    pub group_selected: bool,
    pub contradiction_ok: bool,
    pub topk: bool,
    pub discriminator_kept: bool,
}

impl StageFlags {
    pub fn get(&self, stage: FilterStage) -> bool {
        match stage {
            FilterStage::Deduped => self.deduped,
            FilterStage::GroupSelected => self.group_selected,
            FilterStage::ContradictionOk => self.contradiction_ok,
            FilterStage::Topk => self.topk,
            FilterStage::DiscriminatorKept => self.discriminator_kept,
        }
    }

    pub fn set(&mut self, stage: FilterStage) {
        match stage {
            FilterStage::Deduped => self.deduped = true,
            FilterStage::GroupSelected => self.group_selected = true,
            FilterStage::ContradictionOk => self.contradiction_ok = true,
            FilterStage::Topk => self.topk = true,
            FilterStage::DiscriminatorKept => self.discriminator_kept = true,
        }
    }

    /// Every set flag has all earlier flags set too.
    pub fn is_monotone(&self) -> bool {
        let v: Vec<bool> = FilterStage::ALL.iter().map(|&s| self.get(s)).collect();
        v.windows(2).all(|w| w[0] || !w[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnowledgeRecord {
    pub record_id: u64,
    pub class_id: String,
    pub entity_a: String,
    pub entity_b: String,
    pub text: String,
    pub aux: String,
    pub adverb: String,
    /// Relation phrase, e.g. "faster" or "more reliable".
    pub adjective: String,
    pub decode_score: f64,
    pub cluster_id: Option<u64>,
    pub stage_flags: StageFlags,
    pub discriminator_score: Option<f64>,
    pub source_model: String,
}

impl KnowledgeRecord {
    pub fn from_generation(record_id: u64, g: &GenerationRecord, adjective: String, source_model: &str) -> Self {
        KnowledgeRecord {
            record_id,
            class_id: g.pair.class_id.clone(),
            entity_a: g.pair.entity_a.clone(),
            entity_b: g.pair.entity_b.clone(),
            text: g.text.clone(),
            aux: g.aux.clone(),
            adverb: g.adverb.clone(),
            adjective,
            decode_score: g.score,
            cluster_id: None,
            stage_flags: StageFlags::default(),
            discriminator_score: None,
            source_model: source_model.to_string(),
        }
    }

    pub fn pair(&self) -> EntityPair {
        EntityPair {
            class_id: self.class_id.clone(),
            entity_a: self.entity_a.clone(),
            entity_b: self.entity_b.clone(),
        }
    }

    pub fn mentions(&self, entity: &str) -> bool {
        self.entity_a == entity || self.entity_b == entity
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

/// Serializes records one per line into `out`.
pub fn write_records<W: Write>(records: &[KnowledgeRecord], out: &mut W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes any serializable rows as JSONL through a temporary file and a
/// rename, so readers never see a partial file.
pub fn write_jsonl_atomic<T: Serialize>(rows: &[T], path: &Path) -> Result<usize, StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        for row in rows {
            serde_json::to_writer(&mut w, row).map_err(|e| StoreError::Io {
                path: tmp.display().to_string(),
                source: e.into(),
            })?;
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        let file = w.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(rows.len())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| StoreError::Line { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn persist(records: &[KnowledgeRecord], path: &Path) -> Result<usize, StoreError> {
    write_jsonl_atomic(records, path)
}

pub fn load(path: &Path) -> Result<Vec<KnowledgeRecord>, StoreError> {
    read_jsonl(path)
}

/// Conjunctive record filter; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordQuery {
    pub entity: Option<String>,
    pub class_id: Option<String>,
    pub relation: Option<String>,
    pub stage: Option<FilterStage>,
    pub min_discriminator_score: Option<f64>,
}

impl RecordQuery {
    pub fn matches(&self, r: &KnowledgeRecord) -> bool {
        self.entity.as_deref().is_none_or(|e| r.mentions(e))
            && self.class_id.as_deref().is_none_or(|c| r.class_id == c)
            && self.relation.as_deref().is_none_or(|a| r.adjective == a)
            && self.stage.is_none_or(|s| r.stage_flags.get(s))
            && self
                .min_discriminator_score
                .is_none_or(|m| r.discriminator_score.is_some_and(|s| s >= m))
    }
}

/// Matching records ordered by `record_id`.
pub fn query(records: &[KnowledgeRecord], q: &RecordQuery) -> Vec<KnowledgeRecord> {
    let mut out: Vec<KnowledgeRecord> = records.iter().filter(|r| q.matches(r)).cloned().collect();
    out.sort_by_key(|r| r.record_id);
    out
}
