//! Persistent knowledge hub: an append-only NDJSON store of findings.
//!
//! Writers serialize on an advisory lock held on a sidecar file, so several
//! processes may share one store. Readers take lock-free snapshots; a torn
//! final line (a crash mid-append) is ignored on read and cut off by the
//! next writer.

use std::collections::{BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use fs2::FileExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    normalize_link_id, normalize_whitespace, validate_finding, AgentId, AgentType, Finding, SemanticType,
    ValidationReport,
};

pub const DATA_FILE: &str = "pkh.ndjson";
pub const LOCK_FILE: &str = "pkh.lock";
pub const DEFAULT_EXPLORE_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubRecord {
    pub record_id: u64,
    pub finding: Finding,
    pub agent_id: String,
    pub run_id: String,
    #[serde(default)]
    pub enrichment_refs: BTreeSet<u64>,
    /// Set when an enrichment ref points at a record from another file.
    #[serde(default)]
    pub corroborated: bool,
}

impl HubRecord {
    pub fn dedup_key(&self) -> DedupKey {
        dedup_key(&self.finding)
    }
}

/// (normalized location key, semantic type, 64-bit summary hash).
pub type DedupKey = (String, SemanticType, u64);

pub fn dedup_key(f: &Finding) -> DedupKey {
    let loc = f.location.renormalized().unwrap_or_else(|_| f.location.clone());
    let digest = Sha256::digest(normalize_whitespace(&f.summary).as_bytes());
    let mut h = [0u8; 8];
    h.copy_from_slice(&digest[..8]);
    (format!("{}|{}", loc.kind, loc.key()), f.semantic_type, u64::from_be_bytes(h))
}

/// Conjunctive filter; absent criteria match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    /// Matches records sharing at least one of these link ids.
    pub link_ids: BTreeSet<String>,
    pub semantic_type: Option<SemanticType>,
    pub path_prefix: Option<String>,
    /// Every term must occur in the summary (case-insensitive).
    pub text: Vec<String>,
}

impl QuerySpec {
    pub fn is_empty(&self) -> bool {
        self.link_ids.is_empty() && self.semantic_type.is_none() && self.path_prefix.is_none() && self.text.is_empty()
    }

    pub fn matches(&self, r: &HubRecord) -> bool {
        let f = &r.finding;
        if !self.link_ids.is_empty() {
            let want: HashSet<String> = self.link_ids.iter().map(|l| normalize_link_id(l)).collect();
            if !f.link_ids.iter().any(|l| want.contains(l)) {
                return false;
            }
        }
        if self.semantic_type.is_some_and(|t| t != f.semantic_type) {
            return false;
        }
        if let Some(p) = &self.path_prefix {
            if !f.location.path.starts_with(p.trim_start_matches('/')) {
                return false;
            }
        }
        let summary = f.summary.to_lowercase();
        self.text.iter().all(|t| summary.contains(&t.to_lowercase()))
    }
}

#[derive(Debug, Error)]
pub enum HubError {
    #[error("only file agents may store findings (agent {agent_id} is a {agent_type} agent)")]
    ChannelViolation { agent_id: String, agent_type: AgentType },
    #[error("finding rejected: {0}")]
    ValidationFailure(ValidationReport),
    #[error("query needs at least one criterion")]
    EmptyQuery,
    #[error("corrupt record at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("hub io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Outcome of a store: the record id and whether it coalesced into an
/// existing record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreOutcome {
    pub record_id: u64,
    pub merged: bool,
}

#[derive(Debug, Clone)]
pub struct KnowledgeHub {
    dir: PathBuf,
    explore_k: usize,
    durable: bool,
}

struct WriteLock(File);

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = FileExt::unlock(&self.0);
    }
}

impl KnowledgeHub {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, HubError> {
        std::fs::create_dir_all(dir)?;
        let hub = KnowledgeHub {
            dir: dir.to_path_buf(),
            explore_k: DEFAULT_EXPLORE_K,
            durable: true,
        };
        OpenOptions::new().create(true).append(true).open(hub.data_path())?;
        Ok(hub)
    }

    /// Opens the store after deleting any existing records.
    pub fn open_fresh(dir: &Path) -> Result<Self, HubError> {
        let hub = Self::open(dir)?;
        let _lock = hub.lock()?;
        File::create(hub.data_path())?;
        Ok(hub)
    }

    pub fn with_explore_k(mut self, k: usize) -> Self {
        self.explore_k = k.max(1);
        self
    }

    /// Skips fsync after each write. For benchmarks.
    pub fn without_fsync(mut self) -> Self {
        self.durable = false;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn data_path(&self) -> PathBuf {
        self.dir.join(DATA_FILE)
    }

    fn lock(&self) -> Result<WriteLock, HubError> {
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(self.dir.join(LOCK_FILE))?;
        f.lock_exclusive()?;
        Ok(WriteLock(f))
    }

    /// Reads every committed record. A torn last line is skipped.
    pub fn records(&self) -> Result<Vec<HubRecord>, HubError> {
        Ok(self.read_committed()?.0)
    }

    /// Returns the records plus the byte length of the committed prefix.
    fn read_committed(&self) -> Result<(Vec<HubRecord>, u64), HubError> {
        let file = match File::open(self.data_path()) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
            Err(e) => return Err(e.into()),
        };
        let mut reader = BufReader::new(file);
        let mut out = Vec::new();
        let mut committed = 0u64;
        let mut buf = Vec::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            if buf.last() != Some(&b'\n') {
                log::warn!("discarding torn tail record at line {line_no}");
                break;
            }
            let rec: HubRecord = serde_json::from_slice(&buf[..n - 1]).map_err(|e| HubError::Corrupt {
                line: line_no,
                detail: e.to_string(),
            })?;
            if rec.record_id != line_no as u64 {
                return Err(HubError::Corrupt {
                    line: line_no,
                    detail: format!("record_id {} out of sequence", rec.record_id),
                });
            }
            out.push(rec);
            committed += n as u64;
        }
        Ok((out, committed))
    }

    pub fn query(&self, q: &QuerySpec) -> Result<Vec<HubRecord>, HubError> {
        if q.is_empty() {
            return Err(HubError::EmptyQuery);
        }
        Ok(self.records()?.into_iter().filter(|r| q.matches(r)).collect())
    }

    pub fn get(&self, record_id: u64) -> Result<Option<HubRecord>, HubError> {
        Ok(self.records()?.into_iter().find(|r| r.record_id == record_id))
    }

    pub fn explore(&self, draft: &Finding) -> Result<Vec<HubRecord>, HubError> {
        let recs = self.records()?;
        Ok(explore_in(&recs, draft, self.explore_k).into_iter().cloned().collect())
    }

    /// Appends `f`, or merges its evidence into an existing duplicate.
    pub fn store(&self, f: &Finding, agent: &AgentId, agent_type: AgentType, run_id: &str) -> Result<StoreOutcome, HubError> {
        let f = admit(f, agent, agent_type)?;
        let _lock = self.lock()?;
        let (recs, committed) = self.read_committed()?;
        self.store_locked(recs, committed, f, agent, run_id, BTreeSet::new(), false)
    }

    /// explore, then store with the hits recorded as enrichment refs; the
    /// write lock is held throughout so concurrent commits see each other.
    pub fn proactive_commit(
        &self,
        draft: &Finding,
        agent: &AgentId,
        agent_type: AgentType,
        run_id: &str,
    ) -> Result<StoreOutcome, HubError> {
        let f = admit(draft, agent, agent_type)?;
        let _lock = self.lock()?;
        let (recs, committed) = self.read_committed()?;
        let key = dedup_key(&f);
        let hits: Vec<&HubRecord> = explore_in(&recs, &f, self.explore_k)
            .into_iter()
            .filter(|r| r.dedup_key() != key)
            .collect();
        let refs: BTreeSet<u64> = hits.iter().map(|r| r.record_id).collect();
        let corroborated = hits.iter().any(|r| r.finding.location.path != f.location.path);
        self.store_locked(recs, committed, f, agent, run_id, refs, corroborated)
    }

    #[allow(clippy::too_many_arguments)]
    fn store_locked(
        &self,
        mut recs: Vec<HubRecord>,
        committed: u64,
        f: Finding,
        agent: &AgentId,
        run_id: &str,
        refs: BTreeSet<u64>,
        corroborated: bool,
    ) -> Result<StoreOutcome, HubError> {
        let key = dedup_key(&f);
        if let Some(idx) = recs.iter().position(|r| r.dedup_key() == key) {
            let existing = &mut recs[idx];
            let id = existing.record_id;
            let mut seen: HashSet<_> = existing.finding.evidence.iter().map(|e| e.merge_key()).collect();
            let mut changed = false;
            for ev in f.evidence {
                if seen.insert(ev.merge_key()) {
                    existing.finding.evidence.push(ev);
                    changed = true;
                }
            }
            for r in refs.into_iter().filter(|r| *r < id) {
                changed |= existing.enrichment_refs.insert(r);
            }
            if corroborated && !existing.corroborated && !existing.enrichment_refs.is_empty() {
                existing.corroborated = true;
                changed = true;
            }
            if changed {
                self.rewrite(&recs)?;
            }
            return Ok(StoreOutcome { record_id: id, merged: true });
        }
        let rec = HubRecord {
            record_id: recs.len() as u64 + 1,
            finding: f,
            agent_id: agent.to_string(),
            run_id: run_id.to_string(),
            enrichment_refs: refs,
            corroborated,
        };
        let mut line = serde_json::to_vec(&rec).expect("records serialize");
        line.push(b'\n');
        let mut file = OpenOptions::new().create(true).write(true).truncate(false).open(self.data_path())?;
        let len = file.metadata()?.len();
        if len != committed {
            log::warn!("truncating torn tail ({} bytes) before append", len - committed);
            file.set_len(committed)?;
        }
        file.seek(SeekFrom::Start(committed))?;
        file.write_all(&line)?;
        if self.durable {
            file.sync_data()?;
        }
        Ok(StoreOutcome {
            record_id: rec.record_id,
            merged: false,
        })
    }

    fn rewrite(&self, recs: &[HubRecord]) -> Result<(), HubError> {
        let tmp = self.dir.join(format!("{DATA_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            for r in recs {
                let mut line = serde_json::to_vec(r).expect("records serialize");
                line.push(b'\n');
                f.write_all(&line)?;
            }
            if self.durable {
                f.sync_all()?;
            }
        }
        std::fs::rename(&tmp, self.data_path())?;
        Ok(())
    }
}

fn admit(f: &Finding, agent: &AgentId, agent_type: AgentType) -> Result<Finding, HubError> {
    if agent_type != AgentType::File {
        return Err(HubError::ChannelViolation {
            agent_id: agent.to_string(),
            agent_type,
        });
    }
    let f = f.normalized();
    let report = validate_finding(&f);
    if !report.is_empty() {
        return Err(HubError::ValidationFailure(report));
    }
    Ok(f)
}

/// Records sharing a link id with `draft` or sitting in its directory,
/// ranked by link overlap, then same-directory, then recency.
fn explore_in<'a>(recs: &'a [HubRecord], draft: &Finding, k: usize) -> Vec<&'a HubRecord> {
    let draft = draft.normalized();
    let dir = draft.location.containing_dir();
    let mut scored: Vec<(usize, bool, &HubRecord)> = recs
        .iter()
        .filter_map(|r| {
            let overlap = r.finding.link_ids.intersection(&draft.link_ids).count();
            let same_dir = r.finding.location.containing_dir() == dir;
            (overlap > 0 || same_dir).then_some((overlap, same_dir, r))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(b.1.cmp(&a.1))
            .then(b.2.record_id.cmp(&a.2.record_id))
    });
    scored.into_iter().take(k).map(|(_, _, r)| r).collect()
}
