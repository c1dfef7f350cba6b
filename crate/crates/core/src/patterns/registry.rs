//! Directory-backed pattern registry with an append-only audit log.
//!
//! Layout:
//!
//! ```text
//! <dir>/index.json          summary of every pattern
//! <dir>/patterns/<id>.json  one PatternRecord per file
//! <dir>/audit.jsonl         one AuditEntry per verdict, in order
//! ```
//!
//! The audit log is the source of truth for status. Verdicts append and sync
//! the log entry before touching pattern files, and [`Registry::open`]
//! re-derives every status from the log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Category, PatternId, PatternRecord, PatternStatus, AGREEMENT_THRESHOLD};
use crate::error::{Error, Result};
use crate::util::{write_atomic, write_replace};

pub const AUTO_REVIEWER: &str = "auto-curator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

impl Verdict {
    pub fn target_status(self) -> PatternStatus {
        match self {
            Verdict::Accept => PatternStatus::Accepted,
            Verdict::Reject => PatternStatus::Rejected,
        }
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accept" => Ok(Verdict::Accept),
            "reject" => Ok(Verdict::Reject),
            _ => Err(Error::InvalidArgument(format!(
                "verdict must be accept or reject, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    /// 0-based position in the log.
    pub seq: u64,
    pub timestamp_ms: u64,
    pub pattern_id: PatternId,
    pub reviewer: String,
    pub verdict: Verdict,
    pub prior_status: PatternStatus,
    pub new_status: PatternStatus,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub pattern_id: PatternId,
    pub status: PatternStatus,
    pub category: Option<Category>,
    pub description: Option<String>,
    pub agreement: Option<f64>,
    pub frequency: f64,
    pub n_members: usize,
    pub flagged_for_review: bool,
}

impl IndexEntry {
    pub fn of(p: &PatternRecord) -> Self {
        IndexEntry {
            pattern_id: p.pattern_id,
            status: p.status,
            category: p.annotation.as_ref().map(|a| a.category),
            description: p.annotation.as_ref().map(|a| a.description.clone()),
            agreement: p.agreement(),
            frequency: p.gallery.frequency,
            n_members: p.members.len(),
            flagged_for_review: p.flagged_for_review,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    patterns: Vec<IndexEntry>,
}

const INDEX_VERSION: u32 = 1;

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Status of every pattern after applying `log` to an all-pending start.
pub fn replay_statuses(
    ids: impl IntoIterator<Item = PatternId>,
    log: &[AuditEntry],
) -> Result<BTreeMap<PatternId, PatternStatus>> {
    let mut status: BTreeMap<PatternId, PatternStatus> =
        ids.into_iter().map(|id| (id, PatternStatus::Pending)).collect();
    for (i, e) in log.iter().enumerate() {
        if e.seq != i as u64 {
            return Err(Error::Format(format!("audit entry {i} has seq {}", e.seq)));
        }
        let cur = status
            .get_mut(&e.pattern_id)
            .ok_or_else(|| Error::Format(format!("audit entry {i} names unknown pattern {}", e.pattern_id)))?;
        if *cur != e.prior_status || e.new_status != e.verdict.target_status() {
            return Err(Error::Format(format!(
                "audit entry {i} does not chain from the previous state"
            )));
        }
        *cur = e.new_status;
    }
    Ok(status)
}

pub fn read_audit_log(path: &Path) -> Result<Vec<AuditEntry>> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    patterns: BTreeMap<PatternId, PatternRecord>,
    audit_len: u64,
}

impl Registry {
    /// Create a fresh registry. All patterns must be pending and the directory
    /// must not already hold a registry.
    pub fn create(dir: &Path, patterns: Vec<PatternRecord>) -> Result<Self> {
        if dir.join("index.json").exists() {
            return Err(Error::Conflict(format!("{} already holds a registry", dir.display())));
        }
        let mut map = BTreeMap::new();
        for p in patterns {
            if p.status != PatternStatus::Pending {
                return Err(Error::InvalidArgument(format!(
                    "pattern {} is not pending",
                    p.pattern_id
                )));
            }
            if map.insert(p.pattern_id, p).is_some() {
                return Err(Error::InvalidArgument("duplicate pattern_id".into()));
            }
        }
        fs::create_dir_all(dir.join("patterns")).map_err(|e| Error::io(dir, e))?;
        let audit = dir.join("audit.jsonl");
        fs::File::create(&audit).map_err(|e| Error::io(&audit, e))?;
        let reg = Registry {
            dir: dir.to_path_buf(),
            patterns: map,
            audit_len: 0,
        };
        for p in reg.patterns.values() {
            reg.write_pattern(p)?;
        }
        reg.write_index()?;
        Ok(reg)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.json");
        let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: IndexFile = serde_json::from_slice(&bytes)?;
        if index.version != INDEX_VERSION {
            return Err(Error::Format(format!("unsupported registry version {}", index.version)));
        }
        let mut patterns = BTreeMap::new();
        for entry in &index.patterns {
            let path = Self::pattern_path(dir, entry.pattern_id);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let p: PatternRecord = serde_json::from_slice(&bytes)?;
            if p.pattern_id != entry.pattern_id {
                return Err(Error::Format(format!(
                    "{} holds pattern {}",
                    path.display(),
                    p.pattern_id
                )));
            }
            patterns.insert(p.pattern_id, p);
        }
        let log = read_audit_log(&dir.join("audit.jsonl"))?;
        let statuses = replay_statuses(patterns.keys().copied(), &log)?;
        let mut reg = Registry {
            dir: dir.to_path_buf(),
            patterns,
            audit_len: log.len() as u64,
        };
        // a crash between the audit append and the pattern write leaves stale files
        let mut repaired = false;
        for (id, st) in statuses {
            let p = reg.patterns.get_mut(&id).expect("replayed ids come from patterns");
            if p.status != st {
                log::warn!(
                    "pattern {id}: file status {:?} disagrees with audit log {:?}, using the log",
                    p.status,
                    st
                );
                p.status = st;
                repaired = true;
            }
        }
        if repaired {
            for p in reg.patterns.values() {
                reg.write_pattern(p)?;
            }
        }
        if repaired || index.patterns != reg.index() {
            reg.write_index()?;
        }
        Ok(reg)
    }

    fn pattern_path(dir: &Path, id: PatternId) -> PathBuf {
        dir.join("patterns").join(format!("{id}.json"))
    }

    // Pattern files are not synced one by one: statuses are recovered from the
    // synced audit log on open, and everything else can be regenerated.
    fn write_pattern(&self, p: &PatternRecord) -> Result<()> {
        write_replace(
            &Self::pattern_path(&self.dir, p.pattern_id),
            &serde_json::to_vec_pretty(p)?,
        )
    }

    fn write_index(&self) -> Result<()> {
        let index = IndexFile {
            version: INDEX_VERSION,
            patterns: self.patterns.values().map(IndexEntry::of).collect(),
        };
        write_atomic(&self.dir.join("index.json"), &serde_json::to_vec_pretty(&index)?)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn audit_path(&self) -> PathBuf {
        self.dir.join("audit.jsonl")
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn get(&self, id: PatternId) -> Option<&PatternRecord> {
        self.patterns.get(&id)
    }

    /// All patterns in ascending id order.
    pub fn patterns(&self) -> impl Iterator<Item = &PatternRecord> {
        self.patterns.values()
    }

    pub fn accepted(&self) -> Vec<&PatternRecord> {
        self.patterns()
            .filter(|p| p.status == PatternStatus::Accepted)
            .collect()
    }

    pub fn index(&self) -> Vec<IndexEntry> {
        self.patterns.values().map(IndexEntry::of).collect()
    }

    /// Replace a pattern's non-status fields (annotation, threshold, ...).
    /// Status changes must go through [`Registry::record_verdict`].
    pub fn update_pattern(&mut self, p: PatternRecord) -> Result<()> {
        self.update_patterns(vec![p])
    }

    /// [`Registry::update_pattern`] for many patterns with one index write.
    /// Nothing is written unless every pattern passes the checks.
    pub fn update_patterns(&mut self, ps: Vec<PatternRecord>) -> Result<()> {
        for p in &ps {
            let cur = self
                .patterns
                .get(&p.pattern_id)
                .ok_or_else(|| Error::NotFound(format!("pattern {}", p.pattern_id)))?;
            if cur.status != p.status {
                return Err(Error::Conflict(format!(
                    "pattern {}: status changes require a verdict",
                    p.pattern_id
                )));
            }
        }
        for p in ps {
            self.write_pattern(&p)?;
            self.patterns.insert(p.pattern_id, p);
        }
        self.write_index()
    }

    pub fn audit_log(&self) -> Result<Vec<AuditEntry>> {
        read_audit_log(&self.audit_path())
    }

    pub fn record_verdict(
        &mut self,
        id: PatternId,
        verdict: Verdict,
        reviewer: &str,
        note: Option<&str>,
    ) -> Result<AuditEntry> {
        self.record_verdict_at(id, verdict, reviewer, note, now_ms())
    }

    /// As [`Registry::record_verdict`] with an explicit timestamp.
    pub fn record_verdict_at(
        &mut self,
        id: PatternId,
        verdict: Verdict,
        reviewer: &str,
        note: Option<&str>,
        timestamp_ms: u64,
    ) -> Result<AuditEntry> {
        let mut entries = self.record_verdicts_at(&[(id, verdict)], reviewer, note, timestamp_ms)?;
        Ok(entries.remove(0))
    }

    /// Record several verdicts from one reviewer. Every verdict is checked
    /// before anything is written; the audit lines land in one synced append.
    pub fn record_verdicts(
        &mut self,
        verdicts: &[(PatternId, Verdict)],
        reviewer: &str,
        note: Option<&str>,
    ) -> Result<Vec<AuditEntry>> {
        self.record_verdicts_at(verdicts, reviewer, note, now_ms())
    }

    pub fn record_verdicts_at(
        &mut self,
        verdicts: &[(PatternId, Verdict)],
        reviewer: &str,
        note: Option<&str>,
        timestamp_ms: u64,
    ) -> Result<Vec<AuditEntry>> {
        let reviewer = reviewer.trim();
        if reviewer.is_empty() {
            return Err(Error::InvalidArgument("reviewer must be non-empty".into()));
        }
        let mut status: BTreeMap<PatternId, PatternStatus> = BTreeMap::new();
        let mut entries = Vec::with_capacity(verdicts.len());
        for (n, &(id, verdict)) in verdicts.iter().enumerate() {
            let p = self
                .patterns
                .get(&id)
                .ok_or_else(|| Error::NotFound(format!("pattern {id}")))?;
            if verdict == Verdict::Accept {
                match &p.annotation {
                    None => return Err(Error::Conflict(format!("pattern {id} has no annotation"))),
                    Some(a) if !a.agreement.is_some_and(|x| x >= AGREEMENT_THRESHOLD) => {
                        return Err(Error::Conflict(format!(
                            "pattern {id} annotation agreement {:?} is below {AGREEMENT_THRESHOLD}",
                            a.agreement
                        )))
                    }
                    Some(_) => {}
                }
            }
            let prior = status.get(&id).copied().unwrap_or(p.status);
            status.insert(id, verdict.target_status());
            entries.push(AuditEntry {
                seq: self.audit_len + n as u64,
                timestamp_ms,
                pattern_id: id,
                reviewer: reviewer.to_string(),
                verdict,
                prior_status: prior,
                new_status: verdict.target_status(),
                note: note.map(str::to_string),
            });
        }
        if entries.is_empty() {
            return Ok(entries);
        }
        let path = self.audit_path();
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut lines = Vec::new();
        for e in &entries {
            serde_json::to_writer(&mut lines, e)?;
            lines.push(b'\n');
        }
        f.write_all(&lines).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))?;
        self.audit_len += entries.len() as u64;

        for (id, st) in status {
            let p = self.patterns.get_mut(&id).expect("checked above");
            p.status = st;
            let p = p.clone();
            self.write_pattern(&p)?;
        }
        self.write_index()?;
        Ok(entries)
    }
}

/// Functional form of [`Registry::record_verdict`].
pub fn record_curation_verdict(
    registry: &mut Registry,
    pattern_id: PatternId,
    verdict: Verdict,
    reviewer: &str,
    note: Option<&str>,
) -> Result<AuditEntry> {
    registry.record_verdict(pattern_id, verdict, reviewer, note)
}
