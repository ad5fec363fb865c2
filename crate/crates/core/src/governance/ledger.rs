use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{trust, GovernanceConfig, GovernanceError};
use crate::fdka::ReplayCase;
use crate::knowledge::{apply_patch, edit_key, Operator, Patch, ProcessKnowledgeGraph, RollbackOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntryStatus {
    Staged,
    Committed,
    RolledBack,
    QueuedHuman,
    Escalated,
    Denied,
}

impl EntryStatus {
    pub fn is_active(self) -> bool {
        matches!(self, EntryStatus::Staged | EntryStatus::Committed)
    }

    pub fn is_pending_review(self) -> bool {
        matches!(self, EntryStatus::QueuedHuman | EntryStatus::Escalated)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub inputs: String,
    pub context: String,
    pub rationale: String,
    /// Logical clock (ledger sequence number), not wall time.
    pub timestamp: u64,
    pub trace_ref: String,
}

impl Provenance {
    pub fn is_complete(&self) -> bool {
        [
            &self.source,
            &self.inputs,
            &self.context,
            &self.rationale,
            &self.trace_ref,
        ]
        .iter()
        .all(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustCounters {
    pub s: u64,
    pub f: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl TrustCounters {
    pub fn new(cfg: &GovernanceConfig) -> Self {
        Self {
            s: 0,
            f: 0,
            alpha: cfg.trust_alpha,
            beta: cfg.trust_beta,
        }
    }

    pub fn rho(&self) -> f64 {
        trust(self.s as f64, self.f as f64, self.alpha, self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: u64,
    pub edit_key: String,
    pub patch: Patch,
    pub rollback_set: Vec<RollbackOp>,
    pub provenance: Provenance,
    pub trust: TrustCounters,
    pub status: EntryStatus,
    /// Earlier patches staged under this key, oldest first.
    pub history: Vec<Patch>,
    /// Operator as it was before the first patch in `history`.
    pub base_operator: Operator,
    /// Whether the patch is currently applied to the PKG.
    pub applied: bool,
    pub approved: bool,
    pub post_commit_tasks: u64,
    pub staged_at: u64,
    pub committed_at: Option<u64>,
    pub reason: Option<String>,
    pub denial_rationale: Option<String>,
    /// Replay cases captured when the entry was queued for review.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub canary: Vec<ReplayCase>,
}

impl LedgerEntry {
    pub fn rho(&self) -> f64 {
        self.trust.rho()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEvent {
    Staged {
        id: u64,
        key: String,
        patch: Patch,
        provenance: Provenance,
        task: u64,
    },
    Queued {
        id: u64,
        key: String,
        patch: Patch,
        provenance: Provenance,
        reason: String,
        task: u64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        canary: Vec<ReplayCase>,
    },
    Escalated {
        id: u64,
        key: String,
        patch: Patch,
        provenance: Provenance,
        reason: String,
        task: u64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        canary: Vec<ReplayCase>,
    },
    Committed {
        id: u64,
        task: u64,
        pkg_version: u64,
    },
    RolledBack {
        id: u64,
        reason: String,
        task: u64,
        pkg_version: u64,
    },
    Approved {
        id: u64,
    },
    Denied {
        id: u64,
        rationale: String,
    },
    TrustOutcome {
        id: u64,
        success: bool,
    },
    Consolidated {
        id: u64,
        canonical: Option<Patch>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StageOutcome {
    Ok,
    CoverageResolved,
    ReverseOverridden,
    ReverseEscalateHuman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub rho: f64,
    pub s: u64,
    pub f: u64,
    pub tasks: u64,
    pub flag_rollback: bool,
}

/// Append-only event log plus the entry table it folds into. Every mutation
/// goes through `record`, so replaying the log against the same base PKG
/// reproduces the same entries and PKG version.
#[derive(Debug, Clone)]
pub struct Ledger {
    pub cfg: GovernanceConfig,
    entries: BTreeMap<u64, LedgerEntry>,
    events: Vec<LedgerEvent>,
    next_id: u64,
    last_rollback_task: Option<u64>,
    log: Option<PathBuf>,
}

impl Ledger {
    pub fn new(cfg: GovernanceConfig) -> Self {
        Self {
            cfg,
            entries: BTreeMap::new(),
            events: Vec::new(),
            next_id: 0,
            last_rollback_task: None,
            log: None,
        }
    }

    /// Opens (or creates) a JSONL ledger file, replaying its events onto `pkg`.
    pub fn open(
        path: &Path,
        cfg: GovernanceConfig,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<Self, GovernanceError> {
        let mut ledger = Self::new(cfg);
        if path.exists() {
            let f = File::open(path)?;
            f.lock_shared()?;
            for (i, line) in BufReader::new(&f).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let ev: LedgerEvent =
                    serde_json::from_str(&line).map_err(|e| GovernanceError::Corrupt {
                        line: i + 1,
                        msg: e.to_string(),
                    })?;
                ledger.record(ev, pkg)?;
            }
            f.unlock()?;
        }
        ledger.log = Some(path.to_path_buf());
        Ok(ledger)
    }

    pub fn replay(
        events: &[LedgerEvent],
        cfg: GovernanceConfig,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<Self, GovernanceError> {
        let mut ledger = Self::new(cfg);
        for ev in events {
            ledger.record(ev.clone(), pkg)?;
        }
        Ok(ledger)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn entries(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.values()
    }

    pub fn entry(&self, id: u64) -> Option<&LedgerEntry> {
        self.entries.get(&id)
    }

    /// The staged or committed entry for `key`, if any.
    pub fn active(&self, key: &str) -> Option<&LedgerEntry> {
        self.entries
            .values()
            .rev()
            .find(|e| e.edit_key == key && e.status.is_active())
    }

    pub fn committed(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.entries
            .values()
            .filter(|e| e.status == EntryStatus::Committed)
    }

    pub fn review_list(&self) -> Vec<&LedgerEntry> {
        self.entries
            .values()
            .filter(|e| e.status.is_pending_review())
            .collect()
    }

    pub fn since_rollback(&self, task: u64) -> Option<u64> {
        self.last_rollback_task.map(|t| task.saturating_sub(t))
    }

    fn entry_mut(&mut self, id: u64) -> Result<&mut LedgerEntry, GovernanceError> {
        self.entries
            .get_mut(&id)
            .ok_or(GovernanceError::UnknownEntry(id))
    }

    fn append_log(&self, ev: &LedgerEvent) -> Result<(), GovernanceError> {
        let Some(path) = &self.log else { return Ok(()) };
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.lock()?;
        let mut line = serde_json::to_string(ev).expect("event serializes");
        line.push('\n');
        f.write_all(line.as_bytes())?;
        f.flush()?;
        f.unlock()?;
        Ok(())
    }

    /// Applies one event, then appends it to the in-memory and on-disk logs.
    pub fn record(
        &mut self,
        ev: LedgerEvent,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        self.apply(&ev, pkg)?;
        self.append_log(&ev)?;
        self.events.push(ev);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn new_entry(
        &mut self,
        id: u64,
        key: &str,
        patch: &Patch,
        provenance: &Provenance,
        status: EntryStatus,
        task: u64,
        pkg: &ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        if id != self.next_id {
            return Err(GovernanceError::Corrupt {
                line: self.events.len() + 1,
                msg: format!("entry id {id}, expected {}", self.next_id),
            });
        }
        let op = pkg.operator(&patch.scope)?;
        let rollback_set = patch.rollback_set(op)?;
        let (history, base_operator) = if status == EntryStatus::Staged {
            match self.entries.values().rev().find(|e| {
                e.edit_key == key
                    && matches!(
                        e.status,
                        EntryStatus::Staged | EntryStatus::Committed | EntryStatus::RolledBack
                    )
            }) {
                Some(prev) => {
                    let mut h = prev.history.clone();
                    h.push(prev.patch.clone());
                    (h, prev.base_operator.clone())
                }
                None => (Vec::new(), op.clone()),
            }
        } else {
            (Vec::new(), op.clone())
        };
        self.next_id += 1;
        self.entries.insert(
            id,
            LedgerEntry {
                id,
                edit_key: key.to_string(),
                patch: patch.clone(),
                rollback_set,
                provenance: provenance.clone(),
                trust: TrustCounters::new(&self.cfg),
                status,
                history,
                base_operator,
                applied: false,
                approved: false,
                post_commit_tasks: 0,
                staged_at: task,
                committed_at: None,
                reason: None,
                denial_rationale: None,
                canary: Vec::new(),
            },
        );
        Ok(())
    }

    fn apply(
        &mut self,
        ev: &LedgerEvent,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        match ev {
            LedgerEvent::Staged {
                id,
                key,
                patch,
                provenance,
                task,
            } => {
                if let Some(a) = self.active(key) {
                    return Err(GovernanceError::Transition {
                        id: a.id,
                        from: a.status,
                        op: "stage over active entry",
                    });
                }
                self.new_entry(*id, key, patch, provenance, EntryStatus::Staged, *task, pkg)?;
            }
            LedgerEvent::Queued {
                id,
                key,
                patch,
                provenance,
                reason,
                task,
                canary,
            }
            | LedgerEvent::Escalated {
                id,
                key,
                patch,
                provenance,
                reason,
                task,
                canary,
            } => {
                let status = if matches!(ev, LedgerEvent::Queued { .. }) {
                    EntryStatus::QueuedHuman
                } else {
                    EntryStatus::Escalated
                };
                self.new_entry(*id, key, patch, provenance, status, *task, pkg)?;
                let e = self.entry_mut(*id)?;
                e.reason = Some(reason.clone());
                e.canary = canary.clone();
            }
            LedgerEvent::Committed { id, task, .. } => {
                let e = self
                    .entries
                    .get(id)
                    .ok_or(GovernanceError::UnknownEntry(*id))?;
                if e.status != EntryStatus::Staged {
                    return Err(GovernanceError::Transition {
                        id: *id,
                        from: e.status,
                        op: "commit",
                    });
                }
                if !e.provenance.is_complete() {
                    return Err(GovernanceError::Provenance(*id));
                }
                let rollback = if e.applied {
                    None
                } else {
                    Some(pkg.apply(&e.patch)?)
                };
                if rollback.is_none() {
                    pkg.version += 1;
                }
                let e = self.entry_mut(*id)?;
                if let Some(r) = rollback {
                    e.rollback_set = r;
                }
                e.applied = true;
                e.status = EntryStatus::Committed;
                e.committed_at = Some(*task);
                e.post_commit_tasks = 0;
            }
            LedgerEvent::RolledBack {
                id, reason, task, ..
            } => {
                let e = self
                    .entries
                    .get(id)
                    .ok_or(GovernanceError::UnknownEntry(*id))?;
                if !e.status.is_active() {
                    return Err(GovernanceError::Transition {
                        id: *id,
                        from: e.status,
                        op: "rollback",
                    });
                }
                if e.applied {
                    pkg.rollback(&e.patch.scope, &e.rollback_set)?;
                    self.last_rollback_task = Some(*task);
                }
                let e = self.entry_mut(*id)?;
                e.applied = false;
                e.status = EntryStatus::RolledBack;
                e.reason = Some(reason.clone());
            }
            LedgerEvent::Approved { id } => {
                let approve_bonus = self.cfg.approve_bonus;
                let e = self.entry_mut(*id)?;
                if !e.status.is_pending_review() {
                    return Err(GovernanceError::Transition {
                        id: *id,
                        from: e.status,
                        op: "approve",
                    });
                }
                let key = e.edit_key.clone();
                if let Some(a) = self.active(&key) {
                    return Err(GovernanceError::Transition {
                        id: a.id,
                        from: a.status,
                        op: "approve over active entry",
                    });
                }
                let e = self.entry_mut(*id)?;
                e.status = EntryStatus::Staged;
                e.approved = true;
                e.trust.s += approve_bonus;
            }
            LedgerEvent::Denied { id, rationale } => {
                let deny_penalty = self.cfg.deny_penalty;
                let e = self.entry_mut(*id)?;
                if !e.status.is_pending_review() {
                    return Err(GovernanceError::Transition {
                        id: *id,
                        from: e.status,
                        op: "deny",
                    });
                }
                e.status = EntryStatus::Denied;
                e.trust.f += deny_penalty;
                e.denial_rationale = Some(rationale.clone());
            }
            LedgerEvent::TrustOutcome { id, success } => {
                let e = self.entry_mut(*id)?;
                if e.status != EntryStatus::Committed {
                    return Err(GovernanceError::Transition {
                        id: *id,
                        from: e.status,
                        op: "trust update",
                    });
                }
                if *success {
                    e.trust.s += 1;
                } else {
                    e.trust.f += 1;
                }
                e.post_commit_tasks += 1;
            }
            LedgerEvent::Consolidated { id, canonical } => {
                let cfg = self.cfg.clone();
                let e = self
                    .entries
                    .get(id)
                    .ok_or(GovernanceError::UnknownEntry(*id))?;
                match canonical {
                    None => {
                        self.entries.remove(id);
                    }
                    Some(c) => {
                        let rollback_set = c.rollback_set(&e.base_operator)?;
                        let e = self.entry_mut(*id)?;
                        e.patch = c.clone();
                        e.rollback_set = rollback_set;
                        e.history.clear();
                        e.trust = TrustCounters::new(&cfg);
                        e.status = EntryStatus::Staged;
                        e.committed_at = None;
                        e.post_commit_tasks = 0;
                    }
                }
            }
        }
        Ok(())
    }

    fn pre_rollback(
        &mut self,
        id: u64,
        reason: &str,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        let ev = LedgerEvent::RolledBack {
            id,
            reason: reason.to_string(),
            task,
            pkg_version: pkg.version,
        };
        self.record(ev, pkg)
    }

    /// Conflict detection and staging. Reverse conflicts are checked before
    /// coverage so that rename reversals are not treated as coverage.
    pub fn check_and_stage(
        &mut self,
        patch: &Patch,
        provenance: Provenance,
        rho_new: f64,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(StageOutcome, Option<u64>), GovernanceError> {
        let key = edit_key(patch);
        let mut outcome = StageOutcome::Ok;
        if let Some(existing) = self.active(&key).cloned() {
            if existing.patch.negates(patch) {
                if rho_new >= self.cfg.tau_override {
                    self.pre_rollback(existing.id, "reverse override", task, pkg)?;
                    // The rollback may already realize the reversal.
                    if patch.rollback_set(pkg.operator(&patch.scope)?).is_err() {
                        return Ok((StageOutcome::ReverseOverridden, None));
                    }
                    outcome = StageOutcome::ReverseOverridden;
                } else {
                    return Ok((StageOutcome::ReverseEscalateHuman, None));
                }
            } else if existing.patch.target != patch.target {
                self.pre_rollback(existing.id, "coverage conflict", task, pkg)?;
                outcome = StageOutcome::CoverageResolved;
            } else {
                self.pre_rollback(existing.id, "superseded", task, pkg)?;
            }
        }
        let id = self.next_id;
        let ev = LedgerEvent::Staged {
            id,
            key,
            patch: patch.clone(),
            provenance,
            task,
        };
        self.record(ev, pkg)?;
        Ok((outcome, Some(id)))
    }

    /// Records a patch awaiting human review. `escalated` marks guardrail or
    /// reverse-conflict escalations as opposed to gate queueing. `canary` is
    /// replayed before an offline approval commits.
    #[allow(clippy::too_many_arguments)]
    pub fn queue(
        &mut self,
        patch: &Patch,
        provenance: Provenance,
        reason: &str,
        escalated: bool,
        canary: Vec<ReplayCase>,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<u64, GovernanceError> {
        let id = self.next_id;
        let key = edit_key(patch);
        let reason = reason.to_string();
        let ev = if escalated {
            LedgerEvent::Escalated {
                id,
                key,
                patch: patch.clone(),
                provenance,
                reason,
                task,
                canary,
            }
        } else {
            LedgerEvent::Queued {
                id,
                key,
                patch: patch.clone(),
                provenance,
                reason,
                task,
                canary,
            }
        };
        self.record(ev, pkg)?;
        Ok(id)
    }

    /// Moves a staged entry to the review queue after a gate decision.
    pub fn withdraw_to_queue(
        &mut self,
        id: u64,
        reason: &str,
        canary: Vec<ReplayCase>,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<u64, GovernanceError> {
        let e = self
            .entries
            .get(&id)
            .ok_or(GovernanceError::UnknownEntry(id))?
            .clone();
        self.pre_rollback(id, reason, task, pkg)?;
        self.queue(&e.patch, e.provenance, reason, false, canary, task, pkg)
    }

    pub fn commit(
        &mut self,
        id: u64,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<f64, GovernanceError> {
        let ev = LedgerEvent::Committed {
            id,
            task,
            pkg_version: pkg.version + 1,
        };
        self.record(ev, pkg)?;
        Ok(self.entries[&id].rho())
    }

    /// Discards a staged entry (e.g. after a failed canary).
    pub fn discard(
        &mut self,
        id: u64,
        reason: &str,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        self.pre_rollback(id, reason, task, pkg)
    }

    /// Reverts the committed entry for `key`.
    pub fn rollback(
        &mut self,
        key: &str,
        reason: &str,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<(), GovernanceError> {
        let id = match self.active(key) {
            Some(e) if e.status == EntryStatus::Committed => e.id,
            _ => return Err(GovernanceError::NotCommitted(key.to_string())),
        };
        self.pre_rollback(id, reason, task, pkg)
    }

    fn pending(&self, key: &str) -> Result<u64, GovernanceError> {
        self.entries
            .values()
            .rev()
            .find(|e| e.edit_key == key && e.status.is_pending_review())
            .map(|e| e.id)
            .ok_or_else(|| GovernanceError::UnknownKey(key.to_string()))
    }

    /// Approves the latest queued entry for `key`; an active entry under the
    /// same key is rolled back first. Returns the entry id, now STAGED.
    pub fn approve(
        &mut self,
        key: &str,
        task: u64,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<u64, GovernanceError> {
        let id = self.pending(key)?;
        if let Some(a) = self.active(key).map(|a| a.id) {
            self.pre_rollback(a, "superseded by approved review", task, pkg)?;
        }
        self.record(LedgerEvent::Approved { id }, pkg)?;
        Ok(id)
    }

    pub fn deny(
        &mut self,
        key: &str,
        rationale: &str,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<f64, GovernanceError> {
        let id = self.pending(key)?;
        self.record(
            LedgerEvent::Denied {
                id,
                rationale: rationale.to_string(),
            },
            pkg,
        )?;
        Ok(self.entries[&id].rho())
    }

    pub fn trust_update(
        &mut self,
        id: u64,
        success: bool,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<TrustReport, GovernanceError> {
        self.record(LedgerEvent::TrustOutcome { id, success }, pkg)?;
        let e = &self.entries[&id];
        let rho = e.rho();
        Ok(TrustReport {
            rho,
            s: e.trust.s,
            f: e.trust.f,
            tasks: e.post_commit_tasks,
            flag_rollback: rho < self.cfg.rollback_rho
                && e.post_commit_tasks >= self.cfg.rollback_min_tasks,
        })
    }

    /// Squashes a long history into one canonical patch (or removes the
    /// entry when the net effect is nil). Returns false when not needed.
    pub fn consolidate(
        &mut self,
        key: &str,
        pkg: &mut ProcessKnowledgeGraph,
    ) -> Result<bool, GovernanceError> {
        let Some(e) = self.active(key).cloned() else {
            return Err(GovernanceError::UnknownKey(key.to_string()));
        };
        if e.history.len() < self.cfg.k_max_history {
            return Ok(false);
        }
        // Each restage rolled its predecessor back, so the net effect over
        // the whole history is the current patch applied to the base.
        let net = apply_patch(&e.base_operator, &e.patch)?;
        let canonical = (net != e.base_operator).then(|| e.patch.clone());
        self.record(
            LedgerEvent::Consolidated {
                id: e.id,
                canonical,
            },
            pkg,
        )?;
        Ok(true)
    }
}
