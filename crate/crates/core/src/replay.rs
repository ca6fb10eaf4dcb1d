//! Rebuilds anchor and conflict evolution from a recorded audit log.
//!
//! The checker re-derives state purely from log events and rejects logs whose
//! transitions are impossible (verifying a closed item, overrunning the
//! budget, promoting without a support verdict, and so on).

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::audit_log::{AuditLog, AuditLogEntry, Stage};
use crate::camv::{CamvOutput, ConflictState};
use crate::plan_dag::StepId;
use crate::value::CanonicalValue;
use crate::verifier::VerdictValue;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayedConflict {
    pub state: ConflictState,
    pub candidates: Vec<CanonicalValue>,
    pub verdicts: Vec<(CanonicalValue, VerdictValue)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayState {
    pub anchors: BTreeMap<StepId, CanonicalValue>,
    pub conflicts: BTreeMap<StepId, ReplayedConflict>,
    pub verify_calls: usize,
    pub b_max: Option<usize>,
    pub answer: Option<CanonicalValue>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("entry {seq}: malformed payload: {message}")]
    Malformed { seq: u64, message: String },
    #[error("entry {seq}: {message}")]
    Inconsistent { seq: u64, message: String },
}

fn field<T: DeserializeOwned>(e: &AuditLogEntry, key: &str) -> Result<T, ReplayError> {
    let v = e.payload.get(key).ok_or_else(|| ReplayError::Malformed {
        seq: e.seq,
        message: format!("missing `{key}`"),
    })?;
    serde_json::from_value(v.clone()).map_err(|err| ReplayError::Malformed {
        seq: e.seq,
        message: format!("`{key}`: {err}"),
    })
}

fn inconsistent(e: &AuditLogEntry, message: impl Into<String>) -> ReplayError {
    ReplayError::Inconsistent {
        seq: e.seq,
        message: message.into(),
    }
}

#[derive(serde::Deserialize)]
struct LoggedCandidate {
    value: CanonicalValue,
}

pub fn replay(log: &AuditLog) -> Result<ReplayState, ReplayError> {
    let mut st = ReplayState::default();
    for e in log.entries() {
        match (e.stage, e.event.as_str()) {
            (Stage::Anchor, "anchor") => {
                let step: StepId = field(e, "step")?;
                let value: CanonicalValue = field(e, "value")?;
                if st.anchors.insert(step.clone(), value).is_some() {
                    return Err(inconsistent(e, format!("step `{step}` anchored twice")));
                }
            }
            (Stage::Audit, "conflict_open") => {
                let step: StepId = field(e, "step")?;
                if st.anchors.contains_key(&step) {
                    return Err(inconsistent(e, format!("anchored step `{step}` opened as conflict")));
                }
                let cands: Vec<LoggedCandidate> = field(e, "candidates")?;
                if cands.len() < 2 {
                    return Err(inconsistent(e, format!("conflict at `{step}` has < 2 candidates")));
                }
                st.conflicts.insert(
                    step,
                    ReplayedConflict {
                        state: ConflictState::Open,
                        candidates: cands.into_iter().map(|c| c.value).collect(),
                        verdicts: Vec::new(),
                    },
                );
            }
            (Stage::Audit, "rank") => {
                st.b_max = Some(field(e, "b_max")?);
            }
            (Stage::Audit, "verify") => {
                let step: StepId = field(e, "step")?;
                let value: CanonicalValue = field(e, "value")?;
                let verdict: VerdictValue = field(e, "verdict")?;
                let b: usize = field(e, "b")?;
                st.verify_calls += 1;
                if b != st.verify_calls {
                    return Err(inconsistent(e, format!("budget counter {b}, expected {}", st.verify_calls)));
                }
                if st.b_max.is_some_and(|m| b > m) {
                    return Err(inconsistent(e, "budget exceeded"));
                }
                let item = st
                    .conflicts
                    .get_mut(&step)
                    .ok_or_else(|| inconsistent(e, format!("verify on non-conflict `{step}`")))?;
                if item.state != ConflictState::Open {
                    return Err(inconsistent(e, format!("verify on closed item `{step}`")));
                }
                if !item.candidates.iter().any(|c| c.canonical_eq(&value)) {
                    return Err(inconsistent(e, format!("value not a candidate at `{step}`")));
                }
                item.verdicts.push((value, verdict));
            }
            (Stage::Audit, "promote") => {
                let step: StepId = field(e, "step")?;
                let value: CanonicalValue = field(e, "value")?;
                let supported = st.conflicts.get(&step).and_then(|c| c.verdicts.last()).is_some_and(
                    |(v, verdict)| *verdict == VerdictValue::Support && v.canonical_eq(&value),
                );
                if !supported {
                    return Err(inconsistent(e, format!("promotion at `{step}` without support")));
                }
                st.anchors.insert(step, value);
            }
            (Stage::Audit, "state") => {
                let step: StepId = field(e, "step")?;
                let from: ConflictState = field(e, "from")?;
                let to: ConflictState = field(e, "to")?;
                let item = st
                    .conflicts
                    .get_mut(&step)
                    .ok_or_else(|| inconsistent(e, format!("state change on non-conflict `{step}`")))?;
                if item.state != from {
                    return Err(inconsistent(e, format!("`{step}` is {:?}, not {from:?}", item.state)));
                }
                let has = |v: VerdictValue| item.verdicts.iter().any(|(_, x)| *x == v);
                let expected = if has(VerdictValue::Support) {
                    ConflictState::Supported
                } else if item.verdicts.len() < item.candidates.len() {
                    return Err(inconsistent(e, format!("`{step}` closed before all candidates were tried")));
                } else if has(VerdictValue::Refute) {
                    ConflictState::Refuted
                } else {
                    ConflictState::Inconclusive
                };
                if to != expected {
                    return Err(inconsistent(e, format!("`{step}` moved to {to:?}, verdicts imply {expected:?}")));
                }
                item.state = to;
            }
            (Stage::Synthesize, "answer") => {
                st.answer = Some(field(e, "answer")?);
            }
            _ => {}
        }
    }
    Ok(st)
}

impl ReplayState {
    /// Compares the replayed evolution with a run's final state.
    pub fn check_against(&self, out: &CamvOutput) -> Result<(), String> {
        let anchors: BTreeMap<StepId, CanonicalValue> = out
            .anchors
            .iter()
            .map(|(s, v)| (s.clone(), v.clone()))
            .collect();
        if anchors != self.anchors {
            return Err("anchor sets differ".into());
        }
        if out.conflicts.len() != self.conflicts.len() {
            return Err("conflict sets differ in size".into());
        }
        for (step, item) in out.conflicts.iter() {
            let r = self
                .conflicts
                .get(step)
                .ok_or_else(|| format!("conflict `{step}` missing from replay"))?;
            if r.state != item.state {
                return Err(format!("conflict `{step}` state differs"));
            }
            for c in &item.candidates {
                let replayed = r
                    .verdicts
                    .iter()
                    .find(|(v, _)| v.canonical_eq(&c.value))
                    .map(|(_, x)| *x);
                if replayed != c.verdict {
                    return Err(format!("verdict at `{step}` differs"));
                }
            }
        }
        if self.verify_calls != out.verify_calls {
            return Err("verify-call counts differ".into());
        }
        if self.answer.as_ref() != Some(&out.answer) {
            return Err("answers differ".into());
        }
        Ok(())
    }
}
