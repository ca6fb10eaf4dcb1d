//! Provenance-aware facts store.
//!
//! Knowledge moves through three tiers: raw [`ToolRecord`]s, credibility
//! annotated [`Note`]s summarizing them, and [`Fact`]s promoted from notes.
//! Every mutation appends a kind-tagged record to the store's journal, which
//! is also its line-delimited on-disk form. Status changes re-emit the fact
//! with a higher version; the latest record for an id wins on replay.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{group_values, CanonicalValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub url: String,
    /// Caller-supplied logical timestamp.
    pub retrieved_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub id: String,
    pub tool_name: String,
    #[serde(default)]
    pub params: BTreeMap<String, CanonicalValue>,
    pub outcome: CanonicalValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_meta: Option<SourceMeta>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credibility {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub summary: String,
    pub credibility: Credibility,
    pub derived_from: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactCategory {
    Given,
    Retrieved,
    Derived,
    Assumption,
}

impl FactCategory {
    pub fn needs_provenance(self) -> bool {
        matches!(self, FactCategory::Retrieved | FactCategory::Derived)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactStatus {
    Unverified,
    Verified,
    Refuted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyVerdict {
    Consistent,
    Conflict,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: String,
    pub category: FactCategory,
    pub key: String,
    pub value: CanonicalValue,
    pub status: FactStatus,
    #[serde(default)]
    pub derived_from: Vec<String>,
    pub version: u64,
    /// Consistency verdict seen when the fact was promoted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ConsistencyVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    verdict: ConsistencyVerdict,
    conflicting_fact_ids: Vec<String>,
}

impl ConsistencyReport {
    pub fn consistent() -> Self {
        ConsistencyReport {
            verdict: ConsistencyVerdict::Consistent,
            conflicting_fact_ids: Vec::new(),
        }
    }

    pub fn unknown() -> Self {
        ConsistencyReport {
            verdict: ConsistencyVerdict::Unknown,
            conflicting_fact_ids: Vec::new(),
        }
    }

    /// Panics if `ids` is empty; a conflict always names its facts.
    pub fn conflict(ids: Vec<String>) -> Self {
        assert!(!ids.is_empty(), "conflict report needs at least one fact id");
        ConsistencyReport {
            verdict: ConsistencyVerdict::Conflict,
            conflicting_fact_ids: ids,
        }
    }

    pub fn verdict(&self) -> ConsistencyVerdict {
        self.verdict
    }

    pub fn conflicting_fact_ids(&self) -> &[String] {
        &self.conflicting_fact_ids
    }
}

/// One line of the store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StoreRecord {
    Tool(ToolRecord),
    Note(Note),
    Fact(Fact),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "tier", content = "id", rename_all = "snake_case")]
pub enum ProvenanceLink {
    Fact(String),
    Note(String),
    Tool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactsError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("broken provenance chain: `{from}` references missing `{missing}`")]
    BrokenChain { from: String, missing: String },
    #[error("category {0:?} not allowed here")]
    InvalidCategory(FactCategory),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fact `{0}` cannot be verified: its promotion was not consistent or rests on a low-credibility note")]
    PromotionDenied(String),
}

/// Output of a summarizer: the note body and its credibility.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteDraft {
    pub summary: String,
    pub credibility: Credibility,
}

pub trait Summarizer {
    fn summarize(&self, tools: &[&ToolRecord]) -> NoteDraft;
}

impl<F> Summarizer for F
where
    F: Fn(&[&ToolRecord]) -> NoteDraft,
{
    fn summarize(&self, tools: &[&ToolRecord]) -> NoteDraft {
        self(tools)
    }
}

/// Renders outcomes verbatim (joined by `"; "`) and grades credibility:
/// high when all outcomes agree, low when two outcomes of the same kind
/// disagree, medium when outcomes are of incomparable kinds.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultSummarizer;

pub fn credibility_policy(outcomes: &[&CanonicalValue]) -> Credibility {
    let mut incomparable = false;
    for (i, a) in outcomes.iter().enumerate() {
        for b in &outcomes[i + 1..] {
            if a.kind() != b.kind() {
                incomparable = true;
            } else if !a.canonical_eq(b) {
                return Credibility::Low;
            }
        }
    }
    if incomparable {
        Credibility::Medium
    } else {
        Credibility::High
    }
}

impl Summarizer for DefaultSummarizer {
    fn summarize(&self, tools: &[&ToolRecord]) -> NoteDraft {
        let summary = tools
            .iter()
            .map(|t| t.outcome.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        let outcomes: Vec<&CanonicalValue> = tools.iter().map(|t| &t.outcome).collect();
        NoteDraft {
            summary,
            credibility: credibility_policy(&outcomes),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactsStore {
    version: u64,
    tools: BTreeMap<String, ToolRecord>,
    notes: BTreeMap<String, Note>,
    facts: BTreeMap<String, Fact>,
    journal: Vec<StoreRecord>,
    next_note: u64,
    next_fact: u64,
}

impl FactsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn tool(&self, id: &str) -> Option<&ToolRecord> {
        self.tools.get(id)
    }

    pub fn note(&self, id: &str) -> Option<&Note> {
        self.notes.get(id)
    }

    pub fn fact(&self, id: &str) -> Option<&Fact> {
        self.facts.get(id)
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolRecord> {
        self.tools.values()
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.notes.values()
    }

    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.values()
    }

    pub fn journal(&self) -> &[StoreRecord] {
        &self.journal
    }

    /// Verified facts under `key`, in id order.
    pub fn verified_for<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a Fact> + 'a {
        self.facts
            .values()
            .filter(move |f| f.status == FactStatus::Verified && f.key == key)
    }

    fn bump(&mut self) -> u64 {
        self.version += 1;
        self.version
    }

    pub fn record_tool(&mut self, record: ToolRecord) -> Result<String, FactsError> {
        if self.tools.contains_key(&record.id) {
            return Err(FactsError::DuplicateId(record.id));
        }
        self.bump();
        let id = record.id.clone();
        self.journal.push(StoreRecord::Tool(record.clone()));
        self.tools.insert(id.clone(), record);
        Ok(id)
    }

    pub fn summarize_to_note(
        &mut self,
        tool_ids: &[String],
        summarizer: &dyn Summarizer,
    ) -> Result<Note, FactsError> {
        if tool_ids.is_empty() {
            return Err(FactsError::UnknownId("<empty provenance>".into()));
        }
        let tools = tool_ids
            .iter()
            .map(|id| self.tools.get(id).ok_or_else(|| FactsError::UnknownId(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let draft = summarizer.summarize(&tools);
        self.next_note += 1;
        let note = Note {
            id: format!("n{:06}", self.next_note),
            summary: draft.summary,
            credibility: draft.credibility,
            derived_from: tool_ids.to_vec(),
        };
        self.insert_note(note.clone())?;
        Ok(note)
    }

    fn insert_note(&mut self, note: Note) -> Result<(), FactsError> {
        if self.notes.contains_key(&note.id) {
            return Err(FactsError::DuplicateId(note.id));
        }
        if note.derived_from.is_empty() {
            return Err(FactsError::UnknownId("<empty provenance>".into()));
        }
        for t in &note.derived_from {
            if !self.tools.contains_key(t) {
                return Err(FactsError::UnknownId(t.clone()));
            }
        }
        self.bump();
        self.journal.push(StoreRecord::Note(note.clone()));
        self.notes.insert(note.id.clone(), note);
        Ok(())
    }

    fn fresh_fact_id(&mut self) -> String {
        loop {
            self.next_fact += 1;
            let id = format!("f{:06}", self.next_fact);
            if !self.facts.contains_key(&id) {
                return id;
            }
        }
    }

    /// Promotes a note's statement to the facts tier.
    ///
    /// The fact is verified only when `validation` is consistent and the note
    /// is not low-credibility; otherwise it is kept unverified for audit.
    pub fn promote_fact(
        &mut self,
        note_id: &str,
        category: FactCategory,
        key: impl Into<String>,
        value: CanonicalValue,
        validation: &ConsistencyReport,
    ) -> Result<Fact, FactsError> {
        if !category.needs_provenance() {
            return Err(FactsError::InvalidCategory(category));
        }
        let note = self
            .notes
            .get(note_id)
            .ok_or_else(|| FactsError::UnknownId(note_id.to_string()))?;
        let status = if validation.verdict() == ConsistencyVerdict::Consistent
            && note.credibility != Credibility::Low
        {
            FactStatus::Verified
        } else {
            FactStatus::Unverified
        };
        let id = self.fresh_fact_id();
        let version = self.bump();
        let fact = Fact {
            id,
            category,
            key: key.into(),
            value,
            status,
            derived_from: vec![note_id.to_string()],
            version,
            validation: Some(validation.verdict()),
        };
        self.journal.push(StoreRecord::Fact(fact.clone()));
        self.facts.insert(fact.id.clone(), fact.clone());
        Ok(fact)
    }

    /// Adds a given (verified) or assumption (unverified) fact without provenance.
    pub fn assert_fact(
        &mut self,
        category: FactCategory,
        key: impl Into<String>,
        value: CanonicalValue,
    ) -> Result<Fact, FactsError> {
        let status = match category {
            FactCategory::Given => FactStatus::Verified,
            FactCategory::Assumption => FactStatus::Unverified,
            other => return Err(FactsError::InvalidCategory(other)),
        };
        let id = self.fresh_fact_id();
        let version = self.bump();
        let fact = Fact {
            id,
            category,
            key: key.into(),
            value,
            status,
            derived_from: Vec::new(),
            version,
            validation: None,
        };
        self.journal.push(StoreRecord::Fact(fact.clone()));
        self.facts.insert(fact.id.clone(), fact.clone());
        Ok(fact)
    }

    /// Changes a fact's status, re-emitting it with a new version.
    ///
    /// Marking a retrieved/derived fact verified goes through the same gate as
    /// promotion: a consistent validation and no low-credibility note.
    pub fn set_status(&mut self, fact_id: &str, status: FactStatus) -> Result<(), FactsError> {
        let Some(fact) = self.facts.get(fact_id) else {
            return Err(FactsError::UnknownId(fact_id.to_string()));
        };
        if status == FactStatus::Verified && fact.category.needs_provenance() {
            let low = fact
                .derived_from
                .iter()
                .any(|n| self.notes.get(n).is_none_or(|n| n.credibility == Credibility::Low));
            if fact.validation != Some(ConsistencyVerdict::Consistent) || low {
                return Err(FactsError::PromotionDenied(fact_id.to_string()));
            }
        }
        let version = self.bump();
        let fact = self.facts.get_mut(fact_id).expect("checked above");
        fact.status = status;
        fact.version = version;
        let snapshot = fact.clone();
        self.journal.push(StoreRecord::Fact(snapshot));
        Ok(())
    }

    /// Compares a candidate statement with the verified facts under its key.
    pub fn check_consistency(&self, key: &str, value: &CanonicalValue) -> ConsistencyReport {
        let mut any = false;
        let mut conflicting = Vec::new();
        for fact in self.verified_for(key) {
            any = true;
            if !fact.value.canonical_eq(value) {
                conflicting.push(fact.id.clone());
            }
        }
        if !conflicting.is_empty() {
            ConsistencyReport::conflict(conflicting)
        } else if any {
            ConsistencyReport::consistent()
        } else {
            ConsistencyReport::unknown()
        }
    }

    /// Fact, then its notes, then their tool records (deduplicated, in order).
    pub fn provenance_chain(&self, fact_id: &str) -> Result<Vec<ProvenanceLink>, FactsError> {
        let fact = self
            .facts
            .get(fact_id)
            .ok_or_else(|| FactsError::UnknownId(fact_id.to_string()))?;
        let mut chain = vec![ProvenanceLink::Fact(fact.id.clone())];
        let mut tool_ids: Vec<&String> = Vec::new();
        for note_id in &fact.derived_from {
            let note = self.notes.get(note_id).ok_or_else(|| FactsError::BrokenChain {
                from: fact.id.clone(),
                missing: note_id.clone(),
            })?;
            chain.push(ProvenanceLink::Note(note.id.clone()));
            for t in &note.derived_from {
                if !self.tools.contains_key(t) {
                    return Err(FactsError::BrokenChain {
                        from: note.id.clone(),
                        missing: t.clone(),
                    });
                }
                if !tool_ids.contains(&t) {
                    tool_ids.push(t);
                }
            }
        }
        chain.extend(tool_ids.into_iter().map(|t| ProvenanceLink::Tool(t.clone())));
        Ok(chain)
    }

    /// Replays journal records into a fresh store, validating references.
    pub fn from_records(records: impl IntoIterator<Item = StoreRecord>) -> Result<Self, FactsError> {
        let mut store = FactsStore::new();
        for record in records {
            store.apply(record)?;
        }
        Ok(store)
    }

    fn apply(&mut self, record: StoreRecord) -> Result<(), FactsError> {
        match record {
            StoreRecord::Tool(t) => {
                self.record_tool(t)?;
            }
            StoreRecord::Note(n) => {
                if let Some(seq) = n.id.strip_prefix('n').and_then(|s| s.parse::<u64>().ok()) {
                    self.next_note = self.next_note.max(seq);
                }
                self.insert_note(n)?;
            }
            StoreRecord::Fact(f) => {
                if f.category.needs_provenance() && f.derived_from.is_empty() {
                    return Err(FactsError::BrokenChain {
                        from: f.id.clone(),
                        missing: "<no notes>".into(),
                    });
                }
                for n in &f.derived_from {
                    if !self.notes.contains_key(n) {
                        return Err(FactsError::UnknownId(n.clone()));
                    }
                }
                if let Some(seq) = f.id.strip_prefix('f').and_then(|s| s.parse::<u64>().ok()) {
                    self.next_fact = self.next_fact.max(seq);
                }
                self.version = self.version.max(f.version).max(self.version + 1);
                self.journal.push(StoreRecord::Fact(f.clone()));
                self.facts.insert(f.id.clone(), f);
            }
        }
        Ok(())
    }

    /// One JSON record per line, in journal order.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for record in &self.journal {
            out.push_str(&serde_json::to_string(record).expect("store records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self, FactsError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| FactsError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Self::from_records(records)
    }
}

/// A verified fact that never should have been promoted.
#[derive(Debug, Clone, PartialEq)]
pub struct PromotionViolation {
    pub fact_id: String,
    pub reason: String,
}

/// Walks a journal and flags verified retrieved/derived facts whose
/// promotion lacked a consistent report or rested on a low-credibility note.
pub fn replay_promotions(records: &[StoreRecord]) -> Vec<PromotionViolation> {
    let mut notes: BTreeMap<&str, &Note> = BTreeMap::new();
    let mut violations = Vec::new();
    for record in records {
        match record {
            StoreRecord::Note(n) => {
                notes.insert(n.id.as_str(), n);
            }
            StoreRecord::Fact(f)
                if f.status == FactStatus::Verified && f.category.needs_provenance() =>
            {
                if f.validation != Some(ConsistencyVerdict::Consistent) {
                    violations.push(PromotionViolation {
                        fact_id: f.id.clone(),
                        reason: format!("validation was {:?}", f.validation),
                    });
                }
                for n in &f.derived_from {
                    match notes.get(n.as_str()) {
                        Some(note) if note.credibility == Credibility::Low => {
                            violations.push(PromotionViolation {
                                fact_id: f.id.clone(),
                                reason: format!("note {n} has low credibility"),
                            })
                        }
                        Some(_) => {}
                        None => violations.push(PromotionViolation {
                            fact_id: f.id.clone(),
                            reason: format!("note {n} not yet recorded"),
                        }),
                    }
                }
            }
            _ => {}
        }
    }
    violations
}

/// Key with the divergent verified values found while merging.
pub type MergeConflict = (String, Vec<CanonicalValue>);

/// Merges store snapshots.
///
/// Records are unioned by id (highest version wins for facts). Verified
/// facts that repeat the same `(key, value)` collapse onto the smallest id.
/// Keys whose verified facts disagree are reported and every verified fact
/// under them is downgraded to unverified. The result is independent of the
/// order of `stores`.
pub fn synchronize(stores: &[FactsStore]) -> (FactsStore, Vec<MergeConflict>) {
    let mut tools: BTreeMap<String, ToolRecord> = BTreeMap::new();
    let mut notes: BTreeMap<String, Note> = BTreeMap::new();
    let mut facts: BTreeMap<String, Fact> = BTreeMap::new();
    let mut max_version = 0;

    fn pick<T: Serialize + Clone>(slot: &mut T, candidate: &T, newer: bool) {
        let cur = serde_json::to_string(slot).unwrap_or_default();
        let new = serde_json::to_string(candidate).unwrap_or_default();
        if newer || new > cur {
            *slot = candidate.clone();
        }
    }

    for store in stores {
        max_version = max_version.max(store.version);
        for t in store.tools.values() {
            match tools.get_mut(&t.id) {
                Some(slot) => pick(slot, t, false),
                None => {
                    tools.insert(t.id.clone(), t.clone());
                }
            }
        }
        for n in store.notes.values() {
            match notes.get_mut(&n.id) {
                Some(slot) => pick(slot, n, false),
                None => {
                    notes.insert(n.id.clone(), n.clone());
                }
            }
        }
        for f in store.facts.values() {
            match facts.get_mut(&f.id) {
                Some(slot) if slot.version == f.version => pick(slot, f, false),
                Some(slot) => {
                    let newer = f.version > slot.version;
                    if newer {
                        *slot = f.clone();
                    }
                }
                None => {
                    facts.insert(f.id.clone(), f.clone());
                }
            }
        }
    }

    // Collapse verified duplicates, then detect per-key divergence.
    let mut by_key: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for f in facts.values().filter(|f| f.status == FactStatus::Verified) {
        by_key.entry(f.key.clone()).or_default().push(f.id.clone());
    }
    let mut conflicts = Vec::new();
    let mut downgrade = BTreeSet::new();
    for (key, ids) in &by_key {
        let values: Vec<&CanonicalValue> = ids.iter().map(|id| &facts[id].value).collect();
        let groups = group_values(values.iter().copied());
        for (_, members) in &groups {
            for &dup in &members[1..] {
                facts.remove(&ids[dup]);
            }
        }
        if groups.len() > 1 {
            conflicts.push((key.clone(), groups.iter().map(|(v, _)| v.clone()).collect()));
            for (_, members) in &groups {
                downgrade.insert(ids[members[0]].clone());
            }
        }
    }

    let version = max_version + 1;
    let mut merged = FactsStore::new();
    for t in tools.into_values() {
        merged.journal.push(StoreRecord::Tool(t.clone()));
        merged.tools.insert(t.id.clone(), t);
    }
    for n in notes.into_values() {
        merged.journal.push(StoreRecord::Note(n.clone()));
        merged.notes.insert(n.id.clone(), n);
    }
    for mut f in facts.into_values() {
        if downgrade.contains(&f.id) {
            f.status = FactStatus::Unverified;
            f.version = version;
        }
        merged.journal.push(StoreRecord::Fact(f.clone()));
        merged.facts.insert(f.id.clone(), f);
    }
    merged.next_note = stores.iter().map(|s| s.next_note).max().unwrap_or(0);
    merged.next_fact = stores.iter().map(|s| s.next_fact).max().unwrap_or(0);
    merged.version = version;
    (merged, conflicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tool(id: &str, outcome: impl Into<CanonicalValue>) -> ToolRecord {
        ToolRecord {
            id: id.into(),
            tool_name: "search".into(),
            params: BTreeMap::from([("q".to_string(), CanonicalValue::text(id))]),
            outcome: outcome.into(),
            source_meta: None,
        }
    }

    fn verified(store: &mut FactsStore, tool_id: &str, key: &str, v: f64) -> Fact {
        store.record_tool(tool(tool_id, v)).unwrap();
        let note = store
            .summarize_to_note(&[tool_id.to_string()], &DefaultSummarizer)
            .unwrap();
        store
            .promote_fact(
                &note.id,
                FactCategory::Retrieved,
                key,
                v.into(),
                &ConsistencyReport::consistent(),
            )
            .unwrap()
    }

    #[test]
    fn tool_round_trip_with_metadata() {
        let mut store = FactsStore::new();
        let mut rec = tool("t1", 42i64);
        rec.source_meta = Some(SourceMeta {
            url: "https://example.org/a".into(),
            retrieved_at: 7,
        });
        let id = store.record_tool(rec.clone()).unwrap();
        assert_eq!(store.tool(&id), Some(&rec));
        assert_eq!(store.version(), 1);
    }

    #[test]
    fn duplicate_tool_rejected() {
        let mut store = FactsStore::new();
        store.record_tool(tool("t1", 1i64)).unwrap();
        assert_eq!(
            store.record_tool(tool("t1", 2i64)),
            Err(FactsError::DuplicateId("t1".into()))
        );
    }

    #[test]
    fn hundred_records_indexed() {
        let mut store = FactsStore::new();
        for i in 0..100 {
            store.record_tool(tool(&format!("t{i}"), i as i64)).unwrap();
        }
        assert_eq!(store.tools().count(), 100);
        assert_eq!(store.version(), 100);
    }

    #[test]
    fn identity_summary_renders_outcome() {
        let mut store = FactsStore::new();
        store.record_tool(tool("t1", 42i64)).unwrap();
        let note = store.summarize_to_note(&["t1".into()], &DefaultSummarizer).unwrap();
        assert_eq!(note.summary, "42");
        assert_eq!(note.credibility, Credibility::High);
        assert_eq!(note.derived_from, vec!["t1".to_string()]);
    }

    #[test]
    fn empty_or_unknown_provenance_rejected() {
        let mut store = FactsStore::new();
        assert!(matches!(
            store.summarize_to_note(&[], &DefaultSummarizer),
            Err(FactsError::UnknownId(_))
        ));
        assert_eq!(
            store.summarize_to_note(&["nope".into()], &DefaultSummarizer),
            Err(FactsError::UnknownId("nope".into()))
        );
    }

    #[test]
    fn conflicting_outcomes_force_low_credibility() {
        let mut store = FactsStore::new();
        store.record_tool(tool("t1", 42i64)).unwrap();
        store.record_tool(tool("t2", 17i64)).unwrap();
        let note = store
            .summarize_to_note(&["t1".into(), "t2".into()], &DefaultSummarizer)
            .unwrap();
        assert_eq!(note.credibility, Credibility::Low);
    }

    #[test]
    fn credibility_policy_table() {
        let n42 = CanonicalValue::number(42.0);
        let n17 = CanonicalValue::number(17.0);
        let txt = CanonicalValue::text("forty-two");
        assert_eq!(credibility_policy(&[&n42]), Credibility::High);
        assert_eq!(credibility_policy(&[&n42, &n42]), Credibility::High);
        assert_eq!(credibility_policy(&[&n42, &txt]), Credibility::Medium);
        assert_eq!(credibility_policy(&[&n42, &txt, &n17]), Credibility::Low);
    }

    #[test]
    fn closure_summarizer_is_stored_verbatim() {
        let mut store = FactsStore::new();
        store.record_tool(tool("t1", 1i64)).unwrap();
        let custom = |_: &[&ToolRecord]| NoteDraft {
            summary: "looks fine".into(),
            credibility: Credibility::Medium,
        };
        let note = store.summarize_to_note(&["t1".into()], &custom).unwrap();
        assert_eq!(note.summary, "looks fine");
        assert_eq!(note.credibility, Credibility::Medium);
    }

    #[test]
    fn promotion_rule_table_is_exhaustive() {
        let creds = [Credibility::High, Credibility::Medium, Credibility::Low];
        let reports = [
            ConsistencyReport::consistent(),
            ConsistencyReport::conflict(vec!["fX".into()]),
            ConsistencyReport::unknown(),
        ];
        for cred in creds {
            for report in &reports {
                let mut store = FactsStore::new();
                store.record_tool(tool("t1", 1i64)).unwrap();
                let draft = move |_: &[&ToolRecord]| NoteDraft {
                    summary: String::new(),
                    credibility: cred,
                };
                let note = store.summarize_to_note(&["t1".into()], &draft).unwrap();
                let fact = store
                    .promote_fact(&note.id, FactCategory::Derived, "k", 1i64.into(), report)
                    .unwrap();
                let expect_verified = cred != Credibility::Low
                    && report.verdict() == ConsistencyVerdict::Consistent;
                assert_eq!(
                    fact.status == FactStatus::Verified,
                    expect_verified,
                    "{cred:?} {:?}",
                    report.verdict()
                );
                assert!(store.fact(&fact.id).is_some(), "fact retained for audit");

                // re-verifying later goes through the same gate
                store.set_status(&fact.id, FactStatus::Unverified).unwrap();
                let again = store.set_status(&fact.id, FactStatus::Verified);
                assert_eq!(again.is_ok(), expect_verified);
                if !expect_verified {
                    assert_eq!(again, Err(FactsError::PromotionDenied(fact.id.clone())));
                }
                assert!(replay_promotions(store.journal()).is_empty());
            }
        }
    }

    #[test]
    fn promote_rejects_base_categories_and_unknown_notes() {
        let mut store = FactsStore::new();
        let r = ConsistencyReport::consistent();
        assert_eq!(
            store.promote_fact("n1", FactCategory::Retrieved, "k", 1i64.into(), &r),
            Err(FactsError::UnknownId("n1".into()))
        );
        store.record_tool(tool("t1", 1i64)).unwrap();
        let note = store.summarize_to_note(&["t1".into()], &DefaultSummarizer).unwrap();
        assert_eq!(
            store.promote_fact(&note.id, FactCategory::Given, "k", 1i64.into(), &r),
            Err(FactsError::InvalidCategory(FactCategory::Given))
        );
    }

    #[test]
    fn consistency_check_cases() {
        let mut store = FactsStore::new();
        assert_eq!(
            store.check_consistency("k", &42i64.into()).verdict(),
            ConsistencyVerdict::Unknown
        );
        let f = verified(&mut store, "t1", "k", 42.0);
        assert_eq!(
            store.check_consistency("k", &42i64.into()).verdict(),
            ConsistencyVerdict::Consistent
        );
        let report = store.check_consistency("k", &17i64.into());
        assert_eq!(report.verdict(), ConsistencyVerdict::Conflict);
        assert_eq!(report.conflicting_fact_ids(), &[f.id]);
        assert_eq!(
            store.check_consistency("other", &17i64.into()).verdict(),
            ConsistencyVerdict::Unknown
        );
    }

    #[test]
    fn provenance_chain_lengths() {
        let mut store = FactsStore::new();
        store.record_tool(tool("t1", 5i64)).unwrap();
        store.record_tool(tool("t2", 5i64)).unwrap();
        let note = store
            .summarize_to_note(&["t1".into(), "t2".into()], &DefaultSummarizer)
            .unwrap();
        let fact = store
            .promote_fact(
                &note.id,
                FactCategory::Derived,
                "k",
                5i64.into(),
                &ConsistencyReport::consistent(),
            )
            .unwrap();
        let chain = store.provenance_chain(&fact.id).unwrap();
        assert_eq!(chain.len(), 4);
        assert_eq!(chain[0], ProvenanceLink::Fact(fact.id.clone()));
        assert_eq!(chain[3], ProvenanceLink::Tool("t2".into()));

        let given = store
            .assert_fact(FactCategory::Given, "q", "paris".into())
            .unwrap();
        assert_eq!(store.provenance_chain(&given.id).unwrap().len(), 1);
        assert!(matches!(
            store.provenance_chain("missing"),
            Err(FactsError::UnknownId(_))
        ));
    }

    #[test]
    fn lines_round_trip_preserves_store() {
        let mut store = FactsStore::new();
        let f = verified(&mut store, "t1", "k", 42.0);
        store.assert_fact(FactCategory::Assumption, "a", true.into()).unwrap();
        store.set_status(&f.id, FactStatus::Refuted).unwrap();
        let text = store.to_lines();
        assert!(text.lines().next().unwrap().starts_with(r#"{"kind":"tool""#));
        let back = FactsStore::from_lines(&text).unwrap();
        assert_eq!(back.to_lines(), text);
        assert_eq!(back.fact(&f.id).unwrap().status, FactStatus::Refuted);
        assert!(matches!(
            FactsStore::from_lines("{not json"),
            Err(FactsError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn versions_strictly_increase() {
        let mut store = FactsStore::new();
        let mut last = store.version();
        let f = verified(&mut store, "t1", "k", 1.0);
        assert!(store.version() > last);
        last = store.version();
        store.set_status(&f.id, FactStatus::Unverified).unwrap();
        assert!(store.version() > last);
    }

    #[test]
    fn sync_disjoint_keys() {
        let mut a = FactsStore::new();
        verified(&mut a, "t1", "k1", 1.0);
        let mut b = FactsStore::new();
        b.next_fact = 100;
        verified(&mut b, "t2", "k2", 2.0);
        let (merged, conflicts) = synchronize(&[a.clone(), b.clone()]);
        assert!(conflicts.is_empty());
        assert_eq!(merged.facts().count(), 2);
        assert_eq!(merged.version(), a.version().max(b.version()) + 1);
    }

    #[test]
    fn sync_identical_fact_is_idempotent() {
        let mut a = FactsStore::new();
        verified(&mut a, "t1", "k", 42.0);
        let (merged, conflicts) = synchronize(&[a.clone(), a.clone()]);
        assert!(conflicts.is_empty());
        assert_eq!(merged.facts().count(), 1);

        let mut b = FactsStore::new();
        b.next_fact = 50;
        verified(&mut b, "t9", "k", 42.0);
        let (merged, conflicts) = synchronize(&[a, b]);
        assert!(conflicts.is_empty());
        assert_eq!(merged.verified_for("k").count(), 1);
    }

    #[test]
    fn sync_divergent_values_downgrade_both() {
        let mut a = FactsStore::new();
        verified(&mut a, "t1", "k", 42.0);
        let mut b = FactsStore::new();
        b.next_fact = 50;
        verified(&mut b, "t2", "k", 17.0);
        let (merged, conflicts) = synchronize(&[a.clone(), b.clone()]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].0, "k");
        assert_eq!(conflicts[0].1.len(), 2);
        assert_eq!(merged.facts().count(), 2);
        assert!(merged.facts().all(|f| f.status == FactStatus::Unverified));
        let (swapped, conflicts2) = synchronize(&[b, a]);
        assert_eq!(swapped.to_lines(), merged.to_lines());
        assert_eq!(conflicts2, conflicts);
    }

    #[test]
    fn replay_flags_bad_promotion() {
        let mut store = FactsStore::new();
        verified(&mut store, "t1", "k", 1.0);
        assert!(replay_promotions(store.journal()).is_empty());
        let mut records = store.journal().to_vec();
        if let Some(StoreRecord::Fact(f)) = records.last_mut() {
            f.validation = Some(ConsistencyVerdict::Unknown);
        }
        assert_eq!(replay_promotions(&records).len(), 1);
    }
}
